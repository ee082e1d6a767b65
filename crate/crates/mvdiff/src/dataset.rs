//! Scene dataset layout: one directory per scene holding `meta` (TOML with
//! the rig, attributes, trajectories, and lanes) and `frames.bin` (tensor
//! container with the rendered clip). The meta file round-trips the world
//! exactly, so annotations and rays are derived rather than stored.

use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Pose};
use crate::scenesim::{
    render_clip, ActorTrack, SceneWorld, TimeOfDay, Weather,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct PoseMeta {
    rotation: Vec<f64>,
    translation: [f64; 3],
}

impl PoseMeta {
    fn from(p: &Pose) -> Self {
        PoseMeta { rotation: p.rotation.0.to_vec(), translation: p.translation }
    }

    fn to_pose(&self) -> Result<Pose> {
        let r: [f64; 9] = self
            .rotation
            .as_slice()
            .try_into()
            .map_err(|_| Error::Validation("rotation must have 9 entries".into()))?;
        Pose::new(Mat3(r), self.translation)
    }
}

#[derive(Serialize, Deserialize)]
struct ActorMeta {
    extent: [f64; 3],
    color: [f64; 3],
    poses: Vec<PoseMeta>,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsMeta {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    horizon: usize,
    width: usize,
    height: usize,
    front_view: usize,
    attributes: Vec<[String; 2]>,
    intrinsics: Vec<IntrinsicsMeta>,
    mounts: Vec<PoseMeta>,
    ego: Vec<PoseMeta>,
    lanes: Vec<Vec<[f64; 3]>>,
    actors: Vec<ActorMeta>,
}

fn world_to_meta(world: &SceneWorld) -> SceneMeta {
    SceneMeta {
        seed: world.seed,
        horizon: world.horizon,
        width: world.width,
        height: world.height,
        front_view: world.front_view,
        attributes: world
            .attributes
            .iter()
            .map(|(t, w)| [t.token().to_string(), w.token().to_string()])
            .collect(),
        intrinsics: world
            .intrinsics
            .iter()
            .map(|k| IntrinsicsMeta { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy })
            .collect(),
        mounts: world.mounts.iter().map(PoseMeta::from).collect(),
        ego: world.ego.iter().map(PoseMeta::from).collect(),
        lanes: world.lanes.clone(),
        actors: world
            .actors
            .iter()
            .map(|a| ActorMeta {
                extent: a.extent,
                color: a.color,
                poses: a.poses.iter().map(PoseMeta::from).collect(),
            })
            .collect(),
    }
}

fn meta_to_world(meta: SceneMeta) -> Result<SceneWorld> {
    let attributes = meta
        .attributes
        .iter()
        .map(|[t, w]| Ok((TimeOfDay::parse(t)?, Weather::parse(w)?)))
        .collect::<Result<Vec<_>>>()?;
    let poses = |v: &[PoseMeta]| v.iter().map(PoseMeta::to_pose).collect::<Result<Vec<_>>>();
    Ok(SceneWorld {
        lanes: meta.lanes,
        actors: meta
            .actors
            .into_iter()
            .map(|a| {
                Ok(ActorTrack { extent: a.extent, poses: poses(&a.poses)?, color: a.color })
            })
            .collect::<Result<Vec<_>>>()?,
        ego: poses(&meta.ego)?,
        mounts: poses(&meta.mounts)?,
        intrinsics: meta
            .intrinsics
            .iter()
            .map(|k| CameraIntrinsics { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy })
            .collect(),
        front_view: meta.front_view,
        attributes,
        horizon: meta.horizon,
        width: meta.width,
        height: meta.height,
        seed: meta.seed,
    })
}

/// Render and persist one scene under `dir` (created if absent).
pub fn write_scene(dir: &Path, world: &SceneWorld) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = toml::to_string(&world_to_meta(world))
        .map_err(|e| Error::Validation(format!("meta serialization failed: {}", e)))?;
    std::fs::write(dir.join("meta"), meta)?;
    let frames = render_clip(world, &world.rig())?;
    container::write_file(&dir.join("frames.bin"), &[("frames".to_string(), frames)])
}

/// Load a scene and its rendered clip [T, V, H, W, 3].
pub fn read_scene(dir: &Path) -> Result<(SceneWorld, Tensor)> {
    let meta_text = std::fs::read_to_string(dir.join("meta"))?;
    let meta: SceneMeta = toml::from_str(&meta_text)
        .map_err(|e| Error::Validation(format!("bad scene meta: {}", e)))?;
    let world = meta_to_world(meta)?;
    let arrays = container::read_file(&dir.join("frames.bin"))?;
    let frames = container::find(&arrays, "frames")?.clone();
    let want = vec![world.horizon, world.views(), world.height, world.width, 3];
    if frames.shape() != want.as_slice() {
        return Err(Error::Validation(format!(
            "frames shape {:?} does not match meta {:?}",
            frames.shape(),
            want
        )));
    }
    Ok((world, frames))
}

/// Binary portable pixmap (P6) dump of one [H, W, 3] image in [0, 1].
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let sh = img.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::Validation(format!("ppm wants [H,W,3], got {:?}", sh)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", sh[1], sh[0]).into_bytes();
    bytes.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(std::fs::write(path, bytes)?)
}

/// Scene directory names under a dataset root, sorted.
pub fn list_scenes(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().join("meta").exists() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!("no scenes under {}", root.display())));
    }
    Ok(names)
}
