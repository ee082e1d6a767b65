//! Pinhole cameras in a unified coordinate frame, per-pixel ray maps, and
//! the Fourier+MLP ray encoder.
//!
//! Conventions: camera frame is +z forward, +x right, +y down; extrinsics
//! map camera coordinates into the unified frame, which is anchored at the
//! front camera of frame 0 (identity rotation, zero translation there by
//! construction). Pixel centers sit at (u+0.5, v+0.5).

use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

pub const ORTHO_TOL: f64 = 1e-6;

// ---- small fixed-size linear algebra ---------------------------------

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [f64; 9]);

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    v_scale(a, 1.0 / v_norm(a))
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// Rotation about the vertical (+y, pointing down) axis; positive angle
    /// turns the forward axis toward +x (rightward yaw).
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat3([c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
    }

    /// Rotation about the +x axis (pitch).
    pub fn pitch(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat3([1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [0f64; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = (0..3).map(|k| self.0[i * 3 + k] * o.0[k * 3 + j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn mulv(&self, v: Vec3) -> Vec3 {
        [
            self.0[0] * v[0] + self.0[1] * v[1] + self.0[2] * v[2],
            self.0[3] * v[0] + self.0[4] * v[1] + self.0[5] * v[2],
            self.0[6] * v[0] + self.0[7] * v[1] + self.0[8] * v[2],
        ]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .zip(&o.0)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_rotation(&self) -> bool {
        let rtr = self.transpose().mul(self);
        rtr.max_abs_diff(&Mat3::identity()) <= ORTHO_TOL && (self.det() - 1.0).abs() <= ORTHO_TOL
    }
}

/// Rigid transform mapping points from its local frame into the parent
/// frame: p_parent = R p_local + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: [0.0; 3] }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.is_rotation() {
            return Err(Error::Validation("rotation is not orthonormal with det +1".into()));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn compose(&self, inner: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(&inner.rotation),
            translation: v_add(self.rotation.mulv(inner.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: v_scale(rt.mulv(self.translation), -1.0) }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        v_add(self.rotation.mulv(p), self.translation)
    }
}

// ---- cameras ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation(format!("focal lengths must be positive: {:?}", self)));
        }
        if !(0.0 < self.cx && self.cx < width as f64 && 0.0 < self.cy && self.cy < height as f64)
        {
            return Err(Error::Validation(format!(
                "principal point {:?} outside {}x{}",
                (self.cx, self.cy),
                width,
                height
            )));
        }
        Ok(())
    }

    /// K^-1 applied to a homogeneous pixel coordinate.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Camera-frame point to pixel coordinates; None if at or behind the
    /// optical plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p[2] <= 1e-9 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

/// Extrinsics map camera coordinates into the unified frame.
pub type CameraExtrinsics = Pose;

/// Per-(frame, view) cameras, all expressed in the unified frame.
#[derive(Clone, Debug)]
pub struct UnifiedRig {
    frames: usize,
    views: usize,
    front_view: usize,
    intrinsics: Vec<CameraIntrinsics>, // per view
    extrinsics: Vec<CameraExtrinsics>, // t * views + v
}

impl UnifiedRig {
    /// Re-expresses every camera in the frame of (frame 0, front view).
    /// `ego_poses[t]` maps ego to world, `mount_poses[v]` maps camera to ego.
    pub fn build(
        intrinsics: &[CameraIntrinsics],
        ego_poses: &[Pose],
        mount_poses: &[Pose],
        front_view: usize,
    ) -> Result<UnifiedRig> {
        let views = intrinsics.len();
        let frames = ego_poses.len();
        if views == 0 || frames == 0 || mount_poses.len() != views || front_view >= views {
            return Err(Error::Validation(format!(
                "rig needs matching views/mounts and a valid front view ({} views, {} mounts, front {})",
                views,
                mount_poses.len(),
                front_view
            )));
        }
        for p in ego_poses.iter().chain(mount_poses) {
            if !p.rotation.is_rotation() {
                return Err(Error::Validation("non-orthonormal rotation in rig input".into()));
            }
        }
        let anchor = ego_poses[0].compose(&mount_poses[front_view]);
        let world_to_unified = anchor.inverse();
        let mut extrinsics = Vec::with_capacity(frames * views);
        for (t, ego) in ego_poses.iter().enumerate() {
            for (v, mount) in mount_poses.iter().enumerate() {
                if t == 0 && v == front_view {
                    // exact identity at the anchor, not merely numerical
                    extrinsics.push(Pose::identity());
                } else {
                    extrinsics.push(world_to_unified.compose(ego).compose(mount));
                }
            }
        }
        Ok(UnifiedRig { frames, views, front_view, intrinsics: intrinsics.to_vec(), extrinsics })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn front_view(&self) -> usize {
        self.front_view
    }

    pub fn intrinsics(&self, v: usize) -> &CameraIntrinsics {
        &self.intrinsics[v]
    }

    pub fn extrinsics(&self, t: usize, v: usize) -> &CameraExtrinsics {
        &self.extrinsics[t * self.views + v]
    }

    /// Project a unified-frame point into view (t, v). None when behind the
    /// camera.
    pub fn project_point(&self, t: usize, v: usize, p: Vec3) -> Option<(f64, f64)> {
        let e = self.extrinsics(t, v);
        let cam = e.inverse().apply(p);
        self.intrinsics[v].project(cam)
    }
}

/// Per-pixel ray origins and unit directions in the unified frame,
/// both H x W x 3.
#[derive(Clone, Debug)]
pub struct RayMap {
    pub origins: Tensor,
    pub directions: Tensor,
    pub height: usize,
    pub width: usize,
}

pub fn compute_ray_map(rig: &UnifiedRig, t: usize, v: usize, height: usize, width: usize) -> Result<RayMap> {
    if t >= rig.frames() || v >= rig.views() {
        return Err(Error::Validation(format!("(t={}, v={}) not present in rig", t, v)));
    }
    let intr = rig.intrinsics(v);
    intr.validate(width, height)?;
    let e = rig.extrinsics(t, v);
    let mut origins = Tensor::zeros(&[height, width, 3]);
    let mut directions = Tensor::zeros(&[height, width, 3]);
    for py in 0..height {
        for px in 0..width {
            let d_cam = intr.unproject(px as f64 + 0.5, py as f64 + 0.5);
            let d = v_normalize(e.rotation.mulv(d_cam));
            let base = (py * width + px) * 3;
            for a in 0..3 {
                origins.data_mut()[base + a] = e.translation[a];
                directions.data_mut()[base + a] = d[a];
            }
        }
    }
    Ok(RayMap { origins, directions, height, width })
}

// ---- ray encoding ----------------------------------------------------

/// Frequency count of the sinusoidal ray encoding; 2*j numbers per value,
/// 96 per ray (3 origin + 3 direction values).
pub const RAY_FREQS: usize = 8;

/// Per value c, concatenates [sin(2^0 pi c), cos(2^0 pi c), ...,
/// sin(2^(j-1) pi c), cos(2^(j-1) pi c)]; value blocks in input order.
pub fn fourier_encode(values: &[f64], j: usize) -> Vec<f64> {
    debug_assert!(j >= 1);
    let mut out = Vec::with_capacity(values.len() * 2 * j);
    for &c in values {
        let mut freq = std::f64::consts::PI;
        for _ in 0..j {
            out.push((freq * c).sin());
            out.push((freq * c).cos());
            freq *= 2.0;
        }
    }
    out
}

/// Two-layer MLP over the ray encoding.
#[derive(Clone, Debug)]
pub struct RayMlpParams {
    pub w1: Tensor, // [in, hidden]
    pub b1: Tensor, // [hidden]
    pub w2: Tensor, // [hidden, out]
    pub b2: Tensor, // [out]
}

pub struct RayMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Sinusoidal features for every pixel ray, [H*W, 96]. Origins are scaled
/// by 1/origin_scale to land in the encoder's well-behaved range.
pub fn ray_features(map: &RayMap, origin_scale: f64) -> Tensor {
    let n = map.height * map.width;
    let mut data = Vec::with_capacity(n * RAY_FREQS * 12);
    for i in 0..n {
        let mut vals = [0f64; 6];
        for a in 0..3 {
            vals[a] = map.origins.data()[i * 3 + a] / origin_scale;
            vals[3 + a] = map.directions.data()[i * 3 + a];
        }
        data.extend(fourier_encode(&vals, RAY_FREQS));
    }
    Tensor::new(vec![n, RAY_FREQS * 12], data).unwrap()
}

/// Per-pixel embedding: MLP(encoding) at every pixel, H x W x C.
pub fn ray_embed(tape: &mut Tape, map: &RayMap, params: &RayMlpVars, origin_scale: f64) -> Result<Var> {
    let feats = ray_features(map, origin_scale);
    let in_dim = tape.value(params.w1).shape()[0];
    if feats.shape()[1] != in_dim {
        return Err(Error::Dim(format!(
            "ray MLP input width {} but encoding width {}",
            in_dim,
            feats.shape()[1]
        )));
    }
    let x = tape.constant(feats);
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add(h, params.b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, params.w2)?;
    let y = tape.add(y, params.b2)?;
    let c = tape.value(params.w2).shape()[1];
    tape.reshape(y, &[map.height, map.width, c])
}

/// ray_embed followed by patch-average pooling, [h, w, C]. The second
/// (affine) layer commutes with the average, so it is applied after
/// pooling; the result is identical to pooling the per-pixel embedding.
pub fn ray_embed_pooled(
    tape: &mut Tape,
    map: &RayMap,
    params: &RayMlpVars,
    origin_scale: f64,
    patch: usize,
) -> Result<Var> {
    let feats = ray_features(map, origin_scale);
    let x = tape.constant(feats);
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add(h, params.b1)?;
    let h = tape.gelu(h);
    let hidden = tape.value(params.w1).shape()[1];
    let h4 = tape.reshape(h, &[1, map.height, map.width, hidden])?;
    let pooled = tape.avgpool_patch(h4, patch)?;
    let (ph, pw) = (map.height / patch, map.width / patch);
    let flat = tape.reshape(pooled, &[ph * pw, hidden])?;
    let y = tape.matmul(flat, params.w2)?;
    let y = tape.add(y, params.b2)?;
    let c = tape.value(params.w2).shape()[1];
    tape.reshape(y, &[ph, pw, c])
}

/// Batched `ray_embed_pooled` over stacked slot features [B*H*W, F],
/// returning [B, h, w, C]. Identical math, one matmul per layer.
pub fn ray_embed_pooled_batch(
    tape: &mut Tape,
    feats: Tensor,
    slots: usize,
    height: usize,
    width: usize,
    params: &RayMlpVars,
    patch: usize,
) -> Result<Var> {
    if feats.shape()[0] != slots * height * width {
        return Err(Error::Dim(format!(
            "expected {} stacked rays, got {:?}",
            slots * height * width,
            feats.shape()
        )));
    }
    let x = tape.constant(feats);
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add(h, params.b1)?;
    let h = tape.gelu(h);
    let hidden = tape.value(params.w1).shape()[1];
    let h4 = tape.reshape(h, &[slots, height, width, hidden])?;
    let pooled = tape.avgpool_patch(h4, patch)?;
    let (ph, pw) = (height / patch, width / patch);
    let flat = tape.reshape(pooled, &[slots * ph * pw, hidden])?;
    let y = tape.matmul(flat, params.w2)?;
    let y = tape.add(y, params.b2)?;
    let c = tape.value(params.w2).shape()[1];
    tape.reshape(y, &[slots, ph, pw, c])
}

/// A randomized but valid rig for tests and oracles: jittered intrinsics,
/// a wandering ego trajectory, and views spread around the yaw circle.
pub fn random_rig(seed: u64, frames: usize, views: usize, width: usize, height: usize) -> UnifiedRig {
    let mut rng = rng_stream(seed, "random-rig");
    let intr: Vec<CameraIntrinsics> = (0..views)
        .map(|_| CameraIntrinsics {
            fx: width as f64 * (0.6 + 0.4 * rng.gen::<f64>()),
            fy: width as f64 * (0.6 + 0.4 * rng.gen::<f64>()),
            cx: width as f64 * (0.4 + 0.2 * rng.gen::<f64>()),
            cy: height as f64 * (0.4 + 0.2 * rng.gen::<f64>()),
        })
        .collect();
    let mut ego = Vec::with_capacity(frames);
    let mut pos = [0f64; 3];
    let mut heading = 0f64;
    for t in 0..frames {
        if t > 0 {
            heading += (rng.gen::<f64>() - 0.5) * 0.2;
            let step = 0.5 + rng.gen::<f64>() * 1.5;
            pos = v_add(pos, Mat3::yaw(heading).mulv([0.0, 0.0, step]));
            pos[1] += (rng.gen::<f64>() - 0.5) * 0.05;
        }
        ego.push(Pose { rotation: Mat3::yaw(heading), translation: pos });
    }
    let mounts: Vec<Pose> = (0..views)
        .map(|v| {
            let yaw = v as f64 * std::f64::consts::TAU / views as f64;
            Pose {
                rotation: Mat3::yaw(yaw).mul(&Mat3::pitch((rng.gen::<f64>() - 0.5) * 0.1)),
                translation: [
                    (rng.gen::<f64>() - 0.5) * 2.0,
                    (rng.gen::<f64>() - 0.5) * 0.2,
                    (rng.gen::<f64>() - 0.5) * 2.0,
                ],
            }
        })
        .collect();
    UnifiedRig::build(&intr, &ego, &mounts, 0).unwrap()
}
