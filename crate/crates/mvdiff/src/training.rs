//! Four-task masked rectified-flow training: per-batch task sampling,
//! reference masks, the masked velocity loss, an AdamW loop, and the
//! three-stage trainability schedule.

use crate::conditioning::{
    adapter_forward, drop_conditions, embed_global_batch, CondKeep, Vocab,
};
use crate::dataset::read_scene;
use crate::error::{Error, Result};
use crate::geometry::{
    compute_ray_map, ray_embed_pooled_batch, ray_features, CameraIntrinsics, RayMap, UnifiedRig,
};
use crate::model::{
    unimlvg_forward, CondVars, ModelConfig, ModelVars, ParamSet, ORIGIN_SCALE,
};
use crate::rng::rng_stream;
use crate::scenesim::{export_annotations, SceneWorld};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Condition images and ray maps are built at half resolution; the adapter
/// and the pooled ray embedding land on the same patch grid either way.
pub const COND_DOWN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    VP,
    IP,
    VG,
    IG,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::VP => "VP",
            TaskKind::IP => "IP",
            TaskKind::VG => "VG",
            TaskKind::IG => "IG",
        }
    }
}

/// VP:IP:VG:IG sampling weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRatios(pub [f64; 4]);

impl TaskRatios {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&r| r < 0.0) || (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("ratios {:?} must be a simplex", self.0)));
        }
        Ok(())
    }
}

impl Default for TaskRatios {
    fn default() -> Self {
        TaskRatios([0.7, 0.1, 0.1, 0.1])
    }
}

pub fn sample_task<R: Rng>(rng: &mut R, ratios: &TaskRatios) -> TaskKind {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &r) in ratios.0.iter().enumerate() {
        acc += r;
        if u < acc {
            return [TaskKind::VP, TaskKind::IP, TaskKind::VG, TaskKind::IG][i];
        }
    }
    TaskKind::IG
}

/// Reference mask M (1 = reference) plus the IG drop-temporal flag.
pub fn build_mask<R: Rng>(
    task: TaskKind,
    t_n: usize,
    v_n: usize,
    k_ref: usize,
    rng: &mut R,
) -> Result<(Tensor, bool)> {
    if k_ref >= t_n {
        return Err(Error::Validation(format!("k_ref {} must be below T {}", k_ref, t_n)));
    }
    let mut m = Tensor::zeros(&[t_n, v_n]);
    match task {
        TaskKind::VG => return Ok((m, false)),
        TaskKind::IG => return Ok((m, true)),
        TaskKind::VP | TaskKind::IP => {
            for t in 0..k_ref {
                for v in 0..v_n {
                    m.data_mut()[t * v_n + v] = 1.0;
                }
            }
            if task == TaskKind::IP {
                for i in 0..k_ref * v_n {
                    if rng.gen::<f64>() < 0.5 {
                        m.data_mut()[i] = 0.0;
                    }
                }
            }
        }
    }
    Ok((m, false))
}

/// z_t = (1 - t) z0 + t eps, slot-wise; t = 0 is clean.
pub fn rf_interpolate(z0: &Tensor, eps: &Tensor, t_slot: &Tensor) -> Result<Tensor> {
    let sh = z0.shape();
    if eps.shape() != sh || sh.len() != 5 || t_slot.shape() != [sh[0], sh[1]] {
        return Err(Error::Dim(format!(
            "rf_interpolate z0 {:?} eps {:?} t {:?}",
            sh,
            eps.shape(),
            t_slot.shape()
        )));
    }
    let per_slot = sh[2] * sh[3] * sh[4];
    Ok(Tensor::from_fn(sh, |i| {
        let t = t_slot.data()[i / per_slot];
        (1.0 - t) * z0.data()[i] + t * eps.data()[i]
    }))
}

/// Mean squared velocity error over non-reference slots of unmasked views.
pub fn masked_rf_loss(
    tape: &mut Tape,
    v_pred: Var,
    z0: &Tensor,
    eps: &Tensor,
    m: &Tensor,
    view_mask: &[bool],
) -> Result<Var> {
    let sh = tape.value(v_pred).shape().to_vec();
    if z0.shape() != sh.as_slice() || eps.shape() != sh.as_slice() {
        return Err(Error::Dim(format!("loss shapes {:?} vs {:?}", sh, z0.shape())));
    }
    let (t_n, v_n) = (sh[0], sh[1]);
    if m.shape() != [t_n, v_n] || view_mask.len() != v_n {
        return Err(Error::Dim(format!("mask {:?} for video {:?}", m.shape(), sh)));
    }
    let mut contributing = 0usize;
    let w = Tensor::from_fn(&[t_n, v_n, 1, 1, 1], |i| {
        let (t, v) = (i / v_n, i % v_n);
        if m.data()[t * v_n + v] == 0.0 && view_mask[v] {
            1.0
        } else {
            0.0
        }
    });
    for &x in w.data() {
        if x == 1.0 {
            contributing += 1;
        }
    }
    if contributing == 0 {
        return Err(Error::Validation("no unmasked slots contribute to the loss".into()));
    }
    let n = contributing * sh[2] * sh[3] * sh[4];
    let target = Tensor::from_fn(&sh, |i| z0.data()[i] - eps.data()[i]);
    let tv = tape.constant(target);
    let d = tape.sub(v_pred, tv)?;
    let d2 = tape.mul(d, d)?;
    let wv = tape.constant(w);
    let wd = tape.mul(d2, wv)?;
    let s = tape.sum_all(wd);
    Ok(tape.scale(s, 1.0 / n as f64))
}

// ---- stages -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn from_index(i: usize) -> Result<Stage> {
        match i {
            1 => Ok(Stage::I),
            2 => Ok(Stage::II),
            3 => Ok(Stage::III),
            _ => Err(Error::Validation(format!("stage must be 1, 2 or 3, got {}", i))),
        }
    }

    /// Whether a parameter (by registry name) trains in this stage.
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            Stage::I => name.contains(".temporal"),
            Stage::II => {
                name.contains(".temporal")
                    || name.contains(".crossview")
                    || name.starts_with("adapter.")
                    || name.starts_with("ray.")
                    || name.starts_with("token.")
            }
            Stage::III => true,
        }
    }

    /// Stage I runs single-view data with the cross-view sub-block forced
    /// to pass-through.
    pub fn bypass_crossview(&self) -> bool {
        matches!(self, Stage::I)
    }

    pub fn index(&self) -> usize {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    /// The stage whose checkpoint seeds this one, if any.
    pub fn prev(&self) -> Option<Stage> {
        match self {
            Stage::I => None,
            Stage::II => Some(Stage::I),
            Stage::III => Some(Stage::II),
        }
    }
}

// ---- optimizer --------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OptimState {
    /// (name, first moment, second moment), aligned with the ParamSet.
    moments: Vec<(String, Tensor, Tensor)>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        OptimState {
            moments: params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()), Tensor::zeros(t.shape())))
                .collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay adaptive-moment update. Parameters without a
/// gradient entry (frozen leaves) are left bitwise untouched.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &HashMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (name, m, v) in state.moments.iter_mut() {
        let Some(g) = grads.get(name.as_str()) else { continue };
        let p = params.get_mut(name);
        if g.shape() != p.shape() {
            return Err(Error::Dim(format!("grad shape {:?} for {}", g.shape(), name)));
        }
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mh = mi / bc1;
            let vh = vi / bc2;
            let pd = p.data_mut();
            pd[i] -= lr * (mh / (vh.sqrt() + state.eps) + state.weight_decay * pd[i]);
        }
    }
    Ok(())
}

// ---- batches ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ratios: TaskRatios,
    pub k_ref: usize,
    pub lr: f64,
    pub drop_rate: f64,
    pub steps: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ratios: TaskRatios::default(),
            k_ref: 3,
            lr: 8e-5,
            drop_rate: 0.2,
            steps: 200,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        self.ratios.validate()?;
        if self.lr <= 0.0 {
            return Err(Error::Validation("lr must be positive".into()));
        }
        if self.k_ref >= frames {
            return Err(Error::Validation(format!(
                "k_ref {} must be below T {}",
                self.k_ref, frames
            )));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Validation("drop rate outside [0,1)".into()));
        }
        Ok(())
    }
}

/// A scene with everything precomputed that does not depend on the
/// training step: centered pixels, condition images, token ids, and
/// half-resolution ray maps.
pub struct SceneBundle {
    pub world: SceneWorld,
    pub rig: UnifiedRig,
    /// [T, V, H, W, 3] in [-1, 1].
    pub z0: Tensor,
    /// [T*V, 6, H/2, W/2]: box channels then lane channels.
    pub cond_img: Tensor,
    /// T*V null-padded token sequences, flattened.
    pub token_ids: Vec<usize>,
    /// Per slot, at half resolution.
    pub ray_maps: Vec<RayMap>,
}

pub fn pixels_to_latent(frames: &Tensor) -> Tensor {
    frames.map(|v| v * 2.0 - 1.0)
}

pub fn latent_to_pixels(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub fn prepare_scene(world: SceneWorld, frames: &Tensor, vocab: &Vocab) -> Result<SceneBundle> {
    let rig = world.rig();
    let (t_n, v_n) = (world.horizon, world.views());
    let (h2, w2) = (world.height / COND_DOWN, world.width / COND_DOWN);
    let ann = export_annotations(&world, &rig);
    let mut cond = Vec::with_capacity(t_n * v_n * 6 * h2 * w2);
    for t in 0..t_n {
        for v in 0..v_n {
            let boxes = crate::conditioning::project_boxes(&ann.boxes, &rig, t, v, h2, w2);
            let lanes = crate::conditioning::rasterize_hdmap(&ann.lanes, &rig, t, v, h2, w2);
            // HWC -> CHW, boxes then lanes
            for img in [&boxes, &lanes] {
                for c in 0..3 {
                    for px in 0..h2 * w2 {
                        cond.push(img.data()[px * 3 + c]);
                    }
                }
            }
        }
    }
    let cond_img = Tensor::new(vec![t_n * v_n, 6, h2, w2], cond)?;

    let mut token_ids = Vec::with_capacity(t_n * v_n * crate::conditioning::SEQ_LEN);
    for phrase in &ann.tokens {
        token_ids.extend(vocab.encode_seq(phrase)?);
    }

    // half-resolution rig for ray maps: same poses, scaled intrinsics
    let intr2: Vec<CameraIntrinsics> = world
        .intrinsics
        .iter()
        .map(|k| CameraIntrinsics {
            fx: k.fx / COND_DOWN as f64,
            fy: k.fy / COND_DOWN as f64,
            cx: k.cx / COND_DOWN as f64,
            cy: k.cy / COND_DOWN as f64,
        })
        .collect();
    let rig2 = UnifiedRig::build(&intr2, &world.ego, &world.mounts, world.front_view)?;
    let mut ray_maps = Vec::with_capacity(t_n * v_n);
    for t in 0..t_n {
        for v in 0..v_n {
            ray_maps.push(compute_ray_map(&rig2, t, v, h2, w2)?);
        }
    }

    Ok(SceneBundle { world, rig, z0: pixels_to_latent(frames), cond_img, token_ids, ray_maps })
}

/// Load and prepare every scene under a dataset root.
pub fn load_bundles(root: &Path, vocab: &Vocab) -> Result<Vec<SceneBundle>> {
    let names = crate::dataset::list_scenes(root)?;
    names
        .iter()
        .map(|n| {
            let (world, frames) = read_scene(&root.join(n))?;
            prepare_scene(world, &frames, vocab)
        })
        .collect()
}

/// Tape-side condition features for one scene, honoring dropout flags.
pub fn build_cond_vars(
    tape: &mut Tape,
    bundle: &SceneBundle,
    vars: &ModelVars,
    cfg: &ModelConfig,
    keep: CondKeep,
) -> Result<CondVars> {
    let slots = bundle.world.horizon * bundle.world.views();
    let (gh, gw) = cfg.grid();
    let adapter = if keep.boxes || keep.hdmap {
        let mut cond = bundle.cond_img.clone();
        let half = cond.numel() / slots / 2;
        if !keep.boxes || !keep.hdmap {
            for s in 0..slots {
                let start = s * 2 * half + if keep.boxes { half } else { 0 };
                for x in &mut cond.data_mut()[start..start + half] {
                    *x = 0.0;
                }
            }
        }
        let cv = tape.constant(cond);
        Some(adapter_forward(tape, cv, &vars.adapter, gh, gw)?)
    } else {
        None
    };
    let ray = if keep.rays {
        let (h2, w2) = (bundle.world.height / COND_DOWN, bundle.world.width / COND_DOWN);
        let fdim = crate::geometry::RAY_FREQS * 12;
        let mut feats = Vec::with_capacity(slots * h2 * w2 * fdim);
        for map in &bundle.ray_maps {
            feats.extend_from_slice(ray_features(map, ORIGIN_SCALE).data());
        }
        let feats = Tensor::new(vec![slots * h2 * w2, fdim], feats)?;
        Some(ray_embed_pooled_batch(tape, feats, slots, h2, w2, &vars.ray, cfg.patch / COND_DOWN)?)
    } else {
        None
    };
    let text = if keep.global {
        Some(embed_global_batch(tape, &bundle.token_ids, slots, vars.tokens)?)
    } else {
        None
    };
    Ok(CondVars { adapter, ray, text })
}

pub struct StepLog {
    pub step: usize,
    pub task: TaskKind,
    pub loss: f64,
}

/// One optimizer step on one sampled clip. Deterministic in
/// (run_seed, step); failures carry the step seed for replay.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ParamSet,
    opt: &mut OptimState,
    scenes: &[SceneBundle],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    stage: Stage,
    run_seed: u64,
    step: usize,
) -> Result<StepLog> {
    if scenes.is_empty() {
        return Err(Error::Validation("no training scenes".into()));
    }
    let label = format!("train-step-{}", step);
    let mut rng = rng_stream(run_seed, &label);
    let scene = &scenes[rng.gen_range(0..scenes.len())];
    let (t_n, v_n) = (scene.world.horizon, scene.world.views());
    if stage == Stage::I && v_n != 1 {
        return Err(Error::Validation(format!(
            "stage 1 requires single-view clips, scene has {} views",
            v_n
        )));
    }
    let task = sample_task(&mut rng, &tcfg.ratios);
    let (mask, drop_temporal) = build_mask(task, t_n, v_n, tcfg.k_ref, &mut rng)?;
    let t_slot = Tensor::from_fn(&[t_n, v_n], |i| {
        if mask.data()[i] == 1.0 {
            0.0
        } else {
            1.0 - rng.gen::<f64>() // uniform on (0, 1]
        }
    });
    let eps = {
        let mut d = Vec::with_capacity(scene.z0.numel());
        for _ in 0..scene.z0.numel() {
            d.push(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }
        Tensor::new(scene.z0.shape().to_vec(), d)?
    };
    let z_t = rf_interpolate(&scene.z0, &eps, &t_slot)?;
    let keep = drop_conditions(&mut rng, tcfg.drop_rate)?;

    let mut tape = Tape::new();
    let vars = ModelVars::new(&mut tape, params, mcfg, &|n| stage.trainable(n));
    let conds = build_cond_vars(&mut tape, scene, &vars, mcfg, keep)?;
    let zv = tape.constant(z_t);
    let view_mask = vec![true; v_n];
    let v_pred = unimlvg_forward(
        &mut tape,
        mcfg,
        &vars,
        zv,
        &t_slot,
        &conds,
        &view_mask,
        drop_temporal,
        stage.bypass_crossview(),
    )?;
    let loss = masked_rf_loss(&mut tape, v_pred, &scene.z0, &eps, &mask, &view_mask)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} (seed {}, label {})",
            step, run_seed, label
        )));
    }
    let grads = tape
        .backward(loss)
        .map_err(|e| Error::Numeric(format!("{} at step {} (seed {}, label {})", e, step, run_seed, label)))?;
    let mut by_name: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in &vars.index {
        if let Some(g) = grads.get(*var) {
            by_name.insert(name.clone(), g.clone());
        }
    }
    adamw_step(params, &by_name, opt, tcfg.lr)?;
    Ok(StepLog { step, task, loss: loss_val })
}
