//! Classifier-free-guided Euler sampling of the rectified flow, plus the
//! k_ref-frame autoregressive rollout for long clips. Condition features
//! are cached once per window; each Euler step only pays for the
//! denoiser forward passes.

use crate::conditioning::CondKeep;
use crate::error::{Error, Result};
use crate::model::{unimlvg_forward, CondVars, ModelConfig, ModelVars, ParamSet};
use crate::rng::rng_stream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{build_cond_vars, SceneBundle};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub windows: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 50, cfg_scale: 3.0, seed: 0, windows: 1 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Validation("steps must be at least 1".into()));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::Validation("cfg scale must be nonnegative".into()));
        }
        if self.windows < 1 {
            return Err(Error::Validation("need at least one window".into()));
        }
        Ok(())
    }
}

/// v = v_uncond + s * (v_cond - v_uncond).
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::Dim(format!(
            "cfg shapes {:?} vs {:?}",
            v_cond.shape(),
            v_uncond.shape()
        )));
    }
    Ok(Tensor::from_fn(v_cond.shape(), |i| {
        v_uncond.data()[i] + s * (v_cond.data()[i] - v_uncond.data()[i])
    }))
}

/// A velocity field the sampler can integrate; `conditional` selects the
/// conditioned or the null CFG branch.
pub trait VelocityModel {
    fn velocity(
        &self,
        z_t: &Tensor,
        t_slot: &Tensor,
        conditional: bool,
        drop_temporal: bool,
    ) -> Result<Tensor>;
}

/// The real denoiser with condition features cached across Euler steps.
pub struct ModelSampler<'a> {
    params: &'a ParamSet,
    mcfg: &'a ModelConfig,
    cached: CachedConds,
    view_mask: Vec<bool>,
}

struct CachedConds {
    adapter: Option<Vec<Tensor>>,
    ray: Option<Tensor>,
    text: Option<Tensor>,
}

impl<'a> ModelSampler<'a> {
    pub fn new(
        params: &'a ParamSet,
        mcfg: &'a ModelConfig,
        bundle: &SceneBundle,
        keep: CondKeep,
    ) -> Result<Self> {
        // conditions depend only on (params, scene): evaluate once
        let mut tape = Tape::new();
        let vars = ModelVars::new(&mut tape, params, mcfg, &|_| false);
        let cv = build_cond_vars(&mut tape, bundle, &vars, mcfg, keep)?;
        let cached = CachedConds {
            adapter: cv
                .adapter
                .map(|ls| ls.iter().map(|&l| tape.value(l).clone()).collect()),
            ray: cv.ray.map(|r| tape.value(r).clone()),
            text: cv.text.map(|t| tape.value(t).clone()),
        };
        Ok(ModelSampler { params, mcfg, cached, view_mask: vec![true; bundle.world.views()] })
    }
}

impl VelocityModel for ModelSampler<'_> {
    fn velocity(
        &self,
        z_t: &Tensor,
        t_slot: &Tensor,
        conditional: bool,
        drop_temporal: bool,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ModelVars::new(&mut tape, self.params, self.mcfg, &|_| false);
        let conds = if conditional {
            CondVars {
                adapter: self
                    .cached
                    .adapter
                    .as_ref()
                    .map(|ls| ls.iter().map(|l| tape.constant(l.clone())).collect()),
                ray: self.cached.ray.as_ref().map(|r| tape.constant(r.clone())),
                text: self.cached.text.as_ref().map(|t| tape.constant(t.clone())),
            }
        } else {
            CondVars::null()
        };
        let zv = tape.constant(z_t.clone());
        let out = unimlvg_forward(
            &mut tape,
            self.mcfg,
            &vars,
            zv,
            t_slot,
            &conds,
            &self.view_mask,
            drop_temporal,
            false,
        )?;
        Ok(tape.value(out).clone())
    }
}

/// The Gaussian the sampler starts from, deterministic in (seed, label).
pub fn sampling_noise(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut rng = rng_stream(seed, label);
    let n: usize = shape.iter().product();
    let mut d = Vec::with_capacity(n);
    for _ in 0..n {
        d.push(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    }
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Integrate the velocity field from noise (t=1) to data (t=0).
/// `refs` supplies clean latent content at mask=1 slots; those slots are
/// held fixed (timestep 0) and returned bitwise unchanged.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample(
    model: &dyn VelocityModel,
    refs: &Tensor, // [T, V, H, W, 3]
    mask: &Tensor, // [T, V]
    cfg: &SampleConfig,
    noise_label: &str,
    drop_temporal: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    let sh = refs.shape().to_vec();
    if sh.len() != 5 {
        return Err(Error::Dim(format!("expected [T,V,H,W,3] refs, got {:?}", sh)));
    }
    let (t_n, v_n) = (sh[0], sh[1]);
    if mask.shape() != [t_n, v_n] {
        return Err(Error::Dim(format!("mask {:?} for video {:?}", mask.shape(), sh)));
    }
    let per_slot = sh[2] * sh[3] * sh[4];
    let eps = sampling_noise(&sh, cfg.seed, noise_label);
    let is_ref = |i: usize| mask.data()[i / per_slot] == 1.0;
    let mut z = Tensor::from_fn(&sh, |i| if is_ref(i) { refs.data()[i] } else { eps.data()[i] });

    let dt = 1.0 / cfg.steps as f64;
    for i in (1..=cfg.steps).rev() {
        let t_i = i as f64 / cfg.steps as f64;
        let t_slot =
            Tensor::from_fn(&[t_n, v_n], |s| if mask.data()[s] == 1.0 { 0.0 } else { t_i });
        let v_c = model.velocity(&z, &t_slot, true, drop_temporal)?;
        let v = if cfg.cfg_scale == 1.0 {
            v_c
        } else {
            let v_u = model.velocity(&z, &t_slot, false, drop_temporal)?;
            cfg_velocity(&v_c, &v_u, cfg.cfg_scale)?
        };
        for j in 0..z.numel() {
            if !is_ref(j) {
                z.data_mut()[j] += dt * v.data()[j];
            }
        }
        if !z.all_finite() {
            return Err(Error::Numeric(format!("non-finite sampler state at step {}", i)));
        }
    }
    Ok(z)
}

/// How window 0 of a rollout starts.
pub enum RolloutStart<'a> {
    /// Provided clean reference frames [k_ref, V, H, W, 3]; they are part
    /// of the output. Total frames: k_ref + n * (T - k_ref).
    Refs(&'a Tensor),
    /// No references: window 0 is plain video generation and its first
    /// k_ref frames are discarded so every window contributes T - k_ref.
    /// Total frames: n * (T - k_ref).
    Generate,
}

pub struct Rollout {
    /// [total, V, H, W, 3] latent video.
    pub video: Tensor,
    /// Absolute index of each window's first newly generated frame.
    pub window_starts: Vec<usize>,
}

/// Window-by-window long-video generation: each window conditions on the
/// last k_ref frames already in the output, generating T - k_ref new ones.
/// `model_for(start)` must return a velocity field conditioned for
/// absolute frames [start, start + T).
#[allow(clippy::too_many_arguments)]
pub fn autoregressive_rollout<'a>(
    model_for: &dyn Fn(usize) -> Result<Box<dyn VelocityModel + 'a>>,
    start: RolloutStart,
    t_n: usize,
    k_ref: usize,
    frame_shape: &[usize], // [V, H, W, 3]
    cfg: &SampleConfig,
) -> Result<Rollout> {
    cfg.validate()?;
    if k_ref >= t_n {
        return Err(Error::Validation(format!("k_ref {} must be below T {}", k_ref, t_n)));
    }
    let per_frame: usize = frame_shape.iter().product();
    let mut sh = vec![t_n];
    sh.extend_from_slice(frame_shape);
    let v_n = frame_shape[0];

    let mut frames: Vec<f64> = Vec::new();
    let mut window_starts = Vec::with_capacity(cfg.windows);
    // absolute index of the first frame of the current window
    let mut cursor = 0usize;
    for w in 0..cfg.windows {
        let label = format!("rollout-w{}", w);
        let model = model_for(cursor)?;
        let (refs, mask) = if w == 0 {
            match &start {
                RolloutStart::Generate => {
                    (Tensor::zeros(&sh), Tensor::zeros(&[t_n, v_n]))
                }
                RolloutStart::Refs(r) => {
                    if r.shape() != [&[k_ref][..], frame_shape].concat().as_slice() {
                        return Err(Error::Validation(format!(
                            "window 0 refs shape {:?}, expected {} frames of {:?}",
                            r.shape(),
                            k_ref,
                            frame_shape
                        )));
                    }
                    let mut refs = Tensor::zeros(&sh);
                    refs.data_mut()[..k_ref * per_frame].copy_from_slice(r.data());
                    let mask =
                        Tensor::from_fn(&[t_n, v_n], |i| if i / v_n < k_ref { 1.0 } else { 0.0 });
                    (refs, mask)
                }
            }
        } else {
            let tail = &frames[frames.len() - k_ref * per_frame..];
            let mut refs = Tensor::zeros(&sh);
            refs.data_mut()[..k_ref * per_frame].copy_from_slice(tail);
            let mask = Tensor::from_fn(&[t_n, v_n], |i| if i / v_n < k_ref { 1.0 } else { 0.0 });
            (refs, mask)
        };
        let z = euler_sample(model.as_ref(), &refs, &mask, cfg, &label, false)?;
        // which of this window's frames are new output
        let emit_from = match (&start, w) {
            (RolloutStart::Refs(_), 0) => 0, // provided refs appear once, here
            (RolloutStart::Generate, 0) => k_ref,
            _ => k_ref, // re-used reference frames are never re-emitted
        };
        let emitted = frames.len() / per_frame;
        let ref_head = if w == 0 && matches!(start, RolloutStart::Refs(_)) { k_ref } else { 0 };
        window_starts.push(emitted + ref_head);
        frames.extend_from_slice(&z.data()[emit_from * per_frame..]);
        // each window advances the clock by the frames it freshly generates
        cursor += t_n - k_ref;
    }
    let total = frames.len() / per_frame;
    let mut out_shape = vec![total];
    out_shape.extend_from_slice(frame_shape);
    Ok(Rollout { video: Tensor::new(out_shape, frames)?, window_starts })
}
