//! Autoregressive rollout bookkeeping demonstrated with an exact oracle
//! velocity field: each window re-uses the last two generated frames as
//! references and contributes the remaining frames of its window.

use mvdiff::sampling::{
    autoregressive_rollout, sampling_noise, RolloutStart, SampleConfig, VelocityModel,
};
use mvdiff::tensor::Tensor;

/// Always points straight at a fixed target clip.
struct TowardTarget {
    z0: Tensor,
    eps: Tensor,
}

impl VelocityModel for TowardTarget {
    fn velocity(
        &self,
        _z: &Tensor,
        _t: &Tensor,
        _cond: bool,
        _drop_temporal: bool,
    ) -> mvdiff::Result<Tensor> {
        Ok(Tensor::from_fn(self.z0.shape(), |i| self.z0.data()[i] - self.eps.data()[i]))
    }
}

fn main() -> mvdiff::Result<()> {
    let (t_n, k_ref) = (6usize, 2usize);
    let frame_shape = [2usize, 4, 4, 3];
    let sh: Vec<usize> = std::iter::once(t_n).chain(frame_shape).collect();
    let cfg = SampleConfig { steps: 8, cfg_scale: 1.0, seed: 42, windows: 3 };

    // window w generates a ramp so the output frames are recognizable
    let mk = |start: usize| -> mvdiff::Result<Box<dyn VelocityModel>> {
        let z0 = Tensor::from_fn(&sh, |i| {
            let frame = start + i / (2 * 4 * 4 * 3);
            frame as f64 / 100.0
        });
        let eps = sampling_noise(&sh, cfg.seed, &format!("rollout-w{}", start / (t_n - k_ref)));
        Ok(Box::new(TowardTarget { z0, eps }))
    };

    let out = autoregressive_rollout(&mk, RolloutStart::Generate, t_n, k_ref, &frame_shape, &cfg)?;
    println!("windows: {}, total frames: {}", cfg.windows, out.video.shape()[0]);
    println!("window starts: {:?}", out.window_starts);
    let per: usize = frame_shape.iter().product();
    for t in 0..out.video.shape()[0] {
        println!("frame {:2}: value {:.2}", t, out.video.data()[t * per] * 100.0);
    }
    assert_eq!(out.video.shape()[0], cfg.windows * (t_n - k_ref));
    Ok(())
}
