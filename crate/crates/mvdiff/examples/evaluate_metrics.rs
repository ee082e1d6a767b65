//! The evaluation suite on known inputs: ground truth scores itself at
//! the PSNR cap and tight seam/flicker baselines, while a corrupted clip
//! trips every band.

use mvdiff::evalx::{evaluate, EvalBands};
use mvdiff::rng::rng_stream;
use mvdiff::scenesim::{export_annotations, generate_scene, render_clip, SceneSpec};
use mvdiff::tensor::Tensor;
use rand::Rng;

fn main() -> mvdiff::Result<()> {
    let world = generate_scene(77, &SceneSpec::default())?;
    let rig = world.rig();
    let gt = render_clip(&world, &rig)?;
    let ann = export_annotations(&world, &rig);

    let clean = evaluate(&gt, &gt, &ann.boxes, &rig)?;
    println!("ground truth vs itself:\n{}", clean.serialize());

    let mut rng = rng_stream(0, "corrupt");
    let noisy = Tensor::from_fn(gt.shape(), |i| {
        (gt.data()[i] + (rng.gen::<f64>() - 0.5) * 0.8).clamp(0.0, 1.0)
    });
    let bad = evaluate(&noisy, &gt, &ann.boxes, &rig)?;
    println!("corrupted clip:\n{}", bad.serialize());

    let bands = EvalBands::default();
    println!("clean passes bands: {}", bands.check(&clean, clean.seam_err, clean.flicker).is_ok());
    match bands.check(&bad, clean.seam_err, clean.flicker) {
        Err(e) => println!("corrupted fails: {}", e),
        Ok(()) => println!("corrupted unexpectedly passed"),
    }
    Ok(())
}
