//! Overfit a tiny model on two scenes through the three-stage schedule:
//! stage 1 trains the temporal path on single-view clips, stage 2 adds
//! cross-view and condition pathways, stage 3 fine-tunes everything.

use mvdiff::conditioning::Vocab;
use mvdiff::model::{init_params, ModelConfig};
use mvdiff::scenesim::{generate_scene, render_clip, SceneSpec};
use mvdiff::training::{prepare_scene, train_step, OptimState, Stage, TrainConfig};

fn main() -> mvdiff::Result<()> {
    let vocab = Vocab::standard();
    let mcfg = ModelConfig {
        frames: 4,
        views: 6,
        height: 16,
        width: 24,
        patch: 8,
        channels: 32,
        blocks: 2,
        heads: 2,
    };
    let mcfg1 = ModelConfig { views: 1, ..mcfg.clone() };
    let tcfg = TrainConfig { k_ref: 2, lr: 2e-3, ..Default::default() };

    let bundle = |seed, views| -> mvdiff::Result<_> {
        let spec = SceneSpec { actors: 2, horizon: 4, views, width: 24, height: 16, ..Default::default() };
        let world = generate_scene(seed, &spec)?;
        let clip = render_clip(&world, &world.rig())?;
        prepare_scene(world, &clip, &vocab)
    };
    let single = vec![bundle(1, 1)?, bundle(2, 1)?];
    let multi = vec![bundle(3, 6)?, bundle(4, 6)?];

    let mut params = init_params(&mcfg, vocab.len(), 0);
    let mut opt = OptimState::new(&params, tcfg.weight_decay);
    for (stage, scenes, mc, steps) in [
        (Stage::I, &single, &mcfg1, 40),
        (Stage::II, &multi, &mcfg, 40),
        (Stage::III, &multi, &mcfg, 120),
    ] {
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..steps {
            let log = train_step(&mut params, &mut opt, scenes, mc, &tcfg, stage, 0, step)?;
            if step == 0 {
                first = log.loss;
            }
            last = log.loss;
        }
        println!("stage {}: loss {:.4} -> {:.4} over {} steps", stage.index(), first, last, steps);
    }
    Ok(())
}
