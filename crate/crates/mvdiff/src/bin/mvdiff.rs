//! One executable for the whole pipeline: synthetic data generation,
//! staged training, sampling, long rollouts, attribute edits, and
//! evaluation. Every command prints the config hash it ran with and is
//! deterministic under fixed (config, seed).
//!
//! Exit codes: 0 ok, 2 validation, 3 numeric failure, 4 acceptance failure.

use clap::{Parser, Subcommand, ValueEnum};
use mvdiff::conditioning::{CondKeep, Vocab};
use mvdiff::config::RunConfig;
use mvdiff::container;
use mvdiff::dataset::{list_scenes, read_scene, write_ppm, write_scene};
use mvdiff::error::{Error, Result};
use mvdiff::evalx;
use mvdiff::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig};
use mvdiff::sampling::{
    autoregressive_rollout, ModelSampler, Rollout, RolloutStart, VelocityModel,
};
use mvdiff::scenesim::{
    export_annotations, generate_scene, render_clip, view_name, SceneSpec, SceneWorld,
    TimeOfDay, Weather,
};
use mvdiff::tensor::Tensor;
use mvdiff::training::{
    latent_to_pixels, prepare_scene, train_step, OptimState, SceneBundle, Stage,
};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mvdiff", about = "desk-scale multi-view driving video diffusion")]
struct Cli {
    /// Config file (TOML); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (only 1 is supported; kept for reproducibility).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TaskArg {
    /// First k_ref ground-truth frames as references.
    Vp,
    /// No references; leading k_ref generated frames are dropped.
    Vg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Cameras per scene (1 for stage-1 data).
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage, writing a checkpoint and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue this stage from its own checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample one window on a scene's conditions.
    Sample(SampleArgs),
    /// Autoregressive multi-window generation.
    Rollout(SampleArgs),
    /// Re-sample with an overridden attribute token.
    Edit(SampleArgs),
    /// Compare a generated video against ground truth.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Scene directory supplying rig and annotations.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First scene frame the videos correspond to.
        #[arg(long, default_value_t = 0)]
        start_frame: usize,
    },
}

#[derive(Parser)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, value_enum, default_value_t = TaskArg::Vp)]
    task: TaskArg,
    /// Attribute token override (edit only), e.g. night or snowy.
    #[arg(long)]
    attr_override: Option<String>,
    #[arg(long)]
    force: bool,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    });
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        return Err(Error::Validation(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads != 1 {
        return Err(Error::Validation(format!(
            "only --threads 1 is supported, got {}",
            cli.threads
        )));
    }
    let cfg = load_config(&cli.config)?;
    println!("config hash: {:016x}", cfg.hash());
    match cli.cmd {
        Cmd::GenData { out, seed, scenes, views, horizon, force } => {
            cmd_gen_data(&cfg, &out, seed, scenes, views, horizon, force)
        }
        Cmd::Train { data, out, stage, steps, seed, resume } => {
            cmd_train(&cfg, &data, &out, stage, steps, seed, resume)
        }
        Cmd::Sample(a) => cmd_generate(&cfg, a, GenMode::Sample),
        Cmd::Rollout(a) => cmd_generate(&cfg, a, GenMode::Rollout),
        Cmd::Edit(a) => cmd_generate(&cfg, a, GenMode::Edit),
        Cmd::Eval { gen, gt, scene, out, start_frame } => {
            cmd_eval(&cfg, &gen, &gt, &scene, &out, start_frame)
        }
    }
}

fn cmd_gen_data(
    cfg: &RunConfig,
    out: &Path,
    seed: Option<u64>,
    scenes: Option<usize>,
    views: Option<usize>,
    horizon: Option<usize>,
    force: bool,
) -> Result<()> {
    let base_seed = seed.unwrap_or(cfg.data.seed);
    let count = scenes.unwrap_or(cfg.data.scenes);
    let spec = SceneSpec {
        actors: cfg.data.actors,
        horizon: horizon.unwrap_or(cfg.data.horizon),
        views: views.unwrap_or(cfg.model.views),
        width: cfg.model.width,
        height: cfg.model.height,
        attr_switch: false,
    };
    ensure_out_dir(out, force)?;
    let mut manifest = format!("seed: {}\nscenes: {}\n", base_seed, count);
    for i in 0..count {
        let name = format!("scene_{:03}", i);
        let world = generate_scene(base_seed.wrapping_add(i as u64), &spec)?;
        write_scene(&out.join(&name), &world)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    std::fs::write(out.join("manifest"), manifest)?;
    println!("wrote {} scenes to {}", count, out.display());
    Ok(())
}

fn stage_ckpt(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("ckpt_stage{}.bin", stage.index()))
}

/// Bundles for training: worlds longer than the model window are cut to
/// its first frames.
fn training_bundles(data: &Path, frames: usize, vocab: &Vocab) -> Result<Vec<SceneBundle>> {
    let mut bundles = Vec::new();
    for name in list_scenes(data)? {
        let (world, clip) = read_scene(&data.join(&name))?;
        if world.horizon == frames {
            bundles.push(prepare_scene(world, &clip, vocab)?);
        } else {
            let w = world.slice(0, frames)?;
            let sh: Vec<usize> = std::iter::once(frames).chain(clip.shape()[1..].iter().copied()).collect();
            let per: usize = clip.shape()[1..].iter().product();
            let head = Tensor::new(sh, clip.data()[..frames * per].to_vec())?;
            bundles.push(prepare_scene(w, &head, vocab)?);
        }
    }
    Ok(bundles)
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    stage_no: u8,
    steps: Option<usize>,
    seed: Option<u64>,
    resume: bool,
) -> Result<()> {
    let stage = Stage::from_index(stage_no as usize)?;
    let vocab = Vocab::standard();
    let run_seed = seed.unwrap_or(cfg.data.seed);
    let steps = steps.unwrap_or(cfg.train.steps);
    let mcfg = if stage == Stage::I {
        ModelConfig { views: 1, ..cfg.model.clone() }
    } else {
        cfg.model.clone()
    };
    let bundles = training_bundles(data, mcfg.frames, &vocab)?;
    for b in &bundles {
        if stage == Stage::I && b.world.views() != 1 {
            return Err(Error::Validation(format!(
                "stage 1 requires V=1 clips, dataset has {} views",
                b.world.views()
            )));
        }
        if b.world.views() != mcfg.views {
            return Err(Error::Validation(format!(
                "dataset has {} views, model wants {}",
                b.world.views(),
                mcfg.views
            )));
        }
    }

    std::fs::create_dir_all(out)?;
    let template = init_params(&cfg.model, vocab.len(), run_seed);
    let ckpt = stage_ckpt(out, stage);
    let log_path = out.join(format!("loss_stage{}.log", stage.index()));
    let (mut params, start_step) = if resume {
        let (p, hash) = load_checkpoint(&ckpt, &template)?;
        if hash != cfg.hash() {
            return Err(Error::Validation(format!(
                "checkpoint config hash {:016x} does not match {:016x}",
                hash,
                cfg.hash()
            )));
        }
        let done = std::fs::read_to_string(&log_path)
            .map(|s| s.lines().count())
            .unwrap_or(0);
        (p, done)
    } else if let Some(prev) = stage.prev() {
        let (p, hash) = load_checkpoint(&stage_ckpt(out, prev), &template)?;
        if hash != cfg.hash() {
            return Err(Error::Validation(format!(
                "stage {} checkpoint config hash {:016x} does not match {:016x}",
                prev.index(),
                hash,
                cfg.hash()
            )));
        }
        (p, 0)
    } else {
        (template.clone(), 0)
    };

    let mut opt = OptimState::new(&params, cfg.train.weight_decay);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(start_step > 0)
        .truncate(start_step == 0)
        .write(true)
        .open(&log_path)?;
    for step in start_step..start_step + steps {
        let rec = train_step(
            &mut params,
            &mut opt,
            &bundles,
            &mcfg,
            &cfg.train,
            stage,
            run_seed,
            step,
        )?;
        writeln!(log, "{} {} {:.6}", rec.step, rec.task.name(), rec.loss)?;
    }
    save_checkpoint(&ckpt, &params, cfg.hash())?;
    println!("stage {} done: {} steps, checkpoint {}", stage.index(), steps, ckpt.display());
    Ok(())
}

enum GenMode {
    Sample,
    Rollout,
    Edit,
}

fn apply_override(world: &mut SceneWorld, token: &str) -> Result<()> {
    if let Ok(tod) = TimeOfDay::parse(token) {
        for a in world.attributes.iter_mut() {
            a.0 = tod;
        }
        return Ok(());
    }
    if let Ok(wx) = Weather::parse(token) {
        for a in world.attributes.iter_mut() {
            a.1 = wx;
        }
        return Ok(());
    }
    Err(Error::Vocabulary(format!("unknown attribute token '{}'", token)))
}

fn cmd_generate(cfg: &RunConfig, args: SampleArgs, mode: GenMode) -> Result<()> {
    let vocab = Vocab::standard();
    let mcfg = &cfg.model;
    let template = init_params(mcfg, vocab.len(), 0);
    let (params, ckpt_hash) = load_checkpoint(&args.ckpt, &template)?;
    if ckpt_hash != cfg.hash() {
        return Err(Error::Validation(format!(
            "checkpoint config hash {:016x} does not match {:016x}",
            ckpt_hash,
            cfg.hash()
        )));
    }
    let (world, _) = read_scene(&args.scene)?;
    let override_token = match (&mode, &args.attr_override) {
        (GenMode::Edit, Some(t)) => Some(t.clone()),
        (GenMode::Edit, None) => {
            return Err(Error::Validation("edit needs --attr-override".into()))
        }
        (_, Some(_)) => {
            return Err(Error::Validation("--attr-override only applies to edit".into()))
        }
        (_, None) => None,
    };

    let mut scfg = cfg.sample.clone();
    if let Some(s) = args.seed {
        scfg.seed = s;
    }
    scfg.windows = match mode {
        GenMode::Rollout => args.windows.unwrap_or(cfg.sample.windows),
        _ => match args.windows {
            Some(1) | None => 1,
            Some(w) => {
                return Err(Error::Validation(format!(
                    "sample/edit are single-window; got --windows {}",
                    w
                )))
            }
        },
    };

    let (t_n, k_ref) = (mcfg.frames, cfg.train.k_ref);
    let needed = (scfg.windows - 1) * (t_n - k_ref) + t_n;
    if world.horizon < needed {
        return Err(Error::Validation(format!(
            "scene horizon {} too short for {} windows ({} frames)",
            world.horizon, scfg.windows, needed
        )));
    }

    // per-window velocity models; conditions rebuilt for each window's
    // unified frame, attribute override applied to conditions only
    let model_for = |start: usize| -> mvdiff::Result<Box<dyn VelocityModel + '_>> {
        let mut w = world.slice(start, t_n)?;
        if let Some(tok) = &override_token {
            apply_override(&mut w, tok)?;
        }
        let clip = render_clip(&w, &w.rig())?;
        let bundle = prepare_scene(w, &clip, &vocab)?;
        Ok(Box::new(ModelSampler::new(&params, mcfg, &bundle, CondKeep::all())?))
    };

    let frame_shape = [mcfg.views, mcfg.height, mcfg.width, 3usize];
    let (start, start_frame) = match args.task {
        TaskArg::Vg => (None, k_ref),
        TaskArg::Vp => {
            let head = world.slice(0, t_n)?;
            let clip = render_clip(&head, &head.rig())?;
            let per: usize = frame_shape.iter().product();
            let refs = Tensor::new(
                vec![k_ref, mcfg.views, mcfg.height, mcfg.width, 3],
                mvdiff::training::pixels_to_latent(&clip).data()[..k_ref * per].to_vec(),
            )?;
            (Some(refs), 0)
        }
    };
    let rollout: Rollout = match &start {
        Some(refs) => autoregressive_rollout(
            &model_for,
            RolloutStart::Refs(refs),
            t_n,
            k_ref,
            &frame_shape,
            &scfg,
        )?,
        None => autoregressive_rollout(
            &model_for,
            RolloutStart::Generate,
            t_n,
            k_ref,
            &frame_shape,
            &scfg,
        )?,
    };
    let video = latent_to_pixels(&rollout.video);

    ensure_out_dir(&args.out, args.force)?;
    container::write_file(&args.out.join("video.bin"), &[("video".to_string(), video.clone())])?;
    // matching ground-truth frames for evaluation
    let gt_len = video.shape()[0];
    let gt_world = world.slice(start_frame, gt_len)?;
    let gt = render_clip(&gt_world, &gt_world.rig())?;
    container::write_file(&args.out.join("gt.bin"), &[("gt".to_string(), gt)])?;

    let frames_dir = args.out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let sh = video.shape().to_vec();
    let per_img = sh[2] * sh[3] * 3;
    for t in 0..sh[0] {
        for v in 0..sh[1] {
            let base = (t * sh[1] + v) * per_img;
            let img = Tensor::new(
                vec![sh[2], sh[3], 3],
                video.data()[base..base + per_img].to_vec(),
            )?;
            write_ppm(&frames_dir.join(format!("frame_{:03}_{}.ppm", t, view_name(v))), &img)?;
        }
    }

    let mut meta = format!(
        "config_hash: {:016x}\nseed: {}\nwindows: {}\nstart_frame: {}\nframes: {}\n",
        cfg.hash(),
        scfg.seed,
        scfg.windows,
        start_frame,
        sh[0]
    );
    if let Some(tok) = &override_token {
        meta.push_str(&format!("attr_override: {}\n", tok));
    }
    std::fs::write(args.out.join("report.txt"), meta)?;
    println!("wrote {} frames to {}", sh[0], args.out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    gen: &Path,
    gt: &Path,
    scene: &Path,
    out: &Path,
    start_frame: usize,
) -> Result<()> {
    let gen_video = container::first(&container::read_file(gen)?)?;
    let gt_video = container::first(&container::read_file(gt)?)?;
    if gen_video.shape() != gt_video.shape() {
        return Err(Error::Validation(format!(
            "video shapes differ: {:?} vs {:?}",
            gen_video.shape(),
            gt_video.shape()
        )));
    }
    let (world, _) = read_scene(scene)?;
    let sliced = world.slice(start_frame, gen_video.shape()[0])?;
    let rig = sliced.rig();
    let ann = export_annotations(&sliced, &rig);
    let report = evalx::evaluate(&gen_video, &gt_video, &ann.boxes, &rig)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, report.serialize())?;
    print!("{}", report.serialize());
    let gt_seam = evalx::seam_consistency(&gt_video, &rig)?;
    let gt_flicker = evalx::flicker(&gt_video)?;
    cfg.eval.check(&report, gt_seam, gt_flicker)
}
