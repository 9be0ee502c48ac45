//! The five subcommands: thin orchestration over the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use mmpt::data::{ClipStore, DiskStore, MemStore};
use mmpt::decoder::{load_checkpoint, DecoderW, Mode, ModelConfig};
use mmpt::error::{Error, Result};
use mmpt::metrics::{evaluate, EvalSetting, GtOracle, PointmapModel, WindowPredictor};
use mmpt::refine::{cache_stats, extend, forward_window_cached};
use mmpt::synth::{generate_dataset, DatasetSpec, Style};
use mmpt::tokenize::unpatchify;
use mmpt::train::{Schedule, TrainConfig};
use mmpt::verify::{run_all, Fault};
use mmpt::{io, ply, Scalar};

use crate::config::{FileConfig, Resolver};

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "trajectory" => Ok(Mode::Trajectory),
        "pairwise" => Ok(Mode::Pairwise),
        other => Err(Error::Config(format!("unknown mode {other:?}"))),
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Trajectory => "trajectory",
        Mode::Pairwise => "pairwise",
    }
}

fn settings_canon(settings: &[EvalSetting]) -> String {
    settings
        .iter()
        .map(|s| format!("{}:{}", s.frames, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn checkpoint_dtype(dir: &Path) -> Result<String> {
    let kv = io::read_kv_file(&dir.join("config.txt"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    kv.get("dtype")
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("{}: config lacks dtype", dir.display())))
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Dataset root to write into.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Rendering style: flat or textured.
    #[arg(long)]
    pub style: Option<String>,
    /// Training clips to render.
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub val_clips: Option<usize>,
    #[arg(long)]
    pub test_clips: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Objects per scene.
    #[arg(long)]
    pub objects: Option<usize>,
    /// Per-frame object drift magnitude.
    #[arg(long)]
    pub motion: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn gen_data(args: &GenDataArgs, file: &FileConfig) -> Result<()> {
    let mut r = Resolver::new(file);
    let style = r.parsed(
        "style",
        args.style.clone(),
        "flat",
        Style::parse,
        |v| v.name().to_string(),
    )?;
    let clips = r.value("clips", args.clips, 8)?;
    let val_clips = r.value("val_clips", args.val_clips, 2)?;
    let test_clips = r.value("test_clips", args.test_clips, 0)?;
    let frames = r.value("frames", args.frames, 12)?;
    let image_size = r.value("image_size", args.image_size, 32)?;
    let objects = r.value("objects", args.objects, 3)?;
    let motion = r.value("motion", args.motion, 0.05)?;
    let seed = r.value("seed", args.seed, 0)?;
    r.note("out", args.out.display(), "flag");
    r.print();

    let counts: BTreeMap<String, usize> = [
        ("train".to_string(), clips),
        ("val".to_string(), val_clips),
        ("test".to_string(), test_clips),
    ]
    .into_iter()
    .collect();
    let spec = DatasetSpec { image_size, frames, objects, motion, style, seed, counts };
    let written = generate_dataset(&args.out, &spec)?;
    println!("wrote {written} clips under {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root produced by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub draws_per_epoch: Option<usize>,
    /// Contiguous frames per training window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// real-then-synthetic, synthetic-then-real, synthetic-only, or joint.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Length of the real phase, in epochs.
    #[arg(long)]
    pub switch_epoch: Option<usize>,
    /// trajectory or pairwise.
    #[arg(long)]
    pub mode: Option<String>,
    /// Pin every layerscale at zero (ablation baseline).
    #[arg(long)]
    pub freeze_layerscale: bool,
    /// f32 or f64.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    /// Validation protocol, e.g. 2:6,4:3.
    #[arg(long)]
    pub val_settings: Option<String>,
    #[arg(long)]
    pub val_slice_len: Option<usize>,
}

/// A style with no clips only fails once the schedule draws from it.
fn open_style_or_empty<S: Scalar>(
    root: &Path,
    split: &str,
    style: Style,
) -> Result<Box<dyn ClipStore<S>>> {
    match DiskStore::<S>::open_style(root, split, style) {
        Ok(s) => Ok(Box::new(s)),
        Err(Error::Dataset(_)) => Ok(Box::new(MemStore::<S>::new(Vec::new()))),
        Err(e) => Err(e),
    }
}

fn run_train<S: Scalar>(args: &TrainArgs, cfg: &TrainConfig, model: &ModelConfig) -> Result<()> {
    let flat = open_style_or_empty::<S>(&args.data, "train", Style::Flat)?;
    let textured = open_style_or_empty::<S>(&args.data, "train", Style::Textured)?;
    let val = DiskStore::<S>::open(&args.data, "val")?;
    let mut w = DecoderW::<S>::init(model, cfg.seed)?;

    let header: String = cfg
        .val_settings
        .iter()
        .map(|s| format!(", val_{}", s.label()))
        .collect();
    println!("epoch, phase, train_loss{header}");
    let outcome = mmpt::train::train(
        &mut w,
        flat.as_ref(),
        textured.as_ref(),
        &val,
        cfg,
        Some(&args.out),
        Some(&mut |row| println!("{}", row.to_line())),
    )?;

    let mut max_ls = 0.0f64;
    for (name, t) in w.visit() {
        if name.ends_with(".ls") {
            for &v in t.data() {
                max_ls = max_ls.max(v.as_f64().abs());
            }
        }
    }
    println!("max layerscale magnitude = {max_ls:.6e}");
    if outcome.best_val.is_finite() {
        println!("best validation median = {:.6e}", outcome.best_val);
    }
    println!("checkpoints under {}", args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let mut r = Resolver::new(file);
    let epochs = r.value("epochs", args.epochs, 30)?;
    let draws_per_epoch = r.value("draws_per_epoch", args.draws_per_epoch, 16)?;
    let window = r.value("window", args.window, 5)?;
    let lr = r.value("lr", args.lr, 1e-4)?;
    let weight_decay = r.value("weight_decay", args.weight_decay, 0.05)?;
    let seed = r.value("seed", args.seed, 0)?;
    let schedule = r.parsed(
        "schedule",
        args.schedule.clone(),
        "real_then_synthetic",
        |s| Schedule::parse(&s.replace('-', "_")),
        |v| v.name().to_string(),
    )?;
    let switch_epoch = r.value("switch_epoch", args.switch_epoch, 5)?;
    let mode = r.parsed("mode", args.mode.clone(), "trajectory", parse_mode, |v| {
        mode_name(*v).to_string()
    })?;
    let freeze = r.value(
        "freeze_layerscale",
        if args.freeze_layerscale { Some(true) } else { None },
        false,
    )?;
    let dtype = r.value("dtype", args.dtype.clone(), "f32".to_string())?;
    let image_size = r.value("image_size", args.image_size, 32)?;
    let patch = r.value("patch", args.patch, 8)?;
    let dim = r.value("dim", args.dim, 64)?;
    let heads = r.value("heads", args.heads, 4)?;
    let layers = r.value("layers", args.layers, 4)?;
    let head_hidden = r.value("head_hidden", args.head_hidden, 128)?;
    let val_settings = r.parsed(
        "val_settings",
        args.val_settings.clone(),
        "2:6,4:3",
        EvalSetting::parse_list,
        |v| settings_canon(v),
    )?;
    let val_slice_len = r.value("val_slice_len", args.val_slice_len, 12)?;
    r.note("data", args.data.display(), "flag");
    r.note("out", args.out.display(), "flag");
    r.print();

    let cfg = TrainConfig {
        epochs,
        draws_per_epoch,
        window,
        lr,
        weight_decay,
        seed,
        schedule,
        switch_epoch,
        mode,
        freeze_layerscale: freeze,
        val_settings,
        slice_len: val_slice_len,
    };
    let model = ModelConfig {
        image_size,
        patch,
        dim,
        heads,
        layers,
        head_hidden,
        ..Default::default()
    };
    match dtype.as_str() {
        "f32" => run_train::<f32>(args, &cfg, &model),
        "f64" => run_train::<f64>(args, &cfg, &model),
        other => Err(Error::Config(format!("unknown dtype {other:?}"))),
    }
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint directory written by train.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Dataset root holding the clip.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Clip to decode; the split's first clip when omitted.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// First frame of the window.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Frames appended to the cached window after the initial pass.
    #[arg(long)]
    pub extend: Option<usize>,
    /// Directory for predicted pointmaps.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Directory for colored PLY exports.
    #[arg(long, value_name = "DIR")]
    pub ply: Option<PathBuf>,
    #[arg(long)]
    pub dump_cache_stats: bool,
}

fn run_infer<S: Scalar>(
    args: &InferArgs,
    split: &str,
    start: usize,
    window: usize,
    extend_by: usize,
) -> Result<()> {
    let w = load_checkpoint::<S>(&args.checkpoint)?;
    let store = DiskStore::<S>::open(&args.data, split)?;
    let clip_name = match &args.clip {
        Some(c) => c.clone(),
        None => store
            .names()
            .first()
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("{split} split has no clips")))?,
    };
    println!(
        "clip = {clip_name} ({})",
        if args.clip.is_some() { "flag" } else { "default" }
    );
    let clip = store.load(&clip_name)?;

    let s = w.cfg.image_size;
    if clip.frames.iter().any(|f| f.pixels.shape() != [s, s, 3]) {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {s}x{s} frames, clip {clip_name} differs"
        )));
    }
    if window < 2 {
        return Err(Error::Config("window needs at least two frames".into()));
    }
    let positions: Vec<usize> = (start..start + window).collect();
    let frames = clip.window(&positions)?;
    let mut cache = forward_window_cached(&w, &frames)?;
    for k in 0..extend_by {
        let idx = start + window + k;
        let frame = clip.frames.get(idx).ok_or_else(|| {
            Error::Dataset(format!(
                "clip {clip_name} has {} frames, extend wants frame {idx}",
                clip.len()
            ))
        })?;
        cache = extend(&w, &cache, frame)?;
    }
    if args.dump_cache_stats {
        println!("{}", cache_stats(&cache));
    }

    let grid = w.cfg.grid()?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(dir) = &args.ply {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut clouds = 0usize;
    for (&(i, j), pair) in &cache.pairs {
        // Pair (i, j): frame i's points in camera i, frame j's in camera i.
        let ego = unpatchify(&grid, &pair.ego_map)?;
        let tgt = unpatchify(&grid, &pair.tgt_map)?;
        if let Some(dir) = &args.out {
            io::write_tensor(&dir.join(format!("pred_X_{i}_{j}.mmpt")), &ego)?;
            io::write_tensor(&dir.join(format!("pred_Y_{j}_{i}.mmpt")), &tgt)?;
        }
        if let Some(dir) = &args.ply {
            let flat = [s * s, 3];
            ply::write_ply(
                &dir.join(format!("pred_X_{i}_{j}.ply")),
                &ego.reshaped(&flat)?,
                &ply::colors_from_frame(&clip.frames[i]),
            )?;
            ply::write_ply(
                &dir.join(format!("pred_Y_{j}_{i}.ply")),
                &tgt.reshaped(&flat)?,
                &ply::colors_from_frame(&clip.frames[j]),
            )?;
        }
        clouds += 2;
    }
    println!("pairs = {}, pointclouds = {clouds}", cache.pairs.len());
    Ok(())
}

pub fn infer(args: &InferArgs, file: &FileConfig) -> Result<()> {
    let mut r = Resolver::new(file);
    let split = r.value("split", args.split.clone(), "test".to_string())?;
    let start = r.value("start", args.start, 0)?;
    let window = r.value("window", args.window, 5)?;
    let extend_by = r.value("extend", args.extend, 0)?;
    let dtype = checkpoint_dtype(&args.checkpoint)?;
    r.note("checkpoint", args.checkpoint.display(), "flag");
    r.note("data", args.data.display(), "flag");
    r.note("dtype", &dtype, "checkpoint");
    r.print();

    match dtype.as_str() {
        "f32" => run_infer::<f32>(args, &split, start, window, extend_by),
        "f64" => run_infer::<f64>(args, &split, start, window, extend_by),
        other => Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset root to score against.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint directory written by train.
    #[arg(long, value_name = "DIR", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score stored ground truth against itself (pipeline calibration).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub split: Option<String>,
    /// Frames per evaluation slice.
    #[arg(long)]
    pub slice_len: Option<usize>,
    /// Comma list of frames:stride settings, e.g. 2:6,4:3,6:2.
    #[arg(long)]
    pub settings: Option<String>,
    /// trajectory or pairwise.
    #[arg(long)]
    pub mode: Option<String>,
}

fn eval_table<S: Scalar, M: PointmapModel<S>>(
    model: &M,
    store: &dyn ClipStore<S>,
    settings: &[EvalSetting],
    slice_len: usize,
) -> Result<()> {
    println!("setting, frames, stride, windows, pairs, median_error");
    for &s in settings {
        let out = evaluate(model, store, s, slice_len)?;
        println!(
            "{}, {}, {}, {}, {}, {:.6e}",
            s.label(),
            s.frames,
            s.stride,
            out.windows,
            out.pairs,
            out.median_error
        );
    }
    Ok(())
}

fn run_eval<S: Scalar>(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    settings: &[EvalSetting],
    slice_len: usize,
    mode: Mode,
) -> Result<()> {
    let w = load_checkpoint::<S>(checkpoint)?;
    let store = DiskStore::<S>::open(data, split)?;
    let model = WindowPredictor { weights: &w, mode };
    eval_table(&model, &store, settings, slice_len)
}

pub fn eval(args: &EvalArgs, file: &FileConfig) -> Result<()> {
    let mut r = Resolver::new(file);
    let split = r.value("split", args.split.clone(), "val".to_string())?;
    let slice_len = r.value("slice_len", args.slice_len, 12)?;
    let settings = r.parsed(
        "settings",
        args.settings.clone(),
        "2:6,4:3,6:2",
        EvalSetting::parse_list,
        |v| settings_canon(v),
    )?;
    let mode = r.parsed("mode", args.mode.clone(), "trajectory", parse_mode, |v| {
        mode_name(*v).to_string()
    })?;
    r.note("data", args.data.display(), "flag");

    match (&args.checkpoint, args.oracle) {
        (Some(ckpt), false) => {
            let dtype = checkpoint_dtype(ckpt)?;
            r.note("checkpoint", ckpt.display(), "flag");
            r.note("dtype", &dtype, "checkpoint");
            r.print();
            match dtype.as_str() {
                "f32" => run_eval::<f32>(ckpt, &args.data, &split, &settings, slice_len, mode),
                "f64" => run_eval::<f64>(ckpt, &args.data, &split, &settings, slice_len, mode),
                other => Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
            }
        }
        (None, true) => {
            r.note("model", "ground-truth oracle", "flag");
            r.print();
            let store = DiskStore::<f32>::open(&args.data, &split)?;
            let model = GtOracle { store: &store };
            eval_table(&model, &store, &settings, slice_len)
        }
        (None, false) => Err(Error::Config("eval needs --checkpoint or --oracle".into())),
        (Some(_), true) => unreachable!("clap rejects the combination"),
    }
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Fault hook: drop the causal restriction inside trajectory attention.
    #[arg(long, hide = true)]
    pub inject_causality_fault: bool,
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let fault = if args.inject_causality_fault {
        Fault::CorruptCausalMask
    } else {
        Fault::None
    };
    for res in run_all(fault) {
        match res.error {
            None => println!("VERIFY {}: PASS", res.name),
            Some(detail) => {
                println!("VERIFY {}: FAIL", res.name);
                return Err(Error::Invariant { name: res.name, detail });
            }
        }
    }
    Ok(())
}
