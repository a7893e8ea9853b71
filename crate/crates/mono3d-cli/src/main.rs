//! Command-line front end: synthesize datasets, train, evaluate, and run
//! single-scene detection with a top-down map.
//!
//! Relative output paths resolve under `MONO3D_OUT_ROOT` when that variable
//! is set. Exit codes: 0 on success, 2 on usage errors, 1 on failures.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use mono3d::checkpoint::{load_model, save_model};
use mono3d::config::RunConfig;
use mono3d::datakit::{load_scene, synth_dataset, LoadedScene, Manifest};
use mono3d::geometry::Box3D;
use mono3d::interpreter::{Prompt2D, PromptSet};
use mono3d::model::DetectorModel;
use mono3d::seeding;
use mono3d::train::{evaluate_model, ground_truth_scenes, train, PromptMode, TrainStats};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mono3d", version, about = "Promptable monocular 3D detection on desk scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train a detector on a manifest dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest dataset.
    Eval(EvalArgs),
    /// Detect objects in one scene and draw a top-down map.
    Detect(DetectArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to render.
    #[arg(long, default_value_t = 32)]
    count: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint path; defaults to <out_dir>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory for logs; defaults to the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; required unless --oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prompt with annotated boxes or points.
    #[arg(long)]
    prompt_mode: Option<PromptModeArg>,
    /// Drop predictions whose category is absent from the scene.
    #[arg(long)]
    target_aware: bool,
    /// Use the predicted camera instead of prompting with the true one.
    #[arg(long)]
    no_intrinsic_prompt: bool,
    /// Replay ground truth as predictions to sanity-check the scorer.
    #[arg(long)]
    oracle: bool,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Scene id from the manifest.
    #[arg(long)]
    scene: String,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt with annotated boxes or points.
    #[arg(long)]
    prompt_mode: Option<PromptModeArg>,
    /// Use the predicted camera instead of prompting with the true one.
    #[arg(long)]
    no_intrinsic_prompt: bool,
    /// Write detections as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PromptModeArg {
    Box,
    Point,
}

impl From<PromptModeArg> for PromptMode {
    fn from(v: PromptModeArg) -> PromptMode {
        match v {
            PromptModeArg::Box => PromptMode::Box,
            PromptModeArg::Point => PromptMode::Point,
        }
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Detect(a) => run_detect(a),
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Relative outputs land under MONO3D_OUT_ROOT when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("MONO3D_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_dataset(dir: &Path) -> anyhow::Result<(Manifest, Vec<LoadedScene>)> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|m| load_scene(dir, m))
        .collect::<mono3d::error::Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    let out = resolve_out(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = synth_dataset(&out, a.count, &cfg.synth, cfg.seed)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.train.seed = seeding::derive_named(cfg.seed, "train");

    let (_, scenes) = load_dataset(&a.data)?;
    if scenes.is_empty() {
        bail!("dataset {} has no scenes", a.data.display());
    }
    let first = &scenes[0].meta;
    if (first.width, first.height) != (cfg.model.image_width, cfg.model.image_height) {
        bail!(
            "dataset images are {}x{} but the model takes {}x{}",
            first.width,
            first.height,
            cfg.model.image_width,
            cfg.model.image_height
        );
    }

    let out_dir = resolve_out(a.out.as_deref().unwrap_or(&cfg.out_dir));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt_path = match &a.checkpoint {
        Some(p) => resolve_out(p),
        None => out_dir.join("model.ckpt"),
    };

    let mut model = DetectorModel::new(cfg.model.clone(), seeding::derive_named(cfg.seed, "model-init"))?;
    eprintln!(
        "training {} scalars on {} scenes for {} steps",
        model.params.scalar_count(),
        scenes.len(),
        cfg.train.steps
    );
    let stats = train(&mut model, &scenes, &cfg.optim, &cfg.train)?;
    save_model(&ckpt_path, &model)?;
    write_train_log(&out_dir.join("train_log.json"), &stats)?;

    let first_loss = stats.history.first().copied().unwrap_or(f64::NAN);
    let last_loss = stats.history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps, loss {first_loss:.6} -> {last_loss:.6}, checkpoint {}",
        stats.steps,
        ckpt_path.display()
    );
    Ok(())
}

fn write_train_log(path: &Path, stats: &TrainStats) -> anyhow::Result<()> {
    let log = serde_json::json!({ "steps": stats.steps, "loss": stats.history });
    std::fs::write(path, serde_json::to_string_pretty(&log)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    let (manifest, scenes) = load_dataset(&a.data)?;

    let mut opts = cfg.eval.clone();
    if let Some(mode) = a.prompt_mode {
        opts.prompt_mode = mode.into();
    }
    opts.target_aware |= a.target_aware;
    if a.no_intrinsic_prompt {
        opts.intrinsic_prompt = false;
    }

    let report = if a.oracle {
        let evals = ground_truth_scenes(&manifest.scenes)?;
        mono3d::evalkit::evaluate(&evals, &opts.thresholds)
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("--checkpoint is required unless --oracle"))?;
        let model = load_model(ckpt)?;
        let (report, _) = evaluate_model(&model, &scenes, &opts)?;
        report
    };

    println!(
        "scenes {}  predictions {}  ground truths {}",
        report.scenes, report.predictions, report.truths
    );
    for (tau, ap) in &report.per_threshold {
        println!("  ap @ overlap {tau:.2}: {ap:.4}");
    }
    for (cat, ap) in &report.per_category {
        println!("  ap [{cat}]: {ap:.4}");
    }
    println!("mean ap: {:.4}", report.mean_ap);

    if let Some(out) = &a.out {
        let out = resolve_out(out);
        std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_detect(a: DetectArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    let manifest = Manifest::load(&a.data.join("manifest.json"))?;
    let meta = manifest
        .scenes
        .iter()
        .find(|m| m.id == a.scene)
        .ok_or_else(|| anyhow!("scene {:?} not in manifest", a.scene))?;
    let scene = load_scene(&a.data, meta)?;
    let model = load_model(&a.checkpoint)?;

    let mode: PromptMode = a.prompt_mode.map(Into::into).unwrap_or(cfg.eval.prompt_mode);
    let prompts: Vec<Prompt2D> = meta
        .objects
        .iter()
        .map(|o| match mode {
            PromptMode::Box => {
                let [x1, y1, x2, y2] = o.box2d;
                Prompt2D::Box { x1, y1, x2, y2 }
            }
            PromptMode::Point => mono3d::datakit::point_prompt(o),
        })
        .collect();
    let pset = PromptSet {
        prompts,
        intrinsics: if a.no_intrinsic_prompt { None } else { Some(meta.camera()?) },
    };
    let det = model.detect(&scene.image, &pset)?;

    let k = det.k_used;
    println!(
        "scene {}  camera used fx {:.2} fy {:.2} cx {:.2} cy {:.2}",
        meta.id, k.fx, k.fy, k.cx, k.cy
    );
    let labeled: Vec<(String, Box3D)> = meta
        .objects
        .iter()
        .zip(&det.boxes)
        .map(|(o, b)| (o.category.clone(), b.clone()))
        .collect();
    for (cat, b) in &labeled {
        println!(
            "  {cat:<8} score {:.3}  center ({:+.2}, {:+.2}, {:.2})  dims {:.2}x{:.2}x{:.2}",
            b.score, b.center.x, b.center.y, b.center.z, b.dims.x, b.dims.y, b.dims.z
        );
    }
    println!("{}", bev_map(&labeled));

    if let Some(out) = &a.json {
        let out = resolve_out(out);
        let objs: Vec<_> = labeled
            .iter()
            .map(|(cat, b)| {
                serde_json::json!({
                    "category": cat,
                    "score": b.score,
                    "center": [b.center.x, b.center.y, b.center.z],
                    "dims": [b.dims.x, b.dims.y, b.dims.z],
                    "rotation": b.rotation.as_slice(),
                })
            })
            .collect();
        std::fs::write(&out, serde_json::to_string_pretty(&objs)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

const BEV_COLS: usize = 57;
const BEV_ROWS: usize = 21;

/// Top-down map: x runs right, depth runs up, the camera sits at the bottom
/// center. Dots mark 1 m grid lines, hashes trace box footprints, letters
/// mark centers.
fn bev_map(boxes: &[(String, Box3D)]) -> String {
    let mut x_extent: f64 = 2.0;
    let mut z_extent: f64 = 4.0;
    for (_, b) in boxes {
        for c in b.corners() {
            x_extent = x_extent.max(c.x.abs() + 0.5);
            z_extent = z_extent.max(c.z + 0.5);
        }
    }
    x_extent = x_extent.ceil();
    z_extent = z_extent.ceil();

    let mut cells = vec![vec![' '; BEV_COLS]; BEV_ROWS];
    let to_cell = |x: f64, z: f64| -> Option<(usize, usize)> {
        let col = (x + x_extent) / (2.0 * x_extent) * (BEV_COLS - 1) as f64;
        let row = (1.0 - z / z_extent) * (BEV_ROWS - 1) as f64;
        let (c, r) = (col.round(), row.round());
        (c >= 0.0 && r >= 0.0 && c < BEV_COLS as f64 && r < BEV_ROWS as f64)
            .then(|| (r as usize, c as usize))
    };

    // 1 m grid intersections.
    let mut gx = -x_extent;
    while gx <= x_extent {
        let mut gz = 0.0;
        while gz <= z_extent {
            if let Some((r, c)) = to_cell(gx, gz) {
                cells[r][c] = '.';
            }
            gz += 1.0;
        }
        gx += 1.0;
    }

    for (cat, b) in boxes {
        let corners = b.corners();
        // Both horizontal faces' edge loops, sampled densely.
        for foot in [[0usize, 1, 5, 4], [2, 3, 7, 6]] {
            for i in 0..4 {
                let a = corners[foot[i]];
                let d = corners[foot[(i + 1) % 4]];
                for s in 0..=24 {
                    let t = s as f64 / 24.0;
                    let x = a.x + t * (d.x - a.x);
                    let z = a.z + t * (d.z - a.z);
                    if let Some((r, c)) = to_cell(x, z) {
                        cells[r][c] = '#';
                    }
                }
            }
        }
        if let Some((r, c)) = to_cell(b.center.x, b.center.z) {
            cells[r][c] = cat.chars().next().unwrap_or('?').to_ascii_uppercase();
        }
    }

    if let Some((r, c)) = to_cell(0.0, 0.0) {
        cells[r][c] = 'V';
    }

    let mut out = String::new();
    out.push_str(&format!(
        "top view, {:.0} m wide x {:.0} m deep, dots every 1 m, V = camera\n",
        2.0 * x_extent,
        z_extent
    ));
    for row in cells {
        out.push_str(&row.into_iter().collect::<String>());
        out.push('\n');
    }
    out
}
