use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use radiomap_core::datapipe::{build_dataset, load_dataset, save_dataset, DatasetConfig, EncodingScheme, Split};
use radiomap_core::raytrace::{load_coverage, save_coverage, simulate, CoverageGrid, PropagationConfig};
use radiomap_core::scene::{json_to_scene, random_scene_with, scene_to_json, Scene, SceneGenConfig};
use radiomap_core::trainer::{
    evaluate, evaluate_constant_mean, evaluate_identity, format_table, summarize_runs, train, TrainConfig, DEFAULT_MAX_EPOCHS,
    DEFAULT_MIN_DELTA, DEFAULT_PATIENCE,
};
use radiomap_nn::model::by_name;
use radiomap_nn::AdamConfig;
use serde_json::json;

use crate::heatmap;
use crate::service::{self, AppState, LoadedModel, ServiceConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "radiomap", version, about = "Coverage simulation, datasets, training and prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ray-trace a scene JSON into an RCOV raster.
    Simulate(SimulateArgs),
    /// Write random synthetic scene JSON files.
    Generate(GenerateArgs),
    /// Turn a directory of scene/raster pairs into a dataset file.
    BuildDataset(BuildDatasetArgs),
    /// Train a model and write a checkpoint and JSON report.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Predict coverage for a scene with a trained checkpoint.
    Predict(PredictArgs),
    /// Serve the HTTP prediction API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub reflections: usize,
    /// Defaults to a count scaled to the grid perimeter.
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long, default_value_t = -100.0, allow_hyphen_values = true)]
    pub floor_dbm: f64,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub buildings: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_side: usize,
    #[arg(long)]
    pub max_side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory of `<name>.json` scenes with `<name>.rcov` rasters.
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub stride: usize,
    #[arg(long, default_value_t = 5)]
    pub padding: usize,
    /// Train/test boundary on origin x; defaults to 60 scaled to the region width.
    #[arg(long)]
    pub boundary: Option<usize>,
    /// Discarded band after the boundary; defaults to 20 scaled to the region width.
    #[arg(long)]
    pub gap: Option<usize>,
    #[arg(long, default_value_t = -100.0, allow_hyphen_values = true)]
    pub floor_dbm: f64,
    #[arg(long, value_enum, default_value_t = EncodingArg::TwoBinary)]
    pub encoding: EncodingArg,
    /// Ray-trace scenes that have no raster yet, writing the raster next to them.
    #[arg(long)]
    pub simulate_missing: bool,
    #[arg(long, default_value_t = 6)]
    pub reflections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    Combined,
    TwoBinary,
    Euclidean,
    InverseSquare,
}

impl From<EncodingArg> for EncodingScheme {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Combined => EncodingScheme::Combined,
            EncodingArg::TwoBinary => EncodingScheme::TwoBinary,
            EncodingArg::Euclidean => EncodingScheme::Euclidean,
            EncodingArg::InverseSquare => EncodingScheme::InverseSquare,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// cnn, unet, unet-strided, unet-si-{37,65,73,91} or radiounet.
    #[arg(long, default_value = "unet-si-37")]
    pub model: String,
    /// Kernel size for cnn and unet variants.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 0.125)]
    pub width_scale: f64,
    /// Defaults to the per-frame-size batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_PATIENCE)]
    pub patience: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_DELTA)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint path; the `.meta.json` sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Independent runs with seeds `seed..seed+repeats`; the first is checkpointed.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, required_unless_present_any = ["identity", "constant_mean"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Score the targets against themselves.
    #[arg(long, conflicts_with = "constant_mean")]
    pub identity: bool,
    /// Score the mean training target.
    #[arg(long)]
    pub constant_mean: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 2)]
    pub max_sims: usize,
    #[arg(long, default_value_t = 6)]
    pub reflections: usize,
    #[arg(long, default_value_t = -100.0, allow_hyphen_values = true)]
    pub floor_dbm: f64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::BuildDataset(a) => cmd_build_dataset(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn read_scene(path: &Path) -> Result<Scene, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("IO", format!("{}: {e}", path.display())))?;
    json_to_scene(&text).map_err(|e| CliError::new(e.code(), format!("{}: {e}", path.display())))
}

fn propagation(scene: &Scene, reflections: usize, rays: Option<usize>, floor_dbm: f64) -> PropagationConfig {
    let mut cfg = PropagationConfig::for_grid(scene.width(), scene.height(), scene.region().cell_size_m());
    cfg.max_reflections = reflections;
    cfg.receiver_floor_dbm = floor_dbm;
    if let Some(r) = rays {
        cfg.ray_count = r;
    }
    cfg
}

fn peak(grid: &CoverageGrid) -> f64 {
    grid.power_dbm.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let scene = read_scene(&a.scene)?;
    let grid = simulate(&scene, &propagation(&scene, a.reflections, a.rays, a.floor_dbm))?;
    save_coverage(&grid, &a.out)?;
    if let Some(png) = &a.png {
        heatmap::save_png(&grid, a.floor_dbm, peak(&grid), Some(&scene), png)?;
    }
    println!(
        "{}",
        json!({ "out": a.out, "width": grid.width, "height": grid.height, "max_dbm": peak(&grid) })
    );
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out_dir)?;
    let cfg = SceneGenConfig {
        min_side: a.min_side,
        max_side: a.max_side,
        ..SceneGenConfig::default()
    };
    for i in 0..a.count {
        let scene = random_scene_with(a.size, a.size, a.buildings, a.seed.wrapping_add(i as u64), &cfg)?;
        fs::write(a.out_dir.join(format!("scene-{i:04}.json")), scene_to_json(&scene))?;
    }
    println!("{}", json!({ "out_dir": a.out_dir, "scenes": a.count }));
    Ok(())
}

fn cmd_build_dataset(a: &BuildDatasetArgs) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.input_dir)
        .map_err(|e| CliError::new("IO", format!("{}: {e}", a.input_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::new(
            "EMPTY_DATASET",
            format!("no scene .json files in {}", a.input_dir.display()),
        ));
    }
    let mut sources = Vec::with_capacity(paths.len());
    for p in &paths {
        let scene = read_scene(p)?;
        let raster = p.with_extension("rcov");
        let grid = if raster.exists() {
            load_coverage(&raster).map_err(|e| CliError::new(e.code(), format!("{}: {e}", raster.display())))?
        } else if a.simulate_missing {
            let g = simulate(&scene, &propagation(&scene, a.reflections, None, a.floor_dbm))?;
            save_coverage(&g, &raster)?;
            g
        } else {
            return Err(CliError::new(
                "MISSING_RASTER",
                format!("{} has no raster {}; run simulate or pass --simulate-missing", p.display(), raster.display()),
            ));
        };
        sources.push((scene, grid));
    }
    let cfg = DatasetConfig {
        frame_size: a.frames,
        encoding: a.encoding.into(),
        floor_dbm: a.floor_dbm,
        stride: a.stride,
        edge_padding: a.padding,
        boundary: a.boundary,
        gap: a.gap,
    };
    let ds = build_dataset(&sources, &cfg)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "scenes": sources.len(),
            "frames": ds.frames.len(),
            "train": ds.count(Split::Train),
            "test": ds.count(Split::Test),
            "floor_dbm": ds.norm.floor_dbm,
            "ceil_dbm": ds.norm.ceil_dbm,
        })
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    if a.repeats == 0 {
        return Err(CliError::new("CONFIG", "repeats must be at least 1"));
    }
    let ds = load_dataset(&a.dataset)?;
    let spec = by_name(&a.model, a.kernel, a.width_scale, ds.channels())?;
    let mut cfg = TrainConfig::for_frame_size(ds.frame_size);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.max_epochs = a.epochs;
    cfg.patience = a.patience;
    cfg.min_delta = a.min_delta;
    cfg.adam = AdamConfig { lr: a.lr, ..AdamConfig::default() };
    cfg.seed = a.seed;
    cfg.width_scale = a.width_scale;

    let mut runs = Vec::with_capacity(a.repeats);
    for i in 0..a.repeats {
        let run_cfg = TrainConfig {
            seed: a.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let ckpt = (i == 0).then_some(a.out.as_path());
        let outcome = train(&spec, &ds, &run_cfg, ckpt)?;
        eprintln!(
            "run {} seed {}: best epoch {} test MAE {:.3} dB",
            i + 1,
            run_cfg.seed,
            outcome.report.best_epoch,
            outcome.report.best.mae_dbm
        );
        runs.push(outcome.report);
    }
    let row = summarize_runs(&runs)?;
    eprint!("{}", format_table(std::slice::from_ref(&row)));
    let report = json!({ "config": cfg, "row": row, "runs": runs });
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "model": row.model,
            "parameter_count": row.parameter_count,
            "mae_average_db": row.mae_average,
            "best_epoch": runs[0].best_epoch,
        })
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.dataset)?;
    let split: Split = a.split.into();
    let (source, metrics) = if a.identity {
        ("identity".to_string(), evaluate_identity(&ds, split)?)
    } else if a.constant_mean {
        if split != Split::Test {
            return Err(CliError::new("CONFIG", "the constant-mean baseline is scored on the test split"));
        }
        ("constant-mean".to_string(), evaluate_constant_mean(&ds)?)
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let loaded = LoadedModel::load(path)?;
        if loaded.meta.norm != ds.norm || loaded.meta.encoding != ds.encoding {
            eprintln!("warning: dataset normalization or encoding differs from the checkpoint's training data");
        }
        (loaded.meta.model_id.clone(), evaluate(&loaded.model, &ds, split)?)
    };
    let out = json!({
        "source": source,
        "split": if split == Split::Train { "train" } else { "test" },
        "metrics": metrics,
    });
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&out)?)?;
    }
    println!("{out}");
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let loaded = LoadedModel::load(&a.checkpoint)?;
    let scene = read_scene(&a.scene)?;
    let p = service::predict_scene(&loaded, &scene)?;
    let grid = p.grid();
    save_coverage(&grid, &a.out)?;
    if let Some(png) = &a.png {
        heatmap::save_png(&grid, loaded.meta.norm.floor_dbm, loaded.meta.norm.ceil_dbm, Some(&scene), png)?;
    }
    println!(
        "{}",
        json!({
            "out": a.out,
            "model_id": loaded.meta.model_id,
            "width": p.width,
            "height": p.height,
            "latency_ms": p.latency_ms,
        })
    );
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let models = a.checkpoints.iter().map(|p| LoadedModel::load(p)).collect::<Result<Vec<_>, _>>()?;
    let state = AppState::new(
        models,
        ServiceConfig {
            max_reflections: a.reflections,
            floor_dbm: a.floor_dbm,
            max_concurrent_sims: a.max_sims,
        },
    )?;
    service::serve(state, &format!("{}:{}", a.host, a.port))
}
