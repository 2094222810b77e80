//! Mini-batch training with early stopping, evaluation metrics and
//! report tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radiomap_nn::checkpoint::save_checkpoint;
use radiomap_nn::ops::{mae, mae_loss, rmse};
use radiomap_nn::{Adam, AdamConfig, Model, ModelSpec, Tensor};
use serde::{Deserialize, Serialize};

use crate::datapipe::{Dataset, EncodingScheme, NormalizationSpec, Split};
use crate::error::{Error, Result};

pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_MIN_DELTA: f64 = 1e-5;
pub const DEFAULT_MAX_EPOCHS: usize = 100;

/// Batch size used for a frame size: 128 at 32, 64 at 64, 16 at 128, 8 at 256.
pub fn default_batch_size(frame_size: usize) -> usize {
    match frame_size {
        0..=32 => 128,
        33..=64 => 64,
        65..=128 => 16,
        _ => 8,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest drop in test MAE that counts as an improvement.
    pub min_delta: f64,
    pub adam: AdamConfig,
    /// Seeds weight init and the shuffle stream.
    pub seed: u64,
    pub width_scale: f64,
}

impl TrainConfig {
    pub fn for_frame_size(frame_size: usize) -> Self {
        TrainConfig {
            batch_size: default_batch_size(frame_size),
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            adam: AdamConfig::default(),
            seed: 0,
            width_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("min_delta {} must be non-negative", self.min_delta)));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Patience-based stopping rule over a metric where lower is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some((_, b)) => value < b - self.min_delta,
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    /// Best `(epoch, value)` seen so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_norm: f64,
    pub mae_dbm: f64,
    pub rmse_norm: f64,
    pub frames: usize,
}

/// Per-frame MAE and RMSE averaged over frames. Each prediction/target is one
/// frame's normalized values.
pub fn evaluate_predictions(preds: &[&[f32]], targets: &[&[f32]], norm: &NormalizationSpec) -> Result<Metrics> {
    if preds.len() != targets.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset("no frames to evaluate".into()));
    }
    let (mut m, mut r) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Mismatch(format!("prediction of {} values for target of {}", p.len(), t.len())));
        }
        m += mae(p, t);
        r += rmse(p, t);
    }
    let n = preds.len() as f64;
    let mae_norm = m / n;
    Ok(Metrics {
        mae_norm,
        mae_dbm: mae_norm * norm.span(),
        rmse_norm: r / n,
        frames: preds.len(),
    })
}

/// Rejects a spec that cannot consume the dataset's frames.
pub fn check_compatible(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if spec.input_channels != ds.channels() {
        return Err(Error::Mismatch(format!(
            "model `{}` takes {} input channels, dataset has {}",
            spec.name,
            spec.input_channels,
            ds.channels()
        )));
    }
    if let Some(s) = spec.frame_size {
        if s != ds.frame_size {
            return Err(Error::Mismatch(format!(
                "model `{}` needs {s}x{s} frames, dataset has {}x{}",
                spec.name, ds.frame_size, ds.frame_size
            )));
        }
    }
    spec.check_input(ds.channels(), ds.frame_size, ds.frame_size)
        .map_err(|e| Error::Mismatch(e.to_string()))
}

fn stack(ds: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Tensor> = idx.iter().map(|&i| &ds.frames[i].input).collect();
    let ts: Vec<&Tensor> = idx.iter().map(|&i| &ds.frames[i].target).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ts)?))
}

/// Predictions for the given frames, `[N, 1, S, S]`.
pub fn predict_frames(model: &Model, ds: &Dataset, idx: &[usize], batch_size: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = stack(ds, chunk)?;
        parts.push(model.forward(&x)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat_batches(&refs)
}

fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::EmptyDataset("no frames to predict".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Metrics of `model` on the frames at `idx`.
pub fn evaluate_indices(model: &Model, ds: &Dataset, idx: &[usize], batch_size: usize) -> Result<Metrics> {
    check_compatible(model.spec(), ds)?;
    if idx.is_empty() {
        return Err(Error::EmptyDataset("no frames to evaluate".into()));
    }
    let preds = predict_frames(model, ds, idx, batch_size)?;
    let plane = ds.frame_size * ds.frame_size;
    let p: Vec<&[f32]> = preds.data().chunks(plane).collect();
    let t: Vec<&[f32]> = idx.iter().map(|&i| ds.frames[i].target.data()).collect();
    evaluate_predictions(&p, &t, &ds.norm)
}

/// Metrics of `model` on one split of `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split) -> Result<Metrics> {
    let idx = ds.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split_name(split), "evaluate"));
    }
    evaluate_indices(model, ds, &idx, default_batch_size(ds.frame_size))
}

/// Metrics of predicting the targets themselves.
pub fn evaluate_identity(ds: &Dataset, split: Split) -> Result<Metrics> {
    let idx = ds.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split_name(split), "evaluate"));
    }
    let t: Vec<&[f32]> = idx.iter().map(|&i| ds.frames[i].target.data()).collect();
    evaluate_predictions(&t, &t, &ds.norm)
}

/// Metrics of predicting the mean training target everywhere.
pub fn evaluate_constant_mean(ds: &Dataset) -> Result<Metrics> {
    let train = ds.split_indices(Split::Train);
    let test = ds.split_indices(Split::Test);
    if train.is_empty() {
        return Err(Error::EmptySplit("train", "average"));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("test", "evaluate"));
    }
    let (sum, count) = train.iter().fold((0.0f64, 0usize), |(s, c), &i| {
        let t = ds.frames[i].target.data();
        (s + t.iter().map(|&v| v as f64).sum::<f64>(), c + t.len())
    });
    let constant = vec![(sum / count as f64) as f32; ds.frame_size * ds.frame_size];
    let p: Vec<&[f32]> = test.iter().map(|_| constant.as_slice()).collect();
    let t: Vec<&[f32]> = test.iter().map(|&i| ds.frames[i].target.data()).collect();
    evaluate_predictions(&p, &t, &ds.norm)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae_norm: f64,
    pub test_mae_norm: f64,
    pub test_mae_dbm: f64,
    pub test_rmse_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub kernel_size: String,
    pub parameter_count: usize,
    pub spec_hash: String,
    pub span_db: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best: Metrics,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Test MAE per epoch, the part of a run fixed by its seeds.
    pub fn loss_trace(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_mae_norm, e.test_mae_norm)).collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test MAE.
    pub model: Model,
    pub report: TrainReport,
}

/// Kernel column of a results table: `3`, or `1,3,5` for multi-kernel blocks.
pub fn kernel_label(spec: &ModelSpec) -> String {
    let mut ks: Vec<usize> = spec.kernel_sets.iter().flatten().copied().collect();
    ks.sort_unstable();
    ks.dedup();
    ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Parameter count as `204.35K` / `31.03M`, truncated to two decimals.
pub fn format_param_count(n: usize) -> String {
    let trunc = |v: f64| (v * 100.0 + 1e-9).floor() / 100.0;
    if n >= 1_000_000 {
        format!("{:.2}M", trunc(n as f64 / 1e6))
    } else if n >= 1_000 {
        format!("{:.2}K", trunc(n as f64 / 1e3))
    } else {
        n.to_string()
    }
}

/// Trains on the dataset's train split, monitoring its test split.
pub fn train(spec: &ModelSpec, ds: &Dataset, cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    let train_idx = ds.split_indices(Split::Train);
    let test_idx = ds.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train", "train on"));
    }
    if test_idx.is_empty() {
        return Err(Error::EmptySplit("test", "monitor"));
    }
    train_on(spec, ds, &train_idx, &test_idx, cfg, checkpoint)
}

/// Trains on explicit frame index sets, which may overlap.
pub fn train_on(
    spec: &ModelSpec,
    ds: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(spec, ds)?;
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train", "train on"));
    }
    if test_idx.is_empty() {
        return Err(Error::EmptySplit("test", "monitor"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(spec.clone(), rng.gen())?;
    let mut adam = Adam::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut order = train_idx.to_vec();
    let mut epochs = Vec::new();
    let mut best_params = model.params().to_vec();
    let mut best_metrics = Metrics::default();
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t) = stack(ds, chunk)?;
            let tape = model.forward_train(&x)?;
            let (loss, g) = mae_loss(tape.output(), &t)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            let grads = model.backward(&tape, &g)?;
            drop(tape);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let test = evaluate_indices(&model, ds, test_idx, cfg.batch_size)?;
        if !test.mae_norm.is_finite() {
            return Err(Error::NanLoss { epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
        epochs.push(EpochRecord {
            epoch,
            train_mae_norm: loss_sum / order.len() as f64,
            test_mae_norm: test.mae_norm,
            test_mae_dbm: test.mae_dbm,
            test_rmse_norm: test.rmse_norm,
        });
        stopped_epoch = epoch;
        let obs = stopper.observe(epoch, test.mae_norm);
        if obs.improved {
            best_params = model.params().to_vec();
            best_metrics = test;
        }
        if obs.stop {
            break;
        }
    }

    let model = Model::from_params(spec.clone(), best_params)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&model, path)?;
        CheckpointMeta::new(spec, ds).save(path)?;
    }
    let (best_epoch, _) = stopper.best().expect("at least one epoch ran");
    let report = TrainReport {
        model: spec.name.clone(),
        kernel_size: kernel_label(spec),
        parameter_count: model.count_params(),
        spec_hash: spec.hash(),
        span_db: ds.norm.span(),
        epochs,
        best_epoch,
        stopped_epoch,
        best: best_metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint: checkpoint.map(Path::to_path_buf),
    };
    Ok(TrainOutcome { model, report })
}

/// Data a served checkpoint needs beyond its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub spec_hash: String,
    pub frame_size: usize,
    pub encoding: EncodingScheme,
    pub norm: NormalizationSpec,
}

impl CheckpointMeta {
    pub fn new(spec: &ModelSpec, ds: &Dataset) -> Self {
        CheckpointMeta {
            model_id: format!("{}-{}", spec.name, ds.frame_size),
            spec_hash: spec.hash(),
            frame_size: ds.frame_size,
            encoding: ds.encoding,
            norm: ds.norm,
        }
    }

    /// `<checkpoint>.meta.json`.
    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        std::fs::write(Self::sidecar_path(checkpoint), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(Self::sidecar_path(checkpoint))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One results-table row: min/max/average test MAE in dB over repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub model: String,
    pub kernel_size: String,
    pub mae_min: f64,
    pub mae_max: f64,
    pub mae_average: f64,
    pub time_hr: f64,
    pub parameter_count: usize,
}

impl ExperimentRow {
    pub const COLUMNS: [&'static str; 7] = [
        "Model",
        "Kernel size",
        "MAE min",
        "MAE max",
        "MAE average",
        "Time (hr)",
        "# of parameters",
    ];

    fn cells(&self) -> [String; 7] {
        [
            self.model.clone(),
            self.kernel_size.clone(),
            format!("{:.2}", self.mae_min),
            format!("{:.2}", self.mae_max),
            format!("{:.2}", self.mae_average),
            format!("{:.2}", self.time_hr),
            format_param_count(self.parameter_count),
        ]
    }

    /// Same row without the wall-clock column.
    pub fn without_time(&self) -> ExperimentRow {
        ExperimentRow {
            time_hr: 0.0,
            ..self.clone()
        }
    }
}

/// Aligned plain-text table of rows.
pub fn format_table(rows: &[ExperimentRow]) -> String {
    let mut cells: Vec<[String; 7]> = vec![ExperimentRow::COLUMNS.map(str::to_string)];
    cells.extend(rows.iter().map(ExperimentRow::cells));
    let widths: Vec<usize> = (0..7).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub row: ExperimentRow,
    pub runs: Vec<TrainReport>,
}

/// One table row from independent runs of the same architecture.
pub fn summarize_runs(runs: &[TrainReport]) -> Result<ExperimentRow> {
    let first = runs.first().ok_or_else(|| Error::Config("no runs to summarize".into()))?;
    let maes: Vec<f64> = runs.iter().map(|r| r.best.mae_dbm).collect();
    Ok(ExperimentRow {
        model: first.model.clone(),
        kernel_size: first.kernel_size.clone(),
        mae_min: maes.iter().copied().fold(f64::INFINITY, f64::min),
        mae_max: maes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mae_average: maes.iter().sum::<f64>() / maes.len() as f64,
        time_hr: runs.iter().map(|r| r.wall_seconds).sum::<f64>() / 3600.0,
        parameter_count: first.parameter_count,
    })
}

/// Trains `repeats` times with seeds `master_seed + i` and summarises test MAE.
pub fn repeat_experiment(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    repeats: usize,
    master_seed: u64,
) -> Result<ExperimentReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut runs = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let run_cfg = TrainConfig {
            seed: master_seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        runs.push(train(spec, ds, &run_cfg, None)?.report);
    }
    let row = summarize_runs(&runs)?;
    Ok(ExperimentReport { row, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_by_frame() {
        assert_eq!(
            [32, 64, 128, 256].map(default_batch_size),
            [128, 64, 16, 8]
        );
    }

    #[test]
    fn early_stopping_on_worsening_tail() {
        let mut es = EarlyStopping::new(3, 1e-5);
        let values = [0.5, 0.4, 0.41, 0.42, 0.43, 0.44];
        let mut stopped = None;
        for (i, v) in values.iter().enumerate() {
            if es.observe(i + 1, *v).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(es.best(), Some((2, 0.4)));
    }

    #[test]
    fn tiny_gain_is_not_improvement() {
        let mut es = EarlyStopping::new(1, 1e-5);
        es.observe(1, 0.5);
        assert!(!es.observe(2, 0.5 - 5e-6).improved);
    }

    #[test]
    fn param_counts_like_table() {
        assert_eq!(format_param_count(204_353), "204.35K");
        assert_eq!(format_param_count(566_337), "566.33K");
        assert_eq!(format_param_count(31_031_745), "31.03M");
        assert_eq!(format_param_count(512), "512");
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = TrainConfig::for_frame_size(32);
        c.patience = 0;
        assert!(c.validate().is_err());
        c.patience = 3;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
