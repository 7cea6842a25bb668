use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use lienard_kdl::diagnostics::{mcb_rank, McbResult, RankTable};
use lienard_kdl::lienard::simulate;
use lienard_kdl::metrics::physical_inconsistency;
use lienard_kdl::models::{
    self, build_model, evaluate_forecast, forecast, write_history_csv, Model, ModelKind, Physics, TrainConfig,
    TrainOutcome,
};
use lienard_kdl::neural::{init_params, load_checkpoint, read_checkpoint, save_checkpoint, Architecture, NetworkState};
use lienard_kdl::series::{
    discrete_derivatives_aligned, fit_scaler, load_csv, make_supervised, prepare, PreparedData, ScalerParams,
    SupervisedWindowSet, CHANNELS,
};
use lienard_kdl::{metrics, OscState, TimeSeries};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{split_label, DatasetSpec, ExperimentConfig};

/// Resolved configuration plus output location shared by every command.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub jobs: usize,
}

impl RunContext {
    pub fn new(mut cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>, jobs: usize) -> Result<Self> {
        if let Some(out) = out {
            cfg.out_dir = out;
        }
        if let Some(seed) = seed {
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(RunContext { hash: cfg.hash(), out: cfg.out_dir.clone(), cfg, jobs: jobs.max(1) })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn metadata(&self, pairs: &[(&str, String)]) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        m.insert("config_hash".into(), self.hash.clone());
        m.insert("library_version".into(), env!("CARGO_PKG_VERSION").into());
        m
    }

    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..*base }
    }

    /// Writes the resolved config next to the outputs.
    fn snapshot_config(&self) -> Result<()> {
        fs::write(self.path("config.toml"), self.cfg.to_toml()?).context("writing config snapshot")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub split: String,
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub pic: f64,
    pub config_hash: String,
    pub status: String,
}

impl MetricRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn sort_key(&self) -> (String, String, String, u64) {
        (self.dataset.clone(), self.split.clone(), self.model.clone(), self.seed)
    }
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    rdr.deserialize().map(|r| r.with_context(|| format!("parsing {}", path.display()))).collect()
}

#[derive(Debug, Serialize)]
struct TrajectoryMeta<'a> {
    config_hash: &'a str,
    samples: usize,
    t0: f64,
    dt_sample: f64,
    warmup: usize,
    columns: [&'a str; 3],
}

/// Integrates the configured system and writes `trajectory.csv` plus a
/// `trajectory.meta.json` sidecar carrying the config hash.
pub fn cmd_simulate(ctx: &RunContext) -> Result<PathBuf> {
    let s = &ctx.cfg.simulation;
    let tr = simulate(&ctx.cfg.lienard, OscState::new(s.s0[0], s.s0[1]), s.t0, s.t_end, s.h_internal, s.dt_sample)?;
    let path = ctx.path("trajectory.csv");
    tr.write_csv(&path)?;
    let meta = TrajectoryMeta {
        config_hash: &ctx.hash,
        samples: tr.len(),
        t0: s.t0,
        dt_sample: s.dt_sample,
        warmup: s.warmup,
        columns: ["t", "x", "y"],
    };
    fs::write(ctx.path("trajectory.meta.json"), serde_json::to_string_pretty(&meta)?)?;
    log::info!("wrote {} samples to {}", tr.len(), path.display());
    Ok(path)
}

/// Simulated series after warm-up removal.
pub fn pretraining_series(cfg: &ExperimentConfig) -> Result<TimeSeries> {
    let s = &cfg.simulation;
    let tr = simulate(&cfg.lienard, OscState::new(s.s0[0], s.s0[1]), s.t0, s.t_end, s.h_internal, s.dt_sample)?
        .discard_warmup(s.warmup)?;
    Ok(TimeSeries::from_trajectory(&tr, "synthetic"))
}

/// All windows of the simulated corpus, scaled on the whole corpus.
pub fn pretraining_windows(cfg: &ExperimentConfig) -> Result<SupervisedWindowSet> {
    let series = pretraining_series(cfg)?;
    let d = discrete_derivatives_aligned(&series, cfg.pipeline.derivative_mode, cfg.pipeline.alignment)?;
    let scaler = if cfg.pipeline.scale { fit_scaler(&d, 1.0)? } else { ScalerParams::IDENTITY };
    Ok(make_supervised(&d, cfg.pipeline.lookback, &scaler)?)
}

pub fn kdl_architecture(cfg: &ExperimentConfig) -> Result<Architecture> {
    Ok(cfg.model_spec(ModelKind::Kdl).architecture()?)
}

pub fn pretrain_state(ctx: &RunContext, windows: &SupervisedWindowSet, seed: u64) -> Result<TrainOutcome> {
    let arch = kdl_architecture(&ctx.cfg)?;
    let init = init_params(&arch, seed)?;
    let tc = ctx.train_config(&ctx.cfg.pretrain, seed);
    models::pretrain(&arch, &init, windows, &tc, &ctx.cfg.lienard).with_context(|| format!("pretraining seed {seed}"))
}

fn pretrain_checkpoint_path(ctx: &RunContext, seed: u64) -> PathBuf {
    ctx.path(&format!("pretrain_seed{seed}.ckpt"))
}

fn save_history(ctx: &RunContext, name: &str, out: &TrainOutcome) -> Result<PathBuf> {
    let path = ctx.path(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_history_csv(BufWriter::new(f), &out.history, Some(&ctx.hash))?;
    Ok(path)
}

/// Pretrains one state per seed; returns the checkpoint paths.
pub fn cmd_pretrain(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    ctx.snapshot_config()?;
    let windows = pretraining_windows(&ctx.cfg)?;
    let mut paths = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let out = pretrain_state(ctx, &windows, seed)?;
        let path = pretrain_checkpoint_path(ctx, seed);
        let meta = ctx.metadata(&[
            ("phase", "pretrain".into()),
            ("model", ModelKind::Kdl.name().into()),
            ("seed", seed.to_string()),
            ("best_epoch", out.best_epoch.to_string()),
            ("derivative_mode", format!("{:?}", ctx.cfg.pipeline.derivative_mode).to_lowercase()),
        ]);
        save_checkpoint(&out.state, &meta, &path)?;
        save_history(ctx, &format!("pretrain_seed{seed}_history.csv"), &out)?;
        log::info!("seed {seed}: best validation {:.6e} at epoch {}", out.best_val_loss, out.best_epoch);
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<TimeSeries> {
    let mut series = load_csv(&spec.path, &spec.value_column, &spec.timestamp_column)
        .with_context(|| format!("loading dataset {}", spec.name))?;
    series.dt_sample = spec.dt_sample;
    series.origin_label = spec.name.clone();
    Ok(series)
}

pub fn prepare_dataset(cfg: &ExperimentConfig, series: &TimeSeries, split: f64) -> Result<PreparedData> {
    prepare(series, &cfg.pipeline_config(split)).with_context(|| format!("preparing {} at split {split}", series.origin_label))
}

/// Starting state for fine-tuning: fresh when `no_pretrain`, otherwise the
/// explicit checkpoint, the configured one, or this run's per-seed one.
pub fn finetune_start(
    ctx: &RunContext,
    arch: &Architecture,
    seed: u64,
    checkpoint: Option<&Path>,
    no_pretrain: bool,
) -> Result<(NetworkState, Option<PathBuf>)> {
    if no_pretrain {
        return Ok((init_params(arch, seed)?, None));
    }
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.pretrained_checkpoint.clone())
        .unwrap_or_else(|| pretrain_checkpoint_path(ctx, seed));
    if !path.exists() {
        bail!("pretrained checkpoint {} not found; run `pretrain` first or pass --no-pretrain", path.display());
    }
    let ck = load_checkpoint(&path, arch).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck.state, Some(path)))
}

/// Fine-tunes the physics-regularised model on one dataset split for every
/// seed; returns the checkpoint paths.
pub fn cmd_finetune(
    ctx: &RunContext,
    dataset: Option<&str>,
    split: f64,
    checkpoint: Option<&Path>,
    no_pretrain: bool,
) -> Result<Vec<PathBuf>> {
    ctx.snapshot_config()?;
    let no_pretrain = no_pretrain || ctx.cfg.no_pretrain;
    let spec = ctx.cfg.dataset(dataset)?;
    let data = prepare_dataset(&ctx.cfg, &load_dataset(spec)?, split)?;
    let arch = kdl_architecture(&ctx.cfg)?;
    let label = split_label(split).replace(':', "-");
    let mut paths = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let (start, source) = finetune_start(ctx, &arch, seed, checkpoint, no_pretrain)?;
        let tc = ctx.train_config(&ctx.cfg.finetune, seed);
        let out = models::finetune(&arch, &start, &data.train, &tc, &ctx.cfg.lienard)?;
        let stem = format!("finetune_{}_{label}_seed{seed}", spec.name);
        let meta = ctx.metadata(&[
            ("phase", "finetune".into()),
            ("model", ModelKind::Kdl.name().into()),
            ("seed", seed.to_string()),
            ("dataset", spec.name.clone()),
            ("split", split.to_string()),
            ("pretrained", source.is_some().to_string()),
            ("pretrained_from", source.map(|p| p.display().to_string()).unwrap_or_default()),
            ("best_epoch", out.best_epoch.to_string()),
        ]);
        let path = ctx.path(&format!("{stem}.ckpt"));
        save_checkpoint(&out.state, &meta, &path)?;
        save_history(ctx, &format!("{stem}_history.csv"), &out)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub dataset: String,
    pub model: String,
    pub split: String,
    pub seed: u64,
    pub target_time: f64,
    pub pred_x: f64,
    pub true_x: f64,
}

fn x_rows(
    dataset: &str,
    model: &str,
    split: &str,
    seed: u64,
    windows: &SupervisedWindowSet,
    pred: &[f64],
) -> Vec<PredictionRow> {
    let truth = windows.unscaled_targets();
    (0..windows.len())
        .map(|i| PredictionRow {
            dataset: dataset.into(),
            model: model.into(),
            split: split.into(),
            seed,
            target_time: windows.target_times[i],
            pred_x: pred[i * CHANNELS],
            true_x: truth[i * CHANNELS],
        })
        .collect()
}

/// Scores a checkpointed network on the test side of a dataset split and
/// writes `evaluation.csv` and `predictions.csv`.
pub fn cmd_evaluate_checkpoint(ctx: &RunContext, checkpoint: &Path, dataset: Option<&str>, split: f64) -> Result<Vec<MetricRow>> {
    let raw = read_checkpoint(checkpoint)?;
    let kind: ModelKind = raw
        .metadata
        .get("model")
        .map(String::as_str)
        .unwrap_or("kdl")
        .parse()?;
    let arch = ctx.cfg.model_spec(kind).architecture()?;
    let ck = load_checkpoint(checkpoint, &arch)?;
    let seed = ck.metadata.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = ctx.cfg.dataset(dataset)?;
    let data = prepare_dataset(&ctx.cfg, &load_dataset(spec)?, split)?;
    let model = Model::Network { arch, state: ck.state };
    let pred = forecast(&model, &data.test, None)?;
    let m = evaluate_forecast(
        &pred,
        &data.test,
        &ctx.cfg.lienard,
        ctx.cfg.pipeline.derivative_mode,
        spec.dt_sample,
        ctx.cfg.pic_aggregation,
    )?;
    let label = split_label(split);
    let rows = vec![MetricRow {
        dataset: spec.name.clone(),
        model: kind.name().into(),
        split: label.clone(),
        seed,
        rmse: m.rmse,
        mae: m.mae,
        pic: m.pic,
        config_hash: ctx.hash.clone(),
        status: "ok".into(),
    }];
    write_metric_rows(&ctx.path("evaluation.csv"), &rows)?;
    let mut wtr = csv::Writer::from_path(ctx.path("predictions.csv"))?;
    for r in x_rows(&spec.name, kind.name(), &label, seed, &data.test, &pred) {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(rows)
}

/// Scores a predictions file with `pred_x` and `true_x` columns, grouped by
/// any of `dataset`, `model`, `split` and `seed` present; writes
/// `evaluation.csv`.
pub fn cmd_evaluate_predictions(ctx: &RunContext, path: &Path, dt_sample: f64) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let pred_idx = col("pred_x").ok_or_else(|| anyhow!("{}: missing column pred_x", path.display()))?;
    let true_idx = col("true_x").ok_or_else(|| anyhow!("{}: missing column true_x", path.display()))?;
    let group_cols: Vec<Option<usize>> = ["dataset", "model", "split", "seed"].iter().map(|c| col(c)).collect();

    let mut groups: Vec<([String; 4], Vec<f64>, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let key: [String; 4] = std::array::from_fn(|i| {
            group_cols[i].and_then(|c| rec.get(c)).unwrap_or_default().to_string()
        });
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| anyhow!("{}: row {}: bad number", path.display(), line + 2))
        };
        let (p, t) = (parse(pred_idx)?, parse(true_idx)?);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1.push(p);
                g.2.push(t);
            }
            None => groups.push((key, vec![p], vec![t])),
        }
    }
    if groups.is_empty() {
        bail!("{}: no prediction rows", path.display());
    }
    let mut rows = Vec::new();
    for (key, pred, truth) in groups {
        rows.push(MetricRow {
            dataset: key[0].clone(),
            model: key[1].clone(),
            split: key[2].clone(),
            seed: key[3].parse().unwrap_or(0),
            rmse: metrics::rmse(&pred, &truth)?,
            mae: metrics::mae(&pred, &truth)?,
            pic: physical_inconsistency(
                &pred,
                &truth,
                &ctx.cfg.lienard,
                ctx.cfg.pipeline.derivative_mode,
                dt_sample,
                ctx.cfg.pic_aggregation,
            )?,
            config_hash: ctx.hash.clone(),
            status: "ok".into(),
        });
    }
    write_metric_rows(&ctx.path("evaluation.csv"), &rows)?;
    Ok(rows)
}

/// One (dataset, split, model, seed) unit of the benchmark grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub dataset: usize,
    pub split: f64,
    pub model: ModelKind,
    pub seed: u64,
}

pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for dataset in 0..cfg.datasets.len() {
        for &split in &cfg.splits {
            for &model in &cfg.models {
                for &seed in &cfg.seeds {
                    cells.push(Cell { dataset, split, model, seed });
                }
            }
        }
    }
    cells
}

/// Inputs shared read-only by every cell.
pub struct GridInputs {
    pub series: Vec<std::result::Result<TimeSeries, String>>,
    /// Pretrained state per seed; `None` means fine-tune from scratch.
    pub pretrained: BTreeMap<u64, std::result::Result<NetworkState, String>>,
}

fn run_cell(ctx: &RunContext, inputs: &GridInputs, cell: &Cell) -> Result<models::ForecastMetrics> {
    let spec = &ctx.cfg.datasets[cell.dataset];
    let series = inputs.series[cell.dataset].as_ref().map_err(|e| anyhow!("{e}"))?;
    let data = prepare_dataset(&ctx.cfg, series, cell.split)?;
    let mspec = ctx.cfg.model_spec(cell.model);
    let tc = ctx.train_config(&ctx.cfg.finetune, cell.seed);
    let params = &ctx.cfg.lienard;
    let model = match build_model(&mspec, cell.seed)? {
        Model::Esn(mut esn) => {
            esn.fit(&data.train)?;
            Model::Esn(esn)
        }
        Model::Network { arch, state } => {
            let (start, physics, lambda) = if cell.model == ModelKind::Kdl {
                let start = match inputs.pretrained.get(&cell.seed) {
                    Some(Ok(s)) => s.clone(),
                    Some(Err(e)) => bail!("pretraining failed: {e}"),
                    None => state,
                };
                (start, Physics::Real(params), tc.lambda2)
            } else {
                (state, Physics::None, 0.0)
            };
            let out = models::train(&arch, &start, &data.train, &tc, physics, lambda)?;
            Model::Network { arch, state: out.state }
        }
    };
    let pred = forecast(&model, &data.test, Some(&data.train))?;
    Ok(evaluate_forecast(
        &pred,
        &data.test,
        params,
        ctx.cfg.pipeline.derivative_mode,
        spec.dt_sample,
        ctx.cfg.pic_aggregation,
    )?)
}

/// Runs the cells on up to `ctx.jobs` threads; rows come back sorted.
pub fn run_cells(ctx: &RunContext, inputs: &GridInputs, cells: &[Cell]) -> Result<Vec<MetricRow>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.jobs).build()?;
    let mut rows: Vec<MetricRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let result = run_cell(ctx, inputs, cell);
                let (rmse, mae, pic, status) = match result {
                    Ok(m) => (m.rmse, m.mae, m.pic, "ok".to_string()),
                    Err(e) => {
                        log::error!("cell {cell:?} failed: {e:#}");
                        (f64::NAN, f64::NAN, f64::NAN, format!("error: {e:#}"))
                    }
                };
                MetricRow {
                    dataset: ctx.cfg.datasets[cell.dataset].name.clone(),
                    model: cell.model.name().into(),
                    split: split_label(cell.split),
                    seed: cell.seed,
                    rmse,
                    mae,
                    pic,
                    config_hash: ctx.hash.clone(),
                    status,
                }
            })
            .collect()
    });
    rows.sort_by_key(MetricRow::sort_key);
    Ok(rows)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMetric {
    Rmse,
    Mae,
}

impl RankMetric {
    pub fn name(self) -> &'static str {
        match self {
            RankMetric::Rmse => "rmse",
            RankMetric::Mae => "mae",
        }
    }
}

/// Median over seeds per (dataset, split, model), then MCB average ranks.
pub fn rank_rows(rows: &[MetricRow], metric: RankMetric) -> Result<McbResult> {
    let mut cells: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut model_order: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        if !model_order.contains(&r.model) {
            model_order.push(r.model.clone());
        }
        let v = match metric {
            RankMetric::Rmse => r.rmse,
            RankMetric::Mae => r.mae,
        };
        cells
            .entry((r.dataset.clone(), r.split.clone()))
            .or_default()
            .entry(r.model.clone())
            .or_default()
            .push(v);
    }
    let mut entries = Vec::new();
    for ((dataset, split), by_model) in cells {
        for model in &model_order {
            if let Some(vals) = by_model.get(model) {
                let mut vals = vals.clone();
                entries.push((format!("{dataset}/{split}"), model.clone(), median(&mut vals)));
            }
        }
    }
    let table = RankTable::from_long(&entries)?;
    Ok(mcb_rank(&table, true)?)
}

fn write_rank_outputs(ctx: &RunContext, res: &McbResult, metric: RankMetric) -> Result<()> {
    let name = metric.name();
    res.write_csv(File::create(ctx.path(&format!("rank_{name}.csv")))?, Some(&ctx.hash))?;
    res.write_plot_data(File::create(ctx.path(&format!("plot_{name}.csv")))?, Some(&ctx.hash))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RankInputRow {
    dataset: String,
    split: String,
    model: String,
    #[serde(default)]
    seed: u64,
    rmse: f64,
    mae: f64,
    #[serde(default)]
    pic: f64,
    #[serde(default = "ok_status")]
    status: String,
}

fn ok_status() -> String {
    "ok".into()
}

/// Ranks a metric table (benchmark output or any CSV with dataset, split,
/// model, rmse and mae columns) by RMSE and MAE.
pub fn cmd_rank(ctx: &RunContext, metrics_path: &Path) -> Result<(McbResult, McbResult)> {
    let mut rdr = csv::Reader::from_path(metrics_path).with_context(|| format!("opening {}", metrics_path.display()))?;
    let rows: Vec<MetricRow> = rdr
        .deserialize::<RankInputRow>()
        .map(|r| {
            r.map(|r| MetricRow {
                dataset: r.dataset,
                model: r.model,
                split: r.split,
                seed: r.seed,
                rmse: r.rmse,
                mae: r.mae,
                pic: r.pic,
                config_hash: String::new(),
                status: r.status,
            })
        })
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing {}", metrics_path.display()))?;
    let rmse = rank_rows(&rows, RankMetric::Rmse)?;
    let mae = rank_rows(&rows, RankMetric::Mae)?;
    write_rank_outputs(ctx, &rmse, RankMetric::Rmse)?;
    write_rank_outputs(ctx, &mae, RankMetric::Mae)?;
    Ok((rmse, mae))
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    library_version: &'a str,
    seeds: &'a [u64],
    checkpoints: Vec<String>,
    wall_time_s: f64,
    failed_cells: usize,
    rows: &'a [MetricRow],
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub rows: Vec<MetricRow>,
    pub failed: usize,
    pub rmse_rank: Option<McbResult>,
    pub mae_rank: Option<McbResult>,
}

fn pretrained_states(ctx: &RunContext) -> (BTreeMap<u64, std::result::Result<NetworkState, String>>, Vec<String>) {
    let mut states = BTreeMap::new();
    let mut paths = Vec::new();
    if !ctx.cfg.models.contains(&ModelKind::Kdl) || ctx.cfg.no_pretrain {
        return (states, paths);
    }
    let arch = match kdl_architecture(&ctx.cfg) {
        Ok(a) => a,
        Err(e) => {
            for &seed in &ctx.cfg.seeds {
                states.insert(seed, Err(format!("{e:#}")));
            }
            return (states, paths);
        }
    };
    let mut windows: Option<std::result::Result<SupervisedWindowSet, String>> = None;
    for &seed in &ctx.cfg.seeds {
        let explicit = ctx.cfg.pretrained_checkpoint.clone();
        let own = pretrain_checkpoint_path(ctx, seed);
        let state = if let Some(path) = explicit.or_else(|| own.exists().then(|| own.clone())) {
            paths.push(path.display().to_string());
            load_checkpoint(&path, &arch).map(|c| c.state).map_err(|e| format!("{}: {e}", path.display()))
        } else {
            let w = windows.get_or_insert_with(|| pretraining_windows(&ctx.cfg).map_err(|e| format!("{e:#}")));
            match w {
                Ok(w) => pretrain_state(ctx, w, seed)
                    .and_then(|out| {
                        let meta = ctx.metadata(&[
                            ("phase", "pretrain".into()),
                            ("model", ModelKind::Kdl.name().into()),
                            ("seed", seed.to_string()),
                            ("best_epoch", out.best_epoch.to_string()),
                        ]);
                        save_checkpoint(&out.state, &meta, &own)?;
                        save_history(ctx, &format!("pretrain_seed{seed}_history.csv"), &out)?;
                        paths.push(own.display().to_string());
                        Ok(out.state)
                    })
                    .map_err(|e| format!("{e:#}")),
                Err(e) => Err(e.clone()),
            }
        };
        states.insert(seed, state);
    }
    (states, paths)
}

/// Full grid: metrics table, rank outputs for RMSE and MAE, and a run record.
pub fn cmd_benchmark(ctx: &RunContext) -> Result<BenchmarkReport> {
    if ctx.cfg.datasets.is_empty() {
        bail!("benchmark needs at least one [[datasets]] entry");
    }
    let started = Instant::now();
    ctx.snapshot_config()?;
    let series = ctx.cfg.datasets.iter().map(|d| load_dataset(d).map_err(|e| format!("{e:#}"))).collect();
    let (pretrained, checkpoints) = pretrained_states(ctx);
    let inputs = GridInputs { series, pretrained };
    let rows = run_cells(ctx, &inputs, &grid_cells(&ctx.cfg))?;
    write_metric_rows(&ctx.path("metrics.csv"), &rows)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();

    let rank = |metric| match rank_rows(&rows, metric) {
        Ok(res) => write_rank_outputs(ctx, &res, metric).map(|_| Some(res)),
        Err(e) => {
            log::warn!("skipping {} rank analysis: {e:#}", metric.name());
            Ok(None)
        }
    };
    let rmse_rank = rank(RankMetric::Rmse)?;
    let mae_rank = rank(RankMetric::Mae)?;

    let record = RunRecord {
        config_hash: &ctx.hash,
        config: &ctx.cfg,
        library_version: env!("CARGO_PKG_VERSION"),
        seeds: &ctx.cfg.seeds,
        checkpoints,
        wall_time_s: started.elapsed().as_secs_f64(),
        failed_cells: failed,
        rows: &rows,
    };
    fs::write(ctx.path("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(BenchmarkReport { rows, failed, rmse_rank, mae_rank })
}
