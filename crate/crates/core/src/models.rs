//! Forecasting models: the stacked-LSTM network trained with a physics
//! penalty, its plain twin, the FFNN and 1-D CNN baselines and an echo state
//! network, plus training, forecasting and evaluation helpers.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lienard::LienardParams;
use crate::metrics::{self, LossBreakdown, PicAggregation};
use crate::neural::{adam_update, clip_global_norm, gemm, init_params, AdamConfig, AdamState, Architecture};
use crate::neural::{LayerSpec, NetworkState, Tensor};
use crate::series::{DerivativeMode, ScalerParams, SupervisedWindowSet, CHANNELS, DEFAULT_LOOKBACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Kdl,
    Lstm,
    Ffnn,
    Cnn1d,
    Esn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Lstm, ModelKind::Ffnn, ModelKind::Cnn1d, ModelKind::Esn, ModelKind::Kdl];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Kdl => "kdl",
            ModelKind::Lstm => "lstm",
            ModelKind::Ffnn => "ffnn",
            ModelKind::Cnn1d => "cnn1d",
            ModelKind::Esn => "esn",
        }
    }

    pub fn is_network(self) -> bool {
        self != ModelKind::Esn
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown model '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsnConfig {
    pub reservoir: usize,
    pub spectral_radius: f64,
    pub leak: f64,
    pub input_scaling: f64,
    pub ridge: f64,
    /// Leading training windows excluded from the readout fit.
    pub washout: usize,
}

impl Default for EsnConfig {
    fn default() -> Self {
        EsnConfig {
            reservoir: 500,
            spectral_radius: 0.9,
            leak: 0.3,
            input_scaling: 1.0,
            ridge: 1e-6,
            washout: 50,
        }
    }
}

impl EsnConfig {
    fn validate(&self) -> Result<()> {
        if self.reservoir == 0 {
            return Err(Error::invalid("reservoir size must be positive"));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            return Err(Error::invalid("spectral radius must be positive"));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::invalid("leak rate must lie in (0, 1]"));
        }
        if !(self.ridge >= 0.0 && self.input_scaling.is_finite()) {
            return Err(Error::invalid("ridge must be non-negative and input scaling finite"));
        }
        Ok(())
    }
}

/// Model family plus the hyperparameters its architecture needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_hidden")]
    pub lstm_hidden: usize,
    #[serde(default = "default_lstm_layers")]
    pub lstm_layers: usize,
    #[serde(default = "default_hidden")]
    pub ffnn_hidden: usize,
    #[serde(default = "default_filters")]
    pub cnn_filters: usize,
    #[serde(default = "default_kernel")]
    pub cnn_kernel: usize,
    #[serde(default = "default_pool")]
    pub cnn_pool: usize,
    #[serde(default = "default_hidden")]
    pub cnn_dense: usize,
    #[serde(default)]
    pub esn: EsnConfig,
}

fn default_lookback() -> usize {
    DEFAULT_LOOKBACK
}
fn default_channels() -> usize {
    CHANNELS
}
fn default_hidden() -> usize {
    50
}
fn default_lstm_layers() -> usize {
    3
}
fn default_filters() -> usize {
    64
}
fn default_kernel() -> usize {
    2
}
fn default_pool() -> usize {
    2
}

impl ModelSpec {
    pub fn new(kind: ModelKind, lookback: usize) -> Self {
        ModelSpec {
            kind,
            lookback,
            channels: CHANNELS,
            lstm_hidden: default_hidden(),
            lstm_layers: default_lstm_layers(),
            ffnn_hidden: default_hidden(),
            cnn_filters: default_filters(),
            cnn_kernel: default_kernel(),
            cnn_pool: default_pool(),
            cnn_dense: default_hidden(),
            esn: EsnConfig::default(),
        }
    }

    /// Layer stack for the network kinds; the echo state network has none.
    pub fn architecture(&self) -> Result<Architecture> {
        if self.lookback == 0 || self.channels == 0 {
            return Err(Error::invalid("lookback and channels must be positive"));
        }
        let (p, c) = (self.lookback, self.channels);
        let layers = match self.kind {
            ModelKind::Kdl | ModelKind::Lstm => {
                if self.lstm_layers == 0 || self.lstm_hidden == 0 {
                    return Err(Error::invalid("LSTM stack needs at least one layer and unit"));
                }
                let h = self.lstm_hidden;
                let mut layers: Vec<LayerSpec> = (0..self.lstm_layers)
                    .map(|i| LayerSpec::Lstm {
                        input: if i == 0 { c } else { h },
                        hidden: h,
                        return_sequences: i + 1 < self.lstm_layers,
                    })
                    .collect();
                layers.push(LayerSpec::Dense { input: h, output: CHANNELS });
                layers
            }
            ModelKind::Ffnn => vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: p * c, output: self.ffnn_hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { input: self.ffnn_hidden, output: CHANNELS },
            ],
            ModelKind::Cnn1d => {
                if self.cnn_kernel == 0 || self.cnn_kernel > p || self.cnn_pool == 0 {
                    return Err(Error::invalid("CNN kernel and pool must fit the lookback"));
                }
                let pooled = (p - self.cnn_kernel + 1) / self.cnn_pool;
                if pooled == 0 {
                    return Err(Error::invalid("CNN pool is longer than the convolution output"));
                }
                vec![
                    LayerSpec::Conv1d { channels: c, filters: self.cnn_filters, kernel: self.cnn_kernel },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool1d { pool: self.cnn_pool },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { input: pooled * self.cnn_filters, output: self.cnn_dense },
                    LayerSpec::Relu,
                    LayerSpec::Dense { input: self.cnn_dense, output: CHANNELS },
                ]
            }
            ModelKind::Esn => {
                return Err(Error::invalid("the echo state network has no layer stack"));
            }
        };
        Architecture::new(vec![p, c], layers)
    }
}

pub enum Model {
    Network { arch: Architecture, state: NetworkState },
    Esn(EsnState),
}

/// Freshly initialised model; ESN readouts still need [`EsnState::fit`].
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.kind == ModelKind::Esn {
        return Ok(Model::Esn(EsnState::new(&spec.esn, spec.channels, seed)?));
    }
    let arch = spec.architecture()?;
    let state = init_params(&arch, seed)?;
    Ok(Model::Network { arch, state })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm limit; non-positive disables clipping.
    pub clip_norm: f64,
    /// Trailing share of the training windows held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.2,
            lambda2: 0.2,
            max_epochs: 150,
            patience: 15,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            clip_norm: 5.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::invalid("lambda1 and lambda2 must be finite and non-negative"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("max_epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Which physics penalty joins the data loss.
#[derive(Debug, Clone, Copy)]
pub enum Physics<'a> {
    None,
    /// Forced residual at each target's absolute time.
    Synthetic(&'a LienardParams),
    /// Operator gap between predicted and true unscaled targets.
    Real(&'a LienardParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_phy: f64,
    pub l_total: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub state: NetworkState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Objective on the fitting windows before the first update.
    pub initial: LossBreakdown,
    /// Objective on the fitting windows for the returned state.
    pub final_train: LossBreakdown,
}

fn batch_tensor(set: &SupervisedWindowSet, idx: &[usize]) -> Result<Tensor> {
    let w = set.window_len();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(set.input(i));
    }
    Tensor::new(vec![idx.len(), set.lookback, CHANNELS], data)
}

const PREDICT_CHUNK: usize = 256;

/// Scaled `[n, 3]` network outputs for every window.
pub fn predict_scaled(arch: &Architecture, state: &NetworkState, set: &SupervisedWindowSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(set.len() * CHANNELS);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let y = arch.predict(state, &batch_tensor(set, chunk)?)?;
        y.expect_shape(&[chunk.len(), CHANNELS])?;
        out.extend_from_slice(y.data());
    }
    Ok(out)
}

/// Objective and its gradient with respect to scaled predictions.
fn objective(
    pred: &[f64],
    targets: &[f64],
    times: &[f64],
    scaler: &ScalerParams,
    physics: Physics<'_>,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (l_data, mut grad) = metrics::data_loss(pred, targets)?;
    let phys = match physics {
        Physics::None => None,
        Physics::Synthetic(p) => Some(metrics::phys_loss_synthetic_with_grad(&scaler.invert_rows(pred), times, p)?),
        Physics::Real(p) => Some(metrics::phys_loss_real_with_grad(
            &scaler.invert_rows(pred),
            &scaler.invert_rows(targets),
            p,
        )?),
    };
    let l_phy = match phys {
        None => 0.0,
        Some((l_phy, g_phy)) => {
            if lambda != 0.0 {
                for (i, (g, gp)) in grad.iter_mut().zip(&g_phy).enumerate() {
                    *g += lambda * gp * scaler.range(i % CHANNELS);
                }
            }
            l_phy
        }
    };
    let b = LossBreakdown::new(l_data, l_phy, lambda);
    if !b.l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss l_data={l_data} l_phy={l_phy} lambda={lambda}"
        )));
    }
    Ok((b, grad))
}

fn evaluate_set(
    arch: &Architecture,
    state: &NetworkState,
    set: &SupervisedWindowSet,
    physics: Physics<'_>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let pred = predict_scaled(arch, state, set)?;
    objective(&pred, &set.targets, &set.target_times, &set.scaler, physics, lambda).map(|(b, _)| b)
}

/// Mini-batch Adam on `L_data + lambda * L_phy` with chronological hold-out
/// early stopping.
pub fn train(
    arch: &Architecture,
    state: &NetworkState,
    windows: &SupervisedWindowSet,
    cfg: &TrainConfig,
    physics: Physics<'_>,
    lambda: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.validate_for(arch)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("physics weight must be non-negative, got {lambda}")));
    }
    let n_val = (windows.len() as f64 * cfg.validation_fraction).floor() as usize;
    let n_fit = windows.len() - n_val;
    if n_fit == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let fit = windows.slice(0..n_fit);
    let val = (n_val > 0).then(|| windows.slice(n_fit..windows.len()));

    let mut state = state.clone();
    let mut opt = AdamState::new(&state, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = evaluate_set(arch, &state, &fit, physics, lambda)?;

    let mut best = (state.clone(), 0usize, f64::INFINITY);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_fit).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_data, mut sum_phy) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let (y, cache) = arch.forward(&state, &batch_tensor(&fit, idx)?)?;
            let targets: Vec<f64> = idx.iter().flat_map(|&i| fit.target(i)).collect();
            let times: Vec<f64> = idx.iter().map(|&i| fit.target_times[i]).collect();
            let (b, g) = objective(y.data(), &targets, &times, &fit.scaler, physics, lambda)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
            sum_data += b.l_data * idx.len() as f64;
            sum_phy += b.l_phy * idx.len() as f64;
            let (mut grads, _) = arch.backward(&state, &cache, &Tensor::new(y.shape().to_vec(), g)?)?;
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            adam_update(&mut state, &grads, &mut opt)?;
        }
        let epoch_loss = LossBreakdown::new(sum_data / n_fit as f64, sum_phy / n_fit as f64, lambda);
        let val_loss = match &val {
            Some(v) => evaluate_set(arch, &state, v, physics, lambda)?.l_total,
            None => epoch_loss.l_total,
        };
        history.push(EpochRecord {
            epoch,
            l_data: epoch_loss.l_data,
            l_phy: epoch_loss.l_phy,
            l_total: epoch_loss.l_total,
            val_loss,
        });
        log::debug!("epoch {epoch}: total {:.6e} val {:.6e}", epoch_loss.l_total, val_loss);
        if val_loss < best.2 {
            best = (state.clone(), epoch, val_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    let (state, best_epoch, best_val_loss) = best;
    let final_train = evaluate_set(arch, &state, &fit, physics, lambda)?;
    Ok(TrainOutcome { state, history, best_epoch, best_val_loss, initial, final_train })
}

/// Training on simulated windows with the forced-residual penalty weighted by
/// `lambda1`.
pub fn pretrain(
    arch: &Architecture,
    state: &NetworkState,
    windows: &SupervisedWindowSet,
    cfg: &TrainConfig,
    params: &LienardParams,
) -> Result<TrainOutcome> {
    train(arch, state, windows, cfg, Physics::Synthetic(params), cfg.lambda1)
}

/// Training on observed windows from `start` (a pretrained or fresh state)
/// with the operator-gap penalty weighted by `lambda2`.
pub fn finetune(
    arch: &Architecture,
    start: &NetworkState,
    windows: &SupervisedWindowSet,
    cfg: &TrainConfig,
    params: &LienardParams,
) -> Result<TrainOutcome> {
    train(arch, start, windows, cfg, Physics::Real(params), cfg.lambda2)
}

/// Echo state network with a leaky-tanh reservoir and a ridge readout on
/// `[1, u, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnState {
    pub config: EsnConfig,
    pub channels: usize,
    /// `[reservoir, channels]`, row-major.
    pub input_weights: Vec<f64>,
    /// `[reservoir, reservoir]`, row-major.
    pub reservoir: Vec<f64>,
    /// `[1 + channels + reservoir, 3]`; `None` until fitted.
    pub readout: Option<Vec<f64>>,
}

/// Largest eigenvalue modulus of a row-major square matrix.
pub fn spectral_radius(m: &[f64], n: usize) -> Result<f64> {
    if m.len() != n * n {
        return Err(Error::ShapeMismatch { expected: vec![n, n], got: vec![m.len()] });
    }
    let mat = DMatrix::from_row_slice(n, n, m);
    let eig = mat.complex_eigenvalues();
    let rho = eig.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !rho.is_finite() {
        return Err(Error::Numerical("eigenvalue computation failed".into()));
    }
    Ok(rho)
}

impl EsnState {
    pub fn new(cfg: &EsnConfig, channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.reservoir;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_weights = (0..r * channels)
            .map(|_| cfg.input_scaling * rng.gen_range(-1.0..1.0))
            .collect();
        let mut reservoir: Vec<f64> = (0..r * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rho = spectral_radius(&reservoir, r)?;
        if rho == 0.0 {
            return Err(Error::Numerical("reservoir has zero spectral radius".into()));
        }
        let s = cfg.spectral_radius / rho;
        reservoir.iter_mut().for_each(|w| *w *= s);
        Ok(EsnState { config: *cfg, channels, input_weights, reservoir, readout: None })
    }

    pub fn feature_len(&self) -> usize {
        1 + self.channels + self.config.reservoir
    }

    fn step(&self, r: &mut [f64], u: &[f64], pre: &mut [f64]) {
        let n = self.config.reservoir;
        pre.fill(0.0);
        gemm(n, n, 1, 1.0, &self.reservoir, (n, 1), r, (1, 1), 0.0, pre, (1, 1));
        gemm(n, self.channels, 1, 1.0, &self.input_weights, (self.channels, 1), u, (1, 1), 1.0, pre, (1, 1));
        let a = self.config.leak;
        for (ri, &pi) in r.iter_mut().zip(pre.iter()) {
            *ri = (1.0 - a) * *ri + a * pi.tanh();
        }
    }

    /// Feature rows `[1, u_last, r]` for each window of `windows`, after
    /// driving the reservoir over `context` first. Consecutive windows only
    /// feed their newest row; a gap restarts the reservoir from zero.
    pub fn features(&self, windows: &SupervisedWindowSet, context: Option<&SupervisedWindowSet>) -> Result<Vec<f64>> {
        if windows.lookback == 0 {
            return Err(Error::invalid("windows have zero lookback"));
        }
        if self.channels != CHANNELS {
            return Err(Error::ShapeMismatch { expected: vec![CHANNELS], got: vec![self.channels] });
        }
        let n = self.config.reservoir;
        let mut r = vec![0.0; n];
        let mut pre = vec![0.0; n];
        let mut last: Option<usize> = None;
        let mut feed = |set: &SupervisedWindowSet, out: Option<&mut Vec<f64>>, last: &mut Option<usize>, r: &mut Vec<f64>| {
            let mut out = out;
            for i in 0..set.len() {
                let rows = set.input(i);
                let ti = set.target_index[i];
                if *last == Some(ti.wrapping_sub(1)) {
                    self.step(r, &rows[rows.len() - CHANNELS..], &mut pre);
                } else {
                    r.fill(0.0);
                    for row in rows.chunks_exact(CHANNELS) {
                        self.step(r, row, &mut pre);
                    }
                }
                *last = Some(ti);
                if let Some(o) = out.as_deref_mut() {
                    o.push(1.0);
                    o.extend_from_slice(&rows[rows.len() - CHANNELS..]);
                    o.extend_from_slice(r);
                }
            }
        };
        if let Some(c) = context {
            feed(c, None, &mut last, &mut r);
        }
        let mut out = Vec::with_capacity(windows.len() * self.feature_len());
        feed(windows, Some(&mut out), &mut last, &mut r);
        Ok(out)
    }

    /// Ridge readout on the post-washout windows of `train`.
    pub fn fit(&mut self, train: &SupervisedWindowSet) -> Result<()> {
        let feats = self.features(train, None)?;
        let f = self.feature_len();
        let skip = self.config.washout.min(train.len());
        let rows = train.len() - skip;
        if rows == 0 {
            return Err(Error::TooShort { needed: self.config.washout + 1, got: train.len() });
        }
        let x = &feats[skip * f..];
        let y = &train.targets[skip * CHANNELS..];
        self.readout = Some(ridge_solve(x, y, rows, f, CHANNELS, self.config.ridge)?);
        Ok(())
    }

    /// Scaled `[n, 3]` forecasts.
    pub fn predict_scaled(&self, windows: &SupervisedWindowSet, context: Option<&SupervisedWindowSet>) -> Result<Vec<f64>> {
        let w = self
            .readout
            .as_ref()
            .ok_or_else(|| Error::invalid("echo state network readout has not been fitted"))?;
        let feats = self.features(windows, context)?;
        let f = self.feature_len();
        let mut out = vec![0.0; windows.len() * CHANNELS];
        gemm(windows.len(), f, CHANNELS, 1.0, &feats, (f, 1), w, (CHANNELS, 1), 0.0, &mut out, (CHANNELS, 1));
        Ok(out)
    }
}

/// Solves `(X'X + ridge I) W = X'Y` for row-major `x: [n, f]`, `y: [n, k]`.
pub fn ridge_solve(x: &[f64], y: &[f64], n: usize, f: usize, k: usize, ridge: f64) -> Result<Vec<f64>> {
    if x.len() != n * f || y.len() != n * k {
        return Err(Error::ShapeMismatch { expected: vec![n * f, n * k], got: vec![x.len(), y.len()] });
    }
    let mut xtx = vec![0.0; f * f];
    gemm(f, n, f, 1.0, x, (1, f), x, (f, 1), 0.0, &mut xtx, (f, 1));
    for i in 0..f {
        xtx[i * f + i] += ridge;
    }
    let mut xty = vec![0.0; f * k];
    gemm(f, n, k, 1.0, x, (1, f), y, (k, 1), 0.0, &mut xty, (k, 1));
    let a = DMatrix::from_row_slice(f, f, &xtx);
    let b = DMatrix::from_row_slice(f, k, &xty);
    let sol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal matrix is not positive definite".into()))?
        .solve(&b);
    let mut out = Vec::with_capacity(f * k);
    for i in 0..f {
        for j in 0..k {
            out.push(sol[(i, j)]);
        }
    }
    Ok(out)
}

/// Unscaled `[n, 3]` forecasts of any model.
pub fn forecast(model: &Model, windows: &SupervisedWindowSet, context: Option<&SupervisedWindowSet>) -> Result<Vec<f64>> {
    let scaled = match model {
        Model::Network { arch, state } => predict_scaled(arch, state, windows)?,
        Model::Esn(esn) => esn.predict_scaled(windows, context)?,
    };
    Ok(windows.scaler.invert_rows(&scaled))
}

/// Unscaled last input row of each window, i.e. x(t) = x(t-1).
pub fn persistence_forecast(windows: &SupervisedWindowSet) -> Vec<f64> {
    let w = windows.window_len();
    let last: Vec<f64> = (0..windows.len())
        .flat_map(|i| windows.input(i)[w - CHANNELS..].to_vec())
        .collect();
    windows.scaler.invert_rows(&last)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub pic: f64,
}

/// RMSE and MAE of the x channel in original units, and PIC of the forecast
/// x series against the true one.
pub fn evaluate_forecast(
    pred: &[f64],
    windows: &SupervisedWindowSet,
    params: &LienardParams,
    mode: DerivativeMode,
    dt_sample: f64,
    aggregation: PicAggregation,
) -> Result<ForecastMetrics> {
    let truth = windows.unscaled_targets();
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let px: Vec<f64> = pred.iter().step_by(CHANNELS).copied().collect();
    let tx: Vec<f64> = truth.iter().step_by(CHANNELS).copied().collect();
    Ok(ForecastMetrics {
        rmse: metrics::rmse(&px, &tx)?,
        mae: metrics::mae(&px, &tx)?,
        pic: metrics::physical_inconsistency(&px, &tx, params, mode, dt_sample, aggregation)?,
    })
}

/// Rows `epoch,l_data,l_phy,l_total,val_loss`, plus an optional hash column.
pub fn write_history_csv<W: Write>(w: W, history: &[EpochRecord], config_hash: Option<&str>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e| Error::Csv { path: "<history>".into(), source: e };
    let mut header = vec!["epoch", "l_data", "l_phy", "l_total", "val_loss"];
    if config_hash.is_some() {
        header.push("config_hash");
    }
    wtr.write_record(&header).map_err(csv_err)?;
    for r in history {
        let mut rec = vec![
            r.epoch.to_string(),
            format!("{:.12e}", r.l_data),
            format!("{:.12e}", r.l_phy),
            format!("{:.12e}", r.l_total),
            format!("{:.12e}", r.val_loss),
        ];
        if let Some(h) = config_hash {
            rec.push(h.to_string());
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lienard::{simulate, OscState};
    use crate::series::{discrete_derivatives, fit_scaler, make_supervised, TimeSeries};

    fn tiny_lstm(kind: ModelKind) -> ModelSpec {
        ModelSpec { lstm_hidden: 6, lstm_layers: 2, ..ModelSpec::new(kind, 4) }
    }

    fn sine_windows(n: usize, lookback: usize) -> SupervisedWindowSet {
        let values: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).sin() + 0.1 * (0.05 * i as f64).cos()).collect();
        let s = TimeSeries::new(values, 1.0, "sine").unwrap();
        let d = discrete_derivatives(&s, DerivativeMode::Index).unwrap();
        let sc = fit_scaler(&d, 1.0).unwrap();
        make_supervised(&d, lookback, &sc).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { max_epochs: epochs, patience: 0, batch_size: 16, lr: 3e-3, ..TrainConfig::default() }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("transformer".parse::<ModelKind>().is_err());
    }

    #[test]
    fn kdl_parameter_count_closed_form() {
        let arch = ModelSpec::new(ModelKind::Kdl, 10).architecture().unwrap();
        let lstm = |inp: usize, h: usize| 4 * h * (inp + h + 1);
        let expected = lstm(3, 50) + lstm(50, 50) + lstm(50, 50) + 50 * 3 + 3;
        assert_eq!(arch.param_count(), expected);
        assert_eq!(expected, 51_353);
    }

    #[test]
    fn baseline_parameter_counts() {
        let ffnn = ModelSpec::new(ModelKind::Ffnn, 10).architecture().unwrap();
        assert_eq!(ffnn.param_count(), 30 * 50 + 50 + 50 * 3 + 3);
        let cnn = ModelSpec::new(ModelKind::Cnn1d, 10).architecture().unwrap();
        // conv 2*3*64+64, pooled length (10-1)/2 = 4
        assert_eq!(cnn.param_count(), 2 * 3 * 64 + 64 + 4 * 64 * 50 + 50 + 50 * 3 + 3);
        assert_eq!(cnn.output_shape().unwrap(), vec![3]);
        assert!(ModelSpec::new(ModelKind::Esn, 10).architecture().is_err());
    }

    #[test]
    fn kdl_and_lstm_share_initial_state() {
        let (Model::Network { state: a, arch: aa }, Model::Network { state: b, arch: ab }) = (
            build_model(&ModelSpec::new(ModelKind::Kdl, 10), 9).unwrap(),
            build_model(&ModelSpec::new(ModelKind::Lstm, 10), 9).unwrap(),
        ) else {
            panic!("expected networks");
        };
        assert_eq!(aa.fingerprint(), ab.fingerprint());
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_zero_matches_plain_training() {
        let w = sine_windows(120, 4);
        let spec = tiny_lstm(ModelKind::Kdl);
        let arch = spec.architecture().unwrap();
        let s0 = init_params(&arch, 1).unwrap();
        let p = LienardParams::EXTREME_EVENTS;
        let cfg = TrainConfig { lambda1: 0.0, ..quick_cfg(3) };
        let a = pretrain(&arch, &s0, &w, &cfg, &p).unwrap();
        let b = train(&arch, &s0, &w, &cfg, Physics::None, 0.0).unwrap();
        let da: Vec<u64> = a.history.iter().map(|r| r.l_data.to_bits()).collect();
        let db: Vec<u64> = b.history.iter().map(|r| r.l_data.to_bits()).collect();
        assert_eq!(da, db);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn history_bookkeeping() {
        let w = sine_windows(150, 4);
        let arch = tiny_lstm(ModelKind::Kdl).architecture().unwrap();
        let s0 = init_params(&arch, 2).unwrap();
        let cfg = TrainConfig { patience: 2, ..quick_cfg(8) };
        let out = pretrain(&arch, &s0, &w, &cfg, &LienardParams::EXTREME_EVENTS).unwrap();
        assert!(out.history.len() <= cfg.max_epochs);
        let mut best = f64::INFINITY;
        for r in &out.history {
            assert!((r.l_total - (r.l_data + cfg.lambda1 * r.l_phy)).abs() <= 1e-12);
            best = best.min(r.val_loss);
        }
        assert_eq!(best, out.best_val_loss);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, out.best_val_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let w = sine_windows(100, 4);
        let arch = tiny_lstm(ModelKind::Lstm).architecture().unwrap();
        let s0 = init_params(&arch, 3).unwrap();
        let p = LienardParams::EXTREME_EVENTS;
        let a = finetune(&arch, &s0, &w, &quick_cfg(2), &p).unwrap();
        let b = finetune(&arch, &s0, &w, &quick_cfg(2), &p).unwrap();
        assert_eq!(a.state, b.state);
        let fa = forecast(&Model::Network { arch: arch.clone(), state: a.state.clone() }, &w, None).unwrap();
        let fb = forecast(&Model::Network { arch, state: a.state }, &w, None).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn finetune_rejects_foreign_state() {
        let w = sine_windows(60, 4);
        let arch = tiny_lstm(ModelKind::Kdl).architecture().unwrap();
        let other = ModelSpec { lstm_hidden: 7, ..tiny_lstm(ModelKind::Kdl) }.architecture().unwrap();
        let s = init_params(&other, 0).unwrap();
        let err = finetune(&arch, &s, &w, &quick_cfg(1), &LienardParams::EXTREME_EVENTS).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn physics_gradient_chains_through_scaler() {
        let p = LienardParams::EXTREME_EVENTS;
        let sc = ScalerParams { min: [-1.0, -0.5, 0.2], max: [2.0, 0.5, 1.7] };
        let pred = vec![0.3, 0.6, 0.1, 0.8, 0.2, 0.9];
        let targets = vec![0.4, 0.5, 0.2, 0.7, 0.1, 0.6];
        let times = vec![3.0, 4.0];
        for physics in [Physics::Synthetic(&p), Physics::Real(&p)] {
            let (_, g) = objective(&pred, &targets, &times, &sc, physics, 0.2).unwrap();
            for i in 0..pred.len() {
                let h = 1e-6;
                let mut up = pred.clone();
                up[i] += h;
                let mut dn = pred.clone();
                dn[i] -= h;
                let fu = objective(&up, &targets, &times, &sc, physics, 0.2).unwrap().0.l_total;
                let fd = objective(&dn, &targets, &times, &sc, physics, 0.2).unwrap().0.l_total;
                let num = (fu - fd) / (2.0 * h);
                assert!((num - g[i]).abs() <= 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn real_physics_zero_on_exact_prediction() {
        let w = sine_windows(40, 4);
        let p = LienardParams::EXTREME_EVENTS;
        let (b, _) = objective(&w.targets, &w.targets, &w.target_times, &w.scaler, Physics::Real(&p), 0.2).unwrap();
        assert_eq!(b.l_phy, 0.0);
        assert_eq!(b.l_data, 0.0);
    }

    #[test]
    fn ffnn_learns_constant_series() {
        let s = TimeSeries::new(vec![3.25; 200], 1.0, "flat").unwrap();
        let d = discrete_derivatives(&s, DerivativeMode::Index).unwrap();
        let sc = fit_scaler(&d, 0.8).unwrap();
        let w = make_supervised(&d, 10, &sc).unwrap();
        let (tr, te) = crate::series::chrono_split(&w, 0.8).unwrap();
        let Model::Network { arch, state } = build_model(&ModelSpec::new(ModelKind::Ffnn, 10), 4).unwrap() else {
            panic!()
        };
        let out = train(&arch, &state, &tr, &TrainConfig { patience: 10, ..quick_cfg(200) }, Physics::None, 0.0).unwrap();
        let pred = forecast(&Model::Network { arch, state: out.state }, &te, None).unwrap();
        let m = evaluate_forecast(&pred, &te, &LienardParams::EXTREME_EVENTS, DerivativeMode::Index, 1.0, PicAggregation::Sum)
            .unwrap();
        assert!(m.rmse < 1e-2, "{}", m.rmse);
    }

    #[test]
    fn lstm_loss_drops_on_sine() {
        let w = sine_windows(300, 4);
        let arch = tiny_lstm(ModelKind::Lstm).architecture().unwrap();
        let s0 = init_params(&arch, 5).unwrap();
        let out = train(&arch, &s0, &w, &quick_cfg(30), Physics::None, 0.0).unwrap();
        assert!(out.final_train.l_total < 0.3 * out.initial.l_total, "{:?} {:?}", out.initial, out.final_train);
    }

    fn small_esn(reservoir: usize, ridge: f64) -> EsnConfig {
        EsnConfig { reservoir, ridge, washout: 5, ..EsnConfig::default() }
    }

    #[test]
    fn esn_spectral_radius_rescaled() {
        let esn = EsnState::new(&EsnConfig::default(), 3, 11).unwrap();
        let rho = spectral_radius(&esn.reservoir, 500).unwrap();
        assert!((rho - 0.9).abs() <= 1e-6, "{rho}");
        // Growth-rate cross-check by repeated multiplication.
        let n = 500;
        let mut v = vec![1.0; n];
        let mut log_growth = 0.0;
        let steps = 3000;
        for k in 0..steps {
            let mut nv = vec![0.0; n];
            gemm(n, n, 1, 1.0, &esn.reservoir, (n, 1), &v, (1, 1), 0.0, &mut nv, (1, 1));
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if k >= steps / 2 {
                log_growth += norm.ln();
            }
            v = nv.into_iter().map(|x| x / norm).collect();
        }
        let est = (log_growth / (steps / 2) as f64).exp();
        assert!((est - 0.9).abs() < 0.02, "{est}");
    }

    #[test]
    fn power_iteration_matches_on_dominant_real_eigenvalue() {
        // Upper-triangular: eigenvalues are the diagonal.
        let m = [0.5, 0.3, -0.2, 0.0, -1.25, 0.4, 0.0, 0.0, 0.1];
        assert!((spectral_radius(&m, 3).unwrap() - 1.25).abs() < 1e-12);
    }

    /// Gaussian elimination with partial pivoting on the normal equations.
    fn normal_equations_oracle(x: &[f64], y: &[f64], n: usize, f: usize, k: usize, ridge: f64) -> Vec<f64> {
        let mut a = vec![vec![0.0; f + k]; f];
        for i in 0..f {
            for j in 0..f {
                a[i][j] = (0..n).map(|r| x[r * f + i] * x[r * f + j]).sum::<f64>() + if i == j { ridge } else { 0.0 };
            }
            for c in 0..k {
                a[i][f + c] = (0..n).map(|r| x[r * f + i] * y[r * k + c]).sum();
            }
        }
        for col in 0..f {
            let piv = (col..f).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..f {
                if row != col {
                    let factor = a[row][col] / a[col][col];
                    for j in col..f + k {
                        a[row][j] -= factor * a[col][j];
                    }
                }
            }
        }
        let mut out = vec![0.0; f * k];
        for i in 0..f {
            for c in 0..k {
                out[i * k + c] = a[i][f + c] / a[i][i];
            }
        }
        out
    }

    #[test]
    fn esn_ridge_matches_normal_equations() {
        let w = sine_windows(140, 5);
        let mut esn = EsnState::new(&small_esn(20, 1e-4), 3, 2).unwrap();
        esn.fit(&w).unwrap();
        let feats = esn.features(&w, None).unwrap();
        let f = esn.feature_len();
        let skip = 5;
        let rows = w.len() - skip;
        let oracle = normal_equations_oracle(&feats[skip * f..], &w.targets[skip * 3..], rows, f, 3, 1e-4);
        let got = esn.readout.as_ref().unwrap();
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn esn_ridge_norm_monotone_in_penalty() {
        let mut w = sine_windows(200, 4);
        // Break exact collinearity of the sine features a little.
        for (i, v) in w.targets.iter_mut().enumerate() {
            *v += 1e-3 * ((i * 7919) % 13) as f64;
        }
        let mut prev = f64::INFINITY;
        for ridge in [1e-6, 2e-6, 1e-3, 2e-3, 1.0, 2.0] {
            let mut esn = EsnState::new(&small_esn(30, ridge), 3, 6).unwrap();
            esn.fit(&w).unwrap();
            let norm: f64 = esn.readout.unwrap().iter().map(|v| v * v).sum();
            assert!(norm <= prev * (1.0 + 1e-9), "ridge {ridge}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn esn_context_and_gaps() {
        let w = sine_windows(120, 4);
        let (a, b) = (w.slice(0..80), w.slice(80..w.len()));
        let mut esn = EsnState::new(&small_esn(15, 1e-6), 3, 3).unwrap();
        esn.fit(&a).unwrap();
        let full = esn.predict_scaled(&w, None).unwrap();
        let with_ctx = esn.predict_scaled(&b, Some(&a)).unwrap();
        for (x, y) in full[80 * 3..].iter().zip(&with_ctx) {
            assert!((x - y).abs() < 1e-12);
        }
        let cold = esn.predict_scaled(&b, None).unwrap();
        assert_ne!(cold, with_ctx);
        assert!(EsnState::new(&small_esn(15, 1e-6), 3, 3).unwrap().predict_scaled(&b, None).is_err());
    }

    #[test]
    fn persistence_and_metrics() {
        let tr = simulate(&LienardParams::EXTREME_EVENTS, OscState::new(0.1, 0.1), 0.0, 300.0, 0.01, 1.0).unwrap();
        let s = TimeSeries::from_trajectory(&tr, "sim");
        let d = discrete_derivatives(&s, DerivativeMode::Index).unwrap();
        let sc = fit_scaler(&d, 0.8).unwrap();
        let w = make_supervised(&d, 10, &sc).unwrap();
        let pers = persistence_forecast(&w);
        let truth = w.unscaled_targets();
        for i in 0..w.len() {
            assert!((pers[3 * i] - d.x[w.target_index[i] - 1]).abs() < 1e-12);
        }
        let p = LienardParams::EXTREME_EVENTS;
        let exact = evaluate_forecast(&truth, &w, &p, DerivativeMode::Index, 1.0, PicAggregation::Sum).unwrap();
        assert_eq!((exact.rmse, exact.mae, exact.pic), (0.0, 0.0, 0.0));
        let m = evaluate_forecast(&pers, &w, &p, DerivativeMode::Index, 1.0, PicAggregation::Sum).unwrap();
        let px: Vec<f64> = pers.iter().step_by(3).copied().collect();
        let tx: Vec<f64> = truth.iter().step_by(3).copied().collect();
        assert_eq!(m.rmse, metrics::rmse(&px, &tx).unwrap());
        assert!(m.pic > 0.0);
    }

    #[test]
    fn history_csv_layout() {
        let h = [EpochRecord { epoch: 1, l_data: 0.5, l_phy: 0.25, l_total: 0.55, val_loss: 0.6 }];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &h, Some("ff00")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,l_data,l_phy,l_total,val_loss,config_hash");
        assert!(text.lines().nth(1).unwrap().starts_with("1,5.000000000000e-1,"));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { lambda1: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
