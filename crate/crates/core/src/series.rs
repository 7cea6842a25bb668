//! From raw observations to supervised `(window, next step)` samples.
//!
//! A series is differenced twice with forward differences, the three channels
//! `(x, dx, d2x)` are aligned to a common length `len - 2`, min-max scaled
//! with a scaler fit on the training prefix, and cut into lookback windows.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lienard::Trajectory;

pub const CHANNELS: usize = 3;
pub const DEFAULT_LOOKBACK: usize = 10;
/// Usable rows required by [`load_csv`]: the default lookback plus three.
pub const MIN_USABLE_ROWS: usize = DEFAULT_LOOKBACK + 3;

/// Uniformly sampled scalar observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub dt_sample: f64,
    /// Absolute time of `values[0]`.
    pub t0: f64,
    pub origin_label: String,
    /// Rows discarded at ingestion because the value was missing or unparseable.
    pub dropped_rows: usize,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, dt_sample: f64, origin_label: impl Into<String>) -> Result<Self> {
        if !(dt_sample.is_finite() && dt_sample > 0.0) {
            return Err(Error::invalid(format!("dt_sample must be positive, got {dt_sample}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series value at index {i}")));
        }
        Ok(TimeSeries {
            values,
            dt_sample,
            t0: 0.0,
            origin_label: origin_label.into(),
            dropped_rows: 0,
        })
    }

    /// Position channel of a simulated trajectory, keeping its time stamps.
    pub fn from_trajectory(tr: &Trajectory, origin_label: impl Into<String>) -> Self {
        TimeSeries {
            values: tr.x(),
            dt_sample: tr.dt_sample(),
            t0: tr.t0(),
            origin_label: origin_label.into(),
            dropped_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reads one value column from a comma-delimited file with a header row.
/// Rows keep file order; rows whose value is blank or unparseable are dropped
/// and counted. Fails with fewer than [`MIN_USABLE_ROWS`] usable rows.
pub fn load_csv(path: &Path, value_column: &str, timestamp_column: &str) -> Result<TimeSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let series = read_series(file, &path.display().to_string(), value_column, timestamp_column, label)?;
    if series.len() < MIN_USABLE_ROWS {
        return Err(Error::TooShort {
            needed: MIN_USABLE_ROWS,
            got: series.len(),
        });
    }
    Ok(series)
}

/// Parsing half of [`load_csv`] with no minimum-length check.
pub fn read_series<R: Read>(
    reader: R,
    source_name: &str,
    value_column: &str,
    timestamp_column: &str,
    label: impl Into<String>,
) -> Result<TimeSeries> {
    let csv_err = |source| Error::Csv {
        path: source_name.to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            path: source_name.to_string(),
            column: name.to_string(),
        })
    };
    let value_idx = find(value_column)?;
    find(timestamp_column)?;

    let mut values = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        match record.get(value_idx).and_then(|v| v.parse::<f64>().ok()) {
            Some(v) if v.is_finite() => values.push(v),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("{source_name}: dropped {dropped} rows with missing or unparseable `{value_column}`");
    }
    Ok(TimeSeries {
        values,
        dt_sample: 1.0,
        t0: 0.0,
        origin_label: label.into(),
        dropped_rows: dropped,
    })
}

/// Step used in the forward differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeMode {
    /// `delta = 1`: one sample is one time unit.
    #[default]
    Index,
    /// `delta = dt_sample`.
    Physical,
}

impl DerivativeMode {
    pub fn delta(self, dt_sample: f64) -> f64 {
        match self {
            DerivativeMode::Index => 1.0,
            DerivativeMode::Physical => dt_sample,
        }
    }
}

/// Which time index a difference is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// `dx[i] = x[i+1] - x[i]` sits at index `i`; the tail of `x` is dropped.
    /// The last input row of a window then contains `x[t] - x[t-1]`, so the
    /// next position is recoverable from the window.
    #[default]
    Forward,
    /// Backward differences: the triple at `t` only uses `x[t-2..=t]`; the
    /// head of `x` is dropped.
    Causal,
}

/// `(v[i+1] - v[i]) / delta`, one element shorter than `v`.
pub fn forward_difference(v: &[f64], delta: f64) -> Vec<f64> {
    v.windows(2).map(|w| (w[1] - w[0]) / delta).collect()
}

/// Position with its first and second discrete derivatives on a common index
/// range `0..len-2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSeries {
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub d2x: Vec<f64>,
    pub dt_sample: f64,
    /// Absolute time of index 0.
    pub t0: f64,
    pub mode: DerivativeMode,
    pub alignment: Alignment,
}

impl DerivedSeries {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt_sample
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.x,
            1 => &self.dx,
            2 => &self.d2x,
            _ => panic!("channel index {c} out of range"),
        }
    }

    pub fn triple(&self, i: usize) -> [f64; CHANNELS] {
        [self.x[i], self.dx[i], self.d2x[i]]
    }
}

/// Forward differences aligned on `0..len-2`.
pub fn discrete_derivatives(s: &TimeSeries, mode: DerivativeMode) -> Result<DerivedSeries> {
    derive_values(&s.values, s.dt_sample, s.t0, mode, Alignment::Forward)
}

pub fn discrete_derivatives_aligned(s: &TimeSeries, mode: DerivativeMode, alignment: Alignment) -> Result<DerivedSeries> {
    derive_values(&s.values, s.dt_sample, s.t0, mode, alignment)
}

pub(crate) fn derive_values(
    values: &[f64],
    dt_sample: f64,
    t0: f64,
    mode: DerivativeMode,
    alignment: Alignment,
) -> Result<DerivedSeries> {
    if values.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: values.len(),
        });
    }
    let delta = mode.delta(dt_sample);
    let mut dx = forward_difference(values, delta);
    let d2x = forward_difference(&dx, delta);
    let n = d2x.len();
    let (x, t0) = match alignment {
        Alignment::Forward => {
            dx.truncate(n);
            (values[..n].to_vec(), t0)
        }
        Alignment::Causal => {
            dx.remove(0);
            (values[2..].to_vec(), t0 + 2.0 * dt_sample)
        }
    };
    Ok(DerivedSeries {
        x,
        dx,
        d2x,
        dt_sample,
        t0,
        mode,
        alignment,
    })
}

/// Per-channel min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: [f64; CHANNELS],
    pub max: [f64; CHANNELS],
}

impl ScalerParams {
    /// Leaves values unchanged.
    pub const IDENTITY: ScalerParams = ScalerParams {
        min: [0.0; CHANNELS],
        max: [1.0; CHANNELS],
    };

    #[inline]
    pub fn range(&self, c: usize) -> f64 {
        self.max[c] - self.min[c]
    }

    #[inline]
    pub fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.min[c]) / self.range(c)
    }

    #[inline]
    pub fn invert(&self, c: usize, v: f64) -> f64 {
        v * self.range(c) + self.min[c]
    }

    pub fn apply_triple(&self, t: [f64; CHANNELS]) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.apply(c, t[c]))
    }

    pub fn invert_triple(&self, t: [f64; CHANNELS]) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.invert(c, t[c]))
    }

    /// Inverts a flat `[n, 3]` buffer of scaled triples.
    pub fn invert_rows(&self, rows: &[f64]) -> Vec<f64> {
        rows.iter()
            .enumerate()
            .map(|(i, &v)| self.invert(i % CHANNELS, v))
            .collect()
    }
}

/// Scaler fit on the first `floor(len * train_fraction)` aligned points (at
/// least two).
pub fn fit_scaler(d: &DerivedSeries, train_fraction: f64) -> Result<ScalerParams> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) && train_fraction != 1.0 {
        return Err(Error::invalid(format!("train_fraction must lie in (0, 1], got {train_fraction}")));
    }
    let n = ((d.len() as f64 * train_fraction).floor() as usize).clamp(2.min(d.len()), d.len());
    if n == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let mut min = [0.0; CHANNELS];
    let mut max = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let prefix = &d.channel(c)[..n];
        let lo = prefix.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = prefix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        min[c] = lo;
        max[c] = if hi > lo {
            hi
        } else {
            log::warn!("channel {c} is constant ({lo}) over the scaler fit range; using unit range");
            lo + 1.0
        };
    }
    Ok(ScalerParams { min, max })
}

/// Scaled copy of every channel.
pub fn apply_scaler(d: &DerivedSeries, scaler: &ScalerParams) -> DerivedSeries {
    map_channels(d, |c, v| scaler.apply(c, v))
}

pub fn invert_scaler(d: &DerivedSeries, scaler: &ScalerParams) -> DerivedSeries {
    map_channels(d, |c, v| scaler.invert(c, v))
}

fn map_channels(d: &DerivedSeries, f: impl Fn(usize, f64) -> f64) -> DerivedSeries {
    DerivedSeries {
        x: d.x.iter().map(|&v| f(0, v)).collect(),
        dx: d.dx.iter().map(|&v| f(1, v)).collect(),
        d2x: d.d2x.iter().map(|&v| f(2, v)).collect(),
        ..d.clone()
    }
}

/// Lookback windows of scaled `(x, dx, d2x)` rows paired with the scaled
/// triple one step after the window.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedWindowSet {
    /// `[n, lookback, 3]`, row-major.
    pub inputs: Vec<f64>,
    /// `[n, 3]`, row-major.
    pub targets: Vec<f64>,
    pub lookback: usize,
    /// Aligned index of each target.
    pub target_index: Vec<usize>,
    /// Absolute time of each target.
    pub target_times: Vec<f64>,
    pub scaler: ScalerParams,
}

impl SupervisedWindowSet {
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.lookback * CHANNELS
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.window_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> [f64; CHANNELS] {
        let t = &self.targets[i * CHANNELS..(i + 1) * CHANNELS];
        [t[0], t[1], t[2]]
    }

    /// Targets in original units.
    pub fn unscaled_targets(&self) -> Vec<f64> {
        self.scaler.invert_rows(&self.targets)
    }

    /// Contiguous sub-range of samples.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SupervisedWindowSet {
        let w = self.window_len();
        SupervisedWindowSet {
            inputs: self.inputs[range.start * w..range.end * w].to_vec(),
            targets: self.targets[range.start * CHANNELS..range.end * CHANNELS].to_vec(),
            lookback: self.lookback,
            target_index: self.target_index[range.clone()].to_vec(),
            target_times: self.target_times[range].to_vec(),
            scaler: self.scaler,
        }
    }

    /// Samples gathered in the given order.
    pub fn gather(&self, idx: &[usize]) -> SupervisedWindowSet {
        let w = self.window_len();
        let mut out = SupervisedWindowSet {
            inputs: Vec::with_capacity(idx.len() * w),
            targets: Vec::with_capacity(idx.len() * CHANNELS),
            lookback: self.lookback,
            target_index: Vec::with_capacity(idx.len()),
            target_times: Vec::with_capacity(idx.len()),
            scaler: self.scaler,
        };
        for &i in idx {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.extend_from_slice(&self.targets[i * CHANNELS..(i + 1) * CHANNELS]);
            out.target_index.push(self.target_index[i]);
            out.target_times.push(self.target_times[i]);
        }
        out
    }

    /// Concatenation of two sets sharing lookback and scaler.
    pub fn concat(&self, other: &SupervisedWindowSet) -> Result<SupervisedWindowSet> {
        if self.lookback != other.lookback || self.scaler != other.scaler {
            return Err(Error::invalid("cannot concatenate window sets with different lookback or scaler"));
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.targets.extend_from_slice(&other.targets);
        out.target_index.extend_from_slice(&other.target_index);
        out.target_times.extend_from_slice(&other.target_times);
        Ok(out)
    }
}

/// Windows over `d` scaled with `scaler`; sample `i` holds rows `i..i+p` as
/// input and row `i+p` as target.
pub fn make_supervised(d: &DerivedSeries, lookback: usize, scaler: &ScalerParams) -> Result<SupervisedWindowSet> {
    if lookback == 0 {
        return Err(Error::invalid("lookback must be at least 1"));
    }
    if d.len() <= lookback {
        return Err(Error::TooShort {
            needed: lookback + 1,
            got: d.len(),
        });
    }
    let n = d.len() - lookback;
    let scaled: Vec<[f64; CHANNELS]> = (0..d.len()).map(|i| scaler.apply_triple(d.triple(i))).collect();
    let mut inputs = Vec::with_capacity(n * lookback * CHANNELS);
    let mut targets = Vec::with_capacity(n * CHANNELS);
    for i in 0..n {
        for row in &scaled[i..i + lookback] {
            inputs.extend_from_slice(row);
        }
        targets.extend_from_slice(&scaled[i + lookback]);
    }
    let target_index: Vec<usize> = (lookback..d.len()).collect();
    let target_times = target_index.iter().map(|&i| d.time(i)).collect();
    Ok(SupervisedWindowSet {
        inputs,
        targets,
        lookback,
        target_index,
        target_times,
        scaler: *scaler,
    })
}

/// Number of training samples for a chronological split.
pub fn split_point(n: usize, train_fraction: f64) -> usize {
    (n as f64 * train_fraction).floor() as usize
}

/// Chronological train/test split; the first `floor(n * fraction)` samples
/// train.
pub fn chrono_split(w: &SupervisedWindowSet, train_fraction: f64) -> Result<(SupervisedWindowSet, SupervisedWindowSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = split_point(w.len(), train_fraction);
    if n_train == 0 || n_train == w.len() {
        return Err(Error::invalid(format!(
            "split of {} samples at {train_fraction} leaves an empty side",
            w.len()
        )));
    }
    Ok((w.slice(0..n_train), w.slice(n_train..w.len())))
}

/// The four training fractions benchmarked by default.
pub const STANDARD_SPLITS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Settings for [`prepare`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub lookback: usize,
    pub derivative_mode: DerivativeMode,
    #[serde(default)]
    pub alignment: Alignment,
    pub train_fraction: f64,
    /// Min-max scale the channels; when off the identity scaler is used.
    pub scale: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lookback: DEFAULT_LOOKBACK,
            derivative_mode: DerivativeMode::Index,
            alignment: Alignment::Forward,
            train_fraction: 0.8,
            scale: true,
        }
    }
}

/// Everything downstream stages need from one series.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub derived: DerivedSeries,
    pub scaler: ScalerParams,
    pub train: SupervisedWindowSet,
    pub test: SupervisedWindowSet,
}

/// Differencing, scaling, windowing and splitting in one call. The scaler is
/// fit on exactly the aligned points that training windows touch.
pub fn prepare(series: &TimeSeries, cfg: &PipelineConfig) -> Result<PreparedData> {
    let derived = discrete_derivatives_aligned(series, cfg.derivative_mode, cfg.alignment)?;
    if derived.len() <= cfg.lookback {
        return Err(Error::TooShort {
            needed: cfg.lookback + 3,
            got: series.len(),
        });
    }
    let n = derived.len() - cfg.lookback;
    let n_train = split_point(n, cfg.train_fraction);
    let scaler = if cfg.scale {
        let touched = (n_train + cfg.lookback).min(derived.len());
        fit_scaler(&derived, touched as f64 / derived.len() as f64)?
    } else {
        ScalerParams::IDENTITY
    };
    let windows = make_supervised(&derived, cfg.lookback, &scaler)?;
    let (train, test) = chrono_split(&windows, cfg.train_fraction)?;
    Ok(PreparedData {
        derived,
        scaler,
        train,
        test,
    })
}
