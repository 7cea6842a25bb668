//! Time-series diagnostics: rescaled-range Hurst exponent, Rosenstein largest
//! Lyapunov exponent, and average-rank comparison with MCB intervals.

use std::io::Write;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Smallest window used by the R/S analysis.
pub const HURST_MIN_WINDOW: usize = 10;
pub const HURST_MIN_LEN: usize = 100;
pub const LYAPUNOV_MIN_LEN: usize = 1000;

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: element {i}")));
    }
    Ok(())
}

/// Mean rescaled range over non-overlapping chunks of length `w`.
/// Chunks with zero spread are skipped; `None` if every chunk is flat.
fn mean_rescaled_range(x: &[f64], w: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for chunk in x.chunks_exact(w) {
        let mean = chunk.iter().sum::<f64>() / w as f64;
        let mut cum = 0.0;
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        let mut ss = 0.0;
        for v in chunk {
            let d = v - mean;
            cum += d;
            lo = lo.min(cum);
            hi = hi.max(cum);
            ss += d * d;
        }
        let s = (ss / w as f64).sqrt();
        if s > 0.0 {
            total += (hi - lo) / s;
            used += 1;
        }
    }
    (used > 0).then(|| total / used as f64)
}

/// Rescaled-range Hurst exponent: slope of log(R/S) against log(window) for
/// windows 10, 20, 40, ... up to n/2.
pub fn hurst_exponent(x: &[f64]) -> Result<f64> {
    if x.len() < HURST_MIN_LEN {
        return Err(Error::TooShort { needed: HURST_MIN_LEN, got: x.len() });
    }
    check_finite(x, "hurst input")?;
    let first = x[0];
    if x.iter().all(|&v| v == first) {
        return Err(Error::invalid("hurst_exponent: constant series"));
    }
    let mut log_w = Vec::new();
    let mut log_rs = Vec::new();
    let mut w = HURST_MIN_WINDOW;
    while w <= x.len() / 2 {
        if let Some(rs) = mean_rescaled_range(x, w) {
            log_w.push((w as f64).ln());
            log_rs.push(rs.ln());
        }
        w *= 2;
    }
    if log_w.len() < 2 {
        return Err(Error::Numerical(
            "hurst_exponent: fewer than two usable window sizes".into(),
        ));
    }
    Ok(ols_slope(&log_w, &log_rs))
}

/// Sample autocorrelation at `lag` (biased normalisation).
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum();
    cov / var
}

/// First lag at which the autocorrelation drops to zero or below.
pub fn first_acf_zero(x: &[f64]) -> Result<usize> {
    let max_lag = x.len() / 4;
    (1..=max_lag)
        .find(|&lag| autocorrelation(x, lag) <= 0.0)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "autocorrelation has no zero crossing within {max_lag} lags"
            ))
        })
}

/// Mean period estimated from the rate of mean crossings, in samples.
pub fn mean_period(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let crossings = x
        .windows(2)
        .filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0)
        .count();
    if crossings == 0 {
        return x.len() as f64;
    }
    2.0 * x.len() as f64 / crossings as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub embed_dim: usize,
    /// `None` picks the first autocorrelation zero crossing.
    pub delay: Option<usize>,
    /// Minimum temporal separation of neighbours; `None` uses the mean period.
    pub theiler: Option<usize>,
    pub fit_steps: usize,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig { embed_dim: 5, delay: None, theiler: None, fit_steps: 20 }
    }
}

/// Rosenstein estimate with the given embedding and delay, default Theiler
/// window and a 20-step fit.
pub fn largest_lyapunov(x: &[f64], embed_dim: usize, delay: usize, dt: f64) -> Result<f64> {
    let cfg = LyapunovConfig { embed_dim, delay: Some(delay), ..LyapunovConfig::default() };
    largest_lyapunov_with(x, &cfg, dt)
}

fn normalised(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

pub fn largest_lyapunov_with(x: &[f64], cfg: &LyapunovConfig, dt: f64) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let curve = divergence_curve(x, cfg)?;
    let ks: Vec<f64> = curve.iter().map(|&(k, _)| k as f64 * dt).collect();
    let ys: Vec<f64> = curve.iter().map(|&(_, y)| y).collect();
    Ok(ols_slope(&ks, &ys))
}

/// Mean log-divergence of nearest-neighbour pairs, `(k, <ln d(k)>)` for each
/// step that had at least one valid pair.
pub fn divergence_curve(x: &[f64], cfg: &LyapunovConfig) -> Result<Vec<(usize, f64)>> {
    if x.len() < LYAPUNOV_MIN_LEN {
        return Err(Error::TooShort { needed: LYAPUNOV_MIN_LEN, got: x.len() });
    }
    check_finite(x, "lyapunov input")?;
    if cfg.embed_dim == 0 || cfg.fit_steps == 0 {
        return Err(Error::invalid("embed_dim and fit_steps must be positive"));
    }
    let delay = match cfg.delay {
        Some(0) => return Err(Error::invalid("delay must be positive")),
        Some(d) => d,
        None => first_acf_zero(x)?,
    };
    let theiler = cfg.theiler.unwrap_or_else(|| mean_period(x).ceil() as usize);

    // Distances are scale-free after standardisation.
    let z = normalised(x);
    let span = (cfg.embed_dim - 1) * delay;
    if span >= z.len() {
        return Err(Error::TooShort { needed: span + 1, got: z.len() });
    }
    let m = z.len() - span;
    let dim = cfg.embed_dim;
    let mut pts = vec![0.0; m * dim];
    for i in 0..m {
        for d in 0..dim {
            pts[i * dim + d] = z[i + d * delay];
        }
    }
    let dist = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (&pts[a * dim..(a + 1) * dim], &pts[b * dim..(b + 1) * dim]);
        pa.iter().zip(pb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    };

    // Lowest index wins ties, so the search is deterministic.
    let mut neighbour = vec![None; m];
    for i in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if i.abs_diff(j) <= theiler {
                continue;
            }
            let d = dist(i, j);
            if d > 0.0 && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        neighbour[i] = best.map(|(j, _)| j);
    }
    if neighbour.iter().all(Option::is_none) {
        return Err(Error::Numerical("no valid nearest neighbours".into()));
    }

    let mut curve = Vec::with_capacity(cfg.fit_steps + 1);
    for k in 0..=cfg.fit_steps {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, nb) in neighbour.iter().enumerate() {
            let Some(j) = *nb else { continue };
            if i + k >= m || j + k >= m {
                continue;
            }
            let d = dist(i + k, j + k);
            if d > 0.0 {
                sum += d.ln();
                count += 1;
            }
        }
        if count > 0 {
            curve.push((k, sum / count as f64));
        }
    }
    if curve.len() < 2 {
        return Err(Error::Numerical("divergence curve has fewer than two points".into()));
    }
    Ok(curve)
}

/// Metric table: one row per (dataset, split), one column per model.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    rows: Vec<String>,
    models: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl RankTable {
    /// Missing entries are passed as NaN and rejected.
    pub fn new(rows: Vec<String>, models: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::invalid("rank table needs at least two models"));
        }
        if rows.len() < 2 {
            return Err(Error::invalid("rank table needs at least two rows"));
        }
        if values.len() != rows.len() {
            return Err(Error::LengthMismatch { left: rows.len(), right: values.len() });
        }
        for (label, row) in rows.iter().zip(&values) {
            if row.len() != models.len() {
                return Err(Error::LengthMismatch { left: models.len(), right: row.len() });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "missing entry for model '{}' in row '{label}'",
                    models[c]
                )));
            }
        }
        Ok(RankTable { rows, models, values })
    }

    /// Builds the table from `(row, model, value)` triples, in first-seen order.
    pub fn from_long(entries: &[(String, String, f64)]) -> Result<Self> {
        let mut rows: Vec<String> = Vec::new();
        let mut models: Vec<String> = Vec::new();
        for (r, m, _) in entries {
            if !rows.contains(r) {
                rows.push(r.clone());
            }
            if !models.contains(m) {
                models.push(m.clone());
            }
        }
        let mut values = vec![vec![f64::NAN; models.len()]; rows.len()];
        for (r, m, v) in entries {
            let ri = rows.iter().position(|x| x == r).expect("row present");
            let mi = models.iter().position(|x| x == m).expect("model present");
            if !values[ri][mi].is_nan() {
                return Err(Error::invalid(format!("duplicate entry for ({r}, {m})")));
            }
            values[ri][mi] = *v;
        }
        RankTable::new(rows, models, values)
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Ranks 1..=n with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// CDF of the range of `k` independent standard normals (infinite degrees of
/// freedom), by Simpson quadrature over the position of the minimum.
pub fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let normal = Normal::standard();
    let (lo, hi) = (-8.5, 8.5);
    let n = 4000;
    let h = (hi - lo) / n as f64;
    let integrand = |z: f64| {
        let inner = normal.cdf(z + q) - normal.cdf(z);
        normal.pdf(z) * inner.max(0.0).powi(k as i32 - 1)
    };
    let mut s = integrand(lo) + integrand(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * integrand(lo + i as f64 * h);
    }
    (k as f64 * s * h / 3.0).clamp(0.0, 1.0)
}

/// Quantile of the infinite-df studentized range, by bisection.
pub fn studentized_range_quantile(p: f64, k: usize) -> Result<f64> {
    if !(0.0 < p && p < 1.0) || k < 2 {
        return Err(Error::invalid(format!("studentized range quantile needs 0<p<1, k>=2 (p={p}, k={k})")));
    }
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub const MCB_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct McbEntry {
    pub model: String,
    pub avg_rank: f64,
    pub half_width: f64,
}

impl McbEntry {
    pub fn lower(&self) -> f64 {
        self.avg_rank - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.avg_rank + self.half_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McbResult {
    /// In model-column order of the input table.
    pub entries: Vec<McbEntry>,
    pub critical_value: f64,
    /// Per-row midranks, same layout as the table values.
    pub row_ranks: Vec<Vec<f64>>,
}

impl McbResult {
    pub fn best(&self) -> &McbEntry {
        self.entries
            .iter()
            .min_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank))
            .expect("at least two models")
    }

    /// Entries sorted by average rank, best first; ties keep column order.
    pub fn sorted(&self) -> Vec<&McbEntry> {
        let mut v: Vec<&McbEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank));
        v
    }

    /// A model differs significantly from the best when its interval lies
    /// entirely above the best model's upper bound.
    pub fn significantly_worse(&self, e: &McbEntry) -> bool {
        e.lower() > self.best().upper()
    }

    /// Rank CSV: model, avg_rank, lower, upper (plus an optional hash column).
    pub fn write_csv<W: Write>(&self, w: W, config_hash: Option<&str>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let csv_err = |e| Error::Csv { path: "<rank csv>".into(), source: e };
        let mut header = vec!["model", "avg_rank", "lower", "upper"];
        if config_hash.is_some() {
            header.push("config_hash");
        }
        wtr.write_record(&header).map_err(csv_err)?;
        for e in self.sorted() {
            let mut rec = vec![
                e.model.clone(),
                format!("{:.6}", e.avg_rank),
                format!("{:.6}", e.lower()),
                format!("{:.6}", e.upper()),
            ];
            if let Some(h) = config_hash {
                rec.push(h.to_string());
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::io("<rank csv>", e))?;
        Ok(())
    }

    /// Plot data: one row per model in rank order with its position, interval
    /// endpoints, the best model's upper bound and a significance flag.
    pub fn write_plot_data<W: Write>(&self, w: W, config_hash: Option<&str>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let csv_err = |e| Error::Csv { path: "<plot data>".into(), source: e };
        let mut header =
            vec!["position", "model", "avg_rank", "lower", "upper", "best_upper", "significantly_worse"];
        if config_hash.is_some() {
            header.push("config_hash");
        }
        wtr.write_record(&header).map_err(csv_err)?;
        let best_upper = self.best().upper();
        for (pos, e) in self.sorted().into_iter().enumerate() {
            let mut rec = vec![
                (pos + 1).to_string(),
                e.model.clone(),
                format!("{:.6}", e.avg_rank),
                format!("{:.6}", e.lower()),
                format!("{:.6}", e.upper()),
                format!("{best_upper:.6}"),
                self.significantly_worse(e).to_string(),
            ];
            if let Some(h) = config_hash {
                rec.push(h.to_string());
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::io("<plot data>", e))?;
        Ok(())
    }
}

/// Average midranks per model with MCB half-width
/// q(0.95, M, inf)/sqrt(2) * sqrt(M(M+1)/(12N)).
pub fn mcb_rank(table: &RankTable, lower_is_better: bool) -> Result<McbResult> {
    let m = table.models.len();
    let n = table.rows.len();
    let row_ranks: Vec<Vec<f64>> = table
        .values
        .iter()
        .map(|row| {
            if lower_is_better {
                midranks(row)
            } else {
                let neg: Vec<f64> = row.iter().map(|v| -v).collect();
                midranks(&neg)
            }
        })
        .collect();
    let q = studentized_range_quantile(MCB_CONFIDENCE, m)?;
    let critical_value = q / std::f64::consts::SQRT_2;
    let half_width = critical_value * ((m * (m + 1)) as f64 / (12.0 * n as f64)).sqrt();
    let entries = table
        .models
        .iter()
        .enumerate()
        .map(|(c, name)| McbEntry {
            model: name.clone(),
            avg_rank: row_ranks.iter().map(|r| r[c]).sum::<f64>() / n as f64,
            half_width,
        })
        .collect();
    Ok(McbResult { entries, critical_value, row_ranks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Box-Muller, enough for test noise.
    fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| gaussian(&mut rng)).collect()
    }

    #[test]
    fn hurst_white_noise_near_half() {
        for seed in 0..3 {
            let h = hurst_exponent(&white_noise(10_000, seed)).unwrap();
            assert!((h - 0.5).abs() <= 0.08, "seed {seed}: {h}");
        }
    }

    #[test]
    fn hurst_random_walk_persistent() {
        let mut acc = 0.0;
        let walk: Vec<f64> = white_noise(10_000, 7)
            .into_iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        let h = hurst_exponent(&walk).unwrap();
        assert!(h > 0.8, "{h}");
    }

    #[test]
    fn hurst_affine_invariant() {
        let x = white_noise(2_000, 3);
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v - 12.0).collect();
        let (hx, hy) = (hurst_exponent(&x).unwrap(), hurst_exponent(&y).unwrap());
        assert!((hx - hy).abs() < 1e-10);
    }

    #[test]
    fn hurst_rejects_bad_input() {
        assert!(matches!(hurst_exponent(&[1.0; 50]), Err(Error::TooShort { .. })));
        assert!(hurst_exponent(&[2.0; 500]).is_err());
        let mut x = white_noise(200, 1);
        x[10] = f64::NAN;
        assert!(hurst_exponent(&x).is_err());
    }

    #[test]
    fn rescaled_range_hand_value() {
        // [1, 3]: deviations -1, 1; cumulative -1, 0; R = 1 (range includes 0), S = 1.
        assert_eq!(mean_rescaled_range(&[1.0, 3.0], 2), Some(1.0));
        assert_eq!(mean_rescaled_range(&[4.0, 4.0], 2), None);
    }

    fn sinusoid(n: usize, period: f64, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * i as f64 / period).sin()).collect()
    }

    #[test]
    fn lyapunov_sinusoid_near_zero() {
        let x = sinusoid(3_000, 9.79, 1.0);
        let delay = first_acf_zero(&x).unwrap();
        let l = largest_lyapunov(&x, 5, delay, 1.0).unwrap();
        assert!(l.abs() <= 0.01, "{l}");
    }

    #[test]
    fn lyapunov_scale_invariant() {
        let x = sinusoid(2_000, 13.7, 1.0);
        let y: Vec<f64> = x.iter().map(|v| 40.0 * v).collect();
        let cfg = LyapunovConfig::default();
        let a = largest_lyapunov_with(&x, &cfg, 1.0).unwrap();
        let b = largest_lyapunov_with(&y, &cfg, 1.0).unwrap();
        assert!((a - b).abs() <= 0.1 * a.abs().max(1e-3), "{a} vs {b}");
    }

    #[test]
    fn lyapunov_logistic_map_positive() {
        // Fully chaotic logistic map, exponent ln 2 per step.
        let mut v = 0.3;
        let x: Vec<f64> = (0..3_000)
            .map(|_| {
                v = 4.0 * v * (1.0 - v);
                v
            })
            .collect();
        let cfg = LyapunovConfig {
            embed_dim: 2,
            delay: Some(1),
            theiler: Some(1),
            fit_steps: 4,
        };
        let l = largest_lyapunov_with(&x, &cfg, 1.0).unwrap();
        assert!(l > 0.3, "{l}");
    }

    #[test]
    fn lyapunov_deterministic() {
        let x = white_noise(1_200, 5);
        let cfg = LyapunovConfig { delay: Some(1), ..LyapunovConfig::default() };
        let a = largest_lyapunov_with(&x, &cfg, 1.0).unwrap();
        let b = largest_lyapunov_with(&x, &cfg, 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn lyapunov_rejects_bad_input() {
        assert!(matches!(largest_lyapunov(&[0.0; 500], 5, 1, 1.0), Err(Error::TooShort { .. })));
        let x = sinusoid(1_500, 20.0, 1.0);
        assert!(largest_lyapunov(&x, 5, 0, 1.0).is_err());
        assert!(largest_lyapunov(&x, 5, 2, 0.0).is_err());
    }

    #[test]
    fn acf_and_period_of_sinusoid() {
        let x = sinusoid(4_200, 42.0, 1.0);
        // Quarter period 10.5 samples.
        assert_eq!(first_acf_zero(&x).unwrap(), 11);
        assert!((mean_period(&x) - 42.0).abs() < 0.5);
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[0.3, 0.1, 0.3, 0.2]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(midranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn studentized_range_reference_quantiles() {
        // Reference values for the infinite-df studentized range at 95%.
        for (k, q) in [(2, 2.771_807_6), (3, 3.314_493_2), (5, 3.857_655_5), (10, 4.474_124_2)] {
            let got = studentized_range_quantile(0.95, k).unwrap();
            assert!((got - q).abs() < 1e-5, "k={k}: {got}");
        }
    }

    #[test]
    fn studentized_range_two_groups_matches_normal() {
        // The range of two normals is |Z1 - Z2| = sqrt(2)|Z|.
        let normal = Normal::standard();
        for q in [0.5, 1.0, 2.5] {
            let exact = 2.0 * normal.cdf(q / std::f64::consts::SQRT_2) - 1.0;
            assert!((studentized_range_cdf(q, 2) - exact).abs() < 1e-9);
        }
    }

    fn reference_table(metric: usize) -> RankTable {
        let text = include_str!("../tests/data/reference_metrics.csv");
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let entries: Vec<(String, String, f64)> = rdr
            .records()
            .map(|r| {
                let r = r.unwrap();
                (format!("{}/{}", &r[0], &r[1]), r[2].to_string(), r[3 + metric].parse().unwrap())
            })
            .collect();
        RankTable::from_long(&entries).unwrap()
    }

    fn avg(res: &McbResult, model: &str) -> f64 {
        res.entries.iter().find(|e| e.model == model).unwrap().avg_rank
    }

    #[test]
    fn reference_rmse_ranks() {
        let res = mcb_rank(&reference_table(0), true).unwrap();
        assert!((avg(&res, "kdl") - 13.5 / 12.0).abs() < 1e-12);
        let order: Vec<&str> = res.sorted().iter().map(|e| e.model.as_str()).collect();
        assert_eq!(order, ["kdl", "lstm", "esn", "cnn1d", "ffnn"]);
        assert_eq!(res.best().model, "kdl");
    }

    #[test]
    fn reference_mae_ranks() {
        let res = mcb_rank(&reference_table(1), true).unwrap();
        assert!((avg(&res, "kdl") - 15.5 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn mcb_half_width_formula() {
        let res = mcb_rank(&reference_table(0), true).unwrap();
        let expected = 3.857_655_5 / 2f64.sqrt() * (30.0f64 / 144.0).sqrt();
        assert!((res.entries[0].half_width - expected).abs() < 1e-5);
    }

    #[test]
    fn dominant_model_rank_one() {
        let t = RankTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["m1".into(), "m2".into(), "m3".into()],
            vec![vec![0.1, 0.5, 0.3], vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 7.0]],
        )
        .unwrap();
        let res = mcb_rank(&t, true).unwrap();
        assert_eq!(res.entries[0].avg_rank, 1.0);
        let hi = mcb_rank(&t, false).unwrap();
        assert_eq!(hi.entries[0].avg_rank, 3.0);
    }

    #[test]
    fn rank_table_rejects_missing_and_small() {
        let rows = vec!["a".to_string(), "b".to_string()];
        let models = vec!["x".to_string(), "y".to_string()];
        assert!(RankTable::new(rows.clone(), models.clone(), vec![vec![1.0, f64::NAN], vec![1.0, 2.0]]).is_err());
        assert!(RankTable::new(rows.clone(), vec!["x".into()], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(RankTable::new(vec!["a".into()], models.clone(), vec![vec![1.0, 2.0]]).is_err());
        let long = vec![("a".to_string(), "x".to_string(), 1.0), ("a".to_string(), "y".to_string(), 2.0), ("b".to_string(), "x".to_string(), 1.0)];
        assert!(RankTable::from_long(&long).is_err());
    }

    #[test]
    fn rank_csv_and_plot_data() {
        let res = mcb_rank(&reference_table(0), true).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf, Some("abc")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("model,avg_rank,lower,upper,config_hash"));
        assert!(lines.next().unwrap().starts_with("kdl,1.125000,"));
        assert_eq!(text.lines().count(), 6);

        let mut buf = Vec::new();
        res.write_plot_data(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("1,kdl,"));
        assert!(text.contains(",ffnn,") && text.lines().last().unwrap().ends_with("true"));
    }

    proptest! {
        #[test]
        fn midranks_sum(values in prop::collection::vec(-3i32..3, 2..12)) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let m = v.len() as f64;
            let s: f64 = midranks(&v).iter().sum();
            prop_assert!((s - m * (m + 1.0) / 2.0).abs() < 1e-12);
        }

        #[test]
        fn ranks_invariant_to_monotone_transform(
            seed in 0u64..1000,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..4).map(|_| rng.gen_range(0.1..10.0)).collect())
                .collect();
            let transformed: Vec<Vec<f64>> = values
                .iter()
                .map(|r| r.iter().map(|v: &f64| v.ln().exp2() + shift).collect())
                .collect();
            let rows: Vec<String> = (0..4).map(|i| i.to_string()).collect();
            let models: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
            let a = mcb_rank(&RankTable::new(rows.clone(), models.clone(), values).unwrap(), true).unwrap();
            let b = mcb_rank(&RankTable::new(rows, models, transformed).unwrap(), true).unwrap();
            prop_assert_eq!(a.row_ranks, b.row_ranks);
        }
    }
}
