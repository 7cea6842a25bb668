//! Synthetic files shaped like the three observational benchmark series, for
//! exercising the pipeline when the real data is not available. They are
//! rescaled oscillator trajectories and carry no observational content.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lienard_kdl::lienard::simulate;
use lienard_kdl::{LienardParams, OscState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandInShape {
    pub name: &'static str,
    pub rows: usize,
    pub min: f64,
    pub max: f64,
    pub s0: [f64; 2],
}

pub const STAND_IN_SHAPES: [StandInShape; 3] = [
    StandInShape { name: "elnino", rows: 1634, min: 18.3, max: 29.2, s0: [0.1, 0.1] },
    StandInShape { name: "dengue", rows: 1197, min: 0.0, max: 461.0, s0: [1.5, -0.4] },
    StandInShape { name: "bjornoya", rows: 15320, min: 0.0, max: 42.1, s0: [-0.8, 0.9] },
];

/// x component of a post-warm-up trajectory, min-max mapped onto
/// `[shape.min, shape.max]`.
pub fn stand_in_values(shape: &StandInShape, params: &LienardParams, rows: usize) -> Result<Vec<f64>> {
    let warmup = 500;
    let t_end = (rows + warmup - 1) as f64;
    let tr = simulate(params, OscState::new(shape.s0[0], shape.s0[1]), 0.0, t_end, 0.01, 1.0)?.discard_warmup(warmup)?;
    let x = tr.x();
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(x.iter().map(|v| shape.min + (v - lo) / span * (shape.max - shape.min)).collect())
}

/// Writes `<name>.csv` (columns `date,value`) for each shape into `dir`.
pub fn write_stand_ins(dir: &Path, params: &LienardParams, max_len: Option<usize>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::new();
    for shape in &STAND_IN_SHAPES {
        let rows = max_len.map_or(shape.rows, |m| m.min(shape.rows));
        let values = stand_in_values(shape, params, rows)?;
        let path = dir.join(format!("{}.csv", shape.name));
        let mut wtr = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        wtr.write_record(["date", "value"])?;
        for (i, v) in values.iter().enumerate() {
            wtr.write_record([i.to_string(), format!("{v:.6}")])?;
        }
        wtr.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_lengths() {
        let p = LienardParams::EXTREME_EVENTS;
        for shape in &STAND_IN_SHAPES {
            let v = stand_in_values(shape, &p, 300).unwrap();
            assert_eq!(v.len(), 300);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((lo - shape.min).abs() < 1e-9 && (hi - shape.max).abs() < 1e-9);
        }
    }
}
