#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kdl_cli::commands::RunContext;
use kdl_cli::config::{DatasetSpec, ExperimentConfig};
use kdl_cli::standin::write_stand_ins;
use lienard_kdl::LienardParams;

pub fn reference_metrics() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/reference_metrics.csv")
}

/// Small grid over the three stand-in datasets with a one-epoch budget.
pub fn tiny_grid(dir: &Path, seeds: Vec<u64>) -> ExperimentConfig {
    let data = dir.join("data");
    write_stand_ins(&data, &LienardParams::EXTREME_EVENTS, Some(160)).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = seeds;
    cfg.simulation.t_end = 800.0;
    cfg.pretrain.max_epochs = 1;
    cfg.finetune.max_epochs = 1;
    cfg.architecture.lstm_hidden = 8;
    cfg.architecture.ffnn_hidden = 8;
    cfg.architecture.cnn_filters = 8;
    cfg.architecture.cnn_dense = 8;
    cfg.architecture.esn.reservoir = 30;
    cfg.architecture.esn.washout = 10;
    cfg.datasets = ["elnino", "dengue", "bjornoya"]
        .iter()
        .map(|n| DatasetSpec {
            name: n.to_string(),
            path: data.join(format!("{n}.csv")),
            value_column: "value".into(),
            timestamp_column: "date".into(),
            dt_sample: 1.0,
        })
        .collect();
    cfg
}

pub fn context(cfg: ExperimentConfig, out: &Path, jobs: usize) -> RunContext {
    RunContext::new(cfg, Some(out.to_path_buf()), None, jobs).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
