//! Run directories, the ablation grids and the sampling-strategy sweep.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::RunConfig;
use crate::data::Dataset;
use crate::error::{Result, SspError};
use crate::model::VideoModel;
use crate::prompt::Strategy;
use crate::train::{train, TrainReport};

pub const CONFIG_FILE: &str = "config.json";
pub const EXPORTS_DIR: &str = "exports";

/// Train one model into `dir`: `config.json`, `metrics.csv`,
/// `checkpoints/`, `freeze_report.csv` and an empty `exports/`.
pub fn run_training(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<(VideoModel, TrainReport)> {
    cfg.validate()?;
    fs::create_dir_all(dir.join(EXPORTS_DIR)).map_err(|e| SspError::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| SspError::io(&path, e))?;
    let mut model = VideoModel::new(cfg.model_config(), cfg.backbone_seed, cfg.seed)?;
    let report = train(&mut model, data, &cfg.train_config(), Some(dir))?;
    Ok((model, report))
}

/// One configuration of the module and gate switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    pub use_ifg: bool,
    pub use_ifs: bool,
    pub use_entropy_gate: bool,
    pub use_variance_gate: bool,
}

const fn arm(name: &'static str, ifg: bool, ifs: bool, entropy: bool, variance: bool) -> Arm {
    Arm {
        name,
        use_ifg: ifg,
        use_ifs: ifs,
        use_entropy_gate: entropy,
        use_variance_gate: variance,
    }
}

/// The module grid {IFG, IFS} × {on, off} followed by the gate grid
/// {entropy, variance} × {on, off} with both modules on.
pub const ARMS: [Arm; 8] = [
    arm("ifg+ifs", true, true, true, true),
    arm("ifg_only", true, false, true, true),
    arm("ifs_only", false, true, true, true),
    arm("neither", false, false, true, true),
    arm("entropy+variance", true, true, true, true),
    arm("entropy_only", true, true, true, false),
    arm("variance_only", true, true, false, true),
    arm("no_gates", true, true, false, false),
];

impl Arm {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            use_ifg: self.use_ifg,
            use_ifs: self.use_ifs,
            use_entropy_gate: self.use_entropy_gate,
            use_variance_gate: self.use_variance_gate,
            ..base.clone()
        }
    }

    fn key(&self) -> (bool, bool, bool, bool) {
        (
            self.use_ifg,
            self.use_ifs,
            self.use_entropy_gate,
            self.use_variance_gate,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub arm: String,
    pub seed: u64,
    pub best_val_top1: f64,
    pub final_val_top1: f64,
    pub trainable: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub arm: String,
    pub runs: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[RunRow], order: &[&str]) -> Vec<SummaryRow> {
    order
        .iter()
        .map(|&name| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.arm == name).map(|r| r.best_val_top1).collect();
            let (mean, sd) = mean_sd(&acc);
            SummaryRow {
                arm: name.to_string(),
                runs: acc.len(),
                mean,
                sd,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SspError::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SspError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| SspError::io(path, e))
}

fn seeds(base: &RunConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base.seed + k).collect()
}

fn row(name: &str, cfg: &RunConfig, model: &VideoModel, r: &TrainReport) -> RunRow {
    let (trainable, total) = model.parameter_counts(cfg.policy);
    RunRow {
        arm: name.to_string(),
        seed: cfg.seed,
        best_val_top1: r.best_val_top1,
        final_val_top1: r.final_val_top1,
        trainable,
        total,
    }
}

/// Train every arm of [`ARMS`] for `n_seeds` seeds under `out/ablation/`.
/// Arms with identical switches share their runs. Writes `ablation.csv`
/// (one row per arm and seed) and `ablation_summary.csv`.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    out: &Path,
    n_seeds: usize,
) -> Result<(Vec<RunRow>, Vec<SummaryRow>)> {
    let root = out.join("ablation");
    let mut rows: Vec<RunRow> = Vec::new();
    for seed in seeds(base, n_seeds) {
        for (k, a) in ARMS.iter().enumerate() {
            if let Some(prev) = ARMS[..k].iter().find(|p| p.key() == a.key()) {
                let shared = rows
                    .iter()
                    .find(|r| r.arm == prev.name && r.seed == seed)
                    .expect("earlier arm ran")
                    .clone();
                rows.push(RunRow {
                    arm: a.name.to_string(),
                    ..shared
                });
                continue;
            }
            let cfg = RunConfig { seed, ..a.apply(base) };
            let (model, report) = run_training(&cfg, data, &root.join(format!("{}_seed{seed}", a.name)))?;
            rows.push(row(a.name, &cfg, &model, &report));
        }
    }
    rows.sort_by_key(|r| (ARMS.iter().position(|a| a.name == r.arm), r.seed));
    let names: Vec<&str> = ARMS.iter().map(|a| a.name).collect();
    let summary = summarize(&rows, &names);
    write_csv(&root.join("ablation.csv"), &rows)?;
    write_csv(&root.join("ablation_summary.csv"), &summary)?;
    Ok((rows, summary))
}

/// Train each sampling strategy for `n_seeds` seeds under `out/strategies/`;
/// writes `strategies.csv` and `strategies_summary.csv`.
pub fn run_strategy_sweep(
    base: &RunConfig,
    data: &Dataset,
    out: &Path,
    n_seeds: usize,
) -> Result<(Vec<RunRow>, Vec<SummaryRow>)> {
    let root = out.join("strategies");
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        for seed in seeds(base, n_seeds) {
            let cfg = RunConfig {
                strategy: s,
                seed,
                ..base.clone()
            };
            let (model, report) = run_training(&cfg, data, &root.join(format!("{}_seed{seed}", s.name())))?;
            rows.push(row(s.name(), &cfg, &model, &report));
        }
    }
    let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
    let summary = summarize(&rows, &names);
    write_csv(&root.join("strategies.csv"), &rows)?;
    write_csv(&root.join("strategies_summary.csv"), &summary)?;
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sd() {
        assert_eq!(mean_sd(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn neither_arm_is_the_head_only_baseline() {
        let neither = ARMS.iter().find(|a| a.name == "neither").unwrap();
        let cfg = neither.apply(&RunConfig::default());
        let m = VideoModel::new(cfg.model_config(), 0, 0).unwrap();
        let peft = m.freeze_mask(cfg.policy);
        let head = m.freeze_mask(crate::model::FreezePolicy::HeadOnly);
        assert_eq!(peft, head);
    }

    #[test]
    fn shared_full_arm_appears_in_both_grids() {
        assert_eq!(ARMS[0].key(), ARMS[4].key());
        let distinct: std::collections::HashSet<_> = ARMS.iter().map(|a| a.key()).collect();
        assert_eq!(distinct.len(), 7);
    }
}
