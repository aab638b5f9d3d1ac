//! Experiment grids: single runs, the nearest-neighbor count sweep and the
//! embedding/hard-mining ablation matrix. Every report echoes the full
//! effective configuration of each cell.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::HeadParameters;
use crate::mining::MiningConfig;
use crate::representation::FusionConfig;
use crate::store::{Dataset, FORMAT_VERSION};
use crate::trainer::{train_multi, train_multi_with_params, RunMetrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub format_version: u32,
    pub engine_version: String,
}

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint {
            format_version: FORMAT_VERSION,
            engine_version: crate::ENGINE_VERSION.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub label: String,
    pub config: TrainConfig,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub dataset: String,
    pub axis: Vec<String>,
    pub cells: Vec<ExperimentCell>,
    pub fingerprint: Fingerprint,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn cell(&self, label: &str) -> Option<&ExperimentCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Plain-text table of mean ± std test accuracy per cell, in percent.
    pub fn render_table(&self) -> String {
        let width = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  accuracy (%)", "cell");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<width$}  {:.2} ± {:.2}",
                c.label,
                100.0 * c.metrics.mean_accuracy,
                100.0 * c.metrics.std_accuracy
            );
        }
        out
    }
}

fn run_cells(
    experiment: &str,
    dataset: &Dataset,
    dataset_name: &str,
    cells: Vec<(String, TrainConfig)>,
) -> Result<ExperimentReport> {
    let mut out = Vec::with_capacity(cells.len());
    for (label, config) in cells {
        let metrics = train_multi(dataset, &config)?;
        out.push(ExperimentCell { label, config, metrics });
    }
    Ok(ExperimentReport {
        experiment: experiment.to_owned(),
        dataset: dataset_name.to_owned(),
        axis: out.iter().map(|c| c.label.clone()).collect(),
        cells: out,
        fingerprint: Fingerprint::default(),
    })
}

/// Configuration with the auxiliary loss off (`n = 0`, `alpha = 0`).
pub fn without_mining(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        mining: MiningConfig {
            n: 0,
            alpha: 0.0,
            ..config.mining
        },
        ..config.clone()
    }
}

pub fn train_report(dataset: &Dataset, dataset_name: &str, config: &TrainConfig) -> Result<ExperimentReport> {
    train_report_with_params(dataset, dataset_name, config).map(|(report, _)| report)
}

/// Like [`train_report`], also returning each seed's selected parameters.
pub fn train_report_with_params(
    dataset: &Dataset,
    dataset_name: &str,
    config: &TrainConfig,
) -> Result<(ExperimentReport, Vec<HeadParameters>)> {
    let config = if config.mining.n == 0 {
        without_mining(config)
    } else {
        config.clone()
    };
    let label = format!("n={} alpha={}", config.mining.n, config.mining.alpha);
    let (metrics, params) = train_multi_with_params(dataset, &config)?;
    let report = ExperimentReport {
        experiment: "train".to_owned(),
        dataset: dataset_name.to_owned(),
        axis: vec![label.clone()],
        cells: vec![ExperimentCell { label, config, metrics }],
        fingerprint: Fingerprint::default(),
    };
    Ok((report, params))
}

/// Order-preserving deduplication; returns the unique values and one warning
/// per dropped duplicate.
pub fn dedup_ns(ns: &[usize]) -> (Vec<usize>, Vec<String>) {
    let mut unique = Vec::new();
    let mut warnings = Vec::new();
    for &n in ns {
        if unique.contains(&n) {
            warnings.push(format!("duplicate n={n} ignored"));
        } else {
            unique.push(n);
        }
    }
    (unique, warnings)
}

pub fn sweep_n_cells(base: &TrainConfig, ns: &[usize]) -> Vec<(String, TrainConfig)> {
    ns.iter()
        .map(|&n| {
            let config = if n == 0 {
                without_mining(base)
            } else {
                TrainConfig {
                    mining: MiningConfig { n, ..base.mining },
                    ..base.clone()
                }
            };
            (format!("n={n}"), config)
        })
        .collect()
}

/// Runs one cell per distinct `n`; `n = 0` is the baseline with the
/// auxiliary loss disabled.
pub fn sweep_n(
    dataset: &Dataset,
    dataset_name: &str,
    base: &TrainConfig,
    ns: &[usize],
) -> Result<(ExperimentReport, Vec<String>)> {
    let (ns, warnings) = dedup_ns(ns);
    let report = run_cells("sweep-n", dataset, dataset_name, sweep_n_cells(base, &ns))?;
    Ok((report, warnings))
}

/// The six ablation rows: i+t, i+t+d, i+t+m, i+t with mining, i+t+d+m,
/// i+t+d+m with mining. Rows without mining force alpha to 0.
pub fn ablation_cells(base: &TrainConfig, n: usize) -> Vec<(String, TrainConfig)> {
    let norm = base.fusion.l2_normalize_blocks;
    let fusion = |d: bool, m: bool| FusionConfig {
        use_image: true,
        use_text: true,
        use_descriptions: d,
        use_emotions: m,
        l2_normalize_blocks: norm,
    };
    let rows = [
        (fusion(false, false), false),
        (fusion(true, false), false),
        (fusion(false, true), false),
        (fusion(false, false), true),
        (fusion(true, true), false),
        (fusion(true, true), true),
    ];
    rows.into_iter()
        .map(|(fusion, hm)| {
            let with_fusion = TrainConfig { fusion, ..base.clone() };
            let config = if hm && n > 0 {
                TrainConfig {
                    mining: MiningConfig { n, ..base.mining },
                    ..with_fusion
                }
            } else {
                without_mining(&with_fusion)
            };
            let mut label = fusion.tag();
            if hm {
                label.push_str("+HM");
            }
            (label, config)
        })
        .collect()
}

pub fn ablate(dataset: &Dataset, dataset_name: &str, base: &TrainConfig, n: usize) -> Result<ExperimentReport> {
    run_cells("ablate", dataset, dataset_name, ablation_cells(base, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_keeps_first_occurrence() {
        let (ns, w) = dedup_ns(&[1, 0, 1, 4, 0]);
        assert_eq!(ns, vec![1, 0, 4]);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn zero_n_forces_alpha_zero() {
        let cells = sweep_n_cells(&TrainConfig::default(), &[0, 2]);
        assert_eq!(cells[0].1.mining.alpha, 0.0);
        assert_eq!(cells[0].1.mining.n, 0);
        assert_eq!(cells[1].1.mining.n, 2);
        assert_eq!(cells[1].1.mining.alpha, 0.05);
    }

    #[test]
    fn ablation_has_six_rows() {
        let cells = ablation_cells(&TrainConfig::default(), 1);
        let labels: Vec<&str> = cells.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["i+t", "i+t+d", "i+t+m", "i+t+HM", "i+t+d+m", "i+t+d+m+HM"]);
        for (label, c) in &cells {
            assert_eq!(label.ends_with("+HM"), c.mining.alpha > 0.0, "{label}");
            assert!(c.fusion.use_image && c.fusion.use_text);
        }
        assert_eq!(cells[0].1.fusion, FusionConfig::BASELINE);
    }
}
