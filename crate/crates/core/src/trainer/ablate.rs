use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Fusion, Readout, RunConfig};
use super::train::{train, RunReport};
use crate::data::{DatasetSplit, TaskKind};
use crate::error::{Error, Result};
use crate::lm::{TinyDecoderLM, Vocab};

/// Named ablation matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Early fusion on/off × mean/LGPT readout.
    Table3,
    /// Both readouts × every fusion setting.
    Table4,
    /// LGPT with early fusion at 1, 8 and 32 tokens.
    Fig4,
}

pub const FIG4_TOKENS: [usize; 3] = [1, 8, 32];

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Preset::Table3),
            "table4" => Ok(Preset::Table4),
            "fig4" => Ok(Preset::Fig4),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl Preset {
    /// Arms derived from `base`; everything but the ablated axes is kept.
    pub fn arms(self, base: &RunConfig) -> Vec<RunConfig> {
        let arm = |readout, fusion, n_tokens| {
            RunConfig {
                readout,
                fusion,
                n_tokens,
                ..base.clone()
            }
            .normalized()
        };
        let n = base.n_tokens;
        match self {
            Preset::Table3 => vec![
                arm(Readout::Mean, Fusion::None, 1),
                arm(Readout::Mean, Fusion::Early, 1),
                arm(Readout::Lgpt, Fusion::None, n),
                arm(Readout::Lgpt, Fusion::Early, n),
            ],
            Preset::Table4 => [Readout::Mean, Readout::Lgpt]
                .into_iter()
                .flat_map(|r| Fusion::ALL.into_iter().map(move |f| (r, f)))
                .map(|(r, f)| arm(r, f, n))
                .collect(),
            Preset::Fig4 => FIG4_TOKENS
                .into_iter()
                .map(|k| arm(Readout::Lgpt, Fusion::Early, k))
                .collect(),
        }
    }
}

/// One `(config, seed)` cell. Failures are kept as messages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub config: RunConfig,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Trains every arm under every seed, `jobs` at a time. Results come back in
/// arm-major, seed-minor order regardless of scheduling, and a failing cell
/// does not stop the others.
pub fn ablate(
    arms: &[RunConfig],
    seeds: &[u64],
    data: &DatasetSplit,
    lm: &TinyDecoderLM,
    vocab: &Vocab,
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one arm and seed".into()));
    }
    if let Some(c) = arms.iter().find(|c| c.task != arms[0].task) {
        return Err(Error::Config(format!(
            "arms mix tasks {} and {}",
            arms[0].task.name(),
            c.task.name()
        )));
    }
    let cells: Vec<RunConfig> = arms
        .iter()
        .flat_map(|a| seeds.iter().map(move |&seed| RunConfig { seed, ..a.clone() }))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|config| {
                let outcome = train(&config, data, lm, vocab)
                    .map(|o| o.report)
                    .map_err(|e| {
                        log::error!("arm {} seed {} failed: {e}", config.arm(), config.seed);
                        e.to_string()
                    });
                ArmResult { config, outcome }
            })
            .collect()
    }))
}

/// Aggregate of one arm over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub readout: Readout,
    pub fusion: Fusion,
    pub n_tokens: usize,
    pub seeds: Vec<u64>,
    pub test_metrics: Vec<f64>,
    pub failures: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two successful seeds.
    pub std: Option<f64>,
    /// Relative change of `mean` against the baseline arm, in percent.
    pub delta_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: TaskKind,
    /// Arm the Δ column is relative to.
    pub baseline: String,
    pub rows: Vec<ArmRow>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let s = (xs.len() > 1).then(|| {
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        var.sqrt()
    });
    (Some(m), s)
}

/// Groups results by arm, ordered by readout, fusion and token count so the
/// table does not depend on input order. Δ is relative to the mean/none arm
/// when present, otherwise to the first row.
pub fn summarize(results: &[ArmResult]) -> Result<AblationTable> {
    let first = results.first().ok_or(Error::EmptyDataset)?;
    let task = first.config.task;
    if let Some(r) = results.iter().find(|r| r.config.task != task) {
        return Err(Error::Config(format!(
            "results mix tasks {} and {}",
            task.name(),
            r.config.task.name()
        )));
    }
    let mut ordered: Vec<&ArmResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.config.seed);
    let mut rows: Vec<ArmRow> = Vec::new();
    for r in ordered {
        let arm = r.config.arm();
        let idx = match rows.iter().position(|row| row.arm == arm) {
            Some(i) => i,
            None => {
                rows.push(ArmRow {
                    arm,
                    readout: r.config.readout,
                    fusion: r.config.fusion,
                    n_tokens: r.config.n_tokens,
                    seeds: Vec::new(),
                    test_metrics: Vec::new(),
                    failures: 0,
                    mean: None,
                    std: None,
                    delta_pct: None,
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.seeds.push(r.config.seed);
        match &r.outcome {
            Ok(report) => row.test_metrics.push(report.test_metric),
            Err(_) => row.failures += 1,
        }
    }
    rows.sort_by_key(|r| (r.readout, r.fusion, r.n_tokens));
    for row in &mut rows {
        (row.mean, row.std) = mean_std(&row.test_metrics);
    }
    let base_idx = rows
        .iter()
        .position(|r| r.readout == Readout::Mean && r.fusion == Fusion::None)
        .unwrap_or(0);
    let baseline = rows[base_idx].arm.clone();
    let base_mean = rows[base_idx].mean;
    for row in &mut rows {
        row.delta_pct = match (row.mean, base_mean) {
            (Some(m), Some(b)) if b != 0.0 => Some((m - b) / b * 100.0),
            _ => None,
        };
    }
    Ok(AblationTable {
        task,
        baseline,
        rows,
    })
}


impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,arm,readout,fusion,n_tokens,seeds,failures,mean,std,delta_pct\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.task.name(),
                r.arm,
                r.readout,
                r.fusion,
                r.n_tokens,
                r.seeds.len(),
                r.failures,
                r.mean.map_or(String::new(), |v| format!("{v:.4}")),
                r.std.map_or(String::new(), |v| format!("{v:.4}")),
                r.delta_pct.map_or(String::new(), |v| format!("{v:.2}")),
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Task: {} (Δ relative to {})\n\n| Readout | Fusion | n | Accuracy (mean ± std) | Δ (%) | Seeds | Failed |\n|---|---|---|---|---|---|---|\n",
            self.task.name(),
            self.baseline
        );
        for r in &self.rows {
            let acc = match (r.mean, r.std) {
                (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                (Some(m), None) => format!("{m:.4}"),
                _ => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.readout,
                r.fusion,
                r.n_tokens,
                acc,
                r.delta_pct
                    .map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}%")),
                r.seeds.len(),
                r.failures
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::train::EvalPoint;

    fn report(config: &RunConfig, metric: f64) -> RunReport {
        RunReport {
            config: config.clone(),
            trajectory: vec![EvalPoint {
                step: 1,
                train_loss: 1.0,
                val_metric: metric,
            }],
            losses: vec![1.0],
            steps: 1,
            best_step: 1,
            best_val_metric: metric,
            test_metric: metric,
            skipped_examples: 0,
            wall_time_secs: 0.0,
            lm_digest_before: "x".into(),
            lm_digest_after: "x".into(),
            digests_equal: true,
            params_digest: "p".into(),
        }
    }

    fn cell(readout: Readout, fusion: Fusion, seed: u64, metric: Option<f64>) -> ArmResult {
        let config = RunConfig {
            readout,
            fusion,
            seed,
            ..RunConfig::default()
        }
        .normalized();
        ArmResult {
            outcome: metric.map(|m| report(&config, m)).ok_or_else(|| "boom".to_string()),
            config,
        }
    }

    #[test]
    fn preset_shapes() {
        let base = RunConfig::default();
        assert_eq!(Preset::Table3.arms(&base).len(), 4);
        let t4 = Preset::Table4.arms(&base);
        assert_eq!(t4.len(), 8);
        let mut labels: Vec<String> = t4.iter().map(RunConfig::arm).collect();
        labels.dedup();
        assert_eq!(labels.len(), 8);
        let f4: Vec<usize> = Preset::Fig4.arms(&base).iter().map(|c| c.n_tokens).collect();
        assert_eq!(f4, FIG4_TOKENS);
    }

    #[test]
    fn sample_std_and_delta() {
        let results = vec![
            cell(Readout::Lgpt, Fusion::Early, 0, Some(0.6)),
            cell(Readout::Lgpt, Fusion::Early, 1, Some(0.8)),
            cell(Readout::Mean, Fusion::None, 0, Some(0.5)),
            cell(Readout::Mean, Fusion::None, 1, Some(0.5)),
            cell(Readout::Mean, Fusion::None, 2, None),
        ];
        let t = summarize(&results).unwrap();
        assert_eq!(t.baseline, "mean/none/n=1");
        let lgpt = &t.rows[1];
        assert!((lgpt.mean.unwrap() - 0.7).abs() < 1e-12);
        // Sample (n − 1) standard deviation of {0.6, 0.8}.
        assert!((lgpt.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((lgpt.delta_pct.unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(t.rows[0].failures, 1);
        assert_eq!(t.rows[0].delta_pct, Some(0.0));
        let md = t.to_markdown();
        assert!(md.contains("0.7000 ± 0.1414 | +40.00%"), "{md}");
        assert!(md.contains("| +0.00% |"), "{md}");
        assert_eq!(t.to_csv().lines().count(), 3);
    }

    #[test]
    fn first_arm_is_the_fallback_baseline() {
        let results = vec![
            cell(Readout::Lgpt, Fusion::Early, 0, Some(0.4)),
            cell(Readout::Lgpt, Fusion::None, 0, Some(0.2)),
        ];
        let t = summarize(&results).unwrap();
        assert_eq!(t.baseline, "lgpt/none/n=8");
        assert!((t.rows[1].delta_pct.unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(t.rows[0].std, None);
    }

    #[test]
    fn mixed_tasks_rejected() {
        let mut b = cell(Readout::Lgpt, Fusion::Early, 0, Some(0.4));
        b.config.task = TaskKind::Stance;
        let results = vec![cell(Readout::Lgpt, Fusion::Early, 0, Some(0.4)), b];
        assert!(matches!(summarize(&results), Err(Error::Config(_))));
    }
}
