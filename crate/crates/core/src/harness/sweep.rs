use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run, RunOptions};
use crate::error::{Error, Result};
use crate::eval::{MetricName, MetricsRecord};

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub seed: u64,
    pub tasks_seen: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub best_lambda: f64,
    /// `(λ, final score)` in grid order.
    pub scores: Vec<(f64, f64)>,
    pub cells: Vec<SweepCell>,
    pub runs: Vec<PathBuf>,
}

/// Highest score wins; ties go to the smaller λ.
pub fn select_best(scores: &[(f64, f64)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(l, s) in scores {
        best = match best {
            Some((bl, bs)) if bs > s || (bs == s && bl <= l) => Some((bl, bs)),
            _ => Some((l, s)),
        };
    }
    best.map(|b| b.0).ok_or(Error::Empty("lambda grid"))
}

/// Per-(seed, step) summary: average accuracy, or the mean test-LL over
/// observed tasks for generative runs.
fn summarise(records: &[MetricsRecord], generative: bool) -> Vec<(u64, usize, f64)> {
    let mut out: Vec<(u64, usize, f64)> = Vec::new();
    if !generative {
        out.extend(
            records
                .iter()
                .filter(|r| r.metric_name == MetricName::AvgAccuracy)
                .map(|r| (r.seed, r.tasks_seen, r.value)),
        );
        return out;
    }
    let mut groups: Vec<(u64, usize, f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.metric_name == MetricName::TestLl) {
        match groups.iter_mut().find(|g| g.0 == r.seed && g.1 == r.tasks_seen) {
            Some(g) => {
                g.2 += r.value;
                g.3 += 1;
            }
            None => groups.push((r.seed, r.tasks_seen, r.value, 1)),
        }
    }
    out.extend(groups.into_iter().map(|(s, t, v, n)| (s, t, v / n as f64)));
    out
}

/// Runs every λ of `config.lambda_grid` into `out/lambda_<λ>` and picks
/// the one with the best final score averaged over seeds.
pub fn sweep(config: &ExperimentConfig, opts: &RunOptions) -> Result<SweepReport> {
    if config.lambda_grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    if !config.method.takes_lambda() {
        return Err(Error::Config(format!("method {} has no lambda to sweep", config.method.name())));
    }
    let generative = config.experiment.is_generative();
    let metric = if generative { "mean_test_ll" } else { "avg_accuracy" };
    let mut cells = Vec::new();
    let mut scores = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &config.lambda_grid {
        let mut cell = config.clone();
        cell.lambda = Some(lambda);
        cell.lambda_grid = Vec::new();
        cell.out = config.out.join(format!("lambda_{lambda}"));
        let result = run(&cell, opts)?;
        runs.push(cell.out.clone());
        let rows = summarise(&result.records, generative);
        let last = rows.iter().map(|r| r.1).max().unwrap_or(0);
        let finals: Vec<f64> = rows.iter().filter(|r| r.1 == last).map(|r| r.2).collect();
        if finals.is_empty() {
            return Err(Error::Empty("sweep cell results"));
        }
        scores.push((lambda, finals.iter().sum::<f64>() / finals.len() as f64));
        cells.extend(rows.into_iter().map(|(seed, tasks_seen, value)| SweepCell {
            lambda,
            seed,
            tasks_seen,
            metric: metric.into(),
            value,
        }));
    }
    let report = SweepReport {
        best_lambda: select_best(&scores)?,
        scores,
        cells,
        runs,
    };
    fs::create_dir_all(&config.out)?;
    let mut w = csv::Writer::from_path(config.out.join("sweep.csv"))?;
    for c in &report.cells {
        w.serialize(c)?;
    }
    w.flush()?;
    fs::write(config.out.join("sweep.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_lambda_rules() {
        assert_eq!(select_best(&[(3.0, 0.5)]).unwrap(), 3.0);
        assert_eq!(select_best(&[(1.0, 0.5), (10.0, 0.9), (100.0, 0.7)]).unwrap(), 10.0);
        assert_eq!(select_best(&[(10.0, 0.9), (1.0, 0.9)]).unwrap(), 1.0);
        assert_eq!(select_best(&[(1.0, 0.9), (10.0, 0.9)]).unwrap(), 1.0);
        assert!(select_best(&[]).is_err());
    }
}
