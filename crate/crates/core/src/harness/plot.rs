use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{read_metrics, Manifest, MANIFEST_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::eval::{MetricName, MetricsRecord};

/// A curve selector: a metric, and for per-task metrics the task (1-based
/// in the id, e.g. `accuracy_task1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FigureId {
    pub metric: MetricName,
    pub eval_task: Option<usize>,
}

impl FigureId {
    pub fn parse(id: &str) -> Result<Self> {
        let all = [
            MetricName::Accuracy,
            MetricName::AvgAccuracy,
            MetricName::TestLl,
            MetricName::ClassifierUncertainty,
            MetricName::OracleMeanError,
            MetricName::OraclePrecisionError,
        ];
        let (name, task) = match id.rsplit_once("_task") {
            Some((n, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad task number in figure id {id:?}")))?;
                if k == 0 {
                    return Err(Error::Config("figure task numbers start at 1".into()));
                }
                (n, Some(k - 1))
            }
            None => (id, None),
        };
        let metric = all
            .into_iter()
            .find(|m| m.as_str() == name)
            .ok_or_else(|| Error::Config(format!("unknown figure id {id:?}")))?;
        let per_task = matches!(
            metric,
            MetricName::Accuracy | MetricName::TestLl | MetricName::ClassifierUncertainty
        );
        if per_task != task.is_some() {
            return Err(Error::Config(format!(
                "figure id {id:?}: per-task metrics need a _task<k> suffix, aggregate metrics take none"
            )));
        }
        Ok(FigureId { metric, eval_task: task })
    }

    fn matches(&self, r: &MetricsRecord) -> bool {
        r.metric_name == self.metric && r.eval_task == self.eval_task
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub tasks_seen: usize,
    pub mean: f64,
    pub stderr: f64,
    pub method: String,
    pub experiment: String,
}

/// Mean and standard error (sample standard deviation over `√n`; 0 for a
/// single value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed-averaged curve for one run.
pub fn curve(records: &[MetricsRecord], figure: FigureId, method: &str, experiment: &str) -> Vec<CurvePoint> {
    let mut steps: Vec<usize> = records.iter().filter(|r| figure.matches(r)).map(|r| r.tasks_seen).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|t| {
            let xs: Vec<f64> = records
                .iter()
                .filter(|r| figure.matches(r) && r.tasks_seen == t)
                .map(|r| r.value)
                .collect();
            let (mean, stderr) = mean_stderr(&xs);
            CurvePoint {
                tasks_seen: t,
                mean,
                stderr,
                method: method.into(),
                experiment: experiment.into(),
            }
        })
        .collect()
}

/// Run directories under `root` (including `root` itself), sorted.
fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() && dir.join(METRICS_FILE).is_file() {
            found.push(dir.clone());
        }
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if p.is_dir() && !matches!(name, "checkpoints" | "traces" | "plots") {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Writes one CSV per run with a matching curve into `out/<figure>/`.
pub fn emit_plot_data(results: &Path, figure: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let id = FigureId::parse(figure)?;
    let runs = find_runs(results)?;
    let mut written = Vec::new();
    let dir = out.join(figure);
    for run in runs {
        let manifest = Manifest::load(&run)?;
        let records = read_metrics(&run.join(METRICS_FILE))?;
        let points = curve(&records, id, manifest.method.name(), manifest.experiment.name());
        if points.is_empty() {
            continue;
        }
        let label = match run.strip_prefix(results) {
            Ok(p) if !p.as_os_str().is_empty() => p.to_string_lossy().replace(['/', '\\'], "_"),
            _ => format!("{}_{}", manifest.experiment.name(), manifest.method.name()),
        };
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{label}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        for p in &points {
            w.serialize(p)?;
        }
        w.flush()?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Empty("results"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_ids() {
        assert_eq!(
            FigureId::parse("accuracy_task2").unwrap(),
            FigureId {
                metric: MetricName::Accuracy,
                eval_task: Some(1)
            }
        );
        assert_eq!(FigureId::parse("avg_accuracy").unwrap().eval_task, None);
        assert!(FigureId::parse("accuracy").is_err());
        assert!(FigureId::parse("avg_accuracy_task1").is_err());
        assert!(FigureId::parse("accuracy_task0").is_err());
        assert!(FigureId::parse("nope").is_err());
    }

    #[test]
    fn stderr_single_and_pair() {
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
