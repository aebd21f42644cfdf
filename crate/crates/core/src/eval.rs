//! Accuracy, test log-likelihood and classifier uncertainty.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{predictive, test_ll_importance, DiscriminativeModel, GenerativeModel, PointNet, ThetaPolicy};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::PosteriorPair;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-10;
/// Importance samples for test-LL.
pub const DEFAULT_IS_SAMPLES: usize = 5000;

/// Anything that yields class probabilities per task.
pub trait Classifier {
    fn class_probs(&self, task_id: usize, x: &Tensor, rng: &mut rng::Rng) -> Result<Tensor>;
}

/// A Bayesian network with its Monte Carlo sample count.
pub struct Bayesian<'a> {
    pub model: &'a DiscriminativeModel,
    pub n_samples: usize,
}

impl Classifier for Bayesian<'_> {
    fn class_probs(&self, task_id: usize, x: &Tensor, rng: &mut rng::Rng) -> Result<Tensor> {
        predictive(self.model, task_id, x, self.n_samples, rng)
    }
}

/// Predicts with the pair's prediction posterior.
pub struct PairPredictor<'a> {
    pub pair: &'a PosteriorPair,
    pub n_samples: usize,
}

impl Classifier for PairPredictor<'_> {
    fn class_probs(&self, task_id: usize, x: &Tensor, rng: &mut rng::Rng) -> Result<Tensor> {
        predictive(self.pair.predictor(task_id), task_id, x, self.n_samples, rng)
    }
}

impl Classifier for PointNet {
    fn class_probs(&self, task_id: usize, x: &Tensor, _: &mut rng::Rng) -> Result<Tensor> {
        self.probs(task_id, x)
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("accuracy", probs.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &dyn Classifier, test: &LabeledDataset, task_id: usize, rng: &mut rng::Rng) -> Result<f64> {
    let probs = model.class_probs(task_id, &test.inputs, rng)?;
    accuracy_from_probs(&probs, &test.labels)
}

/// Unweighted mean over `(task, accuracy)` pairs, which must cover tasks
/// `0..tasks_seen` exactly once.
pub fn avg_accuracy(records: &[(usize, f64)], tasks_seen: usize) -> Result<f64> {
    let mut seen = vec![false; tasks_seen];
    for &(t, _) in records {
        match seen.get_mut(t) {
            Some(s) if !*s => *s = true,
            Some(_) => return Err(Error::DuplicateTask(t)),
            None => return Err(Error::UnknownTask(t)),
        }
    }
    if let Some(t) = seen.iter().position(|s| !s) {
        return Err(Error::UnknownTask(t));
    }
    if tasks_seen == 0 {
        return Err(Error::Empty("accuracy records"));
    }
    Ok(records.iter().map(|r| r.1).sum::<f64>() / tasks_seen as f64)
}

/// Mean importance-sampled test log-likelihood per datum.
pub fn test_ll(
    gen: &GenerativeModel,
    task_id: usize,
    x: &Tensor,
    n_is: usize,
    policy: ThetaPolicy,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let v = test_ll_importance(gen, task_id, x, n_is, policy, rng)?;
    if v.is_empty() {
        return Err(Error::Empty("test set"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `KL(onehot(class) || p)` per row, i.e. `−log max(p_class, floor)`.
pub fn onehot_kl(probs: &Tensor, class: usize) -> Result<Vec<f64>> {
    if class >= probs.cols() {
        return Err(Error::invalid(format!("class {class} outside {} outputs", probs.cols())));
    }
    Ok((0..probs.rows()).map(|i| -probs.row(i)[class].max(PROB_FLOOR).ln()).collect())
}

/// Mean KL from the task's one-hot vector to a frozen classifier's output
/// on `n_gen` generated images. `class_of_task` maps the task to the
/// classifier's output index.
pub fn classifier_uncertainty(
    gen: &GenerativeModel,
    task_id: usize,
    class_of_task: usize,
    n_gen: usize,
    classifier: &PointNet,
    task_count: usize,
    policy: ThetaPolicy,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let classes = classifier.arch().head_output_dim;
    if classes != task_count {
        return Err(Error::invalid(format!(
            "classifier has {classes} classes for {task_count} tasks"
        )));
    }
    if n_gen == 0 {
        return Err(Error::Empty("generated images"));
    }
    let images = gen.generate(task_id, n_gen, policy, rng)?;
    let kl = onehot_kl(&classifier.probs(0, &images)?, class_of_task)?;
    Ok(kl.iter().sum::<f64>() / kl.len() as f64)
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub tasks_seen: usize,
    /// Empty for aggregate metrics.
    pub eval_task: Option<usize>,
    pub metric_name: MetricName,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    AvgAccuracy,
    TestLl,
    ClassifierUncertainty,
    /// Largest absolute gap between trained and exact posterior means.
    OracleMeanError,
    /// Largest relative gap between trained and exact precisions.
    OraclePrecisionError,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::AvgAccuracy => "avg_accuracy",
            MetricName::TestLl => "test_ll",
            MetricName::ClassifierUncertainty => "classifier_uncertainty",
            MetricName::OracleMeanError => "oracle_mean_error",
            MetricName::OraclePrecisionError => "oracle_precision_error",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_examples() {
        assert_eq!(avg_accuracy(&[(0, 1.0), (1, 0.5)], 2).unwrap(), 0.75);
        assert_eq!(avg_accuracy(&[(1, 0.5), (0, 1.0)], 2).unwrap(), 0.75);
        assert!(avg_accuracy(&[(0, 1.0)], 2).is_err());
        assert!(avg_accuracy(&[(0, 1.0), (0, 1.0)], 2).is_err());
    }

    #[test]
    fn onehot_kl_cases() {
        let p = Tensor::matrix(2, 10, [vec![0.1; 10], {
            let mut v = vec![0.0; 10];
            v[3] = 1.0;
            v
        }]
        .concat())
        .unwrap();
        let kl = onehot_kl(&p, 3).unwrap();
        assert!((kl[0] - 10f64.ln()).abs() < 1e-12);
        assert_eq!(kl[1], 0.0);
        let z = onehot_kl(&p, 4).unwrap();
        assert!((z[1] - -PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_perfect_probs() {
        let p = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy_from_probs(&p, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy_from_probs(&p, &[1, 1, 0]).unwrap(), 2.0 / 3.0);
    }
}
