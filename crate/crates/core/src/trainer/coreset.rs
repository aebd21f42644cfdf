use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CoresetPolicy {
    Random,
    KCenter,
}

/// A stored data point with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct CoresetEntry {
    pub task_id: usize,
    /// Row of the task's training set the point was taken from.
    pub index: usize,
    pub input: Vec<f64>,
    pub label: usize,
}

impl CoresetEntry {
    pub fn key(&self) -> (usize, usize) {
        (self.task_id, self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coreset {
    pub entries: Vec<CoresetEntry>,
    pub policy: CoresetPolicy,
    pub per_task_quota: usize,
}

impl Coreset {
    pub fn new(policy: CoresetPolicy, per_task_quota: usize) -> Self {
        Coreset {
            entries: Vec::new(),
            policy,
            per_task_quota,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Task ids present, ascending.
    pub fn task_ids(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| e.task_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn keys(&self) -> BTreeSet<(usize, usize)> {
        self.entries.iter().map(CoresetEntry::key).collect()
    }

    /// The entries matching `keep` as a data set tagged with `task_id`.
    pub fn to_dataset(&self, task_id: usize, classes: usize, keep: impl Fn(&CoresetEntry) -> bool) -> Result<LabeledDataset> {
        let picked: Vec<&CoresetEntry> = self.entries.iter().filter(|e| keep(e)).collect();
        let d = picked.first().map_or(0, |e| e.input.len());
        let data = picked.iter().flat_map(|e| e.input.iter().copied()).collect();
        let labels = picked.iter().map(|e| e.label).collect();
        LabeledDataset::new(Tensor::matrix(picked.len(), d, data)?, labels, classes, task_id)
    }

    pub fn task_dataset(&self, task_id: usize, classes: usize) -> Result<LabeledDataset> {
        self.to_dataset(task_id, classes, |e| e.task_id == task_id)
    }
}

/// Greedy K-center from a given first center: each further center is the
/// point farthest (Euclidean) from its nearest chosen center, ties to the
/// lowest index.
pub fn k_center_from(points: &Tensor, k: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k > n {
        return Err(Error::invalid(format!("cannot choose {k} centers from {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if first >= n {
        return Err(Error::invalid(format!("first center {first} out of range")));
    }
    let sq = |a: usize, b: usize| -> f64 {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(i, first)).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq(i, best));
        }
    }
    Ok(chosen)
}

/// Greedy K-center with the first center drawn uniformly from `rng`.
pub fn k_center_select<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = points.rows();
    if k > n {
        return Err(Error::invalid(format!("cannot choose {k} centers from {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    k_center_from(points, k, rng.gen_range(0..n))
}

/// Appends `k` points of `data` chosen by `policy`; returns the new coreset
/// and the chosen row indices.
pub fn update_coreset<R: Rng + ?Sized>(
    prev: &Coreset,
    data: &LabeledDataset,
    policy: CoresetPolicy,
    k: usize,
    rng: &mut R,
) -> Result<(Coreset, Vec<usize>)> {
    if k > data.len() {
        return Err(Error::invalid(format!(
            "coreset quota {k} exceeds {} available points",
            data.len()
        )));
    }
    let chosen = match policy {
        CoresetPolicy::Random => {
            let mut v = index::sample(rng, data.len(), k).into_vec();
            v.sort_unstable();
            v
        }
        CoresetPolicy::KCenter => k_center_select(&data.inputs, k, rng)?,
    };
    let mut next = prev.clone();
    next.policy = policy;
    next.per_task_quota = k;
    for &i in &chosen {
        next.entries.push(CoresetEntry {
            task_id: data.task_id,
            index: i,
            input: data.inputs.row(i).to_vec(),
            label: data.labels[i],
        });
    }
    Ok((next, chosen))
}
