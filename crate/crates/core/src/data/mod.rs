//! Labelled data sets and the continual task streams built from them.

mod idx;

pub use idx::{encode_idx, load_idx, parse_idx, IdxArray, IMAGE_MAGIC, LABEL_MAGIC};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, label};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `n×d`, entries in `[0, 1]` for image data.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub task_id: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, task_id: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::shape("labeled_dataset", inputs.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            task_id: self.task_id,
        }
    }

    /// The first `n` points of a seeded shuffle, kept in original order.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> LabeledDataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Images from an IDX image/label pair, pixels scaled to `[0, 1]`.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray, classes: usize) -> Result<Self> {
        if images.count() != labels.count() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.count(),
                labels.count()
            )));
        }
        let inputs = Tensor::matrix(images.count(), images.item_len(), images.scaled())?;
        let labels = labels.data.iter().map(|&l| l as usize).collect();
        Self::new(inputs, labels, classes, 0)
    }
}

/// One step of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub head_id: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub multi_head: bool,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    pub fn classes(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.classes)
    }
}

/// Train and test splits of an IDX data set.
#[derive(Clone, Debug)]
pub struct BaseDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub class_names: Vec<String>,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads the four standard IDX files from `dir`. notMNIST is accepted under
/// the same file names once converted.
pub fn load_base(dir: &Path, class_names: Vec<String>) -> Result<BaseDataset> {
    let path = |name: &str| -> PathBuf { dir.join(name) };
    let classes = class_names.len();
    let train = LabeledDataset::from_idx(&load_idx(&path(MNIST_FILES[0]))?, &load_idx(&path(MNIST_FILES[1]))?, classes)?;
    let test = LabeledDataset::from_idx(&load_idx(&path(MNIST_FILES[2]))?, &load_idx(&path(MNIST_FILES[3]))?, classes)?;
    Ok(BaseDataset {
        train,
        test,
        class_names,
    })
}

pub fn digit_names() -> Vec<String> {
    (0..10).map(|d| d.to_string()).collect()
}

pub fn letter_names() -> Vec<String> {
    ('A'..='J').map(|c| c.to_string()).collect()
}

pub const MNIST_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];
/// A/F, B/G, C/H, D/I, E/J as class indices.
pub const NOTMNIST_PAIRS: [(usize, usize); 5] = [(0, 5), (1, 6), (2, 7), (3, 8), (4, 9)];

/// Seeded permutation of `0..d` for task `t`.
pub fn task_permutation(seed: u64, t: usize, d: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..d).collect();
    p.shuffle(&mut rng::stream(seed, &[label::PERMUTATION, t as u64]));
    p
}

fn permute_columns(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = x.row(r);
        out.extend(perm.iter().map(|&j| row[j]));
    }
    Tensor::matrix(n, d, out).expect("same size")
}

/// Task `t` of the permuted stream: every image of `base` with its pixels
/// reordered by a fixed permutation `π_t`.
pub fn permuted_task(base: &BaseDataset, t: usize, seed: u64, identity_first: bool) -> Task {
    let d = base.train.dim();
    let perm = if t == 0 && identity_first {
        (0..d).collect()
    } else {
        task_permutation(seed, t, d)
    };
    let apply = |ds: &LabeledDataset| LabeledDataset {
        inputs: permute_columns(&ds.inputs, &perm),
        labels: ds.labels.clone(),
        classes: ds.classes,
        task_id: t,
    };
    Task {
        train: apply(&base.train),
        test: apply(&base.test),
        head_id: 0,
        class_names: base.class_names.clone(),
    }
}

/// Single-head stream of [`permuted_task`]s.
pub fn permuted_stream(base: &BaseDataset, tasks: usize, seed: u64, identity_first: bool) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(Error::invalid("permuted stream needs at least one task"));
    }
    let tasks = (0..tasks).map(|t| permuted_task(base, t, seed, identity_first)).collect();
    Ok(TaskStream { tasks, multi_head: false })
}

/// Multi-head stream of binary tasks; the first class of each pair becomes
/// label 0 and the second label 1.
pub fn split_stream(base: &BaseDataset, pairs: &[(usize, usize)]) -> Result<TaskStream> {
    let mut seen = std::collections::BTreeSet::new();
    for &(a, b) in pairs {
        for c in [a, b] {
            if c >= base.train.classes {
                return Err(Error::invalid(format!("class {c} outside {}", base.train.classes)));
            }
            if !seen.insert(c) {
                return Err(Error::invalid(format!("class {c} appears in more than one pair")));
            }
        }
    }
    let select = |ds: &LabeledDataset, a: usize, b: usize, t: usize| -> LabeledDataset {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == a || ds.labels[i] == b).collect();
        LabeledDataset {
            inputs: ds.inputs.select_rows(&idx),
            labels: idx.iter().map(|&i| usize::from(ds.labels[i] == b)).collect(),
            classes: 2,
            task_id: t,
        }
    };
    let tasks = pairs
        .iter()
        .enumerate()
        .map(|(t, &(a, b))| Task {
            train: select(&base.train, a, b, t),
            test: select(&base.test, a, b, t),
            head_id: t,
            class_names: vec![base.class_names[a].clone(), base.class_names[b].clone()],
        })
        .collect();
    Ok(TaskStream { tasks, multi_head: true })
}

/// One single-class task per listed class, for the generative experiments.
pub fn class_stream(base: &BaseDataset, classes: &[usize]) -> Result<TaskStream> {
    let select = |ds: &LabeledDataset, c: usize, t: usize| -> LabeledDataset {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        LabeledDataset {
            inputs: ds.inputs.select_rows(&idx),
            labels: vec![c; idx.len()],
            classes: ds.classes,
            task_id: t,
        }
    };
    let mut tasks = Vec::with_capacity(classes.len());
    for (t, &c) in classes.iter().enumerate() {
        if c >= base.train.classes {
            return Err(Error::invalid(format!("class {c} outside {}", base.train.classes)));
        }
        tasks.push(Task {
            train: select(&base.train, c, t),
            test: select(&base.test, c, t),
            head_id: t,
            class_names: vec![base.class_names[c].clone()],
        });
    }
    Ok(TaskStream { tasks, multi_head: true })
}

/// Two-class Gaussian blobs for the two-task toy problem. Class 0 keeps its
/// distribution across tasks; class 1 moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toy2dConfig {
    pub class0_mean: [f64; 2],
    pub class1_means: Vec<[f64; 2]>,
    pub std: f64,
    pub per_class: usize,
    pub test_per_class: usize,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Toy2dConfig {
            class0_mean: [0.0, 0.0],
            class1_means: vec![[3.0, 3.0], [3.0, -3.0]],
            std: 1.0,
            per_class: 100,
            test_per_class: 100,
        }
    }
}

impl Toy2dConfig {
    /// Mean of `class` in task `t`.
    pub fn class_mean(&self, t: usize, class: usize) -> [f64; 2] {
        if class == 0 {
            self.class0_mean
        } else {
            self.class1_means[t]
        }
    }
}

pub fn toy2d_stream(seed: u64, cfg: &Toy2dConfig) -> Result<TaskStream> {
    if cfg.class1_means.is_empty() || !(cfg.std > 0.0) {
        return Err(Error::invalid("toy2d needs at least one task and a positive std"));
    }
    let blob = |t: usize, split: u64, n: usize| -> Result<LabeledDataset> {
        let mut r = rng::stream(seed, &[label::DATA, t as u64, split]);
        let mut data = Vec::with_capacity(4 * n);
        let mut labels = Vec::with_capacity(2 * n);
        for class in 0..2 {
            let m = cfg.class_mean(t, class);
            for _ in 0..n {
                data.push(m[0] + cfg.std * r.sample::<f64, _>(StandardNormal));
                data.push(m[1] + cfg.std * r.sample::<f64, _>(StandardNormal));
                labels.push(class);
            }
        }
        LabeledDataset::new(Tensor::matrix(2 * n, 2, data)?, labels, 2, t)
    };
    let tasks = (0..cfg.class1_means.len())
        .map(|t| {
            Ok(Task {
                train: blob(t, 0, cfg.per_class)?,
                test: blob(t, 1, cfg.test_per_class)?,
                head_id: t,
                class_names: vec!["0".into(), "1".into()],
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream { tasks, multi_head: true })
}

/// One random `±1` pattern and `±1` target per step.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternStream {
    pub dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// `unit_norm` divides every pattern by `√D`.
pub fn random_pattern_stream(dim: usize, steps: usize, seed: u64, unit_norm: bool) -> Result<PatternStream> {
    if dim == 0 {
        return Err(Error::invalid("pattern dimension must be at least 1"));
    }
    let mut r = rng::stream(seed, &[label::DATA]);
    let scale = if unit_norm { 1.0 / (dim as f64).sqrt() } else { 1.0 };
    let sign = |r: &mut rng::Rng| if r.gen::<bool>() { 1.0 } else { -1.0 };
    let mut inputs = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    for _ in 0..steps {
        inputs.push((0..dim).map(|_| sign(&mut r) * scale).collect());
        targets.push(sign(&mut r));
    }
    Ok(PatternStream { dim, inputs, targets })
}

pub const GLYPH_SIDE: usize = 8;

/// Draws one jittered 8×8 glyph: class 0 is a square outline, class 1 a
/// diagonal cross. Stroke pixels are bright, the background faint.
pub fn draw_glyph<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Vec<f64> {
    let s = GLYPH_SIDE;
    let mut img: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..0.1)).collect();
    let size = rng.gen_range(4..=6usize);
    let ox = rng.gen_range(0..=s - size);
    let oy = rng.gen_range(0..=s - size);
    let mut ink = |x: usize, y: usize, rng: &mut R| img[(oy + y) * s + ox + x] = rng.gen_range(0.8..1.0);
    for i in 0..size {
        if class == 0 {
            ink(i, 0, rng);
            ink(i, size - 1, rng);
            ink(0, i, rng);
            ink(size - 1, i, rng);
        } else {
            ink(i, i, rng);
            ink(size - 1 - i, i, rng);
        }
    }
    img
}

pub fn glyph_dataset(classes: &[usize], per_class: usize, seed: u64, split: u64) -> Result<LabeledDataset> {
    let mut r = rng::stream(seed, &[label::DATA, split]);
    let mut data = Vec::with_capacity(classes.len() * per_class * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::new();
    for &c in classes {
        for _ in 0..per_class {
            data.extend(draw_glyph(c, &mut r));
            labels.push(c);
        }
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::matrix(n, GLYPH_SIDE * GLYPH_SIDE, data)?, labels, 2, 0)
}

/// Two single-class glyph tasks.
pub fn glyph_stream(seed: u64, train_per_task: usize, test_per_task: usize) -> Result<TaskStream> {
    let tasks = (0..2)
        .map(|t| {
            let mut train = glyph_dataset(&[t], train_per_task, seed, 2 * t as u64)?;
            let mut test = glyph_dataset(&[t], test_per_task, seed, 2 * t as u64 + 1)?;
            train.task_id = t;
            test.task_id = t;
            Ok(Task {
                train,
                test,
                head_id: t,
                class_names: vec![["square", "cross"][t].into()],
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream { tasks, multi_head: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> BaseDataset {
        let n = 20;
        let inputs = Tensor::matrix(n, 4, (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let labels = (0..n).map(|i| i % 10).collect();
        let ds = LabeledDataset::new(inputs, labels, 10, 0).unwrap();
        BaseDataset {
            train: ds.clone(),
            test: ds,
            class_names: digit_names(),
        }
    }

    #[test]
    fn permutations_are_bijections() {
        let mut p = task_permutation(3, 2, 784);
        p.sort_unstable();
        assert_eq!(p, (0..784).collect::<Vec<_>>());
    }

    #[test]
    fn identity_first_task_keeps_images() {
        let base = tiny_base();
        let s = permuted_stream(&base, 3, 1, true).unwrap();
        assert_eq!(s.tasks[0].train.inputs, base.train.inputs);
        assert_ne!(s.tasks[1].train.inputs, base.train.inputs);
        assert_eq!(permuted_stream(&base, 3, 1, true).unwrap(), s);
    }

    #[test]
    fn split_relabels_and_rejects_overlap() {
        let base = tiny_base();
        let s = split_stream(&base, &MNIST_PAIRS).unwrap();
        assert_eq!(s.len(), 5);
        for t in &s.tasks {
            let set: std::collections::BTreeSet<_> = t.train.labels.iter().copied().collect();
            assert_eq!(set, [0, 1].into_iter().collect());
        }
        assert!(split_stream(&base, &[(0, 1), (1, 2)]).is_err());
    }

    #[test]
    fn toy2d_defaults() {
        let cfg = Toy2dConfig::default();
        let s = toy2d_stream(7, &cfg).unwrap();
        assert_eq!(s.len(), 2);
        for t in &s.tasks {
            assert_eq!(t.train.len(), 200);
            assert_eq!(t.train.labels.iter().filter(|&&l| l == 0).count(), 100);
        }
        assert_eq!(cfg.class_mean(0, 0), cfg.class_mean(1, 0));
        assert_eq!(toy2d_stream(7, &cfg).unwrap(), s);
    }

    #[test]
    fn patterns_are_signs() {
        let s = random_pattern_stream(5, 10, 2, false).unwrap();
        assert_eq!(s.inputs.len(), 10);
        assert!(s.inputs.iter().flatten().chain(&s.targets).all(|&v| v == 1.0 || v == -1.0));
        let u = random_pattern_stream(5, 10, 2, true).unwrap();
        for x in &u.inputs {
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn glyphs_in_unit_range() {
        let s = glyph_stream(1, 10, 5).unwrap();
        assert_eq!(s.tasks[0].train.dim(), 64);
        assert!(s.tasks[1].test.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
