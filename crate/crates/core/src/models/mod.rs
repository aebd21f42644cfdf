//! Network assembly: Bayesian multi-head classifiers, their deterministic
//! counterparts, the continual VAE, and the Bayesian linear model.

mod checkpoint;
mod generative;
mod linreg;
mod point;

pub use checkpoint::{
    read_discriminative, read_generative, read_point_net, write_discriminative, write_generative, write_point_net,
    CHECKPOINT_FORMAT_VERSION,
};
pub use generative::{
    test_ll_importance, vae_elbo_batch, vae_elbo_rows, Encoder, GenerativeModel, GenerativeSpec, GenerativeVars,
    ThetaPolicy,
};
pub use linreg::BayesLinearRegression;
pub use point::{PointNet, INIT_WEIGHT_SD};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    kl_diag_gaussians, local_reparam_var, GaussianLinear, GaussianVars, LinearVars, MeanFieldGaussian, PriorSpec,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
        }
    }

    pub fn apply_plain(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    SingleHead,
    MultiHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub head_output_dim: usize,
    pub head_count: usize,
    pub activation: Activation,
    pub mode: HeadMode,
}

impl ArchitectureSpec {
    pub fn single_head(input_dim: usize, hidden_dims: Vec<usize>, classes: usize) -> Self {
        ArchitectureSpec {
            input_dim,
            hidden_dims,
            head_output_dim: classes,
            head_count: 1,
            activation: Activation::Relu,
            mode: HeadMode::SingleHead,
        }
    }

    pub fn multi_head(input_dim: usize, hidden_dims: Vec<usize>, classes: usize, heads: usize) -> Self {
        ArchitectureSpec {
            input_dim,
            hidden_dims,
            head_output_dim: classes,
            head_count: heads,
            activation: Activation::Relu,
            mode: HeadMode::MultiHead,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head_output_dim == 0 {
            return Err(Error::invalid("input and output dimensions must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden_dims must be non-empty and positive"));
        }
        if self.head_count == 0 {
            return Err(Error::invalid("head_count must be at least 1"));
        }
        if self.mode == HeadMode::SingleHead && self.head_count != 1 {
            return Err(Error::invalid("a single-head network has exactly one head"));
        }
        Ok(())
    }

    /// `(in, out)` of each trunk layer.
    pub fn trunk_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len());
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn head_dims(&self) -> (usize, usize) {
        (*self.hidden_dims.last().expect("validated"), self.head_output_dim)
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn head_param_count(&self) -> usize {
        let (i, o) = self.head_dims();
        i * o + o
    }
}

/// A per-task component tagged with the task id it serves.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub task_id: usize,
    pub value: T,
}

/// Finds the slot serving `task_id`: the only head for single-head networks,
/// the matching one otherwise.
pub(crate) fn head_slot<T>(heads: &[Head<T>], mode: HeadMode, task_id: usize) -> Result<usize> {
    match mode {
        HeadMode::SingleHead if !heads.is_empty() => Ok(0),
        _ => heads
            .iter()
            .position(|h| h.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id)),
    }
}

/// Mean-field Bayesian MLP with a shared trunk and one output layer per task.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminativeModel {
    arch: ArchitectureSpec,
    prior: PriorSpec,
    trunk: Vec<GaussianLinear>,
    heads: Vec<Head<GaussianLinear>>,
}

pub fn build_discriminative(spec: &ArchitectureSpec, prior: PriorSpec) -> Result<DiscriminativeModel> {
    spec.validate()?;
    let trunk = spec
        .trunk_dims()
        .into_iter()
        .map(|(i, o)| GaussianLinear::from_prior(i, o, &prior))
        .collect();
    let (hi, ho) = spec.head_dims();
    let heads = (0..spec.head_count)
        .map(|task_id| Head {
            task_id,
            value: GaussianLinear::from_prior(hi, ho, &prior),
        })
        .collect();
    Ok(DiscriminativeModel {
        arch: spec.clone(),
        prior,
        trunk,
        heads,
    })
}

impl DiscriminativeModel {
    pub(crate) fn from_parts(
        arch: ArchitectureSpec,
        prior: PriorSpec,
        trunk: Vec<GaussianLinear>,
        heads: Vec<Head<GaussianLinear>>,
    ) -> Self {
        DiscriminativeModel {
            arch,
            prior,
            trunk,
            heads,
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn trunk(&self) -> &[GaussianLinear] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Head<GaussianLinear>] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task_id).collect()
    }

    pub fn has_head(&self, task_id: usize) -> bool {
        head_slot(&self.heads, self.arch.mode, task_id).is_ok()
    }

    pub fn head(&self, task_id: usize) -> Result<&GaussianLinear> {
        Ok(&self.heads[head_slot(&self.heads, self.arch.mode, task_id)?].value)
    }

    pub fn head_mut(&mut self, task_id: usize) -> Result<&mut GaussianLinear> {
        let i = head_slot(&self.heads, self.arch.mode, task_id)?;
        Ok(&mut self.heads[i].value)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.iter().chain(self.heads.iter().map(|h| &h.value)).map(GaussianLinear::param_count).sum()
    }

    /// Trunk layers followed by the head serving `task_id`.
    pub fn active_layers(&self, task_id: usize) -> Result<Vec<&GaussianLinear>> {
        let head = self.head(task_id)?;
        Ok(self.trunk.iter().chain(std::iter::once(head)).collect())
    }

    /// Weight and bias blocks of [`active_layers`](Self::active_layers), in order.
    pub fn active_blocks(&self, task_id: usize) -> Result<Vec<MeanFieldGaussian>> {
        Ok(self
            .active_layers(task_id)?
            .into_iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect())
    }

    /// Replaces the active blocks; shapes must match.
    pub fn set_active_blocks(&mut self, task_id: usize, blocks: Vec<MeanFieldGaussian>) -> Result<()> {
        let expected = 2 * (self.trunk.len() + 1);
        if blocks.len() != expected {
            return Err(Error::shape("set_active_blocks", &[expected], &[blocks.len()]));
        }
        for (old, new) in self.active_blocks(task_id)?.iter().zip(&blocks) {
            if old.shape() != new.shape() {
                return Err(Error::shape("set_active_blocks", old.shape(), new.shape()));
            }
        }
        let mut it = blocks.into_iter();
        for layer in &mut self.trunk {
            layer.weight = it.next().expect("counted");
            layer.bias = it.next().expect("counted");
        }
        let head = self.head_mut(task_id)?;
        head.weight = it.next().expect("counted");
        head.bias = it.next().expect("counted");
        Ok(())
    }

    /// Appends a head at the prior for a task not seen before.
    pub fn grow_head(&mut self, task_id: usize) -> Result<()> {
        if self.arch.mode == HeadMode::SingleHead {
            return Err(Error::invalid("cannot add heads to a single-head network"));
        }
        if self.heads.iter().any(|h| h.task_id == task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        let (hi, ho) = self.arch.head_dims();
        self.heads.push(Head {
            task_id,
            value: GaussianLinear::from_prior(hi, ho, &self.prior),
        });
        self.arch.head_count = self.heads.len();
        Ok(())
    }

    /// `KL(self || other)` over every block; the two models must share a layout.
    pub fn kl_to(&self, other: &DiscriminativeModel) -> Result<f64> {
        if self.head_ids() != other.head_ids() || self.trunk.len() != other.trunk.len() {
            return Err(Error::invalid("models have different layouts"));
        }
        let ours = self.trunk.iter().chain(self.heads.iter().map(|h| &h.value));
        let theirs = other.trunk.iter().chain(other.heads.iter().map(|h| &h.value));
        let mut kl = 0.0;
        for (a, b) in ours.zip(theirs) {
            kl += kl_diag_gaussians(&a.weight, &b.weight)? + kl_diag_gaussians(&a.bias, &b.bias)?;
        }
        Ok(kl)
    }

    /// `KL(self || prior)`.
    pub fn kl_to_prior(&self) -> Result<f64> {
        let mut fresh = build_discriminative(&self.arch, self.prior)?;
        fresh.heads = self
            .heads
            .iter()
            .map(|h| Head {
                task_id: h.task_id,
                value: GaussianLinear::from_prior(h.value.input_dim(), h.value.output_dim(), &self.prior),
            })
            .collect();
        self.kl_to(&fresh)
    }
}

/// Groups a flat `[W₀, b₀, W₁, b₁, …]` list of graph handles into layers.
pub fn pair_layers(vars: &[GaussianVars]) -> Vec<LinearVars> {
    vars.chunks_exact(2)
        .map(|c| LinearVars {
            weight: c[0],
            bias: c[1],
        })
        .collect()
}

/// Logits under one local-reparameterisation draw per layer.
pub fn sampled_logits<R: Rng + ?Sized>(
    g: &mut Graph,
    layers: &[LinearVars],
    activation: Activation,
    x: Var,
    rng: &mut R,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let a = local_reparam_var(g, *layer, h, rng)?;
        h = if i + 1 < layers.len() { activation.apply(g, a) } else { a };
    }
    Ok(h)
}

/// Row-wise softmax outside any graph.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols().max(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Monte Carlo predictive class probabilities: the average over
/// `n_samples` local-reparameterisation draws of the softmax output.
pub fn predictive<R: Rng + ?Sized>(
    model: &DiscriminativeModel,
    task_id: usize,
    x: &Tensor,
    n_samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::invalid("predictive needs at least one sample"));
    }
    let layers = model.active_layers(task_id)?;
    let act = model.arch.activation;
    let (m0, s0) = layers[0].moments(x)?;
    let mut acc = Tensor::zeros(&[x.rows(), model.arch.head_output_dim]);
    for _ in 0..n_samples {
        let mut a = draw(&m0, &s0, rng);
        for layer in &layers[1..] {
            let h = act.apply_plain(&a);
            let (m, s) = layer.moments(&h)?;
            a = draw(&m, &s, rng);
        }
        let p = softmax_rows(&a);
        for (t, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *t += v;
        }
    }
    let inv = 1.0 / n_samples as f64;
    Ok(acc.map(|v| v * inv))
}

fn draw<R: Rng + ?Sized>(mean: &Tensor, sd: &Tensor, rng: &mut R) -> Tensor {
    let eps = Tensor::randn(mean.shape(), rng);
    let mut out = mean.clone();
    for ((o, s), e) in out.data_mut().iter_mut().zip(sd.data()).zip(eps.data()) {
        *o += s * e;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn parameter_counts() {
        let spec = ArchitectureSpec::single_head(784, vec![100, 100], 10);
        let m = build_discriminative(&spec, PriorSpec::standard()).unwrap();
        assert_eq!(m.param_count(), 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
        let multi = ArchitectureSpec::multi_head(784, vec![256, 256], 2, 5);
        assert_eq!(multi.head_param_count(), 256 * 2 + 2);
    }

    #[test]
    fn spec_validation() {
        assert!(ArchitectureSpec::single_head(4, vec![], 2).validate().is_err());
        let mut s = ArchitectureSpec::single_head(4, vec![3], 2);
        s.head_count = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn grow_head_appends_prior() {
        let spec = ArchitectureSpec::multi_head(3, vec![4], 2, 1);
        let mut m = build_discriminative(&spec, PriorSpec::standard()).unwrap();
        let trunk = m.trunk().to_vec();
        for t in 1..5 {
            m.grow_head(t).unwrap();
        }
        assert_eq!(m.head_ids(), vec![0, 1, 2, 3, 4]);
        assert_eq!(m.trunk(), &trunk[..]);
        assert!(matches!(m.grow_head(2), Err(Error::DuplicateTask(2))));
        assert_eq!(m.kl_to_prior().unwrap(), 0.0);
    }

    #[test]
    fn predictive_rows_normalised() {
        let spec = ArchitectureSpec::single_head(3, vec![5, 4], 3);
        let m = build_discriminative(&spec, PriorSpec::standard()).unwrap();
        let mut r = stream(1, &[]);
        let x = Tensor::randn(&[6, 3], &mut r);
        let p = predictive(&m, 0, &x, 7, &mut r).unwrap();
        for i in 0..6 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_head_is_an_error() {
        let spec = ArchitectureSpec::multi_head(3, vec![4], 2, 2);
        let m = build_discriminative(&spec, PriorSpec::standard()).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            predictive(&m, 9, &x, 1, &mut stream(0, &[])),
            Err(Error::UnknownTask(9))
        ));
    }
}
