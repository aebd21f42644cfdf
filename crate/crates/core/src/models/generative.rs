//! Continual VAE: per-task decoder heads `z → h`, a shared decoder
//! `h → x` with Bernoulli outputs, and per-task point-estimated Gaussian
//! encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Head};
use crate::bayes::{sample_weights, sample_weights_var, GaussianLinear, GaussianVars, MeanFieldGaussian, PriorSpec};
use crate::error::{Error, Result};
use crate::tensor::{softplus, Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub intermediate_dim: usize,
    /// Hidden widths inside each head, between `z` and `h`.
    pub head_hidden: Vec<usize>,
    /// Hidden widths inside the shared decoder, between `h` and `x`.
    pub shared_hidden: Vec<usize>,
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.input_dim, self.latent_dim, self.intermediate_dim];
        if all.contains(&0) || self.head_hidden.contains(&0) || self.shared_hidden.contains(&0) {
            return Err(Error::invalid("generative dimensions must be positive"));
        }
        Ok(())
    }

    fn chain(dims: &[usize]) -> Vec<(usize, usize)> {
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn head_dims(&self) -> Vec<(usize, usize)> {
        let mut d = vec![self.latent_dim];
        d.extend(&self.head_hidden);
        d.push(self.intermediate_dim);
        Self::chain(&d)
    }

    pub fn shared_dims(&self) -> Vec<(usize, usize)> {
        let mut d = vec![self.intermediate_dim];
        d.extend(&self.shared_hidden);
        d.push(self.input_dim);
        Self::chain(&d)
    }

    /// Mirror image of the generator, ending in mean and log-variance.
    pub fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut d = vec![self.input_dim];
        d.extend(self.shared_hidden.iter().rev());
        d.push(self.intermediate_dim);
        d.extend(self.head_hidden.iter().rev());
        d.push(2 * self.latent_dim);
        Self::chain(&d)
    }
}

/// Deterministic Gaussian encoder `x ↦ (μ_z, log σ_z²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Encoder {
    pub fn new_random<R: Rng + ?Sized>(spec: &GenerativeSpec, rng: &mut R) -> Self {
        let layers = spec
            .encoder_dims()
            .into_iter()
            .map(|(i, o)| {
                let w = Tensor::randn(&[i, o], rng).map(|v| v * (1.0 / i as f64).sqrt());
                (w, Tensor::zeros(&[o]))
            })
            .collect();
        Encoder { layers }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape("encoder", &[2 * self.layers.len()], &[params.len()]));
        }
        let mut it = params.into_iter();
        for (w, b) in &mut self.layers {
            let (nw, nb) = (it.next().expect("counted"), it.next().expect("counted"));
            if nw.shape() != w.shape() || nb.shape() != b.shape() {
                return Err(Error::shape("encoder", w.shape(), nw.shape()));
            }
            *w = nw;
            *b = nb;
        }
        Ok(())
    }

    /// `(μ_z, log σ_z²)` for each row of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let refs: Vec<(&Tensor, &Tensor)> = self.layers.iter().map(|(w, b)| (w, b)).collect();
        let out = dense_plain(&refs, x, false)?;
        let l = out.cols() / 2;
        let n = out.rows();
        let mut mu = Vec::with_capacity(n * l);
        let mut lv = Vec::with_capacity(n * l);
        for r in 0..n {
            mu.extend_from_slice(&out.row(r)[..l]);
            lv.extend_from_slice(&out.row(r)[l..]);
        }
        Ok((Tensor::matrix(n, l, mu)?, Tensor::matrix(n, l, lv)?))
    }
}

/// Which decoder parameters an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaPolicy {
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    spec: GenerativeSpec,
    prior: PriorSpec,
    shared: Vec<GaussianLinear>,
    heads: Vec<Head<Vec<GaussianLinear>>>,
    encoders: Vec<Head<Encoder>>,
}

fn prior_layers(dims: &[(usize, usize)], prior: &PriorSpec) -> Vec<GaussianLinear> {
    dims.iter().map(|&(i, o)| GaussianLinear::from_prior(i, o, prior)).collect()
}

fn flatten(layers: &[GaussianLinear]) -> impl Iterator<Item = &MeanFieldGaussian> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias])
}

impl GenerativeModel {
    pub fn new(spec: &GenerativeSpec, prior: PriorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(GenerativeModel {
            spec: spec.clone(),
            prior,
            shared: prior_layers(&spec.shared_dims(), &prior),
            heads: Vec::new(),
            encoders: Vec::new(),
        })
    }

    pub(crate) fn from_parts(
        spec: GenerativeSpec,
        prior: PriorSpec,
        shared: Vec<GaussianLinear>,
        heads: Vec<Head<Vec<GaussianLinear>>>,
        encoders: Vec<Head<Encoder>>,
    ) -> Self {
        GenerativeModel {
            spec,
            prior,
            shared,
            heads,
            encoders,
        }
    }

    pub(crate) fn parts(&self) -> (&[GaussianLinear], &[Head<Vec<GaussianLinear>>], &[Head<Encoder>]) {
        (&self.shared, &self.heads, &self.encoders)
    }

    pub fn spec(&self) -> &GenerativeSpec {
        &self.spec
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task_id).collect()
    }

    pub fn shared(&self) -> &[GaussianLinear] {
        &self.shared
    }

    fn slot(&self, task_id: usize) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn head_layers(&self, task_id: usize) -> Result<&[GaussianLinear]> {
        Ok(&self.heads[self.slot(task_id)?].value)
    }

    pub fn encoder(&self, task_id: usize) -> Result<&Encoder> {
        self.encoders
            .iter()
            .find(|e| e.task_id == task_id)
            .map(|e| &e.value)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn encoder_mut(&mut self, task_id: usize) -> Result<&mut Encoder> {
        self.encoders
            .iter_mut()
            .find(|e| e.task_id == task_id)
            .map(|e| &mut e.value)
            .ok_or(Error::UnknownTask(task_id))
    }

    /// Adds a decoder head at the prior and a freshly initialised encoder.
    pub fn add_task<R: Rng + ?Sized>(&mut self, task_id: usize, rng: &mut R) -> Result<()> {
        if self.heads.iter().any(|h| h.task_id == task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        self.heads.push(Head {
            task_id,
            value: prior_layers(&self.spec.head_dims(), &self.prior),
        });
        self.encoders.push(Head {
            task_id,
            value: Encoder::new_random(&self.spec, rng),
        });
        Ok(())
    }

    /// Shared decoder blocks followed by the task head's, as `[W, b, …]`.
    pub fn decoder_blocks(&self, task_id: usize) -> Result<Vec<MeanFieldGaussian>> {
        let head = self.head_layers(task_id)?;
        Ok(flatten(&self.shared).chain(flatten(head)).cloned().collect())
    }

    pub fn set_decoder_blocks(&mut self, task_id: usize, blocks: Vec<MeanFieldGaussian>) -> Result<()> {
        let old = self.decoder_blocks(task_id)?;
        if old.len() != blocks.len() || old.iter().zip(&blocks).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("set_decoder_blocks", &[old.len()], &[blocks.len()]));
        }
        let slot = self.slot(task_id)?;
        let mut it = blocks.into_iter();
        for layer in self.shared.iter_mut().chain(self.heads[slot].value.iter_mut()) {
            layer.weight = it.next().expect("counted");
            layer.bias = it.next().expect("counted");
        }
        Ok(())
    }

    /// Decoder layers `z → x` for a task: head then shared.
    fn decoder_layers(&self, task_id: usize) -> Result<Vec<&GaussianLinear>> {
        Ok(self.head_layers(task_id)?.iter().chain(self.shared.iter()).collect())
    }

    fn decoder_point<R: Rng + ?Sized>(&self, task_id: usize, policy: ThetaPolicy, rng: &mut R) -> Result<Vec<(Tensor, Tensor)>> {
        Ok(self
            .decoder_layers(task_id)?
            .into_iter()
            .map(|l| match policy {
                ThetaPolicy::Mean => (l.weight.mu().clone(), l.bias.mu().clone()),
                ThetaPolicy::Sample => (sample_weights(&l.weight, rng), sample_weights(&l.bias, rng)),
            })
            .collect())
    }

    /// Bernoulli means for `n` images of a task, `z ~ N(0, I)`.
    pub fn generate<R: Rng + ?Sized>(&self, task_id: usize, n: usize, policy: ThetaPolicy, rng: &mut R) -> Result<Tensor> {
        let layers = self.decoder_point(task_id, policy, rng)?;
        let z = Tensor::randn(&[n, self.spec.latent_dim], rng);
        let refs: Vec<(&Tensor, &Tensor)> = layers.iter().map(|(w, b)| (w, b)).collect();
        let logits = dense_plain(&refs, &z, false)?;
        Ok(logits.map(crate::tensor::sigmoid))
    }

    /// Decoder logits for latent rows `z`.
    pub fn decode_logits(&self, task_id: usize, z: &Tensor, policy: ThetaPolicy, rng: &mut impl Rng) -> Result<Tensor> {
        let layers = self.decoder_point(task_id, policy, rng)?;
        let refs: Vec<(&Tensor, &Tensor)> = layers.iter().map(|(w, b)| (w, b)).collect();
        dense_plain(&refs, z, false)
    }
}

/// Graph handles for one ELBO evaluation: decoder layers `z → x` (head then
/// shared) and encoder layers, each as `(W, b)`.
#[derive(Clone, Debug)]
pub struct GenerativeVars {
    pub decoder: Vec<(Var, Var)>,
    pub encoder: Vec<(Var, Var)>,
}

impl GenerativeVars {
    /// Decoder weights as graph nodes: the block means, or one
    /// reparameterised draw `μ + σ ε` per block. `blocks` is in
    /// [`GenerativeModel::decoder_blocks`] order (shared first, then head).
    pub fn decoder_from_blocks<R: Rng + ?Sized>(
        g: &mut Graph,
        blocks: &[GaussianVars],
        shared_layers: usize,
        policy: ThetaPolicy,
        rng: &mut R,
    ) -> Result<Vec<(Var, Var)>> {
        let mut weights = Vec::with_capacity(blocks.len());
        for b in blocks {
            weights.push(match policy {
                ThetaPolicy::Mean => b.mu,
                ThetaPolicy::Sample => {
                    let noise = Tensor::randn(g.shape(b.mu), rng);
                    sample_weights_var(g, *b, noise)?
                }
            });
        }
        let layers: Vec<(Var, Var)> = weights.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let (shared, head) = layers.split_at(shared_layers);
        Ok(head.iter().chain(shared).copied().collect())
    }
}

fn dense_graph(g: &mut Graph, layers: &[(Var, Var)], x: Var, activate_last: bool) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let xw = g.matmul(h, w)?;
        let a = g.add(xw, b)?;
        h = if i + 1 < layers.len() || activate_last {
            Activation::Relu.apply(g, a)
        } else {
            a
        };
    }
    Ok(h)
}

pub(crate) fn dense_plain(layers: &[(&Tensor, &Tensor)], x: &Tensor, activate_last: bool) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        let mut a = h.matmul(w)?;
        a.add_row(b)?;
        h = if i + 1 < layers.len() || activate_last {
            Activation::Relu.apply_plain(&a)
        } else {
            a
        };
    }
    Ok(h)
}

/// Per-row ELBO `E_q(z|x)[log p(x|z, θ)] − KL(q(z|x) || N(0, I))` with a
/// single reparameterised `z` per row and the Gaussian KL in closed form.
pub fn vae_elbo_rows<R: Rng + ?Sized>(g: &mut Graph, vars: &GenerativeVars, x: &Tensor, rng: &mut R) -> Result<Var> {
    let xv = g.constant(x.clone());
    let enc = dense_graph(g, &vars.encoder, xv, false)?;
    let l = g.shape(enc)[1] / 2;
    let mu = g.slice_cols(enc, 0, l)?;
    let lv = g.slice_cols(enc, l, l)?;
    let half_lv = g.scale(lv, 0.5);
    let sd = g.exp(half_lv);
    let eps = g.constant(Tensor::randn(&[x.rows(), l], rng));
    let noise = g.mul(sd, eps)?;
    let z = g.add(mu, noise)?;
    let logits = dense_graph(g, &vars.decoder, z, false)?;
    let ll = g.bernoulli_log_lik(logits, x)?;
    // KL = ½ Σ (μ² + e^{lv} − 1 − lv)
    let mu2 = g.square(mu);
    let var = g.exp(lv);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, lv)?;
    let c = g.add_scalar(b, -1.0);
    let rows = g.row_sums(c)?;
    let kl = g.scale(rows, 0.5);
    g.sub(ll, kl)
}

/// Sum over the batch of single-draw ELBO estimates for `task_id`.
pub fn vae_elbo_batch<R: Rng + ?Sized>(
    gen: &GenerativeModel,
    task_id: usize,
    x: &Tensor,
    policy: ThetaPolicy,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let blocks: Vec<GaussianVars> = gen
        .decoder_blocks(task_id)?
        .iter()
        .map(|b| b.to_graph(&mut g, false))
        .collect();
    let decoder = GenerativeVars::decoder_from_blocks(&mut g, &blocks, gen.shared.len(), policy, rng)?;
    let encoder = gen
        .encoder(task_id)?
        .params()
        .into_iter()
        .map(|p| g.constant(p))
        .collect::<Vec<_>>()
        .chunks_exact(2)
        .map(|c| (c[0], c[1]))
        .collect();
    let rows = vae_elbo_rows(&mut g, &GenerativeVars { decoder, encoder }, x, rng)?;
    Ok(g.value(rows).iter().sum())
}

/// Importance-sampled `log p(x)` per row with the task encoder as proposal:
/// `log (1/K) Σ_k p(x|z_k) p(z_k) / q(z_k|x)`, via log-sum-exp.
pub fn test_ll_importance<R: Rng + ?Sized>(
    gen: &GenerativeModel,
    task_id: usize,
    x: &Tensor,
    n_is: usize,
    policy: ThetaPolicy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_is == 0 {
        return Err(Error::invalid("importance sampling needs at least one sample"));
    }
    let layers = gen.decoder_point(task_id, policy, rng)?;
    let refs: Vec<(&Tensor, &Tensor)> = layers.iter().map(|(w, b)| (w, b)).collect();
    let (mu, lv) = gen.encoder(task_id)?.encode(x)?;
    let l = gen.spec.latent_dim;
    let mut out = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (m, v) = (mu.row(r), lv.row(r));
        let mut z = Tensor::randn(&[n_is, l], rng);
        let mut log_w = vec![0.0; n_is];
        for k in 0..n_is {
            let zk = &mut z.data_mut()[k * l..(k + 1) * l];
            let mut lq = 0.0;
            let mut lp = 0.0;
            for j in 0..l {
                let eps = zk[j];
                zk[j] = m[j] + (0.5 * v[j]).exp() * eps;
                lq += -0.5 * (eps * eps + v[j] + LN_2PI);
                lp += -0.5 * (zk[j] * zk[j] + LN_2PI);
            }
            log_w[k] = lp - lq;
        }
        let logits = dense_plain(&refs, &z, false)?;
        let xr = x.row(r);
        for (k, lw) in log_w.iter_mut().enumerate() {
            let row = logits.row(k);
            *lw += row.iter().zip(xr).map(|(&a, &t)| t * a - softplus(a)).sum::<f64>();
        }
        out.push(log_mean_exp(&log_w));
    }
    Ok(out)
}

pub(crate) fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (s / xs.len() as f64).ln()
}
