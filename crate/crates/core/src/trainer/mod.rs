//! Online variational learning: each task's posterior is fitted by
//! minimising `E_q[−log p(D_t | θ)] + KL(q || q_{t−1})` with Adam, and the
//! result becomes the prior for the next task.

mod coreset;

pub use coreset::{k_center_from, k_center_select, update_coreset, Coreset, CoresetEntry, CoresetPolicy};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    init_posterior_with_log_sigma, GaussianVars, MeanFieldGaussian, INIT_VARIANCE,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{
    pair_layers, sampled_logits, vae_elbo_rows, ArchitectureSpec, BayesLinearRegression, DiscriminativeModel,
    GenerativeModel, GenerativeVars, HeadMode, PointNet, ThetaPolicy,
};
use crate::rng::{self, label};
use crate::tensor::{adam_step, AdamState, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub mc_train_samples: usize,
    pub mc_pred_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Variance given to freshly initialised posterior blocks.
    #[serde(default = "default_init_variance")]
    pub init_variance: f64,
}

fn default_init_variance() -> f64 {
    INIT_VARIANCE
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: Some(256),
            learning_rate: 1e-3,
            mc_train_samples: 1,
            mc_pred_samples: 100,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            init_variance: INIT_VARIANCE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.init_variance > 0.0) {
            return Err(Error::invalid("init_variance must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.mc_train_samples == 0 || self.mc_pred_samples == 0 {
            return Err(Error::invalid("learning rate and sample counts must be positive"));
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::invalid("cosine final_fraction must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn rate(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let p = step as f64 / total.max(1) as f64;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                self.learning_rate * (final_fraction + (1.0 - final_fraction) * c)
            }
        }
    }
}

/// Epoch averages of the per-datum objective and its parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Negative loss per datum, so larger is better.
    pub objective: f64,
    pub data_term: f64,
    pub kl_term: f64,
    pub penalty_term: f64,
}

/// Per-batch loss pieces returned by a model-specific closure.
pub struct BatchTerms {
    /// Batch mean of the negative log-likelihood (or negative ELBO).
    pub data: Var,
    /// Total regulariser, divided by the data-set size by the optimiser.
    pub penalty: Option<Var>,
}

/// Sees every optimiser step on the point parameters.
pub trait StepObserver {
    /// `data_grads` are gradients of the data term only.
    fn observe(&mut self, data_grads: &[Tensor], before: &[Tensor], after: &[Tensor]);
}

/// Trainable state for [`optimize`]: Gaussian blocks with their KL
/// anchors, and point tensors.
pub struct Trainable<'a> {
    pub gaussian: &'a mut [MeanFieldGaussian],
    pub anchors: &'a [MeanFieldGaussian],
    pub points: &'a mut [Tensor],
}

/// Adam on `data + (KL(q || anchors) + penalty) / n` over shuffled
/// mini-batches, with fresh moments.
pub fn optimize<F>(
    state: Trainable<'_>,
    n: usize,
    config: &TrainConfig,
    rng: &mut rng::Rng,
    mut observer: Option<&mut dyn StepObserver>,
    mut batch_fn: F,
) -> Result<Vec<TraceRow>>
where
    F: FnMut(&mut Graph, &[GaussianVars], &[Var], &[usize], &mut rng::Rng) -> Result<BatchTerms>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::Empty("data set"));
    }
    if state.gaussian.len() != state.anchors.len() {
        return Err(Error::shape("optimize", &[state.gaussian.len()], &[state.anchors.len()]));
    }
    let mut params: Vec<Tensor> = state
        .gaussian
        .iter()
        .flat_map(|b| [b.mu().clone(), b.log_sigma().clone()])
        .chain(state.points.iter().cloned())
        .collect();
    let n_gauss = 2 * state.gaussian.len();
    let mut adam = AdamState::new(config.learning_rate, &params);
    let batch = config.batch_size.unwrap_or(n).min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = config.epochs * batches_per_epoch;
    let inv_n = 1.0 / n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        let (mut obj, mut data_acc, mut kl_acc, mut pen_acc) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(batch) {
            let mut g = Graph::new();
            let vars: Vec<GaussianVars> = (0..state.gaussian.len())
                .map(|i| GaussianVars {
                    mu: g.param(params[2 * i].clone()),
                    log_sigma: g.param(params[2 * i + 1].clone()),
                })
                .collect();
            let point_vars: Vec<Var> = params[n_gauss..].iter().map(|p| g.param(p.clone())).collect();
            let terms = batch_fn(&mut g, &vars, &point_vars, idx, rng)?;
            let mut loss = terms.data;
            let mut kl_value = 0.0;
            for (v, a) in vars.iter().zip(state.anchors) {
                let kl = g.kl_diag_gaussian(v.mu, v.log_sigma, a.mu().data(), a.log_sigma().data())?;
                kl_value += g.item(kl);
                let scaled = g.scale(kl, inv_n);
                loss = g.add(loss, scaled)?;
            }
            let mut pen_value = 0.0;
            if let Some(p) = terms.penalty {
                pen_value = g.item(p);
                let scaled = g.scale(p, inv_n);
                loss = g.add(loss, scaled)?;
            }
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, value });
            }
            let grads = g.backward(loss)?;
            let grad_list: Vec<Tensor> = vars
                .iter()
                .flat_map(|v| [v.mu, v.log_sigma])
                .chain(point_vars.iter().copied())
                .map(|v| grads.get(&g, v).expect("trainable leaf"))
                .collect();
            let observed = match observer.as_deref_mut() {
                Some(o) => {
                    let dg = g.backward(terms.data)?;
                    let data_grads: Vec<Tensor> = point_vars
                        .iter()
                        .map(|&v| dg.get(&g, v).expect("trainable leaf"))
                        .collect();
                    Some((o, data_grads, params[n_gauss..].to_vec()))
                }
                None => None,
            };
            adam.learning_rate = config.rate(step, total_steps);
            adam_step(&mut params, &grad_list, &mut adam)?;
            if let Some((o, data_grads, before)) = observed {
                o.observe(&data_grads, &before, &params[n_gauss..]);
            }
            let w = idx.len() as f64 * inv_n;
            obj -= value * w;
            data_acc += g.item(terms.data) * w;
            kl_acc += kl_value * w;
            pen_acc += pen_value * w;
            step += 1;
        }
        trace.push(TraceRow {
            epoch,
            objective: obj,
            data_term: data_acc,
            kl_term: kl_acc,
            penalty_term: pen_acc,
        });
    }

    let mut it = params.into_iter();
    for b in state.gaussian.iter_mut() {
        let mu = it.next().expect("counted");
        let ls = it.next().expect("counted");
        *b = MeanFieldGaussian::new(mu, ls)?;
    }
    for p in state.points.iter_mut() {
        *p = it.next().expect("counted");
    }
    Ok(trace)
}

/// How a task's posterior is initialised before optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Start from the previous posterior; blocks never trained get a random
    /// mean with variance 1e-6.
    Previous,
    /// Means from a maximum-likelihood fit on the task, variance 1e-6.
    MaximumLikelihood,
}

/// Mean `N(0, sd²)` weights and zero biases with the given variance.
fn random_block<R: Rng + ?Sized>(shape: &[usize], variance: f64, rng: &mut R) -> Result<MeanFieldGaussian> {
    let mean = if shape.len() == 2 {
        Tensor::randn(shape, rng).map(|v| v * crate::models::INIT_WEIGHT_SD)
    } else {
        Tensor::zeros(shape)
    };
    init_posterior_with_log_sigma(&mean, 0.5 * variance.ln())
}

fn is_prior(block: &MeanFieldGaussian, reference: &MeanFieldGaussian) -> bool {
    block == reference
}

/// Maximum-likelihood point network for a single task.
pub fn fit_mle(arch: &ArchitectureSpec, data: &LabeledDataset, config: &TrainConfig, path: &[u64]) -> Result<PointNet> {
    let mut single = arch.clone();
    single.mode = HeadMode::SingleHead;
    single.head_count = 1;
    let mut r = rng::stream(config.seed, path);
    let mut net = PointNet::new_random(&single, &mut r)?;
    let mut points = net.params();
    let trainable = Trainable {
        gaussian: &mut [],
        anchors: &[],
        points: &mut points,
    };
    let proto = net.clone();
    optimize(trainable, data.len(), config, &mut r, None, |g, _, pv, idx, _| {
        let x = g.constant(data.inputs.select_rows(idx));
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let logits = proto.forward_graph(g, pv, 0, x)?;
        Ok(BatchTerms {
            data: g.softmax_cross_entropy(logits, &labels)?,
            penalty: None,
        })
    })?;
    net.set_params(points)?;
    Ok(net)
}

fn initial_blocks(
    q_prev: &DiscriminativeModel,
    data: &LabeledDataset,
    task_id: usize,
    init: InitPolicy,
    config: &TrainConfig,
) -> Result<Vec<MeanFieldGaussian>> {
    let prev = q_prev.active_blocks(task_id)?;
    match init {
        InitPolicy::MaximumLikelihood => {
            let net = fit_mle(q_prev.arch(), data, config, &[label::MLE, task_id as u64])?;
            let ls = 0.5 * config.init_variance.ln();
            net.params().iter().map(|p| init_posterior_with_log_sigma(p, ls)).collect()
        }
        InitPolicy::Previous => {
            let mut r = rng::stream(config.seed, &[label::INIT, task_id as u64]);
            let prior = *q_prev.prior();
            prev.into_iter()
                .map(|b| {
                    if is_prior(&b, &MeanFieldGaussian::from_prior(b.shape(), &prior)) {
                        random_block(b.shape(), config.init_variance, &mut r)
                    } else {
                        Ok(b)
                    }
                })
                .collect()
        }
    }
}

/// Fits the blocks serving `task_id` on `data`, anchored at `anchor`'s
/// blocks, drawing randomness from the stream at `path`.
fn fit_discriminative(
    start: &DiscriminativeModel,
    anchor: &DiscriminativeModel,
    data: &LabeledDataset,
    task_id: usize,
    init: InitPolicy,
    config: &TrainConfig,
    path: &[u64],
) -> Result<(DiscriminativeModel, Vec<TraceRow>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if config.epochs == 0 {
        return Ok((start.clone(), Vec::new()));
    }
    let mut blocks = initial_blocks(start, data, task_id, init, config)?;
    let anchors = anchor.active_blocks(task_id)?;
    let activation = start.arch().activation;
    let samples = config.mc_train_samples;
    let mut r = rng::stream(config.seed, path);
    let trace = optimize(
        Trainable {
            gaussian: &mut blocks,
            anchors: &anchors,
            points: &mut [],
        },
        data.len(),
        config,
        &mut r,
        None,
        |g, vars, _, idx, r| {
            let x = g.constant(data.inputs.select_rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let layers = pair_layers(vars);
            let mut total: Option<Var> = None;
            for _ in 0..samples {
                let logits = sampled_logits(g, &layers, activation, x, r)?;
                let ce = g.softmax_cross_entropy(logits, &labels)?;
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
            }
            let data_term = g.scale(total.expect("at least one sample"), 1.0 / samples as f64);
            Ok(BatchTerms {
                data: data_term,
                penalty: None,
            })
        },
    )?;
    let mut out = start.clone();
    out.set_active_blocks(task_id, blocks)?;
    Ok((out, trace))
}

/// One online VCL step on task `task_id`: only the trunk and that task's
/// head change.
pub fn vcl_task_step(
    q_prev: &DiscriminativeModel,
    data: &LabeledDataset,
    task_id: usize,
    init: InitPolicy,
    config: &TrainConfig,
) -> Result<(DiscriminativeModel, Vec<TraceRow>)> {
    fit_discriminative(q_prev, q_prev, data, task_id, init, config, &[label::TRAIN, task_id as u64])
}

/// Posterior used for prediction after the coreset step.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionPosterior {
    /// No coreset data: the propagated posterior.
    Propagated,
    Shared(DiscriminativeModel),
    /// One model per task, each refined on that task's coreset slice.
    PerTask(Vec<(usize, DiscriminativeModel)>),
}

/// `q̃_t` (carried forward) and `q_t` (prediction only).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorPair {
    pub propagated: DiscriminativeModel,
    pub prediction: PredictionPosterior,
}

impl PosteriorPair {
    pub fn predictor(&self, task_id: usize) -> &DiscriminativeModel {
        match &self.prediction {
            PredictionPosterior::Propagated => &self.propagated,
            PredictionPosterior::Shared(m) => m,
            PredictionPosterior::PerTask(v) => v
                .iter()
                .find(|(t, _)| *t == task_id)
                .map_or(&self.propagated, |(_, m)| m),
        }
    }
}

pub struct CoresetStep {
    pub pair: PosteriorPair,
    pub coreset: Coreset,
    pub trace: Vec<TraceRow>,
    pub coreset_traces: Vec<(usize, Vec<TraceRow>)>,
}

/// The points `(D_t ∪ C_{t−1}) \ C_t` used to propagate, as a data set for
/// task `data.task_id`. Entries of other tasks can only join a single-head
/// network.
pub fn propagation_set(
    data: &LabeledDataset,
    prev: &Coreset,
    next: &Coreset,
    multi_head: bool,
) -> Result<LabeledDataset> {
    let keep: BTreeSet<(usize, usize)> = next.keys();
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| !keep.contains(&(data.task_id, i)))
        .collect();
    let mut out = data.subset(&rows);
    let carried: Vec<_> = prev.entries.iter().filter(|e| !keep.contains(&e.key())).collect();
    if carried.is_empty() {
        return Ok(out);
    }
    if multi_head && carried.iter().any(|e| e.task_id != data.task_id) {
        return Err(Error::invalid("evicted coreset points of other tasks need their own heads"));
    }
    let extra: Vec<f64> = carried.iter().flat_map(|e| e.input.iter().copied()).collect();
    let extra = Tensor::matrix(carried.len(), data.dim(), extra)?;
    out.inputs = Tensor::vstack(&[&out.inputs, &extra])?;
    out.labels.extend(carried.iter().map(|e| e.label));
    Ok(out)
}

/// Coreset VCL for one task: select `C_t`, propagate `q̃_t` on the
/// non-coreset points, then refine `q̃_t` on `C_t` for prediction.
#[allow(clippy::too_many_arguments)]
pub fn coreset_vcl_task(
    q_prev: &DiscriminativeModel,
    data: &LabeledDataset,
    task_id: usize,
    c_prev: &Coreset,
    policy: CoresetPolicy,
    k: usize,
    init: InitPolicy,
    config: &TrainConfig,
) -> Result<CoresetStep> {
    let mut r = rng::stream(config.seed, &[label::CORESET, task_id as u64]);
    let (coreset, _) = update_coreset(c_prev, data, policy, k, &mut r)?;
    let multi = q_prev.arch().mode == HeadMode::MultiHead;
    let prop = propagation_set(data, c_prev, &coreset, multi)?;
    let (propagated, trace) = fit_discriminative(
        q_prev,
        q_prev,
        &prop,
        task_id,
        init,
        config,
        &[label::TRAIN, task_id as u64],
    )?;
    let (prediction, coreset_traces) = refine_on_coreset(&propagated, &coreset, InitPolicy::Previous, config, task_id)?;
    Ok(CoresetStep {
        pair: PosteriorPair { propagated, prediction },
        coreset,
        trace,
        coreset_traces,
    })
}

/// `q_t = proj(q̃_t · p(C_t))`, per task for multi-head networks. The
/// optimisation runs full-batch when the coreset fits in one batch.
pub fn refine_on_coreset(
    start: &DiscriminativeModel,
    coreset: &Coreset,
    init: InitPolicy,
    config: &TrainConfig,
    step: usize,
) -> Result<(PredictionPosterior, Vec<(usize, Vec<TraceRow>)>)> {
    if coreset.is_empty() {
        return Ok((PredictionPosterior::Propagated, Vec::new()));
    }
    let classes = start.arch().head_output_dim;
    let mut cfg = config.clone();
    if cfg.batch_size.is_some_and(|b| b >= coreset.len()) {
        cfg.batch_size = None;
    }
    if start.arch().mode == HeadMode::SingleHead {
        let all = coreset.to_dataset(0, classes, |_| true)?;
        let path = [label::CORESET_TRAIN, step as u64];
        let (m, tr) = fit_discriminative(start, start, &all, 0, init, &cfg, &path)?;
        return Ok((PredictionPosterior::Shared(m), vec![(0, tr)]));
    }
    let mut models = Vec::new();
    let mut traces = Vec::new();
    for t in coreset.task_ids() {
        let slice = coreset.task_dataset(t, classes)?;
        let path = [label::CORESET_TRAIN, step as u64, t as u64];
        let (m, tr) = fit_discriminative(start, start, &slice, t, init, &cfg, &path)?;
        models.push((t, m));
        traces.push((t, tr));
    }
    Ok((PredictionPosterior::PerTask(models), traces))
}

/// Online VI for Bayesian linear regression on one batch of observations.
pub fn vcl_linreg_step(
    q_prev: &BayesLinearRegression,
    x: &Tensor,
    y: &[f64],
    config: &TrainConfig,
    step: usize,
) -> Result<(BayesLinearRegression, Vec<TraceRow>)> {
    if y.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if config.epochs == 0 {
        return Ok((q_prev.clone(), Vec::new()));
    }
    let anchors = [q_prev.posterior.clone()];
    let mut blocks = [q_prev.posterior.clone()];
    let mut r = rng::stream(config.seed, &[label::TRAIN, step as u64]);
    let trace = optimize(
        Trainable {
            gaussian: &mut blocks,
            anchors: &anchors,
            points: &mut [],
        },
        y.len(),
        config,
        &mut r,
        None,
        |g, vars, _, idx, _| {
            let xb = x.select_rows(idx);
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            Ok(BatchTerms {
                data: q_prev.expected_nll(g, vars[0], &xb, &yb)?,
                penalty: None,
            })
        },
    )?;
    let [posterior] = blocks;
    Ok((
        BayesLinearRegression {
            posterior,
            noise_sd: q_prev.noise_sd,
        },
        trace,
    ))
}

/// Standard deviation used when a decoder posterior is carried into a new
/// task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SigmaInit {
    /// Keep the previous posterior's standard deviations.
    Previous,
    /// Reset every variance to this value.
    Variance(f64),
    /// Reset every log standard deviation to this value.
    LogSigma(f64),
}

impl Default for SigmaInit {
    fn default() -> Self {
        SigmaInit::Variance(INIT_VARIANCE)
    }
}

/// Decoder blocks for the start of a VAE task: trained blocks keep their
/// means, blocks still at the prior get random means; variances follow
/// `sigma`, except fresh blocks which start at `config.init_variance`.
pub fn vae_initial_blocks(
    gen: &GenerativeModel,
    task_id: usize,
    sigma: SigmaInit,
    config: &TrainConfig,
) -> Result<Vec<MeanFieldGaussian>> {
    let mut r = rng::stream(config.seed, &[label::INIT, task_id as u64]);
    let variance = config.init_variance;
    let prior = *gen.prior();
    gen.decoder_blocks(task_id)?
        .into_iter()
        .map(|b| {
            if is_prior(&b, &MeanFieldGaussian::from_prior(b.shape(), &prior)) {
                return random_block(b.shape(), variance, &mut r);
            }
            match sigma {
                SigmaInit::Previous => Ok(b),
                SigmaInit::Variance(v) => init_posterior_with_log_sigma(b.mu(), 0.5 * v.ln()),
                SigmaInit::LogSigma(l) => init_posterior_with_log_sigma(b.mu(), l),
            }
        })
        .collect()
}

/// One continual-VAE step: fits the shared and task-head decoder
/// posteriors jointly with the task's encoder, anchored at the previous
/// decoder posterior.
pub fn vcl_vae_task_step(
    gen_prev: &GenerativeModel,
    data: &LabeledDataset,
    task_id: usize,
    sigma: SigmaInit,
    config: &TrainConfig,
) -> Result<(GenerativeModel, Vec<TraceRow>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut gen = gen_prev.clone();
    if gen.encoder(task_id).is_err() {
        gen.add_task(task_id, &mut rng::stream(config.seed, &[label::INIT, task_id as u64, 1]))?;
    }
    if config.epochs == 0 {
        return Ok((gen, Vec::new()));
    }
    let anchors = gen.decoder_blocks(task_id)?;
    let mut blocks = vae_initial_blocks(&gen, task_id, sigma, config)?;
    let mut points = gen.encoder(task_id)?.params();
    let shared_layers = gen.shared().len();
    let samples = config.mc_train_samples;
    let mut r = rng::stream(config.seed, &[label::TRAIN, task_id as u64]);
    let trace = optimize(
        Trainable {
            gaussian: &mut blocks,
            anchors: &anchors,
            points: &mut points,
        },
        data.len(),
        config,
        &mut r,
        None,
        |g, vars, pv, idx, r| {
            let x = data.inputs.select_rows(idx);
            let encoder: Vec<(Var, Var)> = pv.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let mut total: Option<Var> = None;
            for _ in 0..samples {
                let decoder = GenerativeVars::decoder_from_blocks(g, vars, shared_layers, ThetaPolicy::Sample, r)?;
                let rows = vae_elbo_rows(
                    g,
                    &GenerativeVars {
                        decoder,
                        encoder: encoder.clone(),
                    },
                    &x,
                    r,
                )?;
                let m = g.mean(rows);
                total = Some(match total {
                    Some(t) => g.add(t, m)?,
                    None => m,
                });
            }
            let data_term = g.scale(total.expect("at least one sample"), -1.0 / samples as f64);
            Ok(BatchTerms {
                data: data_term,
                penalty: None,
            })
        },
    )?;
    gen.set_decoder_blocks(task_id, blocks)?;
    gen.encoder_mut(task_id)?.set_params(points)?;
    Ok((gen, trace))
}
