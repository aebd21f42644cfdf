//! Regularised maximum-likelihood learners: MLE, MAP with an identity
//! covariance, diagonal Laplace propagation, EWC and SI, for both point
//! classifiers and point-estimated VAE decoders. Also coreset-only training
//! and naive VAE fine-tuning.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bayes::{init_posterior_with_log_sigma, GaussianVars, PriorSpec};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{build_discriminative, vae_elbo_rows, ArchitectureSpec, GenerativeModel, GenerativeVars, PointNet, ThetaPolicy};
use crate::rng::{self, label};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{
    optimize, refine_on_coreset, vae_initial_blocks, BatchTerms, Coreset, InitPolicy, PredictionPosterior, SigmaInit,
    StepObserver, TraceRow, TrainConfig, Trainable,
};

/// SI damping constant.
pub const SI_XI: f64 = 0.1;
/// EWC Fisher sample counts for the permuted and split benchmarks.
pub const EWC_SAMPLES_PERMUTED: usize = 600;
pub const EWC_SAMPLES_SPLIT: usize = 200;

/// λ grids used for tuning.
pub const EWC_LAMBDA_GRID: [f64; 5] = [1.0, 10.0, 1e2, 1e3, 1e4];
pub const SI_LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 0.5, 1.0, 2.0];
pub const LP_LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const DGM_LAMBDA_GRID: [f64; 3] = [1.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegularizedMethod {
    /// No penalty.
    Mle,
    /// `½ λ ||θ − θ_{t−1}||²`.
    Map { lambda: f64 },
    /// `½ λ (θ − θ_{t−1})ᵀ Σ_{t−1}⁻¹ (θ − θ_{t−1})` with the Laplace recursion.
    Lp { lambda: f64 },
    /// One Fisher-weighted term per past task; `with_prior` adds the prior term.
    Ewc { lambda: f64, n_samples: usize, with_prior: bool },
    /// `λ Σ Ω (θ − θ_{t−1})²` with path-integral importances.
    Si { lambda: f64, xi: f64 },
}

/// Quadratic anchors `½ Σ_j λ_j (θ − a_j)ᵀ P_j (θ − a_j)` plus the SI
/// running sums. Every tensor list mirrors the regularised parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerState {
    pub anchors: Vec<Vec<Tensor>>,
    pub precisions: Vec<Vec<Tensor>>,
    pub lambdas: Vec<f64>,
    pub si_omega: Vec<Tensor>,
    pub si_importance: Vec<Tensor>,
}

fn zeros_like(ts: &[Tensor]) -> Vec<Tensor> {
    ts.iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn check_aligned(op: &'static str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
    }
    Ok(())
}

fn check_precision(p: &[Tensor]) -> Result<()> {
    if p.iter().flat_map(|t| t.data()).any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain {
            op: "precision",
            detail: "entries must be non-negative".into(),
        });
    }
    Ok(())
}

/// `½ λ (θ − a)ᵀ diag(P) (θ − a)`.
pub fn quadratic_penalty(theta: &[Tensor], anchor: &[Tensor], precision: &[Tensor], lambda: f64) -> Result<f64> {
    check_aligned("quadratic_penalty", theta, anchor)?;
    check_aligned("quadratic_penalty", theta, precision)?;
    check_precision(precision)?;
    let mut s = 0.0;
    for ((t, a), p) in theta.iter().zip(anchor).zip(precision) {
        for ((&t, &a), &p) in t.data().iter().zip(a.data()).zip(p.data()) {
            s += p * (t - a) * (t - a);
        }
    }
    Ok(0.5 * lambda * s)
}

impl RegularizerState {
    pub fn new(template: &[Tensor]) -> Self {
        RegularizerState {
            anchors: Vec::new(),
            precisions: Vec::new(),
            lambdas: Vec::new(),
            si_omega: zeros_like(template),
            si_importance: zeros_like(template),
        }
    }

    pub fn push(&mut self, anchor: Vec<Tensor>, precision: Vec<Tensor>, lambda: f64) -> Result<()> {
        check_aligned("RegularizerState::push", &anchor, &precision)?;
        check_aligned("RegularizerState::push", &anchor, &self.si_omega)?;
        check_precision(&precision)?;
        self.anchors.push(anchor);
        self.precisions.push(precision);
        self.lambdas.push(lambda);
        Ok(())
    }

    /// Keeps only the given anchor.
    pub fn replace(&mut self, anchor: Vec<Tensor>, precision: Vec<Tensor>, lambda: f64) -> Result<()> {
        self.anchors.clear();
        self.precisions.clear();
        self.lambdas.clear();
        self.push(anchor, precision, lambda)
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Value of the penalty at `theta`.
    pub fn penalty(&self, theta: &[Tensor]) -> Result<f64> {
        let mut s = 0.0;
        for ((a, p), &l) in self.anchors.iter().zip(&self.precisions).zip(&self.lambdas) {
            s += quadratic_penalty(theta, a, p, l)?;
        }
        Ok(s)
    }

    /// The penalty as a graph node over `vars[k]`, which stand for the
    /// parameters at `indices[k]`. `None` when there is nothing to penalise.
    pub fn penalty_graph(&self, g: &mut Graph, vars: &[Var], indices: &[usize]) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for ((a, p), &l) in self.anchors.iter().zip(&self.precisions).zip(&self.lambdas) {
            for (&v, &i) in vars.iter().zip(indices) {
                let w: Vec<f64> = p[i].data().iter().map(|&x| 0.5 * l * x).collect();
                let term = g.weighted_sq_dist(v, a[i].data(), &w)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
        }
        Ok(total)
    }
}

/// `Σ_n log p(y_n | θ, x_n) − ½ λ (θ − a)ᵀ P (θ − a)` for a point classifier.
pub fn map_objective(
    net: &PointNet,
    task_id: usize,
    data: &LabeledDataset,
    anchor: &[Tensor],
    precision: &[Tensor],
    lambda: f64,
) -> Result<f64> {
    let penalty = quadratic_penalty(&net.params(), anchor, precision, lambda)?;
    if data.is_empty() {
        return Ok(-penalty);
    }
    let p = net.probs(task_id, &data.inputs)?;
    let ll: f64 = data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| p.row(i)[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(ll - penalty)
}

/// `Σ_n g_n²` elementwise, where `grad(n)` returns the per-item gradient.
pub fn squared_gradient_sum<F>(template: &[Tensor], items: &[usize], mut grad: F) -> Result<Vec<Tensor>>
where
    F: FnMut(usize) -> Result<Vec<Tensor>>,
{
    let mut acc = zeros_like(template);
    for &n in items {
        let g = grad(n)?;
        check_aligned("squared_gradient_sum", template, &g)?;
        for (a, g) in acc.iter_mut().zip(&g) {
            for (a, &g) in a.data_mut().iter_mut().zip(g.data()) {
                *a += g * g;
            }
        }
    }
    Ok(acc)
}

/// Per-example gradient of `log p(y_n | θ, x_n)` over all of `net`'s
/// parameters; inactive heads get zeros.
fn classifier_log_lik_grad(net: &PointNet, task_id: usize, data: &LabeledDataset, n: usize) -> Result<Vec<Tensor>> {
    let params = net.params();
    let active = net.active_params(task_id)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| if active.contains(&i) { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let x = g.constant(data.inputs.select_rows(&[n]));
    let logits = net.forward_graph(&mut g, &vars, task_id, x)?;
    let nll = g.softmax_cross_entropy(logits, &[data.labels[n]])?;
    let grads = g.backward(nll)?;
    Ok(vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| grads.get(&g, v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Empirical Fisher diagonal summed over the listed rows.
pub fn classifier_fisher(net: &PointNet, task_id: usize, data: &LabeledDataset, rows: &[usize]) -> Result<Vec<Tensor>> {
    squared_gradient_sum(&net.params(), rows, |n| classifier_log_lik_grad(net, task_id, data, n))
}

/// `Σ_t⁻¹ = Φ_t + Σ_{t−1}⁻¹` with `Φ_t` summed over the whole data set.
pub fn laplace_propagation_update(
    prev_precision: &[Tensor],
    net: &PointNet,
    task_id: usize,
    data: &LabeledDataset,
) -> Result<Vec<Tensor>> {
    check_precision(prev_precision)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let phi = classifier_fisher(net, task_id, data, &rows)?;
    add_precisions(prev_precision, &phi)
}

pub fn add_precisions(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Tensor>> {
    check_aligned("add_precisions", a, b)?;
    a.iter().zip(b).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect()
}

/// Empirical Fisher on `n_samples` rows drawn without replacement (all
/// rows when the data set is smaller).
pub fn ewc_fisher_diag(
    net: &PointNet,
    task_id: usize,
    data: &LabeledDataset,
    n_samples: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<Tensor>> {
    let rows = sample_rows(data.len(), n_samples, rng);
    classifier_fisher(net, task_id, data, &rows)
}

fn sample_rows(len: usize, n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut rows = index::sample(rng, len, n.min(len)).into_vec();
    rows.sort_unstable();
    rows
}

/// `½ Σ_j λ_j (θ − θ_j)ᵀ Φ_j (θ − θ_j)`.
pub fn ewc_penalty(theta: &[Tensor], state: &RegularizerState) -> Result<f64> {
    state.penalty(theta)
}

/// `ω + (−g) ⊙ Δθ`.
pub fn si_accumulate(omega: &[Tensor], grads: &[Tensor], delta: &[Tensor]) -> Result<Vec<Tensor>> {
    check_aligned("si_accumulate", omega, grads)?;
    check_aligned("si_accumulate", omega, delta)?;
    Ok(omega
        .iter()
        .zip(grads)
        .zip(delta)
        .map(|((w, g), d)| {
            let mut out = w.clone();
            for ((o, &g), &d) in out.data_mut().iter_mut().zip(g.data()).zip(d.data()) {
                *o -= g * d;
            }
            out
        })
        .collect())
}

/// `Ω + ω / ((θ_end − θ_start)² + ξ)`.
pub fn si_consolidate(
    omega: &[Tensor],
    start: &[Tensor],
    end: &[Tensor],
    importance: &[Tensor],
    xi: f64,
) -> Result<Vec<Tensor>> {
    if !(xi > 0.0) {
        return Err(Error::invalid("SI damping must be positive"));
    }
    check_aligned("si_consolidate", omega, start)?;
    check_aligned("si_consolidate", omega, end)?;
    check_aligned("si_consolidate", omega, importance)?;
    Ok((0..omega.len())
        .map(|k| {
            let mut out = importance[k].clone();
            let (w, s, e) = (omega[k].data(), start[k].data(), end[k].data());
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let d = e[i] - s[i];
                *o += w[i] / (d * d + xi);
            }
            out
        })
        .collect())
}

/// Accumulates `ω` for the parameters at `indices`. Gradients are of the
/// summed data term, hence the factor `n` on the per-datum gradient.
struct SiObserver<'a> {
    omega: &'a mut [Tensor],
    indices: &'a [usize],
    n: f64,
}

impl StepObserver for SiObserver<'_> {
    fn observe(&mut self, data_grads: &[Tensor], before: &[Tensor], after: &[Tensor]) {
        for (k, &i) in self.indices.iter().enumerate() {
            let w = self.omega[i].data_mut();
            let (g, b, a) = (data_grads[k].data(), before[k].data(), after[k].data());
            for j in 0..w.len() {
                w[j] -= self.n * g[j] * (a[j] - b[j]);
            }
        }
    }
}

/// Learner state carried across tasks by a regularised method.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizedLearner {
    pub method: RegularizedMethod,
    pub state: RegularizerState,
    /// Accumulated `Σ_t⁻¹` for Laplace propagation.
    pub lp_precision: Vec<Tensor>,
    pub tasks_seen: usize,
}

impl RegularizedLearner {
    /// Starts from the prior: MAP and LP anchor at the prior mean with its
    /// precision, as does EWC when `with_prior` is set.
    pub fn new(method: RegularizedMethod, template: &[Tensor], prior: &PriorSpec) -> Result<Self> {
        if let RegularizedMethod::Si { xi, .. } = method {
            if !(xi > 0.0) {
                return Err(Error::invalid("SI damping must be positive"));
            }
        }
        let mean: Vec<Tensor> = template.iter().map(|t| Tensor::full(t.shape(), prior.mean)).collect();
        let prec: Vec<Tensor> = template.iter().map(|t| Tensor::full(t.shape(), prior.precision())).collect();
        let ones: Vec<Tensor> = template.iter().map(|t| Tensor::full(t.shape(), 1.0)).collect();
        let mut state = RegularizerState::new(template);
        match method {
            RegularizedMethod::Map { lambda } => state.push(mean, ones, lambda)?,
            RegularizedMethod::Lp { lambda } => state.push(mean, prec.clone(), lambda)?,
            RegularizedMethod::Ewc { with_prior: true, .. } => state.push(mean, prec.clone(), 1.0)?,
            _ => {}
        }
        Ok(RegularizedLearner {
            method,
            state,
            lp_precision: prec,
            tasks_seen: 0,
        })
    }

    fn is_si(&self) -> bool {
        matches!(self.method, RegularizedMethod::Si { .. })
    }

    /// Updates the penalty after training on a task. `fisher` computes the
    /// Fisher diagonal over the given row indices of the task's data.
    fn consolidate<F>(&mut self, start: &[Tensor], end: &[Tensor], n: usize, rng: &mut rng::Rng, mut fisher: F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Vec<Tensor>>,
    {
        match self.method {
            RegularizedMethod::Mle => {}
            RegularizedMethod::Map { lambda } => {
                let ones = self.state.precisions[0].clone();
                self.state.replace(end.to_vec(), ones, lambda)?;
            }
            RegularizedMethod::Lp { lambda } => {
                let rows: Vec<usize> = (0..n).collect();
                self.lp_precision = add_precisions(&self.lp_precision, &fisher(&rows)?)?;
                self.state.replace(end.to_vec(), self.lp_precision.clone(), lambda)?;
            }
            RegularizedMethod::Ewc { lambda, n_samples, .. } => {
                let rows = sample_rows(n, n_samples, rng);
                let phi = fisher(&rows)?;
                self.state.push(end.to_vec(), phi, lambda)?;
            }
            RegularizedMethod::Si { lambda, xi } => {
                let omega = std::mem::replace(&mut self.state.si_omega, zeros_like(end));
                self.state.si_importance = si_consolidate(&omega, start, end, &self.state.si_importance, xi)?;
                let doubled = self.state.si_importance.iter().map(|t| t.map(|v| 2.0 * v)).collect();
                self.state.replace(end.to_vec(), doubled, lambda)?;
            }
        }
        self.tasks_seen += 1;
        Ok(())
    }
}

/// Trains the parameters of `net` serving `task_id` on
/// `data term + penalty / N`.
pub fn fit_point_net(
    net: &PointNet,
    data: &LabeledDataset,
    task_id: usize,
    penalty: Option<&RegularizerState>,
    omega: Option<&mut [Tensor]>,
    config: &TrainConfig,
    path: &[u64],
) -> Result<(PointNet, Vec<TraceRow>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let all = net.params();
    let active = net.active_params(task_id)?;
    let mut points: Vec<Tensor> = active.iter().map(|&i| all[i].clone()).collect();
    if config.epochs == 0 {
        return Ok((net.clone(), Vec::new()));
    }
    let mut r = rng::stream(config.seed, path);
    let mut observer = omega.map(|omega| SiObserver {
        omega,
        indices: &active,
        n: data.len() as f64,
    });
    let trace = optimize(
        Trainable {
            gaussian: &mut [],
            anchors: &[],
            points: &mut points,
        },
        data.len(),
        config,
        &mut r,
        observer.as_mut().map(|o| o as &mut dyn StepObserver),
        |g, _, pv, idx, _| {
            let mut vars = Vec::with_capacity(all.len());
            let mut k = 0;
            for (i, p) in all.iter().enumerate() {
                if active.get(k) == Some(&i) {
                    vars.push(pv[k]);
                    k += 1;
                } else {
                    vars.push(g.constant(p.clone()));
                }
            }
            let x = g.constant(data.inputs.select_rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let logits = net.forward_graph(g, &vars, task_id, x)?;
            Ok(BatchTerms {
                data: g.softmax_cross_entropy(logits, &labels)?,
                penalty: match penalty {
                    Some(s) => s.penalty_graph(g, pv, &active)?,
                    None => None,
                },
            })
        },
    )?;
    let mut params = all;
    for (&i, p) in active.iter().zip(points) {
        params[i] = p;
    }
    let mut out = net.clone();
    out.set_params(params)?;
    Ok((out, trace))
}

/// One task of a regularised classifier learner.
pub fn regularized_task_step(
    net: &PointNet,
    learner: &mut RegularizedLearner,
    data: &LabeledDataset,
    task_id: usize,
    config: &TrainConfig,
) -> Result<(PointNet, Vec<TraceRow>)> {
    let penalty = (!learner.state.is_empty()).then(|| learner.state.clone());
    let omega = learner.is_si().then_some(learner.state.si_omega.as_mut_slice());
    let (out, trace) = fit_point_net(net, data, task_id, penalty.as_ref(), omega, config, &[label::TRAIN, task_id as u64])?;
    let mut r = rng::stream(config.seed, &[label::FISHER, task_id as u64]);
    learner.consolidate(&net.params(), &out.params(), data.len(), &mut r, |rows| {
        classifier_fisher(&out, task_id, data, rows)
    })?;
    Ok((out, trace))
}

/// Trains a fresh variational model on the coreset alone, full-batch,
/// per task for multi-head networks.
pub fn coreset_only_train(
    coreset: &Coreset,
    arch: &ArchitectureSpec,
    prior: PriorSpec,
    config: &TrainConfig,
    step: usize,
) -> Result<PredictionPosterior> {
    if coreset.is_empty() {
        return Err(Error::Empty("coreset"));
    }
    let start = build_discriminative(arch, prior)?;
    let cfg = TrainConfig {
        batch_size: None,
        ..config.clone()
    };
    let (pred, _) = refine_on_coreset(&start, coreset, InitPolicy::MaximumLikelihood, &cfg, step)?;
    Ok(pred)
}

/// Per-example gradient of the ELBO with respect to the shared decoder
/// weights, at the decoder means.
fn elbo_shared_grad(gen: &GenerativeModel, task_id: usize, data: &LabeledDataset, n: usize, rng: &mut rng::Rng) -> Result<Vec<Tensor>> {
    let blocks = gen.decoder_blocks(task_id)?;
    let shared = 2 * gen.shared().len();
    let mut g = Graph::new();
    let vars: Vec<GaussianVars> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mu = if i < shared { g.param(b.mu().clone()) } else { g.constant(b.mu().clone()) };
            GaussianVars { mu, log_sigma: mu }
        })
        .collect();
    let decoder = GenerativeVars::decoder_from_blocks(&mut g, &vars, gen.shared().len(), ThetaPolicy::Mean, rng)?;
    let encoder = encoder_consts(&mut g, gen, task_id)?;
    let rows = vae_elbo_rows(&mut g, &GenerativeVars { decoder, encoder }, &data.inputs.select_rows(&[n]), rng)?;
    let elbo = g.sum(rows);
    let grads = g.backward(elbo)?;
    Ok(vars[..shared].iter().map(|v| grads.get(&g, v.mu).expect("trainable leaf")).collect())
}

fn encoder_consts(g: &mut Graph, gen: &GenerativeModel, task_id: usize) -> Result<Vec<(Var, Var)>> {
    let vars: Vec<Var> = gen.encoder(task_id)?.params().into_iter().map(|p| g.constant(p)).collect();
    Ok(vars.chunks_exact(2).map(|c| (c[0], c[1])).collect())
}

/// `Σ_n (∇_θ ELBO_n)²` over the shared decoder parameters, one latent draw
/// per example.
pub fn dgm_fisher_via_bound(
    gen: &GenerativeModel,
    task_id: usize,
    data: &LabeledDataset,
    rows: &[usize],
    rng: &mut rng::Rng,
) -> Result<Vec<Tensor>> {
    squared_gradient_sum(&shared_means(gen), rows, |n| elbo_shared_grad(gen, task_id, data, n, rng))
}

/// Means of the shared decoder blocks, weight then bias per layer.
pub fn shared_means(gen: &GenerativeModel) -> Vec<Tensor> {
    gen.shared()
        .iter()
        .flat_map(|l| [l.weight.mu().clone(), l.bias.mu().clone()])
        .collect()
}

/// Point-estimate VAE step: decoder means and the task encoder are fitted
/// on `−ELBO + penalty / N`, where the penalty covers the shared decoder.
pub fn regularized_vae_step(
    gen_prev: &GenerativeModel,
    learner: &mut RegularizedLearner,
    data: &LabeledDataset,
    task_id: usize,
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
    let start_shared = shared_means(&gen);
    let init = vae_initial_blocks(&gen, task_id, SigmaInit::Previous, config)?;
    let n_dec = init.len();
    let shared_layers = gen.shared().len();
    let shared_idx: Vec<usize> = (0..2 * shared_layers).collect();
    let mut points: Vec<Tensor> = init.iter().map(|b| b.mu().clone()).collect();
    points.extend(gen.encoder(task_id)?.params());
    let penalty = (!learner.state.is_empty()).then(|| learner.state.clone());
    let is_si = learner.is_si();
    let mut observer = is_si.then(|| SiObserver {
        omega: learner.state.si_omega.as_mut_slice(),
        indices: &shared_idx,
        n: data.len() as f64,
    });
    let mut r = rng::stream(config.seed, &[label::TRAIN, task_id as u64]);
    let trace = optimize(
        Trainable {
            gaussian: &mut [],
            anchors: &[],
            points: &mut points,
        },
        data.len(),
        config,
        &mut r,
        observer.as_mut().map(|o| o as &mut dyn StepObserver),
        |g, _, pv, idx, r| {
            let blocks: Vec<GaussianVars> = pv[..n_dec].iter().map(|&mu| GaussianVars { mu, log_sigma: mu }).collect();
            let decoder = GenerativeVars::decoder_from_blocks(g, &blocks, shared_layers, ThetaPolicy::Mean, r)?;
            let encoder = pv[n_dec..].chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let rows = vae_elbo_rows(g, &GenerativeVars { decoder, encoder }, &data.inputs.select_rows(idx), r)?;
            let m = g.mean(rows);
            Ok(BatchTerms {
                data: g.neg(m),
                penalty: match &penalty {
                    Some(s) => s.penalty_graph(g, &pv[..shared_idx.len()], &shared_idx)?,
                    None => None,
                },
            })
        },
    )?;
    let encoder = points.split_off(n_dec);
    let log_sigma = 0.5 * config.init_variance.ln();
    let blocks = points
        .iter()
        .map(|mu| init_posterior_with_log_sigma(mu, log_sigma))
        .collect::<Result<Vec<_>>>()?;
    gen.set_decoder_blocks(task_id, blocks)?;
    gen.encoder_mut(task_id)?.set_params(encoder)?;
    let end_shared = shared_means(&gen);
    let mut fr = rng::stream(config.seed, &[label::FISHER, task_id as u64]);
    let mut zr = rng::stream(config.seed, &[label::FISHER, task_id as u64, 1]);
    learner.consolidate(&start_shared, &end_shared, data.len(), &mut fr, |rows| {
        dgm_fisher_via_bound(&gen, task_id, data, rows, &mut zr)
    })?;
    Ok((gen, trace))
}

/// The VAE update started from the previous parameters with no KL or
/// penalty term and point-estimated decoder weights.
pub fn naive_vae_task_step(
    gen_prev: &GenerativeModel,
    data: &LabeledDataset,
    task_id: usize,
    config: &TrainConfig,
) -> Result<(GenerativeModel, Vec<TraceRow>)> {
    let mut learner = RegularizedLearner::new(RegularizedMethod::Mle, &shared_means(gen_prev), gen_prev.prior())?;
    regularized_vae_step(gen_prev, &mut learner, data, task_id, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![v])]
    }

    #[test]
    fn scalar_quadratic_penalty() {
        assert_eq!(quadratic_penalty(&s(2.0), &s(1.0), &s(3.0), 2.0).unwrap(), 3.0);
        assert_eq!(quadratic_penalty(&s(1.0), &s(1.0), &s(3.0), 2.0).unwrap(), 0.0);
        assert!(quadratic_penalty(&s(1.0), &s(1.0), &s(-3.0), 2.0).is_err());
    }

    #[test]
    fn two_anchor_ewc() {
        let mut st = RegularizerState::new(&s(0.0));
        st.push(s(1.0), s(2.0), 3.0).unwrap();
        st.push(s(-1.0), s(0.5), 4.0).unwrap();
        // ½[3·2·(0.5−1)² + 4·0.5·(0.5+1)²] = ½[1.5 + 4.5]
        assert!((ewc_penalty(&s(0.5), &st).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn si_examples() {
        let w = si_accumulate(&s(0.0), &s(1.0), &s(-0.1)).unwrap();
        assert!((w[0].data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(si_accumulate(&s(0.3), &s(5.0), &s(0.0)).unwrap(), s(0.3));
        let o = si_consolidate(&s(0.1), &s(0.0), &s(0.5), &s(0.0), SI_XI).unwrap();
        assert!((o[0].data()[0] - 0.1 / 0.35).abs() < 1e-15);
        assert_eq!(si_consolidate(&s(0.0), &s(0.0), &s(0.5), &s(0.7), SI_XI).unwrap(), s(0.7));
        assert!(si_consolidate(&s(0.0), &s(0.0), &s(0.5), &s(0.7), 0.0).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(EWC_LAMBDA_GRID.len(), 5);
        assert_eq!(SI_LAMBDA_GRID[2], 0.5);
        assert_eq!(DGM_LAMBDA_GRID, [1.0, 10.0, 100.0]);
    }
}
