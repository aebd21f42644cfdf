//! Self-checks behind `vcl verify-oracles`: the online linear-regression
//! updates against exact posteriors, and central finite differences
//! against reverse-mode gradients for every graph operation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bayes::{local_reparam_var, local_reparam_with_noise, sample_weights, GaussianLinear, GaussianVars, LinearVars};
use crate::error::Result;
use crate::oracle::{exact_batch_posterior, sequential_vi_update, simplified_memory_recursion, DiagonalGaussian};
use crate::rng;
use crate::tensor::{ElementwiseOp, Graph, Tensor, Var};

/// Tolerance for deterministic operations.
pub const FD_TOL: f64 = 1e-4;
/// Tolerance for sampled pathways evaluated with common random numbers.
pub const FD_TOL_STOCHASTIC: f64 = 1e-3;
/// Tolerance for the closed-form online update against the exact posterior.
pub const ORACLE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<40} error {:.3e} (tolerance {:.0e})", self.name, self.error, self.tolerance)
    }
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-2)` over
/// every entry of every input, with `f` rebuilt from scratch at each probe.
pub fn finite_difference_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(&g, *v).expect("parameter gradient");
        for j in 0..inputs[i].len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::randn(shape, r)
}

/// Entries bounded away from zero, so kinks and poles stay out of reach of
/// the finite-difference step.
fn away_from_zero(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    randn(shape, r).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn positive(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| r.gen_range(0.5..2.0)).collect()).expect("shape")
}

/// Reduces any node to a scalar through fixed random weights, so every
/// output entry gets a distinct cotangent.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = randn(&shape, &mut rng::stream(seed, &[0xFD]));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn deterministic_cases(seed: u64) -> Vec<Case> {
    let r = &mut rng::stream(seed, &[0xFD, 1]);
    let labels = vec![2usize, 0, 1, 2];
    let targets = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(0.0..1.0)).collect()).expect("shape");
    let anchor: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let weight: Vec<f64> = (0..6).map(|_| r.gen_range(0.1..2.0)).collect();
    let prior_mu: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let prior_ls: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..0.5)).collect();
    let s = seed;
    vec![
        ("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, s)
        })),
        ("add (row broadcast)", vec![randn(&[3, 4], r), randn(&[4], r)], Box::new(move |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o, s)
        })),
        ("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o, s)
        })),
        ("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o, s)
        })),
        ("scale / neg / add_scalar", vec![randn(&[5], r)], Box::new(move |g, v| {
            let a = g.scale(v[0], -1.7);
            let b = g.neg(a);
            let o = g.add_scalar(b, 0.3);
            project(g, o, s)
        })),
        ("relu", vec![away_from_zero(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.relu(v[0]);
            project(g, o, s)
        })),
        ("exp", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.exp(v[0]);
            project(g, o, s)
        })),
        ("log", vec![positive(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.log(v[0])?;
            project(g, o, s)
        })),
        ("sigmoid", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.sigmoid(v[0]);
            project(g, o, s)
        })),
        ("square", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.square(v[0]);
            project(g, o, s)
        })),
        ("sqrt", vec![positive(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.sqrt(v[0])?;
            project(g, o, s)
        })),
        ("elementwise dispatch", vec![positive(&[2, 3], r), randn(&[2, 3], r)], Box::new(move |g, v| {
            let a = g.elementwise(ElementwiseOp::Mul, &[v[0], v[1]])?;
            let b = g.elementwise(ElementwiseOp::Log, &[v[0]])?;
            let c = g.elementwise(ElementwiseOp::Add, &[a, b])?;
            let d = g.elementwise(ElementwiseOp::Sigmoid, &[c])?;
            let e = g.elementwise(ElementwiseOp::Exp, &[d])?;
            project(g, e, s)
        })),
        ("sum / mean", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let sq = g.square(v[0]);
            let a = g.sum(sq);
            let b = g.mean(v[0]);
            let b = g.scale(b, 3.0);
            g.add(a, b)
        })),
        ("row_sums", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.row_sums(v[0])?;
            project(g, o, s)
        })),
        ("slice_cols", vec![randn(&[3, 5], r)], Box::new(move |g, v| {
            let o = g.slice_cols(v[0], 1, 3)?;
            project(g, o, s)
        })),
        ("softmax_cross_entropy", vec![randn(&[4, 3], r)], Box::new(move |g, v| {
            g.softmax_cross_entropy(v[0], &labels)
        })),
        ("bernoulli_log_lik", vec![randn(&[3, 4], r)], Box::new(move |g, v| {
            let o = g.bernoulli_log_lik(v[0], &targets)?;
            project(g, o, s)
        })),
        ("weighted_sq_dist", vec![randn(&[2, 3], r)], Box::new(move |g, v| {
            g.weighted_sq_dist(v[0], &anchor, &weight)
        })),
        ("kl_diag_gaussian", vec![randn(&[2, 3], r), randn(&[2, 3], r).map(|x| 0.3 * x)], Box::new(move |g, v| {
            g.kl_diag_gaussian(v[0], v[1], &prior_mu, &prior_ls)
        })),
    ]
}

fn layer_vars(v: &[Var]) -> LinearVars {
    LinearVars {
        weight: GaussianVars { mu: v[1], log_sigma: v[2] },
        bias: GaussianVars { mu: v[3], log_sigma: v[4] },
    }
}

fn layer_inputs(r: &mut rng::Rng) -> Vec<Tensor> {
    vec![
        randn(&[4, 3], r),
        randn(&[3, 2], r),
        randn(&[3, 2], r).map(|x| 0.3 * x - 1.0),
        randn(&[2], r),
        randn(&[2], r).map(|x| 0.3 * x - 1.0),
    ]
}

/// Finite-difference checks of every graph operation and of the local
/// reparameterisation pathway.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, inputs, f) in deterministic_cases(seed) {
        out.push(Check {
            name: name.into(),
            error: finite_difference_error(&inputs, f)?,
            tolerance: FD_TOL,
        });
    }
    let r = &mut rng::stream(seed, &[0xFD, 2]);
    let noise = randn(&[4, 2], r);
    let inputs = layer_inputs(r);
    let s = seed;
    out.push(Check {
        name: "local reparameterisation (fixed noise)".into(),
        error: finite_difference_error(&inputs, move |g, v| {
            let a = local_reparam_with_noise(g, layer_vars(v), v[0], noise.clone())?;
            let a = g.relu(a);
            project(g, a, s)
        })?,
        tolerance: FD_TOL,
    });
    let inputs = layer_inputs(r);
    out.push(Check {
        name: "local reparameterisation (CRN draws)".into(),
        error: finite_difference_error(&inputs, move |g, v| {
            let mut crn = rng::stream(s, &[0xFD, 3]);
            let mut total = None;
            for _ in 0..8 {
                let a = local_reparam_var(g, layer_vars(v), v[0], &mut crn)?;
                let a = g.sigmoid(a);
                let p = project(g, a, s)?;
                total = Some(match total {
                    Some(t) => g.add(t, p)?,
                    None => p,
                });
            }
            Ok(g.scale(total.expect("eight draws"), 1.0 / 8.0))
        })?,
        tolerance: FD_TOL_STOCHASTIC,
    });
    Ok(out)
}

fn random_diag(d: usize, r: &mut rng::Rng) -> Result<DiagonalGaussian> {
    let mean = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let precision = (0..d).map(|_| r.gen_range(0.5..2.0)).collect();
    DiagonalGaussian::new(mean, precision)
}

/// Chains of single-observation updates in dimensions 1..=8, each step
/// compared with the exact posterior of the previous factorised posterior.
/// Returns the worst mean error and worst relative precision error.
pub fn sequential_vs_exact(seed: u64, chains: usize, steps: usize) -> Result<(f64, f64)> {
    let r = &mut rng::stream(seed, &[0x0C]);
    let (mut mean_err, mut prec_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..chains {
        let d = r.gen_range(1..=8);
        let noise = r.gen_range(0.5..2.0);
        let mut q = random_diag(d, r)?;
        for _ in 0..steps {
            let x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let y: f64 = r.sample(StandardNormal);
            let next = sequential_vi_update(&q, &x, y, noise)?;
            let exact = exact_batch_posterior(&Tensor::matrix(1, d, x.clone())?, &[y], &q.to_full(), noise)?;
            let exact_prec = exact.diagonal_precision()?;
            for i in 0..d {
                mean_err = mean_err.max((next.mean[i] - exact.mean[i]).abs());
                prec_err = prec_err.max(((next.precision[i] - exact_prec[i]) / exact_prec[i]).abs());
            }
            q = next;
        }
    }
    Ok((mean_err, prec_err))
}

/// Unit-norm `±1` patterns: worst gap between the precision after `t`
/// steps and `v₀⁻¹ + t/D`, and between the exact and simplified means.
pub fn unit_pattern_recursion(seed: u64, d: usize, steps: usize, v0_inv: f64) -> Result<(f64, f64)> {
    let p = crate::data::random_pattern_stream(d, steps, seed, true)?;
    let mut q = DiagonalGaussian::isotropic(vec![0.0; d], v0_inv)?;
    let mut m = vec![0.0; d];
    let (mut prec_err, mut mean_err): (f64, f64) = (0.0, 0.0);
    for t in 0..steps {
        q = sequential_vi_update(&q, &p.inputs[t], p.targets[t], 1.0)?;
        let x_bar: Vec<f64> = p.inputs[t].iter().map(|x| x * p.targets[t]).collect();
        m = simplified_memory_recursion(&m, t, d, &x_bar, v0_inv)?;
        let expected = v0_inv + (t + 1) as f64 / d as f64;
        for i in 0..d {
            prec_err = prec_err.max((q.precision[i] - expected).abs());
            mean_err = mean_err.max((q.mean[i] - m[i]).abs());
        }
    }
    Ok((prec_err, mean_err))
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let (mean_err, prec_err) = sequential_vs_exact(seed, 100, 10)?;
    let mut out = vec![
        Check {
            name: "online update mean vs exact".into(),
            error: mean_err,
            tolerance: ORACLE_TOL,
        },
        Check {
            name: "online update precision vs exact".into(),
            error: prec_err,
            tolerance: ORACLE_TOL,
        },
    ];
    for (d, v0) in [(2, 1e-3), (8, 1.0), (64, 0.5)] {
        let (p, m) = unit_pattern_recursion(seed, d, 4 * d, v0)?;
        out.push(Check {
            name: format!("unit patterns D={d}: precision"),
            error: p,
            tolerance: ORACLE_TOL,
        });
        out.push(Check {
            name: format!("unit patterns D={d}: mean recursion"),
            error: m,
            tolerance: ORACLE_TOL,
        });
    }
    Ok(out)
}

/// Closed-form moments of a layer's pre-activations match a large Monte
/// Carlo sample of explicit weight draws.
pub fn layer_moments_match(layer: &GaussianLinear, x: &Tensor, draws: usize, seed: u64) -> Result<f64> {
    let (mean, var) = layer.moments(x)?;
    let mut r = rng::stream(seed, &[0xFD, 4]);
    let n = mean.len();
    let (mut s1, mut s2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..draws {
        let w = sample_weights(&layer.weight, &mut r);
        let b = sample_weights(&layer.bias, &mut r);
        let mut a = x.matmul(&w)?;
        a.add_row(&b)?;
        for (i, v) in a.data().iter().enumerate() {
            s1[i] += v;
            s2[i] += v * v;
        }
    }
    let k = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let m = s1[i] / k;
        let se = (var.data()[i] / k).sqrt();
        worst = worst.max((m - mean.data()[i]).abs() / se);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in gradient_suite(7).unwrap().into_iter().chain(oracle_suite(7).unwrap()) {
            println!("{c}");
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn finite_differences_catch_a_wrong_gradient() {
        let x = Tensor::vector(vec![0.3, -0.8]);
        // the value is x², but the graph sees a constant for the second factor
        let err = finite_difference_error(&[x], |g, v| {
            let c = g.constant(g.tensor(v[0]));
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err > 0.1);
    }
}
