//! Mean-field Gaussian variational families.
//!
//! Each parameter block (a weight matrix or a bias vector) carries a mean and
//! a log standard deviation of the same shape, so `σ = exp(log_sigma)` is
//! positive by construction. Biases get the same treatment as weights.

pub(crate) mod codec;

pub use codec::{read_posterior, write_posterior, POSTERIOR_FORMAT_VERSION};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Added inside the local-reparameterisation `s²` so the square root never
/// sees zero; equivalent to a standard-deviation floor of 1e-12.
pub const VARIANCE_FLOOR: f64 = 1e-24;

/// Variance used when a posterior is initialised from a point estimate.
pub const INIT_VARIANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldGaussian {
    mu: Tensor,
    log_sigma: Tensor,
}

impl MeanFieldGaussian {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::shape("mean_field_gaussian", mu.shape(), log_sigma.shape()));
        }
        Ok(MeanFieldGaussian { mu, log_sigma })
    }

    pub fn from_prior(shape: &[usize], prior: &PriorSpec) -> Self {
        MeanFieldGaussian {
            mu: Tensor::full(shape, prior.mean),
            log_sigma: Tensor::full(shape, 0.5 * prior.variance.ln()),
        }
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }

    pub fn mu_mut(&mut self) -> &mut Tensor {
        &mut self.mu
    }

    pub fn log_sigma_mut(&mut self) -> &mut Tensor {
        &mut self.log_sigma
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    pub fn variance(&self) -> Tensor {
        self.log_sigma.map(|l| (2.0 * l).exp())
    }

    /// Adds this block's mean and log-sigma to a graph, as differentiable
    /// leaves when `trainable`, as constants otherwise.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> GaussianVars {
        let (mu, log_sigma) = if trainable {
            (g.param(self.mu.clone()), g.param(self.log_sigma.clone()))
        } else {
            (g.constant(self.mu.clone()), g.constant(self.log_sigma.clone()))
        };
        GaussianVars { mu, log_sigma }
    }
}

/// Graph handles for one mean-field block.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Isotropic Gaussian prior `N(mean, variance)` applied to every coordinate.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorSpec {
    pub mean: f64,
    pub variance: f64,
}

impl PriorSpec {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!("prior variance must be positive, got {variance}")));
        }
        Ok(PriorSpec { mean, variance })
    }

    pub fn standard() -> Self {
        PriorSpec {
            mean: 0.0,
            variance: 1.0,
        }
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.variance
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::standard()
    }
}

/// `KL(q || p)` for diagonal Gaussians, summed over coordinates.
pub fn kl_diag_gaussians(q: &MeanFieldGaussian, p: &MeanFieldGaussian) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(Error::shape("kl_diag_gaussians", q.shape(), p.shape()));
    }
    Ok(crate::tensor::graph_kl_terms(
        q.mu.data(),
        q.log_sigma.data(),
        p.mu.data(),
        p.log_sigma.data(),
    ))
}

/// `θ = μ + σ ⊙ ε` with `ε ~ N(0, I)`.
pub fn sample_weights<R: Rng + ?Sized>(q: &MeanFieldGaussian, rng: &mut R) -> Tensor {
    let data = q
        .mu
        .data()
        .iter()
        .zip(q.log_sigma.data())
        .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(q.shape().to_vec(), data).expect("shape preserved")
}

/// Graph form of [`sample_weights`] with explicit noise, so gradients reach
/// `μ` and `log σ`.
pub fn sample_weights_var(g: &mut Graph, q: GaussianVars, noise: Tensor) -> Result<Var> {
    let eps = g.constant(noise);
    let sigma = g.exp(q.log_sigma);
    let scaled = g.mul(sigma, eps)?;
    g.add(q.mu, scaled)
}

/// Posterior for the first task: mean at the point estimate, variance 1e-6.
pub fn init_first_posterior(mle_params: &Tensor) -> Result<MeanFieldGaussian> {
    init_posterior_with_log_sigma(mle_params, 0.5 * INIT_VARIANCE.ln())
}

/// Posterior centred on `mean` with a constant log standard deviation.
pub fn init_posterior_with_log_sigma(mean: &Tensor, log_sigma: f64) -> Result<MeanFieldGaussian> {
    if !mean.all_finite() {
        return Err(Error::Domain {
            op: "init_first_posterior",
            detail: "non-finite parameter".into(),
        });
    }
    if !log_sigma.is_finite() {
        return Err(Error::invalid(format!("log sigma {log_sigma} is not finite")));
    }
    Ok(MeanFieldGaussian {
        mu: mean.clone(),
        log_sigma: Tensor::full(mean.shape(), log_sigma),
    })
}

/// Mean-field posterior over a dense layer `x W + b`, `W: in×out`, `b: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLinear {
    pub weight: MeanFieldGaussian,
    pub bias: MeanFieldGaussian,
}

impl GaussianLinear {
    pub fn from_prior(input: usize, output: usize, prior: &PriorSpec) -> Self {
        GaussianLinear {
            weight: MeanFieldGaussian::from_prior(&[input, output], prior),
            bias: MeanFieldGaussian::from_prior(&[output], prior),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            weight: self.weight.to_graph(g, trainable),
            bias: self.bias.to_graph(g, trainable),
        }
    }

    pub fn blocks(&self) -> [&MeanFieldGaussian; 2] {
        [&self.weight, &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut MeanFieldGaussian; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Pre-activation mean and standard deviation for `x`, outside any graph.
    pub fn moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut mean = x.matmul(self.weight.mu())?;
        mean.add_row(self.bias.mu())?;
        let mut var = x.map(|v| v * v).matmul(&self.weight.variance())?;
        var.add_row(&self.bias.variance())?;
        Ok((mean, var.map(|v| (v + VARIANCE_FLOOR).sqrt())))
    }

    /// `x μ_W + μ_b`.
    pub fn mean_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(self.weight.mu())?;
        out.add_row(self.bias.mu())?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: GaussianVars,
    pub bias: GaussianVars,
}

/// Mean and variance of the pre-activations `x W + b` under the layer
/// posterior: `m = x μ_W + μ_b`, `s² = x² σ_W² + σ_b² + floor`.
pub fn preactivation_moments(g: &mut Graph, layer: LinearVars, x: Var) -> Result<(Var, Var)> {
    let xm = g.matmul(x, layer.weight.mu)?;
    let mean = g.add(xm, layer.bias.mu)?;
    let x2 = g.square(x);
    let w_ls2 = g.scale(layer.weight.log_sigma, 2.0);
    let w_var = g.exp(w_ls2);
    let b_ls2 = g.scale(layer.bias.log_sigma, 2.0);
    let b_var = g.exp(b_ls2);
    let xv = g.matmul(x2, w_var)?;
    let var = g.add(xv, b_var)?;
    let var = g.add_scalar(var, VARIANCE_FLOOR);
    Ok((mean, var))
}

/// Local reparameterisation with caller-supplied standard normal noise of
/// shape `batch × out`: `a = m + s ⊙ ε`.
pub fn local_reparam_with_noise(g: &mut Graph, layer: LinearVars, x: Var, noise: Tensor) -> Result<Var> {
    let (mean, var) = preactivation_moments(g, layer, x)?;
    if noise.shape() != g.shape(mean) {
        return Err(Error::shape("local_reparam_linear", noise.shape(), g.shape(mean)));
    }
    let s = g.sqrt(var)?;
    let eps = g.constant(noise);
    let scaled = g.mul(s, eps)?;
    g.add(mean, scaled)
}

/// Samples pre-activations `batch × out` on a graph, drawing fresh noise.
pub fn local_reparam_var<R: Rng + ?Sized>(g: &mut Graph, layer: LinearVars, x: Var, rng: &mut R) -> Result<Var> {
    let xs = g.shape(x);
    let ws = g.shape(layer.weight.mu);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape("local_reparam_linear", xs, ws));
    }
    let noise = Tensor::randn(&[xs[0], ws[1]], rng);
    local_reparam_with_noise(g, layer, x, noise)
}

/// One local-reparameterisation draw of the pre-activations for `input`.
pub fn local_reparam_linear<R: Rng + ?Sized>(
    layer: &GaussianLinear,
    input: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = layer.to_graph(&mut g, false);
    let x = g.constant(input.clone());
    let a = local_reparam_var(&mut g, vars, x, rng)?;
    Ok(g.tensor(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn gaussian(mu: Vec<f64>, log_sigma: Vec<f64>) -> MeanFieldGaussian {
        MeanFieldGaussian::new(Tensor::vector(mu), Tensor::vector(log_sigma)).unwrap()
    }

    #[test]
    fn kl_examples() {
        let q = gaussian(vec![0.3, -1.0], vec![0.1, -0.4]);
        assert_eq!(kl_diag_gaussians(&q, &q).unwrap(), 0.0);
        let q = gaussian(vec![1.0], vec![0.0]);
        let p = gaussian(vec![0.0], vec![0.0]);
        assert!((kl_diag_gaussians(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_shape_mismatch() {
        let q = gaussian(vec![0.0; 2], vec![0.0; 2]);
        let p = gaussian(vec![0.0; 3], vec![0.0; 3]);
        assert!(kl_diag_gaussians(&q, &p).is_err());
        assert!(MeanFieldGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0; 2])).is_err());
    }

    #[test]
    fn prior_requires_positive_variance() {
        assert!(PriorSpec::new(0.0, 0.0).is_err());
        assert!(PriorSpec::new(0.0, -1.0).is_err());
        assert!(PriorSpec::new(0.0, f64::NAN).is_err());
        let p = PriorSpec::new(0.5, 2.0).unwrap();
        let q = MeanFieldGaussian::from_prior(&[3], &p);
        assert!(q.variance().data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn init_first_posterior_variance() {
        let q = init_first_posterior(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(q.mu().data(), &[0.0; 4]);
        for &ls in q.log_sigma().data() {
            assert!(((2.0 * ls).exp() - 1e-6).abs() < 1e-15);
        }
        assert!(init_first_posterior(&Tensor::vector(vec![f64::NAN])).is_err());
        assert!(init_first_posterior(&Tensor::vector(vec![f64::INFINITY])).is_err());
    }

    #[test]
    fn init_first_posterior_samples_cluster() {
        let q = init_first_posterior(&Tensor::vector(vec![0.7; 1000])).unwrap();
        let mut rng = stream(1, &[]);
        let mut inside = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let w = sample_weights(&q, &mut rng);
            inside += w.data().iter().filter(|&&x| (x - 0.7).abs() <= 4e-3).count();
            total += w.len();
        }
        // ±4e-3 is 4σ, so P(outside) ≈ 6.3e-5
        assert!(inside as f64 / total as f64 >= 0.9999, "{inside}/{total}");
    }

    #[test]
    fn sample_weights_zero_variance_returns_mean() {
        let q = gaussian(vec![1.5, -2.0], vec![(1e-12f64).ln(); 2]);
        let w = sample_weights(&q, &mut stream(2, &[]));
        for (a, b) in w.data().iter().zip(q.mu().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn local_reparam_zero_variance_is_affine() {
        let mut layer = GaussianLinear::from_prior(3, 2, &PriorSpec::standard());
        let mut rng = stream(3, &[]);
        *layer.weight.mu_mut() = Tensor::randn(&[3, 2], &mut rng);
        *layer.bias.mu_mut() = Tensor::randn(&[2], &mut rng);
        let tiny = (1e-12f64).ln();
        *layer.weight.log_sigma_mut() = Tensor::full(&[3, 2], tiny);
        *layer.bias.log_sigma_mut() = Tensor::full(&[2], tiny);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let a = local_reparam_linear(&layer, &x, &mut rng).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                let mut m = layer.bias.mu().data()[c];
                for k in 0..3 {
                    m += x.data()[r * 3 + k] * layer.weight.mu().data()[k * 2 + c];
                }
                assert!((a.data()[r * 2 + c] - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn local_reparam_shape_error() {
        let layer = GaussianLinear::from_prior(3, 2, &PriorSpec::standard());
        let x = Tensor::zeros(&[4, 5]);
        assert!(local_reparam_linear(&layer, &x, &mut stream(0, &[])).is_err());
    }
}
