use crate::bayes::{GaussianVars, MeanFieldGaussian, PriorSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `y = xᵀw + ε` with a mean-field Gaussian over `w` (stored as `D×1`) and
/// known noise. The network is the identity map on the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesLinearRegression {
    pub posterior: MeanFieldGaussian,
    pub noise_sd: f64,
}

impl BayesLinearRegression {
    pub fn from_prior(dim: usize, prior: &PriorSpec, noise_sd: f64) -> Result<Self> {
        if !(noise_sd > 0.0) {
            return Err(Error::invalid(format!("noise standard deviation must be positive, got {noise_sd}")));
        }
        Ok(BayesLinearRegression {
            posterior: MeanFieldGaussian::from_prior(&[dim, 1], prior),
            noise_sd,
        })
    }

    pub fn dim(&self) -> usize {
        self.posterior.shape()[0]
    }

    pub fn mean(&self) -> Vec<f64> {
        self.posterior.mu().data().to_vec()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.posterior.log_sigma().data().iter().map(|l| (-2.0 * l).exp()).collect()
    }

    /// Batch mean of `−E_q[log N(y | xᵀw, σ²)]`, in closed form:
    /// `((y − xᵀμ)² + Σ_d x_d² σ_d²) / 2σ² + ½ log 2πσ²`.
    pub fn expected_nll(&self, g: &mut Graph, w: GaussianVars, x: &Tensor, y: &[f64]) -> Result<Var> {
        if x.rows() != y.len() || x.cols() != self.dim() {
            return Err(Error::shape("expected_nll", x.shape(), &[y.len(), self.dim()]));
        }
        let s2 = self.noise_sd * self.noise_sd;
        let xv = g.constant(x.clone());
        let yv = g.constant(Tensor::matrix(y.len(), 1, y.to_vec())?);
        let pred = g.matmul(xv, w.mu)?;
        let resid = g.sub(yv, pred)?;
        let sq = g.square(resid);
        let x2 = g.constant(x.map(|v| v * v));
        let ls2 = g.scale(w.log_sigma, 2.0);
        let var = g.exp(ls2);
        let spread = g.matmul(x2, var)?;
        let total = g.add(sq, spread)?;
        let m = g.mean(total);
        let scaled = g.scale(m, 0.5 / s2);
        Ok(g.add_scalar(scaled, 0.5 * (2.0 * std::f64::consts::PI * s2).ln()))
    }
}
