//! Conjugate Bayesian linear regression `y = xᵀw + ε`, `ε ~ N(0, σ_y²)`,
//! and the closed-form online mean-field updates for it.
//!
//! Everything here is plain dense linear algebra at small dimension; the
//! functions serve as ground truth for the gradient-trained learner.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full-covariance Gaussian over the weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    /// Row-major `d×d`.
    pub covariance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        let mut covariance = vec![0.0; d * d];
        for i in 0..d {
            covariance[i * d + i] = variance;
        }
        GaussianPosterior { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<Vec<f64>> {
        inverse(&self.covariance, self.dim())
    }

    pub fn diagonal_precision(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        let p = self.precision()?;
        Ok((0..d).map(|i| p[i * d + i]).collect())
    }
}

/// Fully factorised Gaussian, stored by precision so that a flat prior
/// (`precision = 0`) is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(Error::shape("diagonal_gaussian", &[mean.len()], &[precision.len()]));
        }
        if let Some(p) = precision.iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::Domain {
                op: "diagonal_gaussian",
                detail: format!("precision {p} is negative"),
            });
        }
        Ok(DiagonalGaussian { mean, precision })
    }

    pub fn isotropic(mean: Vec<f64>, precision: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![precision; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    /// Full-covariance view, for feeding to [`exact_batch_posterior`].
    pub fn to_full(&self) -> GaussianPosterior {
        let d = self.dim();
        let mut covariance = vec![0.0; d * d];
        for i in 0..d {
            covariance[i * d + i] = 1.0 / self.precision[i];
        }
        GaussianPosterior {
            mean: self.mean.clone(),
            covariance,
        }
    }
}

fn check_noise(noise_sd: f64) -> Result<f64> {
    if !(noise_sd > 0.0) || !noise_sd.is_finite() {
        return Err(Error::invalid(format!("noise standard deviation must be positive, got {noise_sd}")));
    }
    Ok(noise_sd * noise_sd)
}

/// Exact posterior after observing rows of `x` with targets `y`:
/// `V = (V₀⁻¹ + XᵀX/σ²)⁻¹`, `m = V(V₀⁻¹m₀ + Xᵀy/σ²)`.
pub fn exact_batch_posterior(
    x: &Tensor,
    y: &[f64],
    prior: &GaussianPosterior,
    noise_sd: f64,
) -> Result<GaussianPosterior> {
    let s2 = check_noise(noise_sd)?;
    let d = prior.dim();
    if prior.covariance.len() != d * d {
        return Err(Error::shape("exact_batch_posterior", &[d, d], &[prior.covariance.len()]));
    }
    if x.rows() != y.len() || (x.rows() > 0 && x.cols() != d) {
        return Err(Error::shape("exact_batch_posterior", x.shape(), &[y.len(), d]));
    }
    if y.is_empty() {
        return Ok(prior.clone());
    }
    let mut p = inverse(&prior.covariance, d)?;
    let mut rhs = matvec(&p, &prior.mean, d);
    for (n, &yn) in y.iter().enumerate() {
        let row = x.row(n);
        for i in 0..d {
            rhs[i] += row[i] * yn / s2;
            for j in 0..d {
                p[i * d + j] += row[i] * row[j] / s2;
            }
        }
    }
    let mut covariance = inverse(&p, d)?;
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (covariance[i * d + j] + covariance[j * d + i]);
            covariance[i * d + j] = avg;
            covariance[j * d + i] = avg;
        }
    }
    let mean = matvec(&covariance, &rhs, d);
    Ok(GaussianPosterior { mean, covariance })
}

/// One online mean-field step on a single observation:
/// `m_t = [I + V x xᵀ/σ²]⁻¹ [V x y/σ² + m]`, `1/v_t = 1/v + x²/σ²`,
/// with the inverse applied by Sherman–Morrison. Requires positive prior
/// precision.
pub fn sequential_vi_update(prev: &DiagonalGaussian, x: &[f64], y: f64, noise_sd: f64) -> Result<DiagonalGaussian> {
    let s2 = check_noise(noise_sd)?;
    check_step(prev, x)?;
    let vx: Vec<f64> = x.iter().zip(&prev.precision).map(|(xi, p)| xi / p).collect();
    let b: Vec<f64> = vx.iter().zip(&prev.mean).map(|(v, m)| v * y / s2 + m).collect();
    let xvx: f64 = x.iter().zip(&vx).map(|(a, b)| a * b).sum();
    let xb: f64 = x.iter().zip(&b).map(|(a, b)| a * b).sum();
    let k = xb / (s2 + xvx);
    let mean = b.iter().zip(&vx).map(|(bi, vi)| bi - vi * k).collect();
    Ok(DiagonalGaussian {
        mean,
        precision: updated_precision(prev, x, s2),
    })
}

/// The same step as [`sequential_vi_update`], solving the dense system with
/// partial pivoting instead of the rank-one identity.
pub fn sequential_vi_update_solve(
    prev: &DiagonalGaussian,
    x: &[f64],
    y: f64,
    noise_sd: f64,
) -> Result<DiagonalGaussian> {
    let s2 = check_noise(noise_sd)?;
    check_step(prev, x)?;
    let d = prev.dim();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for i in 0..d {
        let vi = 1.0 / prev.precision[i];
        for j in 0..d {
            a[i * d + j] = vi * x[i] * x[j] / s2;
        }
        a[i * d + i] += 1.0;
        b[i] = vi * x[i] * y / s2 + prev.mean[i];
    }
    let mean = solve(&a, &b, d)?;
    Ok(DiagonalGaussian {
        mean,
        precision: updated_precision(prev, x, s2),
    })
}

fn check_step(prev: &DiagonalGaussian, x: &[f64]) -> Result<()> {
    if x.len() != prev.dim() {
        return Err(Error::shape("sequential_vi_update", &[prev.dim()], &[x.len()]));
    }
    if let Some(p) = prev.precision.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Domain {
            op: "sequential_vi_update",
            detail: format!("prior precision {p} must be positive"),
        });
    }
    Ok(())
}

fn updated_precision(prev: &DiagonalGaussian, x: &[f64], s2: f64) -> Vec<f64> {
    prev.precision.iter().zip(x).map(|(p, xi)| p + xi * xi / s2).collect()
}

/// Unit-norm, unit-noise form of the mean recursion:
/// `m_t = [I − x̄x̄ᵀ/c] m_{t−1} + x̄/c` with `c = 1 + v₀⁻¹ + t/D`, `x̄ = y x`.
///
/// The exact one-step projection has `c = 1 + p`, where `p` is the prior
/// precision before the step, so it agrees with [`sequential_vi_update`]
/// when `t` counts the patterns already absorbed.
pub fn simplified_memory_recursion(m_prev: &[f64], t: usize, d: usize, x_bar: &[f64], v0_inv: f64) -> Result<Vec<f64>> {
    if m_prev.len() != d || x_bar.len() != d {
        return Err(Error::shape("simplified_memory_recursion", &[d], &[m_prev.len(), x_bar.len()]));
    }
    let c = 1.0 + v0_inv + t as f64 / d as f64;
    let proj: f64 = x_bar.iter().zip(m_prev).map(|(a, b)| a * b).sum();
    Ok(m_prev
        .iter()
        .zip(x_bar)
        .map(|(m, xb)| m - xb * proj / c + xb / c)
        .collect())
}

/// Batch mean-field VI for the whole data set at once. The precisions have
/// a closed form; the means are found by Gauss–Seidel sweeps of the
/// coordinate optimality condition until the largest change is below `tol`.
pub fn batch_diagonal_vi(
    x: &Tensor,
    y: &[f64],
    prior: &DiagonalGaussian,
    noise_sd: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<DiagonalGaussian> {
    let s2 = check_noise(noise_sd)?;
    let d = prior.dim();
    if x.rows() != y.len() || (x.rows() > 0 && x.cols() != d) {
        return Err(Error::shape("batch_diagonal_vi", x.shape(), &[y.len(), d]));
    }
    let n = y.len();
    let mut precision = prior.precision.clone();
    for r in 0..n {
        for (p, xi) in precision.iter_mut().zip(x.row(r)) {
            *p += xi * xi / s2;
        }
    }
    if let Some(p) = precision.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Domain {
            op: "batch_diagonal_vi",
            detail: format!("posterior precision {p} is not positive"),
        });
    }
    let mut mean = prior.mean.clone();
    let mut fitted: Vec<f64> = (0..n)
        .map(|r| x.row(r).iter().zip(&mean).map(|(a, b)| a * b).sum())
        .collect();
    for _ in 0..max_sweeps {
        let mut delta: f64 = 0.0;
        for j in 0..d {
            let mut acc = prior.precision[j] * prior.mean[j];
            for r in 0..n {
                let xr = x.row(r)[j];
                acc += xr * (y[r] - fitted[r] + xr * mean[j]) / s2;
            }
            let new = acc / precision[j];
            let step = new - mean[j];
            if step != 0.0 {
                for (r, f) in fitted.iter_mut().enumerate() {
                    *f += x.row(r)[j] * step;
                }
            }
            mean[j] = new;
            delta = delta.max(step.abs());
        }
        if delta < tol {
            return Ok(DiagonalGaussian { mean, precision });
        }
    }
    Err(Error::invalid(format!("coordinate iteration did not reach {tol} in {max_sweeps} sweeps")))
}

fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect()
}

/// Solves `a x = b` for row-major `d×d` `a` by Gaussian elimination with
/// partial pivoting.
pub fn solve(a: &[f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut x = solve_many(a, b, d, 1)?;
    x.truncate(d);
    Ok(x)
}

/// Inverse of a row-major `d×d` matrix.
pub fn inverse(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    solve_many(a, &eye, d, d)
}

fn solve_many(a: &[f64], b: &[f64], d: usize, k: usize) -> Result<Vec<f64>> {
    if a.len() != d * d || b.len() != d * k {
        return Err(Error::shape("solve", &[d, d], &[b.len()]));
    }
    let mut m = a.to_vec();
    let mut r = b.to_vec();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| m[i * d + col].abs().total_cmp(&m[j * d + col].abs()))
            .expect("non-empty range");
        if !(m[pivot * d + col].abs() > scale * 1e-15) {
            return Err(Error::Domain {
                op: "solve",
                detail: "matrix is singular to working precision".into(),
            });
        }
        if pivot != col {
            for j in 0..d {
                m.swap(col * d + j, pivot * d + j);
            }
            for j in 0..k {
                r.swap(col * k + j, pivot * k + j);
            }
        }
        let inv = 1.0 / m[col * d + col];
        for i in col + 1..d {
            let f = m[i * d + col] * inv;
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                m[i * d + j] -= f * m[col * d + j];
            }
            for j in 0..k {
                r[i * k + j] -= f * r[col * k + j];
            }
        }
    }
    for col in (0..d).rev() {
        for j in 0..k {
            let mut acc = r[col * k + j];
            for i in col + 1..d {
                acc -= m[col * d + i] * r[i * k + j];
            }
            r[col * k + j] = acc / m[col * d + col];
        }
    }
    Ok(r)
}
