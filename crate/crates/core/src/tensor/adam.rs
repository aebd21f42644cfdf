use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with beta1 = 0.9, beta2 = 0.999,
    /// epsilon = 1e-8.
    pub fn new(learning_rate: f64, params: &[Tensor]) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), grads.len()],
            &[state.first_moment.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.learning_rate, state.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out longhand, independent of the tensor path.
    fn scalar_adam(mut x: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = vec![];
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(1e-3, &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let lr = 1e-3;
        let mut p = vec![Tensor::vector(vec![0.0; 4])];
        let g = vec![Tensor::vector(vec![5.0, -0.01, 1e3, -2.0])];
        let mut st = AdamState::new(lr, &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = g, v_hat = g², so Δ = -lr·g/(|g| + ε)
        for (&x, &gi) in p[0].data().iter().zip(g[0].data()) {
            assert!(x.abs() <= lr * (1.0 + 1e-6));
            assert_eq!(x.signum(), -gi.signum());
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let lr = 0.01;
        let grads = [0.7, 0.7];
        let expected = scalar_adam(0.3, &grads, lr);
        let mut p = vec![Tensor::vector(vec![0.3])];
        let mut st = AdamState::new(lr, &p);
        for (i, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &[Tensor::vector(vec![g])], &mut st).unwrap();
            assert_eq!(p[0].data()[0], expected[i]);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![0.0; 3])];
        let mut st = AdamState::new(1e-3, &p);
        assert!(adam_step(&mut p, &[Tensor::vector(vec![0.0; 2])], &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
