use rand::Rng;
use rand_distr::StandardNormal;

use super::{head_slot, softmax_rows, ArchitectureSpec, Head};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation of the random initial weights.
pub const INIT_WEIGHT_SD: f64 = 0.1;

/// Deterministic MLP with the same layout as a
/// [`DiscriminativeModel`](super::DiscriminativeModel). All heads exist from
/// the start so the flat parameter vector has a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct PointNet {
    arch: ArchitectureSpec,
    trunk: Vec<(Tensor, Tensor)>,
    heads: Vec<Head<(Tensor, Tensor)>>,
}

fn random_layer<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> (Tensor, Tensor) {
    let w = (0..input * output)
        .map(|_| INIT_WEIGHT_SD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (
        Tensor::matrix(input, output, w).expect("sized"),
        Tensor::zeros(&[output]),
    )
}

impl PointNet {
    pub fn new_random<R: Rng + ?Sized>(arch: &ArchitectureSpec, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let trunk = arch.trunk_dims().into_iter().map(|(i, o)| random_layer(i, o, rng)).collect();
        let (hi, ho) = arch.head_dims();
        let heads = (0..arch.head_count)
            .map(|task_id| Head {
                task_id,
                value: random_layer(hi, ho, rng),
            })
            .collect();
        Ok(PointNet {
            arch: arch.clone(),
            trunk,
            heads,
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn head_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task_id).collect()
    }

    /// Trunk weights and biases, then each head's, in head order.
    pub fn params(&self) -> Vec<Tensor> {
        self.trunk
            .iter()
            .chain(self.heads.iter().map(|h| &h.value))
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let old = self.params();
        if params.len() != old.len() {
            return Err(Error::shape("set_params", &[old.len()], &[params.len()]));
        }
        for (a, b) in old.iter().zip(&params) {
            if a.shape() != b.shape() {
                return Err(Error::shape("set_params", a.shape(), b.shape()));
            }
        }
        let mut it = params.into_iter();
        for layer in self.trunk.iter_mut().chain(self.heads.iter_mut().map(|h| &mut h.value)) {
            layer.0 = it.next().expect("counted");
            layer.1 = it.next().expect("counted");
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().to_vec()).collect()
    }

    pub fn param_len(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Indices into [`params`](Self::params) of the tensors used for `task_id`.
    pub fn active_params(&self, task_id: usize) -> Result<Vec<usize>> {
        let slot = head_slot(&self.heads, self.arch.mode, task_id)?;
        let t = 2 * self.trunk.len();
        Ok((0..t).chain([t + 2 * slot, t + 2 * slot + 1]).collect())
    }

    /// Logits on a graph whose leaves `vars` mirror [`params`](Self::params).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], task_id: usize, x: Var) -> Result<Var> {
        let active = self.active_params(task_id)?;
        let mut h = x;
        let layers = active.len() / 2;
        for l in 0..layers {
            let xw = g.matmul(h, vars[active[2 * l]])?;
            let a = g.add(xw, vars[active[2 * l + 1]])?;
            h = if l + 1 < layers { self.arch.activation.apply(g, a) } else { a };
        }
        Ok(h)
    }

    pub fn logits(&self, task_id: usize, x: &Tensor) -> Result<Tensor> {
        let slot = head_slot(&self.heads, self.arch.mode, task_id)?;
        let mut h = x.clone();
        for (w, b) in &self.trunk {
            let mut a = h.matmul(w)?;
            a.add_row(b)?;
            h = self.arch.activation.apply_plain(&a);
        }
        let (w, b) = &self.heads[slot].value;
        let mut out = h.matmul(w)?;
        out.add_row(b)?;
        Ok(out)
    }

    pub fn probs(&self, task_id: usize, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(task_id, x)?))
    }

    pub(crate) fn from_parts(arch: ArchitectureSpec, trunk: Vec<(Tensor, Tensor)>, heads: Vec<Head<(Tensor, Tensor)>>) -> Self {
        PointNet { arch, trunk, heads }
    }
}
