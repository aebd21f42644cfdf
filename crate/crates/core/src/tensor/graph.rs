use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sigmoid { a: Var },
    Square { a: Var },
    Sqrt { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    RowSums { a: Var, cols: usize },
    SliceCols { a: Var, start: usize, width: usize, cols: usize },
    SoftmaxXent { logits: Var, probs: Vec<f64>, labels: Vec<usize>, classes: usize },
    BernoulliLogLik { logits: Var, targets: Vec<f64>, cols: usize },
    WeightedSqDist { x: Var, anchor: Vec<f64>, weight: Vec<f64> },
    KlDiagGaussian { mu: Var, log_sigma: Var, prior_mu: Vec<f64>, prior_log_sigma: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only tape. Node inputs always precede the node, so a single
/// reverse sweep visits every node once in a valid order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(Op::Leaf, shape, data, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(Op::Leaf, shape, data, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, rg))
    }

    /// Output shape for a binary op where one operand may repeat along
    /// leading axes (its shape is a suffix of the other's).
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if sa.ends_with(sb) {
            return Ok(sa.to_vec());
        }
        if sb.ends_with(sa) {
            return Ok(sb.to_vec());
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let (la, lb) = (va.len().max(1), vb.len().max(1));
        let out = if va.len() == n && vb.len() == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % la], vb[i % lb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(op, shape, out, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative entry {bad}"),
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt { a }))
    }

    /// Dispatches one of the tagged pointwise operations.
    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::invalid(format!(
                "{op:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        let a = operands[0];
        match op {
            ElementwiseOp::Add => self.add(a, operands[1]),
            ElementwiseOp::Mul => self.mul(a, operands[1]),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Exp => Ok(self.exp(a)),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum { a }, vec![], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean { a }, vec![], vec![s], rg)
    }

    /// Sums each row of a matrix, giving a vector of length `rows`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("row_sums", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = self.value(a).chunks(cols.max(1)).map(|r| r.iter().sum()).collect::<Vec<f64>>();
        let out = if cols == 0 { vec![0.0; rows] } else { out };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::RowSums { a, cols }, vec![rows], out, rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + width > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, width]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols { a, start, width, cols }, vec![rows, width], out, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilised by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v[r * classes..(r + 1) * classes];
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            // log Σ e^{x-max} = log1p(Σ_{c≠argmax} e^{x_c-max})
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != arg)
                .map(|(_, &x)| (x - max).exp())
                .sum();
            loss += rest.ln_1p() + (max - row[label]);
            let z = 1.0 + rest;
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - max).exp() / z;
            }
        }
        let n = labels.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            vec![],
            vec![loss / n],
            rg,
        ))
    }

    /// Per-row Bernoulli log-likelihood `Σ_j x log σ(a) + (1-x) log(1-σ(a))`
    /// of targets in `[0, 1]` under logits `a`; returns a vector over rows.
    pub fn bernoulli_log_lik(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits);
        if s != targets.shape() || s.len() != 2 {
            return Err(Error::shape("bernoulli_log_lik", s, targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Domain {
                op: "bernoulli_log_lik",
                detail: format!("target {bad} outside [0, 1]"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(logits);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                let a = v[r * cols + c];
                let x = targets.data()[r * cols + c];
                acc += x * a - softplus(a);
            }
            out[r] = acc;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::BernoulliLogLik {
                logits,
                targets: targets.data().to_vec(),
                cols,
            },
            vec![rows],
            out,
            rg,
        ))
    }

    /// `Σ_k w_k (x_k - anchor_k)²` with constant anchor and weights.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        if anchor.len() != n || weight.len() != n {
            return Err(Error::shape("weighted_sq_dist", &[n], &[anchor.len(), weight.len()]));
        }
        let s = self
            .value(x)
            .iter()
            .zip(anchor)
            .zip(weight)
            .map(|((&x, &a), &w)| w * (x - a) * (x - a))
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::WeightedSqDist {
                x,
                anchor: anchor.to_vec(),
                weight: weight.to_vec(),
            },
            vec![],
            vec![s],
            rg,
        ))
    }

    /// Closed-form `KL(N(mu, e^{2 log_sigma}) || N(prior_mu, e^{2 prior_log_sigma}))`
    /// summed over coordinates; the prior side is constant.
    pub fn kl_diag_gaussian(
        &mut self,
        mu: Var,
        log_sigma: Var,
        prior_mu: &[f64],
        prior_log_sigma: &[f64],
    ) -> Result<Var> {
        let n = self.value(mu).len();
        if self.shape(mu) != self.shape(log_sigma) || prior_mu.len() != n || prior_log_sigma.len() != n {
            return Err(Error::shape("kl_diag_gaussian", self.shape(mu), self.shape(log_sigma)));
        }
        let kl = kl_terms(self.value(mu), self.value(log_sigma), prior_mu, prior_log_sigma);
        let rg = self.rg(&[mu, log_sigma]);
        Ok(self.push(
            Op::KlDiagGaussian {
                mu,
                log_sigma,
                prior_mu: prior_mu.to_vec(),
                prior_log_sigma: prior_log_sigma.to_vec(),
            },
            vec![],
            vec![kl],
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::shape("backward", &ln.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, len: self.nodes.len() })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, &nodes[b.0].value, true, ga, true);
                }
                if wants(b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, gb, true);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(a) {
                    reduce_into(slot(grads, *a, nodes[a.0].value.len()), g, |_, gi| gi);
                }
                if wants(b) {
                    reduce_into(slot(grads, *b, nodes[b.0].value.len()), g, |_, gi| sign * gi);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (la, lb) = (va.len().max(1), vb.len().max(1));
                if wants(a) {
                    reduce_into(slot(grads, *a, va.len()), g, |i, gi| gi * vb[i % lb]);
                }
                if wants(b) {
                    reduce_into(slot(grads, *b, vb.len()), g, |i, gi| gi * va[i % la]);
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                pointwise(grads, *a, g.len(), |i| c * g[i]);
            }
            Op::AddScalar { a } => pointwise(grads, *a, g.len(), |i| g[i]),
            Op::Relu { a } => {
                let x = &nodes[a.0].value;
                pointwise(grads, *a, g.len(), |i| if x[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Exp { a } => {
                let y = &node.value;
                pointwise(grads, *a, g.len(), |i| g[i] * y[i]);
            }
            Op::Log { a } => {
                let x = &nodes[a.0].value;
                pointwise(grads, *a, g.len(), |i| g[i] / x[i]);
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                pointwise(grads, *a, g.len(), |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Square { a } => {
                let x = &nodes[a.0].value;
                pointwise(grads, *a, g.len(), |i| 2.0 * x[i] * g[i]);
            }
            Op::Sqrt { a } => {
                let y = &node.value;
                pointwise(grads, *a, g.len(), |i| g[i] / (2.0 * y[i]));
            }
            Op::Sum { a } => {
                let g0 = g[0];
                pointwise(grads, *a, nodes[a.0].value.len(), |_| g0);
            }
            Op::Mean { a } => {
                let gm = g[0] / nodes[a.0].value.len().max(1) as f64;
                pointwise(grads, *a, nodes[a.0].value.len(), |_| gm);
            }
            Op::RowSums { a, cols } => {
                let cols = (*cols).max(1);
                pointwise(grads, *a, nodes[a.0].value.len(), |i| g[i / cols]);
            }
            Op::SliceCols { a, start, width, cols } => {
                let (start, width, cols) = (*start, *width, *cols);
                let ga = slot(grads, *a, nodes[a.0].value.len());
                for (r, grow) in g.chunks(width.max(1)).enumerate() {
                    for (j, &gv) in grow.iter().enumerate() {
                        ga[r * cols + start + j] += gv;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
                classes,
            } => {
                let scale = g[0] / labels.len().max(1) as f64;
                let classes = *classes;
                pointwise(grads, *logits, probs.len(), |i| {
                    let (r, c) = (i / classes, i % classes);
                    let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                    scale * (probs[i] - onehot)
                });
            }
            Op::BernoulliLogLik { logits, targets, cols } => {
                let a = &nodes[logits.0].value;
                let cols = *cols;
                pointwise(grads, *logits, a.len(), |i| g[i / cols] * (targets[i] - sigmoid(a[i])));
            }
            Op::WeightedSqDist { x, anchor, weight } => {
                let xv = &nodes[x.0].value;
                let g0 = g[0];
                pointwise(grads, *x, xv.len(), |i| g0 * 2.0 * weight[i] * (xv[i] - anchor[i]));
            }
            Op::KlDiagGaussian {
                mu,
                log_sigma,
                prior_mu,
                prior_log_sigma,
            } => {
                let g0 = g[0];
                let (m, ls) = (&nodes[mu.0].value, &nodes[log_sigma.0].value);
                if wants(mu) {
                    pointwise(grads, *mu, m.len(), |i| {
                        g0 * (m[i] - prior_mu[i]) * (-2.0 * prior_log_sigma[i]).exp()
                    });
                }
                if wants(log_sigma) {
                    pointwise(grads, *log_sigma, ls.len(), |i| {
                        g0 * ((2.0 * (ls[i] - prior_log_sigma[i])).exp() - 1.0)
                    });
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `f(i)` into every entry of the gradient of `v`.
fn pointwise(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl Fn(usize) -> f64) {
    let gv = slot(grads, v, len);
    for (i, x) in gv.iter_mut().enumerate() {
        *x += f(i);
    }
}

/// Accumulates a possibly broadcast output gradient into a smaller input by
/// summing over the repeated leading axes.
fn reduce_into(target: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let n = target.len().max(1);
    for (i, &gi) in g.iter().enumerate() {
        target[i % n] += f(i, gi);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn kl_terms(mu: &[f64], log_sigma: &[f64], prior_mu: &[f64], prior_log_sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .zip(prior_mu.iter().zip(prior_log_sigma))
        .map(|((&m, &ls), (&pm, &pls))| {
            let ratio = (2.0 * (ls - pls)).exp();
            let d = m - pm;
            pls - ls + 0.5 * (ratio + d * d * (-2.0 * pls).exp()) - 0.5
        })
        .sum()
}

/// Gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    len: usize,
}

impl Gradients {
    /// Gradient with respect to `v`, zero if `v` is a differentiable node the
    /// loss does not reach. `None` for constants.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        if v.0 >= self.len || !graph.requires_grad(v) {
            return None;
        }
        let shape = graph.shape(v).to_vec();
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; shape.iter().product()],
        };
        Some(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(mat(&[vec![1.0, 2.0]]));
        let col = g.constant(mat(&[vec![3.0], vec![4.0]]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((g.value(c)[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.elementwise(ElementwiseOp::Relu, &[x]).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);

        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = g.elementwise(ElementwiseOp::Add, &[a, b]).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);

        let z = g.scalar(0.0);
        let sg = g.elementwise(ElementwiseOp::Sigmoid, &[z]).unwrap();
        assert_eq!(g.item(sg), 0.5);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let neg = g.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
        let zero = g.scalar(0.0);
        assert!(matches!(g.log(zero), Err(Error::Domain { .. })));
        assert!(g.elementwise(ElementwiseOp::Add, &[a]).is_err());
    }

    #[test]
    fn bias_broadcast_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let b = g.param(Tensor::vector(vec![10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(&[2, 4], 0.3));
        let loss = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.item(loss) - 4f64.ln()).abs() < 1e-12);

        // -log σ(20) = log(1 + e^-20)
        let l2 = g.constant(mat(&[vec![10.0, -10.0]]));
        let loss2 = g.softmax_cross_entropy(l2, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((g.item(loss2) - expected).abs() < 1e-20);
        // 40-digit reference: 2.0611536203143807032e-9
        assert!((g.item(loss2) - 2.061_153_620_314_380_7e-9).abs() < 1e-22);

        assert!(g.softmax_cross_entropy(l2, &[2]).is_err());
    }

    #[test]
    fn softmax_cross_entropy_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::randn(&[5, 3], &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let mut g = Graph::new();
        let a = g.constant(logits.clone());
        let la = g.softmax_cross_entropy(a, &labels).unwrap();
        let b = g.constant(logits.map(|x| x + 123.456));
        let lb = g.softmax_cross_entropy(b, &labels).unwrap();
        assert!((g.item(la) - g.item(lb)).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(-2.0));
        let c = g.constant(Tensor::scalar(1.0));
        let sq = g.square(x);
        let loss = g.add(sq, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(&g, x).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(&g, y).unwrap().data(), &[0.0]);
        assert!(grads.get(&g, c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.constant(Tensor::randn(&[4, 6], &mut rng));
            let w = g.param(Tensor::randn(&[6, 3], &mut rng));
            let h = g.matmul(x, w).unwrap();
            let h = g.sigmoid(h);
            let out = g.exp(h);
            g.value(out).to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::vector(vec![1.0]));
        let ls = g.param(Tensor::vector(vec![0.0]));
        let kl = g.kl_diag_gaussian(mu, ls, &[0.0], &[0.0]).unwrap();
        assert!((g.item(kl) - 0.5).abs() < 1e-15);
    }
}
