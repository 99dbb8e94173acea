//! Reverse-mode autodiff tape.
//!
//! Every layer forward in this crate is written once, against the tape, and
//! used both for inference (record, read the output, drop the tape) and for
//! training (record, then [`Tape::backward`]). A node stores its operation
//! and parent ids; values are computed eagerly at record time, so replaying
//! the tape forward reproduces the recorded outputs bitwise.
//!
//! Discrete choices (k-NN neighborhoods, farthest-point selections, argmax
//! indices in max pooling, nearest-neighbor assignments in the Chamfer loss)
//! are baked into the recording op as constants; gradients treat them as
//! locally fixed, the standard subgradient convention for piecewise-smooth
//! programs.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Real;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub trait TapeOp<F: Real>: fmt::Debug + Send + Sync {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F>;
    /// Gradients w.r.t. each input, given parent values, the recorded output
    /// and the output cotangent. Must return one tensor per input.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Vec<Tensor<F>>;
}

struct Node<F: Real> {
    op: Option<Box<dyn TapeOp<F>>>,
    parents: Vec<usize>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    values: Vec<Tensor<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: None,
            parents: Vec::new(),
        });
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Record an operation node and compute its value.
    pub fn apply(&mut self, op: impl TapeOp<F> + 'static, parents: &[Var]) -> Var {
        let inputs: Vec<&Tensor<F>> = parents.iter().map(|p| &self.values[p.0]).collect();
        let value = op.forward(&inputs);
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            parents: parents.iter().map(|p| p.0).collect(),
        });
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    /// True when recomputing every node from the leaves reproduces the
    /// recorded values bitwise.
    pub fn replay_matches(&self) -> bool {
        self.replay_values()
            .iter()
            .zip(&self.values)
            .all(|(a, b)| a == b)
    }

    /// Recompute every node from the leaves. Used to check the record/replay
    /// invariant: the result must equal the stored values bitwise.
    pub fn replay_values(&self) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                None => out.push(self.values[i].clone()),
                Some(op) => {
                    let inputs: Vec<&Tensor<F>> = node.parents.iter().map(|&p| &out[p]).collect();
                    out.push(op.forward(&inputs));
                }
            }
        }
        out
    }

    /// Reverse sweep from a scalar root. Returns per-node cotangents; nodes
    /// the root does not depend on stay `None`.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor<F>>>, TapeError> {
        if self.values[root.0].numel() != 1 {
            return Err(TapeError::NonScalarRoot(
                self.values[root.0].shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros(self.values[root.0].shape().to_vec());
        seed.data_mut()[0] = F::one();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<F>> =
                    node.parents.iter().map(|&p| &self.values[p]).collect();
                let parent_grads = op.backward(&inputs, &self.values[i], &grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Ok(grads)
    }
}

/// Gradients keyed by parameter id. Parameters the loss does not depend on
/// read back as exact zeros.
pub struct GradMap<F: Real> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Real> GradMap<F> {
    pub fn get(&self, id: ParamId, shape: &[usize]) -> Tensor<F> {
        match self.by_param.get(id.index()).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn add_from(&mut self, other: &GradMap<F>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(g),
                    none => *none = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn empty() -> Self {
        Self { by_param: Vec::new() }
    }
}

/// A tape bound to a parameter store: each parameter becomes a single leaf,
/// so its gradient accumulates across every use in the forward pass.
pub struct Session<'p, F: Real> {
    pub tape: Tape<F>,
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn apply(&mut self, op: impl TapeOp<F> + 'static, parents: &[Var]) -> Var {
        self.tape.apply(op, parents)
    }

    pub fn backward(&self, root: Var) -> Result<GradMap<F>, TapeError> {
        let node_grads = self.tape.backward(root)?;
        let mut by_param: Vec<Option<Tensor<F>>> = vec![None; self.bound.len()];
        for (pid, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                by_param[pid] = node_grads[v.0].clone();
            }
        }
        Ok(GradMap { by_param })
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// `Y[m] = W X[m]` with `W: [a,b]`, `X: [M,b,3]`.
#[derive(Debug)]
pub struct MatVecFeat;

impl<F: Real> TapeOp<F> for MatVecFeat {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (w, x) = (inputs[0], inputs[1]);
        let (a, b) = (w.shape()[0], w.shape()[1]);
        let m = x.shape()[0];
        assert_eq!(x.shape(), &[m, b, 3], "MatVecFeat: W {:?} vs X {:?}", w.shape(), x.shape());
        let (wd, xd) = (w.data(), x.data());
        let mut y = vec![F::zero(); m * a * 3];
        for mi in 0..m {
            let xm = &xd[mi * b * 3..(mi + 1) * b * 3];
            let ym = &mut y[mi * a * 3..(mi + 1) * a * 3];
            for i in 0..a {
                let wrow = &wd[i * b..(i + 1) * b];
                let (mut s0, mut s1, mut s2) = (F::zero(), F::zero(), F::zero());
                for j in 0..b {
                    let wij = wrow[j];
                    s0 += wij * xm[j * 3];
                    s1 += wij * xm[j * 3 + 1];
                    s2 += wij * xm[j * 3 + 2];
                }
                ym[i * 3] = s0;
                ym[i * 3 + 1] = s1;
                ym[i * 3 + 2] = s2;
            }
        }
        Tensor::new(vec![m, a, 3], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (w, x) = (inputs[0], inputs[1]);
        let (a, b) = (w.shape()[0], w.shape()[1]);
        let m = x.shape()[0];
        let (wd, xd, gd) = (w.data(), x.data(), g.data());
        let mut dw = vec![F::zero(); a * b];
        let mut dx = vec![F::zero(); m * b * 3];
        for mi in 0..m {
            let xm = &xd[mi * b * 3..(mi + 1) * b * 3];
            let gm = &gd[mi * a * 3..(mi + 1) * a * 3];
            let dxm = &mut dx[mi * b * 3..(mi + 1) * b * 3];
            for i in 0..a {
                let (g0, g1, g2) = (gm[i * 3], gm[i * 3 + 1], gm[i * 3 + 2]);
                let wrow = &wd[i * b..(i + 1) * b];
                let dwrow = &mut dw[i * b..(i + 1) * b];
                for j in 0..b {
                    dwrow[j] += g0 * xm[j * 3] + g1 * xm[j * 3 + 1] + g2 * xm[j * 3 + 2];
                    let wij = wrow[j];
                    dxm[j * 3] += wij * g0;
                    dxm[j * 3 + 1] += wij * g1;
                    dxm[j * 3 + 2] += wij * g2;
                }
            }
        }
        vec![Tensor::new(vec![a, b], dw), Tensor::new(vec![m, b, 3], dx)]
    }
}

#[derive(Debug)]
pub struct Add;

impl<F: Real> TapeOp<F> for Add {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        assert_eq!(x.shape(), y.shape());
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect(),
        )
    }

    fn backward(&self, _i: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![g.clone(), g.clone()]
    }
}

#[derive(Debug)]
pub struct Sub;

impl<F: Real> TapeOp<F> for Sub {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        assert_eq!(x.shape(), y.shape());
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&a, &b)| a - b).collect(),
        )
    }

    fn backward(&self, _i: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![g.clone(), g.map(|v| -v)]
    }
}

#[derive(Debug)]
pub struct Scale<F>(pub F);

impl<F: Real> TapeOp<F> for Scale<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| v * self.0)
    }

    fn backward(&self, _i: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![g.map(|v| v * self.0)]
    }
}

/// `X [M,a,3] + B [a,3]`, bias broadcast over tokens.
#[derive(Debug)]
pub struct AddBroadcastFeat;

impl<F: Real> TapeOp<F> for AddBroadcastFeat {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, b) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        let per = b.numel();
        assert_eq!(x.numel(), m * per);
        let mut y = x.data().to_vec();
        for mi in 0..m {
            for (k, &bv) in b.data().iter().enumerate() {
                y[mi * per + k] += bv;
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let b = inputs[1];
        let m = inputs[0].shape()[0];
        let per = b.numel();
        let mut db = vec![F::zero(); per];
        for mi in 0..m {
            for (k, slot) in db.iter_mut().enumerate() {
                *slot += g.data()[mi * per + k];
            }
        }
        vec![g.clone(), Tensor::new(b.shape().to_vec(), db)]
    }
}

/// Subtract the channel mean: `Y[m,d] = X[m,d] - mean_d X[m,d]` on `[M,D,3]`.
/// The centering matrix is symmetric, so backward re-applies it to the grad.
#[derive(Debug)]
pub struct CenterChannels;

fn center_channels_apply<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut y = xd.to_vec();
    let inv = F::one() / F::from_f64_lossy(d as f64);
    for mi in 0..m {
        let base = mi * d * 3;
        for c in 0..3 {
            let mut s = F::zero();
            for di in 0..d {
                s += xd[base + di * 3 + c];
            }
            let mean = s * inv;
            for di in 0..d {
                y[base + di * 3 + c] -= mean;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

impl<F: Real> TapeOp<F> for CenterChannels {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        assert_eq!(inputs[0].shape().len(), 3);
        center_channels_apply(inputs[0])
    }

    fn backward(&self, _i: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![center_channels_apply(g)]
    }
}

/// Mean over the token axis: `[M,D,3] -> [D,3]`.
#[derive(Debug)]
pub struct TokenMean;

impl<F: Real> TapeOp<F> for TokenMean {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let m = x.shape()[0];
        let per: usize = x.shape()[1..].iter().product();
        let inv = F::one() / F::from_f64_lossy(m as f64);
        let mut y = vec![F::zero(); per];
        for mi in 0..m {
            for k in 0..per {
                y[k] += x.data()[mi * per + k];
            }
        }
        for v in y.iter_mut() {
            *v *= inv;
        }
        Tensor::new(x.shape()[1..].to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let m = x.shape()[0];
        let per = g.numel();
        let inv = F::one() / F::from_f64_lossy(m as f64);
        let mut dx = vec![F::zero(); m * per];
        for mi in 0..m {
            for k in 0..per {
                dx[mi * per + k] = g.data()[k] * inv;
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Euclidean norm over the trailing axis of length 3: `[..,3] -> [..]`.
#[derive(Debug)]
pub struct RowNorms;

impl<F: Real> TapeOp<F> for RowNorms {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        assert_eq!(*x.shape().last().unwrap(), 3);
        let rows = x.numel() / 3;
        let mut y = Vec::with_capacity(rows);
        for r in 0..rows {
            let p = &x.data()[r * 3..r * 3 + 3];
            y.push((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
        Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let rows = x.numel() / 3;
        let tiny = F::from_f64_lossy(1e-300);
        let mut dx = vec![F::zero(); x.numel()];
        for r in 0..rows {
            let n = output.data()[r].max(tiny);
            let gr = g.data()[r] / n;
            for c in 0..3 {
                dx[r * 3 + c] = gr * x.data()[r * 3 + c];
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// `Y[..,d,:] = X[..,d,:] / max(n[..,d], eps)` on `[M,D,3]` by `[M,D]`.
#[derive(Debug)]
pub struct DivRowsGuarded<F>(pub F);

impl<F: Real> TapeOp<F> for DivRowsGuarded<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, n) = (inputs[0], inputs[1]);
        assert_eq!(x.numel(), n.numel() * 3);
        let mut y = x.data().to_vec();
        for r in 0..n.numel() {
            let d = n.data()[r].max(self.0);
            for c in 0..3 {
                y[r * 3 + c] /= d;
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, n) = (inputs[0], inputs[1]);
        let mut dx = vec![F::zero(); x.numel()];
        let mut dn = vec![F::zero(); n.numel()];
        for r in 0..n.numel() {
            let nr = n.data()[r];
            let d = nr.max(self.0);
            let mut dot = F::zero();
            for c in 0..3 {
                dx[r * 3 + c] = g.data()[r * 3 + c] / d;
                dot += g.data()[r * 3 + c] * x.data()[r * 3 + c];
            }
            // denominator clamped below eps: constant there, zero gradient
            if nr > self.0 {
                dn[r] = -dot / (d * d);
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(n.shape().to_vec(), dn),
        ]
    }
}

/// Row-wise scaling: `Y[..,d,:] = X[..,d,:] * s[..,d]`.
#[derive(Debug)]
pub struct MulRows;

impl<F: Real> TapeOp<F> for MulRows {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, s) = (inputs[0], inputs[1]);
        assert_eq!(x.numel(), s.numel() * 3);
        let mut y = x.data().to_vec();
        for r in 0..s.numel() {
            for c in 0..3 {
                y[r * 3 + c] *= s.data()[r];
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, s) = (inputs[0], inputs[1]);
        let mut dx = vec![F::zero(); x.numel()];
        let mut ds = vec![F::zero(); s.numel()];
        for r in 0..s.numel() {
            let sv = s.data()[r];
            let mut dot = F::zero();
            for c in 0..3 {
                dx[r * 3 + c] = g.data()[r * 3 + c] * sv;
                dot += g.data()[r * 3 + c] * x.data()[r * 3 + c];
            }
            ds[r] = dot;
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(s.shape().to_vec(), ds),
        ]
    }
}

/// Mean over the trailing axis: `[..,K] -> [..]`.
#[derive(Debug)]
pub struct MeanLast;

impl<F: Real> TapeOp<F> for MeanLast {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let k = *x.shape().last().unwrap();
        let rows = x.numel() / k;
        let inv = F::one() / F::from_f64_lossy(k as f64);
        let y: Vec<F> = (0..rows)
            .map(|r| x.data()[r * k..(r + 1) * k].iter().copied().sum::<F>() * inv)
            .collect();
        Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let k = *x.shape().last().unwrap();
        let inv = F::one() / F::from_f64_lossy(k as f64);
        let mut dx = vec![F::zero(); x.numel()];
        for r in 0..x.numel() / k {
            for j in 0..k {
                dx[r * k + j] = g.data()[r] * inv;
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// `Y[..,k] = X[..,k] - v[..]`, trailing-axis broadcast.
#[derive(Debug)]
pub struct BroadcastSubLast;

impl<F: Real> TapeOp<F> for BroadcastSubLast {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, v) = (inputs[0], inputs[1]);
        let k = *x.shape().last().unwrap();
        assert_eq!(x.numel(), v.numel() * k);
        let mut y = x.data().to_vec();
        for r in 0..v.numel() {
            for j in 0..k {
                y[r * k + j] -= v.data()[r];
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, v) = (inputs[0], inputs[1]);
        let k = *x.shape().last().unwrap();
        let mut dv = vec![F::zero(); v.numel()];
        for r in 0..v.numel() {
            for j in 0..k {
                dv[r] -= g.data()[r * k + j];
            }
        }
        let _ = x;
        vec![g.clone(), Tensor::new(v.shape().to_vec(), dv)]
    }
}

/// `Y[..,k] = X[..,k] / max(v[..], eps)`, trailing-axis broadcast.
#[derive(Debug)]
pub struct BroadcastDivLastGuarded<F>(pub F);

impl<F: Real> TapeOp<F> for BroadcastDivLastGuarded<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, v) = (inputs[0], inputs[1]);
        let k = *x.shape().last().unwrap();
        assert_eq!(x.numel(), v.numel() * k);
        let mut y = x.data().to_vec();
        for r in 0..v.numel() {
            let d = v.data()[r].max(self.0);
            for j in 0..k {
                y[r * k + j] /= d;
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, v) = (inputs[0], inputs[1]);
        let k = *x.shape().last().unwrap();
        let mut dx = vec![F::zero(); x.numel()];
        let mut dv = vec![F::zero(); v.numel()];
        for r in 0..v.numel() {
            let vr = v.data()[r];
            let d = vr.max(self.0);
            let mut dot = F::zero();
            for j in 0..k {
                dx[r * k + j] = g.data()[r * k + j] / d;
                dot += g.data()[r * k + j] * x.data()[r * k + j];
            }
            if vr > self.0 {
                dv[r] = -dot / (d * d);
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(v.shape().to_vec(), dv),
        ]
    }
}

#[derive(Debug)]
pub struct Square;

impl<F: Real> TapeOp<F> for Square {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| v * v)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let two = F::from_f64_lossy(2.0);
        let x = inputs[0];
        vec![Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(g.data()).map(|(&xv, &gv)| two * xv * gv).collect(),
        )]
    }
}

#[derive(Debug)]
pub struct Sqrt;

impl<F: Real> TapeOp<F> for Sqrt {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| v.sqrt())
    }

    fn backward(&self, _i: &[&Tensor<F>], output: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let tiny = F::from_f64_lossy(1e-300);
        let half = F::from_f64_lossy(0.5);
        vec![Tensor::new(
            output.shape().to_vec(),
            output
                .data()
                .iter()
                .zip(g.data())
                .map(|(&y, &gv)| half * gv / y.max(tiny))
                .collect(),
        )]
    }
}

#[derive(Debug)]
pub struct AddConst<F>(pub F);

impl<F: Real> TapeOp<F> for AddConst<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| v + self.0)
    }

    fn backward(&self, _i: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![g.clone()]
    }
}

/// `Y[..,k] = X[..,k] * p[k]` with a parameter vector on the trailing axis.
#[derive(Debug)]
pub struct MulBroadcastLast;

impl<F: Real> TapeOp<F> for MulBroadcastLast {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, p) = (inputs[0], inputs[1]);
        let k = p.numel();
        assert_eq!(*x.shape().last().unwrap(), k);
        let mut y = x.data().to_vec();
        for r in 0..x.numel() / k {
            for j in 0..k {
                y[r * k + j] *= p.data()[j];
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, p) = (inputs[0], inputs[1]);
        let k = p.numel();
        let mut dx = vec![F::zero(); x.numel()];
        let mut dp = vec![F::zero(); k];
        for r in 0..x.numel() / k {
            for j in 0..k {
                dx[r * k + j] = g.data()[r * k + j] * p.data()[j];
                dp[j] += g.data()[r * k + j] * x.data()[r * k + j];
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(p.shape().to_vec(), dp),
        ]
    }
}

/// `Y[..,k] = X[..,k] + p[k]`.
#[derive(Debug)]
pub struct AddBroadcastLast;

impl<F: Real> TapeOp<F> for AddBroadcastLast {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, p) = (inputs[0], inputs[1]);
        let k = p.numel();
        assert_eq!(*x.shape().last().unwrap(), k);
        let mut y = x.data().to_vec();
        for r in 0..x.numel() / k {
            for j in 0..k {
                y[r * k + j] += p.data()[j];
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let p = inputs[1];
        let k = p.numel();
        let mut dp = vec![F::zero(); k];
        for r in 0..inputs[0].numel() / k {
            for j in 0..k {
                dp[j] += g.data()[r * k + j];
            }
        }
        vec![g.clone(), Tensor::new(p.shape().to_vec(), dp)]
    }
}

/// Pairwise Frobenius inner products: `Q [Mq,D,3], K [Mk,D,3] -> [Mq,Mk]`,
/// scaled by a constant.
#[derive(Debug)]
pub struct FeatGram<F>(pub F);

impl<F: Real> TapeOp<F> for FeatGram<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (q, k) = (inputs[0], inputs[1]);
        let (mq, mk) = (q.shape()[0], k.shape()[0]);
        let per = q.numel() / mq;
        assert_eq!(per, k.numel() / mk);
        let mut y = vec![F::zero(); mq * mk];
        for i in 0..mq {
            let qi = &q.data()[i * per..(i + 1) * per];
            for j in 0..mk {
                let kj = &k.data()[j * per..(j + 1) * per];
                let mut s = F::zero();
                for c in 0..per {
                    s += qi[c] * kj[c];
                }
                y[i * mk + j] = s * self.0;
            }
        }
        Tensor::new(vec![mq, mk], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (q, k) = (inputs[0], inputs[1]);
        let (mq, mk) = (q.shape()[0], k.shape()[0]);
        let per = q.numel() / mq;
        let mut dq = vec![F::zero(); q.numel()];
        let mut dk = vec![F::zero(); k.numel()];
        for i in 0..mq {
            for j in 0..mk {
                let gij = g.data()[i * mk + j] * self.0;
                for c in 0..per {
                    dq[i * per + c] += gij * k.data()[j * per + c];
                    dk[j * per + c] += gij * q.data()[i * per + c];
                }
            }
        }
        vec![
            Tensor::new(q.shape().to_vec(), dq),
            Tensor::new(k.shape().to_vec(), dk),
        ]
    }
}

/// Row-wise softmax with max subtraction, on `[M,N]`.
#[derive(Debug)]
pub struct SoftmaxRows;

impl<F: Real> TapeOp<F> for SoftmaxRows {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let n = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for r in 0..x.numel() / n {
            let row = &mut y[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, _i: &[&Tensor<F>], output: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let n = *output.shape().last().unwrap();
        let mut dx = vec![F::zero(); output.numel()];
        for r in 0..output.numel() / n {
            let yr = &output.data()[r * n..(r + 1) * n];
            let gr = &g.data()[r * n..(r + 1) * n];
            let dot: F = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
            for j in 0..n {
                dx[r * n + j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Tensor::new(output.shape().to_vec(), dx)]
    }
}

/// Attention mix: `A [Mq,Mk] x V [Mk,D,3] -> [Mq,D,3]`.
#[derive(Debug)]
pub struct AttnMix;

impl<F: Real> TapeOp<F> for AttnMix {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (a, v) = (inputs[0], inputs[1]);
        let (mq, mk) = (a.shape()[0], a.shape()[1]);
        let per = v.numel() / v.shape()[0];
        assert_eq!(v.shape()[0], mk);
        let mut y = vec![F::zero(); mq * per];
        for i in 0..mq {
            for j in 0..mk {
                let aij = a.data()[i * mk + j];
                if aij == F::zero() {
                    continue;
                }
                for c in 0..per {
                    y[i * per + c] += aij * v.data()[j * per + c];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = mq;
        Tensor::new(shape, y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (a, v) = (inputs[0], inputs[1]);
        let (mq, mk) = (a.shape()[0], a.shape()[1]);
        let per = v.numel() / mk;
        let mut da = vec![F::zero(); mq * mk];
        let mut dv = vec![F::zero(); v.numel()];
        for i in 0..mq {
            for j in 0..mk {
                let aij = a.data()[i * mk + j];
                let mut dot = F::zero();
                for c in 0..per {
                    dot += g.data()[i * per + c] * v.data()[j * per + c];
                    dv[j * per + c] += aij * g.data()[i * per + c];
                }
                da[i * mk + j] = dot;
            }
        }
        vec![
            Tensor::new(a.shape().to_vec(), da),
            Tensor::new(v.shape().to_vec(), dv),
        ]
    }
}

/// Concatenate along the channel axis: `[M,D1,3] (+) [M,D2,3] -> [M,D1+D2,3]`.
#[derive(Debug)]
pub struct ConcatChannels;

impl<F: Real> TapeOp<F> for ConcatChannels {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        assert_eq!(y.shape()[0], m);
        let (d1, d2) = (x.shape()[1], y.shape()[1]);
        let mut out = Vec::with_capacity((d1 + d2) * m * 3);
        for mi in 0..m {
            out.extend_from_slice(&x.data()[mi * d1 * 3..(mi + 1) * d1 * 3]);
            out.extend_from_slice(&y.data()[mi * d2 * 3..(mi + 1) * d2 * 3]);
        }
        Tensor::new(vec![m, d1 + d2, 3], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, y) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        let (d1, d2) = (x.shape()[1], y.shape()[1]);
        let mut dx = Vec::with_capacity(x.numel());
        let mut dy = Vec::with_capacity(y.numel());
        for mi in 0..m {
            let base = mi * (d1 + d2) * 3;
            dx.extend_from_slice(&g.data()[base..base + d1 * 3]);
            dy.extend_from_slice(&g.data()[base + d1 * 3..base + (d1 + d2) * 3]);
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(y.shape().to_vec(), dy),
        ]
    }
}

/// Concatenate along the leading axis.
#[derive(Debug)]
pub struct ConcatRows;

impl<F: Real> TapeOp<F> for ConcatRows {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        assert_eq!(x.shape()[1..], y.shape()[1..]);
        let mut out = x.data().to_vec();
        out.extend_from_slice(y.data());
        let mut shape = x.shape().to_vec();
        shape[0] += y.shape()[0];
        Tensor::new(shape, out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, y) = (inputs[0], inputs[1]);
        let nx = x.numel();
        vec![
            Tensor::new(x.shape().to_vec(), g.data()[..nx].to_vec()),
            Tensor::new(y.shape().to_vec(), g.data()[nx..].to_vec()),
        ]
    }
}

/// Gather rows (leading axis) by a fixed index list; backward scatter-adds.
#[derive(Debug)]
pub struct GatherRows(pub Vec<usize>);

impl<F: Real> TapeOp<F> for GatherRows {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let m = x.shape()[0];
        let per = x.numel() / m;
        let mut out = Vec::with_capacity(self.0.len() * per);
        for &i in &self.0 {
            debug_assert!(i < m);
            out.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = self.0.len();
        Tensor::new(shape, out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let m = x.shape()[0];
        let per = x.numel() / m;
        let mut dx = vec![F::zero(); x.numel()];
        for (r, &i) in self.0.iter().enumerate() {
            for c in 0..per {
                dx[i * per + c] += g.data()[r * per + c];
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Channel-wise selection over fixed groups of tokens, the pooling step of
/// VN-Max: input `[G*group,D,3]`, `idx[g*D+d]` picks the winner within group
/// `g` for channel `d`; output `[G,D,3]`.
#[derive(Debug)]
pub struct SelectChannelGroups {
    pub group: usize,
    pub idx: Vec<usize>,
}

impl<F: Real> TapeOp<F> for SelectChannelGroups {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let (m, d) = (x.shape()[0], x.shape()[1]);
        assert_eq!(m % self.group, 0);
        let groups = m / self.group;
        assert_eq!(Vec::len(&self.idx), groups * d);
        let mut out = vec![F::zero(); groups * d * 3];
        for gi in 0..groups {
            for di in 0..d {
                let tok = gi * self.group + self.idx[gi * d + di];
                let src = tok * d * 3 + di * 3;
                let dst = gi * d * 3 + di * 3;
                out[dst..dst + 3].copy_from_slice(&x.data()[src..src + 3]);
            }
        }
        Tensor::new(vec![groups, d, 3], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let d = x.shape()[1];
        let groups = x.shape()[0] / self.group;
        let mut dx = vec![F::zero(); x.numel()];
        for gi in 0..groups {
            for di in 0..d {
                let tok = gi * self.group + self.idx[gi * d + di];
                let src = gi * d * 3 + di * 3;
                let dst = tok * d * 3 + di * 3;
                for c in 0..3 {
                    dx[dst + c] += g.data()[src + c];
                }
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Elementwise max over fixed groups of rows (scalar max pooling):
/// `[G*group,C] -> [G,C]` with recorded argmax indices.
#[derive(Debug)]
pub struct MaxGroupsElem {
    pub group: usize,
    pub idx: Vec<usize>,
}

impl<F: Real> TapeOp<F> for MaxGroupsElem {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let (m, c) = (x.shape()[0], x.shape()[1]);
        let groups = m / self.group;
        let mut out = vec![F::zero(); groups * c];
        for gi in 0..groups {
            for ci in 0..c {
                let tok = gi * self.group + self.idx[gi * c + ci];
                out[gi * c + ci] = x.data()[tok * c + ci];
            }
        }
        Tensor::new(vec![groups, c], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let c = x.shape()[1];
        let groups = x.shape()[0] / self.group;
        let mut dx = vec![F::zero(); x.numel()];
        for gi in 0..groups {
            for ci in 0..c {
                let tok = gi * self.group + self.idx[gi * c + ci];
                dx[tok * c + ci] += g.data()[gi * c + ci];
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Per-token Frobenius inner product: `X,Y [M,D,3] -> [M]`.
#[derive(Debug)]
pub struct FrobDotTokens;

impl<F: Real> TapeOp<F> for FrobDotTokens {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        assert_eq!(x.shape(), y.shape());
        let m = x.shape()[0];
        let per = x.numel() / m;
        let out: Vec<F> = (0..m)
            .map(|mi| {
                let mut s = F::zero();
                for c in 0..per {
                    s += x.data()[mi * per + c] * y.data()[mi * per + c];
                }
                s
            })
            .collect();
        Tensor::new(vec![m], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, y) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        let per = x.numel() / m;
        let mut dx = vec![F::zero(); x.numel()];
        let mut dy = vec![F::zero(); y.numel()];
        for mi in 0..m {
            let gm = g.data()[mi];
            for c in 0..per {
                dx[mi * per + c] = gm * y.data()[mi * per + c];
                dy[mi * per + c] = gm * x.data()[mi * per + c];
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(y.shape().to_vec(), dy),
        ]
    }
}

/// `y = min(x, 0)` elementwise; subgradient passes only where `x < 0`.
#[derive(Debug)]
pub struct NegPart;

impl<F: Real> TapeOp<F> for NegPart {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| v.min(F::zero()))
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        vec![Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv < F::zero() { gv } else { F::zero() })
                .collect(),
        )]
    }
}

/// `y[m] = num[m] / densq[m]`, forced to zero when `sqrt(densq) < eps`
/// (the degenerate-direction guard of the vector nonlinearity).
#[derive(Debug)]
pub struct GuardedRatio<F>(pub F);

impl<F: Real> TapeOp<F> for GuardedRatio<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (num, den) = (inputs[0], inputs[1]);
        let cutoff = self.0 * self.0;
        Tensor::new(
            num.shape().to_vec(),
            num.data()
                .iter()
                .zip(den.data())
                .map(|(&n, &d)| if d < cutoff { F::zero() } else { n / d })
                .collect(),
        )
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (num, den) = (inputs[0], inputs[1]);
        let cutoff = self.0 * self.0;
        let mut dn = vec![F::zero(); num.numel()];
        let mut dd = vec![F::zero(); den.numel()];
        for i in 0..num.numel() {
            let d = den.data()[i];
            if d >= cutoff {
                dn[i] = g.data()[i] / d;
                dd[i] = -g.data()[i] * num.data()[i] / (d * d);
            }
        }
        vec![
            Tensor::new(num.shape().to_vec(), dn),
            Tensor::new(den.shape().to_vec(), dd),
        ]
    }
}

/// Scale each token by a per-token coefficient: `X [M,D,3] * c [M]`.
#[derive(Debug)]
pub struct MulTokens;

impl<F: Real> TapeOp<F> for MulTokens {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, c) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        assert_eq!(c.numel(), m);
        let per = x.numel() / m;
        let mut y = x.data().to_vec();
        for mi in 0..m {
            for k in 0..per {
                y[mi * per + k] *= c.data()[mi];
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, c) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        let per = x.numel() / m;
        let mut dx = vec![F::zero(); x.numel()];
        let mut dc = vec![F::zero(); m];
        for mi in 0..m {
            let cv = c.data()[mi];
            let mut dot = F::zero();
            for k in 0..per {
                dx[mi * per + k] = g.data()[mi * per + k] * cv;
                dot += g.data()[mi * per + k] * x.data()[mi * per + k];
            }
            dc[mi] = dot;
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(c.shape().to_vec(), dc),
        ]
    }
}

/// Multiply a tensor by a scalar variable.
#[derive(Debug)]
pub struct MulScalar;

impl<F: Real> TapeOp<F> for MulScalar {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, s) = (inputs[0], inputs[1]);
        let sv = s.item();
        x.map(|v| v * sv)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, s) = (inputs[0], inputs[1]);
        let sv = s.item();
        let ds: F = x.data().iter().zip(g.data()).map(|(&xv, &gv)| xv * gv).sum();
        vec![g.map(|v| v * sv), Tensor::new(s.shape().to_vec(), vec![ds])]
    }
}

#[derive(Debug)]
pub struct Reshape(pub Vec<usize>);

impl<F: Real> TapeOp<F> for Reshape {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].clone().reshaped(self.0.clone())
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        vec![g.clone().reshaped(inputs[0].shape().to_vec())]
    }
}

/// Extract one vector channel: `[M,D,3] -> [M,3]`.
#[derive(Debug)]
pub struct SliceChannel(pub usize);

impl<F: Real> TapeOp<F> for SliceChannel {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let (m, d) = (x.shape()[0], x.shape()[1]);
        assert!(self.0 < d);
        let mut y = Vec::with_capacity(m * 3);
        for mi in 0..m {
            let base = mi * d * 3 + self.0 * 3;
            y.extend_from_slice(&x.data()[base..base + 3]);
        }
        Tensor::new(vec![m, 3], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let (m, d) = (x.shape()[0], x.shape()[1]);
        let mut dx = vec![F::zero(); x.numel()];
        for mi in 0..m {
            let base = mi * d * 3 + self.0 * 3;
            for c in 0..3 {
                dx[base + c] = g.data()[mi * 3 + c];
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Lift points to D identical vector channels: `[M,3] -> [M,D,3]`.
#[derive(Debug)]
pub struct LiftRepeat(pub usize);

impl<F: Real> TapeOp<F> for LiftRepeat {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let m = x.shape()[0];
        let mut y = Vec::with_capacity(m * self.0 * 3);
        for mi in 0..m {
            for _ in 0..self.0 {
                y.extend_from_slice(&x.data()[mi * 3..mi * 3 + 3]);
            }
        }
        Tensor::new(vec![m, self.0, 3], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let m = x.shape()[0];
        let mut dx = vec![F::zero(); m * 3];
        for mi in 0..m {
            for di in 0..self.0 {
                for c in 0..3 {
                    dx[mi * 3 + c] += g.data()[mi * self.0 * 3 + di * 3 + c];
                }
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Scalar linear map: `X [M,b] W^T -> [M,a]` with `W: [a,b]`.
#[derive(Debug)]
pub struct LinearNT;

impl<F: Real> TapeOp<F> for LinearNT {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, w) = (inputs[0], inputs[1]);
        let (m, b) = (x.shape()[0], x.shape()[1]);
        let a = w.shape()[0];
        assert_eq!(w.shape()[1], b);
        let mut y = vec![F::zero(); m * a];
        for mi in 0..m {
            let xm = &x.data()[mi * b..(mi + 1) * b];
            for i in 0..a {
                let wrow = &w.data()[i * b..(i + 1) * b];
                let mut s = F::zero();
                for j in 0..b {
                    s += xm[j] * wrow[j];
                }
                y[mi * a + i] = s;
            }
        }
        Tensor::new(vec![m, a], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (m, b) = (x.shape()[0], x.shape()[1]);
        let a = w.shape()[0];
        let mut dx = vec![F::zero(); m * b];
        let mut dw = vec![F::zero(); a * b];
        for mi in 0..m {
            for i in 0..a {
                let gv = g.data()[mi * a + i];
                for j in 0..b {
                    dx[mi * b + j] += gv * w.data()[i * b + j];
                    dw[i * b + j] += gv * x.data()[mi * b + j];
                }
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(w.shape().to_vec(), dw),
        ]
    }
}

/// `X [M,C] Y^T [N,C] -> [M,N]`, scaled; scalar attention logits.
#[derive(Debug)]
pub struct MatMulNT<F>(pub F);

impl<F: Real> TapeOp<F> for MatMulNT<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        let (m, c) = (x.shape()[0], x.shape()[1]);
        let n = y.shape()[0];
        assert_eq!(y.shape()[1], c);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = F::zero();
                for k in 0..c {
                    s += x.data()[i * c + k] * y.data()[j * c + k];
                }
                out[i * n + j] = s * self.0;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (m, c) = (x.shape()[0], x.shape()[1]);
        let n = y.shape()[0];
        let mut dx = vec![F::zero(); m * c];
        let mut dy = vec![F::zero(); n * c];
        for i in 0..m {
            for j in 0..n {
                let gv = g.data()[i * n + j] * self.0;
                for k in 0..c {
                    dx[i * c + k] += gv * y.data()[j * c + k];
                    dy[j * c + k] += gv * x.data()[i * c + k];
                }
            }
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(y.shape().to_vec(), dy),
        ]
    }
}

/// `A [M,K] x B [K,C] -> [M,C]`; scalar attention mixing.
#[derive(Debug)]
pub struct MatMul;

impl<F: Real> TapeOp<F> for MatMul {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let c = b.shape()[1];
        assert_eq!(b.shape()[0], k);
        let mut y = vec![F::zero(); m * c];
        for i in 0..m {
            for j in 0..k {
                let av = a.data()[i * k + j];
                if av == F::zero() {
                    continue;
                }
                for l in 0..c {
                    y[i * c + l] += av * b.data()[j * c + l];
                }
            }
        }
        Tensor::new(vec![m, c], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let c = b.shape()[1];
        let mut da = vec![F::zero(); m * k];
        let mut db = vec![F::zero(); k * c];
        for i in 0..m {
            for j in 0..k {
                let mut dot = F::zero();
                let av = a.data()[i * k + j];
                for l in 0..c {
                    dot += g.data()[i * c + l] * b.data()[j * c + l];
                    db[j * c + l] += av * g.data()[i * c + l];
                }
                da[i * k + j] = dot;
            }
        }
        vec![
            Tensor::new(a.shape().to_vec(), da),
            Tensor::new(b.shape().to_vec(), db),
        ]
    }
}

#[derive(Debug)]
pub struct LeakyReluElem<F>(pub F);

impl<F: Real> TapeOp<F> for LeakyReluElem<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        inputs[0].map(|v| if v >= F::zero() { v } else { v * self.0 })
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        vec![Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv >= F::zero() { gv } else { gv * self.0 })
                .collect(),
        )]
    }
}

/// Mean of all elements -> scalar.
#[derive(Debug)]
pub struct MeanAll;

impl<F: Real> TapeOp<F> for MeanAll {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let inv = F::one() / F::from_f64_lossy(x.numel() as f64);
        Tensor::scalar(x.data().iter().copied().sum::<F>() * inv)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let gv = g.item() / F::from_f64_lossy(x.numel() as f64);
        vec![Tensor::new(x.shape().to_vec(), vec![gv; x.numel()])]
    }
}

/// Row-sum-to-one reparameterization: each row gets `(1 - sum)/n` added to
/// every entry, so the output rows sum to one exactly (up to rounding).
#[derive(Debug)]
pub struct ProjectRowsAffine;

pub fn project_rows_affine_values<F: Real>(w: &Tensor<F>) -> Tensor<F> {
    let (a, b) = (w.shape()[0], w.shape()[1]);
    let inv = F::one() / F::from_f64_lossy(b as f64);
    let mut y = w.data().to_vec();
    for i in 0..a {
        let row = &mut y[i * b..(i + 1) * b];
        let s: F = row.iter().copied().sum();
        let shift = (F::one() - s) * inv;
        for v in row.iter_mut() {
            *v += shift;
        }
    }
    Tensor::new(vec![a, b], y)
}

impl<F: Real> TapeOp<F> for ProjectRowsAffine {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        project_rows_affine_values(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        // d/dw_ik [w_ij + (1 - sum_j w_ij)/n] = delta_jk - 1/n: row-center the grad
        let w = inputs[0];
        let (a, b) = (w.shape()[0], w.shape()[1]);
        let inv = F::one() / F::from_f64_lossy(b as f64);
        let mut dw = g.data().to_vec();
        for i in 0..a {
            let row = &mut dw[i * b..(i + 1) * b];
            let mean: F = row.iter().copied().sum::<F>() * inv;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        vec![Tensor::new(w.shape().to_vec(), dw)]
    }
}

/// Normalize a `[D,3]` direction matrix to unit Frobenius norm and scale by
/// a fixed magnitude: the norm-controlled bias of VN-Linear.
#[derive(Debug)]
pub struct UnitFrobScale<F>(pub F);

impl<F: Real> TapeOp<F> for UnitFrobScale<F> {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let eps = F::from_f64_lossy(1e-12);
        let n = x.frob_norm().max(eps);
        x.map(|v| v * self.0 / n)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let eps = F::from_f64_lossy(1e-12);
        let n = x.frob_norm().max(eps);
        let dot: F = x.data().iter().zip(g.data()).map(|(&xv, &gv)| xv * gv).sum();
        let n3 = n * n * n;
        vec![Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| self.0 * (gv / n - xv * dot / n3))
                .collect(),
        )]
    }
}

/// Slice a channel range: `[M,D,3] -> [M,len,3]`; the head split of
/// multi-head attention.
#[derive(Debug)]
pub struct SliceChannels {
    pub start: usize,
    pub len: usize,
}

impl<F: Real> TapeOp<F> for SliceChannels {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let (m, d) = (x.shape()[0], x.shape()[1]);
        assert!(self.start + self.len <= d);
        let mut y = Vec::with_capacity(m * self.len * 3);
        for mi in 0..m {
            let base = mi * d * 3 + self.start * 3;
            y.extend_from_slice(&x.data()[base..base + self.len * 3]);
        }
        Tensor::new(vec![m, self.len, 3], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let (m, d) = (x.shape()[0], x.shape()[1]);
        let mut dx = vec![F::zero(); x.numel()];
        for mi in 0..m {
            let base = mi * d * 3 + self.start * 3;
            let src = mi * self.len * 3;
            dx[base..base + self.len * 3].copy_from_slice(&g.data()[src..src + self.len * 3]);
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Slice a column range of a rank-2 tensor: `[M,C] -> [M,len]`.
#[derive(Debug)]
pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}

impl<F: Real> TapeOp<F> for SliceCols {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let (m, c) = (x.shape()[0], x.shape()[1]);
        assert!(self.start + self.len <= c);
        let mut y = Vec::with_capacity(m * self.len);
        for mi in 0..m {
            let base = mi * c + self.start;
            y.extend_from_slice(&x.data()[base..base + self.len]);
        }
        Tensor::new(vec![m, self.len], y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let (m, c) = (x.shape()[0], x.shape()[1]);
        let mut dx = vec![F::zero(); x.numel()];
        for mi in 0..m {
            let base = mi * c + self.start;
            dx[base..base + self.len].copy_from_slice(&g.data()[mi * self.len..(mi + 1) * self.len]);
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Concatenate rank-2 tensors along the trailing axis: `[M,C1] (+) [M,C2]`.
#[derive(Debug)]
pub struct ConcatCols;

impl<F: Real> TapeOp<F> for ConcatCols {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, y) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        assert_eq!(y.shape()[0], m);
        let (c1, c2) = (x.shape()[1], y.shape()[1]);
        let mut out = Vec::with_capacity(m * (c1 + c2));
        for mi in 0..m {
            out.extend_from_slice(&x.data()[mi * c1..(mi + 1) * c1]);
            out.extend_from_slice(&y.data()[mi * c2..(mi + 1) * c2]);
        }
        Tensor::new(vec![m, c1 + c2], out)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, y) = (inputs[0], inputs[1]);
        let m = x.shape()[0];
        let (c1, c2) = (x.shape()[1], y.shape()[1]);
        let mut dx = Vec::with_capacity(m * c1);
        let mut dy = Vec::with_capacity(m * c2);
        for mi in 0..m {
            let base = mi * (c1 + c2);
            dx.extend_from_slice(&g.data()[base..base + c1]);
            dy.extend_from_slice(&g.data()[base + c1..base + c1 + c2]);
        }
        vec![
            Tensor::new(x.shape().to_vec(), dx),
            Tensor::new(y.shape().to_vec(), dy),
        ]
    }
}

/// Mean over fixed consecutive groups of rows: `[G*group, ...] -> [G, ...]`.
#[derive(Debug)]
pub struct MeanGroups(pub usize);

impl<F: Real> TapeOp<F> for MeanGroups {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let x = inputs[0];
        let m = x.shape()[0];
        assert_eq!(m % self.0, 0);
        let groups = m / self.0;
        let per = x.numel() / m;
        let inv = F::one() / F::from_f64_lossy(self.0 as f64);
        let mut y = vec![F::zero(); groups * per];
        for mi in 0..m {
            let gi = mi / self.0;
            for c in 0..per {
                y[gi * per + c] += x.data()[mi * per + c];
            }
        }
        for v in y.iter_mut() {
            *v *= inv;
        }
        let mut shape = x.shape().to_vec();
        shape[0] = groups;
        Tensor::new(shape, y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let x = inputs[0];
        let m = x.shape()[0];
        let per = x.numel() / m;
        let inv = F::one() / F::from_f64_lossy(self.0 as f64);
        let mut dx = vec![F::zero(); x.numel()];
        for mi in 0..m {
            let gi = mi / self.0;
            for c in 0..per {
                dx[mi * per + c] = g.data()[gi * per + c] * inv;
            }
        }
        vec![Tensor::new(x.shape().to_vec(), dx)]
    }
}

/// Add a per-token anchor point to every offset: `X [M,K,3] + a [M,3]`.
#[derive(Debug)]
pub struct AddTokenAnchors;

impl<F: Real> TapeOp<F> for AddTokenAnchors {
    fn forward(&self, inputs: &[&Tensor<F>]) -> Tensor<F> {
        let (x, a) = (inputs[0], inputs[1]);
        let (m, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(a.shape(), &[m, 3]);
        let mut y = x.data().to_vec();
        for mi in 0..m {
            for ki in 0..k {
                for c in 0..3 {
                    y[mi * k * 3 + ki * 3 + c] += a.data()[mi * 3 + c];
                }
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&self, inputs: &[&Tensor<F>], _o: &Tensor<F>, g: &Tensor<F>) -> Vec<Tensor<F>> {
        let (x, a) = (inputs[0], inputs[1]);
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let mut da = vec![F::zero(); m * 3];
        for mi in 0..m {
            for ki in 0..k {
                for c in 0..3 {
                    da[mi * 3 + c] += g.data()[mi * k * 3 + ki * 3 + c];
                }
            }
        }
        vec![g.clone(), Tensor::new(a.shape().to_vec(), da)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_linear_in_x_is_weight() {
        // f(w) = <w, x> with fixed x: gradient is x
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]));
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]));
        let dot = tape.apply(FrobDotTokens, &[w, x]);
        let out = tape.apply(MeanAll, &[dot]);
        let grads = tape.backward(out).unwrap();
        let dw = grads[w.0].as_ref().unwrap();
        assert_eq!(dw.data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn non_scalar_root_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn replay_is_bitwise() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.37).collect()));
        let c = tape.apply(CenterChannels, &[x]);
        let n = tape.apply(RowNorms, &[c]);
        let m = tape.apply(MeanAll, &[n]);
        let replayed = tape.replay_values();
        for (a, b) in replayed.iter().zip(&tape.values) {
            assert_eq!(a, b);
        }
        let _ = m;
    }

    #[test]
    fn unused_params_have_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        let used = store.register("used", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]), true);
        let unused = store.register("unused", Tensor::new(vec![2], vec![5.0, 6.0]), true);
        let mut s = Session::new(&store);
        let w = s.param(used);
        let _also_bound = s.param(unused);
        let sq = s.apply(Square, &[w]);
        let out = s.apply(MeanAll, &[sq]);
        let grads = s.backward(out).unwrap();
        assert_eq!(grads.get(unused, &[2]).data(), &[0.0, 0.0]);
        assert!(grads.get(used, &[1, 3]).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn project_rows_affine_rows_sum_to_one() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, -1.0]);
        let p = project_rows_affine_values(&w);
        assert_eq!(p.data(), &[0.5, 0.5, 2.5, -1.5]);
        for i in 0..2 {
            let s: f64 = p.data()[i * 2..(i + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
