//! Reverse-mode autodiff on an append-only tape.
//!
//! Operations execute eagerly and record a node per result; parents always
//! precede children, so one reverse sweep propagates adjoints. Working values
//! and gradients live in 64-bit arenas; parameters enter as 32-bit leaves.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamId, Tensor};

/// Handle to one node of a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Rollback point returned by [`Tape::mark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeMark {
    nodes: usize,
    values: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = mul * x + add with compile-time constants.
    Affine { x: Var, mul: f64 },
    /// y = v * s, s a scalar node.
    MulScalar { v: Var, s: Var },
    /// y = v / s, s a scalar node.
    DivScalar { v: Var, s: Var },
    /// y = W x + b.
    Linear { w: Var, b: Var, x: Var },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    /// y = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)].
    PosEnc { x: Var, freqs: u32 },
    Concat2(Var, Var),
    Concat3(Var, Var, Var),
    /// Sum of all elements -> scalar.
    Sum(Var),
    Abs(Var),
    /// Euclidean norm -> scalar.
    Norm2(Var),
    /// -log softmax(logits)[label] -> scalar.
    CrossEntropy { logits: Var, label: u32 },
}

struct Node {
    op: Op,
    start: u32,
    len: u32,
    needs_grad: bool,
}

/// Append-only autodiff tape. Reusable across forward passes via [`Tape::reset`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    grads: Vec<f64>,
    /// Cache of parameter leaves, indexed by [`ParamId`].
    param_nodes: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Forget all nodes but keep allocated capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.grads.clear();
        self.param_nodes.iter_mut().for_each(|n| *n = None);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Snapshot the tape's extent so later work can be rolled back while
    /// keeping earlier nodes (typically cached parameter leaves) alive.
    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            values: self.values.len(),
        }
    }

    /// Drop everything recorded after `mark`. Parameter leaves created
    /// before the mark stay cached; later ones are forgotten.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.values.truncate(mark.values);
        self.grads.truncate(mark.values.min(self.grads.len()));
        for slot in self.param_nodes.iter_mut() {
            if let Some(v) = slot {
                if v.0 as usize >= mark.nodes {
                    *slot = None;
                }
            }
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.values[n.start as usize..(n.start + n.len) as usize]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let s = self.value(v);
        debug_assert_eq!(s.len(), 1);
        s[0]
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.grads[n.start as usize..(n.start + n.len) as usize]
    }

    fn push(&mut self, op: Op, value: &[f64], needs_grad: bool) -> Var {
        let start = self.values.len() as u32;
        self.values.extend_from_slice(value);
        self.nodes.push(Node {
            op,
            start,
            len: value.len() as u32,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Push a node whose value is built in place to avoid a temporary.
    fn push_with(&mut self, op: Op, len: usize, needs_grad: bool, fill: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let (prev, out) = self.values.split_at_mut(start);
        fill(prev, out);
        self.nodes.push(Node {
            op,
            start: start as u32,
            len: len as u32,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0 as usize].len as usize
    }

    fn span(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0 as usize];
        (n.start as usize, n.len as usize)
    }

    // ---- leaves ----

    /// Constant leaf; no gradient flows into it.
    pub fn leaf(&mut self, value: &[f64]) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf_f32(&mut self, value: &[f32]) -> Var {
        let start = self.values.len();
        self.values.extend(value.iter().map(|&v| v as f64));
        self.nodes.push(Node {
            op: Op::Leaf,
            start: start as u32,
            len: value.len() as u32,
            needs_grad: false,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, &[value], false)
    }

    /// Parameter leaf; registered once per tape and cached by id.
    pub fn param(&mut self, p: &Param) -> Var {
        if p.id >= self.param_nodes.len() {
            self.param_nodes.resize(p.id + 1, None);
        }
        if let Some(v) = self.param_nodes[p.id] {
            return v;
        }
        let start = self.values.len();
        self.values.extend(p.value.data.iter().map(|&v| v as f64));
        self.nodes.push(Node {
            op: Op::Leaf,
            start: start as u32,
            len: p.value.data.len() as u32,
            needs_grad: p.value.requires_grad,
        });
        let v = Var(self.nodes.len() as u32 - 1);
        self.param_nodes[p.id] = v.into();
        v
    }

    // ---- elementwise and scalar ops ----

    fn check_same_len(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.len_of(a) != self.len_of(b) {
            return Err(Error::ShapeMismatch {
                context: what.into(),
                expected: vec![self.len_of(a)],
                got: vec![self.len_of(b)],
            });
        }
        Ok(())
    }

    fn check_scalar(&self, what: &str, s: Var) -> Result<()> {
        if self.len_of(s) != 1 {
            return Err(Error::ShapeMismatch {
                context: what.into(),
                expected: vec![1],
                got: vec![self.len_of(s)],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len("add", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, n) = self.span(a);
        let (sb, _) = self.span(b);
        Ok(self.push_with(Op::Add(a, b), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sa + i] + prev[sb + i];
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len("sub", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, n) = self.span(a);
        let (sb, _) = self.span(b);
        Ok(self.push_with(Op::Sub(a, b), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sa + i] - prev[sb + i];
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len("mul", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, n) = self.span(a);
        let (sb, _) = self.span(b);
        Ok(self.push_with(Op::Mul(a, b), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sa + i] * prev[sb + i];
            }
        }))
    }

    /// y = mul * x + add, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Affine { x, mul }, n, needs, |prev, out| {
            for i in 0..n {
                out[i] = mul * prev[sx + i] + add;
            }
        })
    }

    /// Elementwise product with a scalar node.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let needs = self.needs(v) || self.needs(s);
        let (sv, n) = self.span(v);
        let (ss, _) = self.span(s);
        Ok(self.push_with(Op::MulScalar { v, s }, n, needs, |prev, out| {
            let sc = prev[ss];
            for i in 0..n {
                out[i] = prev[sv + i] * sc;
            }
        }))
    }

    /// Elementwise division by a scalar node.
    pub fn div_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        self.check_scalar("div_scalar", s)?;
        let needs = self.needs(v) || self.needs(s);
        let (sv, n) = self.span(v);
        let (ss, _) = self.span(s);
        Ok(self.push_with(Op::DivScalar { v, s }, n, needs, |prev, out| {
            let sc = prev[ss];
            for i in 0..n {
                out[i] = prev[sv + i] / sc;
            }
        }))
    }

    // ---- linear algebra ----

    /// y = W x + b with W stored row-major as [out, in].
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let out = self.len_of(b);
        let n_in = self.len_of(x);
        if self.len_of(w) != out * n_in {
            return Err(Error::ShapeMismatch {
                context: "linear".into(),
                expected: vec![out, n_in],
                got: vec![self.len_of(w)],
            });
        }
        let needs = self.needs(w) || self.needs(b) || self.needs(x);
        let (sw, _) = self.span(w);
        let (sb, _) = self.span(b);
        let (sx, _) = self.span(x);
        Ok(self.push_with(Op::Linear { w, b, x }, out, needs, |prev, y| {
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &prev[sw + i * n_in..sw + (i + 1) * n_in];
                let xs = &prev[sx..sx + n_in];
                let mut acc = prev[sb + i];
                for j in 0..n_in {
                    acc += row[j] * xs[j];
                }
                *yi = acc;
            }
        }))
    }

    // ---- activations ----

    pub fn relu(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Relu(x), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sx + i].max(0.0);
            }
        })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Softplus(x), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = softplus(prev[sx + i]);
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Sigmoid(x), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = sigmoid(prev[sx + i]);
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Tanh(x), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sx + i].tanh();
            }
        })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Softmax(x), n, needs, |prev, out| {
            softmax_into(&prev[sx..sx + n], out);
        })
    }

    // ---- encodings, reshaping, reductions ----

    /// Positional encoding: `[x, sin(2^k pi x), cos(2^k pi x)]` for k in 0..freqs.
    pub fn posenc(&mut self, x: Var, freqs: usize) -> Var {
        let needs = self.needs(x);
        let (sx, d) = self.span(x);
        let out_len = d * (1 + 2 * freqs);
        self.push_with(
            Op::PosEnc {
                x,
                freqs: freqs as u32,
            },
            out_len,
            needs,
            |prev, out| {
                posenc_into(&prev[sx..sx + d], freqs, out);
            },
        )
    }

    pub fn concat2(&mut self, a: Var, b: Var) -> Var {
        let needs = self.needs(a) || self.needs(b);
        let (sa, na) = self.span(a);
        let (sb, nb) = self.span(b);
        self.push_with(Op::Concat2(a, b), na + nb, needs, |prev, out| {
            out[..na].copy_from_slice(&prev[sa..sa + na]);
            out[na..].copy_from_slice(&prev[sb..sb + nb]);
        })
    }

    pub fn concat3(&mut self, a: Var, b: Var, c: Var) -> Var {
        let needs = self.needs(a) || self.needs(b) || self.needs(c);
        let (sa, na) = self.span(a);
        let (sb, nb) = self.span(b);
        let (sc, nc) = self.span(c);
        self.push_with(Op::Concat3(a, b, c), na + nb + nc, needs, |prev, out| {
            out[..na].copy_from_slice(&prev[sa..sa + na]);
            out[na..na + nb].copy_from_slice(&prev[sb..sb + nb]);
            out[na + nb..].copy_from_slice(&prev[sc..sc + nc]);
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Sum(x), 1, needs, |prev, out| {
            out[0] = prev[sx..sx + n].iter().sum();
        })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Abs(x), n, needs, |prev, out| {
            for i in 0..n {
                out[i] = prev[sx + i].abs();
            }
        })
    }

    /// Euclidean norm, scalar output.
    pub fn norm2(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let (sx, n) = self.span(x);
        self.push_with(Op::Norm2(x), 1, needs, |prev, out| {
            out[0] = prev[sx..sx + n].iter().map(|v| v * v).sum::<f64>().sqrt();
        })
    }

    /// Numerically stable `-log softmax(logits)[label]`, scalar output.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (sl, n) = self.span(logits);
        if label >= n {
            return Err(Error::invalid(
                "cross_entropy label",
                format!("label {label} out of range for {n} logits"),
            ));
        }
        let needs = self.needs(logits);
        Ok(self.push_with(
            Op::CrossEntropy {
                logits,
                label: label as u32,
            },
            1,
            needs,
            |prev, out| {
                let z = &prev[sl..sl + n];
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out[0] = lse - z[label];
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of earlier sweeps on this
    /// tape are discarded; values stay valid so several losses recorded on one
    /// tape can each be differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.len_of(loss) != 1 {
            return Err(Error::NonScalarLoss {
                len: self.len_of(loss),
            });
        }
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        let (ls, _) = self.span(loss);
        self.grads[ls] = 1.0;

        for idx in (0..=loss.0 as usize).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let (so, n_out) = {
                let n = &self.nodes[idx];
                (n.start as usize, n.len as usize)
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (sa, _) = self.span(a);
                    let (sb, _) = self.span(b);
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if self.needs(a) {
                            self.grads[sa + i] += g;
                        }
                        if self.needs(b) {
                            self.grads[sb + i] += g;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let (sa, _) = self.span(a);
                    let (sb, _) = self.span(b);
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if self.needs(a) {
                            self.grads[sa + i] += g;
                        }
                        if self.needs(b) {
                            self.grads[sb + i] -= g;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (sa, _) = self.span(a);
                    let (sb, _) = self.span(b);
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if self.needs(a) {
                            self.grads[sa + i] += g * self.values[sb + i];
                        }
                        if self.needs(b) {
                            self.grads[sb + i] += g * self.values[sa + i];
                        }
                    }
                }
                Op::Affine { x, mul } => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        self.grads[sx + i] += mul * self.grads[so + i];
                    }
                }
                Op::MulScalar { v, s } => {
                    let (sv, _) = self.span(v);
                    let (ss, _) = self.span(s);
                    let sc = self.values[ss];
                    let mut gs = 0.0;
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if self.needs(v) {
                            self.grads[sv + i] += g * sc;
                        }
                        gs += g * self.values[sv + i];
                    }
                    if self.needs(s) {
                        self.grads[ss] += gs;
                    }
                }
                Op::DivScalar { v, s } => {
                    let (sv, _) = self.span(v);
                    let (ss, _) = self.span(s);
                    let sc = self.values[ss];
                    let mut gs = 0.0;
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if self.needs(v) {
                            self.grads[sv + i] += g / sc;
                        }
                        gs += g * self.values[so + i];
                    }
                    if self.needs(s) {
                        self.grads[ss] -= gs / sc;
                    }
                }
                Op::Linear { w, b, x } => {
                    let (sw, _) = self.span(w);
                    let (sb, _) = self.span(b);
                    let (sx, n_in) = self.span(x);
                    for i in 0..n_out {
                        let g = self.grads[so + i];
                        if g == 0.0 {
                            continue;
                        }
                        if self.needs(b) {
                            self.grads[sb + i] += g;
                        }
                        let row = sw + i * n_in;
                        if self.needs(w) {
                            for j in 0..n_in {
                                self.grads[row + j] += g * self.values[sx + j];
                            }
                        }
                        if self.needs(x) {
                            for j in 0..n_in {
                                self.grads[sx + j] += g * self.values[row + j];
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        if self.values[sx + i] > 0.0 {
                            self.grads[sx + i] += self.grads[so + i];
                        }
                    }
                }
                Op::Softplus(x) => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        self.grads[sx + i] += self.grads[so + i] * sigmoid(self.values[sx + i]);
                    }
                }
                Op::Sigmoid(x) => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        let y = self.values[so + i];
                        self.grads[sx + i] += self.grads[so + i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        let y = self.values[so + i];
                        self.grads[sx + i] += self.grads[so + i] * (1.0 - y * y);
                    }
                }
                Op::Softmax(x) => {
                    let (sx, _) = self.span(x);
                    let mut dot = 0.0;
                    for i in 0..n_out {
                        dot += self.grads[so + i] * self.values[so + i];
                    }
                    for i in 0..n_out {
                        let y = self.values[so + i];
                        self.grads[sx + i] += y * (self.grads[so + i] - dot);
                    }
                }
                Op::PosEnc { x, freqs } => {
                    let (sx, d) = self.span(x);
                    for j in 0..d {
                        let mut acc = self.grads[so + j];
                        let xj = self.values[sx + j];
                        for k in 0..freqs as usize {
                            let f = (1u64 << k) as f64 * PI;
                            let base = so + d * (1 + 2 * k);
                            acc += self.grads[base + j] * f * (f * xj).cos();
                            acc -= self.grads[base + d + j] * f * (f * xj).sin();
                        }
                        self.grads[sx + j] += acc;
                    }
                }
                Op::Concat2(a, b) => {
                    let (sa, na) = self.span(a);
                    let (sb, nb) = self.span(b);
                    if self.needs(a) {
                        for i in 0..na {
                            self.grads[sa + i] += self.grads[so + i];
                        }
                    }
                    if self.needs(b) {
                        for i in 0..nb {
                            self.grads[sb + i] += self.grads[so + na + i];
                        }
                    }
                }
                Op::Concat3(a, b, c) => {
                    let (sa, na) = self.span(a);
                    let (sb, nb) = self.span(b);
                    let (sc, nc) = self.span(c);
                    if self.needs(a) {
                        for i in 0..na {
                            self.grads[sa + i] += self.grads[so + i];
                        }
                    }
                    if self.needs(b) {
                        for i in 0..nb {
                            self.grads[sb + i] += self.grads[so + na + i];
                        }
                    }
                    if self.needs(c) {
                        for i in 0..nc {
                            self.grads[sc + i] += self.grads[so + na + nb + i];
                        }
                    }
                }
                Op::Sum(x) => {
                    let (sx, n_in) = self.span(x);
                    let g = self.grads[so];
                    for i in 0..n_in {
                        self.grads[sx + i] += g;
                    }
                }
                Op::Abs(x) => {
                    let (sx, _) = self.span(x);
                    for i in 0..n_out {
                        let v = self.values[sx + i];
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        self.grads[sx + i] += self.grads[so + i] * s;
                    }
                }
                Op::Norm2(x) => {
                    let (sx, n_in) = self.span(x);
                    let norm = self.values[so].max(1e-12);
                    let g = self.grads[so];
                    for i in 0..n_in {
                        self.grads[sx + i] += g * self.values[sx + i] / norm;
                    }
                }
                Op::CrossEntropy { logits, label } => {
                    let (sl, n_in) = self.span(logits);
                    let g = self.grads[so];
                    let z = &self.values[sl..sl + n_in];
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    for i in 0..n_in {
                        let p = (self.values[sl + i] - m).exp() / denom;
                        let t = if i == label as usize { 1.0 } else { 0.0 };
                        self.grads[sl + i] += g * (p - t);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient w.r.t. a parameter registered on this tape, or `None` if the
    /// parameter never entered the forward pass.
    pub fn param_grad(&self, p: &Param) -> Option<&[f64]> {
        let v = *self.param_nodes.get(p.id)?;
        v.map(|v| self.grad(v))
    }

    /// Gradient w.r.t. `p` as an f32 tensor; zeros when off the path.
    pub fn param_grad_tensor(&self, p: &Param) -> Tensor {
        match self.param_grad(p) {
            Some(g) => Tensor {
                shape: p.value.shape.clone(),
                data: g.iter().map(|&v| v as f32).collect(),
                requires_grad: false,
            },
            None => Tensor::zeros(&p.value.shape),
        }
    }

    /// Add `scale` times this tape's parameter gradients into `acc`
    /// (indexed by [`ParamId`]).
    pub fn accumulate_param_grads(&self, acc: &mut GradAccum, scale: f64) {
        for (id, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if !self.needs(*v) {
                    continue;
                }
                acc.add_scaled(id, self.grad(*v), scale);
            }
        }
    }
}

/// Per-parameter f64 gradient accumulator, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct GradAccum {
    pub by_id: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn new(param_count: usize) -> GradAccum {
        GradAccum {
            by_id: vec![Vec::new(); param_count],
        }
    }

    pub fn add_scaled(&mut self, id: ParamId, grad: &[f64], scale: f64) {
        if id >= self.by_id.len() {
            self.by_id.resize(id + 1, Vec::new());
        }
        let slot = &mut self.by_id[id];
        if slot.is_empty() {
            slot.resize(grad.len(), 0.0);
        }
        for (a, g) in slot.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    /// Merge another accumulator into this one (associative summation).
    pub fn merge(&mut self, other: &GradAccum) {
        for (id, g) in other.by_id.iter().enumerate() {
            if !g.is_empty() {
                self.add_scaled(id, g, 1.0);
            }
        }
    }

    /// Accumulated gradient for one parameter, zeros if it never appeared.
    pub fn get(&self, id: ParamId, numel: usize) -> Vec<f64> {
        match self.by_id.get(id) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; numel],
        }
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Positional encoding into `out`, laid out as
/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`.
pub fn posenc_into(x: &[f64], freqs: usize, out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), d * (1 + 2 * freqs));
    out[..d].copy_from_slice(x);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * PI;
        let base = d * (1 + 2 * k);
        for j in 0..d {
            let (s, c) = (f * x[j]).sin_cos();
            out[base + j] = s;
            out[base + d + j] = c;
        }
    }
}

pub fn posenc_len(d: usize, freqs: usize) -> usize {
    d * (1 + 2 * freqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamIds;

    fn param(ids: &mut ParamIds, data: &[f32]) -> Param {
        Param::new(ids, Tensor::from_vec(&[data.len()], data.to_vec()).unwrap())
    }

    #[test]
    fn linear_matches_hand_result() {
        let mut ids = ParamIds::new();
        let w = param(&mut ids, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]); // [3,2] row-major
        let b = param(&mut ids, &[0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let x = tape.leaf(&[2.0, 3.0]);
        let y = tape.linear(wv, bv, x).unwrap();
        assert_eq!(tape.value(y), &[2.0, 3.0, 6.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut ids = ParamIds::new();
        let w = param(&mut ids, &[1.0; 12]); // 4x3
        let b = param(&mut ids, &[0.0; 4]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let x = tape.leaf(&[1.0; 4]); // should be length 3
        let err = tape.linear(wv, bv, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 4]") && msg.contains("[12]"), "{msg}");
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut ids = ParamIds::new();
        let p = param(&mut ids, &[-1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[0.0; 4]);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y), &[0.25; 4]);
    }

    #[test]
    fn posenc_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[0.0]);
        let y = tape.posenc(x, 1);
        assert_eq!(tape.value(y), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { len: 2 }));
    }

    #[test]
    fn off_path_param_gets_zero_grad() {
        let mut ids = ParamIds::new();
        let a = param(&mut ids, &[1.0, 2.0]);
        let b = param(&mut ids, &[3.0]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let s = tape.sum(av);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(av), &[1.0, 1.0]);
        assert!(tape.param_grad(&b).is_none());
        assert_eq!(tape.param_grad_tensor(&b).data, vec![0.0]);
    }

    #[test]
    fn param_leaf_is_cached_per_tape() {
        let mut ids = ParamIds::new();
        let a = param(&mut ids, &[1.0]);
        let mut tape = Tape::new();
        let v1 = tape.param(&a);
        let v2 = tape.param(&a);
        assert_eq!(v1, v2);
        // Grad accumulates across both uses of the shared leaf.
        let y = tape.mul(v1, v2).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v1), &[2.0]);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut tape = Tape::new();
        let z = tape.leaf(&[0.0, 0.0]);
        let ce = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.scalar(ce) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut ids = ParamIds::new();
        let p = param(&mut ids, &[0.3, -0.7, 1.1]);
        let run = |p: &Param| {
            let mut tape = Tape::new();
            let x = tape.param(p);
            let h = tape.softplus(x);
            let n = tape.norm2(h);
            tape.backward(n).unwrap();
            (tape.scalar(n), tape.grad(x).to_vec())
        };
        assert_eq!(run(&p), run(&p));
    }

    #[test]
    fn truncate_keeps_cached_params_and_matches_fresh_tapes() {
        let mut ids = ParamIds::new();
        let p = param(&mut ids, &[0.4, -0.9]);
        let mut shared = Tape::new();
        let pv = shared.param(&p);
        let base = shared.mark();
        let mut shared_grads = Vec::new();
        for c in [1.0, 2.5, -3.0] {
            shared.truncate(base);
            // The cached leaf survives rollback.
            assert_eq!(shared.param(&p), pv);
            let y = shared.affine(pv, c, 0.0);
            let s = shared.sum(y);
            shared.backward(s).unwrap();
            shared_grads.push(shared.grad(pv).to_vec());
        }
        for (i, c) in [1.0, 2.5, -3.0].into_iter().enumerate() {
            let mut fresh = Tape::new();
            let x = fresh.param(&p);
            let y = fresh.affine(x, c, 0.0);
            let s = fresh.sum(y);
            fresh.backward(s).unwrap();
            assert_eq!(shared_grads[i], fresh.grad(x));
        }
    }

    #[test]
    fn truncate_forgets_params_created_after_the_mark() {
        let mut ids = ParamIds::new();
        let early = param(&mut ids, &[1.0]);
        let late = param(&mut ids, &[2.0]);
        let mut tape = Tape::new();
        let ev = tape.param(&early);
        let base = tape.mark();
        let _ = tape.param(&late);
        tape.truncate(base);
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.param(&early), ev);
        // The late param was evicted: asking again re-uploads it.
        let lv2 = tape.param(&late);
        assert_eq!(tape.len(), 2);
        assert_eq!(tape.value(lv2), &[2.0]);
    }
}
