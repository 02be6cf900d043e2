//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every optimizer step. Nodes only reference
//! earlier nodes, so walking the tape backwards is a reverse topological
//! order and each node is visited once.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sin(Var),
    Exp(Var),
    Square(Var),
    SoftmaxLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    StackLast(Vec<Var>),
    IndexSelect(Var, usize, Vec<usize>),
    Sum(Var),
    SumLast(Var),
    AffineLast(Var, Vec<f64>),
    MulConst(Var, Tensor),
    WeightedSumSq(Var, Tensor),
    BranchTrunk(Var, Var),
    TrunkA(Var, Var),
    Predict2Step(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient can be requested.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[n, m] + bias[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        let m = *xs.shape().last().unwrap_or(&0);
        if bs.shape() != [m] {
            return Err(Error::dim(
                "add_row",
                format!("bias shape {:?} does not match row width {m}", bs.shape()),
            ));
        }
        let mut v = xs.clone();
        for row in v.data_mut().chunks_mut(m.max(1)) {
            for (r, b) in row.iter_mut().zip(bs.data()) {
                *r += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| s * x);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = tensor::softmax_last_axis(self.value(a));
        self.push(v, Op::SoftmaxLast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stack_last", "nothing to stack"))?;
        let shape = self.shape(*first).to_vec();
        if let Some(bad) = parts.iter().find(|p| self.shape(**p) != shape.as_slice()) {
            return Err(Error::dim(
                "stack_last",
                format!("shape {:?} differs from {shape:?}", self.shape(*bad)),
            ));
        }
        let k = parts.len();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n * k];
        for (j, p) in parts.iter().enumerate() {
            for (i, &x) in self.value(*p).data().iter().enumerate() {
                out[i * k + j] = x;
            }
        }
        let mut s = shape;
        s.push(k);
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::StackLast(parts.to_vec()), parts))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).index_select(axis, indices)?;
        Ok(self.push(v, Op::IndexSelect(a, axis, indices.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = *t.shape().last().unwrap_or(&1);
        let data: Vec<f64> = t.data().chunks(k.max(1)).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
        let v = Tensor::new(shape, data).expect("sum_last shape");
        self.push(v, Op::SumLast(a), &[a])
    }

    /// `x * scale[c] + shift[c]` where `c` indexes the trailing axis.
    pub fn affine_last(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let k = *t.shape().last().unwrap_or(&0);
        if scale.len() != k || shift.len() != k {
            return Err(Error::dim(
                "affine_last",
                format!("trailing axis {k}, got {} scales and {} shifts", scale.len(), shift.len()),
            ));
        }
        let mut v = t.clone();
        for row in v.data_mut().chunks_mut(k.max(1)) {
            for ((x, s), b) in row.iter_mut().zip(scale).zip(shift) {
                *x = *x * s + b;
            }
        }
        Ok(self.push(v, Op::AffineLast(a, scale.to_vec()), &[a]))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c.clone()), &[a]))
    }

    /// `Σ w ∘ d²` with constant weights `w` of the same shape as `d`.
    pub fn weighted_sum_sq(&mut self, d: Var, w: &Tensor) -> Result<Var> {
        let t = self.value(d);
        if t.shape() != w.shape() {
            return Err(Error::dim(
                "weighted_sum_sq",
                format!("weights {:?} vs values {:?}", w.shape(), t.shape()),
            ));
        }
        let s: f64 = t.data().iter().zip(w.data()).map(|(x, w)| w * x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSumSq(d, w.clone()), &[d]))
    }

    pub fn contract_branch_trunk(&mut self, b: Var, c: Var) -> Result<Var> {
        let v = tensor::contract_branch_trunk(self.value(b), self.value(c))?;
        Ok(self.push(v, Op::BranchTrunk(b, c), &[b, c]))
    }

    pub fn contract_trunk_a(&mut self, c: Var, a: Var) -> Result<Var> {
        let v = tensor::contract_trunk_a(self.value(c), self.value(a))?;
        Ok(self.push(v, Op::TrunkA(c, a), &[c, a]))
    }

    pub fn contract_predict_2step(&mut self, b: Var, q: Var) -> Result<Var> {
        let v = tensor::contract_predict_2step(self.value(b), self.value(q))?;
        Ok(self.push(v, Op::Predict2Step(b, q), &[b, q]))
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    /// Parameters the loss does not depend on receive zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward(node, &g, &mut grads)?;
        }
        Ok(params
            .iter()
            .map(|p| {
                grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*p)))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| s * x));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = g.reshaped(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))?);
            }
            Op::Sin(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x * y.cos())?);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)?);
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)?);
            }
            Op::SoftmaxLast(a) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(k.max(1)).zip(out.data().chunks(k.max(1))) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for (x, y) in gr.iter_mut().zip(yr) {
                        *x = y * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::StackLast(parts) => {
                let k = parts.len();
                for (j, p) in parts.iter().enumerate() {
                    if !self.needs(*p) {
                        continue;
                    }
                    let d: Vec<f64> = g.data().iter().skip(j).step_by(k).copied().collect();
                    self.accumulate(grads, *p, Tensor::new(self.shape(*p).to_vec(), d)?);
                }
            }
            Op::IndexSelect(a, axis, idx) => {
                let shape = self.shape(*a);
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut ga = Tensor::zeros(shape);
                let gd = g.data();
                let dst = ga.data_mut();
                for o in 0..outer {
                    for (pos, &i) in idx.iter().enumerate() {
                        let src = (o * idx.len() + pos) * inner;
                        let to = (o * n + i) * inner;
                        for t in 0..inner {
                            dst[to + t] += gd[src + t];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumLast(a) => {
                let shape = self.shape(*a);
                let k = *shape.last().unwrap_or(&1);
                let d: Vec<f64> = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), d)?);
            }
            Op::AffineLast(a, scale) => {
                let k = scale.len();
                let mut ga = g.clone();
                for row in ga.data_mut().chunks_mut(k.max(1)) {
                    for (x, s) in row.iter_mut().zip(scale) {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.zip_map(c, |x, y| x * y)?);
            }
            Op::WeightedSumSq(d, w) => {
                let s = g.item();
                let gd = self.value(*d).zip_map(w, |x, w| 2.0 * s * w * x)?;
                self.accumulate(grads, *d, gd);
            }
            Op::BranchTrunk(b, c) => {
                let (bv, cv) = (self.value(*b), self.value(*c));
                let (bs, j, p) = dims3(bv);
                let nt = cv.shape()[0];
                let (gd, bd, cd) = (g.data(), bv.data(), cv.data());
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for i in 0..bs {
                        for l in 0..nt {
                            for a in 0..j {
                                let s = gd[(i * nt + l) * j + a];
                                let dst = &mut gb[(i * j + a) * p..(i * j + a + 1) * p];
                                for (d, c) in dst.iter_mut().zip(&cd[(l * j + a) * p..(l * j + a + 1) * p]) {
                                    *d += s * c;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                if self.needs(*c) {
                    let mut gc = vec![0.0; cd.len()];
                    for i in 0..bs {
                        for l in 0..nt {
                            for a in 0..j {
                                let s = gd[(i * nt + l) * j + a];
                                let dst = &mut gc[(l * j + a) * p..(l * j + a + 1) * p];
                                for (d, x) in dst.iter_mut().zip(&bd[(i * j + a) * p..(i * j + a + 1) * p]) {
                                    *d += s * x;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *c, Tensor::new(cv.shape().to_vec(), gc)?);
                }
            }
            Op::TrunkA(c, a) => {
                let (cv, av) = (self.value(*c), self.value(*a));
                let (nt, j, p) = dims3(cv);
                let bs = av.shape()[2];
                let (gd, cd, ad) = (g.data(), cv.data(), av.data());
                if self.needs(*c) {
                    let mut gc = vec![0.0; cd.len()];
                    for s in 0..j {
                        for k in 0..p {
                            let arow = &ad[(s * p + k) * bs..(s * p + k + 1) * bs];
                            for i in 0..nt {
                                let mut acc = 0.0;
                                for (l, &x) in arow.iter().enumerate() {
                                    acc += gd[(l * nt + i) * j + s] * x;
                                }
                                gc[(i * j + s) * p + k] += acc;
                            }
                        }
                    }
                    self.accumulate(grads, *c, Tensor::new(cv.shape().to_vec(), gc)?);
                }
                if self.needs(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for s in 0..j {
                        for k in 0..p {
                            let dst = &mut ga[(s * p + k) * bs..(s * p + k + 1) * bs];
                            for i in 0..nt {
                                let cval = cd[(i * j + s) * p + k];
                                for (l, d) in dst.iter_mut().enumerate() {
                                    *d += gd[(l * nt + i) * j + s] * cval;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
            }
            Op::Predict2Step(b, q) => {
                let (bv, qv) = (self.value(*b), self.value(*q));
                let (bs, j, p) = dims3(bv);
                let nt = qv.shape()[1];
                let (gd, bd, qd) = (g.data(), bv.data(), qv.data());
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for i in 0..bs {
                        for l in 0..nt {
                            for a in 0..j {
                                let s = gd[(i * nt + l) * j + a];
                                let dst = &mut gb[(i * j + a) * p..(i * j + a + 1) * p];
                                for (d, x) in dst.iter_mut().zip(&qd[(a * nt + l) * p..(a * nt + l + 1) * p]) {
                                    *d += s * x;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                if self.needs(*q) {
                    let mut gq = vec![0.0; qd.len()];
                    for i in 0..bs {
                        for l in 0..nt {
                            for a in 0..j {
                                let s = gd[(i * nt + l) * j + a];
                                let dst = &mut gq[(a * nt + l) * p..(a * nt + l + 1) * p];
                                for (d, x) in dst.iter_mut().zip(&bd[(i * j + a) * p..(i * j + a + 1) * p]) {
                                    *d += s * x;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), gq)?);
                }
            }
        }
        Ok(())
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Central finite-difference gradient of `f` at `x`, for tests and the
/// gradient-check tooling.
pub fn finite_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Normwise relative discrepancy `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let gr = g.grad(loss, &[x]).unwrap();
        assert_eq!(gr[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_zero_annihilates_weight_gradient() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let w = g.param(Tensor::scalar(3.0));
        let t = g.tanh(z);
        let prod = g.mul(t, w).unwrap();
        let loss = g.sum(prod);
        assert_eq!(g.grad(loss, &[w]).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn unreached_param_and_nonscalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.param(Tensor::from_vec(vec![5.0]));
        let loss = g.sum(x);
        let gr = g.grad(loss, &[x, y]).unwrap();
        assert_eq!(gr[1].data(), &[0.0]);
        let sq = g.square(x);
        assert!(matches!(g.grad(sq, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.param(random(&[4, 5], &mut rng).map(|v| 30.0 * v));
        let s = g.softmax_last(x);
        let loss = g.sum(s);
        let gr = g.grad(loss, &[x]).unwrap();
        assert!(gr[0].data().iter().all(|v| v.abs() < 1e-10));
    }

    /// Builds a composite of every primitive and compares against central differences.
    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = random(&[3, 4], &mut rng);
        let w0 = random(&[4, 6], &mut rng);
        let b0 = random(&[6], &mut rng);
        let a0 = random(&[2, 3, 5], &mut rng);
        let q0 = random(&[2, 5, 3], &mut rng);
        let mask = random(&[3, 5, 2], &mut rng).map(f64::abs);
        let build = |x: &Tensor, w: &Tensor, b: &Tensor, a: &Tensor, q: &Tensor| {
            let mut g = Graph::new();
            let (xv, wv, bv, av, qv) = (
                g.param(x.clone()),
                g.param(w.clone()),
                g.param(b.clone()),
                g.param(a.clone()),
                g.param(q.clone()),
            );
            let h = g.matmul(xv, wv).unwrap();
            let h = g.add_row(h, bv).unwrap();
            let h = g.tanh(h);
            let s = g.sin(h);
            let e = g.scale(s, 0.5);
            let e = g.exp(e);
            let h = g.mul(h, e).unwrap();
            let branch = g.reshape(h, &[3, 2, 3]).unwrap();
            let trunk = g.permute(qv, &[1, 0, 2]).unwrap();
            let trunk = g.softmax_last(trunk);
            let y1 = g.contract_branch_trunk(branch, trunk).unwrap();
            let trunk2 = g.index_select(trunk, 0, &[0, 1, 2]).unwrap();
            let y2 = g.contract_trunk_a(trunk2, av).unwrap();
            let y3 = g.contract_predict_2step(branch, qv).unwrap();
            let y12 = g.sub(y1, y3).unwrap();
            let y12 = g.affine_last(y12, &[1.5, -0.5], &[0.1, 0.2]).unwrap();
            let sel = g.index_select(y12, 1, &[0, 2, 4]).unwrap();
            let y2t = g.index_select(y2, 0, &[4, 2, 0]).unwrap();
            let y2t = g.permute(y2t, &[0, 1, 2]).unwrap();
            let y2t = g.add_scalar(y2t, 0.3);
            let stacked = g.stack_last(&[sel, y2t]).unwrap();
            let r = g.sum_last(stacked);
            let sq = g.square(r);
            let l1 = g.mean(sq);
            let l2 = g.weighted_sum_sq(y12, &mask).unwrap();
            let l3 = g.mul_const(y12, &mask).unwrap();
            let l3 = g.sum(l3);
            let l = g.add(l1, l2).unwrap();
            let loss = g.add(l, l3).unwrap();
            (g, loss, [xv, wv, bv, av, qv])
        };
        let inputs = [x0, w0, b0, a0, q0];
        let (g, loss, vars) = build(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4]);
        let analytic = g.grad(loss, &vars).unwrap();
        for which in 0..5 {
            let mut f = |t: &Tensor| {
                let mut ins = inputs.clone();
                ins[which] = t.clone();
                let (g, l, _) = build(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4]);
                g.value(l).item()
            };
            let fd = finite_difference(&mut f, &inputs[which], 1e-6);
            let err = relative_discrepancy(analytic[which].data(), fd.data());
            assert!(err < 1e-6, "input {which}: relative error {err:e}");
        }
    }
}
