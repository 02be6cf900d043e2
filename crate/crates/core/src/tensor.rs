//! Dense row-major `f64` tensors and the handful of kernels the operator
//! networks need: matrix products, the three DeepONet contractions, thin QR,
//! least squares and a numerically stable softmax.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Metadata-only reshape.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip_map",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// `self · other` for matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        let (k, m) = self.matrix_dims("matmul_tn")?;
        let (k2, n) = other.matrix_dims("matmul_tn")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_tn",
                format!("row counts {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..k {
            let arow = &self.data[r * m..(r + 1) * m];
            let brow = &other.data[r * n..(r + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul_nt")?;
        let (n, k2) = other.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("column counts {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        Self::new(vec![m, n], out)
    }

    /// General axis permutation: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::new(out_shape, out)
    }

    /// Gather `indices` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::dim("index_select", format!("axis {axis} out of range")));
        }
        let n = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim(
                "index_select",
                format!("index {bad} out of range for axis of extent {n}"),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * n + i) * inner;
                out.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Self::new(shape, out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn dims3(t: &Tensor, op: &'static str, name: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(Error::dim(op, format!("{name} must be rank 3, got shape {s:?}"))),
    }
}

/// `einsum("ijk,ljk->ilj", B, C)`: branch coefficients `[bs, j, p]` against
/// trunk bases `[n_t1, j, p]`, giving predictions `[bs, n_t1, j]`.
pub fn contract_branch_trunk(b: &Tensor, c: &Tensor) -> Result<Tensor> {
    const OP: &str = "contract_branch_trunk";
    let (bs, j, p) = dims3(b, OP, "B")?;
    let (nt, j2, p2) = dims3(c, OP, "C")?;
    if j != j2 || p != p2 {
        return Err(Error::dim(
            OP,
            format!("state axis (B: {j}, C: {j2}) or basis axis (B: {p}, C: {p2}) disagree"),
        ));
    }
    let mut out = vec![0.0; bs * nt * j];
    for i in 0..bs {
        for l in 0..nt {
            for a in 0..j {
                let bv = &b.data[(i * j + a) * p..(i * j + a + 1) * p];
                let cv = &c.data[(l * j + a) * p..(l * j + a + 1) * p];
                out[(i * nt + l) * j + a] = dot(bv, cv);
            }
        }
    }
    Tensor::new(vec![bs, nt, j], out)
}

/// `einsum("ijk,jkl->lij", C, A)`: trunk bases `[n_t1, j, p]` against the
/// trainable coefficient tensor `[j, p, bs]`, giving `[bs, n_t1, j]`.
pub fn contract_trunk_a(c: &Tensor, a: &Tensor) -> Result<Tensor> {
    const OP: &str = "contract_trunk_a";
    let (nt, j, p) = dims3(c, OP, "C")?;
    let (j2, p2, bs) = dims3(a, OP, "A")?;
    if j != j2 || p != p2 {
        return Err(Error::dim(
            OP,
            format!("state axis (C: {j}, A: {j2}) or basis axis (C: {p}, A: {p2}) disagree"),
        ));
    }
    let mut out = vec![0.0; bs * nt * j];
    for s in 0..j {
        for k in 0..p {
            let arow = &a.data[(s * p + k) * bs..(s * p + k + 1) * bs];
            for i in 0..nt {
                let cv = c.data[(i * j + s) * p + k];
                if cv == 0.0 {
                    continue;
                }
                for (l, &av) in arow.iter().enumerate() {
                    out[(l * nt + i) * j + s] += cv * av;
                }
            }
        }
    }
    Tensor::new(vec![bs, nt, j], out)
}

/// `einsum("ijk,jlk->ilj", B, Q)`: branch coefficients `[bs, j, p]` against
/// stored orthonormal bases `[j, n_t1, p]`, giving `[bs, n_t1, j]`.
pub fn contract_predict_2step(b: &Tensor, q: &Tensor) -> Result<Tensor> {
    const OP: &str = "contract_predict_2step";
    let (bs, j, p) = dims3(b, OP, "B")?;
    let (j2, nt, p2) = dims3(q, OP, "Q")?;
    if j != j2 || p != p2 {
        return Err(Error::dim(
            OP,
            format!("state axis (B: {j}, Q: {j2}) or basis axis (B: {p}, Q: {p2}) disagree"),
        ));
    }
    let mut out = vec![0.0; bs * nt * j];
    for i in 0..bs {
        for l in 0..nt {
            for a in 0..j {
                let bv = &b.data[(i * j + a) * p..(i * j + a + 1) * p];
                let qv = &q.data[(a * nt + l) * p..(a * nt + l + 1) * p];
                out[(i * nt + l) * j + a] = dot(bv, qv);
            }
        }
    }
    Tensor::new(vec![bs, nt, j], out)
}

/// Softmax over the trailing axis with max-subtraction.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let k = x.shape.last().copied().unwrap_or(1).max(1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Relative threshold on `|R_kk|` below which a basis is declared rank deficient.
pub const RANK_TOL: f64 = 1e-12;

/// Thin Householder QR of an `m × k` matrix (`m ≥ k`), with the sign of each
/// column fixed so that `R` has a positive diagonal.
pub fn qr_thin(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = m.matrix_dims("qr_thin")?;
    if rows < cols {
        return Err(Error::dim(
            "qr_thin",
            format!("need rows >= cols, got {rows}x{cols}"),
        ));
    }
    let norm = m.frobenius_norm();
    let mut w = m.data.clone();
    // Householder vectors, one per column, stored densely for clarity.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut r = vec![0.0; cols * cols];
    for k in 0..cols {
        let mut v: Vec<f64> = (k..rows).map(|i| w[i * cols + k]).collect();
        let alpha = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..cols {
                let s: f64 = (k..rows).map(|i| v[i - k] * w[i * cols + j]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..rows {
                    w[i * cols + j] -= s * v[i - k];
                }
            }
        }
        for j in k..cols {
            r[k * cols + j] = w[k * cols + j];
        }
        vs.push(v);
    }
    for k in 0..cols {
        if r[k * cols + k].abs() < RANK_TOL * norm.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularBasis(format!(
                "|R[{k},{k}]| = {:.3e} is below {RANK_TOL:e}·‖M‖ (‖M‖ = {norm:.3e})",
                r[k * cols + k].abs()
            )));
        }
    }
    // Q = H_0 H_1 ... H_{k-1} applied to the first `cols` columns of I.
    let mut q = vec![0.0; rows * cols];
    for j in 0..cols {
        q[j * cols + j] = 1.0;
    }
    for k in (0..cols).rev() {
        let v = &vs[k];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..cols {
            let s: f64 = (k..rows).map(|i| v[i - k] * q[i * cols + j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..rows {
                q[i * cols + j] -= s * v[i - k];
            }
        }
    }
    for k in 0..cols {
        if r[k * cols + k] < 0.0 {
            for j in k..cols {
                r[k * cols + j] = -r[k * cols + j];
            }
            for i in 0..rows {
                q[i * cols + k] = -q[i * cols + k];
            }
        }
    }
    Ok((Tensor::new(vec![rows, cols], q)?, Tensor::new(vec![cols, cols], r)?))
}

/// Solves `R X = B` for upper-triangular `R`.
pub fn solve_upper(r: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, k2) = r.matrix_dims("solve_upper")?;
    let (kb, s) = b.matrix_dims("solve_upper")?;
    if k != k2 || k != kb {
        return Err(Error::dim(
            "solve_upper",
            format!("R is {k}x{k2}, right-hand side has {kb} rows"),
        ));
    }
    let mut x = b.data.clone();
    for i in (0..k).rev() {
        let d = r.data[i * k + i];
        if d == 0.0 {
            return Err(Error::SingularBasis(format!("zero pivot at row {i}")));
        }
        for c in 0..s {
            let mut acc = x[i * s + c];
            for j in i + 1..k {
                acc -= r.data[i * k + j] * x[j * s + c];
            }
            x[i * s + c] = acc / d;
        }
    }
    Tensor::new(vec![k, s], x)
}

/// Least-squares solution of `M X ≈ Y` through the thin QR of `M`.
pub fn least_squares(m: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (rows, _) = m.matrix_dims("least_squares")?;
    let (yrows, _) = y.matrix_dims("least_squares")?;
    if rows != yrows {
        return Err(Error::dim(
            "least_squares",
            format!("M has {rows} rows, Y has {yrows}"),
        ));
    }
    let (q, r) = qr_thin(m)?;
    solve_upper(&r, &q.matmul_tn(y)?)
}

/// LU factorisation with partial pivoting for small dense systems.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factorises the row-major `n × n` matrix `a`. Returns `None` when a
    /// pivot is exactly zero or not finite.
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pv == 0.0 || !pv.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Some(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}
