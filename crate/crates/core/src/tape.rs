//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every value on a [`Tape`] is a 2-D array. Operations append nodes to the
//! tape and return a [`Var`] handle; [`Tape::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products into every node that
//! depends on a leaf. The tape is rebuilt for every optimisation step.
//!
//! Besides the usual elementwise and linear-algebra primitives the tape has
//! fused operations for the pieces of the field that would otherwise need a
//! large number of tiny nodes: grouped cross-attention, the vector-neuron
//! invariant layer, grouped latent contractions, positional encoding, layer
//! normalisation and sparse transport products.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable on a tape.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Tag written into checkpoint files.
    const DTYPE: u8;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: u8 = 0;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix used as a constant linear operator.
#[derive(Debug, Clone)]
pub struct Csr<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<T>,
}

impl<T: Real> Csr<T> {
    /// Builds a matrix from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(u32, T)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                debug_assert!((c as usize) < cols);
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// An operator with `cols` columns and no rows yet; see [`Csr::push_row`].
    pub fn empty(cols: usize) -> Self {
        Csr {
            rows: 0,
            cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Appends one row of `(column, value)` entries.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (u32, T)>) {
        for (c, v) in entries {
            debug_assert!((c as usize) < self.cols);
            self.col_idx.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
        self.rows += 1;
    }

    /// `alpha * self`.
    pub fn scaled(&self, alpha: T) -> Self {
        Csr {
            vals: self.vals.iter().map(|&v| v * alpha).collect(),
            ..self.clone()
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .zip(&self.vals[range])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `self * a`.
    pub fn matmul(&self, a: &ArrayView2<T>) -> Array2<T> {
        let k = a.ncols();
        if let (3, Some(flat)) = (k, a.as_slice()) {
            let mut out = Array2::zeros((self.rows, 3));
            for r in 0..self.rows {
                let mut acc = [T::zero(); 3];
                let range = self.row_ptr[r]..self.row_ptr[r + 1];
                for (&c, &w) in self.col_idx[range.clone()].iter().zip(&self.vals[range]) {
                    let base = 3 * c as usize;
                    acc[0] += w * flat[base];
                    acc[1] += w * flat[base + 1];
                    acc[2] += w * flat[base + 2];
                }
                out.row_mut(r).iter_mut().zip(acc).for_each(|(o, v)| *o = v);
            }
            return out;
        }
        let mut out = Array2::zeros((self.rows, k));
        for r in 0..self.rows {
            let mut acc = vec![T::zero(); k];
            for (c, w) in self.row(r) {
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot += w * a[(c, j)];
                }
            }
            out.row_mut(r).iter_mut().zip(acc).for_each(|(o, v)| *o = v);
        }
        out
    }

    /// `self^T * g`.
    pub fn matmul_transposed(&self, g: &ArrayView2<T>) -> Array2<T> {
        let k = g.ncols();
        if let (3, Some(flat)) = (k, g.as_slice()) {
            let mut out = vec![T::zero(); 3 * self.cols];
            for r in 0..self.rows {
                let gr = [flat[3 * r], flat[3 * r + 1], flat[3 * r + 2]];
                let range = self.row_ptr[r]..self.row_ptr[r + 1];
                for (&c, &w) in self.col_idx[range.clone()].iter().zip(&self.vals[range]) {
                    let base = 3 * c as usize;
                    out[base] += w * gr[0];
                    out[base + 1] += w * gr[1];
                    out[base + 2] += w * gr[2];
                }
            }
            return Array2::from_shape_vec((self.cols, 3), out).expect("shape");
        }
        let mut out = Array2::zeros((self.cols, k));
        for r in 0..self.rows {
            for (c, w) in self.row(r) {
                for j in 0..k {
                    out[(c, j)] += w * g[(r, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, w) in self.row(r) {
                out[(r, c)] += w;
            }
        }
        out
    }
}

/// Sample-to-group assignment shared by grouped operations.
pub type Groups = Rc<[usize]>;

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var, T),
    Reshape(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    PosEncode {
        x: Var,
        freqs: usize,
    },
    LayerNorm {
        x: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    GroupContract {
        z: Var,
        x: Var,
        groups: Groups,
        comps: usize,
    },
    VnInvariant {
        z: Var,
        wf: Var,
        comps: usize,
    },
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        groups: Groups,
        tokens: usize,
        heads: usize,
        weights: Vec<T>,
    },
    SparseMatMul(Rc<Csr<T>>, Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(what: &str, a: &Array2<T>, b: &Array2<T>) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim()))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A value no gradient is tracked for.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(what, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a + row` with a `1 x k` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape_err("add_row", av, rv));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `a * row` with a `1 x k` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape_err("mul_row", av, rv));
        }
        let out = av * rv;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    /// `a * col` with a `p x 1` column broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.ncols() != 1 || cv.nrows() != av.nrows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let out = av * cv;
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.dim() != (1, 1) {
            return Err(shape_err("mul_scalar", self.value(a), sv));
        }
        let out = self.value(a) * sv[(0, 0)];
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).mapv(f);
        self.push(out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Ln(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, T::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, T::cos, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, T::sqrt, Op::Sqrt(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / T::lit(v.len() as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    /// Per-row sums as a `p x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a), &[a])
    }

    /// Per-row Euclidean norms clamped below at `eps`, as a `p x 1` column.
    pub fn row_norm(&mut self, a: Var, eps: T) -> Var {
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| {
                r.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps)
            })
            .insert_axis(Axis(1));
        self.push(out, Op::RowNorm(a, eps), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        if v.len() != rows * cols {
            return Err(Error::Shape(format!(
                "reshape {:?} into ({rows}, {cols})",
                v.dim()
            )));
        }
        let out = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("standard layout reshape");
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.ncols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} of {:?}",
                v.dim()
            )));
        }
        let out = v.slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out =
            concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.nrows()) {
            return Err(Error::Shape(format!("gather row {bad} of {:?}", v.dim())));
        }
        let out = v.select(Axis(0), &idx);
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    /// Per element `x`: `(sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x))`.
    pub fn positional_encode(&mut self, x: Var, freqs: usize) -> Var {
        let out = positional_encoding(&self.value(x).view(), freqs);
        self.push(out, Op::PosEncode { x, freqs }, &[x])
    }

    /// Row-wise normalisation to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let k = T::lit(v.ncols() as f64);
        let mut xhat = v.clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / k;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / k;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|a| (a - mean) * inv);
            inv_std.push(inv);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// `out[p, n] = sum_c z[groups[p], n * comps + c] * x[p, c]`.
    ///
    /// Rows of `z` hold column-major vectorised `comps x N` matrices, so this
    /// is `Z_g^T x_p` for every sample.
    pub fn group_contract(&mut self, z: Var, x: Var, groups: Groups, comps: usize) -> Result<Var> {
        let (zv, xv) = (self.value(z), self.value(x));
        if xv.ncols() != comps || zv.ncols() % comps != 0 || groups.len() != xv.nrows() {
            return Err(shape_err("group_contract", zv, xv));
        }
        if groups.iter().any(|&g| g >= zv.nrows()) {
            return Err(Error::Shape(
                "group_contract: group index out of range".into(),
            ));
        }
        let n = zv.ncols() / comps;
        let mut out = Array2::zeros((xv.nrows(), n));
        for (p, &g) in groups.iter().enumerate() {
            let zr = zv.row(g);
            for j in 0..n {
                let mut acc = T::zero();
                for c in 0..comps {
                    acc += zr[j * comps + c] * xv[(p, c)];
                }
                out[(p, j)] = acc;
            }
        }
        Ok(self.push(
            out,
            Op::GroupContract {
                z,
                x,
                groups,
                comps,
            },
            &[z, x],
        ))
    }

    /// Vector-neuron invariant layer applied to every row of `z`.
    ///
    /// Each row is a column-major `comps x N` matrix `Z`; with the learned
    /// frame `F = Z W_f` (`comps x comps`) the output row is `vec(F^T Z)`.
    /// Any orthogonal `R` acting on the left of `Z` cancels.
    pub fn vn_invariant(&mut self, z: Var, wf: Var, comps: usize) -> Result<Var> {
        let (zv, wv) = (self.value(z), self.value(wf));
        let n = wv.nrows();
        if wv.ncols() != comps || zv.ncols() != comps * n {
            return Err(shape_err("vn_invariant", zv, wv));
        }
        let mut out = Array2::zeros(zv.dim());
        for (zr, mut orow) in zv.rows().into_iter().zip(out.rows_mut()) {
            let frame = vn_frame(zr.as_slice().expect("contiguous"), wv, comps);
            for j in 0..n {
                for k in 0..comps {
                    let mut acc = T::zero();
                    for c in 0..comps {
                        acc += frame[c * comps + k] * zr[j * comps + c];
                    }
                    orow[j * comps + k] = acc;
                }
            }
        }
        Ok(self.push(out, Op::VnInvariant { z, wf, comps }, &[z, wf]))
    }

    /// Multi-head cross-attention of one query token per sample onto the
    /// `tokens` key/value rows of its group.
    ///
    /// `q` is `P x H`; `k` and `v` are `(G * tokens) x H` with the tokens of
    /// group `g` in rows `g * tokens .. (g + 1) * tokens`. Heads split the
    /// hidden width into contiguous blocks. Output is the concatenation of
    /// the heads, `P x H`.
    pub fn cross_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Groups,
        tokens: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.ncols();
        if kv.dim() != vv.dim() || kv.ncols() != hidden || groups.len() != qv.nrows() {
            return Err(shape_err("cross_attention", qv, kv));
        }
        if heads == 0 || hidden % heads != 0 || tokens == 0 || kv.nrows() % tokens != 0 {
            return Err(Error::Shape(format!(
                "cross_attention: hidden {hidden}, heads {heads}, tokens {tokens}, rows {}",
                kv.nrows()
            )));
        }
        let n_groups = kv.nrows() / tokens;
        if groups.iter().any(|&g| g >= n_groups) {
            return Err(Error::Shape(
                "cross_attention: group index out of range".into(),
            ));
        }
        let dh = hidden / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let p_count = qv.nrows();
        let mut weights = vec![T::zero(); p_count * heads * tokens];
        let mut out = Array2::zeros((p_count, hidden));
        let mut scores = vec![T::zero(); tokens];
        for (p, &g) in groups.iter().enumerate() {
            let qr = qv.row(p);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut max = T::neg_infinity();
                for (t, slot) in scores.iter_mut().enumerate() {
                    let kr = kv.row(g * tokens + t);
                    let mut acc = T::zero();
                    for c in cols.clone() {
                        acc += qr[c] * kr[c];
                    }
                    *slot = acc * scale;
                    max = max.max(*slot);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let w = &mut weights[(p * heads + h) * tokens..(p * heads + h + 1) * tokens];
                for (slot, s) in w.iter_mut().zip(&scores) {
                    *slot = *s / total;
                }
                for (t, &a) in w.iter().enumerate() {
                    let vr = vv.row(g * tokens + t);
                    for c in cols.clone() {
                        out[(p, c)] += a * vr[c];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::CrossAttention {
                q,
                k,
                v,
                groups,
                tokens,
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// `m * a` for a constant sparse `m`.
    pub fn sparse_matmul(&mut self, m: Rc<Csr<T>>, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() != m.cols {
            return Err(Error::Shape(format!(
                "sparse_matmul: operator {:?} with {:?}",
                m.shape(),
                av.dim()
            )));
        }
        let out = m.matmul(&av.view());
        Ok(self.push(out, Op::SparseMatMul(m, a), &[a]))
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Array2::ones((1, 1)));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
            needs: self.nodes.iter().map(|n| n.needs_grad).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Array2<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.dot(&val(*b).t()));
                }
                if self.wants(*b) {
                    send(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                if self.wants(*b) {
                    send(*b, -g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g * val(*b));
                }
                if self.wants(*b) {
                    send(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.wants(*a) {
                    send(*a, g / bv);
                }
                if self.wants(*b) {
                    let mut d = g * out;
                    d /= bv;
                    send(*b, -d);
                }
            }
            Op::Scale(a, c) => send(*a, g * *c),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if self.wants(*row) {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.wants(*a) {
                    send(*a, g * val(*row));
                }
                if self.wants(*row) {
                    send(*row, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.wants(*a) {
                    send(*a, g * val(*col));
                }
                if self.wants(*col) {
                    send(*col, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulScalar(a, s) => {
                if self.wants(*a) {
                    send(*a, g * val(*s)[(0, 0)]);
                }
                if self.wants(*s) {
                    let d = Zip::from(g)
                        .and(val(*a))
                        .fold(T::zero(), |acc, &x, &y| acc + x * y);
                    send(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero()
                    }
                });
                send(*a, d);
            }
            Op::Softplus(a) => {
                let sig = val(*a).mapv(|x| T::one() / (T::one() + (-x).exp()));
                send(*a, g * &sig)
            }
            Op::Exp(a) => send(*a, g * out),
            Op::Ln(a) => send(*a, g / val(*a)),
            Op::Sin(a) => send(*a, g * &val(*a).mapv(T::cos)),
            Op::Cos(a) => send(*a, -(g * &val(*a).mapv(T::sin))),
            Op::Square(a) => send(*a, g * val(*a) * T::lit(2.0)),
            Op::Sqrt(a) => send(*a, g / &(out * T::lit(2.0))),
            Op::ClampMin(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= *floor {
                        *d = T::zero()
                    }
                });
                send(*a, d);
            }
            Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[(0, 0)])),
            Op::Mean(a) => {
                let n = T::lit(val(*a).len() as f64);
                send(*a, Array2::from_elem(val(*a).dim(), g[(0, 0)] / n));
            }
            Op::RowSum(a) => {
                let mut d = Array2::zeros(val(*a).dim());
                d += g;
                send(*a, d);
            }
            Op::RowNorm(a, eps) => {
                let av = val(*a);
                let mut d = av.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let n = out[(r, 0)];
                    let raw: T = av.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
                    if raw <= *eps {
                        row.fill(T::zero());
                    } else {
                        let f = g[(r, 0)] / n;
                        row.mapv_inplace(|x| x * f);
                    }
                }
                send(*a, d);
            }
            Op::Reshape(a) => {
                let dim = val(*a).dim();
                let d = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(dim)
                    .expect("standard layout reshape");
                send(*a, d);
            }
            Op::Transpose(a) => send(*a, g.t().as_standard_layout().to_owned()),
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.wants(*p) {
                        send(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(r);
                }
                send(*a, d);
            }
            Op::PosEncode { x, freqs } => {
                let xv = val(*x);
                let mut d = Array2::zeros(xv.dim());
                let w = 2 * freqs;
                for ((p, j), &xpj) in xv.indexed_iter() {
                    let mut acc = T::zero();
                    for l in 0..*freqs {
                        let f = T::lit(std::f64::consts::PI * (1u64 << l) as f64);
                        let (s, c) = (f * xpj).sin_cos();
                        acc += g[(p, j * w + 2 * l)] * f * c - g[(p, j * w + 2 * l + 1)] * f * s;
                    }
                    d[(p, j)] = acc;
                }
                send(*x, d);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let k = T::lit(xhat.ncols() as f64);
                let mut d = Array2::zeros(xhat.dim());
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gx = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..drow.len() {
                        drow[c] = inv_std[r] / k * (k * gr[c] - sum_g - xr[c] * sum_gx);
                    }
                }
                send(*x, d);
            }
            Op::GroupContract {
                z,
                x,
                groups,
                comps,
            } => {
                let (zv, xv) = (val(*z), val(*x));
                let n = zv.ncols() / comps;
                if self.wants(*z) {
                    let mut dz = Array2::zeros(zv.dim());
                    for (p, &gi) in groups.iter().enumerate() {
                        for j in 0..n {
                            let gp = g[(p, j)];
                            for c in 0..*comps {
                                dz[(gi, j * comps + c)] += gp * xv[(p, c)];
                            }
                        }
                    }
                    send(*z, dz);
                }
                if self.wants(*x) {
                    let mut dx = Array2::zeros(xv.dim());
                    for (p, &gi) in groups.iter().enumerate() {
                        for j in 0..n {
                            let gp = g[(p, j)];
                            for c in 0..*comps {
                                dx[(p, c)] += gp * zv[(gi, j * comps + c)];
                            }
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::VnInvariant { z, wf, comps } => {
                let (zv, wv) = (val(*z), val(*wf));
                let c_n = *comps;
                let n = wv.nrows();
                let mut dz = Array2::zeros(zv.dim());
                let mut dw = Array2::zeros(wv.dim());
                for (i, zr) in zv.rows().into_iter().enumerate() {
                    let zs = zr.as_slice().expect("contiguous");
                    let frame = vn_frame(zs, wv, c_n);
                    let gr = g.row(i);
                    // dF[c, k] = sum_j Z[c, j] G[k, j]
                    let mut dframe = vec![T::zero(); c_n * c_n];
                    for c in 0..c_n {
                        for k in 0..c_n {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += zs[j * c_n + c] * gr[j * c_n + k];
                            }
                            dframe[c * c_n + k] = acc;
                        }
                    }
                    for j in 0..n {
                        for c in 0..c_n {
                            let mut acc = T::zero();
                            for k in 0..c_n {
                                acc += frame[c * c_n + k] * gr[j * c_n + k];
                                acc += dframe[c * c_n + k] * wv[(j, k)];
                            }
                            dz[(i, j * c_n + c)] += acc;
                            for k in 0..c_n {
                                dw[(j, k)] += zs[j * c_n + c] * dframe[c * c_n + k];
                            }
                        }
                    }
                }
                if self.wants(*z) {
                    send(*z, dz);
                }
                if self.wants(*wf) {
                    send(*wf, dw);
                }
            }
            Op::CrossAttention {
                q,
                k,
                v,
                groups,
                tokens,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let hidden = qv.ncols();
                let dh = hidden / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut da = vec![T::zero(); *tokens];
                for (p, &gi) in groups.iter().enumerate() {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let w = &weights[(p * heads + h) * tokens..(p * heads + h + 1) * tokens];
                        let mut dot = T::zero();
                        for t in 0..*tokens {
                            let row = gi * tokens + t;
                            let mut acc = T::zero();
                            for c in cols.clone() {
                                acc += g[(p, c)] * vv[(row, c)];
                                dv[(row, c)] += w[t] * g[(p, c)];
                            }
                            da[t] = acc;
                            dot += w[t] * acc;
                        }
                        for t in 0..*tokens {
                            let ds = w[t] * (da[t] - dot) * scale;
                            let row = gi * tokens + t;
                            for c in cols.clone() {
                                dq[(p, c)] += ds * kv[(row, c)];
                                dk[(row, c)] += ds * qv[(p, c)];
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::SparseMatMul(m, a) => send(*a, m.matmul_transposed(&g.view())),
        }
    }
}

fn vn_frame<T: Real>(z: &[T], wf: &Array2<T>, comps: usize) -> Vec<T> {
    let n = wf.nrows();
    let mut frame = vec![T::zero(); comps * comps];
    for c in 0..comps {
        for k in 0..comps {
            let mut acc = T::zero();
            for j in 0..n {
                acc += z[j * comps + c] * wf[(j, k)];
            }
            frame[c * comps + k] = acc;
        }
    }
    frame
}

/// Sinusoidal encoding with frequencies `2^l pi`, `l = 0..freqs`.
pub fn positional_encoding<T: Real>(x: &ArrayView2<T>, freqs: usize) -> Array2<T> {
    let w = 2 * freqs;
    let mut out = Array2::zeros((x.nrows(), x.ncols() * w));
    for ((p, j), &v) in x.indexed_iter() {
        for l in 0..freqs {
            let f = T::lit(std::f64::consts::PI * (1u64 << l) as f64);
            let (s, c) = (f * v).sin_cos();
            out[(p, j * w + 2 * l)] = s;
            out[(p, j * w + 2 * l + 1)] = c;
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
    needs: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`.
    ///
    /// Values that do not depend on any leaf are rejected; leaves the loss
    /// does not depend on receive zeros.
    pub fn wrt(&self, v: Var) -> Result<Array2<T>> {
        self.check(v)?;
        Ok(self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0])))
    }

    /// Like [`Gradients::wrt`] but moves the buffer out.
    pub fn take(&mut self, v: Var) -> Result<Array2<T>> {
        self.check(v)?;
        Ok(self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0])))
    }

    fn check(&self, v: Var) -> Result<()> {
        match self.needs.get(v.0) {
            Some(true) => Ok(()),
            Some(false) => Err(Error::Detached(format!("node {} is a constant", v.0))),
            None => Err(Error::Detached(format!("node {} is not on this tape", v.0))),
        }
    }
}
