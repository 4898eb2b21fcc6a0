//! Minimal tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a row-major `f64` matrix; sequences are rows and
//! features are columns. Operations append a node holding the forward value and
//! enough context to push gradients back to their inputs. `backward` walks the
//! tape once in reverse and returns the gradient of each parameter leaf.
//!
//! The op set is exactly what the transformer needs: matrix products,
//! broadcasting adds, SiLU, row layer norm, row softmax, rotary position
//! rotation, slicing/concatenation and a mean-squared-error head.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Rope(Var, Rc<Mat>, Rc<Mat>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Mse(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by the id given to [`Tape::param`].
pub struct ParamGrads(pub Vec<(usize, Mat)>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: usize, value: Mat) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Rotates consecutive column pairs `(2i, 2i+1)` of each row by the angle
    /// whose cosine/sine are `cos[row, i]`, `sin[row, i]`.
    pub fn rope(&mut self, a: Var, cos: Rc<Mat>, sin: Rc<Mat>) -> Var {
        let v = rotate_pairs(self.value(a), &cos, &sin, false);
        let ng = self.ng(a);
        self.push(v, Op::Rope(a, cos, sin), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), ids);
        let ng = self.ng(table);
        self.push(v, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Mean squared error against a constant target, as a `[1, 1]` value.
    pub fn mse(&mut self, a: Var, target: Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "mse shape mismatch");
        let n = x.len() as f64;
        let sq: f64 = Zip::from(x)
            .and(&target)
            .fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), sq / n), Op::Mse(a, target), ng)
    }

    /// Back-propagates `seed · d(output)` and returns parameter gradients
    /// summed per parameter id, in ascending id order.
    pub fn backward(&self, output: Var, seed: f64) -> ParamGrads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Array2::from_elem(out.dim(), seed));
        let mut params: Vec<(usize, Mat)> = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, g)),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        let sg = sigmoid(x);
                        *d *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let mut ga = g;
                    for ((mut grow, yrow), inv) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let n = grow.len() as f64;
                        let mean_g = grow.sum() / n;
                        let mean_gy = grow.dot(&yrow) / n;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow).and(&yrow).for_each(|d, &yv| *d = yv * (*d - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Rope(a, cos, sin) => {
                    let ga = rotate_pairs(&g, cos, sin, true);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            let gp = g.slice(s![.., off..off + w]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        off += w;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let scale = 2.0 * g[[0, 0]] / x.len() as f64;
                    let mut ga = x - target;
                    ga *= scale;
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        params.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(usize, Mat)> = Vec::with_capacity(params.len());
        for (id, g) in params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => *acc += &g,
                _ => merged.push((id, g)),
            }
        }
        ParamGrads(merged)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

/// Applies the pairwise rotation, or its transpose when `inverse` is set.
pub fn rotate_pairs(x: &Mat, cos: &Mat, sin: &Mat, inverse: bool) -> Mat {
    let (rows, cols) = x.dim();
    assert_eq!(cols % 2, 0, "rotary width must be even");
    assert_eq!(cos.dim(), (rows, cols / 2), "rotary table shape");
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for i in 0..cols / 2 {
            let (c, sn) = (cos[[r, i]], sign * sin[[r, i]]);
            let (x0, x1) = (x[[r, 2 * i]], x[[r, 2 * i + 1]]);
            out[[r, 2 * i]] = x0 * c - x1 * sn;
            out[[r, 2 * i + 1]] = x0 * sn + x1 * c;
        }
    }
    out
}
