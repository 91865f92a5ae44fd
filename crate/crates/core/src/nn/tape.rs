//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Parameters
//! are read in place from a borrowed [`ParamStore`]; calling
//! [`Tape::backward`] walks the record in reverse and accumulates parameter
//! gradients into a [`Grads`]. Every tensor is two-dimensional; vectors are
//! `1 × n` rows or `n × 1` columns and scalars are `1 × 1`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, Mat, ParamId, ParamStore};
use super::sparse::Csr;

const LOG_FLOOR: f64 = f64::MIN_POSITIVE;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    Pick(Var, Vec<(usize, usize)>),
    ScatterCols(Var, Vec<usize>),
    SpMM(Arc<Csr>, Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Training-mode tape; dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    /// Adds the `1 × m` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1, "add_row expects a 1×m bias");
        let out = self.value(a) + b;
        self.push(Op::AddRow(a, bias), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.ncols(), 1, "mul_col expects an n×1 column");
        let out = self.value(a) * c;
        self.push(Op::MulCol(a, col), out)
    }

    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let out = self.value(a) * &m;
        self.push(Op::MulConst(a, m), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Natural log; inputs are floored at the smallest positive normal.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(LOG_FLOOR).ln());
        self.push(Op::Log(a), out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), None);
        self.push(Op::Softmax(a), out)
    }

    /// Row-wise softmax restricted to entries where `keep` is true. Masked
    /// entries are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, keep: &Array2<bool>) -> Var {
        let out = softmax_rows(self.value(a), Some(keep));
        self.push(Op::Softmax(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    /// Selects rows of `table` (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let out = t.select(Axis(0), idx);
        self.push(Op::Gather(table, idx.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Sum of all entries, as a `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, as a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(Op::MeanRows(a), out)
    }

    /// Gathers `a[r, c]` for each coordinate into an `n × 1` column.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let out = Mat::from_shape_fn((coords.len(), 1), |(k, _)| av[coords[k]]);
        self.push(Op::Pick(a, coords.to_vec()), out)
    }

    /// Maps column `j` of `a` onto column `cols[j]` of an `n × width` result,
    /// summing columns that land on the same target.
    pub fn scatter_cols(&mut self, a: Var, cols: &[usize], width: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), cols.len(), "scatter_cols index count");
        let mut out = Mat::zeros((av.nrows(), width));
        for (j, &c) in cols.iter().enumerate() {
            let mut dst = out.column_mut(c);
            dst += &av.column(j);
        }
        self.push(Op::ScatterCols(a, cols.to_vec()), out)
    }

    /// Sparse-dense product `a · x` with a constant sparse `a`.
    pub fn spmm(&mut self, a: Arc<Csr>, x: Var) -> Var {
        let out = a.matmul(self.value(x));
        self.push(Op::SpMM(a, x), out)
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let shape = self.shape(a);
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        let keep = 1.0 - p;
        let mask = Mat::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_const(a, mask)
    }

    /// Back-propagates from the scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut out = Grads::for_store(self.params);
        self.backward_into(loss, &mut out);
        out
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(a, c) => {
                    let ga = &g * self.value(*c);
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *c, gc);
                }
                Op::MulConst(a, m) => acc(&mut grads, *a, &g * m),
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Relu(a) => {
                    let y = y.unwrap();
                    let ga = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| if yv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = y.unwrap();
                    let ga = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = y.unwrap();
                    let ga = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = ndarray::Zip::from(&g)
                        .and(x)
                        .map_collect(|&gv, &xv| gv / xv.max(LOG_FLOOR));
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = y.unwrap();
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = gy - y * &dot;
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gamma_v;
                    let m = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for (r, is) in inv_std.iter().enumerate() {
                        let d = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = d.sum();
                        let sum_dx = (&d * &xh).sum();
                        let mut row = gx.row_mut(r);
                        for j in 0..xhat.ncols() {
                            row[j] = is / m * (m * d[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gather(table, idx) => {
                    // Parameter tables receive row updates directly instead of
                    // a dense intermediate of the full table size.
                    if let Op::Param(pid) = self.nodes[table.0].op {
                        let slot = out.slot_mut(pid, self.params.get(pid).dim());
                        for (k, &r) in idx.iter().enumerate() {
                            let mut dst = slot.row_mut(r);
                            dst += &g.row(k);
                        }
                    } else {
                        let mut gt = Mat::zeros(self.shape(*table));
                        for (k, &r) in idx.iter().enumerate() {
                            let mut dst = gt.row_mut(r);
                            dst += &g.row(k);
                        }
                        acc(&mut grads, *table, gt);
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (n, _) = self.shape(*a);
                    let row = &g / n as f64;
                    let ga = row
                        .broadcast(self.shape(*a))
                        .expect("broadcast mean grad")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, coords) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (k, &c) in coords.iter().enumerate() {
                        ga[c] += g[[k, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterCols(a, cols) => {
                    let ga = g.select(Axis(1), cols);
                    acc(&mut grads, *a, ga);
                }
                Op::SpMM(m, x) => acc(&mut grads, *x, m.t_matmul(&g)),
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
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

/// Numerically stable row-wise softmax with an optional keep-mask.
pub fn softmax_rows(a: &Mat, keep: Option<&Array2<bool>>) -> Mat {
    if let Some(k) = keep {
        assert_eq!(k.dim(), a.dim(), "softmax mask shape");
    }
    let mut out = Mat::zeros(a.dim());
    for (i, row) in a.rows().into_iter().enumerate() {
        let kept = |j: usize| keep.is_none_or(|k| k[[i, j]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| kept(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, v) in row.iter().enumerate() {
            if kept(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use ndarray::array;
    use rand::SeedableRng;

    fn store_with(values: &[(&str, Mat)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (n, v) in values {
            store.add(*n, v.clone());
        }
        store
    }

    #[test]
    fn softmax_mask_zeroes_and_normalises() {
        let a = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let keep = array![[true, false, true], [false, false, false]];
        let y = softmax_rows(&a, Some(&keep));
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y.row(0).sum() - 1.0).abs() < 1e-15);
        assert_eq!(y.row(1).sum(), 0.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1.0, 2.0]]);
        let y = t.dropout(x, 0.5);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let store = ParamStore::new();
        let draw = || {
            let mut t = Tape::training(&store, ChaCha8Rng::seed_from_u64(3));
            let x = t.constant(Mat::ones((4, 4)));
            let y = t.dropout(x, 0.5);
            t.value(y).clone()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let store = store_with(&[
            ("w", array![[0.3, -0.2, 0.1], [0.5, 0.4, -0.6]]),
            ("b", array![[0.05, -0.1, 0.2]]),
            ("g", array![[1.1, 0.9, 1.0]]),
            ("beta", array![[0.0, 0.1, -0.1]]),
            ("emb", array![[0.2, -0.3], [0.7, 0.1], [-0.4, 0.6]]),
        ]);
        let loss_fn = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let emb = t.param(store.id("emb").unwrap());
            let x = t.gather_rows(emb, &[2, 0, 2]);
            let w = t.param(store.id("w").unwrap());
            let b = t.param(store.id("b").unwrap());
            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let g = t.param(store.id("g").unwrap());
            let beta = t.param(store.id("beta").unwrap());
            let h = t.layer_norm(h, g, beta);
            let h = t.tanh(h);
            let att = t.matmul_t(h, h);
            let keep = array![[true, true, false], [true, true, true], [false, true, true]];
            let p = t.masked_softmax(att, &keep);
            let z = t.matmul(p, h);
            let col = t.slice_cols(z, 0, 1);
            let sig = t.sigmoid(col);
            let z = t.mul_col(z, sig);
            let z = t.relu(z);
            let z2 = t.concat_cols(&[z, h]);
            let s = t.scatter_cols(z2, &[0, 1, 1, 2, 0, 3], 4);
            let sm = t.softmax(s);
            let picked = t.pick(sm, &[(0, 1), (1, 3), (2, 0)]);
            let lp = t.log(picked);
            let m = t.mean(lp);
            let loss = t.scale(m, -1.0);
            (t.value(loss)[[0, 0]], t.backward(loss))
        };
        let report = check_param_gradients(&store, loss_fn, 1e-6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn spmm_and_mean_rows_gradients() {
        let store = store_with(&[("x", array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]])]);
        let a = Arc::new(Csr::from_triplets(
            3,
            3,
            vec![(0, 1, 0.5), (1, 0, 1.0), (2, 2, 2.0), (2, 0, -1.0)],
        ));
        let loss_fn = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let x = t.param(store.id("x").unwrap());
            let y = t.spmm(a.clone(), x);
            let y = t.tanh(y);
            let m = t.mean_rows(y);
            let tr = t.transpose(m);
            let sq = t.mul(tr, tr);
            let r = t.slice_rows(sq, 1, 1);
            let both = t.concat_rows(&[sq, r]);
            let loss = t.sum(both);
            (t.value(loss)[[0, 0]], t.backward(loss))
        };
        let report = check_param_gradients(&store, loss_fn, 1e-6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
