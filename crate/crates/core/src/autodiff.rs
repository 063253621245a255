//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and accumulates gradients for the parameters that were
//! bound with [`Tape::param`].

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::nn::{Gradients, ParamId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    OneMinus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Repeats a `1 x n` row `m` times.
    BroadcastRows(Var),
    /// Row `b * parts + p` of the output is row `b` of input `p`.
    InterleaveRows(Vec<Var>),
    /// Mean over consecutive groups of rows.
    GroupMean(Var, usize),
    Attention(Box<AttentionCache>),
    MeanSquare(Var),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    tokens: usize,
    heads: usize,
    /// Softmax weights, one `tokens x tokens` block per (group, head),
    /// stacked as `[groups * heads * tokens, tokens]`.
    probs: Array2<f64>,
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast_rows expects a single row");
        let v = r.broadcast((m, r.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastRows(row))
    }

    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let p = parts.len();
        let (m, n) = self.value(parts[0]).dim();
        let mut out = Array2::zeros((m * p, n));
        for (j, &part) in parts.iter().enumerate() {
            let pv = self.value(part);
            assert_eq!(pv.dim(), (m, n), "interleave_rows: shapes differ");
            out.slice_mut(s![j..;p, ..]).assign(pv);
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()))
    }

    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % group, 0, "group_mean: rows not divisible by group size");
        let g = x.nrows() / group;
        let mut out = Array2::zeros((g, x.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&x.slice(s![i * group..(i + 1) * group, ..]).mean_axis(Axis(0)).expect("nonempty"));
        }
        self.push(out, Op::GroupMean(a, group))
    }

    /// Scaled dot-product self-attention within consecutive groups of
    /// `tokens` rows, split into `heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(rows % tokens == 0 && d % heads == 0, "attention: bad shapes");
        let groups = rows / tokens;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Array2::zeros((groups * heads * tokens, tokens));
        for g in 0..groups {
            let r = g * tokens..(g + 1) * tokens;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![r.clone(), c.clone()]);
                let kb = kv.slice(s![r.clone(), c.clone()]);
                let vb = vv.slice(s![r.clone(), c.clone()]);
                let mut sc = qb.dot(&kb.t()) * scale;
                for mut row in sc.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                out.slice_mut(s![r.clone(), c]).assign(&sc.dot(&vb));
                let p0 = (g * heads + h) * tokens;
                probs.slice_mut(s![p0..p0 + tokens, ..]).assign(&sc);
            }
        }
        self.push(out, Op::Attention(Box::new(AttentionCache { q, k, v, tokens, heads, probs })))
    }

    /// Mean of squared entries, as a `1 x 1` node.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanSquare(a))
    }

    /// Gradients of the scalar node `loss` with respect to every bound
    /// parameter, shaped like `params`.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(params);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => *out.get_mut(*id) += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let ga = ndarray::Zip::from(&g).and(&node.value).map_collect(|g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = ndarray::Zip::from(&g).and(&node.value).map_collect(|g, y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastRows(row) => acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::InterleaveRows(parts) => {
                    let p = parts.len();
                    for (j, &part) in parts.iter().enumerate() {
                        acc(&mut grads, part, g.slice(s![j..;p, ..]).to_owned());
                    }
                }
                Op::GroupMean(a, group) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let inv = 1.0 / *group as f64;
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.assign(&(&g.row(r / group) * inv));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = self.attention_backward(cache, &g);
                    acc(&mut grads, cache.q, gq);
                    acc(&mut grads, cache.k, gk);
                    acc(&mut grads, cache.v, gv);
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let c = 2.0 * g[[0, 0]] / x.len() as f64;
                    acc(&mut grads, *a, x * c);
                }
            }
        }
        out
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (rows, d) = qv.dim();
        let (tokens, heads) = (c.tokens, c.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Array2::zeros((rows, d));
        let mut gk = Array2::zeros((rows, d));
        let mut gv = Array2::zeros((rows, d));
        for grp in 0..rows / tokens {
            let r = grp * tokens..(grp + 1) * tokens;
            for h in 0..heads {
                let col = h * dh..(h + 1) * dh;
                let p0 = (grp * heads + h) * tokens;
                let p = c.probs.slice(s![p0..p0 + tokens, ..]);
                let go = g.slice(s![r.clone(), col.clone()]);
                let qb = qv.slice(s![r.clone(), col.clone()]);
                let kb = kv.slice(s![r.clone(), col.clone()]);
                let vb = vv.slice(s![r.clone(), col.clone()]);
                gv.slice_mut(s![r.clone(), col.clone()]).assign(&p.t().dot(&go));
                let gp = go.dot(&vb.t());
                // Softmax Jacobian, row by row.
                let mut gs = &gp * &p;
                for (mut row, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&prow, |x, &pi| *x -= pi * dot);
                }
                gs *= scale;
                gq.slice_mut(s![r.clone(), col.clone()]).assign(&gs.dot(&kb));
                gk.slice_mut(s![r.clone(), col.clone()]).assign(&gs.t().dot(&qb));
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Init};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a loss exercising every op from parameters of fixed shapes.
    fn every_op_loss(tape: &mut Tape, p: &ParamSet, ids: &[ParamId]) -> Var {
        let a = tape.param(p, ids[0]); // 4 x 3
        let b = tape.param(p, ids[1]); // 3 x 6
        let row = tape.param(p, ids[2]); // 1 x 6
        let ab = tape.matmul(a, b);
        let x = tape.add_row(ab, row);
        let t = tape.tanh(x);
        let sg = tape.sigmoid(x);
        let om = tape.one_minus(sg);
        let m = tape.mul(t, om);
        let sc = tape.scale(m, 0.7);
        let left = tape.slice_cols(sc, 0, 2);
        let right = tape.slice_cols(sc, 2, 6);
        let cat = tape.concat_cols(&[right, left]);
        let rows = tape.concat_rows(&[cat, sc]);
        let br = tape.broadcast_rows(row, 8);
        let sum = tape.add(rows, br);
        let diff = tape.sub(sum, br);
        let tokens = tape.interleave_rows(&[diff, sum]); // 16 x 6
        let keys = sum_like(tape, tokens);
        let att = tape.attention(tokens, keys, tokens, 4, 2);
        let pooled = tape.group_mean(att, 4);
        tape.mean_square(pooled)
    }

    fn sum_like(tape: &mut Tape, v: Var) -> Var {
        tape.scale(v, -1.3)
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamSet::new();
        let ids = vec![
            p.add("a", 4, 3, Init::Uniform(1.0), &mut rng),
            p.add("b", 3, 6, Init::Uniform(1.0), &mut rng),
            p.add("row", 1, 6, Init::Uniform(1.0), &mut rng),
        ];
        let loss = |p: &ParamSet| {
            let mut tape = Tape::new();
            let l = every_op_loss(&mut tape, p, &ids);
            tape.scalar(l)
        };
        let grad = |p: &ParamSet| {
            let mut tape = Tape::new();
            let l = every_op_loss(&mut tape, p, &ids);
            tape.backward(l, p)
        };
        let report = grad_check(&p, 1e-5, 200, 1, loss, grad);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, p.n_coords());
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[0.5], [-1.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[-1.5], [-2.5]]);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0));
        let zero = tape.constant(Array2::zeros((6, 4)));
        // Zero queries give uniform weights, so each output row is the group mean.
        let out = tape.attention(zero, x, x, 3, 2);
        let mean = tape.group_mean(x, 3);
        for r in 0..6 {
            for c in 0..4 {
                assert!((tape.value(out)[[r, c]] - tape.value(mean)[[r / 3, c]]).abs() < 1e-12);
            }
        }
    }
}
