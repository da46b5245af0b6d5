//! Record-and-replay reverse-mode differentiation over a fixed operation
//! vocabulary: dense layers, softplus/sigmoid, concatenation, the volume
//! rendering weight quadrature, and the small linear/quadratic reductions
//! the losses are made of.
//!
//! The tape is eager: building an op computes its value immediately, so a
//! finished graph holds the full forward state. `backward` then walks the
//! node list once in reverse, accumulating gradients only into `param`
//! leaves. Evaluation order is fixed by construction, which keeps gradients
//! bitwise deterministic.

use crate::math::{
    dense_backward, dense_backward_params_only, dense_forward, sigmoid, softplus, Real, Tensor,
};

pub type NodeId = usize;

enum Op {
    Constant,
    Param { slot: usize },
    /// `y = x · wᵀ + b` row-wise; `w` is `(out, in)`, `b` `(out, 1)`.
    Dense { w: NodeId, b: NodeId, x: NodeId },
    Softplus { x: NodeId },
    Sigmoid { x: NodeId },
    /// Column-wise concatenation of same-height blocks.
    ConcatCols { parts: Vec<NodeId> },
    /// Repeats a `(1, c)` row `rows` times.
    BroadcastRow { row: NodeId, rows: usize },
    /// Same data, new shape.
    Reshape { x: NodeId },
    /// `out[r, i] = Σ_j m[i, j] · x[r, j]` with a small square `m`.
    ApplyMatrixRows { m: NodeId, x: NodeId },
    /// `out[r, :] = s[r] · x[r, :]` with `s` of shape `(rows, 1)`.
    RowScale { x: NodeId, s: NodeId },
    /// `out = s · x` with scalar node `s`.
    ScaleByScalar { x: NodeId, s: NodeId },
    /// `(n, c) -> (1, c)` sum over rows.
    ColSum { x: NodeId },
    /// Sum of all entries, `(1, 1)`.
    SumAll { x: NodeId },
    /// Scalar `Σ_i coeff_i · x_i` with constant coefficients.
    DotConst { x: NodeId, coeff: Vec<Real> },
    /// Elementwise `x + c`; the shift is constant so only `x` is kept.
    AddConst { x: NodeId },
    /// Elementwise `x ⊙ c`.
    MulConst { x: NodeId, c: Vec<Real> },
    /// Same-shape `Σ_k a_k · x_k`.
    LinComb { terms: Vec<(Real, NodeId)> },
    /// Scalar `Σ_i coeff_i · x_i²`.
    WeightedSumSquares { x: NodeId, coeff: Vec<Real> },
    /// Volume rendering weights from densities and segment lengths.
    RenderWeights { sigma: NodeId, deltas: Vec<Real> },
    /// Rows `start..start + len` of `x`.
    SliceRows { x: NodeId, start: usize, len: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward recording plus reverse-mode gradient evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    slots: usize,
}

impl Tape {
    pub fn new(slots: usize) -> Self {
        Tape { nodes: Vec::new(), slots }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> Real {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data[0]
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: Real) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a trainable tensor; gradients accumulate under `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> NodeId {
        debug_assert!(slot < self.slots);
        self.push(value, Op::Param { slot })
    }

    pub fn dense(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let y = dense_forward(&self.nodes[w].value, &self.nodes[b].value, &self.nodes[x].value);
        self.push(y, Op::Dense { w, b, x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in &mut y.data {
            *v = softplus(*v);
        }
        self.push(y, Op::Softplus { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in &mut y.data {
            *v = sigmoid(*v);
        }
        self.push(y, Op::Sigmoid { x })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut y = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let src = &self.nodes[p].value;
                debug_assert_eq!(src.rows, rows);
                y.row_mut(r)[off..off + src.cols].copy_from_slice(src.row(r));
                off += src.cols;
            }
        }
        self.push(y, Op::ConcatCols { parts })
    }

    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> NodeId {
        let src = &self.nodes[row].value;
        debug_assert_eq!(src.rows, 1);
        let cols = src.cols;
        let mut y = Tensor::zeros(rows, cols);
        for r in 0..rows {
            y.row_mut(r).copy_from_slice(&src.data);
        }
        self.push(y, Op::BroadcastRow { row, rows })
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = &self.nodes[x].value;
        debug_assert_eq!(src.len(), rows * cols);
        let y = Tensor::from_vec(rows, cols, src.data.clone());
        self.push(y, Op::Reshape { x })
    }

    pub fn apply_matrix_rows(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let mt = &self.nodes[m].value;
        let xt = &self.nodes[x].value;
        debug_assert_eq!(mt.rows, mt.cols);
        debug_assert_eq!(mt.cols, xt.cols);
        let mut y = Tensor::zeros(xt.rows, xt.cols);
        for r in 0..xt.rows {
            let xr = xt.row(r);
            let yr = y.row_mut(r);
            for i in 0..mt.rows {
                let mut acc = 0.0;
                for j in 0..mt.cols {
                    acc += mt.at(i, j) * xr[j];
                }
                yr[i] = acc;
            }
        }
        self.push(y, Op::ApplyMatrixRows { m, x })
    }

    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xt = &self.nodes[x].value;
        let st = &self.nodes[s].value;
        debug_assert_eq!(st.cols, 1);
        debug_assert_eq!(st.rows, xt.rows);
        let mut y = xt.clone();
        for r in 0..y.rows {
            let f = st.data[r];
            for v in y.row_mut(r) {
                *v *= f;
            }
        }
        self.push(y, Op::RowScale { x, s })
    }

    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let f = self.scalar(s);
        let mut y = self.nodes[x].value.clone();
        for v in &mut y.data {
            *v *= f;
        }
        self.push(y, Op::ScaleByScalar { x, s })
    }

    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let xt = &self.nodes[x].value;
        let mut y = Tensor::zeros(1, xt.cols);
        for r in 0..xt.rows {
            let xr = xt.row(r);
            for c in 0..xt.cols {
                y.data[c] += xr[c];
            }
        }
        self.push(y, Op::ColSum { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: Real = self.nodes[x].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn dot_const(&mut self, x: NodeId, coeff: Vec<Real>) -> NodeId {
        let xt = &self.nodes[x].value;
        debug_assert_eq!(xt.len(), coeff.len());
        let s: Real = xt.data.iter().zip(&coeff).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::DotConst { x, coeff })
    }

    pub fn add_const(&mut self, x: NodeId, c: Vec<Real>) -> NodeId {
        let xt = &self.nodes[x].value;
        debug_assert_eq!(xt.len(), c.len());
        let mut y = xt.clone();
        for (v, a) in y.data.iter_mut().zip(&c) {
            *v += a;
        }
        self.push(y, Op::AddConst { x })
    }

    pub fn mul_const(&mut self, x: NodeId, c: Vec<Real>) -> NodeId {
        let xt = &self.nodes[x].value;
        debug_assert_eq!(xt.len(), c.len());
        let mut y = xt.clone();
        for (v, a) in y.data.iter_mut().zip(&c) {
            *v *= a;
        }
        self.push(y, Op::MulConst { x, c })
    }

    pub fn lin_comb(&mut self, terms: Vec<(Real, NodeId)>) -> NodeId {
        debug_assert!(!terms.is_empty());
        let shape = {
            let t = &self.nodes[terms[0].1].value;
            (t.rows, t.cols)
        };
        let mut y = Tensor::zeros(shape.0, shape.1);
        for &(a, id) in &terms {
            let t = &self.nodes[id].value;
            debug_assert!(t.rows == shape.0 && t.cols == shape.1);
            for (o, v) in y.data.iter_mut().zip(&t.data) {
                *o += a * v;
            }
        }
        self.push(y, Op::LinComb { terms })
    }

    pub fn weighted_sum_squares(&mut self, x: NodeId, coeff: Vec<Real>) -> NodeId {
        let xt = &self.nodes[x].value;
        debug_assert_eq!(xt.len(), coeff.len());
        let s: Real = xt.data.iter().zip(&coeff).map(|(v, c)| c * v * v).sum();
        self.push(Tensor::scalar(s), Op::WeightedSumSquares { x, coeff })
    }

    /// Discrete volume-rendering weights
    /// `w_k = T_k · (1 − exp(−σ_k δ_k))`, `T_k = exp(−Σ_{j<k} σ_j δ_j)`.
    pub fn render_weights(&mut self, sigma: NodeId, deltas: Vec<Real>) -> NodeId {
        let st = &self.nodes[sigma].value;
        debug_assert_eq!(st.cols, 1);
        debug_assert_eq!(st.rows, deltas.len());
        let mut w = Tensor::zeros(st.rows, 1);
        let mut log_t = 0.0; // accumulated optical depth
        for k in 0..st.rows {
            let a = st.data[k] * deltas[k];
            // NaN is allowed through so divergence surfaces as a non-finite
            // loss rather than a panic
            debug_assert!(!(st.data[k] < 0.0), "densities must be non-negative");
            let t = (-log_t as Real).exp();
            w.data[k] = t * (1.0 - (-a).exp());
            log_t += a;
        }
        self.push(w, Op::RenderWeights { sigma, deltas })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xt = &self.nodes[x].value;
        debug_assert!(start + len <= xt.rows);
        let cols = xt.cols;
        let y = Tensor::from_vec(len, cols, xt.data[start * cols..(start + len) * cols].to_vec());
        self.push(y, Op::SliceRows { x, start, len })
    }

    /// Reverse pass from a scalar node. Returns one gradient tensor per
    /// parameter slot (`None` when the slot does not reach `loss`).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        debug_assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut slot_grads: Vec<Option<Tensor>> = (0..self.slots).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param { slot } => {
                    accumulate(&mut slot_grads[*slot], &gy);
                }
                Op::Dense { w, b, x } => {
                    let wt = &self.nodes[*w].value;
                    let xt = &self.nodes[*x].value;
                    let mut dw = Tensor::zeros(wt.rows, wt.cols);
                    let mut db = Tensor::zeros(wt.rows, 1);
                    if matches!(self.nodes[*x].op, Op::Constant) {
                        // input is a leaf constant; skip the dX half
                        dense_backward_params_only(wt, xt, &gy, &mut dw, &mut db);
                    } else {
                        let dx = dense_backward(wt, xt, &gy, &mut dw, &mut db);
                        add_grad(&mut grads, *x, dx);
                    }
                    add_grad(&mut grads, *w, dw);
                    add_grad(&mut grads, *b, db);
                }
                Op::Softplus { x } => {
                    let xt = &self.nodes[*x].value;
                    let mut dx = gy.clone();
                    for (g, v) in dx.data.iter_mut().zip(&xt.data) {
                        *g *= sigmoid(*v);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let yt = &node.value;
                    let mut dx = gy.clone();
                    for (g, y) in dx.data.iter_mut().zip(&yt.data) {
                        *g *= y * (1.0 - y);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let rows = node.value.rows;
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols;
                        let mut dp = Tensor::zeros(rows, pc);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&gy.row(r)[off..off + pc]);
                        }
                        off += pc;
                        add_grad(&mut grads, p, dp);
                    }
                }
                Op::BroadcastRow { row, rows } => {
                    let cols = node.value.cols;
                    let mut dr = Tensor::zeros(1, cols);
                    for r in 0..*rows {
                        for c in 0..cols {
                            dr.data[c] += gy.at(r, c);
                        }
                    }
                    add_grad(&mut grads, *row, dr);
                }
                Op::Reshape { x } => {
                    let xt = &self.nodes[*x].value;
                    let dx = Tensor::from_vec(xt.rows, xt.cols, gy.data.clone());
                    add_grad(&mut grads, *x, dx);
                }
                Op::ApplyMatrixRows { m, x } => {
                    let mt = &self.nodes[*m].value;
                    let xt = &self.nodes[*x].value;
                    let mut dm = Tensor::zeros(mt.rows, mt.cols);
                    let mut dx = Tensor::zeros(xt.rows, xt.cols);
                    for r in 0..xt.rows {
                        let xr = xt.row(r);
                        let gr = gy.row(r);
                        for i in 0..mt.rows {
                            let g = gr[i];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..mt.cols {
                                dm.data[i * mt.cols + j] += g * xr[j];
                                dx.data[r * xt.cols + j] += g * mt.at(i, j);
                            }
                        }
                    }
                    add_grad(&mut grads, *m, dm);
                    add_grad(&mut grads, *x, dx);
                }
                Op::RowScale { x, s } => {
                    let xt = &self.nodes[*x].value;
                    let st = &self.nodes[*s].value;
                    let mut dx = gy.clone();
                    let mut ds = Tensor::zeros(st.rows, 1);
                    for r in 0..xt.rows {
                        let f = st.data[r];
                        let xr = xt.row(r);
                        let mut acc = 0.0;
                        for (g, xv) in dx.row_mut(r).iter_mut().zip(xr) {
                            acc += *g * *xv;
                            *g *= f;
                        }
                        ds.data[r] = acc;
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *s, ds);
                }
                Op::ScaleByScalar { x, s } => {
                    let xt = &self.nodes[*x].value;
                    let f = self.nodes[*s].value.data[0];
                    let mut dx = gy.clone();
                    let mut acc = 0.0;
                    for (g, xv) in dx.data.iter_mut().zip(&xt.data) {
                        acc += *g * *xv;
                        *g *= f;
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *s, Tensor::scalar(acc));
                }
                Op::ColSum { x } => {
                    let xt = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xt.rows, xt.cols);
                    for r in 0..xt.rows {
                        dx.row_mut(r).copy_from_slice(&gy.data);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::SumAll { x } => {
                    let xt = &self.nodes[*x].value;
                    let g = gy.data[0];
                    let dx = Tensor::from_vec(xt.rows, xt.cols, vec![g; xt.len()]);
                    add_grad(&mut grads, *x, dx);
                }
                Op::DotConst { x, coeff } => {
                    let xt = &self.nodes[*x].value;
                    let g = gy.data[0];
                    let data = coeff.iter().map(|c| g * c).collect();
                    add_grad(&mut grads, *x, Tensor::from_vec(xt.rows, xt.cols, data));
                }
                Op::AddConst { x } => {
                    add_grad(&mut grads, *x, gy);
                }
                Op::MulConst { x, c } => {
                    let mut dx = gy;
                    for (g, f) in dx.data.iter_mut().zip(c) {
                        *g *= f;
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::LinComb { terms } => {
                    for &(a, id) in terms {
                        let mut dt = gy.clone();
                        for g in &mut dt.data {
                            *g *= a;
                        }
                        add_grad(&mut grads, id, dt);
                    }
                }
                Op::WeightedSumSquares { x, coeff } => {
                    let xt = &self.nodes[*x].value;
                    let g = gy.data[0];
                    let data = xt
                        .data
                        .iter()
                        .zip(coeff)
                        .map(|(v, c)| 2.0 * g * c * v)
                        .collect();
                    add_grad(&mut grads, *x, Tensor::from_vec(xt.rows, xt.cols, data));
                }
                Op::RenderWeights { sigma, deltas } => {
                    let st = &self.nodes[*sigma].value;
                    let w = &node.value;
                    let n = st.rows;
                    // dL/dσ_m = δ_m (g_m T_m e^{-a_m} - Σ_{k>m} g_k w_k);
                    // the suffix sums make this O(n).
                    let mut dsigma = Tensor::zeros(n, 1);
                    let mut suffix = 0.0;
                    let mut log_t = vec![0.0; n];
                    let mut acc = 0.0;
                    for k in 0..n {
                        log_t[k] = acc;
                        acc += st.data[k] * deltas[k];
                    }
                    for m in (0..n).rev() {
                        let a_m = st.data[m] * deltas[m];
                        let t_m = (-log_t[m] as Real).exp();
                        dsigma.data[m] =
                            deltas[m] * (gy.data[m] * t_m * (-a_m).exp() - suffix);
                        suffix += gy.data[m] * w.data[m];
                    }
                    add_grad(&mut grads, *sigma, dsigma);
                }
                Op::SliceRows { x, start, len } => {
                    let xt = &self.nodes[*x].value;
                    let cols = xt.cols;
                    let mut dx = Tensor::zeros(xt.rows, cols);
                    dx.data[start * cols..(start + len) * cols].copy_from_slice(&gy.data);
                    add_grad(&mut grads, *x, dx);
                }
            }
        }
        slot_grads
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    accumulate(&mut grads[id], &g);
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            debug_assert!(t.same_shape(g));
            for (a, b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Central finite differences of a scalar function of one flat slot.
    fn fd_grad(f: impl Fn(&[Real]) -> Real, x: &[Real], h: Real) -> Vec<Real> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn assert_close(a: &[Real], b: &[Real], tol: Real) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                ((x - y) / denom).abs() < tol,
                "grad mismatch at {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new(1);
        let _p = tape.param(0, Tensor::from_vec(2, 1, vec![1.0, 2.0]));
        let c = tape.constant_scalar(3.0);
        let loss = tape.lin_comb(vec![(1.0, c)]);
        let grads = tape.backward(loss);
        assert!(grads[0].is_none());
    }

    #[test]
    fn quadratic_norm_gradient_is_two_w() {
        let w = vec![0.5, -1.5, 2.0, 0.0, 3.0, -0.25];
        let mut tape = Tape::new(1);
        let p = tape.param(0, Tensor::from_vec(2, 3, w.clone()));
        let loss = tape.weighted_sum_squares(p, vec![1.0; 6]);
        let grads = tape.backward(loss);
        let g = grads[0].as_ref().unwrap();
        for (gv, wv) in g.data.iter().zip(&w) {
            assert!((gv - 2.0 * wv).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_chain_matches_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let (inp, hid, out, n) = (5, 4, 3, 6);
        let w0: Vec<Real> = (0..hid * inp).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let b0: Vec<Real> = (0..hid).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w1: Vec<Real> = (0..out * hid).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let b1: Vec<Real> = (0..out).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let x: Vec<Real> = (0..n * inp).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeff: Vec<Real> = (0..n * out).map(|_| rng.gen_range(0.1..1.0)).collect();

        let eval = |w0v: &[Real], b0v: &[Real], w1v: &[Real], b1v: &[Real]| -> (Real, Vec<Option<Tensor>>) {
            let mut tape = Tape::new(4);
            let w0n = tape.param(0, Tensor::from_vec(hid, inp, w0v.to_vec()));
            let b0n = tape.param(1, Tensor::from_vec(hid, 1, b0v.to_vec()));
            let w1n = tape.param(2, Tensor::from_vec(out, hid, w1v.to_vec()));
            let b1n = tape.param(3, Tensor::from_vec(out, 1, b1v.to_vec()));
            let xn = tape.constant(Tensor::from_vec(n, inp, x.clone()));
            let h = tape.dense(w0n, b0n, xn);
            let h = tape.softplus(h);
            let y = tape.dense(w1n, b1n, h);
            let y = tape.sigmoid(y);
            let loss = tape.weighted_sum_squares(y, coeff.clone());
            let v = tape.scalar(loss);
            (v, tape.backward(loss))
        };

        let (_, grads) = eval(&w0, &b0, &w1, &b1);
        let h = 1e-6;
        let fd_w0 = fd_grad(|v| eval(v, &b0, &w1, &b1).0, &w0, h);
        let fd_b0 = fd_grad(|v| eval(&w0, v, &w1, &b1).0, &b0, h);
        let fd_w1 = fd_grad(|v| eval(&w0, &b0, v, &b1).0, &w1, h);
        let fd_b1 = fd_grad(|v| eval(&w0, &b0, &w1, v).0, &b1, h);
        assert_close(&grads[0].as_ref().unwrap().data, &fd_w0, 1e-6);
        assert_close(&grads[1].as_ref().unwrap().data, &fd_b0, 1e-6);
        assert_close(&grads[2].as_ref().unwrap().data, &fd_w1, 1e-6);
        assert_close(&grads[3].as_ref().unwrap().data, &fd_b1, 1e-6);
    }

    #[test]
    fn render_weights_match_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let n = 24;
        let sigma: Vec<Real> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let deltas: Vec<Real> = (0..n).map(|_| rng.gen_range(0.01..0.2)).collect();
        let coeff: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |sv: &[Real]| -> (Real, Vec<Option<Tensor>>) {
            let mut tape = Tape::new(1);
            let s = tape.param(0, Tensor::from_vec(n, 1, sv.to_vec()));
            let w = tape.render_weights(s, deltas.clone());
            let loss = tape.dot_const(w, coeff.clone());
            (tape.scalar(loss), tape.backward(loss))
        };

        let (_, grads) = eval(&sigma);
        let fd = fd_grad(|v| eval(v).0, &sigma, 1e-6);
        assert_close(&grads[0].as_ref().unwrap().data, &fd, 1e-5);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // Exercises ApplyMatrixRows, RowScale, ScaleByScalar, ColSum, SumAll,
        // Slice, Broadcast, Concat in one graph.
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let n = 5;
        let m: Vec<Real> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<Real> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<Real> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let row: Vec<Real> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |mv: &[Real], xv: &[Real], svv: &[Real], rv: &[Real]| -> (Real, Vec<Option<Tensor>>) {
            let mut tape = Tape::new(4);
            let mflat = tape.param(0, Tensor::from_vec(1, 9, mv.to_vec()));
            let xn = tape.param(1, Tensor::from_vec(n, 3, xv.to_vec()));
            let sn = tape.param(2, Tensor::from_vec(n, 1, svv.to_vec()));
            let rn = tape.param(3, Tensor::from_vec(1, 3, rv.to_vec()));
            let mn = tape.reshape(mflat, 3, 3);
            let bc = tape.broadcast_row(rn, n);
            let cat = tape.concat_cols(vec![xn, bc]);
            let left = tape.slice_rows(cat, 1, n - 1);
            let left3 = tape.slice_rows(xn, 0, n);
            let gx = tape.apply_matrix_rows(mn, left3);
            let ws = tape.row_scale(gx, sn);
            let pix = tape.col_sum(ws);
            let opac = tape.sum_all(sn);
            let catsum = tape.sum_all(left);
            let one_minus = tape.add_const(opac, vec![-1.0]);
            let skyish = tape.scale_by_scalar(pix, one_minus);
            let resid = tape.add_const(skyish, vec![0.2, -0.1, 0.4]);
            let a = tape.weighted_sum_squares(resid, vec![1.0, 2.0, 0.5]);
            let loss = tape.lin_comb(vec![(1.0, a), (0.3, catsum)]);
            (tape.scalar(loss), tape.backward(loss))
        };

        let (_, grads) = eval(&m, &x, &s, &row);
        let h = 1e-6;
        let fd_m = fd_grad(|v| eval(v, &x, &s, &row).0, &m, h);
        let fd_x = fd_grad(|v| eval(&m, v, &s, &row).0, &x, h);
        let fd_s = fd_grad(|v| eval(&m, &x, v, &row).0, &s, h);
        let fd_r = fd_grad(|v| eval(&m, &x, &s, v).0, &row, h);
        assert_close(&grads[0].as_ref().unwrap().data, &fd_m, 1e-5);
        assert_close(&grads[1].as_ref().unwrap().data, &fd_x, 1e-5);
        assert_close(&grads[2].as_ref().unwrap().data, &fd_s, 1e-5);
        assert_close(&grads[3].as_ref().unwrap().data, &fd_r, 1e-5);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let x: Vec<Real> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut tape = Tape::new(1);
            let p = tape.param(0, Tensor::from_vec(4, 3, x.clone()));
            let s = tape.softplus(p);
            let loss = tape.weighted_sum_squares(s, vec![0.3; 12]);
            tape.backward(loss)[0].clone().unwrap().data
        };
        assert_eq!(run(), run());
    }
}
