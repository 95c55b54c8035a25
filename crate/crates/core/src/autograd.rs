//! Reverse-mode tape over dense feature matrices.
//!
//! Each recorded op keeps whatever its backward rule needs. Losses are
//! recorded with their input gradients already evaluated, so any scalar
//! objective with a hand-derived (or dual-number) gradient plugs in directly.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::sparse::{column_sums, conv_contract, conv_contract_backward, KernelMap};

/// Variance floor of the feature normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a normalization layer in training mode.
#[derive(Clone, Debug)]
pub struct NormStat {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How a normalization layer picks its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats {
    /// Statistics of the current rows, optionally recorded for running averages.
    Batch { record: Option<(ParamId, ParamId)> },
    /// Frozen running statistics.
    Running { mean: ParamId, var: ParamId },
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, kmap: Arc<KernelMap> },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Norm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T>, batch: bool },
    Gather { x: Var, index: Vec<Option<u32>> },
    SegmentMean { x: Var, members: Arc<Vec<Vec<u32>>> },
    SliceCols { x: Var, start: usize },
    Loss { grads: Vec<(Var, Matrix<T>)> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    norm_stats: Vec<NormStat>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), norm_stats: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0] {
            Node { value: Some(m), .. } => m,
            Node { op: Op::Param(id), .. } => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0).as_f64()
    }

    pub fn norm_stats(&self) -> &[NormStat] {
        &self.norm_stats
    }

    pub fn take_norm_stats(&mut self) -> Vec<NormStat> {
        std::mem::take(&mut self.norm_stats)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let (wv, bv) = (self.param(w), b.map(|b| self.param(b)));
        let mut y = self.value(x).matmul(self.value(wv))?;
        if let Some(bv) = bv {
            let bias = self.value(bv);
            if bias.shape() != (1, y.cols()) {
                return Err(Error::shape("bias must be a single row"));
            }
            for r in 0..y.rows() {
                for (a, &c) in y.row_mut(r).iter_mut().zip(bias.row(0)) {
                    *a += c;
                }
            }
        }
        Ok(self.push(y, Op::Linear { x, w: wv, b: bv }))
    }

    /// Sparse convolution contraction along a precomputed kernel map.
    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, kmap: Arc<KernelMap>) -> Result<Var> {
        let (wv, bv) = (self.param(w), b.map(|b| self.param(b)));
        let bias = bv.map(|bv| self.value(bv).row(0).to_vec());
        let y = conv_contract(self.value(x), self.value(wv), bias.as_deref(), &kmap)?;
        Ok(self.push(y, Op::Conv { x, w: wv, b: bv, kmap }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("cannot add {:?} and {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    /// Per-feature affine normalization.
    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: NormStats) -> Result<Var> {
        let (gv, bv) = (self.param(gamma), self.param(beta));
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (g, b) = (self.value(gv), self.value(bv));
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(Error::shape("normalization parameters must be 1 x C"));
        }
        let eps = NORM_EPS;
        let (mean, var, batch) = match stats {
            NormStats::Batch { .. } => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                if n > 0 {
                    for r in 0..n {
                        for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                            *m += v.as_f64();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    for r in 0..n {
                        for ((s, &v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                            let d = v.as_f64() - m;
                            *s += d * d;
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= n as f64);
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                let m = self.params.get(mean).row(0).iter().map(|v| v.as_f64()).collect();
                let s = self.params.get(var).row(0).iter().map(|v| v.as_f64()).collect();
                (m, s, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::of(1.0 / (s + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut y = Matrix::zeros(n, c);
        for r in 0..n {
            for k in 0..c {
                let h = (xv.get(r, k) - mean_t[k]) * inv_std[k];
                xhat.set(r, k, h);
                y.set(r, k, g.get(0, k) * h + b.get(0, k));
            }
        }
        if let NormStats::Batch { record: Some((mb, vb)) } = stats {
            if n > 0 {
                self.norm_stats.push(NormStat { mean_buffer: mb, var_buffer: vb, mean, var });
            }
        }
        Ok(self.push(y, Op::Norm { x, gamma: gv, beta: bv, xhat, inv_std, batch }))
    }

    /// Rows of `x` by index; `None` produces a zero row.
    pub fn gather(&mut self, x: Var, index: Vec<Option<u32>>) -> Result<Var> {
        let n = self.value(x).rows();
        if index.iter().flatten().any(|&i| i as usize >= n) {
            return Err(Error::shape("gather index out of range"));
        }
        let y = self.value(x).gather_rows(&index);
        Ok(self.push(y, Op::Gather { x, index }))
    }

    /// Mean of the member rows of `x` for every segment (segments non-empty).
    pub fn segment_mean(&mut self, x: Var, members: Arc<Vec<Vec<u32>>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut y = Matrix::zeros(members.len(), c);
        for (s, m) in members.iter().enumerate() {
            if m.is_empty() || m.iter().any(|&i| i as usize >= xv.rows()) {
                return Err(Error::shape("segment is empty or out of range"));
            }
            let inv = T::of(1.0 / m.len() as f64);
            let row = y.row_mut(s);
            for &i in m.iter() {
                for (a, &v) in row.iter_mut().zip(xv.row(i as usize)) {
                    *a += v;
                }
            }
            row.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(self.push(y, Op::SegmentMean { x, members }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.value(x).cols() {
            return Err(Error::shape("column slice out of range"));
        }
        let y = self.value(x).slice_cols(start, end);
        Ok(self.push(y, Op::SliceCols { x, start }))
    }

    /// Scalar objective with precomputed input gradients.
    pub fn loss(&mut self, value: f64, grads: Vec<(Var, Matrix<T>)>) -> Result<Var> {
        for (v, g) in &grads {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape("loss gradient shape differs from its input"));
            }
        }
        Ok(self.push(Matrix::from_vec(1, 1, vec![T::of(value)])?, Op::Loss { grads }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Matrix::from_vec(1, 1, vec![T::of(total)]).expect("1x1"), Op::WeightedSum(terms))
    }

    /// Back-propagates from the scalar `root`; returns parameter gradients.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![T::one()])?);
        let mut out = Grads::empty(self.params.len());
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, d: Matrix<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => out.slots[id.0] = Some(g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                    let mut dx = Matrix::zeros(n, k);
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g.as_slice(),
                        m,
                        1,
                        wv.as_slice(),
                        1,
                        m,
                        T::zero(),
                        dx.as_mut_slice(),
                        k,
                        1,
                    );
                    let mut dw = Matrix::zeros(k, m);
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        xv.as_slice(),
                        1,
                        k,
                        g.as_slice(),
                        m,
                        1,
                        T::zero(),
                        dw.as_mut_slice(),
                        m,
                        1,
                    );
                    if let Some(b) = b {
                        send(*b, Matrix::from_vec(1, m, column_sums(&g))?);
                    }
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::Conv { x, w, b, kmap } => {
                    let (dx, dw) = conv_contract_backward(self.value(*x), self.value(*w), kmap, &g)?;
                    if let Some(b) = b {
                        send(*b, Matrix::from_vec(1, g.cols(), column_sums(&g))?);
                    }
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Relu(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let mut d = g;
                    for (dv, &yv) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        if yv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let mut d = g;
                    for (dv, &yv) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *dv *= yv * (T::one() - yv);
                    }
                    send(*x, d);
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                    let (n, c) = g.shape();
                    let gam = self.value(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for r in 0..n {
                        for k in 0..c {
                            dgamma[k] += g.get(r, k) * xhat.get(r, k);
                            dbeta[k] += g.get(r, k);
                        }
                    }
                    let mut dx = Matrix::zeros(n, c);
                    for k in 0..c {
                        let s = gam.get(0, k) * inv_std[k];
                        if *batch {
                            // dx = γ·inv/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                            let nf = T::of(n as f64);
                            for r in 0..n {
                                let v = (nf * g.get(r, k) - dbeta[k] - xhat.get(r, k) * dgamma[k]) * s / nf;
                                dx.set(r, k, v);
                            }
                        } else {
                            for r in 0..n {
                                dx.set(r, k, g.get(r, k) * s);
                            }
                        }
                    }
                    send(*gamma, Matrix::from_vec(1, c, dgamma)?);
                    send(*beta, Matrix::from_vec(1, c, dbeta)?);
                    send(*x, dx);
                }
                Op::Gather { x, index } => {
                    let mut dx = Matrix::zeros(self.value(*x).rows(), g.cols());
                    for (o, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            for (a, &b) in dx.row_mut(*i as usize).iter_mut().zip(g.row(o)) {
                                *a += b;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::SegmentMean { x, members } => {
                    let mut dx = Matrix::zeros(self.value(*x).rows(), g.cols());
                    for (s, m) in members.iter().enumerate() {
                        let inv = T::of(1.0 / m.len() as f64);
                        for &i in m {
                            for (a, &b) in dx.row_mut(i as usize).iter_mut().zip(g.row(s)) {
                                *a += b * inv;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*x, dx);
                }
                Op::Loss { grads: local } => {
                    let s = g.get(0, 0);
                    for (v, d) in local {
                        let mut d = d.clone();
                        d.scale(s);
                        send(*v, d);
                    }
                }
                Op::WeightedSum(terms) => {
                    let s = g.get(0, 0);
                    for &(v, w) in terms {
                        send(v, Matrix::from_vec(1, 1, vec![s * T::of(w)])?);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_kernel_map, Coord3};

    /// Central-difference gradient of `f` with respect to parameter `id`.
    fn numeric(store: &ParamStore<f64>, id: ParamId, f: &dyn Fn(&ParamStore<f64>) -> f64) -> Matrix<f64> {
        let base = store.get(id).clone();
        let mut g = Matrix::zeros(base.rows(), base.cols());
        for i in 0..base.as_slice().len() {
            let mut s = store.clone();
            s.get_mut(id).as_mut_slice()[i] += 1e-6;
            let up = f(&s);
            s.get_mut(id).as_mut_slice()[i] -= 2e-6;
            let down = f(&s);
            g.as_mut_slice()[i] = (up - down) / 2e-6;
        }
        g
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let coords: Vec<Coord3> = (0..6).map(|i| Coord3::new(i % 3, i / 3, (i * 7) % 2)).collect();
        let kmap = Arc::new(build_kernel_map(&coords, &coords, 3, 1).unwrap());
        let mut store = ParamStore::new();
        let x = store.add("x", rand_matrix(6, 3, 1)).unwrap();
        let w = store.add("w", rand_matrix(27 * 3, 4, 2)).unwrap();
        let b = store.add("b", rand_matrix(1, 4, 3)).unwrap();
        let gamma = store.add("gamma", rand_matrix(1, 4, 4)).unwrap();
        let beta = store.add("beta", rand_matrix(1, 4, 5)).unwrap();
        let lw = store.add("lw", rand_matrix(4, 2, 6)).unwrap();
        let members = Arc::new(vec![vec![0, 2, 3], vec![1], vec![4, 5]]);

        let build = |s: &ParamStore<f64>| -> (f64, Grads<f64>) {
            let mut t = Tape::new(s);
            let xv = t.param(x);
            let c = t.conv(xv, w, Some(b), kmap.clone()).unwrap();
            let n = t.norm(c, gamma, beta, NormStats::Batch { record: None }).unwrap();
            let r = t.relu(n);
            let m = t.segment_mean(r, members.clone()).unwrap();
            let l = t.linear(m, lw, None).unwrap();
            let sg = t.sigmoid(l);
            let sl = t.slice_cols(sg, 1, 2).unwrap();
            let gth = t.gather(sl, vec![Some(2), None, Some(0), Some(2)]).unwrap();
            let sum = t.add(gth, gth).unwrap();
            let v = t.value(sum).clone();
            let val: f64 = v.as_slice().iter().enumerate().map(|(i, a)| (i as f64 + 1.0) * a * a).sum();
            let d = Matrix::from_fn(4, 1, |r, _| 2.0 * (r as f64 + 1.0) * v.get(r, 0));
            let loss = t.loss(val, vec![(sum, d)]).unwrap();
            let total = t.weighted_sum(vec![(loss, 0.5)]);
            (t.scalar(total), t.backward(total).unwrap())
        };
        let (_, grads) = build(&store);
        let f = |s: &ParamStore<f64>| build(s).0;
        for id in [x, w, b, gamma, beta, lw] {
            let num = numeric(&store, id, &f);
            let ana = grads.get(id).unwrap();
            let err = ana.max_rel_diff(&num, 1e-3);
            assert!(err < 1e-5, "{}: rel err {err}", store.name(id));
        }
    }

    #[test]
    fn running_statistics_make_normalization_affine() {
        let mut store = ParamStore::new();
        let x = store.add("x", rand_matrix(5, 2, 9)).unwrap();
        let g = store.add("g", Matrix::from_vec(1, 2, vec![2.0, 0.5]).unwrap()).unwrap();
        let b = store.add("b", Matrix::from_vec(1, 2, vec![0.1, -0.1]).unwrap()).unwrap();
        let m = store.add_buffer("m", Matrix::from_vec(1, 2, vec![0.2, 0.0]).unwrap()).unwrap();
        let v = store.add_buffer("v", Matrix::from_vec(1, 2, vec![4.0, 1.0]).unwrap()).unwrap();
        let mut t = Tape::new(&store);
        let xv = t.param(x);
        let y = t.norm(xv, g, b, NormStats::Running { mean: m, var: v }).unwrap();
        let expect = (store.get(x).get(3, 0) - 0.2) / (4.0 + NORM_EPS).sqrt() * 2.0 + 0.1;
        assert!((t.value(y).get(3, 0) - expect).abs() < 1e-12);
        assert!(t.norm_stats().is_empty());
    }
}
