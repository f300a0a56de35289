//! Reverse-mode differentiation tape.
//!
//! Every primitive evaluates eagerly and records its inputs; [`Graph::backward`]
//! walks the tape in reverse and writes parameter gradients into a
//! [`ParamStore`]. All reductions run sequentially in index order, so a given
//! build produces bit-identical results for identical inputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, Real, Tensor};

/// Denominator guard for row normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// The primitive set, for callers that dispatch by kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    AddBias,
    Relu,
    SoftmaxRows,
    LogSumExpRows,
    ConvPointwise1d,
    Conv2d { padding: usize },
    MaxPool2d,
    MeanOverTime,
    L2NormalizeRows,
    Scale(f64),
    Concat,
    WeightedLayerSum,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    ConvPointwise1d(Var, Var, Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    MeanOverTime(Var),
    GlobalAvgPool2d(Var),
    L2NormalizeRows(Var),
    Concat(Vec<Var>),
    WeightedLayerSum(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Diag(Var),
    CosineSim(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(what: &str, shapes: &[&[usize]]) -> Result<T> {
    Err(Error::shape(format!("{what}: incompatible shapes {shapes:?}")))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.frozen {
            return self.input(p.value.clone());
        }
        self.push(p.value.clone(), Op::Param(id), &[])
    }

    /// Dispatches a primitive by kind.
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::AddBias => {
                arity(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::SoftmaxRows => {
                arity(1)?;
                self.softmax_rows(inputs[0])
            }
            Primitive::LogSumExpRows => {
                arity(1)?;
                self.log_sum_exp_rows(inputs[0])
            }
            Primitive::ConvPointwise1d => {
                arity(3)?;
                self.conv_pointwise_1d(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Conv2d { padding } => {
                arity(3)?;
                self.conv2d(inputs[0], inputs[1], inputs[2], *padding)
            }
            Primitive::MaxPool2d => {
                arity(1)?;
                self.maxpool2d(inputs[0])
            }
            Primitive::MeanOverTime => {
                arity(1)?;
                self.mean_over_time(inputs[0])
            }
            Primitive::L2NormalizeRows => {
                arity(1)?;
                self.l2_normalize_rows(inputs[0])
            }
            Primitive::Scale(s) => {
                arity(1)?;
                Ok(self.scale(inputs[0], *s))
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::WeightedLayerSum => {
                arity(2)?;
                self.weighted_layer_sum(inputs[0], inputs[1])
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let c = *xs.last().unwrap_or(&0);
        if bs != [c] {
            return shape_err("add_bias", &[xs, bs]);
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", &[self.shape(a), self.shape(b)]);
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("sub", &[self.shape(a), self.shape(b)]);
        }
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v -= w;
        }
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let sv = T::from_f64(s);
        let value = self.value(x).map(|v| v * sv);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Row-wise log-sum-exp with max subtraction; `[n, c] -> [n]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data: Vec<T> = self.value(x).data().chunks(c).map(log_sum_exp).collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::LogSumExpRows(x), &[x]))
    }

    /// Independent affine map per timestep: `[.., T, Cin] x [Cin, Cout] + [Cout]`.
    pub fn conv_pointwise_1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let cin = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != cin || bs != [ws[1]] {
            return shape_err("conv_pointwise_1d", &[xs, ws, bs]);
        }
        let cout = ws[1];
        let rows = self.value(x).len() / cin.max(1);
        let mut out = vec![T::zero(); rows * cout];
        matmul_into(self.value(x).data(), self.value(w).data(), &mut out, rows, cin, cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConvPointwise1d(x, w, b), &[x, w, b]))
    }

    /// Stride-1 2-D convolution, `[N, Cin, H, W] * [Cout, Cin, kh, kw] + [Cout]`,
    /// zero padding of `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] {
            return shape_err("conv2d", &[xs, ws, bs]);
        }
        let geom = ConvGeom::new(xs, ws, pad)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let per_sample: Vec<Vec<T>> = (0..geom.n)
            .into_par_iter()
            .map(|i| {
                let cols = geom.im2col(&xv[i * geom.in_size()..(i + 1) * geom.in_size()]);
                let mut out = vec![T::zero(); geom.out_size()];
                let hw = geom.ho * geom.wo;
                matmul_into(wv, &cols, &mut out, geom.cout, geom.patch(), hw);
                for (c, chunk) in out.chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|o| *o += bv[c]);
                }
                out
            })
            .collect();
        let value = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], per_sample.concat())?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    /// 2x2 max pooling with stride 2 over the last two axes (floor on odd sizes).
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return shape_err("maxpool2d", &[&xs]);
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// `[N, T, C] -> [N, C]`.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return shape_err("mean_over_time", &[&xs]);
        }
        let (n, t, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let inv = T::from_f64(1.0 / t as f64);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let orow = &mut out[i * c..(i + 1) * c];
            for step in 0..t {
                let base = (i * t + step) * c;
                for (o, &v) in orow.iter_mut().zip(&xv[base..base + c]) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::MeanOverTime(x), &[x]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return shape_err("global_avg_pool2d", &[&xs]);
        }
        let hw = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| {
                let mut acc = T::zero();
                plane.iter().for_each(|&v| acc += v);
                acc * inv
            })
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool2d(x), &[x]))
    }

    /// Divides each row by `max(norm, 1e-8)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let eps = T::from_f64(NORM_EPS);
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            let d = row_norm(row).max(eps);
            row.iter_mut().for_each(|v| *v /= d);
        }
        Ok(self.push(value, Op::L2NormalizeRows(x), &[x]))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat", &[&lead, s]);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// `[N, L, T, C]` stacked layers mixed by weights `[L]` into `[N, T, C]`.
    pub fn weighted_layer_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws != [xs[1]] {
            return shape_err("weighted_layer_sum", &[&xs, &ws]);
        }
        let (n, l, inner) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * inner];
        for i in 0..n {
            let orow = &mut out[i * inner..(i + 1) * inner];
            for (layer, &wl) in wv.iter().enumerate() {
                let base = (i * l + layer) * inner;
                for (o, &v) in orow.iter_mut().zip(&xv[base..base + inner]) {
                    *o += wl * v;
                }
            }
        }
        let value = Tensor::new(vec![n, xs[2], xs[3]], out)?;
        Ok(self.push(value, Op::WeightedLayerSum(x, w), &[x, w]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return shape_err("diag", &[self.shape(x)]);
        }
        let xv = self.value(x);
        let data = (0..r).map(|i| xv.get2(i, i)).collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::Diag(x), &[x]))
    }

    /// `S[a, b] = <A_a, B_b> / max(|A_a| |B_b|, 1e-8)`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return shape_err("cosine_similarity", &[self.shape(a), self.shape(b)]);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let na: Vec<T> = (0..n).map(|i| row_norm(av.row(i))).collect();
        let nb: Vec<T> = (0..m).map(|j| row_norm(bv.row(j))).collect();
        let eps = T::from_f64(NORM_EPS);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(dot(av.row(i), bv.row(j)) / (na[i] * nb[j]).max(eps));
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::CosineSim(a, b), &[a, b]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_f64(xv.len() as f64));
        self.push(value, Op::MeanAll(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Picks `x[i, idx[i]]` for every row; `[n, c] -> [n]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if idx.len() != r || idx.iter().any(|&k| k >= c) {
            return Err(Error::shape(format!(
                "gather_rows: {} indices into [{r}, {c}]",
                idx.len()
            )));
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &k)| xv.get2(i, k)).collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Smallest distance of any ReLU input from zero, or of any max-pool
    /// window's runner-up from its maximum. Finite differences with step `h`
    /// are only faithful when this exceeds `h` times the input perturbation.
    /// Windows tied at exactly zero (rectified inputs) are skipped; the ReLU
    /// margin already keeps those at zero.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool2d { x, .. } => {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let xv = self.value(*x).data();
                    for plane in 0..xs[0] * xs[1] {
                        let base = plane * h * w;
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .map(|&(di, dj)| xv[base + (2 * i + di) * w + 2 * j + dj].as_f64())
                                    .collect();
                                win.sort_by(f64::total_cmp);
                                if win[3] != 0.0 || win[2] != 0.0 {
                                    margin = margin.min(win[3] - win[2]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Which side of every ReLU kink each input sits on, plus every max-pool
    /// argmax. Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| (v > T::zero()) as usize)),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Propagates `d(output)/d(param)` into every reachable parameter's `grad`.
    /// All gradients in `store` are zeroed first.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.shape(output) != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                store.get_mut(pid).grad.add_assign(&g);
                continue;
            }
            for (input, dx) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, g.matmul(&bv.transpose()?)?));
                }
                if self.wants(*b) {
                    res.push((*b, av.transpose()?.matmul(g)?));
                }
            }
            Op::AddBias(x, b) => {
                res.push((*x, g.clone()));
                if self.wants(*b) {
                    res.push((*b, column_sums(g)));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                res.push((*x, dx));
            }
            Op::Scale(x, s) => {
                let sv = T::from_f64(*s);
                res.push((*x, g.map(|v| v * sv)));
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape()[1];
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s = dot(drow, yrow);
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - s);
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.shape()[1];
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let mut s = T::zero();
                    drow.iter().for_each(|&d| s += d);
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d -= y.exp() * s;
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut dx = xv.clone();
                for (i, row) in dx.data_mut().chunks_mut(c).enumerate() {
                    let (gi, li) = (g.data()[i], out.data()[i]);
                    row.iter_mut().for_each(|v| *v = gi * (*v - li).exp());
                }
                res.push((*x, dx));
            }
            Op::ConvPointwise1d(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / cin;
                let g2 = g.clone().reshape(&[rows, cout])?;
                if self.wants(*x) {
                    let dx = g2.matmul(&wv.transpose()?)?.reshape(xv.shape())?;
                    res.push((*x, dx));
                }
                if self.wants(*w) {
                    let x2 = xv.clone().reshape(&[rows, cin])?;
                    res.push((*w, x2.transpose()?.matmul(&g2)?));
                }
                if self.wants(*b) {
                    res.push((*b, column_sums(&g2)));
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                res.extend(self.conv2d_backward(*x, *w, *b, *pad, g)?);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                res.push((*x, dx));
            }
            Op::MeanOverTime(x) => {
                let xs = self.shape(*x);
                let (t, c) = (xs[1], xs[2]);
                let inv = T::from_f64(1.0 / t as f64);
                let dx = Tensor::from_fn(xs, |k| {
                    let i = k / (t * c);
                    g.data()[i * c + k % c] * inv
                });
                res.push((*x, dx));
            }
            Op::GlobalAvgPool2d(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let dx = Tensor::from_fn(xs, |k| g.data()[k / hw] * inv);
                res.push((*x, dx));
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let eps = T::from_f64(NORM_EPS);
                let mut dx = g.clone();
                for ((drow, xrow), yrow) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(xv.data().chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let norm = row_norm(xrow);
                    if norm >= eps {
                        let s = dot(drow, yrow);
                        for (d, &y) in drow.iter_mut().zip(yrow) {
                            *d = (*d - y * s) / norm;
                        }
                    } else {
                        drow.iter_mut().for_each(|d| *d /= eps);
                    }
                }
                res.push((*x, dx));
            }
            Op::Concat(xs) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &v in xs {
                    let wd = *self.shape(v).last().unwrap();
                    let mut d = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + wd]);
                    }
                    offset += wd;
                    res.push((v, Tensor::new(self.shape(v).to_vec(), d)?));
                }
            }
            Op::WeightedLayerSum(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let xs = xv.shape();
                let (n, l, inner) = (xs[0], xs[1], xs[2] * xs[3]);
                if self.wants(*x) {
                    let dx = Tensor::from_fn(xs, |k| {
                        let i = k / (l * inner);
                        let layer = (k / inner) % l;
                        wv.data()[layer] * g.data()[i * inner + k % inner]
                    });
                    res.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); l];
                    for i in 0..n {
                        let grow = &g.data()[i * inner..(i + 1) * inner];
                        for (layer, acc) in dw.iter_mut().enumerate() {
                            let base = (i * l + layer) * inner;
                            *acc += dot(grow, &xv.data()[base..base + inner]);
                        }
                    }
                    res.push((*w, Tensor::new(vec![l], dw)?));
                }
            }
            Op::Reshape(x) => {
                res.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::Transpose(x) => {
                res.push((*x, g.transpose()?));
            }
            Op::Diag(x) => {
                let r = g.len();
                let mut dx = Tensor::zeros(&[r, r]);
                for i in 0..r {
                    dx.data_mut()[i * r + i] = g.data()[i];
                }
                res.push((*x, dx));
            }
            Op::CosineSim(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, cosine_grad(av, bv, g, false)));
                }
                if self.wants(*b) {
                    res.push((*b, cosine_grad(bv, av, g, true)));
                }
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n: usize = xs.iter().product();
                let v = g.data()[0] / T::from_f64(n as f64);
                res.push((*x, Tensor::full(xs, v)));
            }
            Op::SumAll(x) => {
                res.push((*x, Tensor::full(self.shape(*x), g.data()[0])));
            }
            Op::GatherRows(x, idx) => {
                let xs = self.shape(*x);
                let c = xs[1];
                let mut dx = Tensor::zeros(xs);
                for (i, &k) in idx.iter().enumerate() {
                    dx.data_mut()[i * c + k] = g.data()[i];
                }
                res.push((*x, dx));
            }
        }
        Ok(res)
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, pad: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(xv.shape(), wv.shape(), pad)?;
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let hw = geom.ho * geom.wo;
        let patch = geom.patch();
        let wt = if want_x {
            Some(wv.clone().reshape(&[geom.cout, patch])?.transpose()?)
        } else {
            None
        };
        // Per-sample partials in parallel, reduced below in sample order.
        let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..geom.n)
            .into_par_iter()
            .map(|i| {
                let gi = &g.data()[i * geom.out_size()..(i + 1) * geom.out_size()];
                let cols = geom.im2col(&xv.data()[i * geom.in_size()..(i + 1) * geom.in_size()]);
                let dw = want_w.then(|| {
                    let mut dw = vec![T::zero(); geom.cout * patch];
                    for co in 0..geom.cout {
                        let grow = &gi[co * hw..(co + 1) * hw];
                        let drow = &mut dw[co * patch..(co + 1) * patch];
                        for (p, d) in drow.iter_mut().enumerate() {
                            *d = dot(grow, &cols[p * hw..(p + 1) * hw]);
                        }
                    }
                    dw
                });
                let dx = wt.as_ref().map(|wt| {
                    let mut dcols = vec![T::zero(); patch * hw];
                    matmul_into(wt.data(), gi, &mut dcols, patch, geom.cout, hw);
                    geom.col2im(&dcols)
                });
                (dx, dw)
            })
            .collect();
        let mut res = Vec::with_capacity(3);
        if want_x {
            let mut dx = Vec::with_capacity(xv.len());
            for (d, _) in &partials {
                dx.extend_from_slice(d.as_ref().unwrap());
            }
            res.push((x, Tensor::new(xv.shape().to_vec(), dx)?));
        }
        if want_w {
            let mut dw = Tensor::zeros(wv.shape());
            for (_, d) in &partials {
                for (acc, &v) in dw.data_mut().iter_mut().zip(d.as_ref().unwrap()) {
                    *acc += v;
                }
            }
            res.push((w, dw));
        }
        if self.wants(b) {
            let mut db = vec![T::zero(); geom.cout];
            for i in 0..geom.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let base = (i * geom.cout + co) * hw;
                    g.data()[base..base + hw].iter().for_each(|&v| *acc += v);
                }
            }
            res.push((b, Tensor::new(vec![geom.cout], db)?));
        }
        Ok(res)
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err("conv2d", &[xs, ws]);
        }
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    fn in_size(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// `[Cin, H, W] -> [Cin*kh*kw, Ho*Wo]`.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let hw = self.ho * self.wo;
        let mut cols = vec![T::zero(); self.patch() * hw];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let hw = self.ho * self.wo;
        let mut x = vec![T::zero(); self.in_size()];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                x[(c * self.h + ii as usize) * self.w + jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn row_norm<T: Real>(row: &[T]) -> T {
    dot(row, row).sqrt()
}

/// Max-subtracted log-sum-exp of a slice.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let mut s = T::zero();
    row.iter().for_each(|&v| s += (v - m).exp());
    m + s.ln()
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let c = *g.shape().last().unwrap();
    let mut acc = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(vec![c], acc).expect("column count matches")
}

/// Gradient of the cosine-similarity matrix w.r.t. its first operand; with
/// `transposed`, `g` is indexed `[other, self]`.
fn cosine_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>, transposed: bool) -> Tensor<T> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let eps = T::from_f64(NORM_EPS);
    let nb: Vec<T> = (0..m).map(|j| row_norm(b.row(j))).collect();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let ai = a.row(i);
        let na = row_norm(ai);
        let mut radial = T::zero();
        let mut acc = vec![T::zero(); d];
        for j in 0..m {
            let gij = if transposed { g.get2(j, i) } else { g.get2(i, j) };
            if gij == T::zero() {
                continue;
            }
            let q = na * nb[j];
            let bj = b.row(j);
            let coef = gij / q.max(eps);
            for (o, &bv) in acc.iter_mut().zip(bj) {
                *o += coef * bv;
            }
            if q >= eps {
                radial += gij * dot(ai, bj) * nb[j] / (q * q);
            }
        }
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        for ((o, &av), &s) in orow.iter_mut().zip(ai).zip(&acc) {
            *o = if na > T::zero() { s - radial * av / na } else { s };
        }
    }
    out
}
