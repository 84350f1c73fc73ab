//! Reverse-mode autodiff over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and backward is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{dot, gelu, gelu_grad, softmax, Tensor};
use crate::error::{Error, Result};

/// Boolean attention pattern, `allowed[q * n + k]` for query row `q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                allowed[q * n + k] = f(q, k);
            }
        }
        Self { n, allowed }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }
}

/// Cross-entropy term over one logits row restricted to `[start, end)`.
#[derive(Clone, Debug)]
pub struct CeItem {
    pub row: usize,
    pub start: usize,
    pub end: usize,
    /// Target distribution over the range; must sum to 1.
    pub target: Vec<f64>,
    pub weight: f64,
}

/// Absolute error of the range-restricted expectation against `truth`.
#[derive(Clone, Debug)]
pub struct AbsErrItem {
    pub row: usize,
    pub start: usize,
    pub end: usize,
    pub midpoints: Rc<Vec<f64>>,
    pub truth: f64,
    pub weight: f64,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Gather { table: usize, index: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    TanhClamp(usize, f64),
    Sum(usize),
    GatedValues { v: usize, extras: Vec<usize>, gates: usize, heads: usize, d_head: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, d_head: usize, mask: Rc<AttentionMask>, probs: Vec<f64> },
    SoftCe { logits: usize, items: Vec<CeItem>, probs: Vec<Vec<f64>> },
    AbsErr { logits: usize, items: Vec<AbsErrItem>, probs: Vec<Vec<f64>>, expect: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Gradients of scalar `loss` with respect to every node that needs them.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = loss.id;
        if nodes[root].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                left: nodes[root].value.shape.clone(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &x in [a, b] {
                if let Some(ga) = acc(nodes, grads, x) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += c * d);
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let c = gb.len();
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (n, k, m) = (at.shape[0], at.shape[1], bt.shape[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        ga[i * k + p] += dot(grow, &bt.data[p * m..(p + 1) * m]);
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = at.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        gb[p * m..(p + 1) * m].iter_mut().zip(grow).for_each(|(o, d)| *o += aip * d);
                    }
                }
            }
        }
        Op::MatMulNT(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (n, k, m) = (at.shape[0], at.shape[1], bt.shape[0]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let arow = &mut ga[i * k..(i + 1) * k];
                    for j in 0..m {
                        let d = g[i * m + j];
                        if d == 0.0 {
                            continue;
                        }
                        arow.iter_mut().zip(&bt.data[j * k..(j + 1) * k]).for_each(|(o, b)| *o += d * b);
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..n {
                    let arow = &at.data[i * k..(i + 1) * k];
                    for j in 0..m {
                        let d = g[i * m + j];
                        if d == 0.0 {
                            continue;
                        }
                        gb[j * k..(j + 1) * k].iter_mut().zip(arow).for_each(|(o, a)| *o += d * a);
                    }
                }
            }
        }
        Op::Gather { table, index } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = nodes[*table].value.cols();
                for (r, &ix) in index.iter().enumerate() {
                    gt[ix * d..(ix + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let xt = val(*x);
            let gv = &val(*gain).data;
            let d = xt.cols();
            let rows = xt.len() / d;
            let xhat: Vec<f64> = (0..rows * d).map(|i| (xt.data[i] - mean[i / d]) * rstd[i / d]).collect();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for i in 0..rows * d {
                    gg[i % d] += g[i] * xhat[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for i in 0..rows * d {
                    gb[i % d] += g[i];
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, xh) / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av.data[i]);
                }
            }
        }
        Op::TanhClamp(a, c) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    let t = (av.data[i] / c).tanh();
                    ga[i] += g[i] * (1.0 - t * t);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::GatedValues { v, extras, gates, heads, d_head } => {
            let gt = &val(*gates).data;
            let n_extra = extras.len();
            let width = heads * d_head;
            if let Some(gv) = acc(nodes, grads, *v) {
                gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            for (e, &x) in extras.iter().enumerate() {
                if let Some(gx) = acc(nodes, grads, x) {
                    for i in 0..g.len() {
                        let h = (i % width) / d_head;
                        gx[i] += gt[h * n_extra + e] * g[i];
                    }
                }
            }
            if let Some(gg) = acc(nodes, grads, *gates) {
                for (e, &x) in extras.iter().enumerate() {
                    let xv = &nodes[x].value.data;
                    for i in 0..g.len() {
                        let h = (i % width) / d_head;
                        gg[h * n_extra + e] += g[i] * xv[i];
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, d_head, mask, probs } => {
            let (qt, kt, vt) = (val(*q), val(*k), val(*v));
            let n = mask.n;
            let width = heads * d_head;
            let scale = 1.0 / (*d_head as f64).sqrt();
            let mut dq = vec![0.0; n * width];
            let mut dk = vec![0.0; n * width];
            let mut dv = vec![0.0; n * width];
            let mut dp = vec![0.0; n];
            for h in 0..*heads {
                let off = h * d_head;
                for i in 0..n {
                    let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let go = &g[i * width + off..i * width + off + d_head];
                    let mut s = 0.0;
                    for j in 0..n {
                        if !mask.allows(i, j) {
                            dp[j] = 0.0;
                            continue;
                        }
                        dp[j] = dot(go, &vt.data[j * width + off..j * width + off + d_head]);
                        s += p[j] * dp[j];
                        let pj = p[j];
                        dv[j * width + off..j * width + off + d_head]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(o, d)| *o += pj * d);
                    }
                    let qi = &qt.data[i * width + off..i * width + off + d_head];
                    for j in 0..n {
                        if !mask.allows(i, j) {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kt.data[j * width + off..j * width + off + d_head];
                        for t in 0..*d_head {
                            dq[i * width + off + t] += ds * kj[t];
                            dk[j * width + off + t] += ds * qi[t];
                        }
                    }
                }
            }
            for (x, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(&d).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::SoftCe { logits, items, probs } => {
            if let Some(gl) = acc(nodes, grads, *logits) {
                let cols = nodes[*logits].value.cols();
                for (item, p) in items.iter().zip(probs) {
                    let base = item.row * cols + item.start;
                    for (i, (pi, qi)) in p.iter().zip(&item.target).enumerate() {
                        gl[base + i] += g[0] * item.weight * (pi - qi);
                    }
                }
            }
        }
        Op::AbsErr { logits, items, probs, expect } => {
            if let Some(gl) = acc(nodes, grads, *logits) {
                let cols = nodes[*logits].value.cols();
                for ((item, p), &e) in items.iter().zip(probs).zip(expect) {
                    let sign = if e > item.truth {
                        1.0
                    } else if e < item.truth {
                        -1.0
                    } else {
                        0.0
                    };
                    let base = item.row * cols + item.start;
                    for (i, (pi, vi)) in p.iter().zip(item.midpoints.iter()).enumerate() {
                        gl[base + i] += g[0] * item.weight * sign * pi * (vi - e);
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    fn zip_with(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(op, &a, &b)?;
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x * c).collect(),
        };
        self.unary(out, Op::Scale(self.id, c))
    }

    /// Adds a row vector (any shape with `cols` elements) to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let c = a.cols();
        if b.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data.iter().enumerate().map(|(i, x)| x + b.data[i % c]).collect();
        let out = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `self[n,k] * other[m,k]^T`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[0]);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..m {
                data[i * m + j] = dot(arow, &b.data[j * k..(j + 1) * k]);
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.binary(other, out, Op::MatMulNT(self.id, other.id)))
    }

    /// Row lookup into an embedding table.
    pub fn gather(self, index: &[usize], what: &'static str) -> Result<Var<'t>> {
        let t = self.value();
        if t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: t.shape.clone(),
                right: vec![index.len()],
            });
        }
        let (rows, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(index.len() * d);
        for &ix in index {
            if ix >= rows {
                return Err(Error::IndexOutOfRange { what, index: ix, rows });
            }
            data.extend_from_slice(t.row(ix));
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        Ok(self.unary(
            out,
            Op::Gather {
                table: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.cols();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.len() != d || bv.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape.clone(),
                right: gv.shape.clone(),
            });
        }
        let rows = x.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data.push((row[j] - m) * rs * gv.data[j] + bv.data[j]);
            }
            mean.push(m);
            rstd.push(rs);
        }
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            needs,
        ))
    }

    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let out = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| gelu(x)).collect(),
        };
        self.unary(out, Op::Gelu(self.id))
    }

    /// `c * tanh(x / c)`.
    pub fn tanh_clamp(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| c * (x / c).tanh()).collect(),
        };
        self.unary(out, Op::TanhClamp(self.id, c))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data.iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Per head `h`: `v + sum_e gates[h, e] * extras[e]`, over `[T, heads * d_head]`.
    pub fn gated_values(self, extras: &[Var<'t>], gates: Var<'t>, heads: usize, d_head: usize) -> Result<Var<'t>> {
        let v = self.value();
        let gt = gates.value();
        let width = heads * d_head;
        if v.cols() != width || gt.len() != heads * extras.len() {
            return Err(Error::ShapeMismatch {
                op: "gated_values",
                left: v.shape.clone(),
                right: gt.shape.clone(),
            });
        }
        let mut data = v.data.clone();
        for (e, x) in extras.iter().enumerate() {
            let xv = x.value();
            same_shape("gated_values", &v, &xv)?;
            for i in 0..data.len() {
                let h = (i % width) / d_head;
                data[i] += gt.data[h * extras.len() + e] * xv.data[i];
            }
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let mut ids = vec![self.id, gates.id];
        ids.extend(extras.iter().map(|x| x.id));
        let needs = self.tape.needs(&ids);
        Ok(self.tape.push(
            out,
            Op::GatedValues {
                v: self.id,
                extras: extras.iter().map(|x| x.id).collect(),
                gates: gates.id,
                heads,
                d_head,
            },
            needs,
        ))
    }

    /// Masked multi-head scaled dot-product attention over `[T, heads * d_head]`
    /// inputs. Disallowed keys are skipped, so they receive exactly zero
    /// probability and never enter the row's arithmetic.
    pub fn attention(self, k: Var<'t>, v: Var<'t>, heads: usize, d_head: usize, mask: Rc<AttentionMask>) -> Result<Var<'t>> {
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        let width = heads * d_head;
        let n = mask.n;
        for t in [&qt, &kt, &vt] {
            if t.shape != [n, width] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    left: t.shape.clone(),
                    right: vec![n, width],
                });
            }
        }
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * width];
        let mut scores = Vec::with_capacity(n);
        for h in 0..heads {
            let off = h * d_head;
            for i in 0..n {
                let qi = &qt.data[i * width + off..i * width + off + d_head];
                scores.clear();
                for j in 0..n {
                    if mask.allows(i, j) {
                        scores.push((j, dot(qi, &kt.data[j * width + off..j * width + off + d_head]) * scale));
                    }
                }
                if scores.is_empty() {
                    return Err(Error::InvalidArgument(format!("attention row {i} has no allowed keys")));
                }
                let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    s.1 = (s.1 - max).exp();
                    sum += s.1;
                }
                let orow = &mut out[i * width + off..i * width + off + d_head];
                for &(j, e) in &scores {
                    let p = e / sum;
                    probs[(h * n + i) * n + j] = p;
                    let vj = &vt.data[j * width + off..j * width + off + d_head];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                }
            }
        }
        let out = Tensor::new(vec![n, width], out)?;
        let needs = self.tape.needs(&[self.id, k.id, v.id]);
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                d_head,
                mask,
                probs,
            },
            needs,
        ))
    }

    /// `sum_items weight * CE(target, softmax(logits[row, start..end]))`.
    pub fn soft_cross_entropy(self, items: Vec<CeItem>) -> Result<Var<'t>> {
        let l = self.value();
        let cols = l.cols();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(items.len());
        for it in &items {
            check_item(&l, it.row, it.start, it.end, it.target.len())?;
            let row = &l.data[it.row * cols + it.start..it.row * cols + it.end];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let ce: f64 = row.iter().zip(&it.target).map(|(z, q)| if *q > 0.0 { -q * (z - lse) } else { 0.0 }).sum();
            total += it.weight * ce;
            probs.push(softmax(row));
        }
        Ok(self.unary(
            Tensor::scalar(total),
            Op::SoftCe {
                logits: self.id,
                items,
                probs,
            },
        ))
    }

    /// `sum_items weight * |sum_i p_i m_i - truth|` with `p` the softmax over
    /// the item's range.
    pub fn expectation_abs_error(self, items: Vec<AbsErrItem>) -> Result<Var<'t>> {
        let l = self.value();
        let cols = l.cols();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(items.len());
        let mut expect = Vec::with_capacity(items.len());
        for it in &items {
            check_item(&l, it.row, it.start, it.end, it.midpoints.len())?;
            let p = softmax(&l.data[it.row * cols + it.start..it.row * cols + it.end]);
            let e = dot(&p, &it.midpoints);
            total += it.weight * (e - it.truth).abs();
            probs.push(p);
            expect.push(e);
        }
        Ok(self.unary(
            Tensor::scalar(total),
            Op::AbsErr {
                logits: self.id,
                items,
                probs,
                expect,
            },
        ))
    }
}

fn check_item(l: &Tensor, row: usize, start: usize, end: usize, width: usize) -> Result<()> {
    if l.shape.len() != 2 || row >= l.rows() || start >= end || end > l.cols() || end - start != width {
        return Err(Error::ShapeMismatch {
            op: "range loss item",
            left: l.shape.clone(),
            right: vec![row, start, end, width],
        });
    }
    Ok(())
}
