use std::collections::HashMap;

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One sequence inside a packed batch of rows.
///
/// Rows `start..start + len` belong to the sequence; only the first `valid`
/// of them (the non-padding prefix) are attended to as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Segment {
    pub fn full(start: usize, len: usize) -> Self {
        Segment { start, len, valid: len }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Rows {
        x: usize,
        idx: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        prefix: Option<(usize, usize)>,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    source: Option<TensorId>,
}

/// Append-only record of primitive operations.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph; [`Tape::backward`] walks them in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by source tensor.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_tensor: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_tensor.get(&t.id()).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_tensor.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_tensor.len()
    }

    /// Adds each tensor's gradient into its `grad` buffer.
    pub fn accumulate_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        for p in params.iter_mut() {
            if let Some(g) = self.by_tensor.get(&p.id()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn take_or_zeros(acc: &mut Option<Vec<f64>>, len: usize) -> Vec<f64> {
    acc.take().unwrap_or_else(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Records a parameter tensor as a leaf; gradients flow back to it only
    /// if it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = t.dims2();
        let v = self.push(rows, cols, t.data().to_vec(), Op::Leaf, t.requires_grad());
        if t.requires_grad() {
            self.nodes[v.0].source = Some(t.id());
        }
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "constant {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&[n.rows, n.cols], n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul of {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.grad_flag(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), g))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {m}x{k} by transpose of {n}x{k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.grad_flag(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::MatMulNt(a.0, b.0), g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(format!(
                "{what} of {}x{} and {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let g = self.grad_flag(&[a.0, b.0]);
        Ok(self.push(r, c, out, Op::Add(a.0, b.0), g))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            let (rr, rc) = self.shape(row);
            return Err(Error::shape(format!("add_row of {r}x{c} and {rr}x{rc}")));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        let g = self.grad_flag(&[a.0, row.0]);
        Ok(self.push(r, c, out, Op::AddRow(a.0, row.0), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let g = self.grad_flag(&[a.0, b.0]);
        Ok(self.push(r, c, out, Op::Mul(a.0, b.0), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let g = self.grad_flag(&[a.0]);
        self.push(r, c, out, Op::Scale(a.0, s), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let g = self.grad_flag(&[a.0]);
        self.push(1, 1, vec![s], Op::Sum(a.0), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let g = self.grad_flag(&[a.0]);
        self.push(r, c, out, Op::Gelu(a.0), g)
    }

    /// Softmax along `axis` (0 = down columns, 1 = across each row), stabilised
    /// by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if axis > 1 {
            return Err(Error::shape(format!("softmax axis {axis} on a 2-d value")));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        let (outer, inner, stride_outer, stride_inner) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        for o in 0..outer {
            let at = |i: usize| o * stride_outer + i * stride_inner;
            let max = (0..inner).map(|i| xs[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..inner {
                let e = (xs[at(i)] - max).exp();
                out[at(i)] = e;
                z += e;
            }
            for i in 0..inner {
                out[at(i)] /= z;
            }
        }
        let g = self.grad_flag(&[x.0]);
        Ok(self.push(r, c, out, Op::Softmax { x: x.0, axis }, g))
    }

    /// Row-wise layer normalisation with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer norm eps must be positive, got {eps}"
            )));
        }
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape(format!(
                "layer norm over {c} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let gs = self.value(gain);
        let bs = self.value(bias);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gs[j] + bs[j];
            }
        }
        let g = self.grad_flag(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Gathers rows of `x` (embedding lookup, pooling by position).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("row index {bad} out of range for {r}x{c}")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let g = self.grad_flag(&[x.0]);
        Ok(self.push(
            idx.len(),
            c,
            out,
            Op::Rows {
                x: x.0,
                idx: idx.to_vec(),
            },
            g,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N×d`. Each query in a segment attends to the
    /// segment's valid keys plus, when given, `p` shared prefix key/value
    /// rows. Output has the shape of `q`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) {
            return Err(Error::shape(format!(
                "attention q {n}x{d}, k {:?}, v {:?}",
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        let p = match prefix {
            Some((pk, pv)) => {
                let (pr, pc) = self.shape(pk);
                if pc != d || self.shape(pv) != (pr, pc) {
                    return Err(Error::shape(format!(
                        "prefix keys {pr}x{pc} / values {:?} for width {d}",
                        self.shape(pv)
                    )));
                }
                pr
            }
            None => 0,
        };
        for s in segments {
            if s.start + s.len > n || s.valid > s.len || (s.valid == 0 && p == 0) {
                return Err(Error::shape(format!(
                    "segment {s:?} invalid for {n} rows with {p} prefix rows"
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q);
        let ks = self.value(k);
        let vs = self.value(v);
        let (pks, pvs): (&[f64], &[f64]) = match prefix {
            Some((pk, pv)) => (self.value(pk), self.value(pv)),
            None => (&[], &[]),
        };
        let total: usize = segments.iter().map(|s| heads * s.len * (p + s.valid)).sum();
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; n * d];
        let mut scores = Vec::new();
        for s in segments {
            let m = p + s.valid;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.len {
                    let qi = &qs[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..p {
                        scores.push(dot(qi, &pks[j * d + off..j * d + off + dh]) * scale);
                    }
                    for j in 0..s.valid {
                        let r = s.start + j;
                        scores.push(dot(qi, &ks[r * d + off..r * d + off + dh]) * scale);
                    }
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let o = &mut out[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc /= z;
                        let vrow = if j < p {
                            &pvs[j * d + off..j * d + off + dh]
                        } else {
                            let r = s.start + j - p;
                            &vs[r * d + off..r * d + off + dh]
                        };
                        let w = *sc;
                        o.iter_mut().zip(vrow).for_each(|(a, b)| *a += w * b);
                    }
                    debug_assert_eq!(scores.len(), m);
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let mut inputs = vec![q.0, k.0, v.0];
        if let Some((pk, pv)) = prefix {
            inputs.extend([pk.0, pv.0]);
        }
        let g = self.grad_flag(&inputs);
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                prefix: prefix.map(|(a, b)| (a.0, b.0)),
                segments: segments.to_vec(),
                heads,
                probs,
            },
            g,
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::shape(format!(
                "{} targets for {n} rows of logits",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= c) {
            return Err(Error::contract(format!(
                "target class {bad} outside [0, {c})"
            )));
        }
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let xs = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            if targets[i] == ignore {
                continue;
            }
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
        }
        let g = self.grad_flag(&[logits.0]);
        Ok(self.push(
            1,
            1,
            vec![loss / count as f64],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            g,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, consuming the tape.
    ///
    /// A loss that depends on no gradient-requiring tensor yields empty
    /// gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape(format!("backward from non-scalar {r}x{c}")));
        }
        let mut result = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(result);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.source {
                        match result.by_tensor.get_mut(&id) {
                            Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                            None => {
                                result.by_tensor.insert(id, gout);
                            }
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a].rows, nodes[a].cols);
                    let n = nodes[b].cols;
                    if wants(a) {
                        let mut ga = take_or_zeros(&mut grads[a], m * k);
                        mm_nt(&gout, &nodes[b].value, &mut ga, m, n, k);
                        grads[a] = Some(ga);
                    }
                    if wants(b) {
                        let mut gb = take_or_zeros(&mut grads[b], k * n);
                        mm_tn(&nodes[a].value, &gout, &mut gb, m, k, n);
                        grads[b] = Some(gb);
                    }
                }
                &Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[a].rows, nodes[a].cols);
                    let n = nodes[b].rows;
                    if wants(a) {
                        let mut ga = take_or_zeros(&mut grads[a], m * k);
                        mm_nn(&gout, &nodes[b].value, &mut ga, m, n, k);
                        grads[a] = Some(ga);
                    }
                    if wants(b) {
                        let mut gb = take_or_zeros(&mut grads[b], n * k);
                        mm_tn(&gout, &nodes[a].value, &mut gb, m, n, k);
                        grads[b] = Some(gb);
                    }
                }
                &Op::Add(a, b) => {
                    if wants(a) {
                        add_into(&mut grads[a], &gout);
                    }
                    if wants(b) {
                        add_into(&mut grads[b], &gout);
                    }
                }
                &Op::AddRow(a, row) => {
                    if wants(row) {
                        let c = node.cols;
                        let mut gr = take_or_zeros(&mut grads[row], c);
                        for chunk in gout.chunks(c.max(1)) {
                            gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                        grads[row] = Some(gr);
                    }
                    if wants(a) {
                        add_into(&mut grads[a], &gout);
                    }
                }
                &Op::Mul(a, b) => {
                    if wants(a) {
                        let g: Vec<f64> =
                            gout.iter().zip(&nodes[b].value).map(|(g, y)| g * y).collect();
                        add_into(&mut grads[a], &g);
                    }
                    if wants(b) {
                        let g: Vec<f64> =
                            gout.iter().zip(&nodes[a].value).map(|(g, x)| g * x).collect();
                        add_into(&mut grads[b], &g);
                    }
                }
                &Op::Scale(a, s) => {
                    let g: Vec<f64> = gout.iter().map(|g| g * s).collect();
                    add_into(&mut grads[a], &g);
                }
                &Op::Sum(a) => {
                    let len = nodes[a].value.len();
                    let g = vec![gout[0]; len];
                    add_into(&mut grads[a], &g);
                }
                &Op::Gelu(a) => {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&nodes[a].value)
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    add_into(&mut grads[a], &g);
                }
                &Op::Softmax { x, axis } => {
                    let (r, c) = (node.rows, node.cols);
                    let y = &node.value;
                    let mut gx = vec![0.0; r * c];
                    let (outer, inner, so, si) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    for o in 0..outer {
                        let at = |i: usize| o * so + i * si;
                        let s: f64 = (0..inner).map(|i| gout[at(i)] * y[at(i)]).sum();
                        for i in 0..inner {
                            gx[at(i)] = y[at(i)] * (gout[at(i)] - s);
                        }
                    }
                    add_into(&mut grads[x], &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = (node.rows, node.cols);
                    let gs = &nodes[*gain].value;
                    if wants(*gain) {
                        let mut gg = take_or_zeros(&mut grads[*gain], c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += gout[i * c + j] * xhat[i * c + j];
                            }
                        }
                        grads[*gain] = Some(gg);
                    }
                    if wants(*bias) {
                        let mut gb = take_or_zeros(&mut grads[*bias], c);
                        for chunk in gout.chunks(c) {
                            gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        grads[*bias] = Some(gb);
                    }
                    if wants(*x) {
                        let mut gx = take_or_zeros(&mut grads[*x], r * c);
                        for i in 0..r {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let dxh = gout[i * c + j] * gs[j];
                                mean_d += dxh;
                                mean_dx += dxh * xhat[i * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                let dxh = gout[i * c + j] * gs[j];
                                gx[i * c + j] +=
                                    rstd[i] * (dxh - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                        grads[*x] = Some(gx);
                    }
                }
                Op::Rows { x, idx } => {
                    let c = node.cols;
                    let mut gx = take_or_zeros(&mut grads[*x], nodes[*x].value.len());
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &gout[r * c..(r + 1) * c];
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                    grads[*x] = Some(gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    prefix,
                    segments,
                    heads,
                    probs,
                } => {
                    let (n, d) = (node.rows, node.cols);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let p = prefix.map(|(pk, _)| nodes[pk].rows).unwrap_or(0);
                    let qs = &nodes[*q].value;
                    let ks = &nodes[*k].value;
                    let vs = &nodes[*v].value;
                    let (pks, pvs): (&[f64], &[f64]) = match prefix {
                        Some((pk, pv)) => (&nodes[*pk].value, &nodes[*pv].value),
                        None => (&[], &[]),
                    };
                    let mut gq = vec![0.0; n * d];
                    let mut gk = vec![0.0; n * d];
                    let mut gv = vec![0.0; n * d];
                    let mut gpk = vec![0.0; p * d];
                    let mut gpv = vec![0.0; p * d];
                    let mut dp = Vec::new();
                    let mut cursor = 0;
                    for s in segments {
                        let m = p + s.valid;
                        for h in 0..*heads {
                            let off = h * dh;
                            for i in 0..s.len {
                                let row = s.start + i;
                                let pr = &probs[cursor..cursor + m];
                                cursor += m;
                                let go = &gout[row * d + off..row * d + off + dh];
                                dp.clear();
                                for j in 0..m {
                                    let vrow = if j < p {
                                        &pvs[j * d + off..j * d + off + dh]
                                    } else {
                                        let r = s.start + j - p;
                                        &vs[r * d + off..r * d + off + dh]
                                    };
                                    dp.push(dot(go, vrow));
                                }
                                let mix: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                let qi = &qs[row * d + off..row * d + off + dh];
                                for j in 0..m {
                                    let ds = pr[j] * (dp[j] - mix) * scale;
                                    let (krow, gkrow, gvrow) = if j < p {
                                        (
                                            &pks[j * d + off..j * d + off + dh],
                                            &mut gpk[j * d + off..j * d + off + dh],
                                            &mut gpv[j * d + off..j * d + off + dh],
                                        )
                                    } else {
                                        let r = s.start + j - p;
                                        (
                                            &ks[r * d + off..r * d + off + dh],
                                            &mut gk[r * d + off..r * d + off + dh],
                                            &mut gv[r * d + off..r * d + off + dh],
                                        )
                                    };
                                    let gqrow = &mut gq[row * d + off..row * d + off + dh];
                                    for t in 0..dh {
                                        gqrow[t] += ds * krow[t];
                                        gkrow[t] += ds * qi[t];
                                        gvrow[t] += pr[j] * go[t];
                                    }
                                }
                            }
                        }
                    }
                    if wants(*q) {
                        add_into(&mut grads[*q], &gq);
                    }
                    if wants(*k) {
                        add_into(&mut grads[*k], &gk);
                    }
                    if wants(*v) {
                        add_into(&mut grads[*v], &gv);
                    }
                    if let Some((pk, pv)) = prefix {
                        if wants(*pk) {
                            add_into(&mut grads[*pk], &gpk);
                        }
                        if wants(*pv) {
                            add_into(&mut grads[*pv], &gpv);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let c = nodes[*logits].cols;
                    let scale = gout[0] / *count as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..c {
                            gl[i * c + j] = probs[i * c + j] * scale;
                        }
                        gl[i * c + t] -= scale;
                    }
                    add_into(&mut grads[*logits], &gl);
                }
            }
        }
        Ok(result)
    }
}
