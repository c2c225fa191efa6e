//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] executes eagerly: each op computes its forward value when
//! recorded and stores whatever context backward needs (argmax indices,
//! softmax outputs, normalized activations). `backward` walks the tape in
//! reverse; parents always precede children, so a single reverse sweep
//! suffices. One graph per forward/backward pass; parameters live outside
//! the graph in a [`ParamSet`](crate::params::ParamSet) and receive
//! gradients via [`Graph::scatter_grads`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running statistics for one batch-norm layer. The learnable gamma/beta
/// live in the owning model's `ParamSet`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Relu(Var),
    /// y = x W^T (+ b) over the trailing axis.
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Softmax over the trailing axis; output saved in node values.
    SoftmaxLast(Var),
    /// S[.., i, j] = a[.., i, :] . b[.., j, :]
    PairwiseDot {
        a: Var,
        b: Var,
    },
    /// Y[.., :, :] = A[.., J, J] * B[.., J, C]
    BatchedMatMul {
        a: Var,
        b: Var,
    },
    /// Channel-last batch norm; xhat and inv_std retained for backward.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Same-length 1-D convolution over the middle axis of [N, T, C].
    TemporalConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Max over one axis (axis removed); argmax kept for backward and probes.
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    /// out[.., j, :] = concat(x[.., j, :], e[j, :]); e broadcast over leading axes.
    ConcatBroadcast {
        x: Var,
        e: Var,
    },
    /// out[n, t, j, :] = x[n, t, j, :] + e[t, :]
    AddBroadcastFrames {
        x: Var,
        e: Var,
    },
    /// Same data, new shape.
    Reshape(Var),
    /// Scalar sum of all elements.
    SumAll(Var),
    /// Mean over batch of label-smoothed cross entropy; probs saved.
    CrossEntropyLs {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        eps: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    check_nan: bool,
}

fn nan_check_enabled() -> bool {
    match std::env::var("MSGN_CHECK_NAN") {
        Ok(v) => v != "0",
        Err(_) => cfg!(debug_assertions),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_nan: nan_check_enabled(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        if self.check_nan {
            assert!(
                values.iter().all(|v| v.is_finite()),
                "non-finite value produced by forward op"
            );
        }
        let grad = if requires_grad {
            vec![0.0; values.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            shape,
            values,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        n.requires_grad.then_some(&n.grad[..])
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, false, Op::Leaf { param: None })
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.values, requires_grad, Op::Leaf { param: None })
    }

    /// Insert a parameter as a leaf; its gradient is copied back by
    /// [`Graph::scatter_grads`] after backward.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        let p = ps.get(id);
        self.push(
            p.value.shape.clone(),
            p.value.values.clone(),
            p.requires_grad,
            Op::Leaf { param: Some(id) },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let values: Vec<f64> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), values, rg, Op::Relu(x))
    }

    /// y = x W^T + b applied over the trailing axis of x.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last().copied().unwrap_or(0) != ws[1] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [dout] {
                return Err(Error::shape("affine bias", bs, &ws));
            }
        }
        let rows = self.nodes[x.0].values.len() / din;
        let mut values = vec![0.0; rows * dout];
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            for r in 0..rows {
                let xrow = &xv[r * din..(r + 1) * din];
                let orow = &mut values[r * dout..(r + 1) * dout];
                for (o, wrow) in orow.iter_mut().zip(wv.chunks_exact(din)) {
                    *o = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                }
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].values;
                for orow in values.chunks_exact_mut(dout) {
                    for (o, &bval) in orow.iter_mut().zip(bv) {
                        *o += bval;
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(shape, values, rg, Op::Affine { x, w, b }))
    }

    /// Row-wise softmax over the trailing axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let c = shape.last().copied().unwrap_or(1);
        let mut values = self.nodes[x.0].values.clone();
        for row in values.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::SoftmaxLast(x))
    }

    /// S[.., i, j] = a[.., i, :] . b[.., j, :] for a, b of shape [.., J, C].
    pub fn pairwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb || sa.len() < 2 {
            return Err(Error::shape("pairwise_dot", &sa, &sb));
        }
        let c = sa[sa.len() - 1];
        let j = sa[sa.len() - 2];
        let frames = self.nodes[a.0].values.len() / (j * c);
        let mut values = vec![0.0; frames * j * j];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for f in 0..frames {
                let afr = &av[f * j * c..(f + 1) * j * c];
                let bfr = &bv[f * j * c..(f + 1) * j * c];
                let ofr = &mut values[f * j * j..(f + 1) * j * j];
                for i in 0..j {
                    let arow = &afr[i * c..(i + 1) * c];
                    for jj in 0..j {
                        let brow = &bfr[jj * c..(jj + 1) * c];
                        ofr[i * j + jj] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
            }
        }
        let mut shape = sa;
        let last = shape.len() - 1;
        shape[last] = j;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, values, rg, Op::PairwiseDot { a, b }))
    }

    /// Y = A B with A: [.., J, J], B: [.., J, C], batched over leading axes.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let la = sa.len();
        let lb = sb.len();
        if la < 2 || lb < 2 || sa[la - 1] != sa[la - 2] || sa[la - 1] != sb[lb - 2] {
            return Err(Error::shape("batched_matmul", &sa, &sb));
        }
        let j = sa[la - 1];
        let c = sb[lb - 1];
        let frames = self.nodes[b.0].values.len() / (j * c);
        if self.nodes[a.0].values.len() != frames * j * j {
            return Err(Error::shape("batched_matmul", &sa, &sb));
        }
        let mut values = vec![0.0; frames * j * c];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for f in 0..frames {
                matmul(
                    &av[f * j * j..(f + 1) * j * j],
                    &bv[f * j * c..(f + 1) * j * c],
                    &mut values[f * j * c..(f + 1) * j * c],
                    j,
                    j,
                    c,
                );
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(sb, values, rg, Op::BatchedMatMul { a, b }))
    }

    /// Channel-last batch normalization. In train mode the batch statistics
    /// are used and `st` running stats are updated; in eval mode the op is a
    /// fixed per-channel affine map from the running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        st: &mut BatchNormState,
        train: bool,
    ) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let c = shape.last().copied().unwrap_or(1);
        if st.running_mean.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, &[st.running_mean.len()]));
        }
        let rows = self.nodes[x.0].values.len() / c;
        if train && rows < 2 {
            return Err(Error::Config(
                "batch_norm requires at least 2 rows per channel in train mode".into(),
            ));
        }
        let xv = &self.nodes[x.0].values;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for row in xv.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            for row in xv.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in &mut var {
                *s /= rows as f64;
            }
            // running variance tracks the unbiased estimate
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for i in 0..c {
                st.running_mean[i] = (1.0 - st.momentum) * st.running_mean[i] + st.momentum * mean[i];
                st.running_var[i] =
                    (1.0 - st.momentum) * st.running_var[i] + st.momentum * var[i] * unbias;
            }
            (mean, var)
        } else {
            (st.running_mean.clone(), st.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + st.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (xrow, hrow) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
            for i in 0..c {
                hrow[i] = (xrow[i] - mean[i]) * inv_std[i];
            }
        }
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut values = vec![0.0; xv.len()];
        for (hrow, orow) in xhat.chunks_exact(c).zip(values.chunks_exact_mut(c)) {
            for i in 0..c {
                orow[i] = gv[i] * hrow[i] + bv[i];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        // Eval mode treats mean/var as constants, so the same backward formula
        // does not apply; the eval backward below special-cases via `train`.
        let op = if train {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            // reuse the same op with an inv_std sentinel extended by one slot
            let mut inv = inv_std;
            inv.push(f64::NAN); // marker: eval mode
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv,
            }
        };
        Ok(self.push(shape, values, rg, op))
    }

    /// Same-length temporal convolution over x: [N, T, Cin] with
    /// w: [Cout, Cin, K] (K odd) and zero padding (K-1)/2.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
            return Err(Error::shape("temporal_conv", &xs, &ws));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal_conv kernel size must be odd, got {k}"
            )));
        }
        let (n, t, cin) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let pad = (k - 1) / 2;
        // repack w as [k][cout * cin] so the inner loop is contiguous
        let wv = &self.nodes[w.0].values;
        let mut wk = vec![vec![0.0; cout * cin]; k];
        for co in 0..cout {
            for ci in 0..cin {
                for (kk, wkk) in wk.iter_mut().enumerate() {
                    wkk[co * cin + ci] = wv[(co * cin + ci) * k + kk];
                }
            }
        }
        let mut values = vec![0.0; n * t * cout];
        {
            let xv = &self.nodes[x.0].values;
            for bi in 0..n {
                for ti in 0..t {
                    let orow = &mut values[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                    for (kk, wkk) in wk.iter().enumerate() {
                        let src = ti as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xrow = &xv[(bi * t + src as usize) * cin..][..cin];
                        for (co, o) in orow.iter_mut().enumerate() {
                            let wrow = &wkk[co * cin..(co + 1) * cin];
                            *o += xrow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(b) = b {
                let bs = self.shape(b);
                if bs != [cout] {
                    return Err(Error::shape("temporal_conv bias", bs, &ws));
                }
                let bv = &self.nodes[b.0].values;
                for orow in values.chunks_exact_mut(cout) {
                    for (o, &bval) in orow.iter_mut().zip(bv) {
                        *o += bval;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(vec![n, t, cout], values, rg, Op::TemporalConv { x, w, b }))
    }

    /// Elementwise max over `axis`; the axis is removed from the shape.
    /// Ties break to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::shape("max_axis", &xs, &[axis]));
        }
        let outer: usize = xs[..axis].iter().product();
        let alen = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut values = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        {
            let xv = &self.nodes[x.0].values;
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = xv[o * alen * inner + i];
                    let mut besta = 0usize;
                    for a in 1..alen {
                        let v = xv[(o * alen + a) * inner + i];
                        if v > best {
                            best = v;
                            besta = a;
                        }
                    }
                    values[o * inner + i] = best;
                    argmax[o * inner + i] = besta;
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let rg = self.requires(x);
        Ok(self.push(shape, values, rg, Op::MaxAxis { x, axis, argmax }))
    }

    /// Argmax indices recorded by a `max_axis` node (used by the SMP probe).
    pub fn argmax_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxAxis { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// out[.., j, :] = concat(x[.., j, :], e[j, :]) with e: [J, Ce].
    pub fn concat_broadcast(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() < 2 || es.len() != 2 || xs[xs.len() - 2] != es[0] {
            return Err(Error::shape("concat_broadcast", &xs, &es));
        }
        let c = xs[xs.len() - 1];
        let ce = es[1];
        let j = es[0];
        let lead = self.nodes[x.0].values.len() / (j * c);
        let mut values = vec![0.0; lead * j * (c + ce)];
        {
            let xv = &self.nodes[x.0].values;
            let ev = &self.nodes[e.0].values;
            for l in 0..lead {
                for jj in 0..j {
                    let src = &xv[(l * j + jj) * c..][..c];
                    let dst = &mut values[(l * j + jj) * (c + ce)..][..c + ce];
                    dst[..c].copy_from_slice(src);
                    dst[c..].copy_from_slice(&ev[jj * ce..(jj + 1) * ce]);
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = c + ce;
        let rg = self.requires(x) || self.requires(e);
        Ok(self.push(shape, values, rg, Op::ConcatBroadcast { x, e }))
    }

    /// out[n, t, j, :] = x[n, t, j, :] + e[t, :] with x: [N, T, J, C], e: [T, C].
    pub fn add_broadcast_frames(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() != 4 || es.len() != 2 || xs[1] != es[0] || xs[3] != es[1] {
            return Err(Error::shape("add_broadcast_frames", &xs, &es));
        }
        let (n, t, j, c) = (xs[0], xs[1], xs[2], xs[3]);
        let mut values = self.nodes[x.0].values.clone();
        {
            let ev = &self.nodes[e.0].values;
            for bi in 0..n {
                for ti in 0..t {
                    let erow = &ev[ti * c..(ti + 1) * c];
                    for jj in 0..j {
                        let dst = &mut values[((bi * t + ti) * j + jj) * c..][..c];
                        for (d, &a) in dst.iter_mut().zip(erow) {
                            *d += a;
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(e);
        Ok(self.push(xs, values, rg, Op::AddBroadcastFrames { x, e }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].values.len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let values = self.nodes[x.0].values.clone();
        let rg = self.requires(x);
        Ok(self.push(shape, values, rg, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.requires(x);
        self.push(vec![], vec![s], rg, Op::SumAll(x))
    }

    /// Mean over the batch of -sum_k q_k log p_k with
    /// q = (1-eps) * onehot + eps / K and p = softmax(logits).
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        labels: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!(
                "label smoothing factor must be in [0, 1), got {eps}"
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Data(format!(
                    "label {l} out of range [0, {k}) at batch index {i}"
                )));
            }
        }
        let mut probs = self.nodes[logits.0].values.clone();
        for row in probs.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact(k).zip(labels) {
            let uniform = eps / k as f64;
            for (c, &p) in row.iter().enumerate() {
                let q = if c == label { 1.0 - eps + uniform } else { uniform };
                if q > 0.0 {
                    // clamp exact zeros, but let non-finite inputs propagate
                    let lp = if p > 0.0 {
                        p.ln()
                    } else if p == 0.0 {
                        1e-300f64.ln()
                    } else {
                        f64::NAN
                    };
                    loss -= q * lp;
                }
            }
        }
        loss /= n as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropyLs {
                logits,
                probs,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse sweep from `loss` (seeded with 1). Gradients accumulate on
    /// every node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.nodes[loss.0].values.len() == 1,
            "backward requires a scalar root"
        );
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(idx);
            let node = &mut tail[0];
            if !node.requires_grad {
                continue;
            }
            backward_op(node, head);
        }
    }

    /// Copy leaf gradients back into the owning parameter set (accumulating).
    pub fn scatter_grads(&self, ps: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if node.requires_grad {
                    let g = ps.grad_mut(id);
                    for (dst, src) in g.iter_mut().zip(&node.grad) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Standalone softmax used by score fusion; no graph involved.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn backward_op(node: &mut Node, head: &mut [Node]) {
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                let p = &mut head[v.0];
                if p.requires_grad {
                    for (g, d) in p.grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                }
            }
        }
        Op::Relu(x) => {
            let p = &mut head[x.0];
            if p.requires_grad {
                for ((g, &v), d) in p.grad.iter_mut().zip(&p.values).zip(&node.grad) {
                    if v > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Affine { x, w, b } => {
            let din = head[w.0].shape[1];
            let dout = head[w.0].shape[0];
            let rows = head[x.0].values.len() / din;
            if head[x.0].requires_grad {
                let wv = std::mem::take(&mut head[w.0].values);
                let p = &mut head[x.0];
                for r in 0..rows {
                    let drow = &node.grad[r * dout..(r + 1) * dout];
                    let grow = &mut p.grad[r * din..(r + 1) * din];
                    for (o, wrow) in drow.iter().zip(wv.chunks_exact(din)) {
                        if *o == 0.0 {
                            continue;
                        }
                        for (g, &wval) in grow.iter_mut().zip(wrow) {
                            *g += o * wval;
                        }
                    }
                }
                head[w.0].values = wv;
            }
            if head[w.0].requires_grad {
                let xv = std::mem::take(&mut head[x.0].values);
                let p = &mut head[w.0];
                for r in 0..rows {
                    let drow = &node.grad[r * dout..(r + 1) * dout];
                    let xrow = &xv[r * din..(r + 1) * din];
                    for (o, grow) in drow.iter().zip(p.grad.chunks_exact_mut(din)) {
                        if *o == 0.0 {
                            continue;
                        }
                        for (g, &xval) in grow.iter_mut().zip(xrow) {
                            *g += o * xval;
                        }
                    }
                }
                head[x.0].values = xv;
            }
            if let Some(b) = b {
                let p = &mut head[b.0];
                if p.requires_grad {
                    for drow in node.grad.chunks_exact(dout) {
                        for (g, d) in p.grad.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
        }
        Op::SoftmaxLast(x) => {
            let p = &mut head[x.0];
            if p.requires_grad {
                let c = node.shape.last().copied().unwrap_or(1);
                for ((grow, yrow), drow) in p
                    .grad
                    .chunks_exact_mut(c)
                    .zip(node.values.chunks_exact(c))
                    .zip(node.grad.chunks_exact(c))
                {
                    let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                    for i in 0..c {
                        grow[i] += yrow[i] * (drow[i] - dot);
                    }
                }
            }
        }
        Op::PairwiseDot { a, b } => {
            let (a, b) = (*a, *b);
            let c = head[a.0].shape.last().copied().unwrap();
            let sl = head[a.0].shape.len();
            let j = head[a.0].shape[sl - 2];
            let frames = head[a.0].values.len() / (j * c);
            if head[a.0].requires_grad {
                let bv = std::mem::take(&mut head[b.0].values);
                let p = &mut head[a.0];
                for f in 0..frames {
                    let dfr = &node.grad[f * j * j..(f + 1) * j * j];
                    let bfr = &bv[f * j * c..(f + 1) * j * c];
                    let gfr = &mut p.grad[f * j * c..(f + 1) * j * c];
                    for i in 0..j {
                        let grow = &mut gfr[i * c..(i + 1) * c];
                        for jj in 0..j {
                            let d = dfr[i * j + jj];
                            if d == 0.0 {
                                continue;
                            }
                            let brow = &bfr[jj * c..(jj + 1) * c];
                            for (g, &bval) in grow.iter_mut().zip(brow) {
                                *g += d * bval;
                            }
                        }
                    }
                }
                head[b.0].values = bv;
            }
            if head[b.0].requires_grad {
                let av = std::mem::take(&mut head[a.0].values);
                let p = &mut head[b.0];
                for f in 0..frames {
                    let dfr = &node.grad[f * j * j..(f + 1) * j * j];
                    let afr = &av[f * j * c..(f + 1) * j * c];
                    let gfr = &mut p.grad[f * j * c..(f + 1) * j * c];
                    for i in 0..j {
                        let arow = &afr[i * c..(i + 1) * c];
                        for jj in 0..j {
                            let d = dfr[i * j + jj];
                            if d == 0.0 {
                                continue;
                            }
                            let grow = &mut gfr[jj * c..(jj + 1) * c];
                            for (g, &aval) in grow.iter_mut().zip(arow) {
                                *g += d * aval;
                            }
                        }
                    }
                }
                head[a.0].values = av;
            }
        }
        Op::BatchedMatMul { a, b } => {
            let (a, b) = (*a, *b);
            let sl = head[a.0].shape.len();
            let j = head[a.0].shape[sl - 1];
            let c = head[b.0].shape.last().copied().unwrap();
            let frames = head[b.0].values.len() / (j * c);
            if head[a.0].requires_grad {
                let bv = std::mem::take(&mut head[b.0].values);
                let p = &mut head[a.0];
                for f in 0..frames {
                    let dfr = &node.grad[f * j * c..(f + 1) * j * c];
                    let bfr = &bv[f * j * c..(f + 1) * j * c];
                    let gfr = &mut p.grad[f * j * j..(f + 1) * j * j];
                    for i in 0..j {
                        let drow = &dfr[i * c..(i + 1) * c];
                        for jj in 0..j {
                            let brow = &bfr[jj * c..(jj + 1) * c];
                            gfr[i * j + jj] +=
                                drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                head[b.0].values = bv;
            }
            if head[b.0].requires_grad {
                let av = std::mem::take(&mut head[a.0].values);
                let p = &mut head[b.0];
                for f in 0..frames {
                    let dfr = &node.grad[f * j * c..(f + 1) * j * c];
                    let afr = &av[f * j * j..(f + 1) * j * j];
                    let gfr = &mut p.grad[f * j * c..(f + 1) * j * c];
                    for i in 0..j {
                        let drow = &dfr[i * c..(i + 1) * c];
                        for jj in 0..j {
                            let w = afr[i * j + jj];
                            if w == 0.0 {
                                continue;
                            }
                            let grow = &mut gfr[jj * c..(jj + 1) * c];
                            for (g, &d) in grow.iter_mut().zip(drow) {
                                *g += w * d;
                            }
                        }
                    }
                }
                head[a.0].values = av;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let eval_mode = inv_std.last().is_some_and(|v| v.is_nan());
            let c = node.shape.last().copied().unwrap_or(1);
            let rows = node.values.len() / c;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dxhat_dot = vec![0.0; c]; // sum over rows of d * xhat, per channel
            for (drow, hrow) in node.grad.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for i in 0..c {
                    dgamma[i] += drow[i] * hrow[i];
                    dbeta[i] += drow[i];
                }
            }
            dxhat_dot.copy_from_slice(&dgamma);
            if head[gamma.0].requires_grad {
                for (g, d) in head[gamma.0].grad.iter_mut().zip(&dgamma) {
                    *g += d;
                }
            }
            if head[beta.0].requires_grad {
                for (g, d) in head[beta.0].grad.iter_mut().zip(&dbeta) {
                    *g += d;
                }
            }
            if head[x.0].requires_grad {
                let gv = std::mem::take(&mut head[gamma.0].values);
                let p = &mut head[x.0];
                if eval_mode {
                    // y = gamma * inv_std * (x - mu_run) + beta: dx = d * gamma * inv_std
                    for (grow, drow) in p.grad.chunks_exact_mut(c).zip(node.grad.chunks_exact(c)) {
                        for i in 0..c {
                            grow[i] += drow[i] * gv[i] * inv_std[i];
                        }
                    }
                } else {
                    let m = rows as f64;
                    for ((grow, drow), hrow) in p
                        .grad
                        .chunks_exact_mut(c)
                        .zip(node.grad.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for i in 0..c {
                            grow[i] += gv[i] * inv_std[i] / m
                                * (m * drow[i] - dbeta[i] - hrow[i] * dxhat_dot[i]);
                        }
                    }
                }
                head[gamma.0].values = gv;
            }
        }
        Op::TemporalConv { x, w, b } => {
            let (x, w) = (*x, *w);
            let b = *b;
            let xs = head[x.0].shape.clone();
            let ws = head[w.0].shape.clone();
            let (n, t, cin) = (xs[0], xs[1], xs[2]);
            let (cout, k) = (ws[0], ws[2]);
            let pad = (k - 1) / 2;
            if head[x.0].requires_grad {
                let wv = std::mem::take(&mut head[w.0].values);
                let p = &mut head[x.0];
                for bi in 0..n {
                    for ti in 0..t {
                        let drow = &node.grad[(bi * t + ti) * cout..][..cout];
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let grow = &mut p.grad[(bi * t + src as usize) * cin..][..cin];
                            for (co, &d) in drow.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    grow[ci] += d * wv[(co * cin + ci) * k + kk];
                                }
                            }
                        }
                    }
                }
                head[w.0].values = wv;
            }
            if head[w.0].requires_grad {
                let xv = std::mem::take(&mut head[x.0].values);
                let p = &mut head[w.0];
                for bi in 0..n {
                    for ti in 0..t {
                        let drow = &node.grad[(bi * t + ti) * cout..][..cout];
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = &xv[(bi * t + src as usize) * cin..][..cin];
                            for (co, &d) in drow.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    p.grad[(co * cin + ci) * k + kk] += d * xrow[ci];
                                }
                            }
                        }
                    }
                }
                head[x.0].values = xv;
            }
            if let Some(b) = b {
                let p = &mut head[b.0];
                if p.requires_grad {
                    for drow in node.grad.chunks_exact(cout) {
                        for (g, d) in p.grad.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
        }
        Op::MaxAxis { x, axis, argmax } => {
            let x = *x;
            let p = &mut head[x.0];
            if p.requires_grad {
                let xs = &p.shape;
                let alen = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let outer = p.values.len() / (alen * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let a = argmax[o * inner + i];
                        p.grad[(o * alen + a) * inner + i] += node.grad[o * inner + i];
                    }
                }
            }
        }
        Op::ConcatBroadcast { x, e } => {
            let (x, e) = (*x, *e);
            let es = head[e.0].shape.clone();
            let (j, ce) = (es[0], es[1]);
            let ctot = node.shape.last().copied().unwrap();
            let c = ctot - ce;
            let lead = node.values.len() / (j * ctot);
            if head[x.0].requires_grad {
                let p = &mut head[x.0];
                for l in 0..lead {
                    for jj in 0..j {
                        let drow = &node.grad[(l * j + jj) * ctot..][..c];
                        let grow = &mut p.grad[(l * j + jj) * c..][..c];
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
            if head[e.0].requires_grad {
                let p = &mut head[e.0];
                for l in 0..lead {
                    for jj in 0..j {
                        let drow = &node.grad[(l * j + jj) * ctot + c..][..ce];
                        let grow = &mut p.grad[jj * ce..(jj + 1) * ce];
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
        }
        Op::AddBroadcastFrames { x, e } => {
            let (x, e) = (*x, *e);
            let xs = node.shape.clone();
            let (n, t, j, c) = (xs[0], xs[1], xs[2], xs[3]);
            if head[x.0].requires_grad {
                let p = &mut head[x.0];
                for (g, d) in p.grad.iter_mut().zip(&node.grad) {
                    *g += d;
                }
            }
            if head[e.0].requires_grad {
                let p = &mut head[e.0];
                for bi in 0..n {
                    for ti in 0..t {
                        let grow = &mut p.grad[ti * c..(ti + 1) * c];
                        for jj in 0..j {
                            let drow = &node.grad[((bi * t + ti) * j + jj) * c..][..c];
                            for (g, d) in grow.iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            let p = &mut head[x.0];
            if p.requires_grad {
                for (g, d) in p.grad.iter_mut().zip(&node.grad) {
                    *g += d;
                }
            }
        }
        Op::SumAll(x) => {
            let p = &mut head[x.0];
            if p.requires_grad {
                let d = node.grad[0];
                for g in p.grad.iter_mut() {
                    *g += d;
                }
            }
        }
        Op::CrossEntropyLs {
            logits,
            probs,
            labels,
            eps,
        } => {
            let logits = *logits;
            let p = &mut head[logits.0];
            if p.requires_grad {
                let k = p.shape[1];
                let n = labels.len() as f64;
                let d = node.grad[0];
                let uniform = eps / k as f64;
                for ((grow, prow), &label) in p
                    .grad
                    .chunks_exact_mut(k)
                    .zip(probs.chunks_exact(k))
                    .zip(labels)
                {
                    for c in 0..k {
                        let q = if c == label {
                            1.0 - eps + uniform
                        } else {
                            uniform
                        };
                        grow[c] += d * (prow[c] - q) / n;
                    }
                }
            }
        }
    }
}
