//! Recording tape for reverse-mode differentiation.
//!
//! Operations execute eagerly and are recorded; [`Tape::backward`] replays
//! them in reverse, applying a hand-written vector-Jacobian rule per
//! operation. No external autodiff is involved; every rule is covered by a
//! finite-difference test.
//!
//! Shape violations in graph construction are programming errors and panic;
//! the fallible public surface lives in [`crate::ops`].

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::ops;
use crate::params::{ParamId, ParamStore};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    /// a[m,k] · b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// a[m,k] · b[n,k]ᵀ
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// a[m,n] + bias[1,n] broadcast over rows
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Per-row prefix attention: row t sees keys/values at positions <= t.
    /// Positions beyond t are never read, so causality is exact.
    CausalAttend { q: NodeId, k: NodeId, v: NodeId, scale: f64 },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// Average pooling of a side×side token grid by an integer factor.
    AvgPool { a: NodeId, side: usize, factor: usize },
    /// Bilinear resize of a token grid (align-corners).
    Bilinear { a: NodeId, side_in: usize, side_out: usize },
    /// Elementwise multiply by a fixed mask (dropout).
    MulMask { a: NodeId, mask: Vec<f64> },
    /// Mean NLL over masked-true positions; scalar output.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
    /// Cached intermediates for the backward pass (attention probabilities,
    /// layer-norm moments).
    aux: Vec<f64>,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

fn node_data<'x>(params: &'x ParamStore, nodes: &'x [Node], id: NodeId) -> &'x [f64] {
    match &nodes[id.0].value {
        Value::Owned(v) => v,
        Value::Param(p) => params.get(*p).data(),
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        node_data(self.params, &self.nodes, id)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].rows * self.nodes[id.0].cols, 1);
        self.value(id)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Value, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Bind a stored parameter. Repeated binds return the same node so its
    /// gradient accumulates in one place.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&(_, n)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return n;
        }
        let t = self.params.get(id);
        let needs = t.requires_grad;
        let n = self.push(t.rows(), t.cols(), Value::Param(id), Op::Leaf, needs);
        self.param_nodes.push((id, n));
        n
    }

    /// A constant matrix; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, Value::Owned(data), Op::Leaf, false)
    }

    /// An owned leaf copied from a tensor; tracked if `requires_grad` is set.
    pub fn input(&mut self, t: &crate::tensor::Tensor) -> NodeId {
        self.push(
            t.rows(),
            t.cols(),
            Value::Owned(t.data().to_vec()),
            Op::Leaf,
            t.requires_grad,
        )
    }

    // ── operations ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        ops::matmul_acc(
            node_data(self.params, &self.nodes, a),
            node_data(self.params, &self.nodes, b),
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(m, n, Value::Owned(out), Op::Matmul { a, b }, needs)
    }

    /// a · bᵀ — the natural orientation for `y = x · Wᵀ` linear layers and
    /// attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        ops::matmul_nt_acc(
            node_data(self.params, &self.nodes, a),
            node_data(self.params, &self.nodes, b),
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(m, n, Value::Owned(out), Op::MatmulNT { a, b }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (m, n) = self.shape(a);
        let out = node_data(self.params, &self.nodes, a)
            .iter()
            .zip(node_data(self.params, &self.nodes, b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(m, n, Value::Owned(out), Op::Add { a, b }, needs)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(bias);
        assert_eq!((br, bc), (1, n), "bias must be a [1,n] row");
        let bdata = node_data(self.params, &self.nodes, bias).to_vec();
        let out = node_data(self.params, &self.nodes, a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bdata).map(|(x, y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        self.push(m, n, Value::Owned(out), Op::AddBias { a, bias }, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = node_data(self.params, &self.nodes, a)
            .iter()
            .map(|x| c * x)
            .collect();
        let needs = self.needs(a);
        self.push(m, n, Value::Owned(out), Op::Scale { a, c }, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = node_data(self.params, &self.nodes, a)
            .iter()
            .map(|&x| math::gelu(x))
            .collect();
        let needs = self.needs(a);
        self.push(m, n, Value::Owned(out), Op::Gelu { a }, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = node_data(self.params, &self.nodes, a).to_vec();
        for row in out.chunks_mut(n) {
            ops::softmax_row(row);
        }
        let needs = self.needs(a);
        self.push(m, n, Value::Owned(out), Op::SoftmaxRows { a }, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n), "gamma width");
        assert_eq!(self.shape(beta), (1, n), "beta width");
        let mut out = vec![0.0; m * n];
        let mut aux = vec![0.0; 2 * m]; // (mean, rstd) per row
        {
            let xd = node_data(self.params, &self.nodes, x);
            let g = node_data(self.params, &self.nodes, gamma);
            let b = node_data(self.params, &self.nodes, beta);
            for (r, (xrow, orow)) in xd.chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let (mean, rstd) = ops::row_moments(xrow, eps);
                aux[2 * r] = mean;
                aux[2 * r + 1] = rstd;
                for i in 0..n {
                    orow[i] = (xrow[i] - mean) * rstd * g[i] + b[i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            m,
            n,
            Value::Owned(out),
            Op::LayerNorm { x, gamma, beta },
            needs,
        );
        self.nodes[id.0].aux = aux;
        id
    }

    pub fn causal_attend(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> NodeId {
        let (t_len, hd) = self.shape(q);
        assert_eq!(self.shape(k), (t_len, hd), "key shape");
        assert_eq!(self.shape(v), (t_len, hd), "value shape");
        let mut out = vec![0.0; t_len * hd];
        let mut probs = vec![0.0; t_len * t_len];
        {
            let qd = node_data(self.params, &self.nodes, q);
            let kd = node_data(self.params, &self.nodes, k);
            let vd = node_data(self.params, &self.nodes, v);
            for t in 0..t_len {
                let qrow = &qd[t * hd..(t + 1) * hd];
                let prow = &mut probs[t * t_len..t * t_len + t + 1];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[j * hd..(j + 1) * hd];
                    *p = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                ops::softmax_row(prow);
                let orow = &mut out[t * hd..(t + 1) * hd];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[j * hd..(j + 1) * hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let id = self.push(
            t_len,
            hd,
            Value::Owned(out),
            Op::CausalAttend { q, k, v, scale },
            needs,
        );
        self.nodes[id.0].aux = probs;
        id
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let (rows, n) = self.shape(a);
        let data = node_data(self.params, &self.nodes, a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in &idx {
            assert!(r < rows, "gather index {r} out of {rows} rows");
            out.extend_from_slice(&data[r * n..(r + 1) * n]);
        }
        let m = idx.len();
        let needs = self.needs(a);
        self.push(m, n, Value::Owned(out), Op::GatherRows { a, idx }, needs)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, n) = self.shape(a);
        assert!(start + len <= rows, "row slice out of range");
        let out = node_data(self.params, &self.nodes, a)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        self.push(len, n, Value::Owned(out), Op::SliceRows { a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, n) = self.shape(a);
        assert!(start + len <= n, "col slice out of range");
        let data = node_data(self.params, &self.nodes, a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(a);
        self.push(rows, len, Value::Owned(out), Op::SliceCols { a, start }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, n, "concat_rows widths");
            out.extend_from_slice(node_data(self.params, &self.nodes, p));
            rows += r;
            needs |= self.needs(p);
        }
        self.push(
            rows,
            n,
            Value::Owned(out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols heights");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let data = node_data(self.params, &self.nodes, p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            rows,
            total,
            Value::Owned(out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn avg_pool(&mut self, a: NodeId, side: usize, factor: usize) -> NodeId {
        let (rows, n) = self.shape(a);
        assert_eq!(rows, side * side, "avg_pool expects side² tokens");
        assert_eq!(side % factor, 0, "pool factor must divide side");
        let out_side = side / factor;
        let mut out = vec![0.0; out_side * out_side * n];
        ops::avg_pool_grid(
            node_data(self.params, &self.nodes, a),
            side,
            n,
            factor,
            &mut out,
        );
        let needs = self.needs(a);
        self.push(
            out_side * out_side,
            n,
            Value::Owned(out),
            Op::AvgPool { a, side, factor },
            needs,
        )
    }

    pub fn bilinear_resize(&mut self, a: NodeId, side_in: usize, side_out: usize) -> NodeId {
        let (rows, n) = self.shape(a);
        assert_eq!(rows, side_in * side_in, "bilinear expects side² tokens");
        let axis = ops::bilinear_axis(side_in, side_out);
        let data = node_data(self.params, &self.nodes, a);
        let mut out = vec![0.0; side_out * side_out * n];
        for (orow, &(r0, r1, wr0, wr1)) in axis.iter().enumerate() {
            for (ocol, &(c0, c1, wc0, wc1)) in axis.iter().enumerate() {
                let obase = (orow * side_out + ocol) * n;
                for (iw, ir, ic) in [
                    (wr0 * wc0, r0, c0),
                    (wr0 * wc1, r0, c1),
                    (wr1 * wc0, r1, c0),
                    (wr1 * wc1, r1, c1),
                ] {
                    if iw == 0.0 {
                        continue;
                    }
                    let ibase = (ir * side_in + ic) * n;
                    for c in 0..n {
                        out[obase + c] += iw * data[ibase + c];
                    }
                }
            }
        }
        let needs = self.needs(a);
        self.push(
            side_out * side_out,
            n,
            Value::Owned(out),
            Op::Bilinear {
                a,
                side_in,
                side_out,
            },
            needs,
        )
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m * n, "mask shape");
        let out = node_data(self.params, &self.nodes, a)
            .iter()
            .zip(&mask)
            .map(|(x, w)| x * w)
            .collect();
        let needs = self.needs(a);
        self.push(m, n, Value::Owned(out), Op::MulMask { a, mask }, needs)
    }

    /// Scalar mean NLL over masked-true positions. The caller guarantees at
    /// least one position is unmasked.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<bool>) -> NodeId {
        let (t, v) = self.shape(logits);
        assert_eq!(targets.len(), t);
        assert_eq!(mask.len(), t);
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "cross_entropy: all positions masked");
        let data = node_data(self.params, &self.nodes, logits);
        let mut total = 0.0;
        for (i, row) in data.chunks(v).enumerate() {
            if mask[i] {
                debug_assert!(targets[i] < v);
                total += ops::logsumexp(row) - row[targets[i]];
            }
        }
        let needs = self.needs(logits);
        self.push(
            1,
            1,
            Value::Owned(vec![total / count as f64]),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            },
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from `out`, seeding its gradient with `seed`.
    pub fn backward(&mut self, out: NodeId, seed: f64) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let numel = self.nodes[out.0].rows * self.nodes[out.0].cols;
        self.grads[out.0] = Some(vec![seed; numel]);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_vjp(i, &g);
            // Leaves keep their gradient for harvesting.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
    }

    /// Gradient of a leaf node after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Drain accumulated parameter gradients as `(id, grad)` pairs.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out = Vec::new();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = self.grads.get_mut(node.0).and_then(Option::take) {
                out.push((pid, g));
            }
        }
        out
    }

    fn apply_vjp(&mut self, i: usize, g: &[f64]) {
        let Tape {
            params,
            nodes,
            grads,
            ..
        } = self;
        let data = |id: NodeId| node_data(params, nodes, id);
        let shape = |id: NodeId| (nodes[id.0].rows, nodes[id.0].cols);
        let needs = |id: NodeId| nodes[id.0].needs_grad;

        // Allocate-on-demand accumulation buffer for an input node.
        macro_rules! buf {
            ($id:expr) => {{
                let n = nodes[$id.0].rows * nodes[$id.0].cols;
                grads[$id.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }

        match &nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = shape(*a);
                let n = shape(*b).1;
                if needs(*a) {
                    let bd = data(*b).to_vec();
                    ops::matmul_nt_acc(g, &bd, m, n, k, buf!(a));
                }
                if needs(*b) {
                    let ad = data(*a).to_vec();
                    ops::matmul_tn_acc(&ad, g, m, k, n, buf!(b));
                }
            }

            Op::MatmulNT { a, b } => {
                let (m, k) = shape(*a);
                let n = shape(*b).0;
                if needs(*a) {
                    let bd = data(*b).to_vec();
                    ops::matmul_acc(g, &bd, m, n, k, buf!(a));
                }
                if needs(*b) {
                    let ad = data(*a).to_vec();
                    ops::matmul_tn_acc(g, &ad, m, n, k, buf!(b));
                }
            }

            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if needs(id) {
                        for (o, &gv) in buf!(id).iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::AddBias { a, bias } => {
                let n = shape(*a).1;
                if needs(*a) {
                    for (o, &gv) in buf!(a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if needs(*bias) {
                    let bg = buf!(bias);
                    for row in g.chunks(n) {
                        for (o, &gv) in bg.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::Scale { a, c } => {
                let c = *c;
                if needs(*a) {
                    for (o, &gv) in buf!(a).iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }

            Op::Gelu { a } => {
                if needs(*a) {
                    let xd = data(*a).to_vec();
                    for ((o, &gv), &x) in buf!(a).iter_mut().zip(g).zip(&xd) {
                        *o += gv * math::gelu_grad(x);
                    }
                }
            }

            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let n = nodes[i].cols;
                    let s = match &nodes[i].value {
                        Value::Owned(v) => v.clone(),
                        Value::Param(_) => unreachable!("softmax output is owned"),
                    };
                    let ag = buf!(a);
                    for ((srow, grow), orow) in
                        s.chunks(n).zip(g.chunks(n)).zip(ag.chunks_mut(n))
                    {
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
                            *o += sv * (gv - dot);
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = shape(*x);
                let aux = nodes[i].aux.clone();
                let xd = data(*x).to_vec();
                let gd = data(*gamma).to_vec();
                if needs(*beta) {
                    let bg = buf!(beta);
                    for row in g.chunks(n) {
                        for (o, &gv) in bg.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
                if needs(*gamma) {
                    let gg = buf!(gamma);
                    for r in 0..m {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for c in 0..n {
                            gg[c] += g[r * n + c] * (xd[r * n + c] - mean) * rstd;
                        }
                    }
                }
                if needs(*x) {
                    let xg = buf!(x);
                    let nf = n as f64;
                    for r in 0..m {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let grow = &g[r * n..(r + 1) * n];
                        let xrow = &xd[r * n..(r + 1) * n];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let dxhat = grow[c] * gd[c];
                            let xhat = (xrow[c] - mean) * rstd;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for c in 0..n {
                            let dxhat = grow[c] * gd[c];
                            let xhat = (xrow[c] - mean) * rstd;
                            xg[r * n + c] +=
                                rstd / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            }

            Op::CausalAttend { q, k, v, scale } => {
                let (t_len, hd) = shape(*q);
                let scale = *scale;
                let probs = nodes[i].aux.clone();
                let qd = data(*q).to_vec();
                let kd = data(*k).to_vec();
                let vd = data(*v).to_vec();
                let any = needs(*q) || needs(*k) || needs(*v);
                if any {
                    let mut dq = vec![0.0; t_len * hd];
                    let mut dk = vec![0.0; t_len * hd];
                    let mut dv = vec![0.0; t_len * hd];
                    let mut da = vec![0.0; t_len];
                    for t in 0..t_len {
                        let grow = &g[t * hd..(t + 1) * hd];
                        let prow = &probs[t * t_len..t * t_len + t + 1];
                        let mut dot = 0.0;
                        for (j, &p) in prow.iter().enumerate() {
                            let vrow = &vd[j * hd..(j + 1) * hd];
                            for (o, &gv) in dv[j * hd..(j + 1) * hd].iter_mut().zip(grow) {
                                *o += p * gv;
                            }
                            let daj: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            da[j] = daj;
                            dot += daj * p;
                        }
                        let qrow = &qd[t * hd..(t + 1) * hd];
                        for (j, &p) in prow.iter().enumerate() {
                            let ds = scale * p * (da[j] - dot);
                            let krow = &kd[j * hd..(j + 1) * hd];
                            for (o, &kv) in dq[t * hd..(t + 1) * hd].iter_mut().zip(krow) {
                                *o += ds * kv;
                            }
                            for (o, &qv) in dk[j * hd..(j + 1) * hd].iter_mut().zip(qrow) {
                                *o += ds * qv;
                            }
                        }
                    }
                    if needs(*q) {
                        for (o, gv) in buf!(q).iter_mut().zip(dq) {
                            *o += gv;
                        }
                    }
                    if needs(*k) {
                        for (o, gv) in buf!(k).iter_mut().zip(dk) {
                            *o += gv;
                        }
                    }
                    if needs(*v) {
                        for (o, gv) in buf!(v).iter_mut().zip(dv) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let n = nodes[i].cols;
                    let idx = idx.clone();
                    let ag = buf!(a);
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            ag[src * n + c] += g[r * n + c];
                        }
                    }
                }
            }

            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let n = nodes[i].cols;
                    let start = *start;
                    let ag = buf!(a);
                    for (o, &gv) in ag[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }

            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let (rows, len) = (nodes[i].rows, nodes[i].cols);
                    let full = nodes[a.0].cols;
                    let start = *start;
                    let ag = buf!(a);
                    for r in 0..rows {
                        for c in 0..len {
                            ag[r * full + start + c] += g[r * len + c];
                        }
                    }
                }
            }

            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let n = nodes[i].cols;
                let mut offset = 0;
                for p in parts {
                    let rows = nodes[p.0].rows;
                    if needs(p) {
                        let pg = buf!(p);
                        for (o, &gv) in pg.iter_mut().zip(&g[offset..offset + rows * n]) {
                            *o += gv;
                        }
                    }
                    offset += rows * n;
                }
            }

            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let (rows, total) = (nodes[i].rows, nodes[i].cols);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].cols;
                    if needs(p) {
                        let pg = buf!(p);
                        for r in 0..rows {
                            for c in 0..w {
                                pg[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }

            Op::AvgPool { a, side, factor } => {
                if needs(*a) {
                    let n = nodes[i].cols;
                    let (side, factor) = (*side, *factor);
                    let out_side = side / factor;
                    let inv = 1.0 / (factor * factor) as f64;
                    let ag = buf!(a);
                    for orow in 0..out_side {
                        for ocol in 0..out_side {
                            let obase = (orow * out_side + ocol) * n;
                            for dr in 0..factor {
                                for dc in 0..factor {
                                    let ibase = ((orow * factor + dr) * side
                                        + (ocol * factor + dc))
                                        * n;
                                    for c in 0..n {
                                        ag[ibase + c] += g[obase + c] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::Bilinear {
                a,
                side_in,
                side_out,
            } => {
                if needs(*a) {
                    let n = nodes[i].cols;
                    let (side_in, side_out) = (*side_in, *side_out);
                    let axis = ops::bilinear_axis(side_in, side_out);
                    let ag = buf!(a);
                    for (orow, &(r0, r1, wr0, wr1)) in axis.iter().enumerate() {
                        for (ocol, &(c0, c1, wc0, wc1)) in axis.iter().enumerate() {
                            let obase = (orow * side_out + ocol) * n;
                            for (iw, ir, ic) in [
                                (wr0 * wc0, r0, c0),
                                (wr0 * wc1, r0, c1),
                                (wr1 * wc0, r1, c0),
                                (wr1 * wc1, r1, c1),
                            ] {
                                if iw == 0.0 {
                                    continue;
                                }
                                let ibase = (ir * side_in + ic) * n;
                                for c in 0..n {
                                    ag[ibase + c] += iw * g[obase + c];
                                }
                            }
                        }
                    }
                }
            }

            Op::MulMask { a, mask } => {
                if needs(*a) {
                    let mask = mask.clone();
                    for ((o, &gv), &w) in buf!(a).iter_mut().zip(g).zip(&mask) {
                        *o += gv * w;
                    }
                }
            }

            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                if needs(*logits) {
                    let v = nodes[logits.0].cols;
                    let (targets, mask, count) = (targets.clone(), mask.clone(), *count);
                    let ld = data(*logits).to_vec();
                    let seed = g[0] / count as f64;
                    let lg = buf!(logits);
                    for (r, row) in ld.chunks(v).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let mut probs = row.to_vec();
                        ops::softmax_row(&mut probs);
                        for c in 0..v {
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            lg[r * v + c] += seed * (probs[c] - indicator);
                        }
                    }
                }
            }
        }
    }
}
