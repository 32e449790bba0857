//! Minimal reverse-mode differentiation over `f64` vectors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; `backward`
//! walks it in reverse and returns per-node adjoints. The op set is exactly
//! what the recurrent model needs — nothing here aspires to be a general
//! autodiff engine.

/// Variance guard inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    /// Leaf value; `param` carries the tensor index for gradient extraction.
    Leaf { param: Option<usize> },
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Slice { x: NodeId, start: usize, len: usize },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId },
    /// Collect scalar (length-1) nodes into one vector.
    Stack { items: Vec<NodeId> },
    /// `out = Σ_k weights[k] · items[k]`.
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    /// Pre-affine layer norm: zero mean, unit variance over the features.
    LayerNorm { x: NodeId },
    /// Elementwise product with a constant mask (inverted dropout).
    Mask { x: NodeId, mask: Vec<f64> },
    /// Scalar product of two equal-length vectors, length-1 output.
    Dot { a: NodeId, b: NodeId },
    /// Weighted binary cross entropy on a logit, length-1 output.
    BceLogit { s: NodeId, y: f64, w: f64 },
}

struct Node {
    val: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].val
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { val, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, val: Vec<f64>, param: Option<usize>) -> NodeId {
        self.push(val, Op::Leaf { param })
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.nodes[w.0].val.len(), rows * cols);
        debug_assert_eq!(self.nodes[x.0].val.len(), cols);
        let wv = &self.nodes[w.0].val;
        let xv = &self.nodes[x.0].val;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            out[r] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0]
            .val
            .iter()
            .zip(&self.nodes[b.0].val)
            .map(|(x, y)| x + y)
            .collect();
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0]
            .val
            .iter()
            .zip(&self.nodes[b.0].val)
            .map(|(x, y)| x * y)
            .collect();
        self.push(out, Op::Mul { a, b })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].val.clone();
        out.extend_from_slice(&self.nodes[b.0].val);
        self.push(out, Op::Concat { a, b })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.nodes[x.0].val[start..start + len].to_vec();
        self.push(out, Op::Slice { x, start, len })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].val.iter().map(|&v| sigmoid(v)).collect();
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].val.iter().map(|v| v.tanh()).collect();
        self.push(out, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].val.iter().map(|v| v.max(0.0)).collect();
        self.push(out, Op::Relu { x })
    }

    /// Numerically shifted softmax over the whole vector.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].val;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        self.push(out, Op::Softmax { x })
    }

    pub fn stack(&mut self, items: Vec<NodeId>) -> NodeId {
        let out: Vec<f64> = items.iter().map(|id| self.nodes[id.0].val[0]).collect();
        self.push(out, Op::Stack { items })
    }

    pub fn weighted_sum(&mut self, weights: NodeId, items: Vec<NodeId>) -> NodeId {
        let wv = self.nodes[weights.0].val.clone();
        debug_assert_eq!(wv.len(), items.len());
        let dim = self.nodes[items[0].0].val.len();
        let mut out = vec![0.0; dim];
        for (k, id) in items.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&self.nodes[id.0].val) {
                *o += wv[k] * v;
            }
        }
        self.push(out, Op::WeightedSum { weights, items })
    }

    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].val;
        let n = xv.len() as f64;
        let mean = xv.iter().sum::<f64>() / n;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let out: Vec<f64> = xv.iter().map(|v| (v - mean) * inv).collect();
        self.push(out, Op::LayerNorm { x })
    }

    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0]
            .val
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        self.push(out, Op::Mask { x, mask })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: f64 = self.nodes[a.0]
            .val
            .iter()
            .zip(&self.nodes[b.0].val)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![out], Op::Dot { a, b })
    }

    /// Loss `w·y·softplus(−s) + (1−y)·softplus(s)`, the stable form of the
    /// weighted BCE on a probability `sigmoid(s)`.
    pub fn bce_logit(&mut self, s: NodeId, y: f64, w: f64) -> NodeId {
        let sv = self.nodes[s.0].val[0];
        let loss = w * y * softplus(-sv) + (1.0 - y) * softplus(sv);
        self.push(vec![loss], Op::BceLogit { s, y, w })
    }

    /// Reverse pass from `seed` (a length-1 node); returns per-node adjoints.
    pub fn backward(&self, seed: NodeId) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.val.len()]).collect();
        grads[seed.0][0] = 1.0;
        for idx in (0..=seed.0).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let go = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = go; // keep for extraction
                    continue;
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = &self.nodes[x.0].val;
                    let wv = &self.nodes[w.0].val;
                    {
                        let gw = &mut grads[w.0];
                        for r in 0..*rows {
                            let g = go[r];
                            if g == 0.0 {
                                continue;
                            }
                            for c in 0..*cols {
                                gw[r * cols + c] += g * xv[c];
                            }
                        }
                    }
                    {
                        let gx = &mut grads[x.0];
                        for r in 0..*rows {
                            let g = go[r];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            for c in 0..*cols {
                                gx[c] += g * row[c];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (g, &v) in grads[a.0].iter_mut().zip(&go) {
                        *g += v;
                    }
                    for (g, &v) in grads[b.0].iter_mut().zip(&go) {
                        *g += v;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].val.clone();
                    let bv = self.nodes[b.0].val.clone();
                    for (k, &v) in go.iter().enumerate() {
                        grads[a.0][k] += v * bv[k];
                        grads[b.0][k] += v * av[k];
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].val.len();
                    for (g, &v) in grads[a.0].iter_mut().zip(&go[..na]) {
                        *g += v;
                    }
                    for (g, &v) in grads[b.0].iter_mut().zip(&go[na..]) {
                        *g += v;
                    }
                }
                Op::Slice { x, start, len } => {
                    for k in 0..*len {
                        grads[x.0][start + k] += go[k];
                    }
                }
                Op::Sigmoid { x } => {
                    for (k, &s) in node.val.iter().enumerate() {
                        grads[x.0][k] += go[k] * s * (1.0 - s);
                    }
                }
                Op::Tanh { x } => {
                    for (k, &t) in node.val.iter().enumerate() {
                        grads[x.0][k] += go[k] * (1.0 - t * t);
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].val;
                    for k in 0..go.len() {
                        if xv[k] > 0.0 {
                            grads[x.0][k] += go[k];
                        }
                    }
                }
                Op::Softmax { x } => {
                    let beta = &node.val;
                    let dot: f64 = go.iter().zip(beta).map(|(g, b)| g * b).sum();
                    for k in 0..go.len() {
                        grads[x.0][k] += beta[k] * (go[k] - dot);
                    }
                }
                Op::Stack { items } => {
                    for (k, id) in items.iter().enumerate() {
                        grads[id.0][0] += go[k];
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.nodes[weights.0].val.clone();
                    for (k, id) in items.iter().enumerate() {
                        let iv = &self.nodes[id.0].val;
                        let mut dw = 0.0;
                        for (j, &g) in go.iter().enumerate() {
                            grads[id.0][j] += wv[k] * g;
                            dw += g * iv[j];
                        }
                        grads[weights.0][k] += dw;
                    }
                }
                Op::LayerNorm { x } => {
                    let xv = &self.nodes[x.0].val;
                    let n = xv.len() as f64;
                    let mean = xv.iter().sum::<f64>() / n;
                    let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xh = &node.val;
                    let g_mean = go.iter().sum::<f64>() / n;
                    let gx_mean = go.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>() / n;
                    for k in 0..go.len() {
                        grads[x.0][k] += inv * (go[k] - g_mean - xh[k] * gx_mean);
                    }
                }
                Op::Mask { x, mask } => {
                    for (k, &v) in go.iter().enumerate() {
                        grads[x.0][k] += v * mask[k];
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[a.0].val.clone();
                    let bv = self.nodes[b.0].val.clone();
                    for k in 0..av.len() {
                        grads[a.0][k] += go[0] * bv[k];
                        grads[b.0][k] += go[0] * av[k];
                    }
                }
                Op::BceLogit { s, y, w } => {
                    let sv = self.nodes[s.0].val[0];
                    let ds = (1.0 - y) * sigmoid(sv) - w * y * sigmoid(-sv);
                    grads[s.0][0] += go[0] * ds;
                }
            }
        }
        grads
    }

    /// Accumulate leaf adjoints into a flat parameter gradient using each
    /// leaf's tensor offset.
    pub fn param_grads(&self, grads: &[Vec<f64>], offsets: &[usize], out: &mut [f64]) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(tensor) } = node.op {
                let off = offsets[tensor];
                for (k, g) in grads[idx].iter().enumerate() {
                    out[off + k] += g;
                }
            }
        }
    }
}
