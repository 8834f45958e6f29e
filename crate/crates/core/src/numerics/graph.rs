use thiserror::Error;

use super::Real;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact Gaussian-CDF form x * Phi(x).
    Gelu,
    Relu,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: F,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        scale: NodeId,
        offset: NodeId,
        // per-column 1/sqrt(var+eps) and the pre-affine normalized values
        inv_std: Vec<F>,
        normalized: Vec<F>,
    },
    DenseAxis0 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2dSame {
        x: NodeId,
        k: NodeId,
        bias: NodeId,
    },
    Act {
        a: NodeId,
        kind: Activation,
    },
    Sum {
        a: NodeId,
    },
    HuberMean {
        pred: NodeId,
        label: Vec<F>,
        delta: F,
    },
    Reshape {
        a: NodeId,
    },
}

/// One tape entry: values, lazily allocated gradient and the op record used
/// for the reverse sweep.
struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    learnable: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Product of the trailing dims after axis 0 (1 for a bare vector).
fn trailing(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn take_sweep<F: Real>(sweep: &mut [Option<Vec<F>>], len: usize, id: NodeId) -> Vec<F> {
    sweep[id.0].take().unwrap_or_else(|| vec![F::zero(); len])
}

/// Tape of tensor nodes. Ops append nodes eagerly; `backward` runs the
/// reverse sweep. Construction order is the topological order, so the sweep
/// visits each node exactly once.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, learnable: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
            learnable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient of interest).
    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> NodeId {
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    /// Learnable leaf; `backward` always populates its gradient.
    pub fn param(&mut self, shape: &[usize], values: Vec<F>) -> NodeId {
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add { a, b }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Scale { a, c }, false)
    }

    /// Standard matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bj;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, false))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose { a }, false))
    }

    /// Contiguous block of `len` rows along axis 0, trailing dims kept.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let sa = &self.nodes[a.0].shape;
        assert!(start + len <= sa[0], "slice_rows out of bounds");
        let t = trailing(sa);
        let values = self.nodes[a.0].values[start * t..(start + len) * t].to_vec();
        let mut shape = sa.clone();
        shape[0] = len;
        self.push(shape, values, Op::SliceRows { a, start }, false)
    }

    /// Stack along axis 0; all parts must share trailing dims.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = self.nodes[parts[0].0].shape.clone();
        let mut rows = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.clone(),
                    rhs: sp.clone(),
                });
            }
            rows += sp[0];
        }
        let mut values = Vec::with_capacity(rows * trailing(&first));
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(
            shape,
            values,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    /// Row-wise softmax of a 2-D node, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].values;
        if av.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = F::zero();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows { a }, false))
    }

    /// Normalize along axis 0 per trailing column, then apply the per-row
    /// affine `scale[i] * norm + offset[i]`.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        scale: NodeId,
        offset: NodeId,
    ) -> Result<NodeId, TensorError> {
        let l = self.shape(a)[0];
        if self.shape(scale) != [l] || self.shape(offset) != [l] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let t = trailing(self.shape(a));
        let av = &self.nodes[a.0].values;
        let sv = &self.nodes[scale.0].values;
        let ov = &self.nodes[offset.0].values;
        let eps = F::from_f64c(LAYER_NORM_EPS);
        let ln = F::from_f64c(l as f64);
        let mut normalized = vec![F::zero(); l * t];
        let mut inv_std = vec![F::zero(); t];
        let mut out = vec![F::zero(); l * t];
        for j in 0..t {
            let mut mean = F::zero();
            for i in 0..l {
                mean = mean + av[i * t + j];
            }
            mean = mean / ln;
            let mut var = F::zero();
            for i in 0..l {
                let d = av[i * t + j] - mean;
                var = var + d * d;
            }
            var = var / ln;
            let is = (var + eps).sqrt().recip();
            inv_std[j] = is;
            for i in 0..l {
                let nrm = (av[i * t + j] - mean) * is;
                normalized[i * t + j] = nrm;
                out[i * t + j] = sv[i] * nrm + ov[i];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                a,
                scale,
                offset,
                inv_std,
                normalized,
            },
            false,
        ))
    }

    /// Fully connected map along axis 0 with weights shared over all trailing
    /// axes: `out[:, t] = W x[:, t] + b` for every trailing index `t`.
    pub fn dense_axis0(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sw = self.shape(w);
        if sw.len() != 2 || sw[1] != self.shape(x)[0] || self.shape(b) != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense_axis0",
                lhs: sw.to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let (n, m) = (sw[0], sw[1]);
        let t = trailing(self.shape(x));
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![F::zero(); n * t];
        for o in 0..n {
            let wrow = &wv[o * m..(o + 1) * m];
            let orow = &mut out[o * t..(o + 1) * t];
            for e in orow.iter_mut() {
                *e = bv[o];
            }
            for (i, &wi) in wrow.iter().enumerate() {
                let xrow = &xv[i * t..(i + 1) * t];
                for (e, &xj) in orow.iter_mut().zip(xrow) {
                    *e = *e + wi * xj;
                }
            }
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape[0] = n;
        Ok(self.push(shape, out, Op::DenseAxis0 { x, w, b }, false))
    }

    /// 2x2 same-size cross-correlation over `[h, w, cin]` with zero padding
    /// of one row at the bottom and one column at the right; kernels are
    /// `[2, 2, cin, cout]`, bias is per output channel.
    pub fn conv2d_same(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 2 || sk[1] != 2 || sk[2] != sx[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                lhs: sx,
                rhs: sk,
            });
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let cout = sk[3];
        if self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![cout],
            });
        }
        let xv = &self.nodes[x.0].values;
        let kv = &self.nodes[kernels.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![F::zero(); h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut acc = bv[co];
                    for dy in 0..2usize {
                        if y + dy >= h {
                            continue;
                        }
                        for dx in 0..2usize {
                            if xx + dx >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                let xi = ((y + dy) * w + (xx + dx)) * cin + ci;
                                let ki = ((dy * 2 + dx) * cin + ci) * cout + co;
                                acc = acc + xv[xi] * kv[ki];
                            }
                        }
                    }
                    out[(y * w + xx) * cout + co] = acc;
                }
            }
        }
        Ok(self.push(
            vec![h, w, cout],
            out,
            Op::Conv2dSame {
                x,
                k: kernels,
                bias,
            },
            false,
        ))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| match kind {
                Activation::Gelu => gelu(x),
                Activation::Relu => x.max(F::zero()),
            })
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            values,
            Op::Act { a, kind },
            false,
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].values.iter().cloned().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, false)
    }

    /// Mean Huber loss against a fixed label, as a scalar node.
    pub fn huber_mean(
        &mut self,
        pred: NodeId,
        label: &[F],
        delta: F,
    ) -> Result<NodeId, TensorError> {
        let pv = &self.nodes[pred.0].values;
        if pv.len() != label.len() {
            return Err(TensorError::ShapeMismatch {
                op: "huber_mean",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![label.len()],
            });
        }
        let half = F::from_f64c(0.5);
        let mut total = F::zero();
        for (&p, &l) in pv.iter().zip(label) {
            let a = (p - l).abs();
            total = total
                + if a <= delta {
                    half * a * a
                } else {
                    delta * (a - half * delta)
                };
        }
        let loss = total / F::from_f64c(label.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::HuberMean {
                pred,
                label: label.to_vec(),
                delta,
            },
            false,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(shape.to_vec(), values, Op::Reshape { a }, false))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across repeated
    /// calls; every learnable leaf ends up with a gradient (zero if the loss
    /// does not depend on it).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        // Transient per-sweep buffers; node gradients only receive the final
        // per-sweep contribution so that repeated sweeps add up cleanly.
        let mut sweep: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        sweep[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            if sweep[id].is_none() {
                continue;
            }
            backprop_node(&self.nodes, &mut sweep, id);
        }
        for (node, s) in self.nodes.iter_mut().zip(sweep) {
            if let Some(delta) = s {
                match &mut node.grad {
                    Some(g) => {
                        for (e, d) in g.iter_mut().zip(delta) {
                            *e = *e + d;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        for n in &mut self.nodes {
            if n.learnable && n.grad.is_none() {
                n.grad = Some(vec![F::zero(); n.values.len()]);
            }
        }
        Ok(())
    }
}

/// Propagate node `id`'s sweep gradient to its parents. Parents always
/// precede the node on the tape, so each is visited exactly once.
fn backprop_node<F: Real>(nodes: &[Node<F>], sweep: &mut [Option<Vec<F>>], id: usize) {
    let node = &nodes[id];
    let g = sweep[id].take().expect("sweep grad present");
    let take = |sweep: &mut [Option<Vec<F>>], p: NodeId| {
        take_sweep(sweep, nodes[p.0].values.len(), p)
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for &p in [*a, *b].iter() {
                let mut gp = take(sweep, p);
                for (e, &gi) in gp.iter_mut().zip(&g) {
                    *e = *e + gi;
                }
                sweep[p.0] = Some(gp);
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let mut ga = take(sweep, a);
            for ((e, &gi), &bv) in ga.iter_mut().zip(&g).zip(&nodes[b.0].values) {
                *e = *e + gi * bv;
            }
            sweep[a.0] = Some(ga);
            let mut gb = take(sweep, b);
            for ((e, &gi), &av) in gb.iter_mut().zip(&g).zip(&nodes[a.0].values) {
                *e = *e + gi * av;
            }
            sweep[b.0] = Some(gb);
        }
        Op::Scale { a, c } => {
            let (a, c) = (*a, *c);
            let mut ga = take(sweep, a);
            for (e, &gi) in ga.iter_mut().zip(&g) {
                *e = *e + gi * c;
            }
            sweep[a.0] = Some(ga);
        }
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let m = nodes[a.0].shape[0];
            let k = nodes[a.0].shape[1];
            let n = nodes[b.0].shape[1];
            // dA += G B^T
            let mut ga = take(sweep, a);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &nodes[b.0].values[p * n..(p + 1) * n];
                    let mut s = F::zero();
                    for (&gi, &bi) in grow.iter().zip(brow) {
                        s = s + gi * bi;
                    }
                    ga[i * k + p] = ga[i * k + p] + s;
                }
            }
            sweep[a.0] = Some(ga);
            // dB += A^T G
            let mut gb = take(sweep, b);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = nodes[a.0].values[i * k + p];
                    let brow = &mut gb[p * n..(p + 1) * n];
                    for (e, &gi) in brow.iter_mut().zip(grow) {
                        *e = *e + aip * gi;
                    }
                }
            }
            sweep[b.0] = Some(gb);
        }
        Op::Transpose { a } => {
            let a = *a;
            let m = nodes[a.0].shape[0];
            let n = nodes[a.0].shape[1];
            let mut ga = take(sweep, a);
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                }
            }
            sweep[a.0] = Some(ga);
        }
        Op::SliceRows { a, start } => {
            let (a, start) = (*a, *start);
            let t = trailing(&nodes[a.0].shape);
            let mut ga = take(sweep, a);
            for (e, &gi) in ga[start * t..start * t + g.len()].iter_mut().zip(&g) {
                *e = *e + gi;
            }
            sweep[a.0] = Some(ga);
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].values.len();
                let mut gp = take(sweep, p);
                for (e, &gi) in gp.iter_mut().zip(&g[off..off + len]) {
                    *e = *e + gi;
                }
                sweep[p.0] = Some(gp);
                off += len;
            }
        }
        Op::SoftmaxRows { a } => {
            let a = *a;
            let m = node.shape[0];
            let n = node.shape[1];
            let s = &node.values;
            let mut ga = take(sweep, a);
            for i in 0..m {
                let srow = &s[i * n..(i + 1) * n];
                let grow = &g[i * n..(i + 1) * n];
                let mut dot = F::zero();
                for (&gi, &si) in grow.iter().zip(srow) {
                    dot = dot + gi * si;
                }
                let garow = &mut ga[i * n..(i + 1) * n];
                for ((e, &gi), &si) in garow.iter_mut().zip(grow).zip(srow) {
                    *e = *e + si * (gi - dot);
                }
            }
            sweep[a.0] = Some(ga);
        }
        Op::LayerNorm {
            a,
            scale,
            offset,
            inv_std,
            normalized,
        } => {
            let (a, scale, offset) = (*a, *scale, *offset);
            let l = nodes[a.0].shape[0];
            let t = trailing(&nodes[a.0].shape);
            let ln = F::from_f64c(l as f64);
            let sv = &nodes[scale.0].values;
            let mut d_scale = vec![F::zero(); l];
            let mut d_offset = vec![F::zero(); l];
            let mut d_a = vec![F::zero(); l * t];
            for j in 0..t {
                let mut mean_h = F::zero();
                let mut mean_hn = F::zero();
                for i in 0..l {
                    let gi = g[i * t + j];
                    let h = sv[i] * gi;
                    mean_h = mean_h + h;
                    mean_hn = mean_hn + h * normalized[i * t + j];
                    d_scale[i] = d_scale[i] + gi * normalized[i * t + j];
                    d_offset[i] = d_offset[i] + gi;
                }
                mean_h = mean_h / ln;
                mean_hn = mean_hn / ln;
                for i in 0..l {
                    let h = sv[i] * g[i * t + j];
                    d_a[i * t + j] = (h - mean_h - normalized[i * t + j] * mean_hn) * inv_std[j];
                }
            }
            let mut ga = take(sweep, a);
            for (e, &d) in ga.iter_mut().zip(&d_a) {
                *e = *e + d;
            }
            sweep[a.0] = Some(ga);
            let mut gs = take(sweep, scale);
            for (e, &d) in gs.iter_mut().zip(&d_scale) {
                *e = *e + d;
            }
            sweep[scale.0] = Some(gs);
            let mut go = take(sweep, offset);
            for (e, &d) in go.iter_mut().zip(&d_offset) {
                *e = *e + d;
            }
            sweep[offset.0] = Some(go);
        }
        Op::DenseAxis0 { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let n = nodes[w.0].shape[0];
            let m = nodes[w.0].shape[1];
            let t = trailing(&nodes[x.0].shape);
            // dW += G X^T
            let mut gw = take(sweep, w);
            for o in 0..n {
                let grow = &g[o * t..(o + 1) * t];
                for i in 0..m {
                    let xrow = &nodes[x.0].values[i * t..(i + 1) * t];
                    let mut s = F::zero();
                    for (&gi, &xi) in grow.iter().zip(xrow) {
                        s = s + gi * xi;
                    }
                    gw[o * m + i] = gw[o * m + i] + s;
                }
            }
            sweep[w.0] = Some(gw);
            // dX += W^T G
            let mut gx = take(sweep, x);
            for o in 0..n {
                let grow = &g[o * t..(o + 1) * t];
                for i in 0..m {
                    let woi = nodes[w.0].values[o * m + i];
                    let xrow = &mut gx[i * t..(i + 1) * t];
                    for (e, &gi) in xrow.iter_mut().zip(grow) {
                        *e = *e + woi * gi;
                    }
                }
            }
            sweep[x.0] = Some(gx);
            // db += row sums of G
            let mut gb = take(sweep, b);
            for o in 0..n {
                let mut s = F::zero();
                for &gi in &g[o * t..(o + 1) * t] {
                    s = s + gi;
                }
                gb[o] = gb[o] + s;
            }
            sweep[b.0] = Some(gb);
        }
        Op::Conv2dSame { x, k, bias } => {
            let (x, k, bias) = (*x, *k, *bias);
            let (h, w, cin) = (
                nodes[x.0].shape[0],
                nodes[x.0].shape[1],
                nodes[x.0].shape[2],
            );
            let cout = nodes[k.0].shape[3];
            let mut gk = take(sweep, k);
            let mut gb = take(sweep, bias);
            let mut gx = take(sweep, x);
            for y in 0..h {
                for xx in 0..w {
                    for co in 0..cout {
                        let gi = g[(y * w + xx) * cout + co];
                        gb[co] = gb[co] + gi;
                        for dy in 0..2usize {
                            if y + dy >= h {
                                continue;
                            }
                            for dx in 0..2usize {
                                if xx + dx >= w {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xi = ((y + dy) * w + (xx + dx)) * cin + ci;
                                    let ki = ((dy * 2 + dx) * cin + ci) * cout + co;
                                    gk[ki] = gk[ki] + gi * nodes[x.0].values[xi];
                                    gx[xi] = gx[xi] + gi * nodes[k.0].values[ki];
                                }
                            }
                        }
                    }
                }
            }
            sweep[k.0] = Some(gk);
            sweep[bias.0] = Some(gb);
            sweep[x.0] = Some(gx);
        }
        Op::Act { a, kind } => {
            let (a, kind) = (*a, *kind);
            let mut ga = take(sweep, a);
            for ((e, &gi), &x) in ga.iter_mut().zip(&g).zip(&nodes[a.0].values) {
                let d = match kind {
                    Activation::Gelu => gelu_derivative(x),
                    Activation::Relu => {
                        if x > F::zero() {
                            F::one()
                        } else {
                            F::zero()
                        }
                    }
                };
                *e = *e + gi * d;
            }
            sweep[a.0] = Some(ga);
        }
        Op::Sum { a } => {
            let a = *a;
            let mut ga = take(sweep, a);
            for e in ga.iter_mut() {
                *e = *e + g[0];
            }
            sweep[a.0] = Some(ga);
        }
        Op::HuberMean { pred, label, delta } => {
            let (pred, delta) = (*pred, *delta);
            let inv = g[0] / F::from_f64c(label.len() as f64);
            let mut gp = take(sweep, pred);
            for ((e, &p), &l) in gp.iter_mut().zip(&nodes[pred.0].values).zip(label) {
                let a = p - l;
                let clamped = a.max(-delta).min(delta);
                *e = *e + inv * clamped;
            }
            sweep[pred.0] = Some(gp);
        }
        Op::Reshape { a } => {
            let a = *a;
            let mut ga = take(sweep, a);
            for (e, &gi) in ga.iter_mut().zip(&g) {
                *e = *e + gi;
            }
            sweep[a.0] = Some(ga);
        }
    }
    sweep[id] = Some(g);
}

fn gelu<F: Real>(x: F) -> F {
    let half = F::from_f64c(0.5);
    let inv_sqrt2 = F::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::one() + (x * inv_sqrt2).erf())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let half = F::from_f64c(0.5);
    let inv_sqrt2 = F::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64c(0.3989422804014327);
    let cdf = half * (F::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}
