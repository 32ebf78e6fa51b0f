use std::collections::HashMap;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    /// `[rows, k] x [k, n]`, or `[rows, k] x [n, k]^T` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddBatchBias {
        x: Var,
        bias: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        vocab: usize,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f32>,
        count: usize,
    },
    MeanPool {
        x: Var,
        batch: usize,
        n: usize,
        d: usize,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    Reshape {
        x: Var,
    },
    /// `[a, b, c, d] -> [a, c, b, d]`
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        p: usize,
        q: usize,
    },
    BroadcastRows {
        x: Var,
        rows: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
pub(super) struct Node {
    pub(super) shape: Vec<usize>,
    pub(super) value: Vec<f32>,
    pub(super) op: Op,
    pub(super) needs_grad: bool,
}

/// Record of one forward computation.
///
/// Nodes are appended in execution order, so the list is topologically
/// sorted by construction. Gradients accumulate across calls to
/// [`Tape::backward`] until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bindings: HashMap<usize, Var>,
    binding_order: Vec<(usize, Var)>,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which no leaf requires a gradient.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf. It is differentiable iff the tensor
    /// requires a gradient and the tape is not an inference tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = t.requires_grad && !self.inference;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, &[]))
    }

    /// Leaf for an externally owned tensor identified by `key`; repeated
    /// calls with the same key return the same node.
    pub fn bind(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        self.bindings.insert(key, v);
        self.binding_order.push((key, v));
        v
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
        self.binding_order.retain(|(_, v)| v.0 < len);
        self.bindings.retain(|_, v| v.0 < len);
    }

    /// Keys bound via [`Tape::bind`], in binding order.
    pub fn bindings(&self) -> &[(usize, Var)] {
        &self.binding_order
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node holds a valid tensor")
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that depends on a differentiable leaf receives the
    /// gradient of `loss`. Results are added to any gradients left by an
    /// earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut scratch: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if !node.needs_grad {
            return Ok(());
        }
        scratch[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = scratch[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut scratch);
            scratch[idx] = Some(dy);
        }

        if self.grads.len() < scratch.len() {
            self.grads.resize(scratch.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(scratch) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, dy: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, scratch, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot!(*a) {
                    // dA = dC * B^T
                    gemm(m, n, k, dy, false, bv, !*trans_b, ga, true);
                }
                if let Some(gb) = slot!(*b) {
                    if *trans_b {
                        // B stored [n, k]: dB = dC^T * A
                        gemm(n, m, k, dy, true, av, false, gb, true);
                    } else {
                        gemm(k, m, n, av, true, dy, false, gb, true);
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot!(*a) {
                    for i in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..*batch {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, dyi, true, ai, false, gbi, true);
                        } else {
                            gemm(k, m, n, ai, true, dyi, false, gbi, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Mul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot!(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot!(*bias) {
                    let n = gb.len();
                    for row in dy.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddBatchBias {
                x,
                bias,
                batch,
                rows,
                cols,
            } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot!(*bias) {
                    for bi in 0..*batch {
                        let gbi = &mut gb[bi * cols..(bi + 1) * cols];
                        for r in 0..*rows {
                            let off = (bi * rows + r) * cols;
                            gbi.iter_mut()
                                .zip(&dy[off..off + cols])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::Relu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot!(*x) {
                    for ((g, d), &xi) in gx.iter_mut().zip(dy).zip(xv) {
                        if xi > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gv = &nodes[gain.0].value;
                if let Some(gx) = slot!(*x) {
                    let inv_d = 1.0 / d as f32;
                    let mut dxhat = vec![0.0f32; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            dxhat[j] = dyr[j] * gv[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xh[j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (dyr, xh) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += dyr[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for dyr in dy.chunks_exact(d) {
                        gb.iter_mut().zip(dyr).for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let y = &node.value;
                if let Some(gx) = slot!(*x) {
                    for ((gr, dyr), yr) in gx
                        .chunks_exact_mut(*cols)
                        .zip(dy.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                    {
                        let dot: f32 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            gr[j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                vocab,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(gl) = slot!(*logits) {
                    let scale = dy[0] / *count as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let gr = &mut gl[r * vocab..(r + 1) * vocab];
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..*vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gr[j] += scale * (pr[j] - onehot);
                        }
                    }
                }
            }
            Op::MeanPool {
                x,
                batch,
                n,
                d,
                mask,
                counts,
            } => {
                if let Some(gx) = slot!(*x) {
                    for b in 0..*batch {
                        let inv = 1.0 / counts[b] as f32;
                        let dyb = &dy[b * d..(b + 1) * d];
                        for i in 0..*n {
                            if !mask[b * n + i] {
                                continue;
                            }
                            let off = (b * n + i) * d;
                            for j in 0..*d {
                                gx[off + j] += dyb[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &dy[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::SwapAxes12 { x, dims } => {
                if let Some(gx) = slot!(*x) {
                    let [a, b, c, d] = *dims;
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..c {
                                let src = ((i * c + k) * b + j) * d;
                                let dst = ((i * b + j) * c + k) * d;
                                for l in 0..d {
                                    gx[dst + l] += dy[src + l];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, rows, p, q } => {
                let w = p + q;
                if let Some(ga) = slot!(*a) {
                    for r in 0..*rows {
                        for j in 0..*p {
                            ga[r * p + j] += dy[r * w + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for r in 0..*rows {
                        for j in 0..*q {
                            gb[r * q + j] += dy[r * w + p + j];
                        }
                    }
                }
            }
            Op::BroadcastRows { x, rows } => {
                if let Some(gx) = slot!(*x) {
                    let q = gx.len();
                    for r in 0..*rows {
                        for j in 0..q {
                            gx[j] += dy[r * q + j];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = slot!(*x) {
                    let s = dy[0] / gx.len() as f32;
                    gx.iter_mut().for_each(|g| *g += s);
                }
            }
        }
    }
}

/// Lazily allocates the gradient slot of `v`; `None` when `v` does not need
/// a gradient.
fn grad_slot<'a>(nodes: &[Node], scratch: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(scratch[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}
