//! Forward rules for the differentiable primitives.

use super::gemm::gemm;
use super::tape::{Op, Tape, Var};
use crate::error::{Error, Result};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        self.matmul_impl(a, b, false)
    }

    /// `x · w` over the last axis of `x`, for `w` of shape `[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::Shape(format!("linear of {sx:?} with weight {sw:?}")));
        }
        self.matmul_impl(x, w, false)
    }

    /// `x · wᵀ` over the last axis of `x`, for `w` of shape `[n, k]`.
    pub fn linear_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::Shape(format!(
                "linear_t of {sx:?} with transposed weight {sw:?}"
            )));
        }
        self.matmul_impl(x, w, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let k = *sa.last().unwrap();
        let n = if trans_b { sb[0] } else { sb[1] };
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape(format!(
                "bmm of {sa:?} and {sb:?} (trans_b={trans_b})"
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Shape(format!("add_bias of {sx:?} and {sb:?}")));
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x[B, r, c] + bias[B, c]`, one bias row per batch element.
    pub fn add_batch_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 3 || sb.len() != 2 || sx[0] != sb[0] || sx[2] != sb[1] {
            return Err(Error::Shape(format!("add_batch_bias of {sx:?} and {sb:?}")));
        }
        let (batch, rows, cols) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).to_vec();
        let bv = self.value(bias);
        for b in 0..batch {
            for r in 0..rows {
                let off = (b * rows + r) * cols;
                for j in 0..cols {
                    out[off + j] += bv[b * cols + j];
                }
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::AddBatchBias {
                x,
                bias,
                batch,
                rows,
                cols,
            },
            &[x, bias],
        ))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, &[x])
    }

    /// Elementwise `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} {:?} does not match input {sx:?}",
                    self.shape(p)
                )));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Shape(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis. Entries whose `visible` flag is false get
    /// probability 0; every row must keep at least one visible entry.
    pub fn softmax(&mut self, x: Var, visible: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        let xv = self.value(x);
        if let Some(m) = visible {
            if m.len() != xv.len() {
                return Err(Error::Shape(format!(
                    "softmax mask of length {} for input {sx:?}",
                    m.len()
                )));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for (r, (row, o)) in xv.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let vis = |j: usize| visible.map_or(true, |m| m[r * cols + j]);
            if !(0..cols).any(vis) {
                return Err(Error::Degenerate(format!(
                    "softmax row {r} of {sx:?} has no visible entry"
                )));
            }
            let max = (0..cols)
                .filter(|&j| vis(j))
                .map(|j| row[j])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for j in 0..cols {
                if vis(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(sx, out, Op::Softmax { x, cols }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under `logits[n, V]`,
    /// skipping positions equal to `ignore`. Returns 0 when every position
    /// is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {sl:?} with {} targets",
                targets.len()
            )));
        }
        let vocab = sl[1];
        if let Some(&t) = targets.iter().find(|&&t| t != ignore && t >= vocab) {
            return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for j in 0..vocab {
                pr[j] = (row[j] - max).exp();
                z += pr[j];
            }
            pr.iter_mut().for_each(|p| *p /= z);
            if t != ignore {
                total += (z.ln() - (row[t] - max)) as f64;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                vocab,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean over the kept rows of `x[n, d]` (result `[d]`) or of each batch
    /// element of `x[B, n, d]` (result `[B, d]`).
    pub fn mean_pool(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, n, d, out_shape) = match sx.as_slice() {
            &[n, d] => (1, n, d, vec![d]),
            &[b, n, d] => (b, n, d, vec![b, d]),
            _ => return Err(Error::Shape(format!("mean_pool of {sx:?}"))),
        };
        if keep.len() != batch * n {
            return Err(Error::Shape(format!(
                "mean_pool mask of length {} for input {sx:?}",
                keep.len()
            )));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; batch * d];
        let mut counts = vec![0; batch];
        for b in 0..batch {
            for i in 0..n {
                if keep[b * n + i] {
                    counts[b] += 1;
                    let off = (b * n + i) * d;
                    for j in 0..d {
                        out[b * d + j] += xv[off + j];
                    }
                }
            }
            if counts[b] == 0 {
                return Err(Error::Degenerate(format!(
                    "mean_pool over fully masked sequence {b}"
                )));
            }
            let inv = 1.0 / counts[b] as f32;
            out[b * d..(b + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            out_shape,
            out,
            Op::MeanPool {
                x,
                batch,
                n,
                d,
                mask: keep.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    /// Row lookup into `table[V, d]`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape(format!("embedding table {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("embedding of an empty id list".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                d,
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let &[a, b, c, d] = sx else {
            return Err(Error::Shape(format!("swap_axes12 needs rank 4, got {sx:?}")));
        };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let src = ((i * b + j) * c + k) * d;
                    let dst = ((i * c + k) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        Ok(self.push(
            vec![a, c, b, d],
            out,
            Op::SwapAxes12 {
                x,
                dims: [a, b, c, d],
            },
            &[x],
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat of {sa:?} and {sb:?}")));
        }
        let p = *sa.last().unwrap();
        let q = *sb.last().unwrap();
        let rows = numel(&sa) / p;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = p + q;
        Ok(self.push(shape, out, Op::Concat { a, b, rows, p, q }, &[a, b]))
    }

    /// Repeats a vector `[q]` as `rows` rows: `[rows, q]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || rows == 0 {
            return Err(Error::Shape(format!("broadcast_rows of {sx:?} to {rows} rows")));
        }
        let out = self.value(x).repeat(rows);
        Ok(self.push(vec![rows, sx[0]], out, Op::BroadcastRows { x, rows }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        self.push(vec![1], vec![s], Op::Mean { x }, &[x])
    }
}
