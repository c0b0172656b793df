use super::{Node, Tape, Var};
use crate::error::{LabError, Result};
use crate::tensor::{gemm, Tensor};

/// Which GELU formula to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluKind {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    Tanh,
    /// `x * Phi(x)` with the Gaussian CDF evaluated through `erf`.
    Erf,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(super) enum Op {
    Leaf,
    /// `a[g] · b[g]` (or `a[g] · b[g]ᵀ` when `tb`) over `batch` stacked matrices.
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CausalMask(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Keeps the elementwise derivative from the forward pass.
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

impl Tape {
    /// Matrix product of 2-D tensors `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb, tb) {
            ([m, k], [k2, n], false) if k == k2 => (*m, *k, *n),
            ([m, k], [n, k2], true) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(LabError::Dimension {
                    op: if tb { "matmul_nt" } else { "matmul" },
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        let op = Op::MatMul {
            a,
            b,
            tb,
            batch: 1,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&[m, n], out)?, op, rg))
    }

    /// Batched product over the leading axis: `[g×m×k]·[g×k×n]`, or with
    /// `tb` set, `[g×m×k]·[g×n×k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (g, m, k, n) = match (sa, sb, tb) {
            ([g, m, k], [g2, k2, n], false) if g == g2 && k == k2 => (*g, *m, *k, *n),
            ([g, m, k], [g2, n, k2], true) if g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => {
                return Err(LabError::Dimension {
                    op: "batch_matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.any_grad(&[a, b]);
        let op = Op::MatMul {
            a,
            b,
            tb,
            batch: g,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&[g, m, n], out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `[batch·seq × heads·dh]` → `[batch·heads × seq × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let d = match t.shape() {
            [r, d] if *r == batch * seq && d % heads == 0 => *d,
            s => {
                return Err(LabError::Shape(format!(
                    "split_heads: {s:?} is not [{}×(multiple of {heads})]",
                    batch * seq
                )))
            }
        };
        let dh = d / heads;
        let out = permute_heads(t.data(), batch, seq, heads, dh, true);
        let rg = self.any_grad(&[x]);
        let op = Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        };
        Ok(self.push(Tensor::new(&[batch * heads, seq, dh], out)?, op, rg))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let dh = match t.shape() {
            [g, s, dh] if *g == batch * heads && *s == seq => *dh,
            s => {
                return Err(LabError::Shape(format!(
                    "merge_heads: {s:?} is not [{}×{seq}×dh]",
                    batch * heads
                )))
            }
        };
        let out = permute_heads(t.data(), batch, seq, heads, dh, false);
        let rg = self.any_grad(&[x]);
        let op = Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        };
        Ok(self.push(Tensor::new(&[batch * seq, heads * dh], out)?, op, rg))
    }

    /// Sets every entry strictly above the diagonal of each trailing square
    /// matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let l = match shape.as_slice() {
            [.., r, c] if r == c => *r,
            s => {
                return Err(LabError::Shape(format!(
                    "causal mask needs square matrices, got {s:?}"
                )))
            }
        };
        let mut data = t.data().to_vec();
        mask_upper(&mut data, l, |v| *v = f64::NEG_INFINITY);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::CausalMask(x), rg))
    }

    /// Softmax along the last axis with max subtraction. `-inf` entries map
    /// to exactly `0.0`; a row with no finite entry is an error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalises each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(LabError::Dimension {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut out = vec![0.0; t.len()];
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        let rg = self.any_grad(&[x]);
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len());
        let mut slope = Vec::with_capacity(if rg { t.len() } else { 0 });
        for &v in t.data() {
            let (y, dy) = gelu_with_slope(v, kind);
            data.push(y);
            if rg {
                slope.push(dy);
            }
        }
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Gelu { x, slope }, rg)
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = match t.shape() {
            [v, d] => (*v, *d),
            s => {
                return Err(LabError::Shape(format!(
                    "embedding table must be 2-D, got {s:?}"
                )))
            }
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(LabError::Index { id, size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.any_grad(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, op, rg))
    }

    /// Mean negative log-likelihood of `targets` over rows whose `mask` entry
    /// is `true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = match t.shape() {
            [n, v] => (*n, *v),
            s => return Err(LabError::Shape(format!("logits must be 2-D, got {s:?}"))),
        };
        if targets.len() != n || mask.len() != n {
            return Err(LabError::Contract(format!(
                "cross_entropy: {n} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(LabError::DegenerateLoss);
        }
        let probs = softmax_rows(t)?.into_data();
        let mut loss = 0.0;
        for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if tgt >= v {
                return Err(LabError::Index { id: tgt, size: v });
            }
            if m {
                // log-softmax computed directly to stay accurate when p -> 0
                let row = t.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[tgt];
            }
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / count as f64), op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(LabError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn mask_upper(data: &mut [f64], l: usize, mut f: impl FnMut(&mut f64)) {
    for mat in data.chunks_mut(l * l) {
        for i in 0..l {
            for v in &mut mat[i * l + i + 1..(i + 1) * l] {
                f(v);
            }
        }
    }
}

fn permute_heads(
    src: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
    split: bool,
) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let merged = (b * seq + t) * d + h * dh;
                let split_at = ((b * heads + h) * seq + t) * dh;
                let (from, to) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.last_dim();
    let mut out = vec![0.0; t.len()];
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(LabError::DegenerateRow { row: r });
        }
        let dst = &mut out[r * d..(r + 1) * d];
        let mut z = 0.0;
        for (o, &x) in dst.iter_mut().zip(row) {
            *o = (x - max).exp();
            z += *o;
        }
        dst.iter_mut().for_each(|o| *o /= z);
    }
    Tensor::new(t.shape(), out)
}

#[cfg(test)]
pub(crate) fn gelu_value(x: f64, kind: GeluKind) -> f64 {
    gelu_with_slope(x, kind).0
}

/// GELU value and derivative sharing one transcendental evaluation.
fn gelu_with_slope(x: f64, kind: GeluKind) -> (f64, f64) {
    match kind {
        GeluKind::Tanh => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            let y = 0.5 * x * (1.0 + t);
            (
                y,
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x),
            )
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (x * cdf, cdf + x * pdf)
        }
    }
}

type Grads = [Option<Vec<f64>>];

fn slot<'g>(nodes: &[Node], grads: &'g mut Grads, v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(nodes: &[Node], grads: &mut Grads, v: Var, f: impl Fn(usize) -> f64) {
    if let Some(dst) = slot(nodes, grads, v) {
        dst.iter_mut().enumerate().for_each(|(i, d)| *d += f(i));
    }
}

pub(super) fn backward_node(nodes: &[Node], grads: &mut Grads, idx: usize, g: &[f64]) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (ad, bd) = (val(a), val(b));
            if let Some(da) = slot(nodes, grads, a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    // dA = G·Bᵀ, or G·B when the product used Bᵀ
                    gemm(m, n, k, gi, false, bi, !tb, dai, 1.0);
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(n, m, k, gi, true, ai, false, dbi, 1.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dbi, 1.0);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |i| g[i]);
            accumulate(nodes, grads, b, |i| g[i]);
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (val(a), val(b));
            accumulate(nodes, grads, a, |i| g[i] * bd[i]);
            accumulate(nodes, grads, b, |i| g[i] * ad[i]);
        }
        &Op::Scale(x, c) => accumulate(nodes, grads, x, |i| g[i] * c),
        &Op::Sum(x) => accumulate(nodes, grads, x, |_| g[0]),
        &Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            let dh = nodes[idx].value.last_dim();
            let back = permute_heads(g, batch, seq, heads, dh, false);
            accumulate(nodes, grads, x, |i| back[i]);
        }
        &Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            let dh = nodes[x.0].value.last_dim();
            let back = permute_heads(g, batch, seq, heads, dh, true);
            accumulate(nodes, grads, x, |i| back[i]);
        }
        &Op::CausalMask(x) => {
            let l = node.value.last_dim();
            let mut back = g.to_vec();
            mask_upper(&mut back, l, |v| *v = 0.0);
            accumulate(nodes, grads, x, |i| back[i]);
        }
        &Op::Softmax(x) => {
            let y = node.value.data();
            let d = node.value.last_dim();
            if let Some(dx) = slot(nodes, grads, x) {
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = node.value.last_dim();
            let rows = node.value.rows();
            let gd = val(*gain);
            if let Some(dg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let o = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = g[o + j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[o + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = g[o + j] * gd[j];
                        dx[o + j] += rstd[r] * (dh - mean_dh - xhat[o + j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Gelu { x, slope } => accumulate(nodes, grads, *x, |i| g[i] * slope[i]),
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.last_dim();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
        } => {
            let v = nodes[logits.0].value.last_dim();
            let count = mask.iter().filter(|m| **m).count() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * v + j] += g[0] * (probs[r * v + j] - onehot) / count;
                    }
                }
            }
        }
    }
}
