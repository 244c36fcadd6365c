//! A small reverse-mode autodiff tape over `f64` matrices.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and records its parents, so [`Graph::backward`] can walk the
//! nodes in reverse creation order (a topological order by construction) and
//! accumulate gradients into every leaf. All arithmetic is 64-bit so analytic
//! gradients can be validated against central finite differences.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    GradientShape { rows: usize, cols: usize },
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Scale(VarId, f64),
    /// `a (r×k) · b (k×c)`
    MatMul(VarId, VarId),
    /// `a (r×k) · bᵀ` with `b (c×k)`
    MatMulTransB(VarId, VarId),
    /// Broadcasts a `1×c` row vector over every row of `a (r×c)`.
    AddRowVec(VarId, VarId),
    Gelu(VarId),
    Abs(VarId),
    /// Per-row layer norm with learnable gain and bias (both `1×c`).
    LayerNormRows {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    /// Row-wise softmax restricted to the allowed columns; masked columns
    /// come out exactly zero.
    SoftmaxRowsMasked {
        x: VarId,
        allowed: Vec<bool>,
    },
    /// `out[i] = src[indices[i]]`; scatter-adds on the way back.
    GatherRows {
        src: VarId,
        indices: Vec<usize>,
    },
    SliceCols {
        src: VarId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    /// Divides each row by its Euclidean norm.
    NormalizeRows(VarId),
    /// Mean over rows of `logsumexp(row) - row[target]`; a `1×1` scalar.
    CrossEntropyRows {
        logits: VarId,
        targets: Vec<usize>,
    },
    /// Mean binary cross-entropy with logits over all entries; `1×1`.
    BceWithLogits {
        logits: VarId,
        targets: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation, consistent with its derivative below
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row_masked(row: &[f64], allowed: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed[i] && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for i in 0..row.len() {
        if allowed[i] {
            let e = (row[i] - max).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, value: &Array1<f64>) -> VarId {
        let row = value
            .clone()
            .into_shape_with_order((1, value.len()))
            .expect("row reshape");
        self.leaf(row)
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "expected scalar node");
        v[[0, 0]]
    }

    /// Gradient of the last `backward` target with respect to `id`; `None`
    /// when the node does not influence the loss.
    pub fn grad(&self, id: VarId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient as an owned array, zeros when the node is unused.
    pub fn grad_or_zero(&self, id: VarId) -> Array2<f64> {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.value(id).dim()),
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul shape");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_trans_b(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).ncols(),
            "matmul_trans_b shape"
        );
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulTransB(a, b))
    }

    pub fn add_row_vec(&mut self, a: VarId, row: VarId) -> VarId {
        assert_eq!(self.value(row).nrows(), 1, "row vector expected");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "row width");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRowVec(a, row))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).mapv(gelu_scalar);
        self.push(value, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn layer_norm_rows(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(self.value(gain).dim(), (1, cols), "gain shape");
        assert_eq!(self.value(bias).dim(), (1, cols), "bias shape");
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.mean().expect("non-empty row");
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                let normed = (row[c] - mean) * inv_std;
                out[[r, c]] = self.value(gain)[[0, c]] * normed + self.value(bias)[[0, c]];
            }
        }
        self.push(out, Op::LayerNormRows { x, gain, bias })
    }

    pub fn softmax_rows_masked(&mut self, x: VarId, allowed: Vec<bool>) -> VarId {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(allowed.len(), cols, "mask length");
        assert!(allowed.iter().any(|&a| a), "softmax needs an allowed column");
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row: Vec<f64> = xv.row(r).to_vec();
            let mut target = vec![0.0; cols];
            softmax_row_masked(&row, &allowed, &mut target);
            for c in 0..cols {
                out[[r, c]] = target[c];
            }
        }
        self.push(out, Op::SoftmaxRowsMasked { x, allowed })
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let cols = self.value(x).ncols();
        self.softmax_rows_masked(x, vec![true; cols])
    }

    pub fn gather_rows(&mut self, src: VarId, indices: Vec<usize>) -> VarId {
        let sv = self.value(src);
        let cols = sv.ncols();
        let mut out = Array2::zeros((indices.len(), cols));
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < sv.nrows(), "gather index {idx} out of range");
            out.row_mut(i).assign(&sv.row(idx));
        }
        self.push(out, Op::GatherRows { src, indices })
    }

    pub fn slice_cols(&mut self, src: VarId, start: usize, end: usize) -> VarId {
        let sv = self.value(src);
        assert!(start < end && end <= sv.ncols(), "slice bounds");
        let value = sv.slice(ndarray::s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols { src, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols, "concat_rows col mismatch");
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            offset += v.nrows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Divides each row by its L2 norm. Rows must be non-degenerate; callers
    /// check for zero norms before building the node.
    pub fn normalize_rows(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        let mut out = av.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "zero-norm row in normalize_rows");
            row.mapv_inplace(|v| v / norm);
        }
        self.push(out, Op::NormalizeRows(a))
    }

    pub fn cross_entropy_rows(&mut self, logits: VarId, targets: Vec<usize>) -> VarId {
        let lv = self.value(logits);
        let (rows, cols) = lv.dim();
        assert_eq!(targets.len(), rows, "one target per row");
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            assert!(targets[r] < cols, "target out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let value = Array2::from_elem((1, 1), total / rows as f64);
        self.push(value, Op::CrossEntropyRows { logits, targets })
    }

    pub fn bce_with_logits(&mut self, logits: VarId, targets: Array2<f64>) -> VarId {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "bce shape");
        let count = lv.len() as f64;
        let mut total = 0.0;
        for (z, t) in lv.iter().zip(targets.iter()) {
            total += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        }
        let value = Array2::from_elem((1, 1), total / count);
        self.push(value, Op::BceWithLogits { logits, targets })
    }

    fn accumulate(&mut self, id: VarId, delta: Array2<f64>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates `d loss / d node` into every node reachable from `loss`.
    /// The loss must be a `1×1` scalar.
    pub fn backward(&mut self, loss: VarId) -> Result<(), GradError> {
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(GradError::GradientShape { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let grad = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the op description is read-only, parents mutate.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, i, &grad);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, node_idx: usize, grad: &Array2<f64>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, -grad);
            }
            Op::Scale(a, factor) => {
                self.accumulate(*a, grad * *factor);
            }
            Op::MatMul(a, b) => {
                let ga = grad.dot(&self.nodes[b.0].value.t());
                let gb = self.nodes[a.0].value.t().dot(grad);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MatMulTransB(a, b) => {
                // y = a · bᵀ  ⇒  ga = g · b, gb = gᵀ · a
                let ga = grad.dot(&self.nodes[b.0].value);
                let gb = grad.t().dot(&self.nodes[a.0].value);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRowVec(a, row) => {
                self.accumulate(*a, grad.clone());
                let summed = grad.sum_axis(Axis(0));
                let summed = summed
                    .into_shape_with_order((1, grad.ncols()))
                    .expect("row reshape");
                self.accumulate(*row, summed);
            }
            Op::Gelu(a) => {
                let ga = self.nodes[a.0].value.mapv(gelu_grad_scalar) * grad;
                self.accumulate(*a, ga);
            }
            Op::Abs(a) => {
                let ga = self.nodes[a.0].value.mapv(f64::signum) * grad;
                self.accumulate(*a, ga);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (rows, cols) = xv.dim();
                let mut gx = Array2::zeros((rows, cols));
                let mut ggain = Array2::zeros((1, cols));
                let mut gbias = Array2::zeros((1, cols));
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.mean().expect("non-empty row");
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    let normed: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dy = grad.row(r);
                    let mut d_normed = vec![0.0; cols];
                    for c in 0..cols {
                        gbias[[0, c]] += dy[c];
                        ggain[[0, c]] += dy[c] * normed[c];
                        d_normed[c] = dy[c] * gv[[0, c]];
                    }
                    let mean_dn = d_normed.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n = d_normed
                        .iter()
                        .zip(&normed)
                        .map(|(d, n)| d * n)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        gx[[r, c]] = inv_std * (d_normed[c] - mean_dn - normed[c] * mean_dn_n);
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*gain, ggain);
                self.accumulate(*bias, gbias);
            }
            Op::SoftmaxRowsMasked { x, allowed } => {
                let y = &self.nodes[node_idx].value;
                let (rows, cols) = y.dim();
                let mut gx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let dot: f64 = (0..cols)
                        .filter(|&c| allowed[c])
                        .map(|c| grad[[r, c]] * y[[r, c]])
                        .sum();
                    for c in 0..cols {
                        if allowed[c] {
                            gx[[r, c]] = y[[r, c]] * (grad[[r, c]] - dot);
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::GatherRows { src, indices } => {
                let dim = self.nodes[src.0].value.dim();
                let mut gsrc = Array2::zeros(dim);
                for (i, &idx) in indices.iter().enumerate() {
                    let mut row = gsrc.row_mut(idx);
                    row += &grad.row(i);
                }
                self.accumulate(*src, gsrc);
            }
            Op::SliceCols { src, start, end } => {
                let dim = self.nodes[src.0].value.dim();
                let mut gsrc = Array2::zeros(dim);
                gsrc.slice_mut(ndarray::s![.., *start..*end]).assign(grad);
                self.accumulate(*src, gsrc);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    let gp = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                    self.accumulate(p, gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.nodes[p.0].value.nrows();
                    let gp = grad.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                    self.accumulate(p, gp);
                    offset += h;
                }
            }
            Op::NormalizeRows(a) => {
                let xv = &self.nodes[a.0].value;
                let yv = &self.nodes[node_idx].value;
                let (rows, cols) = xv.dim();
                let mut gx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..cols).map(|c| grad[[r, c]] * yv[[r, c]]).sum();
                    for c in 0..cols {
                        gx[[r, c]] = (grad[[r, c]] - yv[[r, c]] * dot) / norm;
                    }
                }
                self.accumulate(*a, gx);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let (rows, cols) = lv.dim();
                let upstream = grad[[0, 0]] / rows as f64;
                let mut gl = Array2::zeros((rows, cols));
                let all = vec![true; cols];
                let mut soft = vec![0.0; cols];
                for r in 0..rows {
                    let row: Vec<f64> = lv.row(r).to_vec();
                    softmax_row_masked(&row, &all, &mut soft);
                    for c in 0..cols {
                        let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                        gl[[r, c]] = (soft[c] - indicator) * upstream;
                    }
                }
                self.accumulate(*logits, gl);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let upstream = grad[[0, 0]] / lv.len() as f64;
                let mut gl = Array2::zeros(lv.dim());
                for ((g, &z), &t) in gl.iter_mut().zip(lv.iter()).zip(targets.iter()) {
                    let sigma = 1.0 / (1.0 + (-z).exp());
                    *g = (sigma - t) * upstream;
                }
                self.accumulate(*logits, gl);
            }
        }
    }
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// `params`, using the given step. The oracle side of gradient checking.
pub fn finite_difference_grads<F>(
    params: &[Array2<f64>],
    step: f64,
    mut f: F,
) -> Vec<Array2<f64>>
where
    F: FnMut(&[Array2<f64>]) -> f64,
{
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut grads: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
    for (k, param) in params.iter().enumerate() {
        for (idx, &original) in param.indexed_iter() {
            work[k][idx] = original + step;
            let plus = f(&work);
            work[k][idx] = original - step;
            let minus = f(&work);
            work[k][idx] = original;
            grads[k][idx] = (plus - minus) / (2.0 * step);
        }
    }
    grads
}

/// `max |a - b| / max(1, |b|)` over all entries of all pairs.
pub fn max_relative_error(analytic: &[Array2<f64>], numeric: &[Array2<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (av, nv) in a.iter().zip(n.iter()) {
            let denom = nv.abs().max(1.0);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks one op's analytic gradients against finite differences.
    fn check<F>(params: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Graph, &[VarId]) -> VarId,
    {
        let mut g = Graph::new();
        let ids: Vec<VarId> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        let analytic: Vec<Array2<f64>> = ids.iter().map(|&id| g.grad_or_zero(id)).collect();

        let numeric = finite_difference_grads(&params, 1e-5, |ps| {
            let mut g = Graph::new();
            let ids: Vec<VarId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
            let loss = build(&mut g, &ids);
            g.scalar(loss)
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-7, "gradient mismatch: {err}");
    }

    /// Sums all entries into a scalar through CE against a fixed target: a
    /// cheap differentiable reduction for op tests.
    fn reduce(g: &mut Graph, x: VarId) -> VarId {
        let (rows, cols) = g.value(x).dim();
        let flat_len = rows * cols;
        let ones = Array2::from_elem((flat_len, 1), 1.0);
        // reshape via concat of row slices: gather each row then concat cols
        let mut rows_ids = Vec::new();
        for r in 0..rows {
            rows_ids.push(g.gather_rows(x, vec![r]));
        }
        let wide = g.concat_cols(&rows_ids); // 1 × (rows*cols)
        let w = g.leaf(ones); // (rows*cols) × 1
        g.matmul(wide, w) // 1×1 = sum of entries
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        check(vec![a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            reduce(g, y)
        });
    }

    #[test]
    fn matmul_trans_b_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 5, 4);
        check(vec![a, b], |g, ids| {
            let y = g.matmul_trans_b(ids[0], ids[1]);
            reduce(g, y)
        });
    }

    #[test]
    fn add_sub_scale_rowvec_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 2, 3);
        let v = random(&mut rng, 1, 3);
        check(vec![a, b, v], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(s, ids[1]);
            let sc = g.scale(d, 1.7);
            let y = g.add_row_vec(sc, ids[2]);
            reduce(g, y)
        });
    }

    #[test]
    fn gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 3);
        check(vec![a], |g, ids| {
            let y = g.gelu(ids[0]);
            reduce(g, y)
        });
    }

    #[test]
    fn abs_gradients_away_from_zero() {
        // keep entries away from the |x| kink
        let a = array![[0.5, -0.7, 1.2], [-2.0, 0.9, -0.3]];
        check(vec![a], |g, ids| {
            let y = g.abs(ids[0]);
            reduce(g, y)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        let gain = random(&mut rng, 1, 4);
        let bias = random(&mut rng, 1, 4);
        check(vec![x, gain, bias], |g, ids| {
            let y = g.layer_norm_rows(ids[0], ids[1], ids[2]);
            reduce(g, y)
        });
    }

    #[test]
    fn masked_softmax_gradients_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 3, 5);
        let allowed = vec![true, true, false, true, false];
        {
            let mut g = Graph::new();
            let id = g.leaf(x.clone());
            let y = g.softmax_rows_masked(id, allowed.clone());
            for r in 0..3 {
                let row_sum: f64 = g.value(y).row(r).sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                assert_eq!(g.value(y)[[r, 2]], 0.0);
                assert_eq!(g.value(y)[[r, 4]], 0.0);
            }
        }
        let allowed2 = allowed.clone();
        check(vec![x], move |g, ids| {
            let y = g.softmax_rows_masked(ids[0], allowed2.clone());
            reduce(g, y)
        });
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 3);
        check(vec![x], |g, ids| {
            let y = g.gather_rows(ids[0], vec![1, 1, 3]);
            reduce(g, y)
        });
    }

    #[test]
    fn slice_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 2, 6);
        let y = random(&mut rng, 2, 2);
        check(vec![x, y], |g, ids| {
            let left = g.slice_cols(ids[0], 0, 3);
            let right = g.slice_cols(ids[0], 3, 6);
            let wide = g.concat_cols(&[left, ids[1], right]);
            let tall = g.concat_rows(&[wide, wide]);
            reduce(g, tall)
        });
    }

    #[test]
    fn normalize_rows_gradients() {
        let x = array![[1.0, 2.0, 2.0], [-1.0, 0.5, 3.0]];
        check(vec![x], |g, ids| {
            let y = g.normalize_rows(ids[0]);
            reduce(g, y)
        });
    }

    #[test]
    fn cross_entropy_gradients_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random(&mut rng, 3, 5);
        {
            // uniform logits give exactly ln(V)
            let mut g = Graph::new();
            let z = g.leaf(Array2::zeros((2, 7)));
            let loss = g.cross_entropy_rows(z, vec![3, 0]);
            assert!((g.scalar(loss) - (7f64).ln()).abs() < 1e-15);
        }
        check(vec![logits], |g, ids| {
            g.cross_entropy_rows(ids[0], vec![1, 4, 0])
        });
    }

    #[test]
    fn bce_gradients_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = random(&mut rng, 3, 4);
        let targets = Array2::from_shape_fn((3, 4), |(r, c)| ((r + c) % 2) as f64);
        {
            // zero logits: loss = ln 2 regardless of targets
            let mut g = Graph::new();
            let z = g.leaf(Array2::zeros((2, 2)));
            let loss = g.bce_with_logits(z, Array2::from_elem((2, 2), 1.0));
            assert!((g.scalar(loss) - (2f64).ln()).abs() < 1e-15);
        }
        let t = targets.clone();
        check(vec![logits], move |g, ids| {
            g.bce_with_logits(ids[0], t.clone())
        });
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let c = g.leaf(array![[5.0]]);
        g.backward(c).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad_or_zero(x), Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        match g.backward(x) {
            Err(GradError::GradientShape { rows, cols }) => {
                assert_eq!((rows, cols), (1, 2));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x + x): gradient must be 2 everywhere
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, -2.0]]);
        let y = g.add(x, x);
        let loss = reduce(&mut g, y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &array![[2.0, 2.0]]);
    }
}
