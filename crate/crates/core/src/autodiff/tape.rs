use std::sync::Arc;

use thiserror::Error;

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_values, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp bound used before taking logs in the BCE loss.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward: loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward: loss does not depend on any tracked parameter")]
    UntrackedLoss,
    #[error("adam: non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("adam: {params} parameters but {grads} gradients")]
    GradientCountMismatch { params: usize, grads: usize },
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    SliceRows(Var, usize, usize),
    SegmentSum(Var, Arc<Vec<usize>>),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    ScaleRows(Var, Var),
    AddRow(Var, Var),
    /// out[dst[e], :] += w[e] * feat[src[e], :]
    AttnAggregate {
        features: Var,
        weights: Var,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    },
    BceMean(Var, Arc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Reverse-mode tape. Every operation appends a node; `backward` runs one
/// reverse topological sweep over the recording order. All reductions use a
/// fixed iteration order, so identical inputs produce bit-identical gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients per tape node, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a tracked leaf, zeros when the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Tracked leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_values(self.value(a), self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, tracked, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add: shapes differ ({}x{} vs {}x{})",
            ta.rows(),
            ta.cols(),
            tb.rows(),
            tb.cols()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, tracked, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "sub: shapes differ ({}x{} vs {}x{})",
            ta.rows(),
            ta.cols(),
            tb.rows(),
            tb.cols()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, tracked, Op::Sub(a, b))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "mul: shapes differ ({}x{} vs {}x{})",
            ta.rows(),
            ta.cols(),
            tb.rows(),
            tb.cols()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, tracked, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::AddScalar(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                t.cols(),
                cols,
                "concat_rows: column mismatch ({} vs {})",
                t.cols(),
                cols
            );
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            tracked,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(
                    t.rows(),
                    rows,
                    "concat_cols: row mismatch ({} vs {})",
                    t.rows(),
                    rows
                );
                t.cols()
            })
            .sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                let dst = i * total_cols + col_off;
                data[dst..dst + t.cols()].copy_from_slice(t.row(i));
            }
            col_off += t.cols();
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Tensor::from_vec(rows, total_cols, data),
            tracked,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Output row `k` is input row `indices[k]`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            assert!(
                i < ta.rows(),
                "gather_rows: index {} out of range for {} rows",
                i,
                ta.rows()
            );
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::from_vec(indices.len(), cols, data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::GatherRows(a, indices))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(
            start + len <= ta.rows(),
            "slice_rows: {}..{} out of range for {} rows",
            start,
            start + len,
            ta.rows()
        );
        let cols = ta.cols();
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(len, cols, data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::SliceRows(a, start, len))
    }

    /// Sums input rows into `segments` output rows: `out[seg[k], :] += in[k, :]`.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<Vec<usize>>, segments: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(
            ta.rows(),
            seg.len(),
            "segment_sum: {} rows but {} segment ids",
            ta.rows(),
            seg.len()
        );
        let cols = ta.cols();
        let mut data = vec![0.0; segments * cols];
        for (k, &s) in seg.iter().enumerate() {
            assert!(s < segments, "segment_sum: segment id {} out of range", s);
            let row = ta.row(k);
            let dst = &mut data[s * cols..(s + 1) * cols];
            for (d, x) in dst.iter_mut().zip(row) {
                *d += x;
            }
        }
        let value = Tensor::from_vec(segments, cols, data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::SegmentSum(a, seg))
    }

    /// Softmax over groups of rows sharing a segment id, with per-segment max
    /// subtraction. Scores must be a column vector; ids with no rows simply
    /// produce no output rows.
    pub fn segment_softmax(&mut self, scores: Var, seg: Arc<Vec<usize>>) -> Var {
        let ts = self.value(scores);
        assert_eq!(ts.cols(), 1, "segment_softmax: scores must be a column");
        assert_eq!(
            ts.rows(),
            seg.len(),
            "segment_softmax: {} scores but {} segment ids",
            ts.rows(),
            seg.len()
        );
        let value = segment_softmax_values(ts.data(), &seg);
        let tracked = self.tracked(scores);
        self.push(value, tracked, Op::SegmentSoftmax(scores, seg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a);
        self.push(value, tracked, Op::Sigmoid(a))
    }

    /// Scales row `i` of `a` by `s[i]`; `s` is `n x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.cols(), 1, "scale_rows: scale must be a column");
        assert_eq!(
            ta.rows(),
            ts.rows(),
            "scale_rows: {} rows but {} scales",
            ta.rows(),
            ts.rows()
        );
        let cols = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            let f = ts.data()[i];
            data.extend(ta.row(i).iter().map(|x| x * f));
        }
        let value = Tensor::from_vec(ta.rows(), cols, data);
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(value, tracked, Op::ScaleRows(a, s))
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(
            ta.cols(),
            tr.cols(),
            "add_row: width mismatch ({} vs {})",
            ta.cols(),
            tr.cols()
        );
        let mut data = Vec::with_capacity(ta.len());
        for i in 0..ta.rows() {
            data.extend(ta.row(i).iter().zip(tr.data()).map(|(x, b)| x + b));
        }
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, tracked, Op::AddRow(a, row))
    }

    /// Fused attention aggregation: `out[dst[e], :] += w[e] * feat[src[e], :]`.
    /// Avoids materializing one message row per edge.
    pub fn attn_aggregate(
        &mut self,
        features: Var,
        weights: Var,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
        segments: usize,
    ) -> Var {
        let (tf, tw) = (self.value(features), self.value(weights));
        assert_eq!(tw.cols(), 1, "attn_aggregate: weights must be a column");
        assert_eq!(
            tw.rows(),
            src.len(),
            "attn_aggregate: {} weights for {} edges",
            tw.rows(),
            src.len()
        );
        assert_eq!(src.len(), dst.len(), "attn_aggregate: src/dst length differ");
        let cols = tf.cols();
        let mut data = vec![0.0; segments * cols];
        for e in 0..src.len() {
            let w = tw.data()[e];
            let f = tf.row(src[e]);
            let out = &mut data[dst[e] * cols..(dst[e] + 1) * cols];
            for (o, x) in out.iter_mut().zip(f) {
                *o += w * x;
            }
        }
        let value = Tensor::from_vec(segments, cols, data);
        let tracked = self.tracked(features) || self.tracked(weights);
        self.push(
            value,
            tracked,
            Op::AttnAggregate {
                features,
                weights,
                src,
                dst,
            },
        )
    }

    /// Mean binary cross entropy over a column of probabilities, with labels
    /// baked in as constants. Probabilities are clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
    pub fn bce_mean(&mut self, probs: Var, labels: Arc<Vec<f64>>) -> Var {
        let tp = self.value(probs);
        assert_eq!(tp.cols(), 1, "bce_mean: probabilities must be a column");
        assert_eq!(
            tp.rows(),
            labels.len(),
            "bce_mean: {} probabilities but {} labels",
            tp.rows(),
            labels.len()
        );
        assert!(!labels.is_empty(), "bce_mean: empty labeled set");
        let k = labels.len() as f64;
        let mut total = 0.0;
        for (&p, &y) in tp.data().iter().zip(labels.iter()) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let value = Tensor::scalar(total / k);
        let tracked = self.tracked(probs);
        self.push(value, tracked, Op::BceMean(probs, labels))
    }

    /// Reverse sweep from `loss`, accumulating gradients at fan-in.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss {
                rows: lt.rows(),
                cols: lt.cols(),
            });
        }
        if !self.tracked(loss) {
            return Err(AutodiffError::UntrackedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.tracked(*a) {
                    let da = matmul_a_bt(g, self.value(*b));
                    self.accumulate(grads, *a, da);
                }
                if self.tracked(*b) {
                    let db = matmul_at_b(self.value(*a), g);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    let neg =
                        Tensor::from_vec(g.rows(), g.cols(), g.data().iter().map(|x| -x).collect());
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let tb = self.value(*b);
                    let da = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.tracked(*b) {
                    let ta = self.value(*a);
                    let db = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let da =
                    Tensor::from_vec(g.rows(), g.cols(), g.data().iter().map(|x| x * c).collect());
                self.accumulate(grads, *a, da);
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::ConcatRows(parts) => {
                let mut row_off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let take = t.rows();
                    if self.tracked(p) {
                        let cols = t.cols();
                        let data =
                            g.data()[row_off * cols..(row_off + take) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(take, cols, data));
                    }
                    row_off += take;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col_off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let take = t.cols();
                    if self.tracked(p) {
                        let mut data = Vec::with_capacity(t.len());
                        for i in 0..t.rows() {
                            let start = i * g.cols() + col_off;
                            data.extend_from_slice(&g.data()[start..start + take]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(t.rows(), take, data));
                    }
                    col_off += take;
                }
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                let cols = ta.cols();
                for (k, &i) in indices.iter().enumerate() {
                    let src = g.row(k);
                    let dst = &mut da.data_mut()[i * cols..(i + 1) * cols];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start, len) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                da.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                self.accumulate(grads, *a, da);
            }
            Op::SegmentSum(a, seg) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut da = Vec::with_capacity(ta.len());
                for &s in seg.iter() {
                    da.extend_from_slice(g.row(s));
                }
                self.accumulate(grads, *a, Tensor::from_vec(ta.rows(), cols, da));
            }
            Op::SegmentSoftmax(scores, seg) => {
                let y = &self.nodes[idx].value;
                let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; segments];
                for (k, &s) in seg.iter().enumerate() {
                    dots[s] += g.data()[k] * y.data()[k];
                }
                let ds = seg
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| y.data()[k] * (g.data()[k] - dots[s]))
                    .collect();
                self.accumulate(grads, *scores, Tensor::column(ds));
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { gv * slope })
                        .collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Elu(a) => {
                let ta = self.value(*a);
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { gv * x.exp() })
                        .collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let cols = ta.cols();
                if self.tracked(*a) {
                    let mut da = Vec::with_capacity(ta.len());
                    for i in 0..ta.rows() {
                        let f = ts.data()[i];
                        da.extend(g.row(i).iter().map(|x| x * f));
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(ta.rows(), cols, da));
                }
                if self.tracked(*s) {
                    let mut ds = Vec::with_capacity(ta.rows());
                    for i in 0..ta.rows() {
                        let mut acc = 0.0;
                        for (gv, av) in g.row(i).iter().zip(ta.row(i)) {
                            acc += gv * av;
                        }
                        ds.push(acc);
                    }
                    self.accumulate(grads, *s, Tensor::column(ds));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    let mut dr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (d, x) in dr.iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_vec(1, g.cols(), dr));
                }
            }
            Op::AttnAggregate {
                features,
                weights,
                src,
                dst,
                ..
            } => {
                let (tf, tw) = (self.value(*features), self.value(*weights));
                let cols = tf.cols();
                if self.tracked(*features) {
                    let mut df = Tensor::zeros(tf.rows(), cols);
                    for e in 0..src.len() {
                        let w = tw.data()[e];
                        let gr = g.row(dst[e]);
                        let out = &mut df.data_mut()[src[e] * cols..(src[e] + 1) * cols];
                        for (o, x) in out.iter_mut().zip(gr) {
                            *o += w * x;
                        }
                    }
                    self.accumulate(grads, *features, df);
                }
                if self.tracked(*weights) {
                    let mut dw = Vec::with_capacity(src.len());
                    for e in 0..src.len() {
                        let mut acc = 0.0;
                        for (gv, fv) in g.row(dst[e]).iter().zip(tf.row(src[e])) {
                            acc += gv * fv;
                        }
                        dw.push(acc);
                    }
                    self.accumulate(grads, *weights, Tensor::column(dw));
                }
            }
            Op::BceMean(probs, labels) => {
                let tp = self.value(*probs);
                let k = labels.len() as f64;
                let gs = g.item();
                let dp = tp
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            gs * (p - y) / (p * (1.0 - p) * k)
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::column(dp));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn segment_softmax_values(scores: &[f64], seg: &[usize]) -> Tensor {
    let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
    let mut maxes = vec![f64::NEG_INFINITY; segments];
    for (k, &s) in seg.iter().enumerate() {
        maxes[s] = maxes[s].max(scores[k]);
    }
    let mut sums = vec![0.0; segments];
    let mut out = vec![0.0; scores.len()];
    for (k, &s) in seg.iter().enumerate() {
        let e = (scores[k] - maxes[s]).exp();
        out[k] = e;
        sums[s] += e;
    }
    for (k, &s) in seg.iter().enumerate() {
        out[k] /= sums[s];
    }
    Tensor::column(out)
}
