use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, NnError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Elu(usize),
    Sum(usize),
    GatherRows {
        x: usize,
        index: Rc<[Option<usize>]>,
    },
    SegmentSum {
        x: usize,
        segments: Rc<[usize]>,
    },
    SegmentMean {
        x: usize,
        segments: Rc<[usize]>,
        counts: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: usize,
        targets: Vec<f64>,
    },
}

struct Record {
    value: Tensor,
    op: Op,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Every operation validates shapes and rejects non-finite results, so a
/// diverging computation surfaces as [`NnError::NonFinite`] naming the op.
pub struct Tape {
    id: u64,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`; `None` when `var` does not
    /// influence the output.
    pub fn get(&self, var: Var) -> Result<Option<&Tensor>, NnError> {
        if var.tape != self.tape || var.idx >= self.grads.len() {
            return Err(NnError::Unrecorded);
        }
        Ok(self.grads[var.idx].as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Result<Tensor, NnError> {
        Ok(match self.get(var)? {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.shape().to_vec()),
        })
    }
}

fn mismatch(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn idx(&self, var: Var) -> Result<usize, NnError> {
        if var.tape != self.id || var.idx >= self.records.len() {
            return Err(NnError::Unrecorded);
        }
        Ok(var.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        self.records.push(Record { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.records.len() - 1,
        })
    }

    pub fn value(&self, var: Var) -> Result<&Tensor, NnError> {
        let i = self.idx(var)?;
        Ok(&self.records[i].value)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push("leaf", value, Op::Leaf)
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xv = &self.records[xi].value;
        let wv = &self.records[wi].value;
        if wv.shape().len() != 2 {
            return Err(mismatch("linear", format!("weight must be 2-D, got {:?}", wv.shape())));
        }
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != in_dim {
            return Err(mismatch(
                "linear",
                format!("input width {} vs weight {:?}", xv.cols(), wv.shape()),
            ));
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * out_dim];
        if let Some(bi) = bi {
            let bv = &self.records[bi].value;
            if bv.len() != out_dim {
                return Err(mismatch("linear", format!("bias length {} vs {out_dim}", bv.len())));
            }
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv.data());
            }
        }
        // out[n, out] += x[n, in] · wᵀ
        gemm(
            n,
            in_dim,
            out_dim,
            xv.data(),
            (in_dim, 1),
            wv.data(),
            (1, in_dim),
            1.0,
            &mut out,
            out_dim,
        );
        let value = Tensor::new(vec![n, out_dim], out)?;
        self.push("linear", value, Op::Linear { x: xi, w: wi, b: bi })
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), NnError> {
        let (sa, sb) = (self.records[a].value.shape(), self.records[b].value.shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let av = &self.records[ai].value;
        let bv = &self.records[bi].value;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(ai, bi))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let av = &self.records[ai].value;
        let bv = &self.records[bi].value;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(ai, bi))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NnError> {
        let ai = self.idx(a)?;
        let mut value = self.records[ai].value.clone();
        value.scale_in_place(factor);
        self.push("scale", value, Op::Scale(ai, factor))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let xv = &self.records[xi].value;
        let data = xv.data().iter().map(|&v| super::elu_scalar(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("elu", value, Op::Elu(xi))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let total = self.records[xi].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(xi))
    }

    /// Builds `[index.len() / group, group * width]` by concatenating `group`
    /// consecutive rows of `x` per output row. `None` entries contribute zero rows.
    pub fn gather_rows(
        &mut self,
        x: Var,
        index: impl Into<Rc<[Option<usize>]>>,
        group: usize,
    ) -> Result<Var, NnError> {
        let index = index.into();
        let xi = self.idx(x)?;
        let xv = &self.records[xi].value;
        if group == 0 || index.len() % group != 0 {
            return Err(mismatch(
                "gather_rows",
                format!("index length {} not a multiple of group {group}", index.len()),
            ));
        }
        let (n, width) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; index.len() * width];
        for (slot, src) in index.iter().enumerate() {
            if let Some(r) = *src {
                if r >= n {
                    return Err(mismatch("gather_rows", format!("row {r} out of {n}")));
                }
                out[slot * width..(slot + 1) * width].copy_from_slice(xv.row(r));
            }
        }
        let value = Tensor::new(vec![index.len() / group, group * width], out)?;
        self.push("gather_rows", value, Op::GatherRows { x: xi, index })
    }

    /// Sums rows of `x` into `n_out` buckets given by `segments`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        segments: impl Into<Rc<[usize]>>,
        n_out: usize,
    ) -> Result<Var, NnError> {
        let segments = segments.into();
        let xi = self.idx(x)?;
        let out = self.segment_accumulate("segment_sum", xi, &segments, n_out)?;
        self.push("segment_sum", out, Op::SegmentSum { x: xi, segments })
    }

    /// Row mean per bucket; empty buckets yield zero rows.
    pub fn segment_mean(
        &mut self,
        x: Var,
        segments: impl Into<Rc<[usize]>>,
        n_out: usize,
    ) -> Result<Var, NnError> {
        let segments = segments.into();
        let xi = self.idx(x)?;
        let mut out = self.segment_accumulate("segment_mean", xi, &segments, n_out)?;
        let mut counts = vec![0usize; n_out];
        for &s in segments.iter() {
            counts[s] += 1;
        }
        let width = out.cols();
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                out.data_mut()[s * width..(s + 1) * width]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
            }
        }
        self.push("segment_mean", out, Op::SegmentMean { x: xi, segments, counts })
    }

    fn segment_accumulate(
        &self,
        op: &'static str,
        xi: usize,
        segments: &[usize],
        n_out: usize,
    ) -> Result<Tensor, NnError> {
        let xv = &self.records[xi].value;
        if segments.len() != xv.rows() {
            return Err(mismatch(op, format!("{} segments for {} rows", segments.len(), xv.rows())));
        }
        let width = xv.cols();
        let mut out = vec![0.0; n_out * width];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_out {
                return Err(mismatch(op, format!("segment {s} out of {n_out}")));
            }
            for (o, v) in out[s * width..(s + 1) * width].iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        Tensor::new(vec![n_out, width], out)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let xv = &self.records[xi].value;
        let width = xv.cols();
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x: xi, inv_std })
    }

    /// Mean softmax cross-entropy over rows of `logits: [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let li = self.idx(logits)?;
        let lv = &self.records[li].value;
        let (batch, classes) = (lv.rows(), lv.cols());
        if labels.len() != batch {
            return Err(mismatch(
                "cross_entropy",
                format!("{} labels for {batch} rows", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(NnError::LabelOutOfRange { label, classes });
            }
            let row = lv.row(r);
            let lse = super::log_sum_exp(row);
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = Tensor::scalar(total / batch.max(1) as f64);
        let labels = labels.to_vec();
        self.push("cross_entropy", loss, Op::CrossEntropy { logits: li, labels, probs })
    }

    /// Mean absolute error between `pred` (one value per row) and `targets`.
    pub fn l1(&mut self, pred: Var, targets: &[f64]) -> Result<Var, NnError> {
        let pi = self.idx(pred)?;
        let pv = &self.records[pi].value;
        if pv.len() != targets.len() {
            return Err(mismatch("l1", format!("{} predictions for {} targets", pv.len(), targets.len())));
        }
        let total: f64 = pv.data().iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
        let loss = Tensor::scalar(total / targets.len().max(1) as f64);
        self.push("l1", loss, Op::L1 { pred: pi, targets: targets.to_vec() })
    }

    /// Reverse accumulation from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NnError> {
        let out = self.idx(output)?;
        let out_value = &self.records[out].value;
        if out_value.len() != 1 {
            return Err(NnError::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.records.len()).map(|_| None).collect();
        let mut seed = out_value.clone();
        seed.data_mut()[0] = 1.0;
        grads[out] = Some(seed);

        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let rec = &self.records[idx];
            match &rec.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.records[*x].value;
                    let wv = &self.records[*w].value;
                    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                    let n = xv.rows();
                    // dx[n, in] = g[n, out] · w[out, in]
                    let mut dx = vec![0.0; n * in_dim];
                    gemm(n, out_dim, in_dim, g.data(), (out_dim, 1), wv.data(), (in_dim, 1), 0.0, &mut dx, in_dim);
                    // dw[out, in] = gᵀ[out, n] · x[n, in]
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, n, in_dim, g.data(), (1, out_dim), xv.data(), (in_dim, 1), 0.0, &mut dw, in_dim);
                    if let Some(b) = b {
                        let mut db = vec![0.0; out_dim];
                        for row in g.data().chunks(out_dim) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.records[*b].value.shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, db)?);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let av = &self.records[*a].value;
                    let bv = &self.records[*b].value;
                    let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Scale(a, factor) => {
                    let mut da = g.clone();
                    da.scale_in_place(*factor);
                    accumulate(&mut grads, *a, da);
                }
                Op::Elu(x) => {
                    // derivative from the output: 1 where y >= 0, else y + 1 = exp(x)
                    let dx = g
                        .data()
                        .iter()
                        .zip(rec.value.data())
                        .map(|(g, &y)| if y >= 0.0 { *g } else { g * (y + 1.0) })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(rec.value.shape().to_vec(), dx)?);
                }
                Op::Sum(x) => {
                    let xv = &self.records[*x].value;
                    let dx = vec![g.item(); xv.len()];
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::GatherRows { x, index, .. } => {
                    let xv = &self.records[*x].value;
                    let width = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (slot, src) in index.iter().enumerate() {
                        if let Some(r) = *src {
                            let src_g = &g.data()[slot * width..(slot + 1) * width];
                            for (d, v) in dx[r * width..(r + 1) * width].iter_mut().zip(src_g) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::SegmentSum { x, segments } => {
                    let xv = &self.records[*x].value;
                    let width = xv.cols();
                    let mut dx = Vec::with_capacity(xv.len());
                    for &s in segments.iter() {
                        dx.extend_from_slice(&g.data()[s * width..(s + 1) * width]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::SegmentMean { x, segments, counts } => {
                    let xv = &self.records[*x].value;
                    let width = xv.cols();
                    let mut dx = Vec::with_capacity(xv.len());
                    for &s in segments.iter() {
                        let inv = 1.0 / counts[s] as f64;
                        dx.extend(g.data()[s * width..(s + 1) * width].iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &rec.value;
                    let width = y.cols();
                    let mut dx = Vec::with_capacity(y.len());
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gy = &g.data()[r * width..(r + 1) * width];
                        let yr = y.row(r);
                        let mean_g = gy.iter().sum::<f64>() / width as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        dx.extend(gy.iter().zip(yr).map(|(gv, yv)| inv * (gv - mean_g - yv * mean_gy)));
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let lv = &self.records[*logits].value;
                    let classes = lv.cols();
                    let scale = g.item() / labels.len().max(1) as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        dl[r * classes + label] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
                }
                Op::L1 { pred, targets } => {
                    let pv = &self.records[*pred].value;
                    let scale = g.item() / targets.len().max(1) as f64;
                    let dp = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(p, t)| {
                            let d = p - t;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), dp)?);
                }
            }
            if !g.is_finite() {
                return Err(NnError::NonFinite { op: "backward" });
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}
