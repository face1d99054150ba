//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward ops execute eagerly, validate shapes, and append a record with
//! whatever the backward rule needs (dropout masks, normalized values).
//! [`Tape::backward`] replays the records in reverse, accumulating
//! gradients additively so fan-out sums. One tape serves one forward/backward
//! pair; independent tapes are independent and may run on separate threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Forward execution mode. Dropout and batch-norm behave differently in
/// training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Affine { x: TensorId, w: TensorId, b: TensorId, out: TensorId },
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Dropout { x: TensorId, out: TensorId, keep: Vec<bool>, scale: S },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, xhat: Vec<S>, inv_std: Vec<S> },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, xhat: Vec<S>, inv_std: Vec<S>, coupled: bool },
    ConcatLast { xs: Vec<TensorId>, widths: Vec<usize>, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    GatherRows { table: TensorId, indices: Vec<usize>, out: TensorId },
    ExpandAxis { x: TensorId, out: TensorId, lead: usize, times: usize, tail: usize },
    Sum { x: TensorId, out: TensorId },
    ScaleShift { x: TensorId, out: TensorId, factor: S },
    MaskedMae { pred: TensorId, out: TensorId, grad_coeff: Vec<S> },
    NodeMix { e: TensorId, m: TensorId, c: TensorId, out: TensorId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    /// Whether a gradient must be propagated to or through this node.
    track: bool,
}

/// Result of a masked-MAE loss record.
pub struct MaskedMaeOut {
    pub id: TensorId,
    /// Entries that participated in the mean.
    pub active: usize,
    /// Entries excluded by the null-value mask.
    pub masked: usize,
}

/// Batch statistics produced by a train-mode batch-norm record; the model
/// folds them into its running statistics.
pub struct BatchStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Operation tape recording one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    /// Register a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.insert(value, false)
    }

    /// Register a copy of a parameter tensor; its gradient is accumulated
    /// during backward and read back with [`Tape::grad`].
    pub fn param(&mut self, value: &Tensor<S>) -> TensorId {
        self.insert(value.clone(), true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn insert(&mut self, value: Tensor<S>, track: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, track });
        id
    }

    fn push_result(&mut self, value: Tensor<S>, track: bool, op_name: &str) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{op_name} output")));
        }
        Ok(self.insert(value, track))
    }

    fn tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].track)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `y[..., j] = sum_k x[..., k] * w[k, j] + b[j]`
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if wv.rank() != 2 {
            return Err(Error::Shape(format!("affine weight must be rank 2, got {:?}", wv.shape())));
        }
        let (k_in, n_out) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != k_in {
            return Err(Error::Shape(format!(
                "affine input last dim {} != weight rows {}",
                xv.last_dim(),
                k_in
            )));
        }
        if bv.shape() != [n_out] {
            return Err(Error::Shape(format!("affine bias shape {:?} != [{n_out}]", bv.shape())));
        }
        let rows = xv.leading_count();
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n_out;
        let mut y = vec![S::zero(); rows * n_out];
        unsafe {
            S::gemm(
                rows, k_in, n_out,
                S::one(),
                xv.data().as_ptr(), k_in as isize, 1,
                wv.data().as_ptr(), n_out as isize, 1,
                S::zero(),
                y.as_mut_ptr(), n_out as isize, 1,
            );
        }
        for r in 0..rows {
            let row = &mut y[r * n_out..(r + 1) * n_out];
            for (yj, bj) in row.iter_mut().zip(bv.data()) {
                *yj += *bj;
            }
        }
        let track = self.tracked(&[x, w, b]);
        let out = self.push_result(Tensor::new(out_shape, y)?, track, "affine")?;
        self.ops.push(Op::Affine { x, w, b, out });
        Ok(out)
    }

    /// Plain 2-D matrix product `a @ b`. The accumulation order of each dot
    /// product is canonicalized (addends sorted by value) so that relabeling
    /// graph nodes permutes the result bitwise.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul shapes {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut y = vec![S::zero(); m * n];
        let mut terms: Vec<S> = Vec::with_capacity(k);
        for i in 0..m {
            for j in 0..n {
                terms.clear();
                for l in 0..k {
                    terms.push(av.data()[i * k + l] * bv.data()[l * n + j]);
                }
                terms.sort_unstable_by(|p, q| p.as_f64().total_cmp(&q.as_f64()));
                let mut acc = S::zero();
                for t in &terms {
                    acc += *t;
                }
                y[i * n + j] = acc;
            }
        }
        let track = self.tracked(&[a, b]);
        let out = self.push_result(Tensor::new(vec![m, n], y)?, track, "matmul")?;
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let y: Vec<S> = xv.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let track = self.tracked(&[x]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "relu")?;
        self.ops.push(Op::Relu { x, out });
        Ok(out)
    }

    /// Inverted dropout: train mode zeroes elements with probability `p` and
    /// scales survivors by `1/(1-p)`; eval mode (or `p == 0`) is the identity
    /// and records nothing.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArg(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let xv = &self.nodes[x.0].value;
        let scale = S::from_f64(1.0 / (1.0 - p));
        let keep: Vec<bool> = (0..xv.numel()).map(|_| rng.gen::<f64>() >= p).collect();
        let y: Vec<S> = xv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { S::zero() })
            .collect();
        let track = self.tracked(&[x]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "dropout")?;
        self.ops.push(Op::Dropout { x, out, keep, scale });
        Ok(out)
    }

    /// Normalizes each trailing-dimension vector to zero mean and unit
    /// population variance, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift must be [{d}], got {:?} / {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.leading_count();
        let eps = S::from_f64(eps);
        let dn = S::from_f64(d as f64);
        let mut y = vec![S::zero(); xv.numel()];
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                y[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let track = self.tracked(&[x, gamma, beta]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "layer_norm")?;
        self.ops.push(Op::LayerNorm { x, gamma, beta, out, xhat, inv_std });
        Ok(out)
    }

    /// Train-mode batch norm over every leading position (for `[B, N, d]`
    /// input the statistics pool over both batch and node axes). Returns the
    /// batch statistics so the caller can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats<S>)> {
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape("batch_norm scale/shift shape".into()));
        }
        let rows = xv.leading_count();
        let eps = S::from_f64(eps);
        let rn = S::from_f64(rows as f64);
        let mut mean = vec![S::zero(); d];
        let mut var = vec![S::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                mean[j] += xv.data()[r * d + j];
            }
        }
        for mj in mean.iter_mut() {
            *mj /= rn;
        }
        for r in 0..rows {
            for j in 0..d {
                let c = xv.data()[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for vj in var.iter_mut() {
            *vj /= rn;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut y = vec![S::zero(); xv.numel()];
        let mut xhat = vec![S::zero(); xv.numel()];
        for r in 0..rows {
            for j in 0..d {
                let h = (xv.data()[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                y[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let track = self.tracked(&[x, gamma, beta]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "batch_norm")?;
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, xhat, inv_std, coupled: true });
        Ok((out, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm against frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<TensorId> {
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] || running_mean.len() != d || running_var.len() != d {
            return Err(Error::Shape("batch_norm eval shapes".into()));
        }
        let rows = xv.leading_count();
        let eps = S::from_f64(eps);
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut y = vec![S::zero(); xv.numel()];
        let mut xhat = vec![S::zero(); xv.numel()];
        for r in 0..rows {
            for j in 0..d {
                let h = (xv.data()[r * d + j] - running_mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                y[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let track = self.tracked(&[x, gamma, beta]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "batch_norm")?;
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, xhat, inv_std, coupled: false });
        Ok(out)
    }

    /// Concatenates along the trailing dimension; all leading extents must
    /// agree. Gradient splits back to the inputs.
    pub fn concat_last(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat_last needs at least one input".into()));
        }
        let lead_shape: Vec<usize> = {
            let first = &self.nodes[xs[0].0].value;
            first.shape()[..first.rank() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = &self.nodes[x.0].value;
            if v.shape()[..v.rank() - 1] != lead_shape[..] {
                return Err(Error::Shape(format!(
                    "concat_last leading shape {:?} != {:?}",
                    &v.shape()[..v.rank() - 1],
                    lead_shape
                )));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead_shape.iter().product();
        let mut out_shape = lead_shape;
        out_shape.push(total);
        let mut y = vec![S::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (idx, &x) in xs.iter().enumerate() {
                let w = widths[idx];
                let src = &self.nodes[x.0].value.data()[r * w..(r + 1) * w];
                y[r * total + off..r * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let track = self.tracked(xs);
        let out = self.push_result(Tensor::new(out_shape, y)?, track, "concat_last")?;
        self.ops.push(Op::ConcatLast { xs: xs.to_vec(), widths, out });
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors (the residual join).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add shapes {:?} != {:?}", av.shape(), bv.shape())));
        }
        let y: Vec<S> = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let track = self.tracked(&[a, b]);
        let out = self.push_result(Tensor::new(av.shape().to_vec(), y)?, track, "add")?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// Selects rows of a `[R, d]` table; the codebook lookup. Gradient
    /// scatter-adds into the selected rows only.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::Shape(format!("gather_rows table must be rank 2, got {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg(format!("row index {bad} out of range 0..{rows}")));
        }
        let mut y = vec![S::zero(); indices.len() * d];
        for (b, &i) in indices.iter().enumerate() {
            y[b * d..(b + 1) * d].copy_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let track = self.tracked(&[table]);
        let out = self.push_result(Tensor::new(vec![indices.len(), d], y)?, track, "gather_rows")?;
        self.ops.push(Op::GatherRows { table, indices: indices.to_vec(), out });
        Ok(out)
    }

    /// Inserts a new axis of extent `times` at position `axis`, replicating
    /// the input along it. Gradient sums over the replicated axis.
    pub fn expand_axis(&mut self, x: TensorId, axis: usize, times: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if axis > xv.rank() {
            return Err(Error::Shape(format!("expand axis {axis} > rank {}", xv.rank())));
        }
        if times == 0 {
            return Err(Error::InvalidArg("expand times must be >= 1".into()));
        }
        let lead: usize = xv.shape()[..axis].iter().product();
        let tail: usize = xv.shape()[axis..].iter().product();
        let mut out_shape = xv.shape().to_vec();
        out_shape.insert(axis, times);
        let mut y = vec![S::zero(); lead * times * tail];
        for l in 0..lead {
            let src = &xv.data()[l * tail..(l + 1) * tail];
            for t in 0..times {
                let base = (l * times + t) * tail;
                y[base..base + tail].copy_from_slice(src);
            }
        }
        let track = self.tracked(&[x]);
        let out = self.push_result(Tensor::new(out_shape, y)?, track, "expand_axis")?;
        self.ops.push(Op::ExpandAxis { x, out, lead, times, tail });
        Ok(out)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let mut acc = S::zero();
        for &v in xv.data() {
            acc += v;
        }
        let track = self.tracked(&[x]);
        let out = self.push_result(Tensor::scalar(acc), track, "sum")?;
        self.ops.push(Op::Sum { x, out });
        Ok(out)
    }

    /// `y = factor * x + shift` with scalar coefficients (z-score inversion).
    pub fn scale_shift(&mut self, x: TensorId, factor: f64, shift: f64) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let (f, s) = (S::from_f64(factor), S::from_f64(shift));
        let y: Vec<S> = xv.data().iter().map(|&v| f * v + s).collect();
        let track = self.tracked(&[x]);
        let out = self.push_result(Tensor::new(xv.shape().to_vec(), y)?, track, "scale_shift")?;
        self.ops.push(Op::ScaleShift { x, out, factor: f });
        Ok(out)
    }

    /// Mean absolute error over entries whose target differs from
    /// `null_value` by more than `1e-5`; 0 when everything is masked.
    pub fn masked_mae(
        &mut self,
        pred: TensorId,
        target: &[f64],
        null_value: Option<f64>,
    ) -> Result<MaskedMaeOut> {
        let pv = &self.nodes[pred.0].value;
        if pv.numel() != target.len() {
            return Err(Error::Shape(format!(
                "loss target has {} entries, prediction {}",
                target.len(),
                pv.numel()
            )));
        }
        let mut active = 0usize;
        let mut grad_coeff = vec![S::zero(); target.len()];
        let mut terms = Vec::with_capacity(target.len());
        for (i, (&p, &t)) in pv.data().iter().zip(target).enumerate() {
            let masked = match null_value {
                Some(nv) => (t - nv).abs() <= 1e-5,
                None => false,
            };
            if masked {
                continue;
            }
            active += 1;
            let diff = p - S::from_f64(t);
            terms.push(diff.abs());
            grad_coeff[i] = if diff > S::zero() {
                S::one()
            } else if diff < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
        }
        let loss = if active == 0 {
            S::zero()
        } else {
            let inv = S::one() / S::from_f64(active as f64);
            for c in grad_coeff.iter_mut() {
                *c *= inv;
            }
            let mut acc = S::zero();
            for t in &terms {
                acc += *t;
            }
            acc * inv
        };
        let track = self.tracked(&[pred]);
        let out = self.push_result(Tensor::scalar(loss), track, "masked_mae")?;
        self.ops.push(Op::MaskedMae { pred, out, grad_coeff });
        Ok(MaskedMaeOut { id: out, active, masked: target.len() - active })
    }

    /// Mixes the node axis of a `[B, N, d]` tensor with an `[N, N]` matrix
    /// and an `[N]` shift: `y[b,i,k] = sum_j m[i,j] e[b,j,k] + c[i]`. The
    /// one deliberately channel-mixing operation in the crate.
    pub fn node_mix(&mut self, e: TensorId, m: TensorId, c: TensorId) -> Result<TensorId> {
        let (ev, mv, cv) = (&self.nodes[e.0].value, &self.nodes[m.0].value, &self.nodes[c.0].value);
        if ev.rank() != 3 {
            return Err(Error::Shape(format!("node_mix input must be [B, N, d], got {:?}", ev.shape())));
        }
        let (bsz, n, d) = (ev.shape()[0], ev.shape()[1], ev.shape()[2]);
        if mv.shape() != [n, n] || cv.shape() != [n] {
            return Err(Error::Shape(format!(
                "node_mix wants [{n}, {n}] matrix and [{n}] shift, got {:?} / {:?}",
                mv.shape(),
                cv.shape()
            )));
        }
        let mut y = vec![S::zero(); ev.numel()];
        for b in 0..bsz {
            let e_b = &ev.data()[b * n * d..(b + 1) * n * d];
            let y_b = &mut y[b * n * d..(b + 1) * n * d];
            unsafe {
                S::gemm(
                    n, n, d,
                    S::one(),
                    mv.data().as_ptr(), n as isize, 1,
                    e_b.as_ptr(), d as isize, 1,
                    S::zero(),
                    y_b.as_mut_ptr(), d as isize, 1,
                );
            }
            for i in 0..n {
                let ci = cv.data()[i];
                for k in 0..d {
                    y_b[i * d + k] += ci;
                }
            }
        }
        let track = self.tracked(&[e, m, c]);
        let out = self.push_result(Tensor::new(ev.shape().to_vec(), y)?, track, "node_mix")?;
        self.ops.push(Op::NodeMix { e, m, c, out });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn take_grad(&mut self, id: TensorId) -> Option<Vec<S>> {
        self.nodes[id.0].grad.take()
    }

    fn put_grad(&mut self, id: TensorId, g: Vec<S>) {
        self.nodes[id.0].grad = Some(g);
    }

    fn grad_or_zeros(&mut self, id: TensorId) -> Vec<S> {
        match self.nodes[id.0].grad.take() {
            Some(g) => g,
            None => vec![S::zero(); self.nodes[id.0].value.numel()],
        }
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[S]) {
        if !self.nodes[id.0].track {
            return;
        }
        let mut g = self.grad_or_zeros(id);
        for (gi, &ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
        self.put_grad(id, g);
    }

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients into every tracked tensor reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward seed must be a scalar".into()));
        }
        if !self.nodes[loss.0].value.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>) {
        match op {
            Op::Affine { x, w, b, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let (rows, k_in, n_out) = {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    (xv.leading_count(), wv.shape()[0], wv.shape()[1])
                };
                if self.nodes[x.0].track {
                    let mut gx = self.grad_or_zeros(*x);
                    let wv = self.nodes[w.0].value.data();
                    unsafe {
                        S::gemm(
                            rows, n_out, k_in,
                            S::one(),
                            dy.as_ptr(), n_out as isize, 1,
                            wv.as_ptr(), 1, n_out as isize, // W^T view
                            S::one(),
                            gx.as_mut_ptr(), k_in as isize, 1,
                        );
                    }
                    self.put_grad(*x, gx);
                }
                if self.nodes[w.0].track {
                    let mut gw = self.grad_or_zeros(*w);
                    let xv = self.nodes[x.0].value.data();
                    unsafe {
                        S::gemm(
                            k_in, rows, n_out,
                            S::one(),
                            xv.as_ptr(), 1, k_in as isize, // X^T view
                            dy.as_ptr(), n_out as isize, 1,
                            S::one(),
                            gw.as_mut_ptr(), n_out as isize, 1,
                        );
                    }
                    self.put_grad(*w, gw);
                }
                if self.nodes[b.0].track {
                    let mut gb = self.grad_or_zeros(*b);
                    for r in 0..rows {
                        for j in 0..n_out {
                            gb[j] += dy[r * n_out + j];
                        }
                    }
                    self.put_grad(*b, gb);
                }
                self.put_grad(*out, dy);
            }

            Op::MatMul { a, b, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let (m, k) = {
                    let av = &self.nodes[a.0].value;
                    (av.shape()[0], av.shape()[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].track {
                    let mut ga = self.grad_or_zeros(*a);
                    let bv = self.nodes[b.0].value.data();
                    unsafe {
                        S::gemm(
                            m, n, k,
                            S::one(),
                            dy.as_ptr(), n as isize, 1,
                            bv.as_ptr(), 1, n as isize, // B^T
                            S::one(),
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                    self.put_grad(*a, ga);
                }
                if self.nodes[b.0].track {
                    let mut gb = self.grad_or_zeros(*b);
                    let av = self.nodes[a.0].value.data();
                    unsafe {
                        S::gemm(
                            k, m, n,
                            S::one(),
                            av.as_ptr(), 1, k as isize, // A^T
                            dy.as_ptr(), n as isize, 1,
                            S::one(),
                            gb.as_mut_ptr(), n as isize, 1,
                        );
                    }
                    self.put_grad(*b, gb);
                }
                self.put_grad(*out, dy);
            }

            Op::Relu { x, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[x.0].track {
                    let contrib: Vec<S> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                        .collect();
                    self.accumulate(*x, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::Dropout { x, out, keep, scale } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[x.0].track {
                    let contrib: Vec<S> = dy
                        .iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g * *scale } else { S::zero() })
                        .collect();
                    self.accumulate(*x, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::LayerNorm { x, gamma, beta, out, xhat, inv_std } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let d = self.nodes[gamma.0].value.numel();
                let rows = inv_std.len();
                if self.nodes[gamma.0].track {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gamma, &gg);
                }
                if self.nodes[beta.0].track {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += dy[r * d + j];
                        }
                    }
                    self.accumulate(*beta, &gb);
                }
                if self.nodes[x.0].track {
                    let gv = self.nodes[gamma.0].value.data().to_vec();
                    let dn = S::from_f64(d as f64);
                    let mut gx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..d {
                            let dh = dy[r * d + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        let mean_dh = sum_dh / dn;
                        let mean_dh_h = sum_dh_h / dn;
                        for j in 0..d {
                            let dh = dy[r * d + j] * gv[j];
                            gx[r * d + j] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(*x, &gx);
                }
                self.put_grad(*out, dy);
            }

            Op::BatchNorm { x, gamma, beta, out, xhat, inv_std, coupled } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let d = self.nodes[gamma.0].value.numel();
                let rows = xhat.len() / d;
                if self.nodes[gamma.0].track {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gamma, &gg);
                }
                if self.nodes[beta.0].track {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += dy[r * d + j];
                        }
                    }
                    self.accumulate(*beta, &gb);
                }
                if self.nodes[x.0].track {
                    let gv = self.nodes[gamma.0].value.data().to_vec();
                    let mut gx = vec![S::zero(); rows * d];
                    if *coupled {
                        let rn = S::from_f64(rows as f64);
                        for j in 0..d {
                            let mut sum_dh = S::zero();
                            let mut sum_dh_h = S::zero();
                            for r in 0..rows {
                                let dh = dy[r * d + j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[r * d + j];
                            }
                            let mean_dh = sum_dh / rn;
                            let mean_dh_h = sum_dh_h / rn;
                            for r in 0..rows {
                                let dh = dy[r * d + j] * gv[j];
                                gx[r * d + j] =
                                    inv_std[j] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..d {
                                gx[r * d + j] = dy[r * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(*x, &gx);
                }
                self.put_grad(*out, dy);
            }

            Op::ConcatLast { xs, widths, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (idx, &x) in xs.iter().enumerate() {
                    let w = widths[idx];
                    if self.nodes[x.0].track {
                        let mut contrib = vec![S::zero(); rows * w];
                        for r in 0..rows {
                            contrib[r * w..(r + 1) * w]
                                .copy_from_slice(&dy[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(x, &contrib);
                    }
                    off += w;
                }
                self.put_grad(*out, dy);
            }

            Op::Add { a, b, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                self.accumulate(*a, &dy);
                self.accumulate(*b, &dy);
                self.put_grad(*out, dy);
            }

            Op::GatherRows { table, indices, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[table.0].track {
                    let d = self.nodes[table.0].value.shape()[1];
                    let mut gt = self.grad_or_zeros(*table);
                    for (b, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += dy[b * d + j];
                        }
                    }
                    self.put_grad(*table, gt);
                }
                self.put_grad(*out, dy);
            }

            Op::ExpandAxis { x, out, lead, times, tail } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[x.0].track {
                    let mut contrib = vec![S::zero(); lead * tail];
                    for l in 0..*lead {
                        for t in 0..*times {
                            let base = (l * times + t) * tail;
                            for j in 0..*tail {
                                contrib[l * tail + j] += dy[base + j];
                            }
                        }
                    }
                    self.accumulate(*x, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::Sum { x, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[x.0].track {
                    let contrib = vec![dy[0]; self.nodes[x.0].value.numel()];
                    self.accumulate(*x, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::ScaleShift { x, out, factor } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[x.0].track {
                    let contrib: Vec<S> = dy.iter().map(|&g| g * *factor).collect();
                    self.accumulate(*x, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::MaskedMae { pred, out, grad_coeff } => {
                let Some(dy) = self.take_grad(*out) else { return };
                if self.nodes[pred.0].track {
                    let contrib: Vec<S> = grad_coeff.iter().map(|&c| c * dy[0]).collect();
                    self.accumulate(*pred, &contrib);
                }
                self.put_grad(*out, dy);
            }

            Op::NodeMix { e, m, c, out } => {
                let Some(dy) = self.take_grad(*out) else { return };
                let (bsz, n, d) = {
                    let ev = &self.nodes[e.0].value;
                    (ev.shape()[0], ev.shape()[1], ev.shape()[2])
                };
                if self.nodes[e.0].track {
                    let mut ge = self.grad_or_zeros(*e);
                    let mv = self.nodes[m.0].value.data();
                    for b in 0..bsz {
                        unsafe {
                            S::gemm(
                                n, n, d,
                                S::one(),
                                mv.as_ptr(), 1, n as isize, // M^T
                                dy[b * n * d..].as_ptr(), d as isize, 1,
                                S::one(),
                                ge[b * n * d..].as_mut_ptr(), d as isize, 1,
                            );
                        }
                    }
                    self.put_grad(*e, ge);
                }
                if self.nodes[m.0].track {
                    let mut gm = self.grad_or_zeros(*m);
                    let ev = self.nodes[e.0].value.data();
                    for b in 0..bsz {
                        unsafe {
                            S::gemm(
                                n, d, n,
                                S::one(),
                                dy[b * n * d..].as_ptr(), d as isize, 1,
                                ev[b * n * d..].as_ptr(), 1, d as isize, // E_b^T
                                S::one(),
                                gm.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                    self.put_grad(*m, gm);
                }
                if self.nodes[c.0].track {
                    let mut gc = vec![S::zero(); n];
                    for b in 0..bsz {
                        for i in 0..n {
                            for k in 0..d {
                                gc[i] += dy[(b * n + i) * d + k];
                            }
                        }
                    }
                    self.accumulate(*c, &gc);
                }
                self.put_grad(*out, dy);
            }
        }
    }
}
