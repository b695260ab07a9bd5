//! Execution tape: primitive tensor ops with reverse-mode differentiation.
//!
//! A [`Tape`] is the single execution context for one forward pass. Ops
//! always compute; when the tape is recording and an input can carry
//! gradient, the op is also appended to the tape. [`Tape::backward`] replays
//! the recorded ops in exact reverse execution order and returns the
//! gradients keyed by tensor identity. The tape also hosts the sequential-op
//! counter used by the benchmark ledger (see [`crate::trace`]).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, TensorId};
use crate::trace::{Attribution, OpCategory, OpCounter};

const RMSNORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10000.0;

enum OpKind<E: Element> {
    Matmul { a: Tensor<E>, b: Tensor<E> },
    ConcatRows { parts: Vec<Tensor<E>> },
    ConcatCols { parts: Vec<Tensor<E>> },
    SliceRows { t: Tensor<E>, from: usize },
    RepeatAdd { y: Tensor<E>, dy: Tensor<E> },
    Add { a: Tensor<E>, b: Tensor<E> },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Scale { t: Tensor<E>, factor: E },
    Relu { x: Tensor<E> },
    Silu { x: Tensor<E> },
    SoftmaxCols { x: Tensor<E> },
    RmsNormCols { x: Tensor<E>, gain: Tensor<E>, inv_rms: Vec<E> },
    Transpose { t: Tensor<E> },
    Rope { x: Tensor<E>, head_dim: usize, start_pos: usize },
    EmbedCols { table: Tensor<E>, ids: Vec<u32> },
    CrossEntropyCols {
        logits: Tensor<E>,
        targets: Vec<Option<u32>>,
        probs: Vec<E>,
        n_valid: usize,
    },
    Sum { t: Tensor<E> },
}

struct Entry<E: Element> {
    out: Tensor<E>,
    op: OpKind<E>,
}

/// Gradients produced by [`Tape::backward`], keyed by tensor identity.
pub struct Gradients<E: Element> {
    by_id: HashMap<TensorId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    fn new() -> Self {
        Gradients { by_id: HashMap::new() }
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        self.by_id.get(&t.id())
    }

    /// Gradient of `t`, or a zero tensor of the same shape when `t` was not
    /// reached by the backward pass.
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Tensor<E> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Element-wise accumulation of another gradient set (batch assembly).
    pub fn accumulate(&mut self, other: Gradients<E>) {
        for (id, g) in other.by_id {
            match self.by_id.get_mut(&id) {
                Some(cur) => {
                    debug_assert_eq!(cur.shape(), g.shape());
                    let data: Vec<E> = cur
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &b)| a + b)
                        .collect();
                    *cur = Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape");
                }
                None => {
                    self.by_id.insert(id, g);
                }
            }
        }
    }
}

/// Records primitive ops for reverse-mode differentiation and counts
/// sequential ops for the benchmark ledger.
pub struct Tape<E: Element> {
    recording: bool,
    entries: Vec<Entry<E>>,
    counter: OpCounter,
}

impl<E: Element> Tape<E> {
    /// Tape that records ops for a later backward pass.
    pub fn recording() -> Self {
        Tape { recording: true, entries: Vec::new(), counter: OpCounter::new() }
    }

    /// Non-recording tape for inference, verification forwards, and timing.
    pub fn inference() -> Self {
        Tape { recording: false, entries: Vec::new(), counter: OpCounter::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_recorded(&self) -> usize {
        self.entries.len()
    }

    pub fn reset(&mut self) {
        self.entries.clear();
        self.counter = OpCounter::new();
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn take_counter(&mut self) -> OpCounter {
        std::mem::take(&mut self.counter)
    }

    /// Ledger hook used by layer/block code.
    pub fn note(&mut self, cat: OpCategory, attr: Attribution, site: Option<&str>) {
        self.counter.record(cat, attr, site);
    }

    fn push(&mut self, out: &mut Tensor<E>, any_live: bool, op: OpKind<E>) {
        if self.recording && any_live {
            out.tracked = true;
            self.entries.push(Entry { out: out.clone(), op });
        }
    }

    // ----- primitives ------------------------------------------------------

    /// `c[i,j] = sum_p a[i,p] * b[p,j]`, accumulated over ascending `p`.
    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.cols() != b.rows() {
            return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
        }
        let data = matmul_raw(a.data(), a.rows(), a.cols(), b.data(), b.cols());
        let mut out = Tensor::from_vec(a.rows(), b.cols(), data)?;
        let live = a.live() || b.live();
        self.push(&mut out, live, OpKind::Matmul { a: a.clone(), b: b.clone() });
        Ok(out)
    }

    /// Vertical stack of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = parts[0].cols();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} cols"), p.shape_str()));
            }
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut out = Tensor::from_vec(rows, cols, data)?;
        let live = parts.iter().any(|p| p.live());
        self.push(
            &mut out,
            live,
            OpKind::ConcatRows { parts: parts.iter().map(|p| (*p).clone()).collect() },
        );
        Ok(out)
    }

    /// Horizontal stack of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), p.shape_str()));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
            }
        }
        let mut out = Tensor::from_vec(rows, cols, data)?;
        let live = parts.iter().any(|p| p.live());
        self.push(
            &mut out,
            live,
            OpKind::ConcatCols { parts: parts.iter().map(|p| (*p).clone()).collect() },
        );
        Ok(out)
    }

    /// Copies rows `[from, to)`; gradient routes back to those rows only.
    pub fn slice_rows(&mut self, t: &Tensor<E>, from: usize, to: usize) -> Result<Tensor<E>> {
        if from >= to || to > t.rows() {
            return Err(Error::Bounds { op: "slice_rows", from, to, extent: t.rows() });
        }
        let cols = t.cols();
        let data = t.data()[from * cols..to * cols].to_vec();
        let mut out = Tensor::from_vec(to - from, cols, data)?;
        let live = t.live();
        self.push(&mut out, live, OpKind::SliceRows { t: t.clone(), from });
        Ok(out)
    }

    /// Block-tiled repeat-and-add: `dy` is stacked `rows(y)/rows(dy)` times
    /// vertically and added to `y`.
    pub fn repeat_add(&mut self, y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        if y.cols() != dy.cols() {
            return Err(Error::shape("repeat_add", y.shape_str(), dy.shape_str()));
        }
        let q = dy.rows();
        if y.rows() % q != 0 {
            return Err(Error::Precondition(format!(
                "repeat_add: {} rows not divisible by {} rows",
                y.rows(),
                q
            )));
        }
        let cols = y.cols();
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let i = idx / cols;
                let c = idx % cols;
                v + dy.data()[(i % q) * cols + c]
            })
            .collect();
        let mut out = Tensor::from_vec(y.rows(), cols, data)?;
        let live = y.live() || dy.live();
        self.push(&mut out, live, OpKind::RepeatAdd { y: y.clone(), dy: dy.clone() });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape_str(), b.shape_str()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let mut out = Tensor::from_vec(a.rows(), a.cols(), data)?;
        let live = a.live() || b.live();
        self.push(&mut out, live, OpKind::Add { a: a.clone(), b: b.clone() });
        Ok(out)
    }

    /// Element-wise product (used by the SwiGLU gate).
    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", a.shape_str(), b.shape_str()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let mut out = Tensor::from_vec(a.rows(), a.cols(), data)?;
        let live = a.live() || b.live();
        self.push(&mut out, live, OpKind::Mul { a: a.clone(), b: b.clone() });
        Ok(out)
    }

    pub fn scale(&mut self, t: &Tensor<E>, factor: E) -> Result<Tensor<E>> {
        let data = t.data().iter().map(|&x| x * factor).collect();
        let mut out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        let live = t.live();
        self.push(&mut out, live, OpKind::Scale { t: t.clone(), factor });
        Ok(out)
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let mut out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let live = x.live();
        self.push(&mut out, live, OpKind::Relu { x: x.clone() });
        Ok(out)
    }

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        let mut out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let live = x.live();
        self.push(&mut out, live, OpKind::Silu { x: x.clone() });
        Ok(out)
    }

    /// Column-wise softmax with max-subtraction stabilization. Entries of
    /// `-inf` are legal (masked attention scores) as long as each column
    /// keeps at least one finite entry.
    pub fn softmax_cols(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (rows, cols) = x.shape();
        let mut data = vec![E::ZERO; rows * cols];
        for c in 0..cols {
            let mut mx = x.get(0, c);
            for i in 1..rows {
                mx = mx.maximum(x.get(i, c));
            }
            let mut denom = E::ZERO;
            for i in 0..rows {
                let e = (x.get(i, c) - mx).exp();
                data[i * cols + c] = e;
                denom = denom + e;
            }
            for i in 0..rows {
                data[i * cols + c] = data[i * cols + c] / denom;
            }
        }
        let mut out = Tensor::from_vec(rows, cols, data)?;
        let live = x.live();
        self.push(&mut out, live, OpKind::SoftmaxCols { x: x.clone() });
        Ok(out)
    }

    /// Column-wise RMS normalization with per-row gain:
    /// `y[i,c] = gain[i] * x[i,c] / sqrt(mean_i(x[i,c]^2) + eps)`.
    pub fn rmsnorm_cols(&mut self, x: &Tensor<E>, gain: &Tensor<E>) -> Result<Tensor<E>> {
        if gain.rows() != x.rows() || gain.cols() != 1 {
            return Err(Error::shape("rmsnorm_cols", x.shape_str(), gain.shape_str()));
        }
        let (rows, cols) = x.shape();
        let eps = E::from_f64(RMSNORM_EPS);
        let denom = E::from_f64(rows as f64);
        let mut inv_rms = Vec::with_capacity(cols);
        let mut data = vec![E::ZERO; rows * cols];
        for c in 0..cols {
            let mut ms = E::ZERO;
            for i in 0..rows {
                let v = x.get(i, c);
                ms = ms + v * v;
            }
            let inv = E::ONE / (ms / denom + eps).sqrt();
            inv_rms.push(inv);
            for i in 0..rows {
                data[i * cols + c] = gain.data()[i] * x.get(i, c) * inv;
            }
        }
        let mut out = Tensor::from_vec(rows, cols, data)?;
        let live = x.live() || gain.live();
        self.push(
            &mut out,
            live,
            OpKind::RmsNormCols { x: x.clone(), gain: gain.clone(), inv_rms },
        );
        Ok(out)
    }

    pub fn transpose(&mut self, t: &Tensor<E>) -> Result<Tensor<E>> {
        let (rows, cols) = t.shape();
        let mut data = vec![E::ZERO; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = t.get(i, j);
            }
        }
        let mut out = Tensor::from_vec(cols, rows, data)?;
        let live = t.live();
        self.push(&mut out, live, OpKind::Transpose { t: t.clone() });
        Ok(out)
    }

    /// Rotary position embedding applied per `head_dim`-row block; column
    /// `c` is treated as absolute position `start_pos + c`.
    pub fn rope(&mut self, x: &Tensor<E>, head_dim: usize, start_pos: usize) -> Result<Tensor<E>> {
        if head_dim == 0 || head_dim % 2 != 0 || x.rows() % head_dim != 0 {
            return Err(Error::Precondition(format!(
                "rope: {} rows incompatible with head_dim {head_dim}",
                x.rows()
            )));
        }
        let data = rope_apply(x, head_dim, start_pos, false);
        let mut out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let live = x.live();
        self.push(&mut out, live, OpKind::Rope { x: x.clone(), head_dim, start_pos });
        Ok(out)
    }

    /// Gathers embedding columns for a token sequence: `out[:,c] = table[:, ids[c]]`.
    pub fn embed_cols(&mut self, table: &Tensor<E>, ids: &[u32]) -> Result<Tensor<E>> {
        if ids.is_empty() {
            return Err(Error::Contract("embed_cols of empty sequence".into()));
        }
        let (d, vocab) = table.shape();
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Bounds {
                    op: "embed_cols",
                    from: id as usize,
                    to: id as usize + 1,
                    extent: vocab,
                });
            }
        }
        let cols = ids.len();
        let mut data = vec![E::ZERO; d * cols];
        for (c, &id) in ids.iter().enumerate() {
            for i in 0..d {
                data[i * cols + c] = table.get(i, id as usize);
            }
        }
        let mut out = Tensor::from_vec(d, cols, data)?;
        let live = table.live();
        self.push(&mut out, live, OpKind::EmbedCols { table: table.clone(), ids: ids.to_vec() });
        Ok(out)
    }

    /// Mean negative log-likelihood over columns with a target; columns with
    /// `None` are excluded from both the mean and the gradient.
    pub fn cross_entropy_cols(
        &mut self,
        logits: &Tensor<E>,
        targets: &[Option<u32>],
    ) -> Result<Tensor<E>> {
        let (vocab, cols) = logits.shape();
        if targets.len() != cols {
            return Err(Error::shape(
                "cross_entropy_cols",
                format!("{cols} columns"),
                format!("{} targets", targets.len()),
            ));
        }
        let n_valid = targets.iter().flatten().count();
        if n_valid == 0 {
            return Err(Error::Contract("cross_entropy_cols: no valid targets".into()));
        }
        for t in targets.iter().flatten() {
            if *t as usize >= vocab {
                return Err(Error::Bounds {
                    op: "cross_entropy_cols",
                    from: *t as usize,
                    to: *t as usize + 1,
                    extent: vocab,
                });
            }
        }
        let mut probs = vec![E::ZERO; vocab * cols];
        let mut total = E::ZERO;
        for (c, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let mut mx = logits.get(0, c);
            for i in 1..vocab {
                mx = mx.maximum(logits.get(i, c));
            }
            let mut denom = E::ZERO;
            for i in 0..vocab {
                let e = (logits.get(i, c) - mx).exp();
                probs[i * cols + c] = e;
                denom = denom + e;
            }
            for i in 0..vocab {
                probs[i * cols + c] = probs[i * cols + c] / denom;
            }
            total = total - probs[(*t as usize) * cols + c].ln();
        }
        let loss = total / E::from_f64(n_valid as f64);
        let mut out = Tensor::scalar(loss);
        let live = logits.live();
        self.push(
            &mut out,
            live,
            OpKind::CrossEntropyCols {
                logits: logits.clone(),
                targets: targets.to_vec(),
                probs,
                n_valid,
            },
        );
        Ok(out)
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, t: &Tensor<E>) -> Result<Tensor<E>> {
        let mut acc = E::ZERO;
        for &v in t.data() {
            acc = acc + v;
        }
        let mut out = Tensor::scalar(acc);
        let live = t.live();
        self.push(&mut out, live, OpKind::Sum { t: t.clone() });
        Ok(out)
    }

    // ----- backward --------------------------------------------------------

    /// Replays the tape in reverse execution order, accumulating gradients
    /// for every tensor reachable from `loss`. Frozen tensors
    /// (`requires_grad == false` leaves) never accumulate gradient.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}",
                loss.shape_str()
            )));
        }
        if !loss.live() {
            return Err(Error::Contract(
                "backward: loss is not reachable from this tape (nothing was recorded)".into(),
            ));
        }
        let mut grads: HashMap<TensorId, Vec<E>> = HashMap::new();
        grads.insert(loss.id(), vec![E::ONE]);

        for entry in self.entries.iter().rev() {
            let Some(gout) = grads.get(&entry.out.id()).cloned() else {
                continue; // not reachable from the loss
            };
            match &entry.op {
                OpKind::Matmul { a, b } => {
                    let (m, k) = a.shape();
                    let n = b.cols();
                    if a.live() {
                        let bt = transpose_raw(b.data(), k, n);
                        let da = matmul_raw(&gout, m, n, &bt, k);
                        accumulate(&mut grads, a, da);
                    }
                    if b.live() {
                        let at = transpose_raw(a.data(), m, k);
                        let db = matmul_raw(&at, k, m, &gout, n);
                        accumulate(&mut grads, b, db);
                    }
                }
                OpKind::ConcatRows { parts } => {
                    let cols = entry.out.cols();
                    let mut row = 0;
                    for p in parts {
                        if p.live() {
                            let seg = gout[row * cols..(row + p.rows()) * cols].to_vec();
                            accumulate(&mut grads, p, seg);
                        }
                        row += p.rows();
                    }
                }
                OpKind::ConcatCols { parts } => {
                    let rows = entry.out.rows();
                    let total_cols = entry.out.cols();
                    let mut col = 0;
                    for p in parts {
                        let pc = p.cols();
                        if p.live() {
                            let mut seg = vec![E::ZERO; rows * pc];
                            for i in 0..rows {
                                for j in 0..pc {
                                    seg[i * pc + j] = gout[i * total_cols + col + j];
                                }
                            }
                            accumulate(&mut grads, p, seg);
                        }
                        col += pc;
                    }
                }
                OpKind::SliceRows { t, from } => {
                    if t.live() {
                        let cols = t.cols();
                        let mut dt = vec![E::ZERO; t.rows() * cols];
                        dt[from * cols..from * cols + gout.len()].copy_from_slice(&gout);
                        accumulate(&mut grads, t, dt);
                    }
                }
                OpKind::RepeatAdd { y, dy } => {
                    if y.live() {
                        accumulate(&mut grads, y, gout.clone());
                    }
                    if dy.live() {
                        let q = dy.rows();
                        let cols = dy.cols();
                        let mut dd = vec![E::ZERO; q * cols];
                        for (idx, &g) in gout.iter().enumerate() {
                            let i = idx / cols;
                            let c = idx % cols;
                            dd[(i % q) * cols + c] = dd[(i % q) * cols + c] + g;
                        }
                        accumulate(&mut grads, dy, dd);
                    }
                }
                OpKind::Add { a, b } => {
                    if a.live() {
                        accumulate(&mut grads, a, gout.clone());
                    }
                    if b.live() {
                        accumulate(&mut grads, b, gout.clone());
                    }
                }
                OpKind::Mul { a, b } => {
                    if a.live() {
                        let da = gout.iter().zip(b.data()).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut grads, a, da);
                    }
                    if b.live() {
                        let db = gout.iter().zip(a.data()).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut grads, b, db);
                    }
                }
                OpKind::Scale { t, factor } => {
                    if t.live() {
                        let dt = gout.iter().map(|&g| g * *factor).collect();
                        accumulate(&mut grads, t, dt);
                    }
                }
                OpKind::Relu { x } => {
                    if x.live() {
                        let dx = gout
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &v)| if v > E::ZERO { g } else { E::ZERO })
                            .collect();
                        accumulate(&mut grads, x, dx);
                    }
                }
                OpKind::Silu { x } => {
                    if x.live() {
                        let dx = gout
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &v)| {
                                let s = sigmoid(v);
                                g * (s + v * s * (E::ONE - s))
                            })
                            .collect();
                        accumulate(&mut grads, x, dx);
                    }
                }
                OpKind::SoftmaxCols { x } => {
                    if x.live() {
                        let (rows, cols) = x.shape();
                        let y = entry.out.data();
                        let mut dx = vec![E::ZERO; rows * cols];
                        for c in 0..cols {
                            let mut dot = E::ZERO;
                            for i in 0..rows {
                                dot = dot + gout[i * cols + c] * y[i * cols + c];
                            }
                            for i in 0..rows {
                                dx[i * cols + c] =
                                    y[i * cols + c] * (gout[i * cols + c] - dot);
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                OpKind::RmsNormCols { x, gain, inv_rms } => {
                    let (rows, cols) = x.shape();
                    let denom = E::from_f64(rows as f64);
                    if x.live() {
                        let mut dx = vec![E::ZERO; rows * cols];
                        for c in 0..cols {
                            let inv = inv_rms[c];
                            let mut s = E::ZERO;
                            for i in 0..rows {
                                s = s + gout[i * cols + c] * gain.data()[i] * x.get(i, c);
                            }
                            let coef = s * inv * inv * inv / denom;
                            for i in 0..rows {
                                dx[i * cols + c] =
                                    gain.data()[i] * gout[i * cols + c] * inv - x.get(i, c) * coef;
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                    if gain.live() {
                        let mut dg = vec![E::ZERO; rows];
                        for c in 0..cols {
                            let inv = inv_rms[c];
                            for i in 0..rows {
                                dg[i] = dg[i] + gout[i * cols + c] * x.get(i, c) * inv;
                            }
                        }
                        accumulate(&mut grads, gain, dg);
                    }
                }
                OpKind::Transpose { t } => {
                    if t.live() {
                        let (rows, cols) = t.shape();
                        // gout has shape cols x rows
                        let dt = transpose_raw(&gout, cols, rows);
                        accumulate(&mut grads, t, dt);
                    }
                }
                OpKind::Rope { x, head_dim, start_pos } => {
                    if x.live() {
                        let g = Tensor::from_vec(x.rows(), x.cols(), gout.clone())?;
                        let dx = rope_apply(&g, *head_dim, *start_pos, true);
                        accumulate(&mut grads, x, dx);
                    }
                }
                OpKind::EmbedCols { table, ids } => {
                    if table.live() {
                        let (d, vocab) = table.shape();
                        let cols = ids.len();
                        let mut dt = vec![E::ZERO; d * vocab];
                        for (c, &id) in ids.iter().enumerate() {
                            for i in 0..d {
                                let slot = i * vocab + id as usize;
                                dt[slot] = dt[slot] + gout[i * cols + c];
                            }
                        }
                        accumulate(&mut grads, table, dt);
                    }
                }
                OpKind::CrossEntropyCols { logits, targets, probs, n_valid } => {
                    if logits.live() {
                        let (vocab, cols) = logits.shape();
                        let g = gout[0] / E::from_f64(*n_valid as f64);
                        let mut dl = vec![E::ZERO; vocab * cols];
                        for (c, target) in targets.iter().enumerate() {
                            let Some(t) = target else { continue };
                            for i in 0..vocab {
                                let p = probs[i * cols + c];
                                let indicator =
                                    if i == *t as usize { E::ONE } else { E::ZERO };
                                dl[i * cols + c] = (p - indicator) * g;
                            }
                        }
                        accumulate(&mut grads, logits, dl);
                    }
                }
                OpKind::Sum { t } => {
                    if t.live() {
                        let dt = vec![gout[0]; t.len()];
                        accumulate(&mut grads, t, dt);
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for entry in &self.entries {
            collect_leaf_grads(&mut out, &grads, &entry.op);
        }
        Ok(out)
    }
}

/// Moves accumulated buffers into `Gradients` tensors for every distinct
/// input tensor of the tape (leaves and intermediates alike).
fn collect_leaf_grads<E: Element>(
    out: &mut Gradients<E>,
    grads: &HashMap<TensorId, Vec<E>>,
    op: &OpKind<E>,
) {
    let mut put = |t: &Tensor<E>| {
        if let Some(buf) = grads.get(&t.id()) {
            out.by_id
                .entry(t.id())
                .or_insert_with(|| {
                    Tensor::from_vec(t.rows(), t.cols(), buf.clone()).expect("grad shape")
                });
        }
    };
    match op {
        OpKind::Matmul { a, b } | OpKind::Add { a, b } | OpKind::Mul { a, b } => {
            put(a);
            put(b);
        }
        OpKind::ConcatRows { parts } | OpKind::ConcatCols { parts } => {
            for p in parts {
                put(p);
            }
        }
        OpKind::SliceRows { t, .. }
        | OpKind::Scale { t, .. }
        | OpKind::Transpose { t }
        | OpKind::Sum { t } => put(t),
        OpKind::RepeatAdd { y, dy } => {
            put(y);
            put(dy);
        }
        OpKind::Relu { x } | OpKind::Silu { x } | OpKind::SoftmaxCols { x } => put(x),
        OpKind::RmsNormCols { x, gain, .. } => {
            put(x);
            put(gain);
        }
        OpKind::Rope { x, .. } => put(x),
        OpKind::EmbedCols { table, .. } => put(table),
        OpKind::CrossEntropyCols { logits, .. } => put(logits),
    }
}

fn accumulate<E: Element>(grads: &mut HashMap<TensorId, Vec<E>>, t: &Tensor<E>, delta: Vec<E>) {
    debug_assert_eq!(delta.len(), t.len());
    match grads.get_mut(&t.id()) {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b = *b + d;
            }
        }
        None => {
            grads.insert(t.id(), delta);
        }
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::ONE / (E::ONE + (-v).exp())
}

/// Row-major matmul kernel. Every output element accumulates over the
/// inner index in strictly ascending order — the fusion bit-exactness
/// invariants rely on that — so vectorization happens across output
/// elements, never inside one dot product.
fn matmul_raw<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize) -> Vec<E> {
    if n == 1 {
        return matvec_raw(a, m, k, b);
    }
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Matrix-vector product (the decode path). Blocks of 8 rows run as 8
/// independent accumulation chains; each chain is still a plain ascending
/// dot product, bit-identical to the reference triple loop.
fn matvec_raw<E: Element>(a: &[E], m: usize, k: usize, b: &[E]) -> Vec<E> {
    const ROWS: usize = 8;
    let mut out = vec![E::ZERO; m];
    let mut chunks = a.chunks_exact(ROWS * k);
    let mut i = 0;
    for block in chunks.by_ref() {
        let mut acc = [E::ZERO; ROWS];
        for (p, &bv) in b.iter().enumerate() {
            for (r, slot) in acc.iter_mut().enumerate() {
                *slot = *slot + block[r * k + p] * bv;
            }
        }
        out[i..i + ROWS].copy_from_slice(&acc);
        i += ROWS;
    }
    for row in chunks.remainder().chunks_exact(k) {
        let mut acc = E::ZERO;
        for (&av, &bv) in row.iter().zip(b) {
            acc = acc + av * bv;
        }
        out[i] = acc;
        i += 1;
    }
    out
}

fn transpose_raw<E: Element>(t: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = t[i * cols + j];
        }
    }
    out
}

/// Applies (or inverts, for the gradient) the rotary embedding. Angles are
/// computed in f64 and cast to the element type, so both precisions see the
/// same rotation constants.
fn rope_apply<E: Element>(x: &Tensor<E>, head_dim: usize, start_pos: usize, invert: bool) -> Vec<E> {
    let (rows, cols) = x.shape();
    let mut out = vec![E::ZERO; rows * cols];
    let half = head_dim / 2;
    for c in 0..cols {
        let pos = (start_pos + c) as f64;
        for block in 0..rows / head_dim {
            for k in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * k as f64 / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let (sin, cos) = (E::from_f64(sin), E::from_f64(cos));
                let sin = if invert { -sin } else { sin };
                let r0 = block * head_dim + 2 * k;
                let r1 = r0 + 1;
                let v0 = x.get(r0, c);
                let v1 = x.get(r1, c);
                out[r0 * cols + c] = v0 * cos - v1 * sin;
                out[r1 * cols + c] = v0 * sin + v1 * cos;
            }
        }
    }
    out
}
