//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Values are computed eagerly into an arena; when recording is enabled each
//! operation is also pushed onto the tape so `backward` can replay it in
//! reverse. Inference reuses the exact same code path with recording turned
//! off, so trained and traced forward passes are bit-identical by
//! construction.
//!
//! One tape = one forward/backward pair, single-threaded. Independent tapes
//! own all their state and may run on separate threads.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value in the tape arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    param: bool,
}

enum Op {
    /// `out = a @ b`
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    /// `out = a @ b^T`
    MatmulNt { a: ValueId, b: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    /// Row-broadcast bias add: `[r x c] + [c]`.
    AddBias { x: ValueId, bias: ValueId, out: ValueId },
    Scale { x: ValueId, c: f64, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Tanh { x: ValueId, out: ValueId },
    Sigmoid { x: ValueId, out: ValueId },
    SoftmaxRows { x: ValueId, out: ValueId },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64, out: ValueId },
    /// Row gather from an embedding table.
    Embed { table: ValueId, indices: Vec<usize>, out: ValueId },
    SliceRows { x: ValueId, start: usize, out: ValueId },
    SliceCols { x: ValueId, start: usize, out: ValueId },
    ConcatCols { xs: Vec<ValueId>, out: ValueId },
    MeanRows { x: ValueId, out: ValueId },
    /// Zero all entries except `kept`; survivors pass through unscaled.
    TopTMask { x: ValueId, kept: Vec<usize>, out: ValueId },
    /// Divide surviving entries by their sum.
    RenormalizeKept { x: ValueId, kept: Vec<usize>, out: ValueId },
    /// `out = coeff[index] * x`
    ScaleByElement { x: ValueId, coeff: ValueId, index: usize, out: ValueId },
    /// Mean over rows of `-log softmax(row)[target]`, log-sum-exp stabilized.
    CrossEntropyMean { logits: ValueId, targets: Vec<usize>, out: ValueId },
    /// `sqrt(mean((pred - target)^2))` with constant targets.
    Rmse { pred: ValueId, targets: Vec<f64>, out: ValueId },
    /// Weighted sum of scalars.
    AddScalars { terms: Vec<(ValueId, f64)>, out: ValueId },
    /// Squared coefficient of variation of a vector.
    CvSquared { x: ValueId, out: ValueId },
}

/// Execution arena plus (optionally) the recorded op sequence.
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    recording: bool,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    /// A tape that records operations for a later `backward`.
    pub fn recording() -> Self {
        Tape {
            slots: Vec::new(),
            ops: Vec::new(),
            recording: true,
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// An inference-only tape: same arithmetic, nothing recorded.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::recording()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn alloc(&mut self, shape: Vec<usize>, data: Vec<f64>, param: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ValueId(self.slots.len());
        self.slots.push(Slot { shape, data, param });
        self.grads.push(None);
        id
    }

    fn push(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    /// Register a constant (non-differentiable) tensor.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.alloc(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Copy a value into a fresh constant slot, cutting the gradient path.
    pub fn detach(&mut self, id: ValueId) -> ValueId {
        let shape = self.slots[id.0].shape.clone();
        let data = self.slots[id.0].data.clone();
        self.alloc(shape, data, false)
    }

    /// Register a parameter; its gradient is retrievable after `backward`.
    pub fn param(&mut self, t: &Tensor) -> ValueId {
        self.alloc(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.slots[id.0].data[0]
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor::from_vec(self.slots[id.0].shape.clone(), self.slots[id.0].data.clone())
            .expect("slot shape is consistent")
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Whether `id` was registered as a parameter.
    pub fn is_param(&self, id: ValueId) -> bool {
        self.slots[id.0].param
    }

    fn rows(&self, id: ValueId) -> usize {
        let s = &self.slots[id.0].shape;
        if s.len() == 2 {
            s[0]
        } else {
            1
        }
    }

    fn cols(&self, id: ValueId) -> usize {
        let s = &self.slots[id.0].shape;
        match s.len() {
            2 => s[1],
            1 => s[0],
            _ => self.slots[id.0].data.len(),
        }
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        Ok(())
    }

    // ── value-producing operations ───────────────────────────────────

    /// Standard matrix product `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (m, ka) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: lhs {}x{} incompatible with rhs {}x{}",
                m, ka, kb, n
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.slots[a.0].data;
            let bv = &self.slots[b.0].data;
            for i in 0..m {
                let arow = &av[i * ka..(i + 1) * ka];
                let orow = &mut out[i * n..(i + 1) * n];
                for (k, &aik) in arow.iter().enumerate() {
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    for (o, &bkj) in orow.iter_mut().zip(brow) {
                        *o += aik * bkj;
                    }
                }
            }
        }
        let id = self.alloc(vec![m, n], out, false);
        self.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    /// `[m x k] @ [n x k]^T -> [m x n]`.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (m, ka) = (self.rows(a), self.cols(a));
        let (n, kb) = (self.rows(b), self.cols(b));
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul_nt: lhs {}x{} incompatible with rhs {}x{} transposed",
                m, ka, n, kb
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.slots[a.0].data;
            let bv = &self.slots[b.0].data;
            for i in 0..m {
                let arow = &av[i * ka..(i + 1) * ka];
                for j in 0..n {
                    let brow = &bv[j * kb..(j + 1) * kb];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let id = self.alloc(vec![m, n], out, false);
        self.push(Op::MatmulNt { a, b, out: id });
        Ok(id)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open()?;
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(Error::shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.slots[a.0].shape, self.slots[b.0].shape
            )));
        }
        let data: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.slots[a.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    /// Add a rank-1 bias to every row of a matrix.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if self.slots[bias.0].data.len() != c {
            return Err(Error::shape(format!(
                "add_bias: bias length {} does not match {} columns",
                self.slots[bias.0].data.len(),
                c
            )));
        }
        let mut data = self.slots[x.0].data.clone();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(&self.slots[bias.0].data) {
                *d += b;
            }
        }
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::AddBias { x, bias, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_open()?;
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::Scale { x, c, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open()?;
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(Error::shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.slots[a.0].shape, self.slots[b.0].shape
            )));
        }
        let data: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.slots[a.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::Tanh { x, out: id });
        Ok(id)
    }

    /// Elementwise logistic function, saturation-safe at large |x|.
    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::Sigmoid { x, out: id });
        Ok(id)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if c == 0 {
            return Err(Error::shape("softmax: empty axis"));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.slots[x.0].data[i * c..(i + 1) * c];
            softmax_into(row, &mut data[i * c..(i + 1) * c]);
        }
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::SoftmaxRows { x, out: id });
        Ok(id)
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if self.slots[gamma.0].data.len() != c || self.slots[beta.0].data.len() != c {
            return Err(Error::shape(format!(
                "layer_norm: gain/shift length must be {}",
                c
            )));
        }
        let eps = 1e-5;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.slots[x.0].data[i * c..(i + 1) * c];
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * rstd * self.slots[gamma.0].data[j]
                    + self.slots[beta.0].data[j];
            }
        }
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::LayerNorm { x, gamma, beta, eps, out: id });
        Ok(id)
    }

    /// Gather rows of an embedding table: `out[t] = table[indices[t]]`.
    pub fn embed(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        self.check_open()?;
        let (v, e) = (self.rows(table), self.cols(table));
        let mut data = Vec::with_capacity(indices.len() * e);
        for &idx in indices {
            if idx >= v {
                return Err(Error::Index(format!(
                    "embedding index {} out of range for table with {} rows",
                    idx, v
                )));
            }
            data.extend_from_slice(&self.slots[table.0].data[idx * e..(idx + 1) * e]);
        }
        let id = self.alloc(vec![indices.len(), e], data, false);
        self.push(Op::Embed { table, indices: indices.to_vec(), out: id });
        Ok(id)
    }

    /// First `rows` rows starting at `start`.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, rows: usize) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if start + rows > r {
            return Err(Error::shape(format!(
                "slice_rows: {}..{} out of {} rows",
                start,
                start + rows,
                r
            )));
        }
        let data = self.slots[x.0].data[start * c..(start + rows) * c].to_vec();
        let id = self.alloc(vec![rows, c], data, false);
        self.push(Op::SliceRows { x, start, out: id });
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, cols: usize) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if start + cols > c {
            return Err(Error::shape(format!(
                "slice_cols: {}..{} out of {} columns",
                start,
                start + cols,
                c
            )));
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend_from_slice(&self.slots[x.0].data[i * c + start..i * c + start + cols]);
        }
        let id = self.alloc(vec![r, cols], data, false);
        self.push(Op::SliceCols { x, start, out: id });
        Ok(id)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        self.check_open()?;
        if xs.is_empty() {
            return Err(Error::shape("concat_cols: no inputs"));
        }
        let r = self.rows(xs[0]);
        for &x in xs {
            if self.rows(x) != r {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
        }
        let total: usize = xs.iter().map(|&x| self.cols(x)).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.cols(x);
                data.extend_from_slice(&self.slots[x.0].data[i * c..(i + 1) * c]);
            }
        }
        let id = self.alloc(vec![r, total], data, false);
        self.push(Op::ConcatCols { xs: xs.to_vec(), out: id });
        Ok(id)
    }

    /// Mean over rows: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(x), self.cols(x));
        if r == 0 {
            return Err(Error::shape("mean_rows: zero rows"));
        }
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.slots[x.0].data[i * c + j];
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let id = self.alloc(vec![1, c], data, false);
        self.push(Op::MeanRows { x, out: id });
        Ok(id)
    }

    /// Keep the `t` largest entries of a vector, zero the rest.
    ///
    /// Ties break toward the lower index. Returns the masked value and the
    /// kept indices in ascending order. Gradient flows only through
    /// survivors; the selection itself is treated as constant.
    pub fn top_t_mask(&mut self, x: ValueId, t: usize) -> Result<(ValueId, Vec<usize>)> {
        self.check_open()?;
        let n = self.slots[x.0].data.len();
        if t < 1 || t > n {
            return Err(Error::config(format!(
                "top-t budget {} outside [1, {}]",
                t, n
            )));
        }
        let kept = top_t_indices(&self.slots[x.0].data, t);
        let mut data = vec![0.0; n];
        for &i in &kept {
            data[i] = self.slots[x.0].data[i];
        }
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::TopTMask { x, kept: kept.clone(), out: id });
        Ok((id, kept))
    }

    /// Divide the surviving entries of a masked vector by their sum.
    pub fn renormalize_kept(&mut self, x: ValueId, kept: &[usize]) -> Result<ValueId> {
        self.check_open()?;
        let sum: f64 = kept.iter().map(|&i| self.slots[x.0].data[i]).sum();
        if sum <= 0.0 {
            return Err(Error::Numeric("renormalize: non-positive gate sum".into()));
        }
        let mut data = self.slots[x.0].data.clone();
        for &i in kept {
            data[i] /= sum;
        }
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::RenormalizeKept { x, kept: kept.to_vec(), out: id });
        Ok(id)
    }

    /// Scale a whole tensor by a single element of another tensor.
    pub fn scale_by_element(&mut self, x: ValueId, coeff: ValueId, index: usize) -> Result<ValueId> {
        self.check_open()?;
        if index >= self.slots[coeff.0].data.len() {
            return Err(Error::Index(format!(
                "scale_by_element: index {} out of range",
                index
            )));
        }
        let g = self.slots[coeff.0].data[index];
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v * g).collect();
        let shape = self.slots[x.0].shape.clone();
        let id = self.alloc(shape, data, false);
        self.push(Op::ScaleByElement { x, coeff, index, out: id });
        Ok(id)
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy_mean(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        self.check_open()?;
        let (r, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != r {
            return Err(Error::contract(format!(
                "cross_entropy: {} logit rows but {} targets",
                r,
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index(format!(
                    "cross_entropy: target {} out of range for {} classes",
                    t, c
                )));
            }
            let row = &self.slots[logits.0].data[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let id = self.alloc(vec![1], vec![total / r as f64], false);
        self.push(Op::CrossEntropyMean { logits, targets: targets.to_vec(), out: id });
        Ok(id)
    }

    /// Root-mean-squared error of predictions against constant targets.
    pub fn rmse(&mut self, pred: ValueId, targets: &[f64]) -> Result<ValueId> {
        self.check_open()?;
        let n = self.slots[pred.0].data.len();
        if n != targets.len() || n == 0 {
            return Err(Error::shape(format!(
                "rmse: {} predictions vs {} targets",
                n,
                targets.len()
            )));
        }
        let mse: f64 = self.slots[pred.0]
            .data
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let id = self.alloc(vec![1], vec![mse.sqrt()], false);
        self.push(Op::Rmse { pred, targets: targets.to_vec(), out: id });
        Ok(id)
    }

    /// Weighted sum of scalar values.
    pub fn add_scalars(&mut self, terms: &[(ValueId, f64)]) -> Result<ValueId> {
        self.check_open()?;
        let mut total = 0.0;
        for &(id, w) in terms {
            if self.slots[id.0].data.len() != 1 {
                return Err(Error::contract("add_scalars: non-scalar term"));
            }
            total += w * self.slots[id.0].data[0];
        }
        let id = self.alloc(vec![1], vec![total], false);
        self.push(Op::AddScalars { terms: terms.to_vec(), out: id });
        Ok(id)
    }

    /// Squared coefficient of variation: `var(x) / mean(x)^2`.
    ///
    /// Zero iff all entries are equal; returns 0 with zero gradient for an
    /// all-zero input rather than dividing by zero.
    pub fn cv_squared(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open()?;
        let v = &self.slots[x.0].data;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let out = if mean == 0.0 {
            0.0
        } else {
            let var = v.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
            var / (mean * mean)
        };
        let id = self.alloc(vec![1], vec![out], false);
        self.push(Op::CvSquared { x, out: id });
        Ok(id)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every reachable value with respect to `loss`.
    ///
    /// The tape is consumed: no further ops or backward calls are accepted.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.recording {
            return Err(Error::contract("backward on a non-recording tape"));
        }
        self.check_open()?;
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.slots[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            // Ops are split out of self to satisfy the borrow checker; each
            // op reads slot values and writes grads.
            let op = &self.ops[idx];
            let out = op_output(op);
            if self.grads[out.0].is_none() {
                continue;
            }
            self.apply_backward(idx);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: ValueId) -> &mut Vec<f64> {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; self.slots[id.0].data.len()]);
        }
        self.grads[id.0].as_mut().unwrap()
    }

    fn apply_backward(&mut self, op_idx: usize) {
        // take the op out to appease the borrow checker, put it back after
        let op = std::mem::replace(&mut self.ops[op_idx], Op::AddScalars { terms: Vec::new(), out: ValueId(0) });
        match &op {
            Op::Matmul { a, b, out } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                let dout = self.grads[out.0].clone().unwrap();
                let av = self.slots[a.0].data.clone();
                let bv = self.slots[b.0].data.clone();
                {
                    let da = self.grad_buf(*a);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dout[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                {
                    let db = self.grad_buf(*b);
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + kk] * dout[i * n + j];
                            }
                            db[kk * n + j] += acc;
                        }
                    }
                }
            }
            Op::MatmulNt { a, b, out } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                let dout = self.grads[out.0].clone().unwrap();
                let av = self.slots[a.0].data.clone();
                let bv = self.slots[b.0].data.clone();
                {
                    let da = self.grad_buf(*a);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dout[i * n + j] * bv[j * k + kk];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                {
                    let db = self.grad_buf(*b);
                    for j in 0..n {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += dout[i * n + j] * av[i * k + kk];
                            }
                            db[j * k + kk] += acc;
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                accumulate(self.grad_buf(*a), &dout, 1.0);
                accumulate(self.grad_buf(*b), &dout, 1.0);
            }
            Op::AddBias { x, bias, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let c = self.cols(*x);
                accumulate(self.grad_buf(*x), &dout, 1.0);
                let db = self.grad_buf(*bias);
                for (i, d) in dout.iter().enumerate() {
                    db[i % c] += d;
                }
            }
            Op::Scale { x, c, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                accumulate(self.grad_buf(*x), &dout, *c);
            }
            Op::Mul { a, b, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let av = self.slots[a.0].data.clone();
                let bv = self.slots[b.0].data.clone();
                {
                    let da = self.grad_buf(*a);
                    for i in 0..dout.len() {
                        da[i] += bv[i] * dout[i];
                    }
                }
                let db = self.grad_buf(*b);
                for i in 0..dout.len() {
                    db[i] += av[i] * dout[i];
                }
            }
            Op::Tanh { x, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let y = self.slots[out.0].data.clone();
                let dx = self.grad_buf(*x);
                for i in 0..dout.len() {
                    dx[i] += (1.0 - y[i] * y[i]) * dout[i];
                }
            }
            Op::Sigmoid { x, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let y = self.slots[out.0].data.clone();
                let dx = self.grad_buf(*x);
                for i in 0..dout.len() {
                    dx[i] += y[i] * (1.0 - y[i]) * dout[i];
                }
            }
            Op::SoftmaxRows { x, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let y = self.slots[out.0].data.clone();
                let (r, c) = (self.rows(*x), self.cols(*x));
                let dx = self.grad_buf(*x);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| dout[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        dx[i * c + j] += y[i * c + j] * (dout[i * c + j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let xv = self.slots[x.0].data.clone();
                let gv = self.slots[gamma.0].data.clone();
                let (r, c) = (self.rows(*x), self.cols(*x));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                {
                    let dx = self.grad_buf(*x);
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let (mean, rstd) = row_moments(row, *eps);
                        // g = dout * gamma; dx = rstd*(g - mean(g) - xhat*mean(g*xhat))
                        let mut g_mean = 0.0;
                        let mut gx_mean = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let g = dout[i * c + j] * gv[j];
                            g_mean += g;
                            gx_mean += g * xhat;
                            dgamma[j] += dout[i * c + j] * xhat;
                            dbeta[j] += dout[i * c + j];
                        }
                        g_mean /= c as f64;
                        gx_mean /= c as f64;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let g = dout[i * c + j] * gv[j];
                            dx[i * c + j] += rstd * (g - g_mean - xhat * gx_mean);
                        }
                    }
                }
                accumulate(self.grad_buf(*gamma), &dgamma, 1.0);
                accumulate(self.grad_buf(*beta), &dbeta, 1.0);
            }
            Op::Embed { table, indices, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let e = self.cols(*table);
                let dt = self.grad_buf(*table);
                for (t, &idx) in indices.iter().enumerate() {
                    for j in 0..e {
                        dt[idx * e + j] += dout[t * e + j];
                    }
                }
            }
            Op::SliceRows { x, start, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let c = self.cols(*x);
                let dx = self.grad_buf(*x);
                for (i, d) in dout.iter().enumerate() {
                    dx[start * c + i] += d;
                }
            }
            Op::SliceCols { x, start, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let c = self.cols(*x);
                let oc = self.cols(*out);
                let r = self.rows(*out);
                let dx = self.grad_buf(*x);
                for i in 0..r {
                    for j in 0..oc {
                        dx[i * c + start + j] += dout[i * oc + j];
                    }
                }
            }
            Op::ConcatCols { xs, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let total = self.cols(*out);
                let r = self.rows(*out);
                let mut offset = 0;
                for &x in xs {
                    let c = self.cols(x);
                    let dx = self.grad_buf(x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dout[i * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::MeanRows { x, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let (r, c) = (self.rows(*x), self.cols(*x));
                let dx = self.grad_buf(*x);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += dout[j] / r as f64;
                    }
                }
            }
            Op::TopTMask { x, kept, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let dx = self.grad_buf(*x);
                for &i in kept {
                    dx[i] += dout[i];
                }
            }
            Op::RenormalizeKept { x, kept, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let xv = self.slots[x.0].data.clone();
                let sum: f64 = kept.iter().map(|&i| xv[i]).sum();
                let dot: f64 = kept.iter().map(|&i| dout[i] * xv[i]).sum();
                let dx = self.grad_buf(*x);
                for &i in kept {
                    dx[i] += dout[i] / sum - dot / (sum * sum);
                }
            }
            Op::ScaleByElement { x, coeff, index, out } => {
                let dout = self.grads[out.0].clone().unwrap();
                let g = self.slots[coeff.0].data[*index];
                let xv = self.slots[x.0].data.clone();
                accumulate(self.grad_buf(*x), &dout, g);
                let dc = self.grad_buf(*coeff);
                dc[*index] += xv.iter().zip(&dout).map(|(v, d)| v * d).sum::<f64>();
            }
            Op::CrossEntropyMean { logits, targets, out } => {
                let dout = self.grads[out.0].clone().unwrap()[0];
                let (r, c) = (self.rows(*logits), self.cols(*logits));
                let lv = self.slots[logits.0].data.clone();
                let dl = self.grad_buf(*logits);
                let scale = dout / r as f64;
                let mut probs = vec![0.0; c];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_into(&lv[i * c..(i + 1) * c], &mut probs);
                    for j in 0..c {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        dl[i * c + j] += scale * (probs[j] - indicator);
                    }
                }
            }
            Op::Rmse { pred, targets, out } => {
                let dout = self.grads[out.0].clone().unwrap()[0];
                let y = self.slots[out.0].data[0];
                let n = targets.len() as f64;
                let pv = self.slots[pred.0].data.clone();
                let dp = self.grad_buf(*pred);
                // d sqrt(mse)/dp_i = (p_i - t_i) / (n * rmse); guard rmse = 0
                let denom = n * (y + 1e-12);
                for i in 0..targets.len() {
                    dp[i] += dout * (pv[i] - targets[i]) / denom;
                }
            }
            Op::AddScalars { terms, out } => {
                let dout = self.grads[out.0].clone().unwrap()[0];
                for &(id, w) in terms {
                    self.grad_buf(id)[0] += w * dout;
                }
            }
            Op::CvSquared { x, out } => {
                let dout = self.grads[out.0].clone().unwrap()[0];
                let xv = self.slots[x.0].data.clone();
                let n = xv.len() as f64;
                let mean = xv.iter().sum::<f64>() / n;
                if mean != 0.0 {
                    let var = xv.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
                    let dx = self.grad_buf(*x);
                    for i in 0..xv.len() {
                        dx[i] += dout * (2.0 / (n * mean * mean)) * ((xv[i] - mean) - var / mean);
                    }
                }
            }
        }
        self.ops[op_idx] = op;
    }
}

fn op_output(op: &Op) -> ValueId {
    match op {
        Op::Matmul { out, .. }
        | Op::MatmulNt { out, .. }
        | Op::Add { out, .. }
        | Op::AddBias { out, .. }
        | Op::Scale { out, .. }
        | Op::Mul { out, .. }
        | Op::Tanh { out, .. }
        | Op::Sigmoid { out, .. }
        | Op::SoftmaxRows { out, .. }
        | Op::LayerNorm { out, .. }
        | Op::Embed { out, .. }
        | Op::SliceRows { out, .. }
        | Op::SliceCols { out, .. }
        | Op::ConcatCols { out, .. }
        | Op::MeanRows { out, .. }
        | Op::TopTMask { out, .. }
        | Op::RenormalizeKept { out, .. }
        | Op::ScaleByElement { out, .. }
        | Op::CrossEntropyMean { out, .. }
        | Op::Rmse { out, .. }
        | Op::AddScalars { out, .. }
        | Op::CvSquared { out, .. } => *out,
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Numerically stable elementwise logistic.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax into a preallocated buffer.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Indices of the `t` largest values, ties broken toward the lower index.
/// Returned in ascending index order.
pub fn top_t_indices(values: &[f64], t: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..t].to_vec();
    kept.sort_unstable();
    kept
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
