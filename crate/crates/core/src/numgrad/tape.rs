//! The recording tape: forward ops append nodes, backward walks them once
//! in reverse.
//!
//! Inputs of an op always sit at lower indices than its output, so reverse
//! insertion order is a valid reverse topological order. Gradients are
//! accumulated for leaf tensors marked `requires_grad`; intermediate
//! gradients are dropped as soon as they have been propagated.

use rand::Rng;

use super::{NumgradError, Result, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    MeanRows { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    StackRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, width: usize },
    ConcatCols { parts: Vec<Var> },
    SumAll { x: Var },
    MeanAll { x: Var },
    LogisticLoss { delta: Var, target: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient for `v`, present when `v` is a leaf built from a tensor
    /// with `requires_grad` that the loss actually depends on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient for `v` out, leaving `None` behind.
    pub(crate) fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only record of a forward pass.
///
/// A tape is single-use: after [`Tape::backward`] it refuses further ops.
/// Record a fresh tape for every forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value computed at `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn check_live(&self) -> Result<()> {
        if self.spent {
            Err(NumgradError::TapeSpent)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input tensor. Gradients flow to it iff the tensor was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.check_live()?;
        let needs = t.requires_grad();
        Ok(self.push(Op::Leaf, t, needs))
    }

    /// Registers an input tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(Op::Leaf, t, false))
    }

    /// Matrix product of rank-2 tensors: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(NumgradError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = mm_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Matmul { a, b },
            Tensor::new_unchecked(vec![m, n], out),
            needs,
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2("transpose")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::Transpose { x },
            Tensor::new_unchecked(vec![n, m], out),
            needs,
        ))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        self.check_live()?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumgradError::ShapeMismatch {
                op: op_name,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new_unchecked(shape, out), needs))
    }

    /// Elementwise difference `a - b` of tensors of identical shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new_unchecked(shape, out), needs))
    }

    /// Hadamard product of tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new_unchecked(shape, out), needs))
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    /// `row` may be shaped `[n]` or `[1, n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2("add_row")?;
        let rlen = self.value(row).numel();
        let row_ok = matches!(self.value(row).shape(), [c] if *c == n)
            || matches!(self.value(row).shape(), [1, c] if *c == n);
        if !row_ok {
            return Err(NumgradError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: self.value(row).shape().to_vec(),
            });
        }
        debug_assert_eq!(rlen, n);
        let xd = self.value(x).data();
        let rd = self.value(row).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + rd[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(
            Op::AddRow { x, row },
            Tensor::new_unchecked(vec![m, n], out),
            needs,
        ))
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        if !c.is_finite() {
            return Err(NumgradError::Invalid {
                op: "scale",
                msg: format!("factor must be finite, got {c}"),
            });
        }
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, c }, Tensor::new_unchecked(shape, out), needs))
    }

    /// Elementwise `max(x, 0)`. The subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Relu { x }, Tensor::new_unchecked(shape, out), needs))
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor, computed with the
    /// usual max-subtraction so large inputs cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() > 2 || axis >= shape.len() {
            return Err(NumgradError::AxisOutOfBounds {
                op: "softmax",
                axis,
                shape,
            });
        }
        let out = lanes_map(self.value(x).data(), &shape, axis, softmax_lane);
        let needs = self.needs(x);
        Ok(self.push(
            Op::Softmax { x, axis },
            Tensor::new_unchecked(shape, out),
            needs,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    ///
    /// Each length-`d` lane is standardized with its mean and population
    /// variance, then scaled and shifted: `y = gain * xhat + bias`. `gain`
    /// and `bias` must have `d` elements (`[d]` or `[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_live()?;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(NumgradError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive and finite, got {eps}"),
            });
        }
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or(NumgradError::Empty {
            op: "layer_norm",
            what: "input",
        })?;
        for (what, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).numel() != d {
                return Err(NumgradError::ShapeMismatch {
                    op: if what == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: shape.clone(),
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xd.len()];
        for (lane_out, lane_in) in out.chunks_mut(d).zip(xd.chunks(d)) {
            let (mu, inv) = lane_moments(lane_in, eps);
            for j in 0..d {
                lane_out[j] = g[j] * ((lane_in[j] - mu) * inv) + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, eps },
            Tensor::new_unchecked(shape, out),
            needs,
        ))
    }

    /// Training-time dropout: each element is zeroed with probability `p`
    /// and survivors are scaled by `1/(1-p)`, so the expectation is the
    /// identity. Inference simply skips this op. `p = 0` is a no-op.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        self.check_live()?;
        if !(0.0..1.0).contains(&p) {
            return Err(NumgradError::Invalid {
                op: "dropout",
                msg: format!("probability must be in [0, 1), got {p}"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Op::Dropout { x, mask },
            Tensor::new_unchecked(shape, out),
            needs,
        ))
    }

    /// Column means of an `[n, d]` matrix as a `[1, d]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.value(x).dims2("mean_rows")?;
        if n == 0 {
            return Err(NumgradError::Empty {
                op: "mean_rows",
                what: "rows",
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in xd.chunks(d) {
            for j in 0..d {
                out[j] += row[j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::MeanRows { x },
            Tensor::new_unchecked(vec![1, d], out),
            needs,
        ))
    }

    /// Selects rows of an `[n, d]` matrix by index, in the given order.
    /// Indices may repeat; gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.value(x).dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(NumgradError::Empty {
                op: "gather_rows",
                what: "indices",
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumgradError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of bounds for {n} rows"),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new_unchecked(vec![idx.len(), d], out),
            needs,
        ))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(NumgradError::Empty {
                op: "stack_rows",
                what: "parts",
            });
        }
        let (_, d) = self.value(parts[0]).dims2("stack_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("stack_rows")?;
            if c != d {
                return Err(NumgradError::ShapeMismatch {
                    op: "stack_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            Tensor::new_unchecked(vec![rows, d], out),
            needs,
        ))
    }

    /// Contiguous column slice `[start, start + width)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.value(x).dims2("slice_cols")?;
        if width == 0 || start + width > d {
            return Err(NumgradError::Invalid {
                op: "slice_cols",
                msg: format!("columns [{start}, {}) out of bounds for width {d}", start + width),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&xd[i * d + start..i * d + start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::SliceCols { x, start, width },
            Tensor::new_unchecked(vec![n, width], out),
            needs,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(NumgradError::Empty {
                op: "concat_cols",
                what: "parts",
            });
        }
        let (n, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(NumgradError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new_unchecked(vec![n, total], out),
            needs,
        ))
    }

    /// Sum of all elements as a `[1, 1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(
            Op::SumAll { x },
            Tensor::new_unchecked(vec![1, 1], vec![s]),
            needs,
        ))
    }

    /// Mean of all elements as a `[1, 1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let n = self.value(x).numel();
        if n == 0 {
            return Err(NumgradError::Empty {
                op: "mean_all",
                what: "input",
            });
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        Ok(self.push(
            Op::MeanAll { x },
            Tensor::new_unchecked(vec![1, 1], vec![s]),
            needs,
        ))
    }

    /// Cross-entropy between a soft target `y` and `sigmoid(delta)` for a
    /// scalar `delta`: `y * softplus(-delta) + (1 - y) * softplus(delta)`.
    ///
    /// Evaluated in softplus form, which never overflows and never takes
    /// `ln` of a rounded-to-zero sigmoid, so it stays accurate for |delta|
    /// in the thousands. The gradient is `sigmoid(delta) - y`.
    pub fn logistic_loss(&mut self, delta: Var, target: f64) -> Result<Var> {
        self.check_live()?;
        if self.value(delta).numel() != 1 {
            return Err(NumgradError::NotScalar {
                shape: self.value(delta).shape().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(NumgradError::Invalid {
                op: "logistic_loss",
                msg: format!("target must be in [0, 1], got {target}"),
            });
        }
        let d = self.value(delta).item();
        let loss = target * softplus(-d) + (1.0 - target) * softplus(d);
        let needs = self.needs(delta);
        Ok(self.push(
            Op::LogisticLoss { delta, target },
            Tensor::new_unchecked(vec![1, 1], vec![loss]),
            needs,
        ))
    }

    /// Backpropagates from a scalar `root`, consuming the tape. Returns the
    /// gradient of `root` with respect to every `requires_grad` leaf it
    /// depends on. A second call fails with [`NumgradError::TapeSpent`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    /// Backpropagates `seed * d(root)` instead of `d(root)`; used when a
    /// scalar loss living outside this tape has a known sensitivity to
    /// `root`.
    pub(crate) fn backward_seeded(&mut self, root: Var, seed: f64) -> Result<Gradients> {
        self.check_live()?;
        if self.value(root).numel() != 1 {
            return Err(NumgradError::NotScalar {
                shape: self.value(root).shape().to_vec(),
            });
        }
        self.spent = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![seed]);

        for idx in (0..=root.0).rev() {
            if !nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(nodes[idx].op, Op::Leaf) {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            propagate(nodes, &mut grads, idx, &dy);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new_unchecked(nodes[i].value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds `dy` routed through the op at `idx` into the gradients of its
/// inputs. `nodes` is immutable here; only `grads` is written.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, dy: &[f64]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let mut add_to = |v: Var, contrib: &dyn Fn(&mut [f64])| {
        if !nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
        contrib(slot);
    };

    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = val(*a).dims2("matmul").unwrap();
            let (_, n) = val(*b).dims2("matmul").unwrap();
            let da = mm_nt(dy, val(*b).data(), m, n, k);
            let db = mm_tn(val(*a).data(), dy, m, k, n);
            add_to(*a, &|g| axpy(g, &da));
            add_to(*b, &|g| axpy(g, &db));
        }
        Op::Transpose { x } => {
            let (m, n) = val(*x).dims2("transpose").unwrap();
            add_to(*x, &|g| {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += dy[j * m + i];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            add_to(*a, &|g| axpy(g, dy));
            add_to(*b, &|g| axpy(g, dy));
        }
        Op::Sub { a, b } => {
            add_to(*a, &|g| axpy(g, dy));
            add_to(*b, &|g| {
                for (gi, di) in g.iter_mut().zip(dy) {
                    *gi -= di;
                }
            });
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            add_to(*a, &|g| {
                for ((gi, di), bi) in g.iter_mut().zip(dy).zip(bd) {
                    *gi += di * bi;
                }
            });
            add_to(*b, &|g| {
                for ((gi, di), ai) in g.iter_mut().zip(dy).zip(ad) {
                    *gi += di * ai;
                }
            });
        }
        Op::AddRow { x, row } => {
            let (m, n) = val(*x).dims2("add_row").unwrap();
            add_to(*x, &|g| axpy(g, dy));
            add_to(*row, &|g| {
                for i in 0..m {
                    for j in 0..n {
                        g[j] += dy[i * n + j];
                    }
                }
            });
        }
        Op::Scale { x, c } => {
            let c = *c;
            add_to(*x, &|g| {
                for (gi, di) in g.iter_mut().zip(dy) {
                    *gi += c * di;
                }
            });
        }
        Op::Relu { x } => {
            let xd = val(*x).data();
            add_to(*x, &|g| {
                for ((gi, di), xi) in g.iter_mut().zip(dy).zip(xd) {
                    if *xi > 0.0 {
                        *gi += di;
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = nodes[idx].value.data();
            let shape = nodes[idx].value.shape();
            let dx = softmax_backward(y, dy, shape, *axis);
            add_to(*x, &|g| axpy(g, &dx));
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xd = val(*x).data();
            let gd = val(*gain).data();
            let d = gd.len();
            let eps = *eps;
            add_to(*gain, &|g| {
                for (lane, dlane) in xd.chunks(d).zip(dy.chunks(d)) {
                    let (mu, inv) = lane_moments(lane, eps);
                    for j in 0..d {
                        g[j] += dlane[j] * (lane[j] - mu) * inv;
                    }
                }
            });
            add_to(*bias, &|g| {
                for dlane in dy.chunks(d) {
                    for j in 0..d {
                        g[j] += dlane[j];
                    }
                }
            });
            add_to(*x, &|g| {
                for ((lane, dlane), glane) in xd.chunks(d).zip(dy.chunks(d)).zip(g.chunks_mut(d)) {
                    let (mu, inv) = lane_moments(lane, eps);
                    let mut sum_t = 0.0;
                    let mut sum_tx = 0.0;
                    for j in 0..d {
                        let xhat = (lane[j] - mu) * inv;
                        let t = dlane[j] * gd[j];
                        sum_t += t;
                        sum_tx += t * xhat;
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xhat = (lane[j] - mu) * inv;
                        let t = dlane[j] * gd[j];
                        glane[j] += inv * (t - sum_t / dn - xhat * sum_tx / dn);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            add_to(*x, &|g| {
                for ((gi, di), mi) in g.iter_mut().zip(dy).zip(mask) {
                    *gi += di * mi;
                }
            });
        }
        Op::MeanRows { x } => {
            let (n, d) = val(*x).dims2("mean_rows").unwrap();
            let scale = 1.0 / n as f64;
            add_to(*x, &|g| {
                for i in 0..n {
                    for j in 0..d {
                        g[i * d + j] += dy[j] * scale;
                    }
                }
            });
        }
        Op::GatherRows { x, idx: rows } => {
            let (_, d) = val(*x).dims2("gather_rows").unwrap();
            add_to(*x, &|g| {
                for (out_row, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        g[src * d + j] += dy[out_row * d + j];
                    }
                }
            });
        }
        Op::StackRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                let slice = &dy[offset..offset + len];
                add_to(p, &|g| axpy(g, slice));
                offset += len;
            }
        }
        Op::SliceCols { x, start, width } => {
            let (n, d) = val(*x).dims2("slice_cols").unwrap();
            let (start, width) = (*start, *width);
            add_to(*x, &|g| {
                for i in 0..n {
                    for j in 0..width {
                        g[i * d + start + j] += dy[i * width + j];
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let n = val(parts[0]).dims2("concat_cols").unwrap().0;
            let total: usize = parts
                .iter()
                .map(|&p| val(p).dims2("concat_cols").unwrap().1)
                .sum();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).dims2("concat_cols").unwrap().1;
                add_to(p, &|g| {
                    for i in 0..n {
                        for j in 0..w {
                            g[i * w + j] += dy[i * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SumAll { x } => {
            let s = dy[0];
            add_to(*x, &|g| {
                for gi in g.iter_mut() {
                    *gi += s;
                }
            });
        }
        Op::MeanAll { x } => {
            let s = dy[0] / val(*x).numel() as f64;
            add_to(*x, &|g| {
                for gi in g.iter_mut() {
                    *gi += s;
                }
            });
        }
        Op::LogisticLoss { delta, target } => {
            let d = val(*delta).item();
            let dd = dy[0] * (sigmoid(d) - target);
            add_to(*delta, &|g| g[0] += dd);
        }
    }
}

fn axpy(acc: &mut [f64], add: &[f64]) {
    debug_assert_eq!(acc.len(), add.len());
    for (a, b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// Mean and inverse standard deviation (population variance plus eps) of a
/// lane; shared by the layer-norm forward and backward passes.
fn lane_moments(lane: &[f64], eps: f64) -> (f64, f64) {
    let d = lane.len() as f64;
    let mu = lane.iter().sum::<f64>() / d;
    let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Numerically stable `ln(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_lane(lane_in: &[f64], lane_out: &mut [f64]) {
    let m = lane_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in lane_out.iter_mut().zip(lane_in) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in lane_out.iter_mut() {
        *o /= sum;
    }
}

/// Applies `f` to every lane along `axis` of a rank-1 or rank-2 tensor.
fn lanes_map(data: &[f64], shape: &[usize], axis: usize, f: fn(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    match (shape, axis) {
        ([_], 0) => f(data, &mut out),
        ([_, c], 1) => {
            for (lane_out, lane_in) in out.chunks_mut(*c).zip(data.chunks(*c)) {
                f(lane_in, lane_out);
            }
        }
        ([r, c], 0) => {
            let (r, c) = (*r, *c);
            let mut lane_in = vec![0.0; r];
            let mut lane_out = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    lane_in[i] = data[i * c + j];
                }
                f(&lane_in, &mut lane_out);
                for i in 0..r {
                    out[i * c + j] = lane_out[i];
                }
            }
        }
        _ => unreachable!("validated in softmax"),
    }
    out
}

fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let lane_bwd = |yl: &[f64], dyl: &[f64], dxl: &mut [f64]| {
        let dot: f64 = yl.iter().zip(dyl).map(|(a, b)| a * b).sum();
        for ((dxi, &yi), &dyi) in dxl.iter_mut().zip(yl).zip(dyl) {
            *dxi = yi * (dyi - dot);
        }
    };
    match (shape, axis) {
        ([_], 0) => lane_bwd(y, dy, &mut dx),
        ([_, c], 1) => {
            for ((yl, dyl), dxl) in y.chunks(*c).zip(dy.chunks(*c)).zip(dx.chunks_mut(*c)) {
                lane_bwd(yl, dyl, dxl);
            }
        }
        ([r, c], 0) => {
            let (r, c) = (*r, *c);
            let (mut yl, mut dyl, mut dxl) = (vec![0.0; r], vec![0.0; r], vec![0.0; r]);
            for j in 0..c {
                for i in 0..r {
                    yl[i] = y[i * c + j];
                    dyl[i] = dy[i * c + j];
                }
                lane_bwd(&yl, &dyl, &mut dxl);
                for i in 0..r {
                    dx[i * c + j] = dxl[i];
                }
            }
        }
        _ => unreachable!("validated in softmax"),
    }
    dx
}

/// `a[m,k] * b[k,n]`, all row-major.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[ra,inner] * b[rb,inner]^T -> [ra,rb]`.
fn mm_nt(a: &[f64], b: &[f64], ra: usize, inner: usize, rb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ra * rb];
    for i in 0..ra {
        let arow = &a[i * inner..(i + 1) * inner];
        for j in 0..rb {
            let brow = &b[j * inner..(j + 1) * inner];
            out[i * rb + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[inner,ca]^T * b[inner,cb] -> [ca,cb]`.
fn mm_tn(a: &[f64], b: &[f64], inner: usize, ca: usize, cb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ca * cb];
    for p in 0..inner {
        let arow = &a[p * ca..(p + 1) * ca];
        let brow = &b[p * cb..(p + 1) * cb];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * cb..(i + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
