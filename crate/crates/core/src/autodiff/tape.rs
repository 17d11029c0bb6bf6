use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.id
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Negate,
    Scale(f64),
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MulMask {
        input: Var,
        mask: Vec<f64>,
    },
    GradReverse {
        input: Var,
        beta: f64,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectTime {
        input: Var,
        t: usize,
    },
    StackTime(Vec<Var>),
    MeanTime(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// Records operations in execution order and replays them in reverse.
///
/// Nodes are appended as they are created, so the recorded order is
/// always topological. A tape supports one backward pass; call
/// [`Tape::reset`] before recording the next step.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every recorded node. Handles from before the reset become foreign.
    pub fn reset(&mut self) {
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("foreign variable");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { tape: self.id, id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.id].value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a)?.shape(), self.val(b)?.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => {
                self.same_shape("elementwise", a, b)?;
                let (x, y) = (self.val(a)?, self.val(b)?);
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| match kind {
                        Elementwise::Add => p + q,
                        Elementwise::Sub => p - q,
                        _ => p * q,
                    })
                    .collect();
                let out = Tensor::from_parts(x.shape().to_vec(), data);
                Ok(self.push(out, Op::Binary(kind, a, b)))
            }
            (true, None) => Err(Error::invalid(
                "elementwise",
                format!("{kind:?} needs two operands"),
            )),
            (false, Some(_)) => Err(Error::invalid(
                "elementwise",
                format!("{kind:?} takes one operand"),
            )),
            (false, None) => {
                let x = self.val(a)?;
                let out = x.map(|v| match kind {
                    Elementwise::Relu => v.max(0.0),
                    Elementwise::Sigmoid => sigmoid(v),
                    Elementwise::Tanh => v.tanh(),
                    Elementwise::Exp => v.exp(),
                    Elementwise::Log => v.ln(),
                    Elementwise::Negate => -v,
                    Elementwise::Scale(c) => c * v,
                    _ => unreachable!(),
                });
                Ok(self.push(out, Op::Unary(kind, a)))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, a, None)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Negate, a, None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(c), a, None)
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a)?.map(|v| v + c);
        Ok(self.push(out, Op::AddConst(a)))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a)?, self.val(b)?);
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(x.data(), y.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a)?;
        if x.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got {:?}", x.shape()),
            ));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = kernels::transpose(x.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    /// `x[N, D] + b[D]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x)?, self.val(b)?);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let d = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::AddRowBias(x, b),
        ))
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a)?;
        let s = x.sum() / x.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a)?.reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Picks flat elements `indices` into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.val(a)?;
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range {}", x.len()),
            ));
        }
        let out: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.val(a)?;
        if x.rank() != 2 || len == 0 || start + len > x.shape()[1] {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { input: a, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "nothing to concatenate"));
        }
        let rows = self.val(parts[0])?.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let x = self.val(p)?;
            if x.rank() != 2 || x.shape()[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(parts[0])?.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            widths.push(x.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.id].value.data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Frame `t` of every sequence in `[N, T, F]`, giving `[N, F]`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        let x = self.val(a)?;
        if x.rank() != 3 || t >= x.shape()[1] {
            return Err(Error::invalid(
                "select_time",
                format!("step {t} of {:?}", x.shape()),
            ));
        }
        let (n, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(n * f);
        for i in 0..n {
            let base = (i * steps + t) * f;
            out.extend_from_slice(&x.data()[base..base + f]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, f], out),
            Op::SelectTime { input: a, t },
        ))
    }

    /// Stacks `T` tensors of shape `[N, F]` into `[N, T, F]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::invalid("stack_time", "empty sequence"));
        }
        let first = self.val(steps[0])?.shape().to_vec();
        if first.len() != 2 {
            return Err(Error::invalid(
                "stack_time",
                format!("steps must be rank 2, got {first:?}"),
            ));
        }
        for &s in steps {
            self.check(s)?;
            if self.nodes[s.id].value.shape() != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack_time",
                    left: first,
                    right: self.nodes[s.id].value.shape().to_vec(),
                });
            }
        }
        let (n, f, t) = (first[0], first[1], steps.len());
        let mut out = vec![0.0; n * t * f];
        for (ti, &s) in steps.iter().enumerate() {
            let d = self.nodes[s.id].value.data();
            for i in 0..n {
                out[(i * t + ti) * f..(i * t + ti + 1) * f].copy_from_slice(&d[i * f..(i + 1) * f]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, t, f], out),
            Op::StackTime(steps.to_vec()),
        ))
    }

    /// Mean over the time axis of `[N, T, F]`, giving `[N, F]`.
    pub fn mean_time(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a)?;
        if x.rank() != 3 {
            return Err(Error::invalid(
                "mean_time",
                format!("expected [N,T,F], got {:?}", x.shape()),
            ));
        }
        let (n, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let acc = &mut out[i * f..(i + 1) * f];
            for ti in 0..t {
                for (o, v) in acc
                    .iter_mut()
                    .zip(&x.data()[(i * t + ti) * f..(i * t + ti + 1) * f])
                {
                    *o += v;
                }
            }
            for o in acc.iter_mut() {
                *o /= t as f64;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, f], out), Op::MeanTime(a)))
    }

    // ---- convolutional ops ------------------------------------------------

    /// 3×3 convolution, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.val(input)?, self.val(weight)?, self.val(bias)?);
        if x.rank() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("input must be [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        let ws = w.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::invalid(
                "conv2d",
                format!("weight must be [Co,Ci,3,3], got {ws:?}"),
            ));
        }
        if ws[1] != x.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: ws.to_vec(),
            });
        }
        if b.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: ws.to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let geom = kernels::ConvGeom::new(x.shape(), ws[0]);
        let out = kernels::conv3x3_forward(&geom, x.data(), w.data(), b.data());
        Ok(self.push(
            Tensor::from_parts(vec![geom.n, geom.c_out, geom.h, geom.w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.val(input)?;
        let s = pool_shape("max_pool2d", x.shape())?;
        let (out, argmax) = kernels::max_pool2x2(x.data(), x.shape());
        Ok(self.push(Tensor::from_parts(s, out), Op::MaxPool2d { input, argmax }))
    }

    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.val(input)?;
        let s = pool_shape("avg_pool2d", x.shape())?;
        let out = kernels::avg_pool2x2(x.data(), x.shape());
        Ok(self.push(Tensor::from_parts(s, out), Op::AvgPool2d(input)))
    }

    /// Mean over the spatial extent of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.val(input)?;
        if x.rank() != 4 {
            return Err(Error::invalid(
                "global_average_pool",
                format!("expected [N,C,H,W], got {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let area = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalAvgPool(input),
        ))
    }

    /// Batch normalization over `[N, C, ...]`.
    ///
    /// With `stats == None` the batch statistics are used and returned;
    /// otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (x, g, b) = (self.val(input)?, self.val(gamma)?, self.val(beta)?);
        if x.rank() < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("expected [N,C,...], got {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let spatial: usize = x.shape()[2..].iter().product();
        let count = n * spatial;
        let (mean, var, batch_stats) = match stats {
            None => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batchnorm",
                        format!("training mode needs N >= 2, got {n}"),
                    ));
                }
                let (m, v) = kernels::channel_moments(x.data(), n, c, spatial);
                (m, v, true)
            }
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid(
                        "batchnorm",
                        "running statistics have wrong length",
                    ));
                }
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for k in base..base + spatial {
                    let h = (x.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g.data()[ch] * h + b.data()[ch];
                }
            }
        }
        let returned = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| v * count as f64 / (count as f64 - 1.0).max(1.0))
                .collect(),
        });
        let shape = x.shape().to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, returned))
    }

    // ---- misc -------------------------------------------------------------

    /// Multiplies by a fixed mask; used for dropout.
    pub fn mul_mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.val(input)?;
        if mask.len() != x.len() {
            return Err(Error::invalid(
                "mul_mask",
                format!("mask length {} for {:?}", mask.len(), x.shape()),
            ));
        }
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulMask { input, mask }))
    }

    /// Identity forward; multiplies the upstream gradient by `-beta` on the way back.
    pub fn grad_reverse(&mut self, input: Var, beta: f64) -> Result<Var> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid(
                "gradient_reversal",
                format!("beta must be a finite value >= 0, got {beta}"),
            ));
        }
        let out = self.val(input)?.clone();
        Ok(self.push(out, Op::GradReverse { input, beta }))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.val(input)?;
        if x.rank() != 2 {
            return Err(Error::invalid(
                "l2_normalize",
                format!("expected [N,D], got {:?}", x.shape()),
            ));
        }
        let d = x.shape()[1];
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut out = Vec::with_capacity(x.len());
        for (r, row) in x.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "l2_normalize: row {r} has norm {norm}"
                )));
            }
            if norm == 0.0 {
                return Err(Error::invalid(
                    "l2_normalize",
                    format!("row {r} has zero norm"),
                ));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = x.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2NormalizeRows { input, norms },
        ))
    }

    /// Sum over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.val(logits)?;
        if x.rank() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::invalid(
                "softmax_loss",
                format!("{} labels for logits {:?}", labels.len(), x.shape()),
            ));
        }
        let n = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::invalid(
                "softmax_loss",
                format!("label {bad} out of range for {n} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &label) in x.data().chunks(n).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates gradients from a scalar `loss` back to every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.val(loss)?.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_parts(loss_shape, vec![1.0]));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.id].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => match kind {
                Elementwise::Add => {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g.clone());
                }
                Elementwise::Sub => {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g.map(|v| -v));
                }
                _ => {
                    let (x, y) = (val(*a), val(*b));
                    accumulate(grads, *a, zip_map(g, y, |g, y| g * y));
                    accumulate(grads, *b, zip_map(g, x, |g, x| g * x));
                }
            },
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                let dx = match kind {
                    Elementwise::Relu => zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Elementwise::Sigmoid => zip_map(g, y, |g, y| g * y * (1.0 - y)),
                    Elementwise::Tanh => zip_map(g, y, |g, y| g * (1.0 - y * y)),
                    Elementwise::Exp => zip_map(g, y, |g, y| g * y),
                    Elementwise::Log => zip_map(g, x, |g, x| g / x),
                    Elementwise::Negate => g.map(|g| -g),
                    Elementwise::Scale(c) => g.map(|g| c * g),
                    _ => unreachable!(),
                };
                accumulate(grads, *a, dx);
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut dx = vec![0.0; m * k];
                kernels::gemm_nt(gd, y.data(), &mut dx, m, n, k);
                let mut dy = vec![0.0; k * n];
                kernels::gemm_tn(x.data(), gd, &mut dy, m, k, n);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], dx));
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], dy));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                accumulate(
                    grads,
                    *a,
                    Tensor::from_parts(vec![c, r], kernels::transpose(gd, r, c)),
                );
            }
            Op::AddRowBias(x, b) => {
                let d = val(*b).len();
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::from_parts(vec![d], db));
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gd[0]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                accumulate(grads, *a, Tensor::full(x.shape(), gd[0] / x.len() as f64));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let geom = kernels::ConvGeom::new(x.shape(), w.shape()[0]);
                let (dx, dw, db) = kernels::conv3x3_backward(&geom, x.data(), w.data(), gd);
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
                accumulate(grads, *weight, Tensor::from_parts(w.shape().to_vec(), dw));
                accumulate(grads, *bias, Tensor::from_parts(vec![geom.c_out], db));
            }
            Op::MaxPool2d { input, argmax } => {
                let x = val(*input);
                let mut dx = vec![0.0; x.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::AvgPool2d(input) => {
                let x = val(*input);
                let dx = kernels::avg_pool2x2_backward(gd, x.shape());
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::GlobalAvgPool(input) => {
                let x = val(*input);
                let area = x.shape()[2] * x.shape()[3];
                let mut dx = Vec::with_capacity(x.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let x = val(*input);
                let gam = val(*gamma).data();
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let spatial = x.len() / (n * c);
                let count = (n * spatial) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for k in base..base + spatial {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let mut dx = vec![0.0; x.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        let scale = gam[ch] * inv_std[ch];
                        for k in base..base + spatial {
                            dx[k] = if *batch_stats {
                                scale * (gd[k] - dbeta[ch] / count - xhat[k] * dgamma[ch] / count)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::MulMask { input, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::GradReverse { input, beta } => {
                // A zero coefficient contributes nothing, so skip the add
                // entirely to keep other paths' sums bit-identical.
                if *beta != 0.0 {
                    accumulate(grads, *input, g.map(|v| -beta * v));
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = node.value.data();
                let d = g.shape()[1];
                let mut dx = Vec::with_capacity(gd.len());
                for (r, norm) in norms.iter().enumerate() {
                    let (gr, yr) = (&gd[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / norm));
                }
                accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let x = val(*logits);
                let n = x.shape()[1];
                let mut dx: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * n + l] -= gd[0];
                }
                accumulate(grads, *logits, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Gather { input, indices } => {
                let x = val(*input);
                let mut dx = vec![0.0; x.len()];
                for (&i, &gv) in indices.iter().zip(gd) {
                    dx[i] += gv;
                }
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::SliceCols { input, start } => {
                let x = val(*input);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let len = g.shape()[1];
                accumulate_into(grads, *input, x.shape(), |dx| {
                    for r in 0..rows {
                        let dst = &mut dx[r * cols + start..r * cols + start + len];
                        for (o, v) in dst.iter_mut().zip(&gd[r * len..(r + 1) * len]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, Tensor::from_parts(vec![rows, w], dp));
                }
            }
            Op::SelectTime { input, t } => {
                let x = val(*input);
                let (n, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                accumulate_into(grads, *input, x.shape(), |dx| {
                    for i in 0..n {
                        let base = (i * steps + t) * f;
                        for (o, v) in dx[base..base + f].iter_mut().zip(&gd[i * f..(i + 1) * f]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::StackTime(steps) => {
                let (n, t, f) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (ti, &s) in steps.iter().enumerate() {
                    let mut ds = Vec::with_capacity(n * f);
                    for i in 0..n {
                        ds.extend_from_slice(&gd[(i * t + ti) * f..(i * t + ti + 1) * f]);
                    }
                    accumulate(grads, s, Tensor::from_parts(vec![n, f], ds));
                }
            }
            Op::MeanTime(input) => {
                let x = val(*input);
                let (n, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = vec![0.0; x.len()];
                for i in 0..n {
                    for ti in 0..t {
                        for j in 0..f {
                            dx[(i * t + ti) * f + j] = gd[i * f + j] / t as f64;
                        }
                    }
                }
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
        }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; nodes the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup with a foreign variable");
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    /// Gradient of `v` if the loss reached it.
    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

/// Adds a sparse contribution in place, allocating zeros on first touch.
fn accumulate_into(
    grads: &mut [Option<Tensor>],
    v: Var,
    shape: &[usize],
    add: impl FnOnce(&mut [f64]),
) {
    let slot = grads[v.id].get_or_insert_with(|| Tensor::zeros(shape));
    add(slot.data_mut());
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn pool_shape(op: &'static str, s: &[usize]) -> Result<Vec<usize>> {
    if s.len() != 4 {
        return Err(Error::invalid(op, format!("expected [N,C,H,W], got {s:?}")));
    }
    if s[2] < 2 || s[3] < 2 {
        return Err(Error::invalid(
            op,
            format!(
                "spatial extent {}x{} is smaller than the 2x2 window",
                s[2], s[3]
            ),
        ));
    }
    Ok(vec![s[0], s[1], s[2] / 2, s[3] / 2])
}
