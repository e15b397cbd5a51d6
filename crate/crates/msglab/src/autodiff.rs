//! Minimal reverse-mode automatic differentiation on dense rank-2 tensors.
//!
//! A [`Tape`] records every operation in append order; [`Tape::backward`]
//! walks the record in reverse exactly once and accumulates gradients into
//! the leaves. Networks in this crate are tiny, so tensors are dense,
//! row-major and 64-bit throughout. The batch dimension is the row axis;
//! there is no broadcasting beyond adding a bias row to every batch row.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: [{lr}x{lc}] vs [{rr}x{rc}]")]
    ShapeMismatch {
        op: &'static str,
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
    },
    #[error("non-finite output produced by op {0}")]
    NonFinite(&'static str),
    #[error("non-finite values in tensor input")]
    NonFiniteInput,
    #[error("backward requires a scalar loss, got [{0}x{1}]")]
    NonScalarLoss(usize, usize),
    #[error("index ({0},{1}) out of bounds for [{2}x{3}]")]
    IndexOutOfBounds(usize, usize, usize, usize),
    #[error("gumbel-softmax temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Dense row-major rank-2 tensor. Vectors are stored as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteInput);
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(data: Vec<f64>) -> Result<Self, AdError> {
        Tensor::new(1, data.len(), data)
    }

    pub fn scalar(v: f64) -> Result<Self, AdError> {
        Tensor::new(1, 1, vec![v])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Fill with uniform values in `[-scale, scale]`.
    pub fn randomize<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Tensor { rows, cols, data }
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Index(usize, usize, usize),
    GatherCols(usize, Vec<usize>),
    ConcatCols(usize, usize),
    MinZero(usize),
    MaxZero(usize),
    /// Straight-through Gumbel-Softmax: saved tensor is the soft sample.
    GumbelSt {
        logits: usize,
        soft: Tensor,
        temperature: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations; backward visits nodes in reverse append
/// order exactly once.
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, AdError> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite(name));
        }
        let rg = self.op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Index(a, _, _)
            | Op::GatherCols(a, _)
            | Op::MinZero(a)
            | Op::MaxZero(a) => vec![*a],
            Op::GumbelSt { logits, .. } => vec![*logits],
        }
    }

    /// Insert a leaf tensor. Only leaves with `requires_grad` receive
    /// gradients after backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into `v` by previous backward calls, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AdError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(AdError::ShapeMismatch {
                op: name,
                lr: ta.rows,
                lc: ta.cols,
                rr: tb.rows,
                rc: tb.cols,
            });
        }
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.checked(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.rows {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lr: ta.rows,
                lc: ta.cols,
                rr: tb.rows,
                rc: tb.cols,
            });
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += av * tb.data[p * n + j];
                }
            }
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data,
        };
        self.checked(t, Op::MatMul(a.0, b.0), "matmul")
    }

    /// Add a single bias row to every row of a batch.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AdError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                lr: ta.rows,
                lc: ta.cols,
                rr: tb.rows,
                rc: tb.cols,
            });
        }
        let mut data = ta.data.clone();
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                data[r * ta.cols + c] += tb.data[c];
            }
        }
        let t = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.checked(t, Op::AddRow(a.0, bias.0), "add_row")
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, AdError> {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        self.checked(t, op, name)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AdError> {
        self.unary(a, "scale", |x| x * s, Op::Scale(a.0, s))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "exp", f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "log", f64::ln, Op::Log(a.0))
    }

    /// `min(0, x)` elementwise.
    pub fn min_zero(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "min_zero", |x| x.min(0.0), Op::MinZero(a.0))
    }

    /// `max(0, x)` elementwise.
    pub fn max_zero(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, "max_zero", |x| x.max(0.0), Op::MaxZero(a.0))
    }

    /// Softmax over the last axis, one distribution per row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AdError> {
        let ta = &self.nodes[a.0].value;
        let t = softmax_forward(ta);
        self.checked(t, Op::Softmax(a.0), "softmax")
    }

    /// Numerically stable `log(softmax(x))` per row.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AdError> {
        let ta = &self.nodes[a.0].value;
        let mut data = vec![0.0; ta.data.len()];
        for r in 0..ta.rows {
            let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            for c in 0..ta.cols {
                data[r * ta.cols + c] = row[c] - lse;
            }
        }
        let t = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.checked(t, Op::LogSoftmax(a.0), "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.checked(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![s],
            },
            Op::Sum(a.0),
            "sum",
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        let n = self.nodes[a.0].value.data.len().max(1) as f64;
        let s = self.nodes[a.0].value.data.iter().sum::<f64>() / n;
        self.checked(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![s],
            },
            Op::Mean(a.0),
            "mean",
        )
    }

    /// Pick one element as a 1x1 tensor.
    pub fn index(&mut self, a: Var, r: usize, c: usize) -> Result<Var, AdError> {
        let ta = &self.nodes[a.0].value;
        if r >= ta.rows || c >= ta.cols {
            return Err(AdError::IndexOutOfBounds(r, c, ta.rows, ta.cols));
        }
        let v = ta.get(r, c);
        self.checked(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![v],
            },
            Op::Index(a.0, r, c),
            "index",
        )
    }

    /// Per-row column gather: row r of the output is `a[r, cols[r]]`.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, AdError> {
        let ta = &self.nodes[a.0].value;
        if cols.len() != ta.rows {
            return Err(AdError::ShapeMismatch {
                op: "gather_cols",
                lr: ta.rows,
                lc: ta.cols,
                rr: cols.len(),
                rc: 1,
            });
        }
        for (r, &c) in cols.iter().enumerate() {
            if c >= ta.cols {
                return Err(AdError::IndexOutOfBounds(r, c, ta.rows, ta.cols));
            }
        }
        let data = cols.iter().enumerate().map(|(r, &c)| ta.get(r, c)).collect();
        self.checked(
            Tensor {
                rows: ta.rows,
                cols: 1,
                data,
            },
            Op::GatherCols(a.0, cols.to_vec()),
            "gather_cols",
        )
    }

    /// Concatenate along columns; both inputs must have the same row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != tb.rows {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lr: ta.rows,
                lc: ta.cols,
                rr: tb.rows,
                rc: tb.cols,
            });
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(&ta.data[r * ta.cols..(r + 1) * ta.cols]);
            data.extend_from_slice(&tb.data[r * tb.cols..(r + 1) * tb.cols]);
        }
        let t = Tensor {
            rows: ta.rows,
            cols,
            data,
        };
        self.checked(t, Op::ConcatCols(a.0, b.0), "concat_cols")
    }

    /// Straight-through Gumbel-Softmax with caller-provided Gumbel noise.
    ///
    /// Forward emits a one-hot row per input row when `hard`, otherwise the
    /// soft relaxation; backward always flows through the soft sample.
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &Tensor,
        temperature: f64,
        hard: bool,
    ) -> Result<Var, AdError> {
        if temperature <= 0.0 {
            return Err(AdError::InvalidTemperature(temperature));
        }
        let tl = &self.nodes[logits.0].value;
        if !tl.same_shape(noise) {
            return Err(AdError::ShapeMismatch {
                op: "gumbel_softmax",
                lr: tl.rows,
                lc: tl.cols,
                rr: noise.rows,
                rc: noise.cols,
            });
        }
        let mut perturbed = tl.clone();
        for (p, g) in perturbed.data.iter_mut().zip(noise.data.iter()) {
            *p = (*p + g) / temperature;
        }
        let soft = softmax_forward(&perturbed);
        let value = if hard {
            let mut v = Tensor::zeros(soft.rows, soft.cols);
            for r in 0..soft.rows {
                let row = &soft.data[r * soft.cols..(r + 1) * soft.cols];
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                v.set(r, arg, 1.0);
            }
            v
        } else {
            soft.clone()
        };
        self.checked(
            value,
            Op::GumbelSt {
                logits: logits.0,
                soft,
                temperature,
            },
            "gumbel_softmax",
        )
    }

    /// Sample fresh Gumbel noise and apply [`Tape::gumbel_softmax_with_noise`].
    /// Returns the output variable together with the noise so callers can
    /// replay the exact sample later.
    pub fn gumbel_softmax_sample<R: Rng>(
        &mut self,
        logits: Var,
        temperature: f64,
        hard: bool,
        rng: &mut R,
    ) -> Result<(Var, Tensor), AdError> {
        let tl = &self.nodes[logits.0].value;
        let noise = sample_gumbel(tl.rows, tl.cols, rng);
        let v = self.gumbel_softmax_with_noise(logits, &noise, temperature, hard)?;
        Ok((v, noise))
    }

    /// Reverse pass from a scalar loss. Repeated calls accumulate into the
    /// existing gradients unless [`Tape::zero_grads`] is called in between.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        let lt = &self.nodes[loss.0].value;
        if lt.rows != 1 || lt.cols != 1 {
            return Err(AdError::NonScalarLoss(lt.rows, lt.cols));
        }
        // Local upstream gradients for this pass; node grads persist across passes.
        let mut up: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        up[loss.0] = Some(Tensor {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let g = match up[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let val_shape = (self.nodes[i].value.rows, self.nodes[i].value.cols);
                    let acc = self.nodes[i]
                        .grad
                        .get_or_insert_with(|| Tensor::zeros(val_shape.0, val_shape.1));
                    for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                        *a += b;
                    }
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut up, a, &g, &self.nodes);
                    accumulate(&mut up, b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut up, a, &g, &self.nodes);
                    let neg = map_tensor(&g, |x| -x);
                    accumulate(&mut up, b, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let ga = zip_tensor(&g, &self.nodes[b].value, |x, y| x * y);
                    let gb = zip_tensor(&g, &self.nodes[a].value, |x, y| x * y);
                    accumulate(&mut up, a, &ga, &self.nodes);
                    accumulate(&mut up, b, &gb, &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a].value;
                    let tb = &self.nodes[b].value;
                    let ga = matmul_nt(&g, tb); // g [m,n] * b^T [n,k]
                    let gb = matmul_tn(ta, &g); // a^T [k,m] * g [m,n]
                    accumulate(&mut up, a, &ga, &self.nodes);
                    accumulate(&mut up, b, &gb, &self.nodes);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut up, a, &g, &self.nodes);
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut up, b, &gb, &self.nodes);
                }
                Op::Scale(a, s) => {
                    let ga = map_tensor(&g, |x| x * s);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Tanh(a) => {
                    let ga = zip_tensor(&g, &self.nodes[i].value, |gx, y| gx * (1.0 - y * y));
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Relu(a) => {
                    let ga = zip_tensor(&g, &self.nodes[a].value, |gx, x| {
                        if x > 0.0 {
                            gx
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Exp(a) => {
                    let ga = zip_tensor(&g, &self.nodes[i].value, |gx, y| gx * y);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Log(a) => {
                    let ga = zip_tensor(&g, &self.nodes[a].value, |gx, x| gx / x);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::MinZero(a) => {
                    let ga = zip_tensor(&g, &self.nodes[a].value, |gx, x| {
                        if x < 0.0 {
                            gx
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::MaxZero(a) => {
                    let ga = zip_tensor(&g, &self.nodes[a].value, |gx, x| {
                        if x > 0.0 {
                            gx
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let ga = softmax_backward(y, &g);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax(x) * sum(g) per row
                    let ly = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for r in 0..ly.rows {
                        let gs: f64 = (0..ly.cols).map(|c| g.get(r, c)).sum();
                        for c in 0..ly.cols {
                            let p = ly.get(r, c).exp();
                            ga.set(r, c, g.get(r, c) - p * gs);
                        }
                    }
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Sum(a) => {
                    let ta = &self.nodes[a].value;
                    let ga = map_tensor(ta, |_| g.data[0]);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[a].value;
                    let n = ta.data.len().max(1) as f64;
                    let ga = map_tensor(ta, |_| g.data[0] / n);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::Index(a, r, c) => {
                    let ta = &self.nodes[a].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    ga.set(r, c, g.data[0]);
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::GatherCols(a, cols) => {
                    let ta = &self.nodes[a].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        ga.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut up, a, &ga, &self.nodes);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.nodes[a].value.cols, self.nodes[b].value.cols);
                    let rows = g.rows;
                    let mut ga = Tensor::zeros(rows, ca);
                    let mut gb = Tensor::zeros(rows, cb);
                    for r in 0..rows {
                        for c in 0..ca {
                            ga.set(r, c, g.get(r, c));
                        }
                        for c in 0..cb {
                            gb.set(r, c, g.get(r, ca + c));
                        }
                    }
                    accumulate(&mut up, a, &ga, &self.nodes);
                    accumulate(&mut up, b, &gb, &self.nodes);
                }
                Op::GumbelSt {
                    logits,
                    soft,
                    temperature,
                } => {
                    // Straight-through: backward as if the output were the
                    // soft sample y = softmax((x+g)/T); dy/dx has the softmax
                    // Jacobian scaled by 1/T.
                    let ga = softmax_backward(&soft, &g);
                    let ga = map_tensor(&ga, |x| x / temperature);
                    accumulate(&mut up, logits, &ga, &self.nodes);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(up: &mut [Option<Tensor>], idx: usize, g: &Tensor, nodes: &[Node]) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut up[idx] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                *a += b;
            }
        }
        None => up[idx] = Some(g.clone()),
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.cols {
            let e = (row[c] - m).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..x.cols {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// dx = y * (g - <g, y>) per row.
fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let dot: f64 = (0..y.cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
        for c in 0..y.cols {
            out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
        }
    }
    out
}

fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    // a [m,n] * b^T where b is [k,n] -> [m,k]
    let (m, n, k) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..n {
                s += a.data[i * n + p] * b.data[j * n + p];
            }
            out.data[i * k + j] = s;
        }
    }
    out
}

fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    // a^T where a is [m,k], times b [m,n] -> [k,n]
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, n);
    for p in 0..m {
        for i in 0..k {
            let av = a.data[p * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    out
}

/// Gumbel(0,1) noise via -log(-log(u)), with u clamped away from {0,1}.
pub fn sample_gumbel<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-10, 1.0 - 1e-10);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(
        f: &dyn Fn(&mut Tape, Var) -> Var,
        x0: &Tensor,
        step: f64,
        rel_tol: f64,
    ) {
        // analytic
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = f(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().clone();

        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += step;
            let mut tp = Tape::new();
            let vp = tp.leaf(xp, false);
            let lp = f(&mut tp, vp);
            let fp = tp.value(lp).data[0];

            let mut xm = x0.clone();
            xm.data[i] -= step;
            let mut tm = Tape::new();
            let vm = tm.leaf(xm, false);
            let lm = f(&mut tm, vm);
            let fm = tm.value(lm).data[0];

            let num = (fp - fm) / (2.0 * step);
            let denom = num.abs().max(analytic.data[i].abs()).max(1e-8);
            assert!(
                (num - analytic.data[i]).abs() / denom <= rel_tol,
                "coord {i}: analytic {} vs fd {num}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn log_exp_inverse_pair() {
        for &v in &[-2.0, 0.0, 3.0] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::scalar(v).unwrap());
            let e = tape.exp(x).unwrap();
            let l = tape.log(e).unwrap();
            assert!((tape.value(l).data[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_terms_match_finite_differences() {
        // d/dx of a weighted softmax output at x=[0.3,-1.2,2.0].
        let x0 = Tensor::row(vec![0.3, -1.2, 2.0]).unwrap();
        let weights = Tensor::row(vec![1.0, -0.5, 0.25]).unwrap();
        let w = weights.clone();
        fd_check(
            &move |tape, x| {
                let p = tape.softmax(x).unwrap();
                let c = tape.constant(w.clone());
                let m = tape.mul(p, c).unwrap();
                tape.sum(m).unwrap()
            },
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::row(vec![0.5, -1.0, 2.0]).unwrap(), true);
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let m = tape.mul(w, x).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::scalar(5.0).unwrap());
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        // w unreachable from loss: no gradient was accumulated
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences_over_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w1 = Tensor::randomize(4, 6, 0.7, &mut rng);
            let w2 = Tensor::randomize(6, 3, 0.7, &mut rng);
            let x = Tensor::randomize(1, 4, 1.0, &mut rng);
            // check gradient w.r.t. w1 (flattened into the leaf under test)
            let (w2c, xc) = (w2.clone(), x.clone());
            fd_check(
                &move |tape, w1v| {
                    let xv = tape.constant(xc.clone());
                    let w2v = tape.constant(w2c.clone());
                    let h = tape.matmul(xv, w1v).unwrap();
                    let h = tape.tanh(h).unwrap();
                    let o = tape.matmul(h, w2v).unwrap();
                    let sq = tape.mul(o, o).unwrap();
                    tape.mean(sq).unwrap()
                },
                &w1,
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(
            tape.backward(x),
            Err(AdError::NonScalarLoss(1, 2))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0).unwrap(), true);
        let loss = tape.scale(w, 2.0).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data[0], 4.0);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data[0], 2.0);
    }

    #[test]
    fn gumbel_dominated_logit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::row(vec![1e6, 0.0, 0.0]).unwrap());
            let (s, _) = tape.gumbel_softmax_sample(logits, 1.0, true, &mut rng).unwrap();
            assert_eq!(tape.value(s).data, vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gumbel_uniform_frequencies() {
        let k = 4;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::row(vec![0.0; k]).unwrap());
            let (s, _) = tape.gumbel_softmax_sample(logits, 1.0, true, &mut rng).unwrap();
            let idx = tape.value(s).data.iter().position(|&v| v == 1.0).unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / k as f64).abs() < 0.02, "freq {f}");
        }
    }

    #[test]
    fn gumbel_hard_output_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::row(vec![0.3, -0.7, 1.1]).unwrap());
            let (s, _) = tape.gumbel_softmax_sample(logits, 0.7, true, &mut rng).unwrap();
            let v = tape.value(s);
            assert!(v.data.iter().all(|&x| x == 0.0 || x == 1.0));
            assert_eq!(v.data.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        assert!(tape
            .gumbel_softmax_sample(logits, 0.0, true, &mut rng)
            .is_err());
    }

    #[test]
    fn gumbel_gradient_is_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::row(vec![0.2, -0.4, 0.9]).unwrap(), true);
        let (s, _) = tape.gumbel_softmax_sample(logits, 1.0, true, &mut rng).unwrap();
        let w = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let m = tape.mul(s, w).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a0 = Tensor::randomize(3, 4, 1.0, &mut rng);
        let b = Tensor::randomize(4, 2, 1.0, &mut rng);
        fd_check(
            &move |tape, a| {
                let bv = tape.constant(b.clone());
                let m = tape.matmul(a, bv).unwrap();
                let sq = tape.mul(m, m).unwrap();
                tape.sum(sq).unwrap()
            },
            &a0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn clamp_ops_match_finite_differences() {
        let x0 = Tensor::row(vec![-1.5, 0.7, -0.2, 2.0]).unwrap();
        fd_check(
            &|tape, x| {
                let m = tape.min_zero(x).unwrap();
                let p = tape.max_zero(x).unwrap();
                let s = tape.add(m, p).unwrap();
                let sq = tape.mul(s, s).unwrap();
                tape.sum(sq).unwrap()
            },
            &x0,
            1e-5,
            1e-6,
        );
    }
}
