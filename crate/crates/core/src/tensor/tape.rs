use std::cell::RefCell;

use super::optim::{ParamId, ParamStore};
use super::{shape_err, Tensor, TensorError};

/// Lower clamp applied to probabilities inside [`Tape::bce_mean`].
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, idx: Vec<usize> },
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    RowSumNormalize { src: Var, sums: Vec<f64> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1dCollapse {
        x: Var,
        kernel: Var,
        bias: Var,
        mask: Vec<bool>,
        dims: ConvDims,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Bce { pred: Var, labels: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    len: usize,
    channels: usize,
    width: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.width / 2
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations during a forward pass so that [`Tape::backward`] can
/// replay them in reverse.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's and a reverse index sweep is a valid topological order.
/// A tape belongs to one thread; build a fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::gradients`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, zero-filled when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a free input whose gradient is tracked (see [`Gradients::get`]).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter. Frozen parameters are
    /// recorded as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value().clone(), Op::Param(id), p.trainable())
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].value.is_finite()
    }

    fn unary(&self, a: Var, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var {
        let out = f(&self.nodes.borrow()[a.0].value);
        let needs = self.needs(&[a]);
        self.push(out, op, needs)
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            let n = x.cols();
            if r.len() != n {
                return Err(shape_err("add_row", format!("{:?} + {:?}", x.shape(), r.shape())));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + r.data()[i % n])
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let needs = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), needs))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(
            a,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap(),
            Op::Scale(a, c),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(
            a,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()).unwrap(),
            Op::AddScalar(a),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut data = vec![0.0; m * n];
            matmul_into(x.data(), y.data(), &mut data, m, k, n);
            Tensor::new(vec![m, n], data)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape().len() != 2 {
                return Err(shape_err("transpose", format!("{:?}", x.shape())));
            }
            transposed(x)
        };
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), needs))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.nodes.borrow()[a.0].value.clone().reshaped(shape.to_vec())?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape().len() != 2 || start >= end || end > x.shape()[1] {
                return Err(shape_err("slice_cols", format!("{:?}[.., {start}..{end}]", x.shape())));
            }
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&x.data()[i * n + start..i * n + end]);
            }
            Tensor::new(vec![m, w], data)?
        };
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols { src: a, start }, needs))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape().len() != 2 || start >= end || end > x.shape()[0] {
                return Err(shape_err("slice_rows", format!("{:?}[{start}..{end}]", x.shape())));
            }
            let n = x.shape()[1];
            Tensor::new(vec![end - start, n], x.data()[start * n..end * n].to_vec())?
        };
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::SliceRows { src: a, start }, needs))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let m = vals.first().map(|t| t.rows()).ok_or_else(|| shape_err("concat_cols", "empty"))?;
            if vals.iter().any(|t| t.shape().len() != 2 || t.shape()[0] != m) {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            let total: usize = vals.iter().map(|t| t.shape()[1]).sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for t in &vals {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::new(vec![m, total], data)?
        };
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let n = vals.first().map(|t| t.cols()).ok_or_else(|| shape_err("concat_rows", "empty"))?;
            if vals.iter().any(|t| t.shape().len() != 2 || t.shape()[1] != n) {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            let rows: usize = vals.iter().map(|t| t.shape()[0]).sum();
            let data = vals.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(vec![rows, n], data)?
        };
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Gathers rows of a `[rows, d]` table; the backward pass scatter-adds.
    pub fn embedding_lookup(&self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 {
                return Err(shape_err("embedding_lookup", format!("table {:?}", t.shape())));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= rows {
                    return Err(TensorError::Index { index: i, rows });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), d], data)?
        };
        let needs = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        self.unary(
            a,
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).unwrap(),
            op,
        )
    }

    /// Row-wise softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let n = x.cols();
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(n.max(1)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                Tensor::new(x.shape().to_vec(), data).unwrap()
            },
            Op::SoftmaxRows(a),
        )
    }

    /// Divides every row by its sum. Rows summing to zero are left undefined
    /// (non-finite), which callers detect through finiteness checks.
    pub fn row_sum_normalize(&self, a: Var) -> Var {
        let (out, sums) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let n = x.cols().max(1);
            let mut data = x.data().to_vec();
            let mut sums = Vec::with_capacity(x.rows());
            for row in data.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                sums.push(s);
                row.iter_mut().for_each(|v| *v /= s);
            }
            (Tensor::new(x.shape().to_vec(), data).unwrap(), sums)
        };
        let needs = self.needs(&[a]);
        self.push(out, Op::RowSumNormalize { src: a, sums }, needs)
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let n = xv.cols();
            if n == 0 || g.len() != n || b.len() != n {
                return Err(shape_err(
                    "layer_norm",
                    format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), g.shape(), b.shape()),
                ));
            }
            let mut xhat = Vec::with_capacity(xv.len());
            let mut inv_std = Vec::with_capacity(xv.rows());
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Batched same-padded 1-D convolution along the position axis followed
    /// by a masked mean-pool over valid positions.
    ///
    /// `x` is `[batch, len, c]`, `kernel` is `[width, c, c]`, `bias` is `[c]`
    /// and `mask` has `batch * len` entries. Invalid positions read as zero.
    /// A batch entry with no valid position yields `bias`.
    /// Output is `[batch, c]`.
    pub fn conv1d_collapse_batch(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let (xv, kv, bv) = (&nodes[x.0].value, &nodes[kernel.0].value, &nodes[bias.0].value);
            let (xs, ks) = (xv.shape(), kv.shape());
            if xs.len() != 3 || ks.len() != 3 || ks[1] != xs[2] || ks[2] != xs[2] || bv.len() != xs[2] {
                return Err(shape_err(
                    "conv1d_collapse",
                    format!("x {xs:?}, kernel {ks:?}, bias {:?}", bv.shape()),
                ));
            }
            let dims = ConvDims {
                batch: xs[0],
                len: xs[1],
                channels: xs[2],
                width: ks[0],
            };
            if dims.width == 0 || dims.width > dims.len.max(1) || mask.len() != dims.batch * dims.len {
                return Err(shape_err(
                    "conv1d_collapse",
                    format!("width {} len {} mask {}", dims.width, dims.len, mask.len()),
                ));
            }
            (conv_forward(xv.data(), kv.data(), bv.data(), mask, dims), dims)
        };
        let needs = self.needs(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv1dCollapse {
                x,
                kernel,
                bias,
                mask: mask.to_vec(),
                dims,
            },
            needs,
        ))
    }

    /// Unbatched form: `x` is `[len, c]`, `mask` has `len` entries, output `[c]`.
    pub fn conv1d_collapse(&self, x: Var, kernel: Var, bias: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(shape_err("conv1d_collapse", format!("x {shape:?}")));
        }
        let x3 = self.reshape(x, &[1, shape[0], shape[1]])?;
        let out = self.conv1d_collapse_batch(x3, kernel, bias, mask)?;
        self.reshape(out, &[shape[1]])
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.data().iter().sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Tensor::scalar(x.data().iter().sum::<f64>() / x.len().max(1) as f64),
            Op::Mean(a),
        )
    }

    pub fn sum_squares(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.sum_squares()), Op::SumSquares(a))
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` labels,
    /// with predictions clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_mean(&self, pred: Var, labels: &[f64]) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            if p.len() != labels.len() || labels.is_empty() {
                return Err(shape_err("bce_mean", format!("{} predictions, {} labels", p.len(), labels.len())));
            }
            let total: f64 = p
                .data()
                .iter()
                .zip(labels)
                .map(|(&q, &y)| {
                    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    -y * q.ln() - (1.0 - y) * (1.0 - q).ln()
                })
                .sum();
            Tensor::scalar(total / labels.len() as f64)
        };
        let needs = self.needs(&[pred]);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if nodes[idx].needs_grad {
                backprop(&nodes, idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Runs the reverse sweep and accumulates gradients into every trainable
    /// parameter recorded on this tape. Gradients add up until
    /// [`ParamStore::zero_grads`] is called.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        let nodes = self.nodes.borrow();
        for (idx, node) in nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[idx]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
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

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transposed(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data).unwrap()
}

fn conv_forward(x: &[f64], k: &[f64], bias: &[f64], mask: &[bool], d: ConvDims) -> Tensor {
    let c = d.channels;
    let pad = d.pad();
    let mut out = vec![0.0; d.batch * c];
    let mut acc = vec![0.0; c];
    for b in 0..d.batch {
        let valid: Vec<usize> = (0..d.len).filter(|&l| mask[b * d.len + l]).collect();
        let orow = &mut out[b * c..(b + 1) * c];
        if valid.is_empty() {
            orow.copy_from_slice(bias);
            continue;
        }
        for &l in &valid {
            acc.copy_from_slice(bias);
            for t in 0..d.width {
                let Some(pos) = (l + t).checked_sub(pad) else { continue };
                if pos >= d.len || !mask[b * d.len + pos] {
                    continue;
                }
                let xrow = &x[(b * d.len + pos) * c..(b * d.len + pos + 1) * c];
                for (ci, xv) in xrow.iter().enumerate() {
                    let krow = &k[(t * c + ci) * c..(t * c + ci + 1) * c];
                    for (a, kv) in acc.iter_mut().zip(krow) {
                        *a += xv * kv;
                    }
                }
            }
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o += a;
            }
        }
        let inv = 1.0 / valid.len() as f64;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(vec![d.batch, c], out).unwrap()
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let out = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let n = out.cols();
            if let Some(gr) = slot(nodes, grads, *row) {
                for (i, gv) in g.iter().enumerate() {
                    gr[i % n] += gv;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a.0].needs_grad {
                // dA = G · Bᵀ
                let bt = transposed(bv);
                let mut tmp = vec![0.0; m * k];
                matmul_into(g, bt.data(), &mut tmp, m, n, k);
                let ga = slot(nodes, grads, *a).unwrap();
                ga.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
            if nodes[b.0].needs_grad {
                // dB = Aᵀ · G
                let at = transposed(av);
                let mut tmp = vec![0.0; k * n];
                matmul_into(at.data(), g, &mut tmp, k, m, n);
                let gb = slot(nodes, grads, *b).unwrap();
                gb.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::SliceCols { src, start } => {
            let n = val(*src).shape()[1];
            let w = out.shape()[1];
            if let Some(ga) = slot(nodes, grads, *src) {
                for i in 0..out.shape()[0] {
                    for j in 0..w {
                        ga[i * n + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::SliceRows { src, start } => {
            let n = out.shape()[1];
            if let Some(ga) = slot(nodes, grads, *src) {
                let base = start * n;
                for (i, gv) in g.iter().enumerate() {
                    ga[base + i] += gv;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for i in 0..out.shape()[0] {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        Op::Gather { table, idx } => {
            let d = out.cols();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a).data().to_vec();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * s;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, y) in out.data().iter().enumerate() {
                    ga[i] += g[i] * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a).data().to_vec();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let n = out.cols().max(1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, y) in out.data().chunks(n).enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[r * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::RowSumNormalize { src, sums } => {
            let n = out.cols().max(1);
            if let Some(ga) = slot(nodes, grads, *src) {
                for (r, y) in out.data().chunks(n).enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[r * n + j] += (gr[j] - dot) / sums[r];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let gam = val(*gamma).data().to_vec();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (i, gv) in g.iter().enumerate() {
                    gg[i % n] += gv * xhat[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for (i, gv) in g.iter().enumerate() {
                    gb[i % n] += gv;
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, is) in inv_std.iter().enumerate() {
                    let base = r * n;
                    let dxhat: Vec<f64> = (0..n).map(|j| g[base + j] * gam[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = (0..n).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[base + j] += is * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            }
        }
        Op::Conv1dCollapse {
            x,
            kernel,
            bias,
            mask,
            dims,
        } => conv_backward(nodes, grads, g, (*x, *kernel, *bias), mask, *dims),
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = val(*a).len().max(1) as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::SumSquares(a) => {
            let av = val(*a).data().to_vec();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (x, v) in ga.iter_mut().zip(&av) {
                    *x += 2.0 * v * g[0];
                }
            }
        }
        Op::Bce { pred, labels } => {
            let pv = val(*pred).data().to_vec();
            let n = labels.len() as f64;
            if let Some(gp) = slot(nodes, grads, *pred) {
                for (i, (&q, &y)) in pv.iter().zip(labels).enumerate() {
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&q) {
                        continue;
                    }
                    gp[i] += g[0] * (-y / q + (1.0 - y) / (1.0 - q)) / n;
                }
            }
        }
    }
}

fn conv_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (x, kernel, bias): (Var, Var, Var),
    mask: &[bool],
    d: ConvDims,
) {
    let c = d.channels;
    let pad = d.pad();
    let xv = nodes[x.0].value.data().to_vec();
    let kv = nodes[kernel.0].value.data().to_vec();
    let mut gx = vec![0.0; xv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gbias = vec![0.0; c];
    for b in 0..d.batch {
        let gout = &g[b * c..(b + 1) * c];
        let valid: Vec<usize> = (0..d.len).filter(|&l| mask[b * d.len + l]).collect();
        gbias.iter_mut().zip(gout).for_each(|(p, q)| *p += q);
        if valid.is_empty() {
            continue;
        }
        let inv = 1.0 / valid.len() as f64;
        let dconv: Vec<f64> = gout.iter().map(|v| v * inv).collect();
        for &l in &valid {
            for t in 0..d.width {
                let Some(pos) = (l + t).checked_sub(pad) else { continue };
                if pos >= d.len || !mask[b * d.len + pos] {
                    continue;
                }
                let xbase = (b * d.len + pos) * c;
                for ci in 0..c {
                    let kbase = (t * c + ci) * c;
                    let xval = xv[xbase + ci];
                    let mut acc = 0.0;
                    for o in 0..c {
                        gk[kbase + o] += dconv[o] * xval;
                        acc += dconv[o] * kv[kbase + o];
                    }
                    gx[xbase + ci] += acc;
                }
            }
        }
    }
    if let Some(s) = slot(nodes, grads, x) {
        s.iter_mut().zip(&gx).for_each(|(p, q)| *p += q);
    }
    if let Some(s) = slot(nodes, grads, kernel) {
        s.iter_mut().zip(&gk).for_each(|(p, q)| *p += q);
    }
    if let Some(s) = slot(nodes, grads, bias) {
        s.iter_mut().zip(&gbias).for_each(|(p, q)| *p += q);
    }
}
