use std::sync::Arc;

use super::conv::{self, Conv1dGeom, Conv1dOpts, Conv2dGeom, Conv2dOpts, ConvT1dGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    LogClamp(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Glu(Var),
    MatMul(Var, Var, [usize; 3]),
    MatMulConst(Var, Arc<[f64]>, [usize; 3]),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    ConvT1d { x: Var, w: Var, b: Option<Var>, geom: ConvT1dGeom },
    AvgPool1d { x: Var, channels: usize, len: usize, kernel: usize, stride: usize, out_len: usize },
}

impl std::fmt::Debug for Conv1dGeom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "conv1d[{}x{} -> {}x{}]", self.c_in, self.len, self.c_out, self.out_len)
    }
}

impl std::fmt::Debug for Conv2dGeom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "conv2d[{}x{}x{} -> {}x{}x{}]", self.c_in, self.h, self.w, self.c_out, self.oh, self.ow)
    }
}

impl std::fmt::Debug for ConvT1dGeom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "convT1d[{}x{} -> {}x{}]", self.c_in, self.len, self.c_out, self.out_len)
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order so adjoints can be replayed once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(acc: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (a, &gv)) in acc.iter_mut().zip(g).enumerate() {
        *a += f(i, gv);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and re-arms the tape.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>, value: Vec<f64>, requires_grad: bool) -> Var {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape/data mismatch");
        self.push(shape, value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Leaf that takes part in differentiation iff the tensor requires grad.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    /// A constant copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.leaf(shape, value, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        same_shape(&na.shape, &nb.shape, what)?;
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), value, na.requires_grad || nb.requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, rg, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::LogClamp(a, floor), |x| x.max(floor).ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, value, rg, Op::Reshape(a)))
    }

    /// `out[i] = a[indices[i]]` viewed with `shape`; the adjoint scatter-adds.
    pub fn gather(&mut self, a: Var, indices: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim(format!("gather shape {shape:?} vs {} indices", indices.len())));
        }
        let n = &self.nodes[a.0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n.value.len()) {
            return Err(Error::dim(format!("gather index {bad} out of bounds for {:?}", n.shape)));
        }
        let value = indices.iter().map(|&i| n.value[i]).collect();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rg, Op::Gather(a, indices)))
    }

    /// Columns `[start, start+len)` of a `[R × C]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::dim(format!("slice_cols expects a matrix, got {shape:?}")));
        };
        if start + len > cols || len == 0 {
            return Err(Error::dim(format!("column slice {start}+{len} out of {cols}")));
        }
        let idx: Vec<usize> = (0..rows).flat_map(|r| (start..start + len).map(move |c| r * cols + c)).collect();
        self.gather(a, idx.into(), [rows, len])
    }

    /// 2D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::dim(format!("transpose expects a matrix, got {shape:?}")));
        };
        let idx: Vec<usize> = (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        self.gather(a, idx.into(), [cols, rows])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            let n = &self.nodes[p.0];
            if n.shape[1..] != tail[..] {
                return Err(Error::dim(format!("concat: {:?} vs trailing {tail:?}", n.shape)));
            }
            lead += n.shape[0];
            value.extend_from_slice(&n.value);
            rg |= n.requires_grad;
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, value, rg, Op::Concat(parts.to_vec())))
    }

    /// Gated linear unit over the leading axis: `a[..C] ⊙ σ(a[C..])`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let lead = n.shape[0];
        if !lead.is_multiple_of(2) {
            return Err(Error::dim(format!("glu needs an even leading extent, got {lead}")));
        }
        let half = n.value.len() / 2;
        let (v, g) = n.value.split_at(half);
        let value = v.iter().zip(g).map(|(&x, &y)| x * sigmoid(y)).collect();
        let mut shape = n.shape.clone();
        shape[0] = lead / 2;
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rg, Op::Glu(a)))
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim(format!("matmul expects matrices, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents {k} vs {k2}")));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b, [m, k, n])))
    }

    /// `[m × k] · B` for a constant row-major `[k × n]` matrix shared by reference.
    pub fn matmul_const(&mut self, a: Var, b: Arc<[f64]>, (k, n): (usize, usize)) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let &[m, ka] = &sa[..] else {
            return Err(Error::dim(format!("matmul_const expects a matrix, got {sa:?}")));
        };
        if ka != k || b.len() != k * n {
            return Err(Error::dim(format!("matmul_const: [{m}x{ka}] by [{k}x{n}] ({} values)", b.len())));
        }
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulConst(a, b, [m, k, n])))
    }

    /// Cross-correlation of `[C_in × T]` with `[C_out × C_in/groups × k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv1dOpts) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[c_in, len], &[c_out, cin_g, kernel]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(format!("conv1d: input {xs:?}, weight {ws:?}")));
        };
        if opts.stride == 0 || opts.dilation == 0 || opts.groups == 0 {
            return Err(Error::Config("conv1d stride, dilation and groups must be positive".into()));
        }
        if c_in % opts.groups != 0 || c_out % opts.groups != 0 || cin_g != c_in / opts.groups {
            return Err(Error::dim(format!(
                "conv1d: weight expects {cin_g} input channels per group, input has {c_in} in {} groups",
                opts.groups
            )));
        }
        self.check_bias(b, c_out)?;
        let out_len = conv::conv1d_out_len(len, kernel, &opts)
            .ok_or_else(|| Error::dim(format!("conv1d: input length {len} shorter than kernel span")))?;
        let geom = Conv1dGeom { c_in, len, c_out, kernel, out_len, opts };
        let value = conv::conv1d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![c_out, out_len], value, rg, Op::Conv1d { x, w, b, geom }))
    }

    /// 2D cross-correlation of `[C_in × H × W]` with `[C_out × C_in × kH × kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[c_in, h, wd], &[c_out, c_in2, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(format!("conv2d: input {xs:?}, weight {ws:?}")));
        };
        if c_in != c_in2 {
            return Err(Error::dim(format!("conv2d: weight expects {c_in2} input channels, got {c_in}")));
        }
        if opts.stride.0 == 0 || opts.stride.1 == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        self.check_bias(b, c_out)?;
        let (oh, ow) = conv::conv2d_out_len((h, wd), (kh, kw), &opts)
            .ok_or_else(|| Error::dim(format!("conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")))?;
        let geom = Conv2dGeom { c_in, h, w: wd, c_out, kh, kw, oh, ow, opts };
        let value = conv::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![c_out, oh, ow], value, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `[C_in × T]` with weight `[C_in × C_out × k]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[c_in, len], &[c_in2, c_out, kernel]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(format!("conv_transpose1d: input {xs:?}, weight {ws:?}")));
        };
        if c_in != c_in2 {
            return Err(Error::dim(format!("conv_transpose1d: weight expects {c_in2} input channels, got {c_in}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose1d stride must be positive".into()));
        }
        self.check_bias(b, c_out)?;
        let out_len = conv::conv_transpose1d_out_len(len, kernel, stride, padding)
            .ok_or_else(|| Error::dim("conv_transpose1d: padding consumes the whole output"))?;
        let geom = ConvT1dGeom { c_in, len, c_out, kernel, stride, padding, out_len };
        let value = conv::conv_transpose1d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![c_out, out_len], value, rg, Op::ConvT1d { x, w, b, geom }))
    }

    /// Average pooling along the last axis of `[C × L]`.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [channels, len] = xs[..] else {
            return Err(Error::dim(format!("avg_pool1d expects [C, L], got {xs:?}")));
        };
        if kernel == 0 || stride == 0 || len < kernel {
            return Err(Error::dim(format!("avg_pool1d: kernel {kernel} stride {stride} on length {len}")));
        }
        let out_len = (len - kernel) / stride + 1;
        let xv = self.value(x);
        let inv = 1.0 / kernel as f64;
        let mut value = Vec::with_capacity(channels * out_len);
        for c in 0..channels {
            let row = &xv[c * len..(c + 1) * len];
            for t in 0..out_len {
                value.push(row[t * stride..t * stride + kernel].iter().sum::<f64>() * inv);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![channels, out_len], value, rg, Op::AvgPool1d { x, channels, len, kernel, stride, out_len }))
    }

    fn check_bias(&self, b: Option<Var>, c_out: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(format!("bias shape {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Replays adjoints of the scalar `loss` in reverse record order.
    ///
    /// The tape is consumed: recorded values are released and a second call
    /// fails until the tape is cleared and re-recorded.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a previous backward pass".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients { grads: vec![None; self.nodes.len()] };
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.grads[i] = Some(grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        self.nodes.iter_mut().for_each(|n| {
            n.value = Vec::new();
            n.op = Op::Leaf;
        });
        self.consumed = true;
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(nodes, grads, a, &|s| axpy(s, g, |_, gv| gv));
                acc(nodes, grads, b, &|s| axpy(s, g, |_, gv| gv));
            }
            &Op::Sub(a, b) => {
                acc(nodes, grads, a, &|s| axpy(s, g, |_, gv| gv));
                acc(nodes, grads, b, &|s| axpy(s, g, |_, gv| -gv));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| gv * bv[j]));
                acc(nodes, grads, b, &|s| axpy(s, g, |j, gv| gv * av[j]));
            }
            &Op::Scale(a, c) => acc(nodes, grads, a, &|s| axpy(s, g, |_, gv| gv * c)),
            &Op::AddScalar(a) => acc(nodes, grads, a, &|s| axpy(s, g, |_, gv| gv)),
            &Op::Square(a) => {
                let av = val(a);
                acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| 2.0 * av[j] * gv));
            }
            &Op::Abs(a) => {
                let av = val(a);
                acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| gv * if av[j] > 0.0 { 1.0 } else if av[j] < 0.0 { -1.0 } else { 0.0 }));
            }
            &Op::Sqrt(a) => acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| 0.5 * gv / out[j])),
            &Op::LogClamp(a, floor) => {
                let av = val(a);
                acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| if av[j] > floor { gv / av[j] } else { 0.0 }));
            }
            &Op::Sigmoid(a) => acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| gv * out[j] * (1.0 - out[j]))),
            &Op::Tanh(a) => acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| gv * (1.0 - out[j] * out[j]))),
            &Op::LeakyRelu(a, slope) => {
                let av = val(a);
                acc(nodes, grads, a, &|s| axpy(s, g, |j, gv| if av[j] > 0.0 { gv } else { slope * gv }));
            }
            &Op::Sum(a) => acc(nodes, grads, a, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(a) => {
                let inv = g[0] / nodes[a.0].value.len() as f64;
                acc(nodes, grads, a, &|s| s.iter_mut().for_each(|v| *v += inv));
            }
            &Op::Reshape(a) => acc(nodes, grads, a, &|s| axpy(s, g, |_, gv| gv)),
            Op::Gather(a, idx) => acc(nodes, grads, *a, &|s| {
                for (&j, &gv) in idx.iter().zip(g) {
                    s[j] += gv;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    let seg = &g[off..off + n];
                    acc(nodes, grads, p, &|s| axpy(s, seg, |_, gv| gv));
                    off += n;
                }
            }
            &Op::Glu(a) => {
                let av = val(a);
                let half = av.len() / 2;
                acc(nodes, grads, a, &|s| {
                    for j in 0..half {
                        let sg = sigmoid(av[half + j]);
                        s[j] += g[j] * sg;
                        s[half + j] += g[j] * av[j] * sg * (1.0 - sg);
                    }
                });
            }
            &Op::MatMul(a, b, [m, k, n]) => {
                let (av, bv) = (val(a), val(b));
                // dA = G · Bᵀ
                acc(nodes, grads, a, &|s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(nodes, grads, b, &|s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulConst(a, bv, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                acc(nodes, grads, *a, &|s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = conv::conv1d_backward(geom, val(*x), val(*w), g, need);
                add_vec(nodes, grads, *x, gx);
                add_vec(nodes, grads, *w, gw);
                if let Some(b) = b {
                    add_vec(nodes, grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = conv::conv2d_backward(geom, val(*x), val(*w), g, need);
                add_vec(nodes, grads, *x, gx);
                add_vec(nodes, grads, *w, gw);
                if let Some(b) = b {
                    add_vec(nodes, grads, *b, gb);
                }
            }
            Op::ConvT1d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = conv::conv_transpose1d_backward(geom, val(*x), val(*w), g, need);
                add_vec(nodes, grads, *x, gx);
                add_vec(nodes, grads, *w, gw);
                if let Some(b) = b {
                    add_vec(nodes, grads, *b, gb);
                }
            }
            &Op::AvgPool1d { x, channels, len, kernel, stride, out_len } => {
                let inv = 1.0 / kernel as f64;
                acc(nodes, grads, x, &|s| {
                    for c in 0..channels {
                        for t in 0..out_len {
                            let gv = g[c * out_len + t] * inv;
                            for v in &mut s[c * len + t * stride..c * len + t * stride + kernel] {
                                *v += gv;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])) {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
    f(slot);
}

fn add_vec(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, d: Option<Vec<f64>>) {
    let Some(d) = d else { return };
    if !nodes[v.0].requires_grad {
        return;
    }
    match grads[v.0].as_mut() {
        Some(slot) => slot.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        None => grads[v.0] = Some(d),
    }
}
