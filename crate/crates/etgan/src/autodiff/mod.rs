//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive op's backward rule is itself expressed through tape ops,
//! so gradients are ordinary tape values and can be differentiated again.
//! That closure property is what makes the critic's gradient-penalty term
//! (a second derivative through the discriminator) fall out of the same
//! machinery as first-order training.
//!
//! Convolution needs three kernels to stay closed under differentiation:
//! the forward cross-correlation, the input-gradient (transposed
//! convolution) and the weight-gradient. Each one's backward rule only
//! refers to the other two.

pub mod kernels;

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_multi, run_op_suite, OpCheck};

use crate::error::{Error, Result};
use kernels::Exec;
use std::fmt::Debug;

/// Element type for tape values. Training runs at `f32`; gradient checks run
/// at `f64` because central differences drown in rounding error at `f32`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossy f64 -> T conversion of exact constants.
pub fn fl<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant conversion")
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize, T),
    Scale(usize, T),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    LeakyRelu(usize, T),
    ClampMin(usize, T),
    Sum(usize),
    Mean(usize),
    Expand(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Conv1d { x: usize, w: usize, stride: usize, pad: usize },
    Conv1dIGrad { go: usize, w: usize, stride: usize, pad: usize },
    Conv1dWGrad { x: usize, go: usize, stride: usize, pad: usize },
    Conv2d { x: usize, w: usize, sh: usize, sw: usize, ph: usize, pw: usize },
    Conv2dIGrad { go: usize, w: usize, sh: usize, sw: usize, ph: usize, pw: usize },
    Conv2dWGrad { x: usize, go: usize, sh: usize, sw: usize, ph: usize, pw: usize },
    PixelShuffle1d { a: usize, r: usize },
    PixelUnshuffle1d { a: usize, r: usize },
    SliceChannels { a: usize, start: usize },
    PadChannels { a: usize, start: usize },
    ChannelSum(usize),
    BroadcastChannel(usize),
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Expand(..) => "expand",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dIGrad { .. } => "conv1d_igrad",
            Op::Conv1dWGrad { .. } => "conv1d_wgrad",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dIGrad { .. } => "conv2d_igrad",
            Op::Conv2dWGrad { .. } => "conv2d_wgrad",
            Op::PixelShuffle1d { .. } => "pixel_shuffle_1d",
            Op::PixelUnshuffle1d { .. } => "pixel_unshuffle_1d",
            Op::SliceChannels { .. } => "slice_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::ChannelSum(..) => "channel_sum",
            Op::BroadcastChannel(..) => "broadcast_channel",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by the tape position they
/// differentiate with respect to.
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the backward output w.r.t. `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

/// A differentiation tape. All values, including gradients, live here.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), exec: Exec::Auto }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input value. `requires_grad` marks it as a leaf that
    /// [`Tape::backward`] will produce a gradient for.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let data = self.zip(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Div(a.0, b.0), rg))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), data, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.0), |x| -x)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a.0, c), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), |x| x.sqrt())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), |x| x.abs())
    }

    /// Leaky rectifier, `x.max(slope * x)` for `slope < 1`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a.0, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::ClampMin(a.0, c), |x| if x < c { c } else { x })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.nodes[a.0].data.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(vec![1], vec![s / fl(n as f64)], Op::Mean(a.0), rg)
    }

    /// Broadcast a scalar `[1]` value to an arbitrary shape.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.nodes[a.0].data.len() != 1 {
            return Err(Error::dim(format!(
                "expand: source must be scalar, got shape {:?}",
                self.nodes[a.0].shape
            )));
        }
        let v = self.nodes[a.0].data[0];
        let n: usize = shape.iter().product();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), vec![v; n], Op::Expand(a.0), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::dim(format!("transpose: expected rank 2, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), rg))
    }

    // ---- convolution triad, 1-D ----

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::dim(format!(
                "conv1d: input must be [C_in, T] and weight [C_out, C_in, K], got {sx:?} and {sw:?}"
            )));
        }
        if sx[0] != sw[1] {
            return Err(Error::dim(format!(
                "conv1d: input channel axis {} does not match weight C_in axis {}",
                sx[0], sw[1]
            )));
        }
        if stride < 1 {
            return Err(Error::contract("conv1d: stride must be >= 1".to_string()));
        }
        let (c_in, t_in, c_out, k) = (sx[0], sx[1], sw[0], sw[2]);
        if k > t_in + 2 * pad {
            return Err(Error::dim(format!(
                "conv1d: kernel {k} exceeds padded input length {}",
                t_in + 2 * pad
            )));
        }
        let t_out = kernels::conv1d_out_len(t_in, k, stride, pad);
        let mut out = vec![T::zero(); c_out * t_out];
        kernels::conv1d_fwd_with(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            c_in,
            t_in,
            c_out,
            k,
            stride,
            pad,
            &mut out,
            self.exec,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![c_out, t_out], out, Op::Conv1d { x: x.0, w: w.0, stride, pad }, rg))
    }

    /// Adjoint of [`Tape::conv1d`] in its input: scatter `go` back to an
    /// input of length `t_in`.
    pub fn conv1d_igrad(&mut self, go: Var, w: Var, stride: usize, pad: usize, t_in: usize) -> Result<Var> {
        let (sg, sw) = (&self.nodes[go.0].shape, &self.nodes[w.0].shape);
        if sg.len() != 2 || sw.len() != 3 || sg[0] != sw[0] {
            return Err(Error::dim(format!(
                "conv1d_igrad: expected go [C_out, T'] and weight [C_out, C_in, K], got {sg:?} and {sw:?}"
            )));
        }
        let (c_out, k, c_in) = (sw[0], sw[2], sw[1]);
        if kernels::conv1d_out_len(t_in, k, stride, pad) != sg[1] {
            return Err(Error::dim(format!(
                "conv1d_igrad: go length {} inconsistent with t_in {}",
                sg[1], t_in
            )));
        }
        let mut out = vec![T::zero(); c_in * t_in];
        kernels::conv1d_igrad_with(
            &self.nodes[go.0].data,
            &self.nodes[w.0].data,
            c_in,
            t_in,
            c_out,
            k,
            stride,
            pad,
            &mut out,
            self.exec,
        );
        let rg = self.rg(go) || self.rg(w);
        Ok(self.push(vec![c_in, t_in], out, Op::Conv1dIGrad { go: go.0, w: w.0, stride, pad }, rg))
    }

    /// Adjoint of [`Tape::conv1d`] in its weight.
    pub fn conv1d_wgrad(&mut self, x: Var, go: Var, stride: usize, pad: usize, k: usize) -> Result<Var> {
        let (sx, sg) = (&self.nodes[x.0].shape, &self.nodes[go.0].shape);
        if sx.len() != 2 || sg.len() != 2 {
            return Err(Error::dim(format!(
                "conv1d_wgrad: expected x [C_in, T] and go [C_out, T'], got {sx:?} and {sg:?}"
            )));
        }
        let (c_in, t_in, c_out) = (sx[0], sx[1], sg[0]);
        if kernels::conv1d_out_len(t_in, k, stride, pad) != sg[1] {
            return Err(Error::dim(format!(
                "conv1d_wgrad: go length {} inconsistent with kernel {k}",
                sg[1]
            )));
        }
        let mut out = vec![T::zero(); c_out * c_in * k];
        kernels::conv1d_wgrad_with(
            &self.nodes[x.0].data,
            &self.nodes[go.0].data,
            c_in,
            t_in,
            c_out,
            k,
            stride,
            pad,
            &mut out,
            self.exec,
        );
        let rg = self.rg(x) || self.rg(go);
        Ok(self.push(
            vec![c_out, c_in, k],
            out,
            Op::Conv1dWGrad { x: x.0, go: go.0, stride, pad },
            rg,
        ))
    }

    // ---- convolution triad, 2-D ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d: input must be [C_in, H, W] and weight [C_out, C_in, Kh, Kw], got {sx:?} and {sw:?}"
            )));
        }
        if sx[0] != sw[1] {
            return Err(Error::dim(format!(
                "conv2d: input channel axis {} does not match weight C_in axis {}",
                sx[0], sw[1]
            )));
        }
        let (sh, sw_) = stride;
        let (ph, pw) = pad;
        if sh < 1 || sw_ < 1 {
            return Err(Error::contract("conv2d: strides must be >= 1".to_string()));
        }
        let (c_in, h_in, w_in, c_out, kh, kw) = (sx[0], sx[1], sx[2], sw[0], sw[2], sw[3]);
        if kh > h_in + 2 * ph || kw > w_in + 2 * pw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h_in + 2 * ph,
                w_in + 2 * pw
            )));
        }
        let h_out = kernels::conv2d_out_len(h_in, kh, sh, ph);
        let w_out = kernels::conv2d_out_len(w_in, kw, sw_, pw);
        let mut out = vec![T::zero(); c_out * h_out * w_out];
        kernels::conv2d_fwd_with(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            sh,
            sw_,
            ph,
            pw,
            &mut out,
            self.exec,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            vec![c_out, h_out, w_out],
            out,
            Op::Conv2d { x: x.0, w: w.0, sh, sw: sw_, ph, pw },
            rg,
        ))
    }

    pub fn conv2d_igrad(
        &mut self,
        go: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        hw_in: (usize, usize),
    ) -> Result<Var> {
        let (sg, sw) = (&self.nodes[go.0].shape, &self.nodes[w.0].shape);
        if sg.len() != 3 || sw.len() != 4 || sg[0] != sw[0] {
            return Err(Error::dim(format!(
                "conv2d_igrad: expected go [C_out, H', W'] and weight [C_out, C_in, Kh, Kw], got {sg:?} and {sw:?}"
            )));
        }
        let (c_out, c_in, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (h_in, w_in) = hw_in;
        if kernels::conv2d_out_len(h_in, kh, stride.0, pad.0) != sg[1]
            || kernels::conv2d_out_len(w_in, kw, stride.1, pad.1) != sg[2]
        {
            return Err(Error::dim(format!(
                "conv2d_igrad: go grid {:?} inconsistent with input {h_in}x{w_in}",
                &sg[1..]
            )));
        }
        let mut out = vec![T::zero(); c_in * h_in * w_in];
        kernels::conv2d_igrad_with(
            &self.nodes[go.0].data,
            &self.nodes[w.0].data,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride.0,
            stride.1,
            pad.0,
            pad.1,
            &mut out,
            self.exec,
        );
        let rg = self.rg(go) || self.rg(w);
        Ok(self.push(
            vec![c_in, h_in, w_in],
            out,
            Op::Conv2dIGrad { go: go.0, w: w.0, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 },
            rg,
        ))
    }

    pub fn conv2d_wgrad(
        &mut self,
        x: Var,
        go: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        khw: (usize, usize),
    ) -> Result<Var> {
        let (sx, sg) = (&self.nodes[x.0].shape, &self.nodes[go.0].shape);
        if sx.len() != 3 || sg.len() != 3 {
            return Err(Error::dim(format!(
                "conv2d_wgrad: expected x [C_in, H, W] and go [C_out, H', W'], got {sx:?} and {sg:?}"
            )));
        }
        let (c_in, h_in, w_in, c_out) = (sx[0], sx[1], sx[2], sg[0]);
        let (kh, kw) = khw;
        if kernels::conv2d_out_len(h_in, kh, stride.0, pad.0) != sg[1]
            || kernels::conv2d_out_len(w_in, kw, stride.1, pad.1) != sg[2]
        {
            return Err(Error::dim(format!(
                "conv2d_wgrad: go grid {:?} inconsistent with kernel {kh}x{kw}",
                &sg[1..]
            )));
        }
        let mut out = vec![T::zero(); c_out * c_in * kh * kw];
        kernels::conv2d_wgrad_with(
            &self.nodes[x.0].data,
            &self.nodes[go.0].data,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride.0,
            stride.1,
            pad.0,
            pad.1,
            &mut out,
            self.exec,
        );
        let rg = self.rg(x) || self.rg(go);
        Ok(self.push(
            vec![c_out, c_in, kh, kw],
            out,
            Op::Conv2dWGrad { x: x.0, go: go.0, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 },
            rg,
        ))
    }

    // ---- index permutations ----

    /// `[C*r, T] -> [C, T*r]`, `out[c, t*r + k] = in[c*r + k, t]`.
    pub fn pixel_shuffle_1d(&mut self, a: Var, r: usize) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::dim(format!("pixel_shuffle_1d: expected rank 2, got {sa:?}")));
        }
        if r == 0 || sa[0] % r != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle_1d: channel count {} not divisible by r={r}",
                sa[0]
            )));
        }
        let (c, t) = (sa[0] / r, sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); c * t * r];
        for ch in 0..c {
            for tt in 0..t {
                for kk in 0..r {
                    out[ch * (t * r) + tt * r + kk] = da[(ch * r + kk) * t + tt];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, t * r], out, Op::PixelShuffle1d { a: a.0, r }, rg))
    }

    /// Exact inverse of [`Tape::pixel_shuffle_1d`].
    pub fn pixel_unshuffle_1d(&mut self, a: Var, r: usize) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::dim(format!("pixel_unshuffle_1d: expected rank 2, got {sa:?}")));
        }
        if r == 0 || sa[1] % r != 0 {
            return Err(Error::dim(format!(
                "pixel_unshuffle_1d: time length {} not divisible by r={r}",
                sa[1]
            )));
        }
        let (c, t) = (sa[0], sa[1] / r);
        let da = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); c * r * t];
        for ch in 0..c {
            for tt in 0..t {
                for kk in 0..r {
                    out[(ch * r + kk) * t + tt] = da[ch * (t * r) + tt * r + kk];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c * r, t], out, Op::PixelUnshuffle1d { a: a.0, r }, rg))
    }

    /// Contiguous channel range `[start, start+len)` along axis 0.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() || start + len > sa[0] {
            return Err(Error::dim(format!(
                "slice_channels: range {start}..{} out of bounds for shape {sa:?}",
                start + len
            )));
        }
        let block: usize = sa[1..].iter().product();
        let data = self.nodes[a.0].data[start * block..(start + len) * block].to_vec();
        let mut shape = sa.clone();
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, data, Op::SliceChannels { a: a.0, start }, rg))
    }

    /// Embed `a` into a zero tensor with `total` channels, at channel `start`.
    pub fn pad_channels(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() || start + sa[0] > total {
            return Err(Error::dim(format!(
                "pad_channels: {start}+{} exceeds total {total}",
                sa[0]
            )));
        }
        let block: usize = sa[1..].iter().product();
        let mut shape = sa.clone();
        shape[0] = total;
        let mut data = vec![T::zero(); total * block];
        data[start * block..(start + sa[0]) * block].copy_from_slice(&self.nodes[a.0].data);
        let rg = self.rg(a);
        Ok(self.push(shape, data, Op::PadChannels { a: a.0, start }, rg))
    }

    /// Sum over all non-channel axes: `[C, ...] -> [C]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(Error::dim("channel_sum: rank 0 input".to_string()));
        }
        let c = sa[0];
        let block: usize = sa[1..].iter().product();
        let da = &self.nodes[a.0].data;
        let out: Vec<T> = (0..c)
            .map(|ch| da[ch * block..(ch + 1) * block].iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![c], out, Op::ChannelSum(a.0), rg))
    }

    /// `[C] -> [C, spatial...]`, repeating each channel value.
    pub fn broadcast_channel(&mut self, a: Var, spatial: &[usize]) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 1 {
            return Err(Error::dim(format!("broadcast_channel: expected rank 1, got {sa:?}")));
        }
        let c = sa[0];
        let block: usize = spatial.iter().product();
        let da = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(c * block);
        for ch in 0..c {
            out.extend(std::iter::repeat(da[ch]).take(block));
        }
        let mut shape = vec![c];
        shape.extend_from_slice(spatial);
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::BroadcastChannel(a.0), rg))
    }

    // ---- composed helpers ----

    /// Gated linear unit over the leading channel axis: first half of the
    /// channels times the sigmoid of the second half.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() || sa[0] % 2 != 0 {
            return Err(Error::dim(format!("glu: channel count must be even, got {sa:?}")));
        }
        let half = sa[0] / 2;
        let value = self.slice_channels(a, 0, half)?;
        let gate = self.slice_channels(a, half, half)?;
        let sg = self.sigmoid(gate);
        self.mul(value, sg)
    }

    /// Per-channel standardization over spatial positions of this single
    /// instance, with affine `gamma`/`beta` (both `[C]`). Population variance.
    pub fn instance_norm(&mut self, a: Var, gamma: Var, beta: Var, epsilon: T) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() < 2 {
            return Err(Error::dim(format!("instance_norm: need spatial axes, got {sa:?}")));
        }
        let spatial = sa[1..].to_vec();
        let n: usize = spatial.iter().product();
        if n == 0 {
            return Err(Error::dim("instance_norm: empty spatial extent".to_string()));
        }
        if self.nodes[gamma.0].shape != [sa[0]] || self.nodes[beta.0].shape != [sa[0]] {
            return Err(Error::dim(format!(
                "instance_norm: gamma/beta must be [{}], got {:?} and {:?}",
                sa[0], self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let inv_n = fl::<T>(1.0 / n as f64);
        let cs = self.channel_sum(a)?;
        let mu = self.scale(cs, inv_n);
        let mu_b = self.broadcast_channel(mu, &spatial)?;
        let centered = self.sub(a, mu_b)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.channel_sum(sq)?;
        let var = self.scale(var_sum, inv_n);
        let var_eps = self.add_scalar(var, epsilon);
        let std = self.sqrt(var_eps);
        let std_b = self.broadcast_channel(std, &spatial)?;
        let normed = self.div(centered, std_b)?;
        let gamma_b = self.broadcast_channel(gamma, &spatial)?;
        let beta_b = self.broadcast_channel(beta, &spatial)?;
        let scaled = self.mul(normed, gamma_b)?;
        self.add(scaled, beta_b)
    }

    /// `w [out, in] * x [in] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        let xv = self.reshape(x, &[n, 1])?;
        let y = self.matmul(w, xv)?;
        let m = self.nodes[y.0].shape[0];
        let yv = self.reshape(y, &[m])?;
        self.add(yv, b)
    }

    /// Numerically shifted softmax over a rank-1 vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 1 {
            return Err(Error::dim(format!("softmax: expected rank 1, got {sa:?}")));
        }
        let k = sa[0];
        let max = self.nodes[a.0].data.iter().cloned().fold(T::neg_infinity(), T::max);
        let shifted = self.add_scalar(a, -max);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let s_b = self.expand(s, &[k])?;
        self.div(e, s_b)
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    /// Mean absolute difference between two same-shaped tensors.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean(ad))
    }

    /// Fail with a diagnostic naming the producing op if any recorded value
    /// is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite value in tape node {i} produced by op `{}`",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `output`. Returns a gradient handle
    /// for every `requires_grad` position that influenced the output.
    ///
    /// Gradients are recorded on the tape whether or not `create_graph` is
    /// set; the flag documents intent to differentiate them again and is
    /// validated against `output` being scalar either way.
    pub fn backward(&mut self, output: Var, _create_graph: bool) -> Result<Gradients> {
        if self.nodes[output.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: output must be scalar, got shape {:?}",
                self.nodes[output.0].shape
            )));
        }
        let n0 = self.nodes.len();
        let mut grads: Vec<Option<Var>> = vec![None; n0];
        let one = self.push(vec![1], vec![T::one()], Op::Leaf, false);
        let seed = self.reshape(one, &self.nodes[output.0].shape.clone())?;
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let g = match grads[id] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op;
            self.propagate(id, op, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], parent: usize, contrib: Var) -> Result<()> {
        if !self.nodes[parent].requires_grad {
            return Ok(());
        }
        grads[parent] = Some(match grads[parent] {
            Some(existing) => self.add(existing, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn mask_from(&mut self, src: usize, f: impl Fn(T) -> T) -> Var {
        let data: Vec<T> = self.nodes[src].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[src].shape.clone();
        self.push(shape, data, Op::Leaf, false)
    }

    fn propagate(&mut self, id: usize, op: Op<T>, g: Var, grads: &mut [Option<Var>]) -> Result<()> {
        let out = Var(id);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g)?;
                self.accumulate(grads, b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g)?;
                let ng = self.neg(g);
                self.accumulate(grads, b, ng)?;
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let da = self.mul(g, Var(b))?;
                    self.accumulate(grads, a, da)?;
                }
                if self.nodes[b].requires_grad {
                    let db = self.mul(g, Var(a))?;
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a].requires_grad {
                    let da = self.div(g, Var(b))?;
                    self.accumulate(grads, a, da)?;
                }
                if self.nodes[b].requires_grad {
                    let ratio = self.div(out, Var(b))?;
                    let gb = self.mul(g, ratio)?;
                    let db = self.neg(gb);
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Neg(a) => {
                let da = self.neg(g);
                self.accumulate(grads, a, da)?;
            }
            Op::AddScalar(a, _) => self.accumulate(grads, a, g)?,
            Op::Scale(a, c) => {
                let da = self.scale(g, c);
                self.accumulate(grads, a, da)?;
            }
            Op::Sigmoid(a) => {
                // s' = s * (1 - s)
                let ns = self.neg(out);
                let one_minus = self.add_scalar(ns, T::one());
                let ds = self.mul(out, one_minus)?;
                let da = self.mul(g, ds)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Exp(a) => {
                let da = self.mul(g, out)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Log(a) => {
                let da = self.div(g, Var(a))?;
                self.accumulate(grads, a, da)?;
            }
            Op::Sqrt(a) => {
                let denom = self.scale(out, fl(2.0));
                let da = self.div(g, denom)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Abs(a) => {
                // subgradient at 0 is 0
                let mask = self.mask_from(a, |x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                let da = self.mul(g, mask)?;
                self.accumulate(grads, a, da)?;
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.mask_from(a, |x| if x > T::zero() { T::one() } else { slope });
                let da = self.mul(g, mask)?;
                self.accumulate(grads, a, da)?;
            }
            Op::ClampMin(a, c) => {
                let mask = self.mask_from(a, |x| if x < c { T::zero() } else { T::one() });
                let da = self.mul(g, mask)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].shape.clone();
                let da = self.expand(g, &shape)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Mean(a) => {
                let shape = self.nodes[a].shape.clone();
                let n = self.nodes[a].data.len();
                let e = self.expand(g, &shape)?;
                let da = self.scale(e, fl(1.0 / n as f64));
                self.accumulate(grads, a, da)?;
            }
            Op::Expand(a) => {
                let s = self.sum(g);
                let da = self.reshape(s, &self.nodes[a].shape.clone())?;
                self.accumulate(grads, a, da)?;
            }
            Op::Matmul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bt = self.transpose(Var(b))?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(grads, a, da)?;
                }
                if self.nodes[b].requires_grad {
                    let at = self.transpose(Var(a))?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Transpose(a) => {
                let da = self.transpose(g)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Conv1d { x, w, stride, pad } => {
                let t_in = self.nodes[x].shape[1];
                let k = self.nodes[w].shape[2];
                if self.nodes[x].requires_grad {
                    let dx = self.conv1d_igrad(g, Var(w), stride, pad, t_in)?;
                    self.accumulate(grads, x, dx)?;
                }
                if self.nodes[w].requires_grad {
                    let dw = self.conv1d_wgrad(Var(x), g, stride, pad, k)?;
                    self.accumulate(grads, w, dw)?;
                }
            }
            Op::Conv1dIGrad { go, w, stride, pad } => {
                let k = self.nodes[w].shape[2];
                if self.nodes[go].requires_grad {
                    let dgo = self.conv1d(g, Var(w), stride, pad)?;
                    self.accumulate(grads, go, dgo)?;
                }
                if self.nodes[w].requires_grad {
                    let dw = self.conv1d_wgrad(g, Var(go), stride, pad, k)?;
                    self.accumulate(grads, w, dw)?;
                }
            }
            Op::Conv1dWGrad { x, go, stride, pad } => {
                let t_in = self.nodes[x].shape[1];
                if self.nodes[x].requires_grad {
                    let dx = self.conv1d_igrad(Var(go), g, stride, pad, t_in)?;
                    self.accumulate(grads, x, dx)?;
                }
                if self.nodes[go].requires_grad {
                    let dgo = self.conv1d(Var(x), g, stride, pad)?;
                    self.accumulate(grads, go, dgo)?;
                }
            }
            Op::Conv2d { x, w, sh, sw, ph, pw } => {
                let hw_in = (self.nodes[x].shape[1], self.nodes[x].shape[2]);
                let khw = (self.nodes[w].shape[2], self.nodes[w].shape[3]);
                if self.nodes[x].requires_grad {
                    let dx = self.conv2d_igrad(g, Var(w), (sh, sw), (ph, pw), hw_in)?;
                    self.accumulate(grads, x, dx)?;
                }
                if self.nodes[w].requires_grad {
                    let dw = self.conv2d_wgrad(Var(x), g, (sh, sw), (ph, pw), khw)?;
                    self.accumulate(grads, w, dw)?;
                }
            }
            Op::Conv2dIGrad { go, w, sh, sw, ph, pw } => {
                let khw = (self.nodes[w].shape[2], self.nodes[w].shape[3]);
                if self.nodes[go].requires_grad {
                    let dgo = self.conv2d(g, Var(w), (sh, sw), (ph, pw))?;
                    self.accumulate(grads, go, dgo)?;
                }
                if self.nodes[w].requires_grad {
                    let dw = self.conv2d_wgrad(g, Var(go), (sh, sw), (ph, pw), khw)?;
                    self.accumulate(grads, w, dw)?;
                }
            }
            Op::Conv2dWGrad { x, go, sh, sw, ph, pw } => {
                let hw_in = (self.nodes[x].shape[1], self.nodes[x].shape[2]);
                if self.nodes[x].requires_grad {
                    let dx = self.conv2d_igrad(Var(go), g, (sh, sw), (ph, pw), hw_in)?;
                    self.accumulate(grads, x, dx)?;
                }
                if self.nodes[go].requires_grad {
                    let dgo = self.conv2d(Var(x), g, (sh, sw), (ph, pw))?;
                    self.accumulate(grads, go, dgo)?;
                }
            }
            Op::PixelShuffle1d { a, r } => {
                let da = self.pixel_unshuffle_1d(g, r)?;
                self.accumulate(grads, a, da)?;
            }
            Op::PixelUnshuffle1d { a, r } => {
                let da = self.pixel_shuffle_1d(g, r)?;
                self.accumulate(grads, a, da)?;
            }
            Op::SliceChannels { a, start } => {
                let total = self.nodes[a].shape[0];
                let da = self.pad_channels(g, start, total)?;
                self.accumulate(grads, a, da)?;
            }
            Op::PadChannels { a, start } => {
                let len = self.nodes[a].shape[0];
                let da = self.slice_channels(g, start, len)?;
                self.accumulate(grads, a, da)?;
            }
            Op::ChannelSum(a) => {
                let spatial = self.nodes[a].shape[1..].to_vec();
                let da = self.broadcast_channel(g, &spatial)?;
                self.accumulate(grads, a, da)?;
            }
            Op::BroadcastChannel(a) => {
                let da = self.channel_sum(g)?;
                self.accumulate(grads, a, da)?;
            }
            Op::Reshape(a) => {
                let da = self.reshape(g, &self.nodes[a].shape.clone())?;
                self.accumulate(grads, a, da)?;
            }
        }
        Ok(())
    }
}
