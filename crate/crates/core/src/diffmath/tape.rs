//! Operation tape and reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends one node to the tape, so the
//! node list is topologically ordered by construction. [`Tape::backward`]
//! walks it in reverse and applies each primitive's vector-Jacobian product.

use super::conv::{self, ConvGeom};
use super::tensor::{gemm, Scalar, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Expand(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ChannelBias(..) => "channel_bias",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of evaluated primitives.
///
/// A tape is single-owner; independent tapes share nothing and can live on
/// different threads.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

/// Elementwise binary operands either agree in shape, or one operand's shape
/// equals the other's with the leading (batch) dimension removed.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, DiffError> {
    if a == b || (!a.is_empty() && &a[1..] == b) {
        Ok(a.to_vec())
    } else if !b.is_empty() && &b[1..] == a {
        Ok(b.to_vec())
    } else {
        Err(shape_err(op, format!("{a:?} vs {b:?}")))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(S::from_f64_lossy(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Position and operation name of the first node holding a NaN or Inf.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name(), n.value.shape().to_vec()))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<Var, DiffError> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let (la, lb) = (da.len(), db.len());
        let out: Vec<S> = if la == lb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64_lossy(c);
        self.unary(x, |v| v * cs, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64_lossy(c);
        self.unary(x, |v| v + cs, Op::Shift(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.recip(), Op::Recip(x))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements, accumulated in 64 bits.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::from_f64_lossy(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::from_f64_lossy(s)), Op::Mean(x), rg)
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let Some((&n, rest)) = shape.split_last() else {
            return Err(shape_err("sum_last", "scalar input".into()));
        };
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| S::from_f64_lossy(row.iter().map(|v| v.as_f64()).sum()))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(rest.to_vec(), out), Op::SumLast(x), rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { input: x, axis, start }, rg))
    }

    /// Repeats `x` along a new leading dimension of size `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var, DiffError> {
        if n == 0 {
            return Err(shape_err("expand", "zero repeat count".into()));
        }
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Expand(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- convolution ----------------------------------------------------

    /// Zero-padded strided convolution: `x [B, C, H, W]`, `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (out_h, out_w) = match (
            ConvGeom::conv_out(sx[2], sw[2], stride, pad),
            ConvGeom::conv_out(sx[3], sw[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {sw:?} stride {stride} pad {pad} does not fit {sx:?}"),
                ))
            }
        };
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let out =
            conv::conv2d_forward(&geom, sx[0], sw[0], self.value(x).data(), self.value(w).data());
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(vec![sx[0], sw[0], out_h, out_w], out),
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Transposed convolution producing `[B, C, out_h, out_w]` from
    /// `x [B, O, H, W]` and `w [O, C, kh, kw]`; the adjoint of
    /// `conv2d(., w, stride, pad)` applied to a `[B, C, out_h, out_w]` input.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var, DiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(shape_err("conv_transpose2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let matches = ConvGeom::conv_out(out_hw.0, sw[2], stride, pad) == Some(sx[2])
            && ConvGeom::conv_out(out_hw.1, sw[3], stride, pad) == Some(sx[3]);
        if !matches {
            return Err(shape_err(
                "conv_transpose2d",
                format!("output {out_hw:?} is inconsistent with input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            channels: sw[1],
            height: out_hw.0,
            width: out_hw.1,
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
            out_h: sx[2],
            out_w: sx[3],
        };
        let out = conv::conv_transpose2d_forward(
            &geom,
            sx[0],
            sx[1],
            self.value(x).data(),
            self.value(w).data(),
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(vec![sx[0], sw[1], out_hw.0, out_hw.1], out),
            Op::ConvTranspose2d { x, w, geom },
            rg,
        ))
    }

    /// Adds `b [C]` to every position of channel `c` in `x [B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(shape_err("channel_bias", format!("input {sx:?}, bias {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bias[i % sx[1]];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(sx, out), Op::ChannelBias(x, b), rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Gradients of the scalar `output` with respect to every recorded
    /// [`Tape::param`].
    pub fn backward(&self, output: Var) -> Result<Gradients<S>, DiffError> {
        let out_shape = self.shape(output);
        if self.value(output).numel() != 1 {
            return Err(DiffError::NonScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![S::one()]);
        let mut leaf_grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| (matches!(n.op, Op::Leaf) && n.requires_grad).then(|| n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads: leaf_grads, shapes })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.value(v).numel()]);
        f(slot);
    }

    /// Adds `g * d(out)/d(operand)` into a possibly broadcast operand.
    fn accum_broadcast(
        &self,
        grads: &mut [Option<Vec<S>>],
        v: Var,
        g: &[S],
        factor: impl Fn(usize) -> S,
    ) {
        let len = self.value(v).numel();
        self.accum(grads, v, |dst| {
            if len == g.len() {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = *d + g[i] * factor(i);
                }
            } else {
                for (i, &gi) in g.iter().enumerate() {
                    dst[i % len] = dst[i % len] + gi * factor(i);
                }
            }
        });
    }

    fn unary_grad(
        &self,
        grads: &mut [Option<Vec<S>>],
        x: Var,
        g: &[S],
        f: impl Fn(S, S) -> S,
        out: &[S],
    ) {
        let xs = self.value(x).data();
        self.accum(grads, x, |dst| {
            for i in 0..dst.len() {
                dst[i] = dst[i] + g[i] * f(xs[i], out[i]);
            }
        });
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |dst| gemm(m, n, k, g, false, vb, true, dst, true));
                self.accum(grads, *b, |dst| gemm(k, m, n, va, true, g, false, dst, true));
            }
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, g, |_| S::one());
                self.accum_broadcast(grads, *b, g, |_| S::one());
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, g, |_| S::one());
                self.accum_broadcast(grads, *b, g, |_| -S::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum_broadcast(grads, *a, g, |j| vb[j % vb.len()]);
                self.accum_broadcast(grads, *b, g, |j| va[j % va.len()]);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                self.accum_broadcast(grads, *a, g, |j| vb[j % vb.len()].recip());
                // d(a/b)/db = -(a/b)/b
                self.accum_broadcast(grads, *b, g, |j| -out[j] / vb[j % vb.len()]);
            }
            Op::Neg(x) => self.unary_grad(grads, *x, g, |_, _| -S::one(), out),
            Op::Scale(x, c) => {
                let cs = S::from_f64_lossy(*c);
                self.unary_grad(grads, *x, g, |_, _| cs, out)
            }
            Op::Shift(x) => self.unary_grad(grads, *x, g, |_, _| S::one(), out),
            Op::Tanh(x) => self.unary_grad(grads, *x, g, |_, y| S::one() - y * y, out),
            Op::Sigmoid(x) => self.unary_grad(grads, *x, g, |_, y| y * (S::one() - y), out),
            Op::Exp(x) => self.unary_grad(grads, *x, g, |_, y| y, out),
            Op::Log(x) => self.unary_grad(grads, *x, g, |v, _| v.recip(), out),
            Op::Softplus(x) => self.unary_grad(grads, *x, g, |v, _| sigmoid(v), out),
            Op::Relu(x) => self.unary_grad(
                grads,
                *x,
                g,
                |v, _| if v > S::zero() { S::one() } else { S::zero() },
                out,
            ),
            Op::Square(x) => {
                let two = S::from_f64_lossy(2.0);
                self.unary_grad(grads, *x, g, |v, _| two * v, out)
            }
            Op::Sqrt(x) => {
                let half = S::from_f64_lossy(0.5);
                self.unary_grad(grads, *x, g, |_, y| half / y, out)
            }
            Op::Recip(x) => self.unary_grad(grads, *x, g, |_, y| -(y * y), out),
            Op::Sum(x) => {
                let g0 = g[0];
                self.accum(grads, *x, |dst| dst.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / S::from_usize(self.value(*x).numel()).unwrap();
                self.accum(grads, *x, |dst| dst.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::SumLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                self.accum(grads, *x, |dst| {
                    for (row, &gr) in dst.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d = *d + gr);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.accum(grads, v, |dst| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                            d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let ishape = self.shape(*input);
                let (outer, n, inner) = split_axis(ishape, *axis);
                let len = node.value.shape()[*axis];
                self.accum(grads, *input, |dst| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let d = &mut dst[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Expand(x) => {
                let len = self.value(*x).numel();
                self.accum(grads, *x, |dst| {
                    for chunk in g.chunks(len) {
                        dst.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |dst| dst.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b));
            }
            Op::Conv2d { x, w, geom } => {
                let batch = self.shape(*x)[0];
                let out_ch = self.shape(*w)[0];
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.rg(*x).then(|| vec![S::zero(); vx.len()]);
                let mut dw = self.rg(*w).then(|| vec![S::zero(); vw.len()]);
                conv::conv2d_backward(geom, batch, out_ch, vx, vw, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.accum(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, &b)| *a = *a + b));
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let batch = self.shape(*x)[0];
                let in_ch = self.shape(*x)[1];
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.rg(*x).then(|| vec![S::zero(); vx.len()]);
                let mut dw = self.rg(*w).then(|| vec![S::zero(); vw.len()]);
                conv::conv_transpose2d_backward(
                    geom,
                    batch,
                    in_ch,
                    vx,
                    vw,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, &b)| *a = *a + b));
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b));
                }
            }
            Op::ChannelBias(x, b) => {
                let sx = self.shape(*x);
                let channels = sx[1];
                let inner: usize = sx[2..].iter().product();
                self.accum(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v));
                self.accum(grads, *b, |d| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
                        d[i % channels] = d[i % channels] + S::from_f64_lossy(s);
                    }
                });
            }
        }
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(v: S) -> S {
    v.max(S::zero()) + (-v.abs()).exp().ln_1p()
}

/// Gradients returned by [`Tape::backward`], one entry per recorded param.
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a recorded param; a param that does not influence the
    /// output gets zeros. `None` for vars that were not recorded as params.
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        match (self.grads.get(v.0)?, self.shapes.get(v.0)?) {
            (Some(g), _) => Some(g.clone()),
            (None, Some(shape)) => Some(Tensor::zeros(shape)),
            (None, None) => None,
        }
    }

    /// Like [`Gradients::get`] but moves the tensor out.
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        match (self.grads.get_mut(v.0)?.take(), self.shapes.get(v.0)?) {
            (Some(g), _) => Some(g),
            (None, Some(shape)) => Some(Tensor::zeros(shape)),
            (None, None) => None,
        }
    }
}
