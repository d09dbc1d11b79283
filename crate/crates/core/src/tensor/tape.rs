use super::conv::{self, ConvGeometry};
use super::{broadcast_shape, upsample, RowMap, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Sigmoid,
    Log,
    Relu,
    ClampMin(f64),
    Affine { scale: f64, shift: f64 },
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        kind: BinaryKind,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations in execution order; node indices are a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<Tensor> {
        let node = &self.nodes[var.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, input: Var, kind: UnaryKind, name: &'static str) -> Result<Var> {
        let x = self.value(input);
        let value = match kind {
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Log => x.map(f64::ln),
            UnaryKind::Relu => x.map(|v| v.max(0.0)),
            UnaryKind::ClampMin(c) => x.map(|v| v.max(c)),
            UnaryKind::Affine { scale, shift } => x.map(|v| scale * v + shift),
        };
        self.push(value, Op::Unary { input, kind }, &[input], name)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp, "exp")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid, "sigmoid")
    }

    /// Natural log. Callers clamp away from zero first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log, "log")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu, "relu")
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.unary(x, UnaryKind::ClampMin(min), "clamp_min")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Affine { scale, shift }, "affine")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`.
    pub fn complement(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    fn binary(&mut self, lhs: Var, rhs: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ra = RowMap::new(&out_shape, a.shape());
            let rb = RowMap::new(&out_shape, b.shape());
            let (ad, bd) = (a.data(), b.data());
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for (&sa, &sb) in ra.starts.iter().zip(&rb.starts) {
                out.extend((0..ra.row).map(|k| f(ad[sa + k * ra.step], bd[sb + k * rb.step])));
            }
            out
        };
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::Binary { lhs, rhs, kind }, &[lhs, rhs], name)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, BinaryKind::Div, "div")
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (x.shape(), k.shape()) else {
            return Err(Error::Shape(format!(
                "conv2d expects NCHW input and OIHW kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        };
        if c != kc {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"
            )));
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let mut out = vec![0.0; n * o * geometry.out_pixels()];
        let mut cols = vec![0.0; n * geometry.patch_len() * geometry.out_pixels()];
        conv::conv_forward(&geometry, x.data(), k.data(), &mut out, &mut cols);
        let value = Tensor::new(&[n, o, geometry.out_h, geometry.out_w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
                cols,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    /// Reduction that keeps reduced axes with extent 1. `None` reduces all axes.
    pub fn reduce(&mut self, input: Var, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        let mut out_shape = x.shape().to_vec();
        match axes {
            None => out_shape.iter_mut().for_each(|d| *d = 1),
            Some(axes) => {
                for &axis in axes {
                    if axis >= rank {
                        return Err(Error::InvalidAxis { axis, rank });
                    }
                    out_shape[axis] = 1;
                }
            }
        }
        let rows = RowMap::new(x.shape(), &out_shape);
        let out_len: usize = out_shape.iter().product();
        let count = (x.numel() / out_len) as f64;
        let xd = x.data();
        let (data, argmax) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0.0; out_len];
                rows.for_each(|j, o| acc[o] += xd[j]);
                if kind == ReduceKind::Mean {
                    acc.iter_mut().for_each(|v| *v /= count);
                }
                (acc, Vec::new())
            }
            ReduceKind::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_len];
                let mut arg = vec![usize::MAX; out_len];
                rows.for_each(|j, o| {
                    let v = xd[j];
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = j;
                    }
                });
                (best, arg)
            }
        };
        let value = Tensor::new(&out_shape, data)?;
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        self.push(value, Op::Reduce { input, kind, argmax }, &[input], name)
    }

    pub fn sum(&mut self, input: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, axes)
    }

    pub fn mean(&mut self, input: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, axes)
    }

    pub fn max(&mut self, input: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(input, ReduceKind::Max, axes)
    }

    pub fn upsample_bilinear(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let x = self.value(input);
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::Shape(format!(
                "bilinear upsample expects NCHW, got {:?}",
                x.shape()
            )));
        };
        if target_h < h || target_w < w {
            return Err(Error::InvalidArgument(format!(
                "bilinear upsample cannot shrink {h}x{w} to {target_h}x{target_w}"
            )));
        }
        let data = upsample::forward(x.data(), n * c, h, w, target_h, target_w);
        let value = Tensor::new(&[n, c, target_h, target_w], data)?;
        self.push(value, Op::Upsample { input }, &[input], "upsample_bilinear")
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let extent = x.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for extent {extent}",
                start + len
            )));
        }
        let (outer, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Narrow { input, axis, start }, &[input], "narrow")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        let rank = base_shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base_shape:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let len = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    /// Reverse pass from a single-element root. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads.push((i, g));
                    }
                }
                Op::Unary { input, kind } => {
                    let x = self.value(*input).data();
                    let y = node.value.data();
                    let gx: Vec<f64> = match *kind {
                        UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                        UnaryKind::ClampMin(c) => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > c { g } else { 0.0 })
                            .collect(),
                        UnaryKind::Affine { scale, .. } => g.iter().map(|g| g * scale).collect(),
                    };
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Binary { lhs, rhs, kind } => {
                    let out_shape = node.value.shape();
                    let (a, b) = (self.value(*lhs), self.value(*rhs));
                    let want_a = self.requires_grad(*lhs);
                    let want_b = self.requires_grad(*rhs);
                    let full = |len: usize| len == g.len();
                    let ra = (!full(a.numel()) || a.shape() != out_shape).then(|| RowMap::new(out_shape, a.shape()));
                    let rb = (!full(b.numel()) || b.shape() != out_shape).then(|| RowMap::new(out_shape, b.shape()));
                    // Expands an operand to the output layout.
                    let expand = |t: &Tensor, r: &Option<RowMap>| -> Vec<f64> {
                        match r {
                            None => t.data().to_vec(),
                            Some(r) => {
                                let mut out = vec![0.0; g.len()];
                                r.for_each(|o, i| out[o] = t.data()[i]);
                                out
                            }
                        }
                    };
                    let bx = matches!(kind, BinaryKind::Mul | BinaryKind::Div).then(|| expand(b, &rb));
                    let ga: Option<Vec<f64>> = want_a.then(|| match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => g.iter().zip(bx.as_ref().unwrap()).map(|(g, b)| g * b).collect(),
                        BinaryKind::Div => g.iter().zip(bx.as_ref().unwrap()).map(|(g, b)| g / b).collect(),
                    });
                    let gb: Option<Vec<f64>> = want_b.then(|| match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                        BinaryKind::Mul => {
                            let ax = expand(a, &ra);
                            g.iter().zip(&ax).map(|(g, a)| g * a).collect()
                        }
                        BinaryKind::Div => {
                            let ax = expand(a, &ra);
                            g.iter()
                                .zip(&ax)
                                .zip(bx.as_ref().unwrap())
                                .map(|((g, a), b)| -g * a / (b * b))
                                .collect()
                        }
                    });
                    let (lhs, rhs) = (*lhs, *rhs);
                    if let Some(ga) = ga {
                        let ga = reduce_to(ga, ra.as_ref(), a.numel());
                        self.accumulate(&mut grads, lhs, ga);
                    }
                    if let Some(gb) = gb {
                        let gb = reduce_to(gb, rb.as_ref(), b.numel());
                        self.accumulate(&mut grads, rhs, gb);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geometry,
                    cols,
                } => {
                    let want_input = self.requires_grad(*input);
                    let want_kernel = self.requires_grad(*kernel);
                    let mut gi = want_input.then(|| vec![0.0; self.value(*input).numel()]);
                    let mut gk = want_kernel.then(|| vec![0.0; self.value(*kernel).numel()]);
                    conv::conv_backward(
                        geometry,
                        &g,
                        self.value(*kernel).data(),
                        cols,
                        gi.as_deref_mut(),
                        gk.as_deref_mut(),
                    );
                    let (input, kernel) = (*input, *kernel);
                    if let Some(gi) = gi {
                        self.accumulate(&mut grads, input, gi);
                    }
                    if let Some(gk) = gk {
                        self.accumulate(&mut grads, kernel, gk);
                    }
                }
                Op::Reduce { input, kind, argmax } => {
                    let x = self.value(*input);
                    let mut gx = vec![0.0; x.numel()];
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean {
                                node.value.numel() as f64 / x.numel() as f64
                            } else {
                                1.0
                            };
                            RowMap::new(x.shape(), node.value.shape()).for_each(|j, o| gx[j] = g[o] * scale);
                        }
                        ReduceKind::Max => {
                            for (o, &j) in argmax.iter().enumerate() {
                                gx[j] += g[o];
                            }
                        }
                    }
                    let input = *input;
                    self.accumulate(&mut grads, input, gx);
                }
                Op::Upsample { input } => {
                    let x = self.value(*input);
                    let &[n, c, h, w] = x.shape() else { unreachable!() };
                    let &[_, _, th, tw] = node.value.shape() else { unreachable!() };
                    let mut gx = vec![0.0; x.numel()];
                    upsample::backward(&g, n * c, h, w, th, tw, &mut gx);
                    let input = *input;
                    self.accumulate(&mut grads, input, gx);
                }
                Op::Narrow { input, axis, start } => {
                    let x = self.value(*input);
                    let extent = x.shape()[*axis];
                    let len = node.value.shape()[*axis];
                    let (outer, inner) = split_axis(x.shape(), *axis);
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    let input = *input;
                    self.accumulate(&mut grads, input, gx);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = split_axis(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis];
                    let mut offset = 0;
                    let mut parts = Vec::with_capacity(inputs.len());
                    for v in inputs {
                        let len = self.shape(*v)[*axis];
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[src..src + len * inner]);
                        }
                        offset += len;
                        parts.push((*v, gv));
                    }
                    for (v, gv) in parts {
                        self.accumulate(&mut grads, v, gv);
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn reduce_to(g: Vec<f64>, rows: Option<&RowMap>, len: usize) -> Vec<f64> {
    match rows {
        None => g,
        Some(rows) => {
            let mut out = vec![0.0; len];
            rows.for_each(|o, i| out[i] += g[o]);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn unary_examples() {
        let mut tape = Tape::new();
        let zero = tape.constant(t(&[1], &[0.0]));
        let e = tape.exp(zero).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0]);
        let s = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.constant(t(&[2], &[-3.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0]);
        let y = tape.constant(t(&[2], &[2.0, 4.0]));
        let m = tape.mean(y, None).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        let z = tape.constant(t(&[3], &[1.0, 5.0, 2.0]));
        let mx = tape.max(z, None).unwrap();
        assert_eq!(tape.value(mx).data(), &[5.0]);
        assert!(matches!(
            tape.sum(z, Some(&[1])),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn reduce_along_axis_keeps_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum(x, Some(&[1])).unwrap();
        assert_eq!(tape.shape(s), &[2, 1]);
        assert_eq!(tape.value(s).data(), &[6.0, 15.0]);
        let m = tape.max(x, Some(&[0])).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let s = tape.sum(x, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 3.0).unwrap();
        let s = tape.sum(y, None).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 5.0, 5.0, 2.0]), true);
        let m = tape.max(x, None).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0; 6]), true);
        let b = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(b).data(), &[2.0, 3.0, 4.0, 5.0]);
        let c = tape.concat(&[b, a], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0, 0.0, 1.0]);
        let w = tape.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 3.5).unwrap());
        let y = tape.upsample_bilinear(x, 4, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 3.5).abs() < 1e-15));

        let x = tape.constant(t(&[1, 1, 1, 1], &[7.0]));
        let y = tape.upsample_bilinear(x, 3, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0; 9]);

        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        assert!(tape.upsample_bilinear(x, 2, 4).is_err());
    }
}
