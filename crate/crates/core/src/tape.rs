//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] appends one node per executed primitive, saving the forward
//! value. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates vector-Jacobian products. A tape is single-writer; build one
//! per forward pass.

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::tensor::{same_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Square(Var),
    Atan(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    SliceChannels { x: Var, start: usize },
    ConcatChannels(Vec<Var>),
    Transpose(Var),
    Matmul(Var, Var),
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize },
    BceWithLogits { x: Var, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Atan(..) => "atan",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Transpose(..) => "transpose",
            Op::Matmul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Atan(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::SliceChannels { x: a, .. }
            | Op::BceWithLogits { x: a, .. } => vec![*a],
            Op::ConcatChannels(parts) => parts.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`. Every leaf recorded before the output has one
    /// (zeros when the output does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Names of the recorded primitives in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Indices of recorded inputs of node `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("{v:?} was not recorded on this tape")));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        for input in op.inputs() {
            self.check(input)?;
        }
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), f64::min)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Atan(a), f64::atan)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Picks elements by flat row-major index into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        if indices.is_empty() {
            return dim_err("gather with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return dim_err(format!("gather index {bad} out of range for {:?}", src.shape()));
        }
        let data = indices.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(&[indices.len()], data)?;
        self.push(Op::Gather(a, indices), value)
    }

    /// Channels `start..start+len` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let src = self.value(a);
        let &[c, h, w] = src.shape() else {
            return dim_err(format!("slice_channels needs [C,H,W], got {:?}", src.shape()));
        };
        if len == 0 || start + len > c {
            return dim_err(format!("channel slice {start}..{} out of range for {c}", start + len));
        }
        let data = src.data()[start * h * w..(start + len) * h * w].to_vec();
        let value = Tensor::new(&[len, h, w], data)?;
        self.push(Op::SliceChannels { x: a, start }, value)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        for &p in parts {
            self.check(p)?;
        }
        let &[_, h, w] = self.value(first).shape() else {
            return dim_err("concat_channels needs [C,H,W] parts");
        };
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let t = self.value(p);
            match *t.shape() {
                [pc, ph, pw] if ph == h && pw == w => c += pc,
                _ => {
                    return dim_err(format!(
                        "concat_channels: {:?} does not match spatial extents [{h}, {w}]",
                        t.shape()
                    ))
                }
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[c, h, w], data)?;
        self.push(Op::ConcatChannels(parts.to_vec()), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = kernels::transpose(self.value(a))?;
        self.push(Op::Transpose(a), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = kernels::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul(a, b), value)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = kernels::softmax_lastdim(self.value(a))?;
        self.push(Op::Softmax(a), value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, groups)?;
        self.push(Op::Conv2d { x, w, b, stride, pad, groups }, value)
    }

    /// Depthwise convolution with `k/2` padding (extent preserving).
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (c, k) = kernels::depthwise_extents(self.value(x), self.value(w))?;
        self.conv2d(x, w, b, 1, k / 2, c)
    }

    /// Elementwise binary cross-entropy on logits against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).zip_map(&target, |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())?;
        self.push(Op::BceWithLogits { x, target }, value)
    }

    /// Accumulates `seed . d(output)/d(node)` for every node up to `output`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return dim_err(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.vjp(node, &g)? {
                accumulate(&mut grads[input.0], contrib)?;
            }
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes[..=output.0].iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                vec![(*a, g.zip_map(val(*b), |gv, bv| gv * bv)?), (*b, g.zip_map(val(*a), |gv, av| gv * av)?)]
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let da = g.zip_map(bv, |gv, bv| gv / bv)?;
                let db = da.zip_map(y, |q, yv| -q * yv)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let pick_a = val(*a).zip_map(val(*b), |x, z| {
                    let take = if is_min { x <= z } else { x >= z };
                    if take {
                        1.0
                    } else {
                        0.0
                    }
                })?;
                let da = g.zip_map(&pick_a, |gv, m| gv * m)?;
                let db = g.zip_map(&pick_a, |gv, m| gv * (1.0 - m))?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))?)],
            Op::Silu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })?,
            )],
            Op::Relu(a) => {
                vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?)]
            }
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?)],
            Op::Atan(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / (1.0 + x * x))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Gather(a, indices) => {
                let mut d = Tensor::zeros(val(*a).shape());
                let dd = d.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                vec![(*a, d)]
            }
            Op::SliceChannels { x, start } => {
                let src = val(*x);
                let plane = src.shape()[1] * src.shape()[2];
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                vec![(*x, d)]
            }
            Op::ConcatChannels(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let n = val(p).len();
                    out.push((p, Tensor::new(shape, g.data()[off..off + n].to_vec())?));
                    off += n;
                }
                out
            }
            Op::Transpose(a) => vec![(*a, kernels::transpose(g)?)],
            Op::Matmul(a, b) => {
                let da = kernels::matmul(g, &kernels::transpose(val(*b))?)?;
                let db = kernels::matmul(&kernels::transpose(val(*a))?, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(a) => vec![(*a, kernels::softmax_backward(y, g))],
            Op::Conv2d { x, w, b, stride, pad, groups } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, *groups)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BceWithLogits { x, target } => vec![(
                *x,
                Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(val(*x).data())
                        .zip(target.data())
                        .map(|((gv, z), t)| gv * (sigmoid(*z) - t))
                        .collect(),
                )?,
            )],
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            same_shape(acc, &contrib)?;
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_passes_seed_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let g = tape.backward(x, &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(g.wrt(x), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn matmul_gradient_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 0.5], &[3.0, -1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[0.5, 1.0], &[-2.0, 1.5], &[1.0, 0.25]]);
        let s = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        let g = tape.backward(out, &s).unwrap();
        let ga = kernels::matmul(&s, &kernels::transpose(&b).unwrap()).unwrap();
        let gb = kernels::matmul(&kernels::transpose(&a).unwrap(), &s).unwrap();
        assert_eq!(g.wrt(va), &ga);
        assert_eq!(g.wrt(vb), &gb);
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x, &Tensor::zeros(&[4])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn unused_leaves_get_zero_gradients_and_reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
        assert_eq!(g.wrt(unused), &Tensor::zeros(&[2]));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut other = Tape::new();
        other.leaf(Tensor::zeros(&[1]));
        let v = other.leaf(Tensor::zeros(&[1]));
        let mut tape = Tape::new();
        assert!(matches!(tape.sigmoid(v), Err(Error::Contract(_))));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]));
        let b = tape.transpose(a).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax(c).unwrap();
        for v in [b, c, d] {
            assert!(tape.inputs_of(v).iter().all(|i| i.index() < v.index()));
        }
        assert_eq!(tape.op_names(), ["leaf", "transpose", "matmul", "softmax"]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![800.0, -800.0]).unwrap());
        let l = tape.bce_with_logits(x, Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(tape.value(l).data().iter().all(|&v| v.abs() < 1e-300));
    }
}
