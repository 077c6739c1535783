//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function of its arguments. The tape in
//! [`crate::tape`] calls into these for both passes.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Batch count and matrix extents of a rank-2 or rank-3 tensor.
fn as_batched(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => dim_err(format!("{what}: expected rank 2 or 3, got shape {:?}", t.shape())),
    }
}

/// Matrix product `[m,k] x [k,n] -> [m,n]`, or the batched form
/// `[b,m,k] x [b,k,n] -> [b,m,n]` when both operands are rank 3.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = as_batched(a, "matmul lhs")?;
    let (bb, k2, n) = as_batched(b, "matmul rhs")?;
    if a.rank() != b.rank() || ba != bb || k != k2 {
        return dim_err(format!("matmul: incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; ba * m * n];
    for batch in 0..ba {
        let ao = &ad[batch * m * k..(batch + 1) * m * k];
        let bo = &bd[batch * k * n..(batch + 1) * k * n];
        let oo = &mut out[batch * m * n..(batch + 1) * m * n];
        for i in 0..m {
            let row = &mut oo[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ao[i * k + p];
                let brow = &bo[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Tensor::new(&shape, out)
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose(t: &Tensor) -> Result<Tensor> {
    let (b, m, n) = as_batched(t, "transpose")?;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for batch in 0..b {
        let off = batch * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = d[off + i * n + j];
            }
        }
    }
    let shape = if t.rank() == 2 { vec![n, m] } else { vec![b, n, m] };
    Tensor::new(&shape, out)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().expect("tensor rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Given the softmax output `y` and upstream gradient `dy`, returns `dx`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("tensor rank >= 1");
    let mut dx = dy.clone();
    for (dxr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let inner: f64 = dxr.iter().zip(yr).map(|(g, p)| g * p).sum();
        for (g, p) in dxr.iter_mut().zip(yr) {
            *g = p * (*g - inner);
        }
    }
    dx
}

/// Geometry of a 2-D convolution over a `[C,H,W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    pub fn infer(
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let &[cin, h, wd] = x.shape() else {
            return dim_err(format!("conv2d input must be [C,H,W], got {:?}", x.shape()));
        };
        let &[cout, cin_g, kh, kw] = w.shape() else {
            return dim_err(format!("conv2d weight must be [Cout,Cin/g,k,k], got {:?}", w.shape()));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return dim_err(format!(
                "conv2d: groups {groups} must divide input channels {cin} and output channels {cout}"
            ));
        }
        if cin_g != cin / groups {
            return dim_err(format!(
                "conv2d: weight {:?} expects {} channels per group, input {:?} has {}",
                w.shape(),
                cin_g,
                x.shape(),
                cin / groups
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return dim_err(format!("conv2d: kernel must be square and odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive");
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return dim_err(format!("conv2d: bias {:?} does not match {cout} outputs", b.shape()));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return dim_err(format!(
                "conv2d: non-positive output extent for input {:?}, kernel {kh}, pad {pad}",
                x.shape()
            ));
        }
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self { cin, cout, kernel: kh, stride, pad, groups, h, w: wd, hout, wout })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

/// Cross-correlation with zero padding and grouped channels.
///
/// `x: [Cin,H,W]`, `w: [Cout,Cin/g,k,k]`, `bias: [Cout]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::infer(x, w, bias, stride, pad, groups)?;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let k = g.kernel;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; g.cout * g.hout * g.wout];
    for co in 0..g.cout {
        let group = co / cout_g;
        let b0 = bias.map_or(0.0, |b| b.data()[co]);
        let plane = &mut out[co * g.hout * g.wout..(co + 1) * g.hout * g.wout];
        plane.iter_mut().for_each(|v| *v = b0);
        for cl in 0..cin_g {
            let ci = group * cin_g + cl;
            let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let wk = &wd[(co * cin_g + cl) * k * k..(co * cin_g + cl + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    for oy in 0..g.hout {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.wout {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            plane[oy * g.wout + ox] += wv * xplane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.cout, g.hout, g.wout], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::infer(x, w, None, stride, pad, groups)?;
    if dy.shape() != [g.cout, g.hout, g.wout] {
        return dim_err(format!(
            "conv2d backward: upstream {:?} does not match output [{}, {}, {}]",
            dy.shape(),
            g.cout,
            g.hout,
            g.wout
        ));
    }
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let k = g.kernel;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; g.cout];
    for co in 0..g.cout {
        let group = co / cout_g;
        let gplane = &gd[co * g.hout * g.wout..(co + 1) * g.hout * g.wout];
        db[co] = gplane.iter().sum();
        for cl in 0..cin_g {
            let ci = group * cin_g + cl;
            let xoff = ci * g.h * g.w;
            let woff = (co * cin_g + cl) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[woff + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..g.hout {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.wout {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let gv = gplane[oy * g.wout + ox];
                            acc += gv * xd[xoff + iy * g.w + ix];
                            dx[xoff + iy * g.w + ix] += gv * wv;
                        }
                    }
                    dw[woff + ky * k + kx] += acc;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::new(&[g.cout], db)?))
}

/// Depthwise convolution: channel `i` sees only kernel `i`.
///
/// `w: [C,1,k,k]` with odd `k`; padding is `k/2` so spatial extents are kept.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c, k) = depthwise_extents(x, w)?;
    conv2d(x, w, bias, 1, k / 2, c)
}

pub(crate) fn depthwise_extents(x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    let (&[c, _, _], &[wc, 1, k, _]) = (x.shape(), w.shape()) else {
        return dim_err(format!(
            "depthwise conv: expected input [C,H,W] and weight [C,1,k,k], got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    };
    if c != wc {
        return dim_err(format!("depthwise conv: input has {c} channels but weight {:?} has {wc}", w.shape()));
    }
    Ok((c, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let expected = Tensor::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), expected);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(err.starts_with("dimension error"));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rand::Rng::gen_range(&mut rng, 1..=8);
            let k = rand::Rng::gen_range(&mut rng, 1..=8);
            let n = rand::Rng::gen_range(&mut rng, 1..=8);
            let a = Tensor::uniform(&[m, k], -2.0, 2.0, &mut rng);
            let b = Tensor::uniform(&[k, n], -2.0, 2.0, &mut rng);
            let d = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)).unwrap();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_lastdim(&Tensor::new(&[3], vec![0.0; 3]).unwrap()).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let y = softmax_lastdim(&Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 4, 5], -1.0, 1.0, &mut rng);
        let one = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &one, None, 1, 0, 1).unwrap(), x);

        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &delta, None, 1, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_center_sums_neighbourhood() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 45.0);
        // corner only sees the 2x2 block 1,2,4,5
        assert_eq!(y.at(&[0, 0, 0]), 12.0);
    }

    #[test]
    fn conv_rejects_bad_groups_and_extent() {
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 1, 1, 1]), None, 1, 0, 2).is_err());
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), None, 1, 0, 1).is_err());
    }

    #[test]
    fn strided_conv_extents() {
        let x = Tensor::zeros(&[1, 64, 64]);
        let y = conv2d(&x, &Tensor::zeros(&[4, 1, 3, 3]), None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[4, 32, 32]);
    }

    #[test]
    fn depthwise_examples() {
        let mut x = Tensor::zeros(&[2, 9, 9]);
        for y in 0..9 {
            for xx in 0..9 {
                x.set(&[0, y, xx], 2.0);
                x.set(&[1, y, xx], -1.5);
            }
        }
        let out = depthwise_conv2d(&x, &Tensor::ones(&[2, 1, 7, 7]), None).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(out.at(&[0, 4, 4]), 98.0);
        assert_eq!(out.at(&[1, 4, 4]), -73.5);

        let zero = depthwise_conv2d(&x, &Tensor::zeros(&[2, 1, 7, 7]), Some(&Tensor::zeros(&[2]))).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 5, 6], -1.0, 1.0, &mut rng);
        let mut delta = Tensor::zeros(&[3, 1, 7, 7]);
        for c in 0..3 {
            delta.set(&[c, 0, 3, 3], 1.0);
        }
        assert_eq!(depthwise_conv2d(&x, &delta, None).unwrap(), x);

        assert!(depthwise_conv2d(&x, &Tensor::zeros(&[2, 1, 7, 7]), None).is_err());
    }

    #[test]
    fn transpose_batched() {
        let t = Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let tt = transpose(&t).unwrap();
        assert_eq!(tt.shape(), &[2, 3, 2]);
        assert_eq!(tt.at(&[1, 2, 0]), t.at(&[1, 0, 2]));
        assert_eq!(transpose(&tt).unwrap(), t);
    }
}
