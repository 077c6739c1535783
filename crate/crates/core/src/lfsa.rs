//! Row/column local self-attention with channel mixing and depthwise
//! spatial expansion.
//!
//! For each channel `i` of the projected maps `Q, K, V: [C,H,W]`:
//!
//! ```text
//! F_row_i = softmax(Q_i K_i^T / sqrt(W)) V_i          (H x H scores)
//! F_col_i = (softmax(Q_i^T K_i / sqrt(H)) V_i^T)^T    (W x W scores)
//! out     = X + DW_row(Conv1x1_row(F_row)) + DW_col(Conv1x1_col(F_col))
//! ```
//!
//! Softmax runs over the key index (last axis of the score matrix).

use rand::Rng;

use crate::cost::LayerCost;
use crate::error::{dim_err, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Kernel size of the depthwise stage.
pub const DW_KERNEL: usize = 7;

/// Learnable weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LfsaParams {
    pub channels: usize,
    /// `[C,C,1,1]`, no bias.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[C,C,1,1]` with `[C]` bias.
    pub row_conv: Tensor,
    pub row_conv_bias: Tensor,
    pub col_conv: Tensor,
    pub col_conv_bias: Tensor,
    /// `[C,1,7,7]` with `[C]` bias.
    pub row_dw: Tensor,
    pub row_dw_bias: Tensor,
    pub col_dw: Tensor,
    pub col_dw_bias: Tensor,
}

/// Handles for an [`LfsaParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LfsaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub row_conv: Var,
    pub row_conv_bias: Var,
    pub col_conv: Var,
    pub col_conv_bias: Var,
    pub row_dw: Var,
    pub row_dw_bias: Var,
    pub col_dw: Var,
    pub col_dw_bias: Var,
}

impl LfsaVars {
    pub fn all(&self) -> [Var; 11] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.row_conv,
            self.row_conv_bias,
            self.col_conv,
            self.col_conv_bias,
            self.row_dw,
            self.row_dw_bias,
            self.col_dw,
            self.col_dw_bias,
        ]
    }
}

fn delta_kernels(c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c, 1, DW_KERNEL, DW_KERNEL]);
    for ch in 0..c {
        t.set(&[ch, 0, DW_KERNEL / 2, DW_KERNEL / 2], 1.0);
    }
    t
}

impl LfsaParams {
    /// Training initialization: projections uniform in `±1/sqrt(C)`, output
    /// 1x1 convs zero, depthwise kernels deltas. The layer starts as the
    /// identity map.
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        assert!(c > 0, "channel count must be positive");
        let bound = 1.0 / (c as f64).sqrt();
        let proj = |rng: &mut R| Tensor::uniform(&[c, c, 1, 1], -bound, bound, rng);
        Self {
            channels: c,
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            row_conv: Tensor::zeros(&[c, c, 1, 1]),
            row_conv_bias: Tensor::zeros(&[c]),
            col_conv: Tensor::zeros(&[c, c, 1, 1]),
            col_conv_bias: Tensor::zeros(&[c]),
            row_dw: delta_kernels(c),
            row_dw_bias: Tensor::zeros(&[c]),
            col_dw: delta_kernels(c),
            col_dw_bias: Tensor::zeros(&[c]),
        }
    }

    /// Every weight uniform in `[-scale, scale)`; used by checks that need
    /// all branches active.
    pub fn random<R: Rng + ?Sized>(c: usize, scale: f64, rng: &mut R) -> Self {
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -scale, scale, rng);
        Self {
            channels: c,
            wq: u(&[c, c, 1, 1]),
            wk: u(&[c, c, 1, 1]),
            wv: u(&[c, c, 1, 1]),
            row_conv: u(&[c, c, 1, 1]),
            row_conv_bias: u(&[c]),
            col_conv: u(&[c, c, 1, 1]),
            col_conv_bias: u(&[c]),
            row_dw: u(&[c, 1, DW_KERNEL, DW_KERNEL]),
            row_dw_bias: u(&[c]),
            col_dw: u(&[c, 1, DW_KERNEL, DW_KERNEL]),
            col_dw_bias: u(&[c]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.row_conv,
            &self.row_conv_bias,
            &self.col_conv,
            &self.col_conv_bias,
            &self.row_dw,
            &self.row_dw_bias,
            &self.col_dw,
            &self.col_dw_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.row_conv,
            &mut self.row_conv_bias,
            &mut self.col_conv,
            &mut self.col_conv_bias,
            &mut self.row_dw,
            &mut self.row_dw_bias,
            &mut self.col_dw,
            &mut self.col_dw_bias,
        ]
    }

    pub const GROUP_NAMES: [&'static str; 11] = [
        "wq",
        "wk",
        "wv",
        "row_conv",
        "row_conv_bias",
        "col_conv",
        "col_conv_bias",
        "row_dw",
        "row_dw_bias",
        "col_dw",
        "col_dw_bias",
    ];

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every weight against the channel count.
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let proj = [c, c, 1, 1];
        let dw = [c, 1, DW_KERNEL, DW_KERNEL];
        let expected: [&[usize]; 11] = [&proj, &proj, &proj, &proj, &[c], &proj, &[c], &dw, &[c], &dw, &[c]];
        for ((t, want), name) in self.tensors().iter().zip(expected).zip(Self::GROUP_NAMES) {
            if t.shape() != want {
                return dim_err(format!("lfsa parameter {name} has shape {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Records every weight as a leaf.
    pub fn register(&self, tape: &mut Tape) -> LfsaVars {
        LfsaVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            row_conv: tape.leaf(self.row_conv.clone()),
            row_conv_bias: tape.leaf(self.row_conv_bias.clone()),
            col_conv: tape.leaf(self.col_conv.clone()),
            col_conv_bias: tape.leaf(self.col_conv_bias.clone()),
            row_dw: tape.leaf(self.row_dw.clone()),
            row_dw_bias: tape.leaf(self.row_dw_bias.clone()),
            col_dw: tape.leaf(self.col_dw.clone()),
            col_dw_bias: tape.leaf(self.col_dw_bias.clone()),
        }
    }
}

fn check_same(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return dim_err(format!(
            "attention inputs must share one [H,W] shape, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(W)) V` on single-channel `[H,W]` maps.
pub fn row_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_same(q, k, v)?;
    let scale = 1.0 / (q.shape()[1] as f64).sqrt();
    let scores = kernels::matmul(q, &kernels::transpose(k)?)?.map(|s| s * scale);
    kernels::matmul(&kernels::softmax_lastdim(&scores)?, v)
}

/// `(softmax(Q^T K / sqrt(H)) V^T)^T`, i.e. row attention on the transposed maps.
pub fn col_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_same(q, k, v)?;
    let t = kernels::transpose;
    t(&row_attention(&t(q)?, &t(k)?, &t(v)?)?)
}

/// Row attention applied to every channel of `[C,H,W]` maps at once.
pub fn row_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let w = *tape.value(q).shape().last().expect("rank >= 1");
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (w as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

pub fn col_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let qt = tape.transpose(q)?;
    let kt = tape.transpose(k)?;
    let vt = tape.transpose(v)?;
    let out = row_attention_var(tape, qt, kt, vt)?;
    tape.transpose(out)
}

/// Records the full layer on `tape`. `x` must be `[C,H,W]`.
pub fn lfsa_forward_var(tape: &mut Tape, x: Var, p: &LfsaVars) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let wc = tape.value(p.wq).shape()[0];
    if xs.len() != 3 || xs[0] != wc {
        return dim_err(format!("lfsa input {xs:?} does not match {wc} parameter channels"));
    }
    let q = tape.conv2d(x, p.wq, None, 1, 0, 1)?;
    let k = tape.conv2d(x, p.wk, None, 1, 0, 1)?;
    let v = tape.conv2d(x, p.wv, None, 1, 0, 1)?;

    let row = row_attention_var(tape, q, k, v)?;
    let row = tape.conv2d(row, p.row_conv, Some(p.row_conv_bias), 1, 0, 1)?;
    let row = tape.depthwise_conv2d(row, p.row_dw, Some(p.row_dw_bias))?;

    let col = col_attention_var(tape, q, k, v)?;
    let col = tape.conv2d(col, p.col_conv, Some(p.col_conv_bias), 1, 0, 1)?;
    let col = tape.depthwise_conv2d(col, p.col_dw, Some(p.col_dw_bias))?;

    let out = tape.add(x, row)?;
    tape.add(out, col)
}

/// Forward pass without keeping the tape.
pub fn lfsa_forward(x: &Tensor, params: &LfsaParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = params.register(&mut tape);
    let out = lfsa_forward_var(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Scalar-loop reference for [`lfsa_forward`]. Shares no kernels with it.
pub fn lfsa_oracle(x: &Tensor, p: &LfsaParams) -> Result<Tensor> {
    p.validate()?;
    let &[c, h, w] = x.shape() else {
        return dim_err(format!("lfsa input must be [C,H,W], got {:?}", x.shape()));
    };
    if c != p.channels {
        return dim_err(format!("lfsa input has {c} channels, parameters {}", p.channels));
    }
    let xd = x.data();
    let at = |d: &[f64], ch: usize, y: usize, xx: usize| d[(ch * h + y) * w + xx];

    let project = |wt: &Tensor| {
        let mut out = vec![0.0; c * h * w];
        for co in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += wt.data()[co * c + ci] * at(xd, ci, y, xx);
                    }
                    out[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    };
    let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));

    let mut f_row = vec![0.0; c * h * w];
    let mut f_col = vec![0.0; c * h * w];
    for ch in 0..c {
        // rows: score[a][b] = sum_x Q[a][x] K[b][x] / sqrt(W)
        let sw = (w as f64).sqrt();
        for a in 0..h {
            let scores: Vec<f64> =
                (0..h).map(|b| (0..w).map(|xx| at(&q, ch, a, xx) * at(&k, ch, b, xx)).sum::<f64>() / sw).collect();
            let probs = scalar_softmax(&scores);
            for xx in 0..w {
                f_row[(ch * h + a) * w + xx] = (0..h).map(|b| probs[b] * at(&v, ch, b, xx)).sum();
            }
        }
        // columns: score[a][b] = sum_y Q[y][a] K[y][b] / sqrt(H)
        let sh = (h as f64).sqrt();
        for a in 0..w {
            let scores: Vec<f64> =
                (0..w).map(|b| (0..h).map(|y| at(&q, ch, y, a) * at(&k, ch, y, b)).sum::<f64>() / sh).collect();
            let probs = scalar_softmax(&scores);
            for y in 0..h {
                f_col[(ch * h + y) * w + a] = (0..w).map(|b| probs[b] * at(&v, ch, y, b)).sum();
            }
        }
    }

    let branch = |f: &[f64], conv: &Tensor, conv_b: &Tensor, dw: &Tensor, dw_b: &Tensor| {
        let mut mixed = vec![0.0; c * h * w];
        for co in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = conv_b.data()[co];
                    for ci in 0..c {
                        s += conv.data()[co * c + ci] * at(f, ci, y, xx);
                    }
                    mixed[(co * h + y) * w + xx] = s;
                }
            }
        }
        let r = (DW_KERNEL / 2) as isize;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = dw_b.data()[ch];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sy, sx) = (y as isize + dy, xx as isize + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kidx = ((dy + r) as usize) * DW_KERNEL + (dx + r) as usize;
                            s +=
                                dw.data()[ch * DW_KERNEL * DW_KERNEL + kidx] * at(&mixed, ch, sy as usize, sx as usize);
                        }
                    }
                    out[(ch * h + y) * w + xx] = s;
                }
            }
        }
        out
    };
    let row = branch(&f_row, &p.row_conv, &p.row_conv_bias, &p.row_dw, &p.row_dw_bias);
    let col = branch(&f_col, &p.col_conv, &p.col_conv_bias, &p.col_dw, &p.col_dw_bias);

    let data = (0..c * h * w).map(|i| xd[i] + row[i] + col[i]).collect();
    Tensor::new(&[c, h, w], data)
}

fn scalar_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Multiply-accumulates of the row and column attention matmuls alone:
/// `2C(H^2 W + W^2 H)`.
pub fn lfsa_attention_macs(c: u64, h: u64, w: u64) -> u64 {
    2 * c * (h * h * w + w * w * h)
}

/// Attention-stage MACs of full token self-attention over `H*W` tokens of
/// width `C`: `2 (HW)^2 C`.
pub fn full_attention_macs(c: u64, h: u64, w: u64) -> u64 {
    2 * (h * w) * (h * w) * c
}

/// Exact parameter and MAC count of one layer at `[C,H,W]`.
///
/// Softmax, score scaling and residual additions are not counted.
pub fn lfsa_cost(c: usize, h: usize, w: usize) -> LayerCost {
    let (c64, h64, w64) = (c as u64, h as u64, w as u64);
    let params = 3 * c64 * c64 + 2 * (c64 * c64 + c64) + 2 * (49 * c64 + c64);
    let hw = h64 * w64;
    let macs = 3 * c64 * c64 * hw + lfsa_attention_macs(c64, h64, w64) + 2 * c64 * c64 * hw + 2 * 49 * c64 * hw;
    LayerCost::new(params, macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn loop_row_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (h, w) = (q.shape()[0], q.shape()[1]);
        let mut out = Tensor::zeros(&[h, w]);
        for a in 0..h {
            let scores: Vec<f64> = (0..h)
                .map(|b| (0..w).map(|x| q.at(&[a, x]) * k.at(&[b, x])).sum::<f64>() / (w as f64).sqrt())
                .collect();
            let p = scalar_softmax(&scores);
            for x in 0..w {
                out.set(&[a, x], (0..h).map(|b| p[b] * v.at(&[b, x])).sum());
            }
        }
        out
    }

    #[test]
    fn single_row_returns_values() {
        let mut r = rng();
        let q = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut r);
        assert_eq!(row_attention(&q, &k, &v).unwrap(), v);
        let (qt, kt, vt) = (q.reshape(&[5, 1]).unwrap(), k.reshape(&[5, 1]).unwrap(), v.reshape(&[5, 1]).unwrap());
        assert_eq!(col_attention(&qt, &kt, &vt).unwrap(), vt);
    }

    #[test]
    fn zero_queries_average_rows() {
        let mut r = rng();
        let q = Tensor::zeros(&[3, 4]);
        let k = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let out = row_attention(&q, &k, &v).unwrap();
        for x in 0..4 {
            let mean = (0..3).map(|y| v.at(&[y, x])).sum::<f64>() / 3.0;
            for y in 0..3 {
                assert!((out.at(&[y, x]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_attention_matches_loops() {
        let mut r = rng();
        let mk = |r: &mut ChaCha8Rng| Tensor::uniform(&[4, 5], -2.0, 2.0, r);
        let (q, k, v) = (mk(&mut r), mk(&mut r), mk(&mut r));
        let d = row_attention(&q, &k, &v).unwrap().max_abs_diff(&loop_row_attention(&q, &k, &v));
        assert!(d.unwrap() < 1e-12);
    }

    #[test]
    fn col_attention_matches_loops_and_transposed_rows() {
        let mut r = rng();
        let mk = |r: &mut ChaCha8Rng| Tensor::uniform(&[3, 6], -2.0, 2.0, r);
        let (q, k, v) = (mk(&mut r), mk(&mut r), mk(&mut r));
        let col = col_attention(&q, &k, &v).unwrap();
        let t = |x: &Tensor| kernels::transpose(x).unwrap();
        assert_eq!(col, t(&row_attention(&t(&q), &t(&k), &t(&v)).unwrap()));

        // independent loop: column scores compare columns a, b over rows
        let mut expected = Tensor::zeros(&[3, 6]);
        for a in 0..6 {
            let scores: Vec<f64> =
                (0..6).map(|b| (0..3).map(|y| q.at(&[y, a]) * k.at(&[y, b])).sum::<f64>() / 3f64.sqrt()).collect();
            let p = scalar_softmax(&scores);
            for y in 0..3 {
                expected.set(&[y, a], (0..6).map(|b| p[b] * v.at(&[y, b])).sum());
            }
        }
        assert!(col.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(row_attention(&a, &b, &a).is_err());
        assert!(col_attention(&a, &a, &b).is_err());
    }

    #[test]
    fn fresh_layer_is_identity() {
        let mut r = rng();
        let p = LfsaParams::init(3, &mut r);
        let x = Tensor::uniform(&[3, 5, 4], -3.0, 3.0, &mut r);
        assert_eq!(lfsa_forward(&x, &p).unwrap(), x);
        assert_eq!(lfsa_oracle(&x, &p).unwrap(), x);
    }

    #[test]
    fn unit_weights_on_single_pixel_triple_input() {
        let mut p = LfsaParams::init(1, &mut rng());
        for t in p.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.row_conv, &mut p.col_conv] {
            *t = Tensor::ones(&[1, 1, 1, 1]);
        }
        // a 1x1 map only reaches the kernel center
        p.row_dw = Tensor::ones(&[1, 1, 7, 7]);
        p.col_dw = Tensor::ones(&[1, 1, 7, 7]);
        let x = Tensor::new(&[1, 1, 1], vec![0.7]).unwrap();
        let y = lfsa_forward(&x, &p).unwrap();
        assert!((y.item() - 2.1).abs() < 1e-15);
        assert!((lfsa_oracle(&x, &p).unwrap().item() - 2.1).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_oracle() {
        let mut r = rng();
        let p = LfsaParams::random(3, 0.6, &mut r);
        let x = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut r);
        let d = lfsa_forward(&x, &p).unwrap().max_abs_diff(&lfsa_oracle(&x, &p).unwrap());
        assert!(d.unwrap() < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let p = LfsaParams::init(2, &mut rng());
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(lfsa_forward(&x, &p).is_err());
        assert!(lfsa_oracle(&x, &p).is_err());
    }

    #[test]
    fn cost_examples() {
        let c = lfsa_cost(2, 2, 3);
        assert_eq!((c.params, c.macs), (224, 1416));
        let c = lfsa_cost(1, 1, 1);
        assert_eq!((c.params, c.macs), (107, 107));
        assert_eq!(c.flops, 214);
        assert_eq!(lfsa_attention_macs(256, 80, 80), 2 * 256 * (80 * 80 * 80 * 2));
        assert_eq!(LfsaParams::init(2, &mut rng()).param_count() as u64, 224);
    }
}
