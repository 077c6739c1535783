use lfsa_core::abota::{assignment_cost, classification_loss};
use lfsa_core::docs::{cost_report, to_json, CostReportDoc};
use lfsa_core::kernels::{matmul, softmax_lastdim};
use lfsa_core::{
    ciou, col_attention, iou, lfsa_forward, row_attention, BBox, GroundTruth, HeadSpec, LevelSpec, LfsaParams,
    Prediction, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.1f64..40.0, 0.1f64..40.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in tensor(&[3, 5]), shift in -500.0f64..500.0) {
        let y = softmax_lastdim(&x.map(|v| v * 10.0 + shift)).unwrap();
        for row in y.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_matches_loops(a in tensor(&[3, 4]), b in tensor(&[4, 2])) {
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ciou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        prop_assert!((ciou(&a, &b) - ciou(&b, &a)).abs() <= 1e-12);
        prop_assert!(ciou(&a, &b) <= iou(&a, &b));
        prop_assert!(ciou(&a, &b) >= -1.5);
        prop_assert_eq!(ciou(&a, &a), 1.0);
    }

    #[test]
    fn ciou_scale_equivariant(a in bbox(), b in bbox(), s in 0.25f64..4.0) {
        let (sa, sb) = (a.scaled(s).unwrap(), b.scaled(s).unwrap());
        prop_assert!((ciou(&sa, &sb) - ciou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn key_shift_invariance(q in tensor(&[4, 6]), k in tensor(&[4, 6]), v in tensor(&[4, 6]), c in -100.0f64..100.0) {
        let a = row_attention(&q, &k, &v).unwrap();
        let b = row_attention(&q, &k.map(|x| x + c), &v).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn attention_linear_in_values(q in tensor(&[3, 5]), k in tensor(&[3, 5]), v1 in tensor(&[3, 5]), v2 in tensor(&[3, 5]), s in -2.0f64..2.0) {
        let mix = v1.zip_map(&v2, |a, b| a + s * b).unwrap();
        let lhs = col_attention(&q, &k, &mix).unwrap();
        let r1 = col_attention(&q, &k, &v1).unwrap();
        let r2 = col_attention(&q, &k, &v2).unwrap();
        let rhs = r1.zip_map(&r2, |a, b| a + s * b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn attention_outputs_are_convex_combinations(q in tensor(&[4, 4]), k in tensor(&[4, 4]), v in tensor(&[4, 4])) {
        let y = row_attention(&q, &k, &v).unwrap();
        for col in 0..4 {
            let (lo, hi) = (0..4).map(|r| v.at(&[r, col])).fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
            for row in 0..4 {
                prop_assert!(y.at(&[row, col]) >= lo - 1e-12 && y.at(&[row, col]) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn lfsa_equivariant_to_channel_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let p = LfsaParams::random(c, 0.5, &mut rng);
        let x = Tensor::uniform(&[c, 4, 5], -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let permute_x = |t: &Tensor| Tensor::stack(&perm.iter().map(|&i| t.channel(i)).collect::<Vec<_>>()).unwrap();
        let permute_square = |t: &Tensor| {
            let mut out = t.clone();
            for (a, &pa) in perm.iter().enumerate() {
                for (b, &pb) in perm.iter().enumerate() {
                    out.set(&[a, b, 0, 0], t.at(&[pa, pb, 0, 0]));
                }
            }
            out
        };
        let permute_rows = |t: &Tensor| {
            let per = t.len() / c;
            let mut data = Vec::with_capacity(t.len());
            for &i in &perm {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(t.shape(), data).unwrap()
        };
        let mut q = p.clone();
        for t in [&mut q.wq, &mut q.wk, &mut q.wv, &mut q.row_conv, &mut q.col_conv] {
            *t = permute_square(t);
        }
        for t in [&mut q.row_conv_bias, &mut q.col_conv_bias, &mut q.row_dw, &mut q.row_dw_bias, &mut q.col_dw, &mut q.col_dw_bias] {
            *t = permute_rows(t);
        }
        let lhs = lfsa_forward(&permute_x(&x), &q).unwrap();
        let rhs = permute_x(&lfsa_forward(&x, &p).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn cost_monotone_in_true_class_probability(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, other in 0.0f64..=1.0, b in bbox()) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(classification_loss(0, &[hi, other]).unwrap() <= classification_loss(0, &[lo, other]).unwrap());
        let gt = GroundTruth { bbox: b, class_id: 0 };
        let pred = Prediction { bbox: b, class_probs: vec![hi, other], objectness: 0.5 };
        let c1 = assignment_cost(&gt, &pred, 1.0).unwrap();
        let c3 = assignment_cost(&gt, &pred, 3.0).unwrap();
        prop_assert!((c1 - c3).abs() < 1e-12);
    }

    #[test]
    fn cost_report_round_trips(classes in 1usize..100, anchors in 1usize..5, hidden in 1usize..64) {
        let dh = HeadSpec { hidden_channels: hidden * 2, ..HeadSpec::dh_default(anchors, classes) };
        let edh = HeadSpec { hidden_channels: hidden, ..HeadSpec::edh_default(anchors, classes) };
        let levels = vec![LevelSpec::new(16, 8, 10, 10), LevelSpec::new(32, 16, 5, 5)];
        let r = cost_report(&levels, &dh, &edh).unwrap();
        let back: CostReportDoc = serde_json::from_str(&to_json(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}
