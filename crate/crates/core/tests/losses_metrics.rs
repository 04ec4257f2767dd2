//! Loss and metric invariants.

use lftracy::data::Image;
use lftracy::losses::{boundary_weights, structure_loss, total_loss, tversky_loss, LossConfig, BOUNDARY_GAIN};
use lftracy::decoder::DecoderOutput;
use lftracy::metrics::{aggregate, e_measure_mean, f_measure_mean, mae, s_measure, score_pair};
use lftracy::tensor::Graph;
use lftracy::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, h, w], |_| rng.gen_bool(0.4) as u8 as f64)
}

fn probs(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..=1.0))
}

fn img(t: &Tensor) -> Image {
    Image::from_tensor_clamped(t).unwrap()
}

fn structure(logits: &Tensor, gt: &Tensor) -> f64 {
    let mut g = Graph::inference();
    let z = g.constant(logits.clone());
    let l = structure_loss(&mut g, z, gt).unwrap();
    g.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boundary_weights_are_bounded(seed in 0u64..1 << 40, h in 1usize..40, w in 1usize..40) {
        let gt = mask(seed, h, w);
        for wt in boundary_weights(&gt).unwrap() {
            prop_assert!((1.0..=1.0 + BOUNDARY_GAIN).contains(&wt));
        }
    }

    #[test]
    fn tversky_lies_in_unit_interval(seed in 0u64..1 << 40, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let mut g = Graph::inference();
        let p = g.constant(probs(seed, 5, 6));
        let l = tversky_loss(&mut g, p, &mask(seed + 1, 5, 6), a, b).unwrap();
        let v = g.value(l).item();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn structure_loss_falls_as_logits_sharpen(seed in 0u64..1 << 40) {
        let gt = mask(seed, 8, 8);
        let signed = Tensor::from_fn(&[1, 8, 8], |i| 2.0 * gt.data()[i] - 1.0);
        let mut last = f64::INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let l = structure(&Tensor::from_fn(&[1, 8, 8], |i| scale * signed.data()[i]), &gt);
            prop_assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn metrics_are_bounded(seed in 0u64..1 << 40, h in 1usize..9, w in 1usize..9) {
        let s = score_pair(&img(&probs(seed, h, w)), &img(&mask(seed + 1, h, w))).unwrap();
        for v in [s.mae, s.f_mean, s.e_mean, s.s_measure] {
            prop_assert!((0.0..=1.0).contains(&v), "{:?}", s);
        }
    }

    #[test]
    fn binary_perfect_prediction_scores_best(seed in 0u64..1 << 40, h in 2usize..9, w in 2usize..9) {
        let gt = img(&mask(seed, h, w));
        prop_assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        prop_assert!((s_measure(&gt, &gt).unwrap() - 1.0).abs() <= 1e-9);
        // Threshold 0 admits every pixel; the other 255 thresholds are exact.
        prop_assert!(e_measure_mean(&gt, &gt).unwrap() >= 255.0 / 256.0 - 1e-12);
        if gt.pixels().iter().any(|&p| p == 1.0) {
            prop_assert!(f_measure_mean(&gt, &gt).unwrap() >= 255.0 / 256.0 - 1e-12);
        }
    }

    #[test]
    fn mae_is_symmetric_under_complement(seed in 0u64..1 << 40) {
        let p = img(&probs(seed, 6, 6));
        let g = img(&mask(seed + 1, 6, 6));
        let pc = Image::from_fn(1, 6, 6, |c, y, x| 1.0 - p.get(c, y, x)).unwrap();
        let gc = Image::from_fn(1, 6, 6, |c, y, x| 1.0 - g.get(c, y, x)).unwrap();
        prop_assert!((mae(&p, &g).unwrap() - mae(&pc, &gc).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn empty_aggregate_is_usage_error() {
    let err = aggregate(&[]).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn metric_shape_mismatch() {
    let a = Image::filled(1, 2, 2, 0.0).unwrap();
    let b = Image::filled(1, 2, 3, 0.0).unwrap();
    assert!(matches!(mae(&a, &b), Err(Error::Dimension { .. })));
}

#[test]
fn degenerate_gt_s_measure() {
    let zeros = Image::filled(1, 3, 3, 0.0).unwrap();
    let ones = Image::filled(1, 3, 3, 1.0).unwrap();
    let p = Image::filled(1, 3, 3, 0.25).unwrap();
    assert!((s_measure(&p, &zeros).unwrap() - 0.75).abs() < 1e-15);
    assert!((s_measure(&p, &ones).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn lambda_scales_only_the_tversky_term() {
    let gt = mask(3, 8, 8);
    let mut g = Graph::inference();
    let z = g.constant(probs(4, 8, 8));
    let p = g.sigmoid(z);
    let small = g.constant(probs(5, 4, 4));
    let out = DecoderOutput {
        final_logits: z,
        final_mask: p,
        stage_logits: vec![small],
        stage_masks: vec![],
    };
    let (_, r1) = total_loss(&mut g, &out, &gt, &LossConfig::default()).unwrap();
    let cfg2 = LossConfig {
        lambda_t: 3.0,
        ..LossConfig::default()
    };
    let (_, r2) = total_loss(&mut g, &out, &gt, &cfg2).unwrap();
    assert_eq!(r1.tversky, r2.tversky);
    assert!((r2.total - r1.total - 2.0 * r1.tversky).abs() < 1e-12);
    assert_eq!(r1.structure_per_stage.len(), 1);
}
