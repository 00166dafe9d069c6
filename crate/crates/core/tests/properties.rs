mod common;

use common::direct_blur;
use dacnn::augment::{blur, expand_dataset, ExpandConfig, Scheme};
use dacnn::eval::{error_free_threshold, spearman_rho, EvalRecord};
use dacnn::idx::{
    encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, IMAGE_PIXELS,
};
use dacnn::nn::softmax;
use dacnn::quantile::{fit_quantile_line, pinball_loss};
use dacnn::rbf::{center_from_target, rbf_transform, target_estimate, RbfConfig};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, IMAGE_PIXELS)
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..4.0, 0.0f64..1.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn idx_reencoding_is_lossless(
        imgs in prop::collection::vec(prop::collection::vec(any::<u8>(), IMAGE_PIXELS), 0..6),
        seed in any::<u64>(),
    ) {
        let imgs: Vec<[u8; IMAGE_PIXELS]> = imgs.into_iter().map(|v| v.try_into().unwrap()).collect();
        let labels: Vec<u8> = (0..imgs.len()).map(|i| ((seed >> (i % 60)) % 10) as u8).collect();
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&imgs)).unwrap(), imgs);
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn separable_blur_equals_direct_convolution(px in image(), qi in 0usize..4) {
        let q = [0.5, 1.0, 2.0, 4.0][qi];
        let fast = blur(&px, q).unwrap();
        let slow = direct_blur(&px, q);
        let worst = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-6, "max abs diff {}", worst);
    }

    #[test]
    fn blur_conserves_interior_mass(
        blob in prop::collection::vec(0.0f64..=0.2, 16),
        q in 0.1f64..=1.2,
    ) {
        // 4x4 support at the centre stays at least ceil(3q) <= 4 pixels from every border.
        let mut px = vec![0.0; IMAGE_PIXELS];
        for (i, v) in blob.iter().enumerate() {
            px[(12 + i / 4) * 28 + 12 + i % 4] = *v;
        }
        let before: f64 = px.iter().sum();
        let after: f64 = blur(&px, q).unwrap().iter().sum();
        prop_assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn blur_peak_never_rises_with_q(px in image()) {
        let mut prev = f64::INFINITY;
        for step in 0..=16 {
            let q = step as f64 * 0.25;
            let peak = blur(&px, q).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(peak <= prev + 1e-12, "q={} peak {} > {}", q, peak, prev);
            prev = peak;
        }
    }

    #[test]
    fn softmax_normalises_and_ignores_shifts(
        z in prop::collection::vec(-30.0f64..30.0, 2..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn target_map_strictly_decreasing(q1 in 0.0f64..=4.0, q2 in 0.0f64..=4.0) {
        prop_assume!(q1 < q2);
        let cfg = RbfConfig::default();
        prop_assert!(target_estimate(q1, &cfg).unwrap() > target_estimate(q2, &cfg).unwrap());
    }

    #[test]
    fn center_reproduces_target_confidence(p in 0.3f64..0.6) {
        let center = center_from_target(p, 10).unwrap();
        let mut z = vec![0.0; 10];
        z[0] = center;
        prop_assert!((softmax(&z)[0] - p).abs() <= 1e-12);
    }

    #[test]
    fn head_output_in_half_open_peak_range(
        z in prop::collection::vec(0.0f64..=6.0, 10),
        q in 0.0f64..=4.0,
    ) {
        let cfg = RbfConfig::default();
        let center = cfg.center_for(q).unwrap();
        for g in rbf_transform(&z, center, &cfg) {
            prop_assert!(g > 0.0 && g <= cfg.peak);
        }
    }

    #[test]
    fn confidences_bounded_and_threshold_separates(
        logits in prop::collection::vec(prop::collection::vec(0.0f64..=6.0, 10), 1..40),
        labels in prop::collection::vec(0u8..10, 40),
    ) {
        let records: Vec<EvalRecord> = logits
            .iter()
            .zip(&labels)
            .map(|(z, &label)| {
                let p = softmax(z);
                let k = dacnn::nn::argmax(&p);
                EvalRecord { q: 0.0, true_label: label, predicted: k as u8, confidence: p[k] }
            })
            .collect();
        for r in &records {
            prop_assert!(r.confidence >= 0.1 - 1e-15 && r.confidence < 1.0);
        }
        let t = error_free_threshold(&records).unwrap();
        prop_assert!(records.iter().filter(|r| !r.is_correct()).all(|r| r.confidence <= t));
    }

    #[test]
    fn spearman_antisymmetric_and_rank_invariant(
        pts in prop::collection::vec((0.0f64..4.0, 0.0f64..1.0), 3..60),
    ) {
        let qs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let cs: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let mut sorted = qs.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        prop_assume!(sorted.len() == qs.len());
        let neg: Vec<f64> = cs.iter().map(|c| -c).collect();
        if let (Ok(a), Ok(b)) = (spearman_rho(&qs, &cs), spearman_rho(&qs, &neg)) {
            prop_assert!((a + b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
        let cubed: Vec<f64> = qs.iter().map(|q| q * q * q + 1.0).collect();
        let flipped: Vec<f64> = qs.iter().map(|q| (-q).exp()).collect();
        prop_assert_eq!(spearman_rho(&qs, &cubed).unwrap(), 1.0);
        prop_assert_eq!(spearman_rho(&qs, &flipped).unwrap(), -1.0);
    }

    #[test]
    fn pinball_identity(x in -1e6f64..1e6, tau in 0.001f64..0.999) {
        let s = pinball_loss(x, tau).unwrap() + pinball_loss(-x, tau).unwrap();
        prop_assert!((s - x.abs()).abs() <= 1e-9 * (1.0 + x.abs()));
    }

    #[test]
    fn median_fit_balances_points(pts in cloud(5..150)) {
        let mut qs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        prop_assume!(qs.len() >= 2);
        let fit = fit_quantile_line(&pts, 0.5).unwrap();
        let (mut above, mut below, mut on) = (0i64, 0i64, 0i64);
        for &(q, y) in &pts {
            let r = y - fit.predict(q);
            if r.abs() <= 1e-9 { on += 1 } else if r > 0.0 { above += 1 } else { below += 1 }
        }
        prop_assert!((above - below).abs() <= on + 2, "above {} below {} on {}", above, below, on);
    }

    #[test]
    fn optimal_objective_scales_with_confidence(pts in cloud(5..150), c in 0.1f64..10.0, tau in 0.05f64..0.95) {
        let mut qs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        prop_assume!(qs.len() >= 2);
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(q, y)| (q, c * y)).collect();
        let base = fit_quantile_line(&pts, tau).unwrap().pinball_total;
        let big = fit_quantile_line(&scaled, tau).unwrap().pinball_total;
        prop_assert!((big - c * base).abs() <= 1e-9 * (1.0 + c * base), "{} vs {}", big, c * base);
    }
}

#[test]
fn expansion_is_reproducible_for_both_schemes() {
    let base = common::synthetic_digits(12, 4);
    for scheme in [Scheme::Grid, Scheme::Random] {
        let cfg = ExpandConfig {
            replicas: 4,
            scheme,
            seed: 99,
            ..ExpandConfig::default()
        };
        let a = expand_dataset(&base, &cfg).unwrap();
        let b = expand_dataset(&base, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
