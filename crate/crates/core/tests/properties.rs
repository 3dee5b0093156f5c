//! Property tests over the statistics, sampling, serialisation and curve
//! layers.

use proptest::prelude::*;
use smoothcert::harness::{radii_grid, CertifiedAccuracyCurve, ExperimentConfig};
use smoothcert::rng::Domain;
use smoothcert::smoothing::{
    lower_conf_bound, radius, sample_counts, upper_conf_bound, BaseClassifier, NoiseKey, ResultRow,
};
use smoothcert::vit::checkpoint::{decode, encode_full, encode_peft, load_checkpoint, save_checkpoint};
use smoothcert::vit::{VitConfig, VitModel};
use smoothcert::{peft, Result};
use std::time::Duration;

/// Three classes by thresholding the mean input value.
struct Bands;

impl BaseClassifier for Bands {
    fn num_classes(&self) -> usize {
        3
    }
    fn input_len(&self) -> usize {
        4
    }
    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
        Ok(inputs[..count * 4]
            .chunks_exact(4)
            .map(|x| {
                let m = x.iter().sum::<f32>() / 4.0;
                if m < 0.3 {
                    0
                } else if m < 0.7 {
                    1
                } else {
                    2
                }
            })
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_grows_with_pa_and_scales_with_sigma(
        p in 0.51f64..0.999,
        dp in 0.0f64..0.2,
        sigma in 0.01f64..4.0,
        k in 0.1f64..10.0,
    ) {
        let q = (p + dp).min(0.9995);
        prop_assert!(radius(sigma, q, 1.0 - q) >= radius(sigma, p, 1.0 - p));
        let a = radius(k * sigma, p, 1.0 - p);
        let b = k * radius(sigma, p, 1.0 - p);
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
    }

    #[test]
    fn clopper_pearson_brackets_the_estimate(n in 1u64..2000, frac in 0.0f64..=1.0, alpha in 1e-4f64..0.2) {
        let k = ((n as f64) * frac).round() as u64;
        let lo = lower_conf_bound(k, n, alpha).unwrap();
        let hi = upper_conf_bound(k, n, alpha).unwrap();
        let phat = k as f64 / n as f64;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= phat + 1e-12 && phat <= hi + 1e-12);
        if k > 0 {
            prop_assert!(lower_conf_bound(k - 1, n, alpha).unwrap() <= lo);
        }
    }

    #[test]
    fn counts_sum_to_draws_and_ignore_batch_size(
        x in proptest::collection::vec(0.0f32..1.0, 4),
        k in 1u64..300,
        b1 in 1usize..64,
        b2 in 1usize..64,
        seed in any::<u64>(),
    ) {
        let key = NoiseKey { seed, domain: Domain::Estimation, example: 3 };
        let a = sample_counts(&Bands, &x, 0.3, k, key, b1).unwrap();
        let b = sample_counts(&Bands, &x, 0.3, k, key, b2).unwrap();
        prop_assert_eq!(a.iter().sum::<u64>(), k);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn curves_never_increase(
        rows in proptest::collection::vec((0usize..4, proptest::option::of(0usize..4), 0.0f64..3.0), 1..60),
    ) {
        let rows: Vec<ResultRow> = rows
            .into_iter()
            .enumerate()
            .map(|(idx, (label, predict, r))| ResultRow {
                idx,
                label,
                predict,
                radius: if predict.is_some() { r } else { 0.0 },
                correct: predict == Some(label),
                time: Duration::ZERO,
            })
            .collect();
        let c = CertifiedAccuracyCurve::from_rows("p", &rows, &radii_grid(3.0, 0.1), 0, 0);
        prop_assert!(c.validate().is_ok());
        prop_assert!(c.accuracy[0] <= c.clean_accuracy + 1e-12);
    }

    #[test]
    fn config_text_round_trips(sigma in 0.0f64..2.0, n in 1u64..100_000, rank in 1usize..64, seed in any::<u64>()) {
        let pairs: Vec<(String, String)> = [
            ("smoothing.sigma", sigma.to_string()),
            ("smoothing.n", n.to_string()),
            ("peft.method", "lora".into()),
            ("peft.rank", rank.to_string()),
            ("seed", seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let cfg = ExperimentConfig::from_pairs(&pairs).unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_pairs(&smoothcert::harness::config::parse_pairs(&text).unwrap()).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_byte_for_byte(seed in any::<u64>(), depth in 1usize..3, rank in 1usize..4) {
        let cfg = VitConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            depth,
            mlp_ratio: 2,
            num_classes: 4,
        };
        let m = VitModel::<f32>::new(cfg, seed).unwrap();
        let bytes = encode_full(&m).unwrap();
        let d = decode::<f32>(&bytes).unwrap();
        prop_assert!(!d.tensors.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psmc");
        save_checkpoint(&m, &path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes.clone());
        let back = load_checkpoint::<f32>(&path).unwrap();
        prop_assert_eq!(encode_full(&back).unwrap(), bytes);

        let tuned = peft::attach(m, &peft::PeftConfig::lora(rank), seed ^ 1).unwrap();
        let pb = encode_peft(&tuned).unwrap();
        prop_assert!(pb.len() < encode_full(&tuned).unwrap().len());
        prop_assert!(decode::<f32>(&pb).is_ok());
    }
}
