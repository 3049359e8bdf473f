use std::collections::BTreeSet;

use csi_jscc::quantizer::*;
use csi_jscc::Tensor;
use num_complex::Complex;
use proptest::prelude::*;

#[test]
fn uniform_error_is_at_most_half_a_step() {
    for bits in 1..=8 {
        let delta = 2.0 / (1u64 << bits) as f64;
        let mut levels = BTreeSet::new();
        for i in 0..=20_000 {
            let y = -1.0 + 2.0 * i as f64 / 20_000.0;
            let (code, q) = quantize_uniform(y, bits).unwrap();
            assert!((q - y).abs() <= delta / 2.0 + 1e-12, "bits {bits} y {y} q {q}");
            assert!(code < (1 << bits));
            levels.insert(code);
        }
        assert_eq!(levels.len(), 1 << bits);
    }
}

#[test]
fn latent_uses_at_most_two_to_the_bits_levels_per_component() {
    let cfg = QuantConfig {
        mu: 50.0,
        bits: 4,
        s_max: 2.0,
    };
    let s: Vec<Complex<f64>> = (0..5000)
        .map(|i| {
            let x = -3.0 + 6.0 * i as f64 / 4999.0;
            Complex::new(x, 0.5 * x)
        })
        .collect();
    let (q, clips) = quantize_latent(&s, &cfg);
    let re: BTreeSet<u64> = q.iter().map(|z| z.re.to_bits()).collect();
    let im: BTreeSet<u64> = q.iter().map(|z| z.im.to_bits()).collect();
    assert!(re.len() <= 16 && im.len() <= 16, "{} {}", re.len(), im.len());
    // Exactly the components beyond s_max are counted as clipped.
    let expect = s.iter().filter(|z| z.re.abs() > 2.0).count()
        + s.iter().filter(|z| z.im.abs() > 2.0).count();
    assert_eq!(clips, expect);
}

#[test]
fn offset_matches_latent_quantizer() {
    let cfg = QuantConfig {
        mu: 50.0,
        bits: 3,
        s_max: 1.5,
    };
    let lat: Tensor<f64> = Tensor::from_vec(&[1, 6], vec![0.1, -0.4, 1.2, 2.0, 9.0, 9.0]).unwrap();
    let (off, clips) = quantization_offset(&lat, 2, &cfg);
    let s = [Complex::new(0.1, -0.4), Complex::new(1.2, 2.0)];
    let (q, c) = quantize_latent(&s, &cfg);
    assert_eq!(clips, c);
    for i in 0..2 {
        assert!((off.data()[2 * i] - (q[i].re - s[i].re)).abs() < 1e-15);
        assert!((off.data()[2 * i + 1] - (q[i].im - s[i].im)).abs() < 1e-15);
    }
    assert_eq!(&off.data()[4..], &[0.0, 0.0]);
}

#[test]
fn scale_tracker_is_an_ema_of_the_batch_max() {
    let mut tr = ScaleTracker::new(0.9);
    let a = Tensor::from_vec(&[1, 4], vec![0.5, -2.0, 7.0, 7.0]).unwrap();
    assert_eq!(tr.observe::<f64>(&a, 1), 2.0);
    let b = Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((tr.observe::<f64>(&b, 1) - (0.9 * 2.0 + 0.1)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn compand_expand_are_inverse(x in -1.0f64..=1.0, mu in 0.5f64..500.0) {
        let y = compand(x, mu).unwrap();
        prop_assert!(y.abs() <= 1.0 + 1e-15);
        prop_assert!((expand(y, mu).unwrap() - x).abs() < 1e-9);
    }

    #[test]
    fn compand_is_odd_and_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let (ca, cb) = (compand(a, 50.0).unwrap(), compand(b, 50.0).unwrap());
        prop_assert_eq!(compand(-a, 50.0).unwrap(), -ca);
        if a < b {
            prop_assert!(ca < cb);
        }
    }

    #[test]
    fn quantized_latent_stays_within_scale(
        v in proptest::collection::vec(-10.0f64..10.0, 2..40),
        bits in 1u32..10,
        s_max in 0.1f64..5.0,
    ) {
        let cfg = QuantConfig { mu: 50.0, bits, s_max };
        let s: Vec<_> = v.chunks(2).map(|c| Complex::new(c[0], *c.last().unwrap())).collect();
        let (q, _) = quantize_latent(&s, &cfg);
        for (zq, z) in q.iter().zip(&s) {
            prop_assert!(zq.re.abs() <= s_max + 1e-12 && zq.im.abs() <= s_max + 1e-12);
            // Quantization preserves sign.
            prop_assert!(zq.re * z.re >= 0.0 && zq.im * z.im >= 0.0);
        }
    }
}
