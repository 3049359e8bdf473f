use csi_jscc::csi_data::*;
use csi_jscc::diffusion::*;
use csi_jscc::Tensor;
use num_complex::Complex;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cmatrix(rows: usize, cols: usize, seed: u64) -> CMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f64>::randn(&[rows * cols * 2], 1.0, &mut rng);
    let d = t.data();
    CMatrix::from_fn(rows, cols, |r, c| {
        let i = 2 * (r * cols + c);
        Complex::new(d[i], d[i + 1])
    })
}

fn max_abs_diff(a: &CMatrix<f64>, b: &CMatrix<f64>) -> f64 {
    let mut m = 0.0f64;
    for r in 0..a.rows {
        for c in 0..a.cols {
            m = m.max((a.at(r, c) - b.at(r, c)).norm());
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delay_limited_roundtrip(
        n_delay in 1usize..12,
        extra in 0usize..20,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        let n_sc = n_delay + extra;
        let ad = cmatrix(n_delay, cols, seed);
        let sf = ad_to_sf(&ad, n_sc).unwrap();
        let back = sf_to_ad(&sf, n_delay).unwrap();
        prop_assert!(max_abs_diff(&ad, &back) < 1e-9);
        // The unitary transform preserves energy.
        prop_assert!((sf.frob_sq() - ad.frob_sq()).abs() < 1e-9 * ad.frob_sq().max(1.0));
    }

    #[test]
    fn cropping_never_adds_energy(rows in 2usize..16, cols in 1usize..6, seed in any::<u64>()) {
        let sf = cmatrix(rows, cols, seed);
        let full = sf_to_ad(&sf, rows).unwrap();
        let cropped = sf_to_ad(&sf, rows / 2).unwrap();
        prop_assert!((full.frob_sq() - sf.frob_sq()).abs() < 1e-9 * sf.frob_sq());
        prop_assert!(cropped.frob_sq() <= full.frob_sq() + 1e-12);
    }

    #[test]
    fn schedule_invariants(n in 1usize..80, linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = make_schedule(n, kind).unwrap();
        prop_assert_eq!(s.eta[0], 0.0);
        prop_assert!((s.eta[n] - 1.0).abs() < 1e-12);
        for t in 1..=n {
            prop_assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            prop_assert!(s.eta[t] > s.eta[t - 1]);
            prop_assert!(s.beta[t] > 0.0 && s.beta[t] < 1.0);
        }
        let ab = s.alpha_bar[n];
        prop_assert!((s.lambda - (ab / (1.0 - ab)).sqrt()).abs() <= 1e-12 * s.lambda.max(1.0));
    }

    #[test]
    fn strided_steps_descend_from_n_to_zero(n in 1usize..60, frac in 0.0f64..1.0) {
        let s = make_schedule(n, ScheduleKind::Cosine).unwrap();
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let steps = s.strided_steps(k).unwrap();
        prop_assert_eq!(steps.len(), k + 1);
        prop_assert_eq!(steps[0], n);
        prop_assert_eq!(*steps.last().unwrap(), 0);
        prop_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_residual_matches_the_standard_process(t in 0usize..=20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let z0 = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let r = Tensor::zeros(z0.shape());
        let got = forward_diffuse(&z0, &r, t, &eps, &s).unwrap();
        let (a, b) = (s.alpha_bar[t].sqrt(), (1.0 - s.alpha_bar[t]).sqrt());
        let want = z0.zip_map(&eps, |z, e| a * z + b * e);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn normalization_roundtrip(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(&[3, 2, 4, 4], scale, &mut rng);
        let ds = CsiDataset::from_tensor(t.clone(), Domain::Ad).unwrap();
        let (n, stats) = normalize(&ds, NormScheme::MinmaxGlobal).unwrap();
        prop_assert!(n.tensor().data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        let back = denormalize(&n, &stats);
        for (a, b) in back.tensor().data().iter().zip(t.data()) {
            prop_assert!((a - b).abs() < 1e-9 * scale);
        }
        prop_assert!((stats.invert(&Tensor::scalar(stats.zero_level())).data()[0]).abs() < 1e-9 * scale);
    }
}

#[test]
fn oracle_sampler_is_exact_from_every_init() {
    struct Oracle(Tensor<f64>);
    impl X0Predictor<f64> for Oracle {
        fn predict_x0(
            &self,
            _: &Tensor<f64>,
            _: &Tensor<f64>,
            _: usize,
        ) -> csi_jscc::Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
    let z0 = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    let h = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    let oracle = Oracle(z0.clone());
    for mode in [DiffusionMode::ResidualDiffusion, DiffusionMode::GenerativeDiffusion] {
        for init in [SamplerInit::Zero, SamplerInit::Stochastic] {
            for steps in [1, 2, 20] {
                let out = sample(&h, &oracle, &s, steps, mode, init, &mut rng).unwrap();
                let err = out.zip_map(&z0, |a, b| a - b).sq_norm().sqrt() / z0.sq_norm().sqrt();
                assert!(err < 1e-6, "{mode:?} {init:?} {steps}: {err}");
            }
        }
    }
}

#[test]
fn synthetic_channels_are_unit_energy_and_reproducible() {
    let cfg = SynthConfig::complex(8, 8, 32);
    let a = generate_synthetic::<f64>(&cfg, 6, 9).unwrap();
    let b = generate_synthetic::<f64>(&cfg, 6, 9).unwrap();
    assert_eq!(a.tensor(), b.tensor());
    let c = generate_synthetic::<f64>(&cfg, 6, 10).unwrap();
    assert_ne!(a.tensor(), c.tensor());
    for i in 0..6 {
        let sf = synthesize_sf::<f64>(&cfg, 9, i as u64);
        assert!((sf.frob_sq() - 1.0).abs() < 1e-9);
        // The stored AD sample keeps most of the energy.
        let e = a.sample(i).to_matrix().frob_sq();
        assert!(e > 0.5 && e <= 1.0 + 1e-9, "{e}");
    }
}
