use csi_jscc::autoencoder::*;
use csi_jscc::diffusion::*;
use csi_jscc::nn::gradcheck;
use csi_jscc::nn::{Conv2d, Graph, Linear, ParamSet};
use csi_jscc::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_arch() -> AeArch {
    AeArch {
        latent_k_max: 4,
        encoder: EncoderConfig {
            preset: DepthPreset::TwoLayer,
            layers: vec![],
        },
        decoder: DecoderConfig {
            input_kernel: (3, 3),
            n_res_blocks: 2,
            block: vec![ConvSpec::new(4, 3), ConvSpec::new(3, 3), ConvSpec::new(2, 3)],
        },
        mrl: MrlConfig {
            enabled: true,
            rates: vec![2, 4],
            weights: vec![1.0, 0.5],
        },
    }
}

fn ae_batch(ae: &Autoencoder<f64>, n: usize, rng: &mut ChaCha8Rng) -> AeBatch<f64> {
    let input = Tensor::uniform(&[n, 2, ae.rows, ae.cols], 1.0, rng);
    let target = Tensor::uniform(&[n, 2, ae.rows, ae.cols], 1.0, rng);
    let rates = ae
        .arch
        .training_rates()
        .into_iter()
        .map(|(k, weight)| {
            let mut p = Tensor::randn(&[n, ae.latent_width()], 0.3, rng);
            for b in 0..n {
                p.item_mut(b)[2 * k..].iter_mut().for_each(|v| *v = 0.0);
            }
            RateTerm {
                k,
                weight,
                perturbation: p,
            }
        })
        .collect();
    AeBatch {
        input,
        target,
        snr_db: (0..n).map(|i| -3.0 + 4.0 * i as f64).collect(),
        rates,
    }
}

#[test]
fn autoencoder_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ae = Autoencoder::<f64>::new(tiny_arch(), 6, 5, 7).unwrap();
    assert!(ae.params.count() <= 5000, "{}", ae.params.count());
    let batch = ae_batch(&ae, 3, &mut rng);
    let step = ae.batch_loss(&batch, None);
    let mut probe = ae.clone();
    let report = gradcheck::check(
        &ae.params,
        &step.grads,
        |p| {
            probe.params = p.clone();
            probe.batch_loss(&batch, None).loss
        },
        200,
        1e-6,
        &mut rng,
    );
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn masked_latent_columns_get_zero_gradient() {
    let mut arch = tiny_arch();
    arch.mrl.rates = vec![2];
    arch.mrl.weights = vec![1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ae = Autoencoder::<f64>::new(arch, 6, 5, 7).unwrap();
    let batch = ae_batch(&ae, 2, &mut rng);
    let step = ae.batch_loss(&batch, None);
    let w = ae.params.find("dec.dense.weight").unwrap();
    let g = &step.grads[w];
    let (out, inp) = (g.shape()[0], g.shape()[1]);
    for r in 0..out {
        for c in 4..inp {
            assert_eq!(g.data()[r * inp + c], 0.0);
        }
    }
    // rows of the encoder dense layer feeding masked entries are dead too
    let we = ae.params.find("enc.dense.weight").unwrap();
    let ge = &step.grads[we];
    let cols = ge.shape()[1];
    assert!(ge.data()[4 * cols..].iter().all(|&v| v == 0.0));
    assert!(ge.data()[..4 * cols].iter().any(|&v| v != 0.0));
}

/// Every graph op on a small composite, checked against finite differences.
#[test]
fn graph_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::<f64>::new();
    let c1 = Conv2d::new(&mut params, "c1", 2, 3, (3, 3), &mut rng);
    let c2 = Conv2d::new(&mut params, "c2", 5, 2, (1, 3), &mut rng);
    let l1 = Linear::new(&mut params, "l1", 1, 3, &mut rng);
    let l2 = Linear::new(&mut params, "l2", 2 * 2 * 2, 6, &mut rng);
    let x = Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut rng);
    let t = Tensor::uniform(&[2, 6], 1.0, &mut rng);
    let side = Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut rng);
    let cond = Tensor::from_vec(&[2, 1], vec![0.3, -0.7]).unwrap();
    let forward = |p: &ParamSet<f64>, grads: bool| {
        let mut g = Graph::new();
        let v = if grads { p.bind(&mut g) } else { p.bind_frozen(&mut g) };
        let xv = g.constant(x.clone());
        let sv = g.constant(side.clone());
        let cv = g.constant(cond.clone());
        let h = c1.forward(&mut g, &v, xv);
        let h = g.silu(h);
        let e = l1.forward(&mut g, &v, cv);
        let gate = g.sigmoid(e);
        let h = g.mul_channel(h, gate);
        let h = g.add_channel(h, e);
        let h = g.concat(h, sv);
        let h = c2.forward(&mut g, &v, h);
        let h = g.relu(h);
        let h2 = g.scale(h, 0.5);
        let h = g.sub(h, h2);
        let h = g.add(h, sv);
        let h = g.avg_pool2(h);
        let u = g.upsample2(h);
        let u = g.avg_pool2(u);
        let h = g.add(h, u);
        let h = g.reshape(h, &[2, 8]);
        let h = l2.forward(&mut g, &v, h);
        let h = g.power_normalize(h, 2);
        let loss = g.weighted_sse(h, t.clone(), vec![1.0, 0.7]);
        let val = g.value(loss).data()[0];
        let gr = if grads {
            g.backward(loss);
            Some(p.grads(&g, &v))
        } else {
            None
        };
        (val, gr)
    };
    let (_, grads) = forward(&params, true);
    let report = gradcheck::check(
        &params,
        &grads.unwrap(),
        |p| forward(p, false).0,
        300,
        1e-6,
        &mut rng,
    );
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

fn tiny_denoiser(rng: &mut ChaCha8Rng) -> Denoiser<f64> {
    let cfg = DenoiserConfig {
        base_channels: 8,
        mults: vec![1],
        time_dim: 4,
    };
    let mut den = Denoiser::<f64>::new(cfg, 4, 4, 10, 3).unwrap();
    // The output head starts at zero; give it weight so every upstream
    // parameter receives a non-trivial gradient.
    let w = den.params.find("conv_out.weight").unwrap();
    *den.params.get_mut(w) = Tensor::uniform(den.params.get(w).shape(), 0.3, rng);
    den
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let den = tiny_denoiser(&mut rng);
    assert!(den.params.count() <= 5000, "{}", den.params.count());
    let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
    let batch = DiffBatch {
        z0: Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng),
        h_hat: Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng),
        t: vec![1, 4, 10],
        eps: Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng),
    };
    for mode in [DiffusionMode::ResidualDiffusion, DiffusionMode::SupervisedUnet] {
        let (_, grads) = diffusion_loss(&den, &batch, &sched, mode, 5.0).unwrap();
        let mut probe = den.clone();
        let report = gradcheck::check(
            &den.params,
            &grads,
            |p| {
                probe.params = p.clone();
                diffusion_loss(&probe, &batch, &sched, mode, 5.0).unwrap().0
            },
            150,
            1e-6,
            &mut rng,
        );
        assert!(report.max_rel_err < 1e-3, "{mode:?}: {report:?}");
    }
}
