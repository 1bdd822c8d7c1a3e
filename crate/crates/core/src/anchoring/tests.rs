use super::*;
use crate::adapters::AdapterConfig;
use crate::data::{render_seeds, DomainDataset, RenderKind, SceneConfig};
use crate::metrics::{finite_difference_check_with, FdOptions};
use crate::prior::{Backend, GeneratorPrior, PriorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn wplus(slots: usize, dim: usize) -> LatentSpec {
    LatentSpec {
        kind: LatentKind::WPlus,
        dim,
        num_slots: slots,
    }
}

/// Maximum relative FD error of `build` (a scalar graph of one leaf) at `x0`.
fn fd_error(x0: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let eval = |p: &Tensor<f64>, want: bool| {
        let mut g = Graph::new();
        let v = g.leaf(p.clone(), want);
        let out = build(&mut g, v);
        let value = g.value(out).data()[0];
        if !want {
            return (value, None);
        }
        g.backward(out);
        (value, g.grad(v).cloned())
    };
    finite_difference_check_with(
        eval,
        x0,
        FdOptions {
            epsilon: 1e-6,
            ..FdOptions::default()
        },
    )
    .unwrap()
    .max_rel_error
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn latent_loss_is_an_unsquared_norm() {
    let spec = LatentSpec {
        kind: LatentKind::Z,
        dim: 4,
        num_slots: 1,
    };
    let code = LatentCode::new(Tensor::new(&[1, 4], vec![3.0f64, 4.0, 0.0, 0.0]), spec).unwrap();
    assert!((latent_loss(&code, None).unwrap() - 5.0).abs() < 1e-12);
    let zero = LatentCode::new(Tensor::<f64>::zeros(&[1, 4]), spec).unwrap();
    assert_eq!(latent_loss(&zero, None).unwrap(), 0.0);

    let spec = wplus(2, 3);
    let mean = LatentCode::new(randn(&[2, 3], 1), spec).unwrap();
    assert_eq!(latent_loss(&mean, Some(&mean)).unwrap(), 0.0);
    let mut shifted = mean.values.clone();
    shifted.data_mut()[0] += 3.0;
    shifted.data_mut()[5] -= 4.0;
    let shifted = LatentCode::new(shifted, spec).unwrap();
    assert!((latent_loss(&shifted, Some(&mean)).unwrap() - 5.0).abs() < 1e-12);
    assert!(matches!(
        latent_loss(&shifted, None),
        Err(AnchorError::Contract(_))
    ));
}

#[test]
fn latent_loss_averages_over_the_batch() {
    let spec = LatentSpec {
        kind: LatentKind::Z,
        dim: 2,
        num_slots: 1,
    };
    let codes = Tensor::new(&[2, 1, 2], vec![3.0f64, 4.0, 0.0, 1.0]);
    assert!((latent_loss_batch(&codes, &spec, None).unwrap() - 3.0).abs() < 1e-12);
    let mut g = Graph::new();
    let v = g.input(codes.clone());
    let l = latent_loss_graph(&mut g, v, &spec, None).unwrap();
    assert!((g.value(l).data()[0] - 3.0).abs() < 1e-12);
}

#[test]
fn adversarial_terms_at_zero_logits() {
    let zeros = Tensor::<f64>::zeros(&[4]);
    let (gen, dis) = adversarial_from_logits(&zeros, &zeros).unwrap();
    assert!((gen - LN2).abs() < 1e-12);
    assert!((dis - 2.0 * LN2).abs() < 1e-12);
    // With identical real and fake logits the discriminator cannot beat 2 ln 2.
    for l in [-3.0, -0.5, 0.7, 4.0] {
        let t = Tensor::full(&[3], l);
        let (_, dis) = adversarial_from_logits(&t, &t).unwrap();
        assert!(dis >= 2.0 * LN2 - 1e-12, "{l}: {dis}");
    }
    let bad = Tensor::new(&[1], vec![f64::NAN]);
    assert!(adversarial_from_logits(&bad, &zeros).is_err());
}

#[test]
fn reconstruction_reference_values() {
    let kind = DomainKind::Continuous { channels: 1 };
    let target = DomainImage::new("e", Tensor::<f64>::zeros(&[1, 2, 2]), kind).unwrap();
    let pred = Tensor::full(&[1, 2, 2], 0.5);
    assert!((reconstruction_loss(&pred, &target, kind).unwrap() - 0.25).abs() < 1e-12);

    let kind = DomainKind::Categorical { classes: 2 };
    let target = DomainImage::new("s", Tensor::new(&[1, 1, 2], vec![0.0f64, 1.0]), kind).unwrap();
    let uniform = Tensor::<f64>::zeros(&[2, 1, 2]);
    assert!((reconstruction_loss(&uniform, &target, kind).unwrap() - LN2).abs() < 1e-12);

    let wrong = Tensor::<f64>::zeros(&[3, 1, 2]);
    assert!(matches!(
        reconstruction_loss(&wrong, &target, kind),
        Err(AnchorError::Domain(_))
    ));
    let other = DomainKind::Continuous { channels: 2 };
    assert!(matches!(
        reconstruction_loss(&uniform, &target, other),
        Err(AnchorError::Domain(_))
    ));
}

#[test]
fn total_loss_reference_values() {
    let paper = LossWeights {
        lambda_rec: 1.0,
        lambda_latent: 0.005,
        lambda_adv: 0.01,
    };
    assert!((total_loss(2.0f64, 1.0, 0.5, &paper).unwrap() - 2.01).abs() < 1e-12);
    let zero = LossWeights {
        lambda_rec: 0.0,
        lambda_latent: 0.0,
        lambda_adv: 0.0,
    };
    assert_eq!(total_loss(2.0, 1.0, 0.5, &zero).unwrap(), 0.0);
    let rec_only = LossWeights {
        lambda_rec: 10.0,
        ..zero
    };
    assert_eq!(total_loss(1.0, 3.0, 7.0, &rec_only).unwrap(), 10.0);
    // Linear in each component.
    let a = total_loss(1.0f64, 2.0, 3.0, &paper).unwrap();
    let b = total_loss(2.0f64, 4.0, 6.0, &paper).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-12);
    assert!(matches!(
        total_loss(f64::INFINITY, 0.0, 0.0, &paper),
        Err(AnchorError::Training { .. })
    ));
}

#[test]
fn default_weights_follow_the_domain_kind() {
    let seg = LossWeights::for_kind(DomainKind::Categorical { classes: 4 });
    let rgb = LossWeights::for_kind(DomainKind::Continuous { channels: 3 });
    assert_eq!(
        (seg.lambda_rec, seg.lambda_latent, seg.lambda_adv),
        (1.0, 0.005, 0.01)
    );
    assert_eq!(rgb.lambda_rec, 10.0);
    assert!(LossWeights {
        lambda_adv: -1.0,
        ..seg
    }
    .validate()
    .is_err());
}

#[test]
fn latent_gradients_match_finite_differences() {
    let spec = LatentSpec {
        kind: LatentKind::Z,
        dim: 3,
        num_slots: 1,
    };
    let err = fd_error(&randn(&[2, 1, 3], 2), |g, v| {
        latent_loss_graph(g, v, &spec, None).unwrap()
    });
    assert!(err < 1e-5, "z {err}");
    let spec = wplus(2, 3);
    let mean = randn(&[2, 3], 3);
    let err = fd_error(&randn(&[2, 2, 3], 4), |g, v| {
        latent_loss_graph(g, v, &spec, Some(&mean)).unwrap()
    });
    assert!(err < 1e-5, "w+ {err}");
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let targets = randn(&[2, 3, 4, 4], 5).map(|v| v.tanh());
    let kind = DomainKind::Continuous { channels: 3 };
    let err = fd_error(&randn(&[2, 3, 4, 4], 6), |g, v| {
        reconstruction_graph(g, v, &targets, kind)
    });
    assert!(err < 1e-5, "mse {err}");
    let labels = Tensor::new(&[2, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 1.0, 2.0, 2.0, 0.0, 1.0]);
    let kind = DomainKind::Categorical { classes: 3 };
    let err = fd_error(&randn(&[2, 3, 2, 2], 7), |g, v| {
        reconstruction_graph(g, v, &labels, kind)
    });
    assert!(err < 1e-5, "ce {err}");
}

#[test]
fn adversarial_and_total_gradients_match_finite_differences() {
    let err = fd_error(&randn(&[5], 8), adversarial_generator_graph);
    assert!(err < 1e-5, "gen {err}");
    let real = randn(&[5], 9);
    let err = fd_error(&randn(&[5], 10), |g, v| {
        let r = g.input(real.clone());
        adversarial_discriminator_graph(g, r, v)
    });
    assert!(err < 1e-5, "disc {err}");

    // One parameter vector feeding all three terms.
    let spec = wplus(2, 2);
    let mean = randn(&[2, 2], 11);
    let targets = randn(&[1, 1, 2, 2], 12);
    let w = LossWeights {
        lambda_rec: 10.0,
        lambda_latent: LossWeights::LATENT,
        lambda_adv: LossWeights::ADV,
    };
    let err = fd_error(&randn(&[1, 12], 13), |g, v| {
        let code = g.narrow(v, 0, 4);
        let code = g.reshape(code, &[1, 2, 2]);
        let pred = g.narrow(v, 4, 4);
        let pred = g.reshape(pred, &[1, 1, 2, 2]);
        let logits = g.narrow(v, 8, 4);
        let rec = reconstruction_graph(g, pred, &targets, DomainKind::Continuous { channels: 1 });
        let lat = latent_loss_graph(g, code, &spec, Some(&mean)).unwrap();
        let adv = adversarial_generator_graph(g, logits);
        let rec = g.scale(rec, w.lambda_rec);
        let lat = g.scale(lat, w.lambda_latent);
        let adv = g.scale(adv, w.lambda_adv);
        let s = g.add(rec, lat);
        g.add(s, adv)
    });
    assert!(err < 1e-5, "total {err}");
}

fn tiny_setup() -> (
    GeneratorPrior<f64>,
    DomainDataset<f64>,
    DomainDataset<f64>,
    TrainingConfig,
) {
    let mut prior = GeneratorPrior::new(PriorConfig {
        backend: Backend::Style,
        resolution: 8,
        latent_dim: 4,
        channels: vec![4, 3],
        mapping_layers: 1,
        seed: 1,
    })
    .unwrap();
    prior.estimate_mean_latent(64, 0).unwrap();
    let scene = SceneConfig {
        canvas: (16, 16),
        ..SceneConfig::default()
    };
    let seg = render_seeds::<f64>(&scene, "seg", RenderKind::Segmentation, 0..3).unwrap();
    let seg = DomainDataset::from_images("seg", seg[0].kind, seg).unwrap();
    let small = SceneConfig {
        canvas: (8, 8),
        ..SceneConfig::default()
    };
    let rgb = render_seeds::<f64>(&small, "rgb", RenderKind::Rgb, 10..13).unwrap();
    let rgb = DomainDataset::from_images("rgb", rgb[0].kind, rgb).unwrap();
    let adapter = AdapterConfig {
        resolution: 16,
        encoder_width: 2,
        regressor_width: 0.05,
        discriminator_width: 2,
        ..Default::default()
    };
    let config = TrainingConfig {
        steps: 3,
        batch: 2,
        snapshot_every: 2,
        adapter,
        ..Default::default()
    };
    (prior, seg, rgb, config)
}

#[test]
fn training_records_traces_and_keeps_the_prior() {
    let (prior, seg, rgb, config) = tiny_setup();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainingConfig {
        run_dir: Some(dir.path().to_path_buf()),
        ..config
    };
    let before = prior.compute_fingerprint();
    let (adapter, report) = train_domain("seg", &seg, &prior, Some(&rgb), &config).unwrap();
    assert_eq!(prior.compute_fingerprint(), before);
    assert_eq!(adapter.prior_fingerprint, before);
    assert_eq!(adapter.config_hash, config.hash());
    for trace in [&report.rec, &report.latent, &report.adv, &report.total] {
        assert_eq!(trace.len(), 3);
        assert!(trace.iter().all(|v| v.is_finite()));
    }
    let w = config.weights_for(adapter.kind);
    for i in 0..3 {
        let expect = total_loss(report.rec[i], report.latent[i], report.adv[i], &w).unwrap();
        assert!((report.total[i] - expect).abs() < 1e-9);
    }
    let csv = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,rec,latent,adv,total"));
    assert!(dir.path().join("snapshots/step_0.png").exists());
    assert!(dir.path().join("snapshots/step_2.png").exists());
}

#[test]
fn training_is_deterministic_and_can_skip_the_adversary() {
    let (prior, seg, rgb, config) = tiny_setup();
    let config = TrainingConfig {
        steps: 2,
        snapshot_every: 0,
        ..config
    };
    let (a, ra) = train_domain("seg", &seg, &prior, Some(&rgb), &config).unwrap();
    let (b, rb) = train_domain("seg", &seg, &prior, Some(&rgb), &config).unwrap();
    assert_eq!(a.encoder.params, b.encoder.params);
    assert_eq!(ra.total, rb.total);

    let off = TrainingConfig {
        adversarial_enabled: false,
        ..config.clone()
    };
    let (c, rc) = train_domain("seg", &seg, &prior, None, &off).unwrap();
    assert!(rc.adv.iter().all(|&v| v == 0.0));
    assert!(c.discriminator.is_none());
    assert!(matches!(
        train_domain("seg", &seg, &prior, None, &config),
        Err(AnchorError::Config(_))
    ));
}

#[test]
fn single_image_single_step() {
    let (prior, seg, _, config) = tiny_setup();
    let one = DomainDataset::from_images("seg", seg.kind, vec![seg.get(0).clone()]).unwrap();
    let config = TrainingConfig {
        steps: 1,
        batch: 1,
        adversarial_enabled: false,
        snapshot_every: 0,
        ..config
    };
    let (_, report) = train_domain("seg", &one, &prior, None, &config).unwrap();
    assert_eq!(report.rec.len(), 1);
    assert_eq!(report.total.len(), 1);
}
