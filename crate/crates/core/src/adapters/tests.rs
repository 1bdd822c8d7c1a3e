use super::*;
use crate::prior::{Backend, PriorConfig};

fn tiny_prior() -> GeneratorPrior<f64> {
    let mut p = GeneratorPrior::new(PriorConfig {
        backend: Backend::Style,
        resolution: 8,
        latent_dim: 4,
        channels: vec![4, 3],
        mapping_layers: 1,
        seed: 1,
    })
    .unwrap();
    p.estimate_mean_latent(64, 0).unwrap();
    p
}

fn tiny_config() -> AdapterConfig {
    AdapterConfig {
        resolution: 16,
        encoder_width: 2,
        regressor_width: 0.05,
        discriminator_width: 2,
        ..Default::default()
    }
}

fn probe<T: Scalar>(kind: DomainKind, r: usize, seed: u64) -> DomainImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = match kind {
        DomainKind::Continuous { channels } => Tensor::rand_uniform(&[channels, r, r], -1.0, 1.0, &mut rng),
        DomainKind::Categorical { classes } => {
            let u: Tensor<T> = Tensor::rand_uniform(&[1, r, r], 0.0, classes as f64, &mut rng);
            u.map(|v| v.floor())
        }
    };
    DomainImage::new("probe", pixels, kind).unwrap()
}

#[test]
fn encoder_output_matches_the_latent_spec() {
    let spec = LatentSpec {
        kind: LatentKind::WPlus,
        dim: 64,
        num_slots: 8,
    };
    let mean = LatentCode::new(Tensor::<f32>::zeros(&[8, 64]), spec).unwrap();
    let kind = DomainKind::Continuous { channels: 3 };
    let config = AdapterConfig::default();
    let enc = build_encoder(kind, spec, Some(&mean), &config).unwrap();
    let mut g = Graph::new();
    let b = enc.params.bind(&mut g, false);
    let x = g.input(Tensor::zeros(&[2, 3, 64, 64]));
    let y = enc.forward(&mut g, &b, x);
    assert_eq!(g.shape(y), &[2, 8, 64]);
    assert!(matches!(
        build_encoder::<f32>(kind, spec, None, &config),
        Err(AnchorError::Contract(_))
    ));
}

#[test]
fn builds_are_deterministic_per_seed() {
    let prior = tiny_prior();
    let kind = DomainKind::Categorical { classes: 4 };
    let a = DomainAdapter::new("seg", kind, &prior, &tiny_config()).unwrap();
    let b = DomainAdapter::new("seg", kind, &prior, &tiny_config()).unwrap();
    assert_eq!(a.encoder.params, b.encoder.params);
    assert_eq!(a.regressor.params, b.regressor.params);
    let c = DomainAdapter::new(
        "seg",
        kind,
        &prior,
        &AdapterConfig {
            seed: 1,
            ..tiny_config()
        },
    )
    .unwrap();
    assert_ne!(a.encoder.params, c.encoder.params);
}

#[test]
fn categorical_encoder_takes_one_hot_planes() {
    let prior = tiny_prior();
    let a = DomainAdapter::new(
        "seg",
        DomainKind::Categorical { classes: 4 },
        &prior,
        &tiny_config(),
    )
    .unwrap();
    let stem = a.encoder.params.find("stem.weight").unwrap();
    assert_eq!(a.encoder.params.get(stem).shape()[1], 4);
    assert_eq!(a.regressor.out_channels, 4);
}

#[test]
fn bad_resolutions_are_config_errors() {
    for r in [8, 24, 48] {
        let c = AdapterConfig {
            resolution: r,
            ..AdapterConfig::default()
        };
        assert!(matches!(c.validate(), Err(AnchorError::Config(_))), "{r}");
    }
    let c = AdapterConfig {
        resolution: 16,
        ..AdapterConfig::default()
    };
    let kind = DomainKind::Continuous { channels: 1 };
    assert!(matches!(
        build_regressor::<f32>(kind, 32, 32, &c),
        Err(AnchorError::Config(_))
    ));
}

#[test]
fn regressor_shapes_and_layer_count() {
    let kind = DomainKind::Continuous { channels: 1 };
    let config = AdapterConfig {
        resolution: 64,
        ..AdapterConfig::default()
    };
    let reg = build_regressor::<f32>(kind, 32, 32, &config).unwrap();
    assert_eq!(reg.num_layers(), 6);
    let y = reg.apply(&Tensor::zeros(&[1, 32, 32, 32]));
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
}

#[test]
fn desk_adapter_is_lightweight() {
    let prior = GeneratorPrior::<f32>::new(PriorConfig::default()).unwrap();
    let [cf, hf, _] = prior.feature_shape();
    let reg = build_regressor::<f32>(
        DomainKind::Categorical { classes: 4 },
        cf,
        hf,
        &AdapterConfig::default(),
    )
    .unwrap();
    let ratio = reg.num_parameters() as f64 / prior.num_parameters() as f64;
    assert!(ratio < 0.05, "regressor is {ratio:.3} of the prior");
    for kind in [
        DomainKind::Continuous { channels: 3 },
        DomainKind::Categorical { classes: 4 },
    ] {
        let mut p = prior.clone();
        p.estimate_mean_latent(16, 0).unwrap();
        let a = DomainAdapter::new("x", kind, &p, &AdapterConfig::default()).unwrap();
        assert!(
            a.num_parameters() < prior.num_parameters(),
            "{} vs {}",
            a.num_parameters(),
            prior.num_parameters()
        );
    }
}

#[test]
fn encode_is_deterministic_and_checks_kind() {
    let prior = tiny_prior();
    let kind = DomainKind::Continuous { channels: 1 };
    let a = DomainAdapter::new("edge", kind, &prior, &tiny_config()).unwrap();
    let x = probe::<f64>(kind, 16, 3);
    let c = a.encode(&x).unwrap();
    assert_eq!(c.values.shape(), &[prior.spec().num_slots, 4]);
    assert_eq!(c, a.encode(&x).unwrap());
    let wrong = probe::<f64>(DomainKind::Continuous { channels: 3 }, 16, 3);
    assert!(matches!(a.encode(&wrong), Err(AnchorError::Domain(_))));
    let small = probe::<f64>(kind, 8, 3);
    assert!(matches!(a.encode(&small), Err(AnchorError::Domain(_))));
}

#[test]
fn encoder_parameter_gradients_match_finite_differences() {
    let prior = tiny_prior();
    let kind = DomainKind::Categorical { classes: 3 };
    let mut a = DomainAdapter::new("seg", kind, &prior, &tiny_config()).unwrap();
    let x = probe::<f64>(kind, 16, 5).network_input().reshape(&[1, 3, 16, 16]);
    let objective = |enc: &Encoder<f64>| -> f64 {
        let mut g = Graph::new();
        let b = enc.params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let c = enc.forward(&mut g, &b, xv);
        g.value(c).data().iter().map(|v| v * v).sum()
    };
    let mut g = Graph::new();
    let b = a.encoder.params.bind(&mut g, true);
    let xv = g.input(x.clone());
    let c = a.encoder.forward(&mut g, &b, xv);
    let sq = g.square(c);
    let s = g.sum(sq);
    g.backward(s);
    let grads = a.encoder.params.grads(&g, &b);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for p in 0..grads.len() {
        let n = grads[p].numel();
        // A spread of coordinates per tensor keeps the check fast.
        for i in (0..n).step_by((n / 5).max(1)) {
            let orig = a.encoder.params.tensors()[p].data()[i];
            a.encoder.params.tensors_mut()[p].data_mut()[i] = orig + h;
            let up = objective(&a.encoder);
            a.encoder.params.tensors_mut()[p].data_mut()[i] = orig - h;
            let dn = objective(&a.encoder);
            a.encoder.params.tensors_mut()[p].data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let an = grads[p].data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn reconstruction_is_type_stable() {
    let prior = tiny_prior();
    for kind in [
        DomainKind::Continuous { channels: 3 },
        DomainKind::Continuous { channels: 1 },
        DomainKind::Categorical { classes: 4 },
    ] {
        let a = DomainAdapter::new("d", kind, &prior, &tiny_config()).unwrap();
        let x = probe::<f64>(kind, 16, 1);
        let f = prior.generate_features(&a.encode(&x).unwrap()).unwrap();
        let raw = a.regress(&f).unwrap();
        assert_eq!(raw.shape(), &[kind.network_channels(), 16, 16]);
        assert_eq!(raw, a.regress(&f).unwrap());
        let y = a.regress_image(&f).unwrap();
        assert_eq!(y.pixels.shape(), x.pixels.shape());
        let bad = FeatureMap {
            values: Tensor::zeros(&[3, 4, 4]),
            source: None,
        };
        assert!(matches!(a.regress(&bad), Err(AnchorError::Spec(_))));
    }
}

#[test]
fn export_clamps_and_breaks_ties_low() {
    let logits = Tensor::new(&[3, 1, 3], vec![1.0f32, 0.0, 2.0, 1.0, 5.0, 2.0, 0.5, 0.0, 2.0]);
    let cls = export(&logits, DomainKind::Categorical { classes: 3 });
    assert_eq!(cls.data(), &[0.0, 1.0, 0.0]);
    let vals = Tensor::new(&[1, 1, 3], vec![-3.0f32, 0.25, 7.0]);
    assert_eq!(
        export(&vals, DomainKind::Continuous { channels: 1 }).data(),
        &[-1.0, 0.25, 1.0]
    );
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let prior = tiny_prior();
    let kind = DomainKind::Categorical { classes: 4 };
    let mut a = DomainAdapter::new("seg", kind, &prior, &tiny_config()).unwrap();
    a.config_hash = "abc".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    a.save(&path).unwrap();
    let b = DomainAdapter::<f64>::load(&path).unwrap();
    assert_eq!(b.domain_id, "seg");
    assert_eq!(b.kind, kind);
    assert_eq!(b.prior_fingerprint, prior.fingerprint());
    assert_eq!(b.config_hash, "abc");
    assert_eq!(b.encoder.params, a.encoder.params);
    assert_eq!(b.regressor.buffers, a.regressor.buffers);
    assert_eq!(b.discriminator.unwrap().params, a.discriminator.unwrap().params);
    let x = probe::<f64>(kind, 16, 2);
    let a2 = DomainAdapter::<f64>::load(&path).unwrap();
    assert_eq!(
        a2.encode(&x).unwrap(),
        DomainAdapter::<f64>::load(&path).unwrap().encode(&x).unwrap()
    );

    std::fs::write(&path, b"ANCHOR-CKPT\n{not json").unwrap();
    assert!(matches!(
        DomainAdapter::<f64>::load(&path),
        Err(AnchorError::Corruption { .. })
    ));
}
