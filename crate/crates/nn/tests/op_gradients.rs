//! Every differentiable op is checked against central finite differences
//! in double precision.

use anchor_nn::{BatchNorm2d, Bound, Graph, Linear, Mode, ModulatedConv2d, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max relative error between tape gradients and central differences.
fn check(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic[i].data()[j];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-12);
            // Both tiny: absolute agreement is what matters.
            let rel = if fd.abs() + an.abs() < 1e-7 { 0.0 } else { rel };
            worst = worst.max(rel);
        }
    }
    worst
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.input(rnd(&shape, seed + 1000));
    let p = g.mul(y, w);
    g.sum(p)
}

const TOL: f64 = 1e-6;

#[test]
fn elementwise_ops() {
    let a = rnd(&[2, 3], 1);
    let b = rnd(&[2, 3], 2);
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>)> = vec![
        (
            "add",
            Box::new(|g, v| {
                let y = g.add(v[0], v[1]);
                probe(g, y, 1)
            }),
        ),
        (
            "sub",
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1]);
                probe(g, y, 2)
            }),
        ),
        (
            "mul",
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1]);
                probe(g, y, 3)
            }),
        ),
        (
            "scale",
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                probe(g, y, 4)
            }),
        ),
        (
            "square",
            Box::new(|g, v| {
                let y = g.square(v[0]);
                probe(g, y, 5)
            }),
        ),
        (
            "tanh",
            Box::new(|g, v| {
                let y = g.tanh(v[0]);
                probe(g, y, 6)
            }),
        ),
        (
            "sigmoid",
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                probe(g, y, 7)
            }),
        ),
        (
            "softplus",
            Box::new(|g, v| {
                let y = g.softplus(v[0]);
                probe(g, y, 8)
            }),
        ),
        (
            "leaky",
            Box::new(|g, v| {
                let y = g.leaky_relu(v[0], 0.2);
                probe(g, y, 9)
            }),
        ),
        (
            "relu",
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                probe(g, y, 10)
            }),
        ),
        (
            "powf",
            Box::new(|g, v| {
                let s = g.square(v[0]);
                let s = g.add_scalar(s, 0.5);
                let y = g.powf(s, -0.5);
                probe(g, y, 11)
            }),
        ),
        (
            "mean",
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1]);
                g.mean(y)
            }),
        ),
    ];
    for (name, f) in cases {
        let err = check(&[a.clone(), b.clone()], f.as_ref());
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn matrix_and_shape_ops() {
    let a = rnd(&[3, 4], 3);
    let b = rnd(&[4, 2], 4);
    let err = check(&[a.clone(), b], &|g, v| {
        let y = g.matmul(v[0], v[1]);
        probe(g, y, 1)
    });
    assert!(err < TOL, "matmul {err}");
    let err = check(std::slice::from_ref(&a), &|g, v| {
        let y = g.transpose(v[0]);
        probe(g, y, 2)
    });
    assert!(err < TOL, "transpose {err}");
    let err = check(std::slice::from_ref(&a), &|g, v| {
        let y = g.narrow(v[0], 1, 2);
        probe(g, y, 3)
    });
    assert!(err < TOL, "narrow {err}");
    let c = rnd(&[3, 1], 5);
    let err = check(&[a.clone(), c], &|g, v| {
        let y = g.concat(&[v[0], v[1], v[0]]);
        probe(g, y, 4)
    });
    assert!(err < TOL, "concat {err}");
    let err = check(std::slice::from_ref(&a), &|g, v| {
        let y = g.sum_last(v[0], &[3]);
        probe(g, y, 5)
    });
    assert!(err < TOL, "sum_last {err}");
    let err = check(std::slice::from_ref(&a), &|g, v| {
        let y = g.reshape(v[0], &[2, 6]);
        probe(g, y, 6)
    });
    assert!(err < TOL, "reshape {err}");
    let one = rnd(&[1, 2, 2], 6);
    let err = check(&[one], &|g, v| {
        let y = g.repeat_batch(v[0], 3);
        probe(g, y, 7)
    });
    assert!(err < TOL, "repeat {err}");
}

#[test]
fn broadcast_ops() {
    let x = rnd(&[2, 3, 2, 2], 7);
    let c = rnd(&[3], 8);
    let s = rnd(&[2, 3], 9);
    let err = check(&[x.clone(), c], &|g, v| {
        let y = g.add_channel(v[0], v[1]);
        probe(g, y, 1)
    });
    assert!(err < TOL, "add_channel {err}");
    let err = check(&[x.clone(), s], &|g, v| {
        let y = g.mul_prefix(v[0], v[1]);
        probe(g, y, 2)
    });
    assert!(err < TOL, "mul_prefix {err}");
    let suf = rnd(&[2, 2], 10);
    let err = check(&[x, suf], &|g, v| {
        let y = g.add_suffix(v[0], v[1]);
        probe(g, y, 3)
    });
    assert!(err < TOL, "add_suffix {err}");
}

#[test]
fn conv_ops() {
    let x = rnd(&[2, 3, 5, 5], 11);
    for &(k, stride) in &[(3usize, 1usize), (3, 2), (1, 1)] {
        let w = rnd(&[4, 3, k, k], 12);
        let err = check(&[x.clone(), w], &|g, v| {
            let y = g.conv2d(v[0], v[1], stride, k / 2);
            probe(g, y, 1)
        });
        assert!(err < TOL, "conv k={k} s={stride}: {err}");
    }
    let even = rnd(&[2, 2, 4, 4], 13);
    let err = check(std::slice::from_ref(&even), &|g, v| {
        let y = g.upsample2(v[0]);
        probe(g, y, 2)
    });
    assert!(err < TOL, "upsample {err}");
    let err = check(&[even], &|g, v| {
        let y = g.avg_pool2(v[0]);
        probe(g, y, 3)
    });
    assert!(err < TOL, "avgpool {err}");
}

#[test]
fn normalization_and_cross_entropy() {
    let x = rnd(&[3, 2, 3, 3], 14);
    let gamma = rnd(&[2], 15);
    let beta = rnd(&[2], 16);
    let err = check(&[x.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5);
        probe(g, y, 1)
    });
    assert!(err < 1e-5, "batch_norm train {err}");
    let rm = [0.1, -0.2];
    let rv = [1.5, 0.7];
    let err = check(&[x, gamma, beta], &|g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5);
        probe(g, y, 2)
    });
    assert!(err < TOL, "batch_norm eval {err}");

    let logits = rnd(&[2, 4, 2, 2], 17);
    let targets = [0usize, 1, 2, 3, 3, 2, 1, 0];
    let err = check(&[logits], &|g, v| g.softmax_cross_entropy(v[0], &targets));
    assert!(err < TOL, "cross entropy {err}");
}

#[test]
fn layer_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ps = ParamSet::<f64>::new();
    let mut bufs = ParamSet::<f64>::new();
    let lin = Linear::new(&mut ps, "lin", 5, 3, 0.5, 0.1, &mut rng);
    let modc = ModulatedConv2d::new(&mut ps, "mod", 3, 2, 3, 3, true, true, &mut rng);
    let bn = BatchNorm2d::new(&mut ps, &mut bufs, "bn", 3);
    let x = rnd(&[2, 2, 3, 3], 22);
    let z = rnd(&[2, 5], 23);

    let mut inputs: Vec<Tensor<f64>> = ps.tensors().to_vec();
    inputs.push(x);
    inputs.push(z);
    let n = ps.len();
    let err = check(&inputs, &|g, v| {
        let b = Bound::from_vars(v[..n].to_vec());
        let style = lin.forward(g, &b, v[n + 1]);
        let y = modc.forward(g, &b, v[n], style);
        let mut upd = Vec::new();
        let y = bn.forward(g, &b, &bufs, y, Mode::Train, &mut upd);
        probe(g, y, 3)
    });
    assert!(err < 1e-5, "modulated conv stack {err}");
}
