use marketgan::autodiff::{forward, gradient_check, Graph, Tensor, Var};
use marketgan::netgen::{wgan_gp_losses, CriticConfig, CriticModel, GeneratorConfig, GeneratorInputs, GeneratorModel};
use marketgan::tcn::{Dropout, TcnConfig, TcnNetwork};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// Reduce any node to a scalar with a fixed, non-uniform weighting so that
/// every output element contributes a distinct amount.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 5) as f64).collect()).unwrap();
    let wv = g.constant(w);
    let p = g.mul(x, wv).unwrap();
    g.sum(p)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> marketgan::autodiff::Result<Var>,
{
    let err = gradient_check(f, inputs, EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let p = positive(&[2, 3], &mut rng);
    check("add", |g, x| { let y = g.add(x[0], x[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), b.clone()]);
    check("sub", |g, x| { let y = g.sub(x[0], x[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), b.clone()]);
    check("mul", |g, x| { let y = g.mul(x[0], x[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), b.clone()]);
    check("scale", |g, x| { let y = g.scale(x[0], -2.5); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("offset", |g, x| { let y = g.offset(x[0], 0.7); let y = g.square(y); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("relu", |g, x| { let y = g.relu(x[0]); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("square", |g, x| { let y = g.square(x[0]); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("sqrt", |g, x| { let y = g.sqrt(x[0])?; Ok(weighted_sum(g, y)) }, &[p.clone()]);
    check("recip", |g, x| { let y = g.recip(x[0]); Ok(weighted_sum(g, y)) }, &[p.clone()]);
    let mask = Rc::new(vec![0.0, 1.25, 1.25, 0.0, 1.25, 1.25]);
    check("mask", move |g, x| { let y = g.mask(x[0], mask.clone())?; Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("mean", |g, x| { let y = g.square(x[0]); Ok(g.mean(y)) }, &[a.clone()]);
    check("expand", |g, x| { let s = g.sum(x[0]); let e = g.expand(s, &[4])?; let e = g.square(e); Ok(weighted_sum(g, e)) }, &[a]);
}

#[test]
fn shape_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    let c = random(&[2, 1, 4], &mut rng);
    for axis in 0..3 {
        check("sum_axis", move |g, x| { let y = g.sum_axis(x[0], axis)?; let y = g.square(y); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    }
    check("broadcast", |g, x| { let y = g.broadcast(x[0], 1, 3)?; let y = g.square(y); Ok(weighted_sum(g, y)) }, &[c.clone()]);
    check("concat", |g, x| { let y = g.concat(&[x[0], x[1]], 1)?; let y = g.square(y); Ok(weighted_sum(g, y)) }, &[a.clone(), b]);
    check("slice", |g, x| { let y = g.slice(x[0], 2, 1, 2)?; let y = g.square(y); Ok(weighted_sum(g, y)) }, &[a.clone()]);
    check("pad", |g, x| { let y = g.pad(x[0], 2, 2, 7)?; let y = g.square(y); Ok(weighted_sum(g, y)) }, &[a]);
}

#[test]
fn linear_layer_matches_finite_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[4, 3], &mut rng) } else { random(&[3, 4], &mut rng) };
        let b = if tb { random(&[2, 4], &mut rng) } else { random(&[4, 2], &mut rng) };
        let err = gradient_check(
            move |g, x| {
                let y = g.matmul_t(x[0], x[1], ta, tb)?;
                Ok(weighted_sum(g, y))
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul(ta={ta}, tb={tb}) error {err:e}");
    }
}

#[test]
fn dilated_conv_and_adjoints_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for dilation in [1, 2, 3] {
        let x = random(&[2, 3, 7], &mut rng);
        let w = random(&[2, 3, 4], &mut rng);
        let gy = random(&[2, 4, 7], &mut rng);
        let err = gradient_check(move |g, v| { let y = g.conv1d(v[0], v[1], dilation)?; Ok(weighted_sum(g, y)) }, &[x.clone(), w.clone()], EPS).unwrap();
        assert!(err < 1e-5, "conv d={dilation}: {err:e}");
        let err = gradient_check(move |g, v| { let y = g.conv1d_input_grad(v[0], v[1], dilation)?; Ok(weighted_sum(g, y)) }, &[gy.clone(), w.clone()], EPS).unwrap();
        assert!(err < 1e-5, "conv input adjoint d={dilation}: {err:e}");
        let err = gradient_check(move |g, v| { let y = g.conv1d_weight_grad(v[0], v[1], dilation, 2)?; Ok(weighted_sum(g, y)) }, &[x, gy], EPS).unwrap();
        assert!(err < 1e-5, "conv weight adjoint d={dilation}: {err:e}");
    }
}

#[test]
fn second_order_through_convolution() {
    // f(x, w) = ‖∂/∂x Σ conv(x, w)²‖² exercises the adjoints of both conv adjoints.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[1, 2, 6], &mut rng);
    let w = random(&[3, 2, 2], &mut rng);
    check(
        "double backward conv",
        |g, v| {
            let y = g.conv1d(v[0], v[1], 2)?;
            let y2 = g.square(y);
            let s = g.sum(y2);
            let gx = g.grad(s, None, &[v[0]])?[0];
            let gx2 = g.square(gx);
            Ok(g.sum(gx2))
        },
        &[x, w],
    );
}

#[test]
fn tcn_layer_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut cfg = TcnConfig::uniform(2, 3, 2, 2, 2, 2);
    cfg.channels = vec![3, 4, 4];
    cfg.init_std = 0.4;
    let net = TcnNetwork::new(cfg, &mut rng).unwrap();
    let x = random(&[2, 2, 6], &mut rng);
    let mut inputs = net.params().tensors().to_vec();
    inputs.push(x);
    let n_params = net.params().len();
    check(
        "tcn",
        move |g, v| {
            let y = net.forward(g, &v[..n_params], v[n_params], &mut Dropout::Off).map_err(|e| match e {
                marketgan::tcn::TcnError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            Ok(weighted_sum(g, y))
        },
        &inputs,
    );
}

fn tiny_critic(seed: u64) -> CriticModel {
    let cfg = CriticConfig { hidden: 3, num_blocks: 2, dropout: 0.0, init_std: 0.4, output_init_std: 0.4, ..CriticConfig::full(2, 1) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critic = CriticModel::new(cfg, &mut rng).unwrap();
    // Zero biases put padded positions exactly on the ReLU kink, where a
    // central difference sees half a slope.
    jitter_biases(critic.tcn.params_mut(), &mut rng);
    critic
}

fn jitter_biases(params: &mut marketgan::params::ParamSet, rng: &mut ChaCha8Rng) {
    let names = params.names().to_vec();
    for (i, n) in names.iter().enumerate() {
        if n.ends_with(".bias") {
            params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
    }
}

#[test]
fn full_critic_loss_with_penalty_matches_finite_differences() {
    let critic = tiny_critic(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let real = random(&[2, 2, 5], &mut rng);
    let fake = random(&[2, 2, 5], &mut rng);
    let cov = random(&[2, 1, 5], &mut rng);
    let params = critic.tcn.params().tensors().to_vec();
    let err = gradient_check(
        move |g, v| {
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let y = g.constant(cov.clone());
            let losses = wgan_gp_losses(g, &critic, v, r, f, y, 10.0, &[0.3, 0.8], &mut Dropout::Off)
                .map_err(|e| match e {
                    marketgan::netgen::NetError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
            Ok(losses.critic_loss)
        },
        &params,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "critic loss relative error {err:e}");
}

#[test]
fn penalty_alone_matches_finite_differences() {
    let critic = tiny_critic(19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let real = random(&[1, 2, 4], &mut rng);
    let cov = random(&[1, 1, 4], &mut rng);
    let params = critic.tcn.params().tensors().to_vec();
    let err = gradient_check(
        move |g, v| {
            let r = g.constant(real.clone());
            let y = g.constant(cov.clone());
            let losses = wgan_gp_losses(g, &critic, v, r, r, y, 10.0, &[0.5], &mut Dropout::Off).unwrap();
            Ok(losses.penalty)
        },
        &params,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "penalty relative error {err:e}");
}

#[test]
fn zero_critic_loss_is_lambda() {
    let mut critic = tiny_critic(21);
    for t in critic.tcn.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let p = critic.bind(&mut g, true);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let r = g.constant(random(&[3, 2, 5], &mut rng));
    let f = g.constant(random(&[3, 2, 5], &mut rng));
    let y = g.constant(random(&[3, 1, 5], &mut rng));
    let losses = wgan_gp_losses(&mut g, &critic, &p, r, f, y, 10.0, &[0.1, 0.5, 0.9], &mut Dropout::Off).unwrap();
    assert_eq!(g.value(losses.critic_loss).item().unwrap(), 10.0);
    assert_eq!(g.value(losses.wasserstein).item().unwrap(), 0.0);
    let grads = g.backward(losses.critic_loss, None).unwrap();
    assert!(p.iter().all(|v| grads.get(*v).is_none_or(|t| t.is_finite())));
}

#[test]
fn generator_loss_gradient_matches_finite_differences() {
    let cfg = GeneratorConfig {
        hidden: 3,
        residual_hidden: 3,
        num_blocks: 1,
        residual_blocks: 1,
        latent_dim: 2,
        covariate_dim: 1,
        dropout: 0.0,
        init_std: 0.3,
        output_init_std: 0.3,
        ..GeneratorConfig::full(2, 1, 1)
    };
    let gen = GeneratorModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
    let critic = tiny_critic(24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (b, l) = (1, 4);
    let inputs = GeneratorInputs {
        latent: random(&[b, 2, l + 1], &mut rng),
        covariates: random(&[b, 1, l], &mut rng),
        alpha_hat: random(&[b, 2, l], &mut rng),
        beta_hat: random(&[b, 2, l], &mut rng),
        sigma_hat: positive(&[b, 2, l], &mut rng),
        factors_next: random(&[b, 1, l], &mut rng),
    };
    let n_back = gen.backbone.params().len();
    let mut params = gen.backbone.params().tensors().to_vec();
    params.extend(gen.residual_net.params().tensors().iter().cloned());
    let err = gradient_check(
        move |g, v| {
            let bound = marketgan::netgen::BoundGenerator { backbone: v[..n_back].to_vec(), residual: v[n_back..].to_vec() };
            let out = gen.forward(g, &bound, &inputs, &mut Dropout::Off).unwrap();
            let cp = critic.bind(g, false);
            let y = g.constant(inputs.covariates.clone());
            let s = critic.score(g, &cp, out.returns, y, &mut Dropout::Off).unwrap();
            let m = g.mean(s);
            Ok(g.scale(m, -1.0))
        },
        &params,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "generator loss relative error {err:e}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let net = TcnNetwork::new(TcnConfig::uniform(2, 4, 3, 2, 2, 3), &mut rng).unwrap();
    let x = random(&[2, 2, 20], &mut rng);
    let a = net.run(&x).unwrap().values;
    let b = net.run(&x).unwrap().values;
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_accumulation_is_linear(
        xs in proptest::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::new(vec![2, 3], xs).unwrap();
        let f = |g: &mut Graph, v: Var| { let s = g.square(v); let r = g.relu(v); let m = g.mul(s, r).unwrap(); g.sum(m) };
        let h = |g: &mut Graph, v: Var| { let s = g.sum_axis(v, 1).unwrap(); let q = g.square(s); g.sum(q) };
        let grad_of = |which: u8| {
            let (mut g, leaves, out) = forward(|g, v| {
                let fa = f(g, v[0]);
                let hb = h(g, v[0]);
                Ok(vec![match which {
                    0 => fa,
                    1 => hb,
                    _ => { let l = g.scale(fa, a); let r = g.scale(hb, b); g.add(l, r)? }
                }])
            }, std::slice::from_ref(&x)).unwrap();
            g.backward(out[0], None).unwrap().get(leaves[0]).unwrap().clone()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            let want = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((gc.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn random_conv_gradients_match(seed in 0u64..1000, dilation in 1usize..4, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, 5], &mut rng);
        let w = random(&[k, 2, 2], &mut rng);
        let err = gradient_check(move |g, v| { let y = g.conv1d(v[0], v[1], dilation)?; let y = g.square(y); Ok(g.sum(y)) }, &[x, w], EPS).unwrap();
        prop_assert!(err < 1e-4);
    }
}
