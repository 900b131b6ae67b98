use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;
use vasg_core::nn::{
    adam_step, grad_check, log_sigmoid, mlp_backward, mlp_forward, sigmoid, AdamConfig, AdamState, Mlp, Mode,
};
use vasg_core::rng;

const KINK_MARGIN: f64 = 1e-2;

/// Loss `c · net(x)` under a fixed dropout mask, so finite differences see
/// the same function the tape differentiated.
fn masked_loss(m: &Mlp, x: &[f64], c: &[f64], mask_seed: u64) -> f64 {
    let mut r = rng::stream(mask_seed, &[]);
    let (y, _) = mlp_forward(m, x, Mode::Train(&mut r)).unwrap();
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

#[test]
fn backprop_matches_finite_differences_over_seeds() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 25 {
        seed += 1;
        let mut r = rng::stream(seed, &[]);
        let sizes = [
            r.random_range(2..6),
            r.random_range(2..7),
            r.random_range(2..7),
            r.random_range(1..5),
        ];
        let p = [0.0, 0.3][seed as usize % 2];
        let m = Mlp::new(&sizes, p, &mut r).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| r.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..sizes[3]).map(|_| r.random_range(-1.0..1.0)).collect();
        let mask_seed = seed.wrapping_mul(31);
        let (_, tape) = mlp_forward(&m, &x, Mode::Train(&mut rng::stream(mask_seed, &[]))).unwrap();
        if tape.min_abs_preactivation() < KINK_MARGIN {
            continue;
        }
        let (g, gin) = mlp_backward(&m, &tape, &c).unwrap();

        let params = m.flatten();
        let err = grad_check(
            |theta| {
                let mut probe = m.clone();
                probe.set_flat(theta).unwrap();
                masked_loss(&probe, &x, &c, mask_seed)
            },
            &g.flatten(),
            &params,
            1e-4,
        );
        assert!(err < 1e-4, "seed {seed}: params rel err {err}");
        let err = grad_check(|xp| masked_loss(&m, xp, &c, mask_seed), &gin, &x, 1e-4);
        assert!(err < 1e-4, "seed {seed}: input rel err {err}");
        checked += 1;
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng::stream(2, &[]);
    let m = Mlp::new(&[3, 4, 2], 0.0, &mut r).unwrap();
    let (_, tape) = mlp_forward(&m, &[0.1, -0.2, 0.3], Mode::Eval).unwrap();
    let (g, gin) = mlp_backward(&m, &tape, &[0.0, 0.0]).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
    assert!(gin.iter().all(|&v| v == 0.0));
}

#[test]
fn inverted_dropout_preserves_expectation() {
    // One hidden layer: the output is linear in the mask, so its mean over
    // masks equals the eval-mode output.
    let mut r = rng::stream(8, &[]);
    let m = Mlp::new(&[4, 16, 3], 0.5, &mut r).unwrap();
    let x = [0.5, -1.0, 0.25, 2.0];
    let eval = m.predict(&x).unwrap();
    let n = 10_000;
    let mut draws = Array2::<f64>::zeros((n, 3));
    let mut masks = rng::stream(9, &[]);
    for i in 0..n {
        let (y, _) = mlp_forward(&m, &x, Mode::Train(&mut masks)).unwrap();
        draws.row_mut(i).assign(&ndarray::ArrayView1::from(&y[..]));
    }
    for (k, want) in eval.iter().enumerate() {
        let col = draws.column(k);
        let mean = col.mean().unwrap();
        let se = col.std(1.0) / (n as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "coord {k}: {mean} vs {want}");
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut state = AdamState::new(AdamConfig::with_lr(0.05), &[2]);
    let mut x = vec![3.0, -2.0];
    let loss = |x: &[f64]| (x[0] - 1.0).powi(2) + 4.0 * (x[1] + 0.5).powi(2);
    let start = loss(&x);
    for _ in 0..500 {
        let g = [2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)];
        adam_step(&mut state, &mut [&mut x[..]], &[&g[..]]).unwrap();
    }
    assert!(loss(&x) < 1e-3 * start, "{x:?}");
}

proptest! {
    #[test]
    fn log_sigmoid_is_finite(x in -500.0f64..500.0) {
        let v = log_sigmoid(x);
        prop_assert!(v.is_finite() && v <= 0.0);
        prop_assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-12);
    }
}
