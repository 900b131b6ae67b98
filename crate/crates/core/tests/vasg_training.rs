use rand::Rng as _;
use vasg_core::data::{FeatureMatrix, Interaction, InteractionSet};
use vasg_core::exec::Exec;
use vasg_core::hin::{build_hin, CorpusConfig, Hin, Node};
use vasg_core::nn::{grad_check, mlp_forward, Mode};
use vasg_core::recsys::cosine;
use vasg_core::rng;
use vasg_core::synth::{generate, SynthConfig};
use vasg_core::vasg::{
    product_step_loss, train, train_on_batches, user_step_loss, NegativeSampler, TrainConfig, UncertaintyWeights,
    VasgModel,
};

fn clique(n_users: usize, n_products: usize) -> (Hin, FeatureMatrix) {
    let mut rows = Vec::new();
    for u in 0..n_users {
        for p in 0..n_products {
            rows.push(Interaction::new(format!("u{u}"), format!("p{p}"), 4.0));
        }
    }
    let hin = build_hin(&InteractionSet::from_interactions(rows).unwrap()).unwrap();
    let ids: Vec<String> = (0..n_products).map(|p| format!("p{p}")).collect();
    let values = (0..n_products * 8).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
    (hin, FeatureMatrix::new(8, ids, values).unwrap())
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 4,
        hidden: vec![8],
        dropout_p: 0.5,
        batch_size: 16,
        corpus: CorpusConfig {
            walks_per_node: 5,
            walk_length: 8,
            window: 3,
            seed,
        },
        seed,
        ..TrainConfig::default()
    }
}

/// Flattens the parameters one product step touches: center row, context
/// row, decoder, then (s1, s2).
fn pack(m: &VasgModel, c: usize, v: usize) -> Vec<f64> {
    let mut out = m.embeddings.row(c).to_vec();
    out.extend_from_slice(m.embeddings.row(v));
    out.extend(m.decoder.flatten());
    out.extend([m.weights.s1, m.weights.s2]);
    out
}

fn unpack(m: &mut VasgModel, c: usize, v: usize, theta: &[f64]) {
    let d = m.dim();
    m.embeddings.row_mut(c).copy_from_slice(&theta[..d]);
    m.embeddings.row_mut(v).copy_from_slice(&theta[d..2 * d]);
    let n = m.decoder.n_params();
    m.decoder.set_flat(&theta[2 * d..2 * d + n]).unwrap();
    m.weights = UncertaintyWeights {
        s1: theta[2 * d + n],
        s2: theta[2 * d + n + 1],
    };
}

#[test]
fn product_step_gradient_matches_finite_differences() {
    let (hin, _) = clique(2, 2);
    let mut checked = 0;
    let mut seed = 0;
    while checked < 12 {
        seed += 1;
        let mut r = rng::stream(seed, &[]);
        let mut model = VasgModel::new(&hin, 8, toy_config(seed)).unwrap();
        for slot in 0..model.embeddings.n_rows() {
            for x in model.embeddings.row_mut(slot) {
                *x = r.random_range(-1.0..1.0);
            }
        }
        model.weights = UncertaintyWeights {
            s1: r.random_range(-1.0..1.0),
            s2: r.random_range(-1.0..1.0),
        };
        let f: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let center = Node::Product(r.random_range(0..2));
        let context = Node::User(r.random_range(0..2));
        let (c, v) = (model.embeddings.slot(center), model.embeddings.slot(context));
        // The single hidden layer's pre-activations do not depend on the mask.
        let (_, tape) = mlp_forward(&model.decoder, model.embeddings.row(c), Mode::Eval).unwrap();
        if tape.min_abs_preactivation() < 1e-2 {
            continue;
        }
        let mask = seed * 101;
        let g = product_step_loss(&model, center, context, Some(&f), &mut rng::stream(mask, &[])).unwrap();
        let mut analytic = g.row(c).unwrap().to_vec();
        analytic.extend_from_slice(g.row(v).unwrap());
        analytic.extend(g.decoder.as_ref().unwrap().flatten());
        analytic.extend([g.ds1, g.ds2]);

        let theta = pack(&model, c, v);
        let mut probe = model.clone();
        let err = grad_check(
            |t| {
                unpack(&mut probe, c, v, t);
                product_step_loss(&probe, center, context, Some(&f), &mut rng::stream(mask, &[]))
                    .unwrap()
                    .total
            },
            &analytic,
            &theta,
            1e-4,
        );
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
        checked += 1;
    }
}

#[test]
fn user_batches_leave_decoder_and_weights_untouched() {
    let (hin, features) = clique(3, 3);
    let mut model = VasgModel::new(&hin, 8, toy_config(3)).unwrap();
    let decoder = model.decoder.flatten();
    let weights = model.weights;
    let users_before = model.embeddings.data().to_vec();
    let batches: Vec<Vec<(Node, Node)>> = (0..20)
        .map(|i| (0..4).map(|j| (Node::User((i + j) % 3), Node::Product(j % 3))).collect())
        .collect();
    train_on_batches(&mut model, &hin, &features, &batches, &Exec::sequential()).unwrap();
    assert_eq!(model.decoder.flatten(), decoder);
    assert_eq!(model.weights, weights);
    assert_ne!(model.embeddings.data(), &users_before[..]);

    let g = user_step_loss(&model, Node::User(0), Node::Product(0)).unwrap();
    assert!(g.decoder.is_none());
    assert_eq!((g.ds1, g.ds2), (0.0, 0.0));
}

#[test]
fn mixed_batches_are_rejected() {
    let (hin, features) = clique(2, 2);
    let mut model = VasgModel::new(&hin, 8, toy_config(3)).unwrap();
    let bad = vec![vec![(Node::User(0), Node::Product(0)), (Node::Product(0), Node::User(0))]];
    assert!(train_on_batches(&mut model, &hin, &features, &bad, &Exec::sequential()).is_err());
}

#[test]
fn repeated_step_on_one_pair_lowers_loss() {
    let (hin, features) = clique(2, 2);
    let mut model = VasgModel::new(&hin, 8, TrainConfig { dropout_p: 0.0, ..toy_config(5) }).unwrap();
    let pair = (Node::Product(0), Node::User(1));
    let f = features.row_f64("p0").unwrap();
    let loss = |m: &VasgModel| {
        product_step_loss(m, pair.0, pair.1, Some(&f), &mut rng::stream(0, &[]))
            .unwrap()
            .total
    };
    let mut trace = vec![loss(&model)];
    for _ in 0..100 {
        train_on_batches(&mut model, &hin, &features, &[vec![pair]], &Exec::sequential()).unwrap();
        trace.push(loss(&model));
    }
    let drops = trace.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 90, "{drops}/100 steps lowered the loss");
    assert!(trace[100] < trace[0]);
}

#[test]
fn clique_epoch_loss_falls() {
    let (hin, features) = clique(2, 2);
    let cfg = TrainConfig {
        epochs: 5,
        lr: 1e-2,
        ..toy_config(7)
    };
    let mut model = VasgModel::new(&hin, 8, cfg).unwrap();
    let report = train(&mut model, &hin, &features, &Exec::sequential()).unwrap();
    let losses: Vec<f64> = report
        .history
        .iter()
        .map(|e| e.mean_sg + e.mean_mse)
        .collect();
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 3, "{losses:?}");
    for e in &report.history {
        assert!(e.w1 > 0.0 && e.w2 > 0.0);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (hin, features) = clique(3, 4);
    let run = || {
        let mut m = VasgModel::new(&hin, 8, toy_config(11)).unwrap();
        train(&mut m, &hin, &features, &Exec::sequential()).unwrap();
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn no_negative_default_run_is_finite() {
    let (hin, features) = clique(3, 3);
    let mut m = VasgModel::new(&hin, 8, toy_config(2)).unwrap();
    assert_eq!(m.config.negative_samples, 0);
    train(&mut m, &hin, &features, &Exec::sequential()).unwrap();
    assert!(m.embeddings.data().iter().all(|v| v.is_finite()));
}

#[test]
fn negative_draws_follow_counts() {
    let nodes = vec![Node::User(0), Node::Product(0), Node::Product(1)];
    let counts = [6u64, 3, 1];
    let s = NegativeSampler::new(nodes.clone(), &counts).unwrap();
    let mut r = rng::stream(12, &[]);
    let n = 20_000;
    let draws = vasg_core::vasg::sample_negatives(&s, &mut r, n, &[]);
    for (node, &c) in nodes.iter().zip(&counts) {
        let p = c as f64 / 10.0;
        let hits = draws.iter().filter(|d| *d == node).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - n as f64 * p).abs() < 3.0 * sigma, "{node:?}: {hits}");
    }
}

#[test]
fn planted_clusters_separate_users_and_products() {
    let cfg = SynthConfig {
        n_users: 60,
        n_products: 60,
        purchases_per_user: 10,
        feature_dim: 12,
        seed: 4,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let set = InteractionSet::from_interactions(data.interactions.clone()).unwrap();
    let hin = build_hin(&set).unwrap();
    let tc = TrainConfig {
        dim: 16,
        hidden: vec![16],
        negative_samples: 1,
        corpus: CorpusConfig { seed: 4, ..CorpusConfig::default() },
        seed: 4,
        ..TrainConfig::default()
    };
    let mut model = VasgModel::new(&hin, 12, tc).unwrap();
    train(&mut model, &hin, &data.features, &Exec::sequential()).unwrap();
    let cluster = |id: &str| id[1..].parse::<usize>().unwrap() % 3;
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for u in hin.users().ids() {
        for p in hin.products().ids() {
            let s = cosine(model.embeddings.user(u).unwrap(), model.embeddings.product(p).unwrap()).unwrap();
            if cluster(u) == cluster(p) {
                intra.push(s)
            } else {
                inter.push(s)
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
}
