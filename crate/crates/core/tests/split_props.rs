use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use vasg_core::data::{
    decode_features, filter_min_history, leave_one_out_split, load_features, FeatureManifest, FeatureMatrix,
    Interaction, InteractionSet, Split, SplitConfig,
};

fn interactions() -> impl Strategy<Value = Vec<Interaction>> {
    // Users with 2..8 distinct products each over a catalog of 3..25.
    (3usize..25).prop_flat_map(|n_products| {
        prop::collection::vec(prop::collection::btree_set(0..n_products, 2..8.min(n_products)), 1..30).prop_map(
            |users| {
                users
                    .iter()
                    .enumerate()
                    .flat_map(|(u, items)| {
                        items
                            .iter()
                            .map(move |p| Interaction::new(format!("u{u}"), format!("p{p}"), 1.0 + (p % 5) as f64))
                    })
                    .collect()
            },
        )
    })
}

fn check(split: &Split, full: &InteractionSet) {
    split.check_partition().unwrap();
    assert!(split.warm_products.is_disjoint(&split.cold_products));
    let tw: BTreeSet<_> = split.t_warm.iter().collect();
    assert!(split.t_cold.iter().all(|t| !tw.contains(t)));
    assert_eq!(split.t_warm.len() + split.t_cold.len(), full.users().len());
    // Every user keeps a training interaction and has exactly one test pair.
    let mut per_user: HashMap<&str, usize> = HashMap::new();
    for (u, _) in &split.test {
        *per_user.entry(u).or_default() += 1;
    }
    assert!(per_user.values().all(|&c| c == 1));
    for u in full.users().ids() {
        assert!(split.train.users().contains(u), "user {u} lost all training data");
    }
    // Train and test never share a (user, product) pair.
    let train: BTreeSet<(&str, &str)> = split
        .train
        .interactions()
        .iter()
        .map(|it| (it.user_id.as_str(), it.product_id.as_str()))
        .collect();
    assert!(split.test.iter().all(|(u, p)| !train.contains(&(u.as_str(), p.as_str()))));
    // Cold products have no training interactions at all.
    for p in &split.cold_products {
        assert!(!split.train.products().contains(p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_and_is_deterministic(rows in interactions(), seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let full = InteractionSet::from_interactions(rows).unwrap();
        let cfg = SplitConfig { seed, cold_fraction: frac };
        let a = leave_one_out_split(&full, &cfg).unwrap();
        check(&a, &full);
        let b = leave_one_out_split(&full, &cfg).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = Split::from_json(&a.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), a.to_json().unwrap());
    }

    #[test]
    fn filter_leaves_only_long_histories(rows in interactions(), min in 1usize..6) {
        let full = InteractionSet::from_interactions(rows).unwrap();
        if let Ok(f) = filter_min_history(&full, min) {
            for items in f.user_products() {
                prop_assert!(items.len() >= min);
            }
            prop_assert_eq!(filter_min_history(&f, min).unwrap(), f);
        }
    }

    #[test]
    fn features_roundtrip_bytes(n in 1usize..12, dim in 1usize..9, seed in any::<u32>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let rows: Vec<f32> = (0..n * dim).map(|i| ((i as u32).wrapping_mul(seed | 1) % 1000) as f32 / 37.0).collect();
        let fm = FeatureMatrix::new(dim, ids.clone(), rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        fm.save(&path).unwrap();
        let back = load_features(&path, ids.iter().map(String::as_str)).unwrap();
        prop_assert_eq!(back, fm);
    }
}

#[test]
fn cold_share_tracks_target_on_synthetic_data() {
    let data = vasg_core::synth::generate(&vasg_core::synth::SynthConfig {
        n_users: 100,
        ..Default::default()
    })
    .unwrap();
    let full = InteractionSet::from_interactions(data.interactions).unwrap();
    let s = leave_one_out_split(&full, &SplitConfig { seed: 3, cold_fraction: 0.5 }).unwrap();
    check(&s, &full);
    assert_eq!(s.t_warm.len() + s.t_cold.len(), 100);
    assert!(s.t_cold.len().abs_diff(50) <= 5, "{}", s.t_cold.len());
}

#[test]
fn features_blob_size_is_checked() {
    let manifest = FeatureManifest {
        dim: 4,
        count: 2,
        ids: vec!["a".into(), "b".into()],
        dtype: "f32le".into(),
        blob: None,
    };
    assert_eq!(decode_features(&manifest, &[0u8; 32]).unwrap().len(), 2);
    assert!(decode_features(&manifest, &[0u8; 31]).is_err());
}
