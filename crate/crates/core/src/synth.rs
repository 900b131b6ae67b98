//! Planted-cluster synthetic datasets.
//!
//! Users and products are assigned to clusters round-robin. Each purchase
//! lands in the user's cluster with probability `in_cluster_prob`, otherwise
//! on a product drawn uniformly from the other clusters. Product features are
//! the cluster centroid (an orthogonal one-hot block scaled to norm 1) plus
//! Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_interactions, FeatureMatrix, Interaction};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_products: usize,
    pub n_clusters: usize,
    pub in_cluster_prob: f64,
    pub purchases_per_user: usize,
    pub feature_dim: usize,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_products: 300,
            n_clusters: 3,
            in_cluster_prob: 0.9,
            purchases_per_user: 20,
            feature_dim: 64,
            feature_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_clusters;
        if k == 0 || k > self.n_users.min(self.n_products) {
            return Err(Error::Config(format!(
                "n_clusters {k} must be in 1..=min(n_users, n_products)"
            )));
        }
        if !(self.in_cluster_prob > 0.5 && self.in_cluster_prob <= 1.0) {
            return Err(Error::Config("in_cluster_prob must be in (0.5, 1]".into()));
        }
        if self.feature_dim < k {
            return Err(Error::Config("feature_dim must be at least n_clusters".into()));
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return Err(Error::Config("feature_noise_std must be finite and non-negative".into()));
        }
        if self.purchases_per_user == 0 || self.purchases_per_user > self.n_products {
            return Err(Error::Config("purchases_per_user must be in 1..=n_products".into()));
        }
        Ok(())
    }

    fn width(&self, n: usize) -> usize {
        n.saturating_sub(1).to_string().len()
    }

    pub fn user_id(&self, i: usize) -> String {
        format!("u{:0w$}", i, w = self.width(self.n_users))
    }

    pub fn product_id(&self, i: usize) -> String {
        format!("p{:0w$}", i, w = self.width(self.n_products))
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub features: FeatureMatrix,
    pub user_clusters: Vec<usize>,
    pub product_clusters: Vec<usize>,
    pub config: SynthConfig,
}

pub fn cluster_of(i: usize, k: usize) -> usize {
    i % k
}

/// Unit centroid of cluster `c`: constant on its block of dimensions.
pub fn centroid(c: usize, k: usize, dim: usize) -> Vec<f64> {
    let (lo, hi) = (c * dim / k, (c + 1) * dim / k);
    let v = 1.0 / ((hi - lo) as f64).sqrt();
    (0..dim).map(|d| if (lo..hi).contains(&d) { v } else { 0.0 }).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let k = cfg.n_clusters;
    let mut r = rng::stream(cfg.seed, &[]);
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..cfg.n_products).filter(|&p| cluster_of(p, k) == c).collect())
        .collect();

    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.purchases_per_user);
    for u in 0..cfg.n_users {
        let home = cluster_of(u, k);
        let mut bought = BTreeSet::new();
        while bought.len() < cfg.purchases_per_user {
            let inside = r.random::<f64>() < cfg.in_cluster_prob;
            let side = |inside: bool| -> Vec<usize> {
                if inside {
                    members[home].iter().copied().filter(|p| !bought.contains(p)).collect()
                } else {
                    (0..cfg.n_products)
                        .filter(|&p| cluster_of(p, k) != home && !bought.contains(&p))
                        .collect()
                }
            };
            let mut pool = side(inside);
            if pool.is_empty() {
                // One side is exhausted; fall back to the other.
                pool = side(!inside);
            }
            let p = pool[r.random_range(0..pool.len())];
            bought.insert(p);
            let rating = r.random_range(1..=5) as f64;
            interactions.push(Interaction::new(cfg.user_id(u), cfg.product_id(p), rating));
        }
    }

    let noise = Normal::new(0.0, cfg.feature_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::with_capacity(cfg.n_products * cfg.feature_dim);
    let mut ids = Vec::with_capacity(cfg.n_products);
    for p in 0..cfg.n_products {
        let c = centroid(cluster_of(p, k), k, cfg.feature_dim);
        rows.extend(c.iter().map(|x| (x + noise.sample(&mut r)) as f32));
        ids.push(cfg.product_id(p));
    }

    Ok(SynthData {
        interactions,
        features: FeatureMatrix::new(cfg.feature_dim, ids, rows)?,
        user_clusters: (0..cfg.n_users).map(|u| cluster_of(u, k)).collect(),
        product_clusters: (0..cfg.n_products).map(|p| cluster_of(p, k)).collect(),
        config: cfg.clone(),
    })
}

pub struct SynthPaths {
    pub interactions: PathBuf,
    pub features: PathBuf,
    pub clusters: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            interactions: dir.join("interactions.csv"),
            features: dir.join("features.json"),
            clusters: dir.join("clusters.csv"),
        }
    }
}

impl SynthData {
    /// Writes `interactions.csv`, `features.json` (+ `features.f32`) and
    /// `clusters.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        write_interactions(&paths.interactions, &self.interactions)?;
        self.features.save(&paths.features)?;
        let mut text = String::from("id,cluster\n");
        for (u, c) in self.user_clusters.iter().enumerate() {
            text.push_str(&format!("{},{c}\n", self.config.user_id(u)));
        }
        for (p, c) in self.product_clusters.iter().enumerate() {
            text.push_str(&format!("{},{c}\n", self.config.product_id(p)));
        }
        fs::write(&paths.clusters, text).map_err(|e| Error::io(&paths.clusters, e))?;
        Ok(paths)
    }

    /// Share of purchases made inside the buyer's cluster.
    pub fn in_cluster_share(&self) -> f64 {
        let k = self.config.n_clusters;
        let parse = |s: &str| s[1..].parse::<usize>().expect("generated id");
        let inside = self
            .interactions
            .iter()
            .filter(|it| cluster_of(parse(&it.user_id), k) == cluster_of(parse(&it.product_id), k))
            .count();
        inside as f64 / self.interactions.len() as f64
    }
}
