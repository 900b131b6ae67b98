//! Evaluation protocols: leave-one-out AUC, relation ("also bought") pair
//! accuracy, the RAND/WBOI/INN baselines, analogy precision, cosine
//! similarity distribution statistics, and PCA export.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, InteractionSet, Split, TestPair};
use crate::exec::Exec;
use crate::recsys::{analogy_recommend, cosine, EmbeddingIndex};
use crate::rng;
use crate::vectors::Vectors;
use crate::{Error, Result};

/// Users, candidate products, and each user's known products (train and
/// test), all by dense index.
#[derive(Debug, Clone)]
pub struct EvalUniverse {
    users: Vec<String>,
    products: Vec<String>,
    user_pos: HashMap<String, usize>,
    product_pos: HashMap<String, usize>,
    known: Vec<HashSet<usize>>,
}

impl EvalUniverse {
    /// `products` is the candidate set `P`; every test product must be in it.
    pub fn new(split: &Split, products: Vec<String>) -> Result<Self> {
        let users: Vec<String> = split.train.users().ids().to_vec();
        let user_pos: HashMap<String, usize> =
            users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let product_pos: HashMap<String, usize> =
            products.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut known = vec![HashSet::new(); users.len()];
        for it in split.train.interactions() {
            if let (Some(&u), Some(&p)) = (user_pos.get(&it.user_id), product_pos.get(&it.product_id)) {
                known[u].insert(p);
            }
        }
        for (u, p) in &split.test {
            let ui = *user_pos.get(u).ok_or_else(|| Error::UnknownId {
                kind: "user",
                id: u.clone(),
            })?;
            if let Some(&pi) = product_pos.get(p) {
                known[ui].insert(pi);
            }
        }
        Ok(EvalUniverse {
            users,
            products,
            user_pos,
            product_pos,
            known,
        })
    }

    /// Universe over every warm and cold product.
    pub fn from_split(split: &Split) -> Result<Self> {
        Self::new(split, split.all_products())
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn user(&self, id: &str) -> Option<usize> {
        self.user_pos.get(id).copied()
    }

    pub fn product(&self, id: &str) -> Option<usize> {
        self.product_pos.get(id).copied()
    }

    /// `P − P_u`.
    pub fn negatives(&self, u: usize) -> Vec<usize> {
        (0..self.products.len())
            .filter(|p| !self.known[u].contains(p))
            .collect()
    }
}

/// Score of a (user, product) pair, by universe index.
pub trait Scorer: Sync {
    fn score(&self, user: usize, product: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64 + Sync> Scorer for F {
    fn score(&self, user: usize, product: usize) -> f64 {
        self(user, product)
    }
}

/// Cosine between user and product vectors.
#[derive(Debug, Clone)]
pub struct CosineScorer {
    dim: usize,
    users: Vec<f64>,
    products: Vec<f64>,
}

fn unit_rows(ids: &[String], table: &Vectors, kind: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ids.len() * table.dim());
    for id in ids {
        let v = table.get(id).ok_or_else(|| Error::UnknownId {
            kind,
            id: id.clone(),
        })?;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!("{kind} `{id}` has a zero vector")));
        }
        out.extend(v.iter().map(|x| x / n));
    }
    Ok(out)
}

impl CosineScorer {
    pub fn new(universe: &EvalUniverse, users: &Vectors, products: &Vectors) -> Result<Self> {
        if users.dim() != products.dim() {
            return Err(Error::Dimension("user and product vectors differ in dim".into()));
        }
        Ok(CosineScorer {
            dim: users.dim(),
            users: unit_rows(&universe.users, users, "user")?,
            products: unit_rows(&universe.products, products, "product")?,
        })
    }
}

impl Scorer for CosineScorer {
    fn score(&self, user: usize, product: usize) -> f64 {
        let u = &self.users[user * self.dim..(user + 1) * self.dim];
        let p = &self.products[product * self.dim..(product + 1) * self.dim];
        u.iter().zip(p).map(|(a, b)| a * b).sum()
    }
}

/// Pseudo-random score in `[0, 1)`, a pure function of (seed, user, product).
#[derive(Debug, Clone, Copy)]
pub struct RandScorer {
    pub seed: u64,
}

pub fn rand_scorer(seed: u64) -> RandScorer {
    RandScorer { seed }
}

impl Scorer for RandScorer {
    fn score(&self, user: usize, product: usize) -> f64 {
        rng::hash_unit(self.seed, &[user as u64, product as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AucSampling {
    /// Every product in `P − P_u`.
    All,
    /// `k` negatives per test pair drawn without replacement.
    Sample { k: usize, seed: u64 },
}

/// Mean over test pairs of the fraction of negatives scored strictly below
/// the held-out product. Ties count as failures.
pub fn auc(
    scorer: &dyn Scorer,
    universe: &EvalUniverse,
    pairs: &[TestPair],
    sampling: AucSampling,
    exec: &Exec,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("AUC over an empty test subset".into()));
    }
    let per_pair = exec.map(pairs, |(u, p)| -> Result<Option<f64>> {
        let ui = universe.user(u).ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: u.clone(),
        })?;
        let pi = universe.product(p).ok_or_else(|| Error::UnknownId {
            kind: "product",
            id: p.clone(),
        })?;
        let mut negatives = universe.negatives(ui);
        if let AucSampling::Sample { k, seed } = sampling {
            if negatives.len() > k {
                let mut r = rng::stream(seed, &[ui as u64, pi as u64]);
                let picked = index::sample(&mut r, negatives.len(), k);
                negatives = picked.into_iter().map(|i| negatives[i]).collect();
            }
        }
        if negatives.is_empty() {
            return Ok(None);
        }
        let s = scorer.score(ui, pi);
        let wins = negatives
            .iter()
            .filter(|&&j| s > scorer.score(ui, j))
            .count();
        Ok(Some(wins as f64 / negatives.len() as f64))
    });
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in per_pair {
        if let Some(v) = r? {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no test pair has negatives".into()));
    }
    Ok(sum / n as f64)
}

/// Rating-weighted mean of the features of the user's training products.
pub fn wboi_user_embedding(user: &str, train: &InteractionSet, features: &FeatureMatrix) -> Result<Vec<f64>> {
    let u = train.users().get(user).ok_or_else(|| Error::UnknownId {
        kind: "user",
        id: user.to_string(),
    })?;
    let mut acc = vec![0.0; features.dim()];
    let mut weight = 0.0;
    for (it, &(ui, _)) in train.interactions().iter().zip(train.pairs()) {
        if ui != u {
            continue;
        }
        let f = features
            .row(&it.product_id)
            .ok_or_else(|| Error::MissingFeatures(vec![it.product_id.clone()]))?;
        for (a, &x) in acc.iter_mut().zip(f) {
            *a += it.rating * f64::from(x);
        }
        weight += it.rating;
    }
    if weight == 0.0 {
        return Err(Error::Precondition(format!("user `{user}` has no training products")));
    }
    acc.iter_mut().for_each(|a| *a /= weight);
    Ok(acc)
}

/// WBOI user vectors for every training user.
pub fn wboi_users(train: &InteractionSet, features: &FeatureMatrix) -> Result<Vectors> {
    let mut out = Vectors::new(features.dim());
    for u in train.users().ids() {
        out.push(u.clone(), &wboi_user_embedding(u, train, features)?)?;
    }
    Ok(out)
}

/// Raw feature rows for `ids`, as `f64`.
pub fn feature_vectors<'a, I: IntoIterator<Item = &'a String>>(features: &FeatureMatrix, ids: I) -> Result<Vectors> {
    let mut out = Vectors::new(features.dim());
    for id in ids {
        let row = features
            .row_f64(id)
            .ok_or_else(|| Error::MissingFeatures(vec![id.clone()]))?;
        out.push(id.clone(), &row)?;
    }
    Ok(out)
}

pub type ProductPair = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSets {
    /// Co-purchased pairs (R).
    pub positive: Vec<ProductPair>,
    /// Never co-purchased pairs (Q), same size as `positive`.
    pub negative: Vec<ProductPair>,
}

/// Samples `min(cap, available)` co-purchased product pairs and as many
/// non-co-purchased pairs, uniformly, over the training products.
pub fn build_relation_sets(train: &InteractionSet, seed: u64, cap: usize) -> Result<RelationSets> {
    if train.is_empty() {
        return Err(Error::Precondition("relation sets need training interactions".into()));
    }
    let n = train.products().len();
    let mut co: BTreeSet<(usize, usize)> = BTreeSet::new();
    for items in train.user_products() {
        for (a, &i) in items.iter().enumerate() {
            for &j in &items[a + 1..] {
                co.insert((i.min(j), i.max(j)));
            }
        }
    }
    let co: Vec<(usize, usize)> = co.into_iter().collect();
    let co_set: HashSet<(usize, usize)> = co.iter().copied().collect();
    let mut r = rng::stream(seed, &[]);
    let size = cap.min(co.len());
    let positive_idx: Vec<(usize, usize)> = index::sample(&mut r, co.len(), size)
        .into_iter()
        .map(|i| co[i])
        .collect();

    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs - co.len();
    if available < size {
        return Err(Error::Degenerate(format!(
            "only {available} non-co-purchased pairs for {size} positives"
        )));
    }
    let negative_idx: Vec<(usize, usize)> = if available <= 4 * size {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|p| !co_set.contains(p))
            .collect();
        index::sample(&mut r, all.len(), size)
            .into_iter()
            .map(|i| all[i])
            .collect()
    } else {
        let mut chosen: HashSet<(usize, usize)> = HashSet::with_capacity(size);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n);
            if i == j {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if co_set.contains(&pair) || !chosen.insert(pair) {
                continue;
            }
            out.push(pair);
        }
        out
    };
    let name = |(i, j): (usize, usize)| {
        (
            train.products().id(i).to_string(),
            train.products().id(j).to_string(),
        )
    };
    Ok(RelationSets {
        positive: positive_idx.into_iter().map(name).collect(),
        negative: negative_idx.into_iter().map(name).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    Fixed(f64),
    /// Tune on a stratified half of the pairs, report on the other half.
    Auto { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationOutcome {
    pub accuracy: f64,
    pub threshold: f64,
}

fn pair_sims(vectors: &Vectors, pairs: &[ProductPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let va = vectors.get(a).ok_or_else(|| Error::UnknownId {
                kind: "product",
                id: a.clone(),
            })?;
            let vb = vectors.get(b).ok_or_else(|| Error::UnknownId {
                kind: "product",
                id: b.clone(),
            })?;
            cosine(va, vb)
        })
        .collect()
}

fn accuracy_at(pos: &[f64], neg: &[f64], t: f64) -> f64 {
    let hits = pos.iter().filter(|&&s| s > t).count() + neg.iter().filter(|&&s| s <= t).count();
    hits as f64 / (pos.len() + neg.len()) as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Accuracy of "cosine > t means co-purchased" over `R ∪ Q`.
pub fn relation_accuracy(vectors: &Vectors, sets: &RelationSets, threshold: Threshold) -> Result<RelationOutcome> {
    let pos = pair_sims(vectors, &sets.positive)?;
    let neg = pair_sims(vectors, &sets.negative)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate("empty relation set".into()));
    }
    match threshold {
        Threshold::Fixed(t) => Ok(RelationOutcome {
            accuracy: accuracy_at(&pos, &neg, t),
            threshold: t,
        }),
        Threshold::Auto { seed } => {
            if pos.len() < 2 || neg.len() < 2 {
                return Err(Error::Degenerate("auto threshold needs at least 2 pairs per class".into()));
            }
            let mut r = rng::stream(seed, &[]);
            let mut pos = pos;
            let mut neg = neg;
            pos.shuffle(&mut r);
            neg.shuffle(&mut r);
            let (pos_tune, pos_eval) = pos.split_at(pos.len() / 2);
            let (neg_tune, neg_eval) = neg.split_at(neg.len() / 2);
            let mut tune: Vec<f64> = pos_tune.iter().chain(neg_tune).copied().collect();
            tune.sort_by(f64::total_cmp);
            let mut best = (f64::NEG_INFINITY, 0.0);
            for q in 1..100 {
                let t = quantile(&tune, q as f64 / 100.0);
                let acc = accuracy_at(pos_tune, neg_tune, t);
                if acc > best.0 {
                    best = (acc, t);
                }
            }
            Ok(RelationOutcome {
                accuracy: accuracy_at(pos_eval, neg_eval, best.1),
                threshold: best.1,
            })
        }
    }
}

pub const HISTOGRAM_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub n_pairs: usize,
    pub mean: f64,
    pub std: f64,
    /// `m4 / m2²`; `None` when the similarities have no spread.
    pub kurtosis_pearson: Option<f64>,
    /// Pearson kurtosis minus 3.
    pub kurtosis_excess: Option<f64>,
    /// Counts over 100 equal bins of `[-1, 1]`.
    #[serde(skip)]
    pub histogram: Vec<u64>,
}

/// Cosine statistics over `n_pairs` uniformly drawn pairs of distinct rows.
pub fn similarity_distribution(vectors: &Vectors, n_pairs: usize, seed: u64, exec: &Exec) -> Result<DistributionStats> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Degenerate("similarity distribution needs two vectors".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let mut r = rng::stream(seed, &[]);
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            let i = r.random_range(0..n);
            let mut j = r.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    let sims: Vec<f64> = exec
        .map(&pairs, |&(i, j)| cosine(vectors.row(i), vectors.row(j)))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(moments(&sims))
}

fn moments(sims: &[f64]) -> DistributionStats {
    let n = sims.len() as f64;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &s in sims {
        let bin = (((s + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor() as isize;
        histogram[bin.clamp(0, HISTOGRAM_BINS as isize - 1) as usize] += 1;
    }
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return DistributionStats {
            n_pairs: sims.len(),
            mean: lo,
            std: 0.0,
            kurtosis_pearson: None,
            kurtosis_excess: None,
            histogram,
        };
    }
    let mean = sims.iter().sum::<f64>() / n;
    let m2 = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let m4 = sims.iter().map(|s| (s - mean).powi(4)).sum::<f64>() / n;
    let pearson = (m2 > 0.0).then(|| m4 / (m2 * m2));
    DistributionStats {
        n_pairs: sims.len(),
        mean,
        std: m2.sqrt(),
        kurtosis_pearson: pearson,
        kurtosis_excess: pearson.map(|k| k - 3.0),
        histogram,
    }
}

pub fn write_histogram_csv(path: &Path, stats: &DistributionStats) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let width = 2.0 / HISTOGRAM_BINS as f64;
    for (i, c) in stats.histogram.iter().enumerate() {
        let lo = -1.0 + i as f64 * width;
        out.push_str(&format!("{:.2},{:.2},{c}\n", lo, lo + width));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

fn covariance(vectors: &Vectors) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (vectors.len(), vectors.dim());
    let mut mean = vec![0.0; d];
    for (_, v) in vectors.iter() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for (_, v) in vectors.iter() {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    (mean, cov)
}

/// Top-`k` principal directions by power iteration with deflation.
pub fn pca(vectors: &Vectors, k: usize, seed: u64) -> Result<Pca> {
    let d = vectors.dim();
    if k == 0 || k > d {
        return Err(Error::Config(format!("cannot take {k} components of {d}-dim data")));
    }
    if vectors.len() < k {
        return Err(Error::Config(format!(
            "{} vectors are too few for {k} components",
            vectors.len()
        )));
    }
    let (mean, mut cov) = covariance(vectors);
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum();
    let mut r = rng::stream(seed, &[]);
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let mut w = matvec(&cov, &v, d);
            let n = normalize(&mut w);
            let agreement: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            v = w;
            lambda = n;
            if n == 0.0 || 1.0 - agreement.abs() < 1e-16 {
                break;
            }
        }
        // Sign convention: largest-magnitude coordinate positive.
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let cv = matvec(&cov, &v, d);
        let rayleigh: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let lambda = if lambda == 0.0 { 0.0 } else { rayleigh };
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
        total_variance,
    })
}

fn matvec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v.iter().zip(&self.mean)).map(|(a, (x, m))| a * (x - m)).sum())
            .collect()
    }
}

/// `(id, projection)` rows of mean-centered data on the top-`k` components.
pub fn pca_export(vectors: &Vectors, k: usize, seed: u64) -> Result<Vec<(String, Vec<f64>)>> {
    let p = pca(vectors, k, seed)?;
    Ok(vectors
        .iter()
        .map(|(id, v)| (id.to_string(), p.project(v)))
        .collect())
}

pub fn write_pca_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.1.len());
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((1..=k).map(|i| format!("c{i}")))
        .collect();
    let mut text = header.join(",") + "\n";
    for (id, proj) in rows {
        text.push_str(id);
        for x in proj {
            text.push_str(&format!(",{x}"));
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalogyPrecision {
    pub k: usize,
    pub queries: usize,
    /// Share of top-k hits that are the query user's held-out product.
    pub held_out: f64,
    /// Share of top-k hits among any product the user bought (train or test).
    pub any_purchase: f64,
}

/// Samples `(u1, u2, p1)` with `u1 ≠ u2` and `p1` a training product of
/// `u1`, and scores the analogy top-k against `u2`'s purchases.
pub fn analogy_precision(
    split: &Split,
    products: &Vectors,
    users: &Vectors,
    queries: usize,
    k: usize,
    seed: u64,
    exec: &Exec,
) -> Result<AnalogyPrecision> {
    let train = &split.train;
    let ids = train.users().ids();
    if ids.len() < 2 {
        return Err(Error::Degenerate("analogy queries need two users".into()));
    }
    let mut held_out: HashMap<&str, HashSet<&str>> = HashMap::new();
    for (u, p) in &split.test {
        held_out.entry(u.as_str()).or_default().insert(p.as_str());
    }
    let mut bought: HashMap<&str, HashSet<&str>> = held_out.clone();
    for it in train.interactions() {
        bought
            .entry(it.user_id.as_str())
            .or_default()
            .insert(it.product_id.as_str());
    }
    let index = EmbeddingIndex::build(products)?;
    let by_user = train.user_products();
    let mut r = rng::stream(seed, &[]);
    let triples: Vec<(usize, usize, usize)> = (0..queries)
        .map(|_| {
            let u1 = r.random_range(0..ids.len());
            let mut u2 = r.random_range(0..ids.len() - 1);
            if u2 >= u1 {
                u2 += 1;
            }
            let items = &by_user[u1];
            (u1, u2, items[r.random_range(0..items.len())])
        })
        .collect();
    let results = exec.map(&triples, |&(u1, u2, p1)| -> Result<(usize, usize)> {
        let top = analogy_recommend(
            train.products().id(p1),
            &ids[u1],
            &ids[u2],
            products,
            users,
            &index,
            k,
        )?;
        let empty = HashSet::new();
        let ho = held_out.get(ids[u2].as_str()).unwrap_or(&empty);
        let any = bought.get(ids[u2].as_str()).unwrap_or(&empty);
        Ok((
            top.iter().filter(|x| ho.contains(x.product_id.as_str())).count(),
            top.iter().filter(|x| any.contains(x.product_id.as_str())).count(),
        ))
    });
    let (mut a, mut b) = (0usize, 0usize);
    for res in results {
        let (x, y) = res?;
        a += x;
        b += y;
    }
    let denom = (queries * k).max(1) as f64;
    Ok(AnalogyPrecision {
        k,
        queries,
        held_out: a as f64 / denom,
        any_purchase: b as f64 / denom,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub rand_warm: Option<f64>,
    pub rand_cold: Option<f64>,
    pub wboi_warm: Option<f64>,
    pub wboi_cold: Option<f64>,
    pub inn_accuracy: Option<f64>,
    pub inn_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub embeddings: Option<DistributionStats>,
    pub features: Option<DistributionStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_warm: Option<f64>,
    pub auc_cold: Option<f64>,
    pub relation_accuracy: Option<f64>,
    pub threshold_used: Option<f64>,
    pub precision_at_k: Option<f64>,
    /// Alternative analogy criterion: hits among any of u2's purchases.
    pub precision_at_k_any_purchase: Option<f64>,
    pub analogy_k: usize,
    pub baselines: Baselines,
    pub distribution_stats: DistributionReport,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Range checks on every reported metric.
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("auc_warm", self.auc_warm),
            ("auc_cold", self.auc_cold),
            ("relation_accuracy", self.relation_accuracy),
            ("precision_at_k", self.precision_at_k),
            ("precision_at_k_any_purchase", self.precision_at_k_any_purchase),
            ("rand_warm", self.baselines.rand_warm),
            ("rand_cold", self.baselines.rand_cold),
            ("wboi_warm", self.baselines.wboi_warm),
            ("wboi_cold", self.baselines.wboi_cold),
            ("inn_accuracy", self.baselines.inn_accuracy),
        ];
        for (name, v) in unit {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Degenerate(format!("{name} = {x} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, SplitConfig};

    fn fixture_split() -> Split {
        // 3 users, 4 products; each user keeps one train item and one test item.
        let rows = [
            ("u1", "p1"),
            ("u1", "p2"),
            ("u2", "p2"),
            ("u2", "p3"),
            ("u3", "p3"),
            ("u3", "p4"),
        ];
        let set = InteractionSet::from_interactions(
            rows.iter()
                .map(|(u, p)| Interaction::new(*u, *p, 3.0))
                .collect(),
        )
        .unwrap();
        crate::data::leave_one_out_split(&set, &SplitConfig { seed: 5, cold_fraction: 0.0 }).unwrap()
    }

    /// Exhaustive oracle: enumerate every (test pair, product) combination.
    fn auc_oracle(split: &Split, score: &dyn Fn(&str, &str) -> f64) -> f64 {
        let products = split.all_products();
        let mut total = 0.0;
        for (u, pt) in &split.test {
            let mut known: HashSet<&str> = split
                .train
                .interactions()
                .iter()
                .filter(|it| &it.user_id == u)
                .map(|it| it.product_id.as_str())
                .collect();
            known.insert(pt);
            let negs: Vec<&String> = products.iter().filter(|p| !known.contains(p.as_str())).collect();
            let wins = negs.iter().filter(|p| score(u, pt) > score(u, p)).count();
            total += wins as f64 / negs.len() as f64;
        }
        total / split.test.len() as f64
    }

    #[test]
    fn perfect_scorer_gives_one() {
        let split = fixture_split();
        let uni = EvalUniverse::from_split(&split).unwrap();
        let test: HashSet<(usize, usize)> = split
            .test
            .iter()
            .map(|(u, p)| (uni.user(u).unwrap(), uni.product(p).unwrap()))
            .collect();
        let scorer = |u: usize, p: usize| if test.contains(&(u, p)) { 1.0 } else { 0.0 };
        let a = auc(&scorer, &uni, &split.test, AucSampling::All, &Exec::sequential()).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn hand_scores_match_exhaustive_oracle() {
        let split = fixture_split();
        let uni = EvalUniverse::from_split(&split).unwrap();
        let table = |u: &str, p: &str| -> f64 {
            let ui = u[1..].parse::<f64>().unwrap();
            let pi = p[1..].parse::<f64>().unwrap();
            ((ui * 7.0 + pi * 3.0) % 5.0) + 0.1 * pi
        };
        let scorer = |u: usize, p: usize| table(&uni.users()[u], &uni.products()[p]);
        let got = auc(&scorer, &uni, &split.test, AucSampling::All, &Exec::sequential()).unwrap();
        assert_eq!(got, auc_oracle(&split, &table));
    }

    #[test]
    fn empty_subset_is_an_error() {
        let split = fixture_split();
        let uni = EvalUniverse::from_split(&split).unwrap();
        assert!(auc(&rand_scorer(1), &uni, &[], AucSampling::All, &Exec::sequential()).is_err());
    }

    #[test]
    fn rand_scorer_deterministic() {
        let s = rand_scorer(3);
        assert_eq!(s.score(4, 9), rand_scorer(3).score(4, 9));
        assert_ne!(s.score(4, 9), rand_scorer(4).score(4, 9));
    }

    #[test]
    fn wboi_weighted_mean() {
        let set = InteractionSet::from_interactions(vec![
            Interaction::new("u", "a", 1.0),
            Interaction::new("u", "b", 3.0),
            Interaction::new("v", "a", 2.0),
        ])
        .unwrap();
        let fm = FeatureMatrix::new(2, vec!["a".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(wboi_user_embedding("u", &set, &fm).unwrap(), [0.25, 0.75]);
        assert_eq!(wboi_user_embedding("v", &set, &fm).unwrap(), [1.0, 0.0]);
        let fm_missing = FeatureMatrix::new(2, vec!["a".into()], vec![1.0, 0.0]).unwrap();
        assert!(wboi_user_embedding("u", &set, &fm_missing).is_err());
    }

    #[test]
    fn single_user_relation_set() {
        let set = InteractionSet::from_interactions(vec![
            Interaction::new("u", "p1", 3.0),
            Interaction::new("u", "p2", 3.0),
            Interaction::new("v", "p3", 3.0),
            Interaction::new("v", "p4", 3.0),
        ])
        .unwrap();
        let rs = build_relation_sets(&set, 1, 1).unwrap();
        assert_eq!(rs.positive.len(), 1);
        assert_eq!(rs.negative.len(), 1);
        assert!(rs.positive[0] == ("p1".into(), "p2".into()) || rs.positive[0] == ("p3".into(), "p4".into()));
    }

    #[test]
    fn relation_fixed_threshold() {
        let mut v = Vectors::new(2);
        v.push("a", &[1.0, 0.0]).unwrap();
        v.push("b", &[0.9, (1.0f64 - 0.81).sqrt()]).unwrap();
        v.push("c", &[0.1, (1.0f64 - 0.01).sqrt()]).unwrap();
        let sets = RelationSets {
            positive: vec![("a".into(), "b".into())],
            negative: vec![("a".into(), "c".into())],
        };
        let out = relation_accuracy(&v, &sets, Threshold::Fixed(0.5)).unwrap();
        assert_eq!(out.accuracy, 1.0);
    }

    #[test]
    fn relation_all_equal_similarities() {
        let mut v = Vectors::new(2);
        for i in 0..20 {
            v.push(format!("p{i}"), &[1.0, 1.0]).unwrap();
        }
        let sets = RelationSets {
            positive: (0..5).map(|i| (format!("p{i}"), format!("p{}", i + 5))).collect(),
            negative: (10..15).map(|i| (format!("p{i}"), format!("p{}", i + 5))).collect(),
        };
        for t in [-0.5, 0.0, 0.99, 1.0] {
            assert_eq!(relation_accuracy(&v, &sets, Threshold::Fixed(t)).unwrap().accuracy, 0.5);
        }
        let sets4 = RelationSets {
            positive: sets.positive[..4].to_vec(),
            negative: sets.negative[..4].to_vec(),
        };
        assert_eq!(
            relation_accuracy(&v, &sets4, Threshold::Auto { seed: 1 }).unwrap().accuracy,
            0.5
        );
    }

    #[test]
    fn identical_vectors_have_no_kurtosis() {
        let mut v = Vectors::new(3);
        for i in 0..10 {
            v.push(format!("{i}"), &[0.3, -1.0, 2.0]).unwrap();
        }
        let s = similarity_distribution(&v, 1000, 1, &Exec::sequential()).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(s.kurtosis_pearson.is_none() && s.kurtosis_excess.is_none());
        assert_eq!(s.histogram.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn pca_line_and_centering() {
        let mut v = Vectors::new(2);
        for i in 0..50 {
            let t = i as f64 * 0.1;
            let wobble = if i % 2 == 0 { 1e-3 } else { -1e-3 };
            v.push(format!("{i}"), &[2.0 * t + 1.0, -t + wobble]).unwrap();
        }
        let p = pca(&v, 1, 3).unwrap();
        assert!(p.variances[0] / p.total_variance > 0.999);
        let rows = pca_export(&v, 2, 3).unwrap();
        for c in 0..2 {
            let mean: f64 = rows.iter().map(|r| r.1[c]).sum::<f64>() / rows.len() as f64;
            assert!(mean.abs() < 1e-8);
        }
        assert!(pca(&v, 3, 3).is_err());
    }

    #[test]
    fn report_range_validation() {
        let ok = EvalReport {
            auc_warm: Some(0.7),
            ..EvalReport::default()
        };
        assert!(ok.validate().is_ok());
        let bad = EvalReport {
            auc_cold: Some(1.2),
            ..EvalReport::default()
        };
        assert!(bad.validate().is_err());
    }
}
