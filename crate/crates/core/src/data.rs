//! Interaction and feature ingestion, preprocessing and the leave-one-out
//! split with warm/cold product partitions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const INTERACTIONS_HEADER: [&str; 4] = ["user_id", "product_id", "rating", "timestamp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub product_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, product_id: impl Into<String>, rating: f64) -> Self {
        Interaction {
            user_id: user_id.into(),
            product_id: product_id.into(),
            rating,
            timestamp: None,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.user_id.is_empty() || self.product_id.is_empty() {
            return Err("empty user or product id".into());
        }
        if !self.rating.is_finite() || !(1.0..=5.0).contains(&self.rating) {
            return Err(format!("rating {} outside [1, 5]", self.rating));
        }
        Ok(())
    }

    /// Preference order among duplicates: higher rating, then later timestamp.
    fn precedence(&self, other: &Self) -> Ordering {
        self.rating
            .total_cmp(&other.rating)
            .then(self.timestamp.cmp(&other.timestamp))
    }
}

/// Bijection between string ids and dense indices, in lexicographic id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Self {
        let ids: Vec<String> = ids
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let lookup = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        IdIndex { ids, lookup }
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }
}

/// Deduplicated, densely indexed user/product/rating triples.
///
/// Interactions are stored sorted by (user index, product index).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    interactions: Vec<Interaction>,
    users: IdIndex,
    products: IdIndex,
    pairs: Vec<(usize, usize)>,
}

impl InteractionSet {
    /// Validates every row and keeps one interaction per (user, product):
    /// the highest rated, then the latest.
    pub fn from_interactions(rows: Vec<Interaction>) -> Result<Self> {
        let mut best: BTreeMap<(String, String), Interaction> = BTreeMap::new();
        for row in rows {
            row.check().map_err(|m| {
                Error::Precondition(format!("({}, {}): {m}", row.user_id, row.product_id))
            })?;
            let key = (row.user_id.clone(), row.product_id.clone());
            match best.get(&key) {
                Some(kept) if kept.precedence(&row) != Ordering::Less => {}
                _ => {
                    best.insert(key, row);
                }
            }
        }
        let users = IdIndex::from_ids(best.keys().map(|(u, _)| u.clone()));
        let products = IdIndex::from_ids(best.keys().map(|(_, p)| p.clone()));
        let mut indexed: Vec<((usize, usize), Interaction)> = best
            .into_values()
            .map(|it| {
                let u = users.get(&it.user_id).unwrap();
                let p = products.get(&it.product_id).unwrap();
                ((u, p), it)
            })
            .collect();
        indexed.sort_by_key(|(k, _)| *k);
        let (pairs, interactions) = indexed.into_iter().unzip();
        Ok(InteractionSet {
            interactions,
            users,
            products,
            pairs,
        })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn products(&self) -> &IdIndex {
        &self.products
    }

    /// Dense (user, product) index of every interaction.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Interaction positions grouped by user index.
    pub fn by_user(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.users.len()];
        for (i, &(u, _)) in self.pairs.iter().enumerate() {
            groups[u].push(i);
        }
        groups
    }

    /// Product indices each user interacted with, ascending.
    pub fn user_products(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users.len()];
        for &(u, p) in &self.pairs {
            out[u].push(p);
        }
        out
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads the `user_id,product_id,rating,timestamp` CSV.
pub fn load_interactions(path: &Path) -> Result<InteractionSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names.len() > 4 || names[..] != INTERACTIONS_HEADER[..names.len()] {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`", INTERACTIONS_HEADER.join(",")),
        ));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 3 || record.len() > 4 {
            return Err(parse_err(
                path,
                line,
                format!("expected 3 or 4 fields, found {}", record.len()),
            ));
        }
        let rating: f64 = record[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("invalid rating `{}`", &record[2])))?;
        let timestamp = match record.get(3) {
            None | Some("") => None,
            Some(t) => Some(
                t.parse::<i64>()
                    .map_err(|_| parse_err(path, line, format!("invalid timestamp `{t}`")))?,
            ),
        };
        let row = Interaction {
            user_id: record[0].to_string(),
            product_id: record[1].to_string(),
            rating,
            timestamp,
        };
        row.check().map_err(|m| parse_err(path, line, m))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    InteractionSet::from_interactions(rows)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let to_io = |e: csv::Error| csv_io(path, e);
    writer.write_record(INTERACTIONS_HEADER).map_err(to_io)?;
    for r in rows {
        let ts = r.timestamp.map(|t| t.to_string()).unwrap_or_default();
        writer
            .write_record([&r.user_id, &r.product_id, &r.rating.to_string(), &ts])
            .map_err(to_io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Drops users with fewer than `min_count` interactions, then any product
/// left without interactions. One pass, no fixed-point iteration.
pub fn filter_min_history(s: &InteractionSet, min_count: usize) -> Result<InteractionSet> {
    if min_count == 0 {
        return Err(Error::Precondition("min_count must be at least 1".into()));
    }
    let counts = s.by_user();
    let kept: Vec<Interaction> = s
        .interactions
        .iter()
        .zip(&s.pairs)
        .filter(|(_, &(u, _))| counts[u].len() >= min_count)
        .map(|(it, _)| it.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::NoUsersSurvive);
    }
    InteractionSet::from_interactions(kept)
}

/// Repeats [`filter_min_history`] until nothing changes. Dropping a user
/// never lowers another user's count, so this settles after the first pass;
/// it exists for experiments that pair it with product-side filtering.
pub fn filter_min_history_fixed_point(
    s: &InteractionSet,
    min_count: usize,
) -> Result<InteractionSet> {
    let mut current = filter_min_history(s, min_count)?;
    loop {
        let next = filter_min_history(&current, min_count)?;
        if next.len() == current.len() {
            return Ok(next);
        }
        current = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    /// Target share of test pairs whose product is cold.
    pub cold_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            cold_fraction: 0.5,
        }
    }
}

pub type TestPair = (String, String);

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: InteractionSet,
    pub test: Vec<TestPair>,
    pub warm_products: BTreeSet<String>,
    pub cold_products: BTreeSet<String>,
    pub t_warm: Vec<TestPair>,
    pub t_cold: Vec<TestPair>,
}

/// Leave-one-out split. After holding out one random product per user, the
/// training interactions of randomly chosen held-out products are removed
/// until roughly `cold_fraction` of the test pairs point at cold products.
/// A product is only made cold if every affected user keeps at least one
/// training interaction.
pub fn leave_one_out_split(s: &InteractionSet, cfg: &SplitConfig) -> Result<Split> {
    if !(0.0..=1.0).contains(&cfg.cold_fraction) {
        return Err(Error::Config(format!(
            "cold_fraction {} outside [0, 1]",
            cfg.cold_fraction
        )));
    }
    let mut rng = rng::stream(cfg.seed, &[]);
    let groups = s.by_user();
    let mut in_train = vec![true; s.len()];
    let mut test_rows = Vec::with_capacity(groups.len());
    for (u, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::Precondition(format!(
                "user `{}` has {} interaction(s); leave-one-out needs at least 2",
                s.users.id(u),
                group.len()
            )));
        }
        let pick = group[rng.random_range(0..group.len())];
        in_train[pick] = false;
        test_rows.push(pick);
    }

    let mut user_train = vec![0usize; s.users.len()];
    let mut product_train = vec![0usize; s.products.len()];
    let mut product_users: Vec<Vec<usize>> = vec![Vec::new(); s.products.len()];
    for (i, &(u, p)) in s.pairs.iter().enumerate() {
        if in_train[i] {
            user_train[u] += 1;
            product_train[p] += 1;
            product_users[p].push(i);
        }
    }
    let mut test_per_product = vec![0usize; s.products.len()];
    for &i in &test_rows {
        test_per_product[s.pairs[i].1] += 1;
    }

    let target = (cfg.cold_fraction * test_rows.len() as f64).round() as usize;
    let mut cold_count: usize = test_rows
        .iter()
        .filter(|&&i| product_train[s.pairs[i].1] == 0)
        .count();

    let mut candidates: Vec<usize> = test_rows
        .iter()
        .map(|&i| s.pairs[i].1)
        .filter(|&p| product_train[p] > 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    candidates.shuffle(&mut rng);

    for p in candidates {
        if cold_count >= target {
            break;
        }
        let next = cold_count + test_per_product[p];
        if next.abs_diff(target) >= target.abs_diff(cold_count) {
            continue;
        }
        let starves_user = product_users[p]
            .iter()
            .any(|&i| user_train[s.pairs[i].0] <= 1);
        if starves_user {
            continue;
        }
        for &i in &product_users[p] {
            in_train[i] = false;
            user_train[s.pairs[i].0] -= 1;
        }
        product_train[p] = 0;
        cold_count = next;
    }

    let train_rows: Vec<Interaction> = s
        .interactions
        .iter()
        .zip(&in_train)
        .filter(|(_, &keep)| keep)
        .map(|(it, _)| it.clone())
        .collect();
    let train = InteractionSet::from_interactions(train_rows)?;
    let warm_products: BTreeSet<String> = train.products.ids().iter().cloned().collect();

    let test: Vec<TestPair> = test_rows
        .iter()
        .map(|&i| {
            let it = &s.interactions[i];
            (it.user_id.clone(), it.product_id.clone())
        })
        .collect();
    let cold_products: BTreeSet<String> = test
        .iter()
        .filter(|(_, p)| !warm_products.contains(p))
        .map(|(_, p)| p.clone())
        .collect();
    let (t_cold, t_warm): (Vec<_>, Vec<_>) = test
        .iter()
        .cloned()
        .partition(|(_, p)| cold_products.contains(p));

    Ok(Split {
        train,
        test,
        warm_products,
        cold_products,
        t_warm,
        t_cold,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<Interaction>,
    test: Vec<TestPair>,
    warm: Vec<String>,
    cold: Vec<String>,
    t_warm: Vec<TestPair>,
    t_cold: Vec<TestPair>,
}

impl Split {
    pub fn to_json(&self) -> Result<String> {
        let file = SplitFile {
            train: self.train.interactions.clone(),
            test: self.test.clone(),
            warm: self.warm_products.iter().cloned().collect(),
            cold: self.cold_products.iter().cloned().collect(),
            t_warm: self.t_warm.clone(),
            t_cold: self.t_cold.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("split", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SplitFile = serde_json::from_str(text).map_err(|e| Error::json("split", e))?;
        let split = Split {
            train: InteractionSet::from_interactions(file.train)?,
            test: file.test,
            warm_products: file.warm.into_iter().collect(),
            cold_products: file.cold.into_iter().collect(),
            t_warm: file.t_warm,
            t_cold: file.t_cold,
        };
        split.check_partition()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every product, warm or cold, in id order.
    pub fn all_products(&self) -> Vec<String> {
        self.warm_products
            .union(&self.cold_products)
            .cloned()
            .collect()
    }

    /// Checks the warm/cold partition invariants.
    pub fn check_partition(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Precondition(format!("split invariant: {m}")));
        if self.warm_products.intersection(&self.cold_products).next().is_some() {
            return fail("warm and cold products overlap");
        }
        if self
            .train
            .products
            .ids()
            .iter()
            .any(|p| !self.warm_products.contains(p))
        {
            return fail("train product outside warm set");
        }
        if self
            .t_cold
            .iter()
            .any(|(_, p)| !self.cold_products.contains(p))
        {
            return fail("t_cold pair with non-cold product");
        }
        if self
            .t_warm
            .iter()
            .any(|(_, p)| !self.warm_products.contains(p))
        {
            return fail("t_warm pair with non-warm product");
        }
        if self.t_warm.len() + self.t_cold.len() != self.test.len() {
            return fail("t_warm and t_cold do not cover the test set");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
    pub dtype: String,
    /// Blob path relative to the manifest; defaults to the manifest path
    /// with a `.f32` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}

/// Per-product image feature vectors, stored as read (`f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    ids: Vec<String>,
    id_map: HashMap<String, usize>,
    rows: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("feature dim must be positive".into()));
        }
        if rows.len() != dim * ids.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} rows of dim {dim}",
                rows.len(),
                ids.len()
            )));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature row `{}`",
                ids[pos / dim]
            )));
        }
        let mut id_map = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id_map.insert(id.clone(), i).is_some() {
                return Err(Error::Precondition(format!("duplicate feature id `{id}`")));
            }
        }
        Ok(FeatureMatrix {
            dim,
            ids,
            id_map,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_map.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.id_map
            .get(id)
            .map(|&i| &self.rows[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.row(id).map(|r| r.iter().map(|&v| f64::from(v)).collect())
    }

    /// Ids among `wanted` without a feature row, sorted.
    pub fn missing<'a, I: IntoIterator<Item = &'a str>>(&self, wanted: I) -> Vec<String> {
        let mut out: Vec<String> = wanted
            .into_iter()
            .filter(|id| !self.contains(id))
            .map(str::to_string)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn require<'a, I: IntoIterator<Item = &'a str>>(&self, wanted: I) -> Result<()> {
        let missing = self.missing(wanted);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFeatures(missing))
        }
    }

    /// Writes the manifest and its blob (`<manifest stem>.f32`).
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = default_blob_path(manifest_path);
        let manifest = FeatureManifest {
            dim: self.dim,
            count: self.ids.len(),
            ids: self.ids.clone(),
            dtype: "f32le".into(),
            blob: None,
        };
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("features", e))?;
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
        let bytes: Vec<u8> = self.rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))
    }
}

fn default_blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("f32")
}

/// Loads a feature manifest and blob; every id in `required` must have a row.
/// Extra rows are allowed.
pub fn load_features<'a, I>(manifest_path: &Path, required: I) -> Result<FeatureMatrix>
where
    I: IntoIterator<Item = &'a str>,
{
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let blob_path = match &manifest.blob {
        Some(rel) => manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(rel),
        None => default_blob_path(manifest_path),
    };
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let features = decode_features(&manifest, &blob)?;
    features.require(required)?;
    Ok(features)
}

pub fn decode_features(manifest: &FeatureManifest, blob: &[u8]) -> Result<FeatureMatrix> {
    if manifest.dtype != "f32le" {
        return Err(Error::Config(format!(
            "unsupported feature dtype `{}`",
            manifest.dtype
        )));
    }
    if manifest.ids.len() != manifest.count {
        return Err(Error::Dimension(format!(
            "manifest count {} but {} ids",
            manifest.count,
            manifest.ids.len()
        )));
    }
    let expected = manifest.count * manifest.dim * 4;
    if blob.len() != expected {
        return Err(Error::Dimension(format!(
            "feature blob has {} bytes, manifest implies {} ({} x {} x 4)",
            blob.len(),
            expected,
            manifest.count,
            manifest.dim
        )));
    }
    let rows = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(manifest.dim, manifest.ids.clone(), rows)
}
