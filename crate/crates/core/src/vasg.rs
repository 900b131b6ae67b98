//! Multitask skip-gram trainer.
//!
//! One embedding table holds every user and warm product. A (center, context)
//! pair from the walk corpus contributes `-log σ(x_c · x_v)`; when the center
//! is a product, the decoder must also reconstruct the product's feature
//! vector from `x_v`, and the two losses are combined with learned
//! log-variance weights:
//!
//! ```text
//! user center:    L = -log σ(x_c · x_v)
//! product center: L = e^{-s1} (-log σ(x_c · x_v)) + e^{-s2} ‖f_v - dec(x_v)‖² / I + s1 + s2
//! ```
//!
//! Batches are homogeneous in center type. Gradients of a batch are computed
//! in fixed-size chunks (in parallel when the executor allows) and summed in
//! chunk order, so the result is bit-identical for any thread count.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, IdIndex};
use crate::exec::Exec;
use crate::hin::{context_pairs, generate_corpus, CorpusConfig, Hin, Node};
use crate::nn::{self, AdamConfig, AdamState, Mlp, MlpGrads, Mode, RowAdam};
use crate::rng::{self, Rng};
use crate::vectors::Vectors;
use crate::{Error, Result};

/// Pairs per gradient chunk. Fixed so chunk boundaries (and dropout streams)
/// do not depend on the thread count.
pub const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_p: f64,
    /// Decoder hidden widths; the decoder maps `dim → hidden… → I`.
    pub hidden: Vec<usize>,
    pub corpus: CorpusConfig,
    /// Unigram negatives per positive pair; 0 disables negative sampling.
    pub negative_samples: usize,
    /// Coefficient of an optional `‖x‖²` penalty on the embeddings of each pair.
    pub l2: f64,
    /// `false` trains plain skip-gram (decoder ablation).
    pub use_decoder: bool,
    /// Reuse one corpus for every epoch instead of fresh walks per epoch.
    pub reuse_corpus: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 100,
            epochs: 5,
            batch_size: 256,
            lr: 1e-3,
            dropout_p: 0.5,
            hidden: vec![256, 512, 1024, 2048],
            corpus: CorpusConfig::default(),
            negative_samples: 0,
            l2: 0.0,
            use_decoder: true,
            reuse_corpus: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 {}", self.l2));
        }
        self.corpus.validate()
    }

    pub fn decoder_sizes(&self, feature_dim: usize) -> Vec<usize> {
        std::iter::once(self.dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(feature_dim))
            .collect()
    }
}

/// One row per user, then one per warm product.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    users: IdIndex,
    products: IdIndex,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Uniform `(-0.5/D, 0.5/D)` initialisation.
    pub fn init(users: IdIndex, products: IdIndex, dim: usize, rng: &mut Rng) -> Self {
        let n = users.len() + products.len();
        let half = 0.5 / dim as f64;
        let data = (0..n * dim).map(|_| rng.random_range(-half..half)).collect();
        EmbeddingTable {
            dim,
            users,
            products,
            data,
        }
    }

    pub fn from_parts(users: IdIndex, products: IdIndex, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != (users.len() + products.len()) * dim {
            return Err(Error::Dimension(format!(
                "{} embedding values for {} rows of dim {dim}",
                data.len(),
                users.len() + products.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable {
            dim,
            users,
            products,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn products(&self) -> &IdIndex {
        &self.products
    }

    pub fn n_rows(&self) -> usize {
        self.users.len() + self.products.len()
    }

    pub fn slot(&self, node: Node) -> usize {
        match node {
            Node::User(u) => u as usize,
            Node::Product(p) => self.users.len() + p as usize,
        }
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn row_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn vector(&self, node: Node) -> &[f64] {
        self.row(self.slot(node))
    }

    pub fn user(&self, id: &str) -> Option<&[f64]> {
        self.users.get(id).map(|u| self.vector(Node::User(u as u32)))
    }

    pub fn product(&self, id: &str) -> Option<&[f64]> {
        self.products
            .get(id)
            .map(|p| self.vector(Node::Product(p as u32)))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn user_vectors(&self) -> Vectors {
        let mut v = Vectors::new(self.dim);
        for (i, id) in self.users.ids().iter().enumerate() {
            v.push(id.clone(), self.row(i)).expect("unique ids");
        }
        v
    }

    pub fn product_vectors(&self) -> Vectors {
        let mut v = Vectors::new(self.dim);
        let offset = self.users.len();
        for (i, id) in self.products.ids().iter().enumerate() {
            v.push(id.clone(), self.row(offset + i)).expect("unique ids");
        }
        v
    }
}

/// Log-variance task weights; `w = e^{-s}` is positive for every finite `s`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub s1: f64,
    pub s2: f64,
}

impl UncertaintyWeights {
    pub fn w1(&self) -> f64 {
        (-self.s1).exp()
    }

    pub fn w2(&self) -> f64 {
        (-self.s2).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VasgModel {
    pub embeddings: EmbeddingTable,
    /// `D → hidden… → I`.
    pub decoder: Mlp,
    pub weights: UncertaintyWeights,
    pub config: TrainConfig,
}

impl VasgModel {
    /// Fresh model over the graph's users and warm products.
    pub fn new(hin: &Hin, feature_dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, &[0]);
        let embeddings =
            EmbeddingTable::init(hin.users().clone(), hin.products().clone(), config.dim, &mut init);
        let decoder = Mlp::new(&config.decoder_sizes(feature_dim), config.dropout_p, &mut init)?;
        Ok(VasgModel {
            embeddings,
            decoder,
            weights: UncertaintyWeights::default(),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn check(&self) -> Result<()> {
        if self.decoder.input_dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "decoder input {} but embedding dim {}",
                self.decoder.input_dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `-log σ(x_c · x_v)` and its gradients with respect to center and context.
pub fn skipgram_pair_loss(x_center: &[f64], x_context: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d = dot(x_center, x_context);
    let coef = -(1.0 - nn::sigmoid(d));
    (
        -nn::log_sigmoid(d),
        x_context.iter().map(|&v| coef * v).collect(),
        x_center.iter().map(|&v| coef * v).collect(),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Draws negatives from the unigram distribution of a corpus.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    dist: WeightedIndex<u64>,
    nodes: Vec<Node>,
}

impl NegativeSampler {
    /// `counts[i]` is the number of corpus occurrences of `nodes[i]`.
    pub fn new(nodes: Vec<Node>, counts: &[u64]) -> Result<Self> {
        let dist = WeightedIndex::new(counts)
            .map_err(|e| Error::Degenerate(format!("negative sampling weights: {e}")))?;
        Ok(NegativeSampler { dist, nodes })
    }

    /// Counts node occurrences over every walk of `corpus`.
    pub fn from_corpus(hin: &Hin, corpus: &CorpusConfig, exec: &Exec) -> Result<Self> {
        let c = generate_corpus(hin, corpus)?;
        let mut counts = vec![0u64; hin.n_nodes()];
        for walk in c.walks(exec) {
            for n in walk.nodes {
                counts[hin.slot(n)] += 1;
            }
        }
        let nodes = (0..hin.n_nodes()).map(|s| hin.node_at(s)).collect();
        Self::new(nodes, &counts)
    }
}

/// `k` nodes drawn with replacement from the sampler's distribution, none in
/// `exclude`. Gives up (returning fewer) only if exclusions cover nearly all
/// of the probability mass.
pub fn sample_negatives(
    sampler: &NegativeSampler,
    rng: &mut Rng,
    k: usize,
    exclude: &[Node],
) -> Vec<Node> {
    let mut out = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k && attempts < 1000 * (k + 1) {
        attempts += 1;
        let n = sampler.nodes[sampler.dist.sample(rng)];
        if !exclude.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Gradients of one chunk, already scaled by `1 / batch_len`.
#[derive(Debug, Clone, Default)]
struct ChunkOutcome {
    rows: Vec<(usize, Vec<f64>)>,
    decoder: Option<MlpGrads>,
    sum_sg: f64,
    sum_mse: f64,
    sum_l2: f64,
}

struct StepContext<'a> {
    model: &'a VasgModel,
    features: Option<&'a Array2<f64>>,
    sampler: Option<&'a NegativeSampler>,
}

impl StepContext<'_> {
    fn multitask(&self) -> bool {
        self.features.is_some()
    }

    /// Loss terms and gradients for `pairs` (all sharing a center type).
    fn chunk(&self, pairs: &[(Node, Node)], scale: f64, rng: &mut Rng) -> Result<ChunkOutcome> {
        let model = self.model;
        let table = &model.embeddings;
        let w1 = if self.multitask() { model.weights.w1() } else { 1.0 };
        let k = model.config.negative_samples;
        let l2 = model.config.l2;
        let mut out = ChunkOutcome::default();

        for &(center, context) in pairs {
            let (c, v) = (table.slot(center), table.slot(context));
            let (xc, xv) = (table.row(c), table.row(v));
            let (loss, gc, gv) = skipgram_pair_loss(xc, xv);
            let mut grad_c = gc;
            let mut pair_loss = loss;
            let mut extra: Vec<(usize, Vec<f64>)> = Vec::new();
            if k > 0 {
                if let Some(sampler) = self.sampler {
                    for n in sample_negatives(sampler, rng, k, &[center, context]) {
                        let ns = table.slot(n);
                        let xn = table.row(ns);
                        let d = dot(xn, xc);
                        pair_loss += nn::softplus(d);
                        let s = nn::sigmoid(d);
                        axpy(s, xn, &mut grad_c);
                        extra.push((ns, xc.iter().map(|&x| s * x * w1 * scale).collect()));
                    }
                }
            }
            grad_c.iter_mut().for_each(|g| *g *= w1 * scale);
            let mut grad_v: Vec<f64> = gv.iter().map(|g| g * w1 * scale).collect();
            if l2 > 0.0 {
                out.sum_l2 += l2 * (dot(xc, xc) + dot(xv, xv));
                axpy(2.0 * l2 * scale, xc, &mut grad_c);
                axpy(2.0 * l2 * scale, xv, &mut grad_v);
            }
            out.sum_sg += pair_loss;
            out.rows.push((c, grad_c));
            out.rows.push((v, grad_v));
            out.rows.extend(extra);
        }

        if let Some(features) = self.features {
            let decoder = &model.decoder;
            let dim = table.dim();
            let centers: Vec<usize> = pairs.iter().map(|&(c, _)| table.slot(c)).collect();
            let mut x = Array2::zeros((pairs.len(), dim));
            for (r, &slot) in centers.iter().enumerate() {
                x.row_mut(r)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(table.row(slot));
            }
            let (recon, tape) = decoder.forward_batch(x.view(), Mode::Train(rng))?;
            let feat_dim = decoder.output_dim() as f64;
            let w2 = model.weights.w2();
            let mut grad_out = Array2::zeros(recon.raw_dim());
            for (r, &(center, _)) in pairs.iter().enumerate() {
                let p = match center {
                    Node::Product(p) => p as usize,
                    Node::User(_) => {
                        return Err(Error::Precondition("user center in product batch".into()))
                    }
                };
                let target = features.row(p);
                let pred = recon.row(r);
                let mut sq = 0.0;
                for ((g, &y), &t) in grad_out.row_mut(r).iter_mut().zip(pred).zip(target) {
                    let diff = y - t;
                    sq += diff * diff;
                    *g = w2 * scale * 2.0 * diff / feat_dim;
                }
                out.sum_mse += sq / feat_dim;
            }
            let (dec_grads, grad_in) = decoder.backward_batch(&tape, grad_out.view())?;
            for (r, &slot) in centers.iter().enumerate() {
                out.rows.push((slot, grad_in.row(r).to_vec()));
            }
            out.decoder = Some(dec_grads);
        }
        Ok(out)
    }
}

/// Summed gradients of one batch plus its loss terms.
#[derive(Debug, Clone)]
pub struct StepGrads {
    /// Per embedding slot, ascending.
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub decoder: Option<MlpGrads>,
    pub ds1: f64,
    pub ds2: f64,
    /// Mean raw skip-gram loss (negatives included) per pair.
    pub mean_sg: f64,
    /// Mean reconstruction MSE per pair (product batches only).
    pub mean_mse: f64,
    /// Objective value the gradients differentiate.
    pub total: f64,
}

impl StepGrads {
    pub fn row(&self, slot: usize) -> Option<&[f64]> {
        self.rows.get(&slot).map(Vec::as_slice)
    }
}

fn batch_grads(
    ctx: &StepContext<'_>,
    pairs: &[(Node, Node)],
    exec: &Exec,
    stream: (u64, &[u64]),
) -> Result<StepGrads> {
    let scale = 1.0 / pairs.len() as f64;
    let chunks: Vec<&[(Node, Node)]> = pairs.chunks(GRAD_CHUNK).collect();
    let (seed, keys) = stream;
    let outcomes = exec.map_range(chunks.len(), |i| {
        let mut chunk_keys = keys.to_vec();
        chunk_keys.push(i as u64);
        let mut rng = rng::stream(seed, &chunk_keys);
        ctx.chunk(chunks[i], scale, &mut rng)
    });

    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut decoder: Option<MlpGrads> = None;
    let (mut sum_sg, mut sum_mse, mut sum_l2) = (0.0, 0.0, 0.0);
    for outcome in outcomes {
        let o = outcome?;
        for (slot, g) in o.rows {
            match rows.get_mut(&slot) {
                Some(acc) => axpy(1.0, &g, acc),
                None => {
                    rows.insert(slot, g);
                }
            }
        }
        if let Some(d) = o.decoder {
            match decoder.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => decoder = Some(d),
            }
        }
        sum_sg += o.sum_sg;
        sum_mse += o.sum_mse;
        sum_l2 += o.sum_l2;
    }
    let mean_sg = sum_sg * scale;
    let mean_mse = sum_mse * scale;
    let mean_l2 = sum_l2 * scale;
    let w = ctx.model.weights;
    let (total, ds1, ds2) = if ctx.multitask() {
        (
            w.w1() * mean_sg + w.w2() * mean_mse + w.s1 + w.s2 + mean_l2,
            1.0 - w.w1() * mean_sg,
            1.0 - w.w2() * mean_mse,
        )
    } else {
        (mean_sg + mean_l2, 0.0, 0.0)
    };
    Ok(StepGrads {
        rows,
        decoder,
        ds1,
        ds2,
        mean_sg,
        mean_mse,
        total,
    })
}

fn product_row(model: &VasgModel, center: Node, f_p: &[f64]) -> Result<Array2<f64>> {
    if !center.is_product() {
        return Err(Error::Precondition("product step needs a product center".into()));
    }
    if f_p.len() != model.feature_dim() {
        return Err(Error::Dimension(format!(
            "feature length {} but decoder outputs {}",
            f_p.len(),
            model.feature_dim()
        )));
    }
    // Only the center's row is read; place it where the slot index points.
    let Node::Product(p) = center else { unreachable!() };
    let mut rows = Array2::zeros((p as usize + 1, f_p.len()));
    rows.row_mut(p as usize)
        .as_slice_mut()
        .unwrap()
        .copy_from_slice(f_p);
    Ok(rows)
}

/// Objective and gradients of a single product-centered pair (decoder in
/// training mode, dropout drawn from `rng`).
pub fn product_step_loss(
    model: &VasgModel,
    center: Node,
    context: Node,
    f_p: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<StepGrads> {
    let f_p = f_p.ok_or_else(|| Error::MissingFeatures(vec![format!("{center:?}")]))?;
    let features = product_row(model, center, f_p)?;
    let ctx = StepContext {
        model,
        features: Some(&features),
        sampler: None,
    };
    let o = ctx.chunk(&[(center, context)], 1.0, rng)?;
    finish_single(ctx.multitask(), model.weights, o)
}

/// Objective and gradients of a single user-centered pair: plain skip-gram.
pub fn user_step_loss(model: &VasgModel, center: Node, context: Node) -> Result<StepGrads> {
    if !center.is_user() {
        return Err(Error::Precondition("user step needs a user center".into()));
    }
    let ctx = StepContext {
        model,
        features: None,
        sampler: None,
    };
    let mut unused = rng::stream(0, &[]);
    let o = ctx.chunk(&[(center, context)], 1.0, &mut unused)?;
    finish_single(false, model.weights, o)
}

fn finish_single(multitask: bool, w: UncertaintyWeights, o: ChunkOutcome) -> Result<StepGrads> {
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (slot, g) in o.rows {
        match rows.get_mut(&slot) {
            Some(acc) => axpy(1.0, &g, acc),
            None => {
                rows.insert(slot, g);
            }
        }
    }
    let (total, ds1, ds2) = if multitask {
        (
            w.w1() * o.sum_sg + w.w2() * o.sum_mse + w.s1 + w.s2 + o.sum_l2,
            1.0 - w.w1() * o.sum_sg,
            1.0 - w.w2() * o.sum_mse,
        )
    } else {
        (o.sum_sg + o.sum_l2, 0.0, 0.0)
    };
    Ok(StepGrads {
        rows,
        decoder: o.decoder,
        ds1,
        ds2,
        mean_sg: o.sum_sg,
        mean_mse: o.sum_mse,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub pairs: usize,
    /// Mean raw skip-gram loss over all pairs.
    pub mean_sg: f64,
    /// Mean reconstruction MSE over product-centered pairs.
    pub mean_mse: f64,
    pub w1: f64,
    pub w2: f64,
}

impl EpochStats {
    /// Unweighted per-pair loss: skip-gram plus reconstruction share.
    pub fn mean_loss(&self, product_share: f64) -> f64 {
        self.mean_sg + product_share * self.mean_mse
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
}

/// Optimizer state that persists across epochs.
struct Optimizers {
    rows: RowAdam,
    decoder: AdamState,
    weights: AdamState,
}

/// Features of the graph's products as rows indexed by product position,
/// or `None` when the decoder is disabled.
fn dense_features(model: &VasgModel, hin: &Hin, features: &FeatureMatrix) -> Result<Option<Array2<f64>>> {
    if !model.config.use_decoder {
        return Ok(None);
    }
    features.require(hin.products().ids().iter().map(String::as_str))?;
    if features.dim() != model.feature_dim() {
        return Err(Error::Dimension(format!(
            "features have dim {} but decoder outputs {}",
            features.dim(),
            model.feature_dim()
        )));
    }
    let mut rows = Array2::zeros((hin.n_products(), features.dim()));
    for (p, id) in hin.products().ids().iter().enumerate() {
        let src = features.row(id).expect("required above");
        for (dst, &v) in rows.row_mut(p).iter_mut().zip(src) {
            *dst = f64::from(v);
        }
    }
    Ok(Some(rows))
}

fn optimizers(model: &VasgModel) -> Optimizers {
    let adam = AdamConfig::with_lr(model.config.lr);
    Optimizers {
        rows: RowAdam::new(adam, model.embeddings.n_rows(), model.dim()),
        decoder: AdamState::for_mlp(adam, &model.decoder),
        weights: AdamState::new(adam, &[2]),
    }
}

/// Applies the given batches in order with fresh optimizer state. Each batch
/// must hold pairs whose centers are all users or all products.
pub fn train_on_batches(
    model: &mut VasgModel,
    hin: &Hin,
    features: &FeatureMatrix,
    batches: &[Vec<(Node, Node)>],
    exec: &Exec,
) -> Result<EpochStats> {
    model.check()?;
    let features = dense_features(model, hin, features)?;
    let mut opt = optimizers(model);
    let mut stats = EpochAccumulator::default();
    for (i, batch) in batches.iter().enumerate() {
        let Some(first) = batch.first() else { continue };
        let is_product = first.0.is_product();
        if batch.iter().any(|(c, _)| c.is_product() != is_product) {
            return Err(Error::Precondition(format!("batch {i} mixes user and product centers")));
        }
        step(model, &mut opt, batch, is_product, features.as_ref(), None, exec, (0, i as u64), &mut stats)?;
    }
    Ok(stats.finish(0, model.weights))
}

/// Trains `model` in place over walks of `hin`.
pub fn train(
    model: &mut VasgModel,
    hin: &Hin,
    features: &FeatureMatrix,
    exec: &Exec,
) -> Result<TrainReport> {
    model.check()?;
    model.config.validate()?;
    if hin.n_users() != model.embeddings.users().len()
        || hin.n_products() != model.embeddings.products().len()
    {
        return Err(Error::Dimension("graph and embedding table disagree".into()));
    }
    let cfg = model.config.clone();
    let features = dense_features(model, hin, features)?;

    let mut opt = optimizers(model);

    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let corpus_cfg = CorpusConfig {
            seed: if cfg.reuse_corpus {
                cfg.corpus.seed
            } else {
                rng::derive(cfg.corpus.seed, &[epoch as u64])
            },
            ..cfg.corpus
        };
        let sampler = if cfg.negative_samples > 0 {
            Some(NegativeSampler::from_corpus(hin, &corpus_cfg, exec)?)
        } else {
            None
        };
        let corpus = generate_corpus(hin, &corpus_cfg)?;

        let mut stats = EpochAccumulator::default();
        let mut pending_users: Vec<(Node, Node)> = Vec::with_capacity(cfg.batch_size);
        let mut pending_products: Vec<(Node, Node)> = Vec::with_capacity(cfg.batch_size);
        let mut batch_no = 0u64;
        for walk in corpus.walks(exec) {
            for pair in context_pairs(&walk.nodes, cfg.corpus.window) {
                let pending = if pair.0.is_user() {
                    &mut pending_users
                } else {
                    &mut pending_products
                };
                pending.push(pair);
                if pending.len() == cfg.batch_size {
                    let batch = std::mem::take(pending);
                    let is_product = pair.0.is_product();
                    step(
                        model,
                        &mut opt,
                        &batch,
                        is_product,
                        features.as_ref(),
                        sampler.as_ref(),
                        exec,
                        (epoch, batch_no),
                        &mut stats,
                    )?;
                    batch_no += 1;
                }
            }
        }
        for (batch, is_product) in [(pending_users, false), (pending_products, true)] {
            if !batch.is_empty() {
                step(
                    model,
                    &mut opt,
                    &batch,
                    is_product,
                    features.as_ref(),
                    sampler.as_ref(),
                    exec,
                    (epoch, batch_no),
                    &mut stats,
                )?;
                batch_no += 1;
            }
        }

        let row = stats.finish(epoch, model.weights);
        log::info!(
            "epoch {}: pairs={} L_sg={:.5} L_mse={:.5} w1={:.4} w2={:.4}",
            row.epoch,
            row.pairs,
            row.mean_sg,
            row.mean_mse,
            row.w1,
            row.w2
        );
        report.history.push(row);
    }
    Ok(report)
}

#[derive(Default)]
struct EpochAccumulator {
    pairs: usize,
    product_pairs: usize,
    sum_sg: f64,
    sum_mse: f64,
}

impl EpochAccumulator {
    fn finish(&self, epoch: usize, w: UncertaintyWeights) -> EpochStats {
        EpochStats {
            epoch,
            pairs: self.pairs,
            mean_sg: self.sum_sg / self.pairs.max(1) as f64,
            mean_mse: self.sum_mse / self.product_pairs.max(1) as f64,
            w1: w.w1(),
            w2: w.w2(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut VasgModel,
    opt: &mut Optimizers,
    batch: &[(Node, Node)],
    is_product: bool,
    features: Option<&Array2<f64>>,
    sampler: Option<&NegativeSampler>,
    exec: &Exec,
    (epoch, batch_no): (usize, u64),
    stats: &mut EpochAccumulator,
) -> Result<()> {
    let ctx = StepContext {
        model,
        features: if is_product { features } else { None },
        sampler,
    };
    let keys = [1, epoch as u64, batch_no];
    let g = batch_grads(&ctx, batch, exec, (model.config.seed, &keys))?;
    if !g.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} at epoch {epoch}, batch {batch_no}",
            g.total
        )));
    }
    let multitask = ctx.multitask();
    stats.pairs += batch.len();
    stats.sum_sg += g.mean_sg * batch.len() as f64;
    if multitask {
        stats.product_pairs += batch.len();
        stats.sum_mse += g.mean_mse * batch.len() as f64;
    }

    for (slot, grad) in &g.rows {
        opt.rows
            .update_row(*slot, model.embeddings.row_mut(*slot), grad)
            .map_err(|e| Error::NonFinite(format!("{e} at epoch {epoch}, batch {batch_no}")))?;
    }
    if multitask {
        if let Some(dec) = &g.decoder {
            nn::adam_step(&mut opt.decoder, &mut model.decoder.param_slices_mut(), &dec.slices())?;
        }
        let mut s = [model.weights.s1, model.weights.s2];
        nn::adam_step(&mut opt.weights, &mut [&mut s[..]], &[&[g.ds1, g.ds2]])?;
        model.weights = UncertaintyWeights { s1: s[0], s2: s[1] };
    }
    Ok(())
}
