//! The pipeline stages. Each reads the artifacts of earlier stages from the
//! output directory and writes its own next to them.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vasg_core::data::{filter_min_history, leave_one_out_split, load_features, load_interactions, FeatureMatrix, Split};
use vasg_core::eval::{
    analogy_precision, auc, build_relation_sets, feature_vectors, pca_export, rand_scorer, relation_accuracy,
    similarity_distribution, wboi_users, write_histogram_csv, write_pca_csv, Baselines, CosineScorer,
    DistributionReport, EvalReport, EvalUniverse, Scorer,
};
use vasg_core::exec::Exec;
use vasg_core::hin::build_hin;
use vasg_core::io::{load_encoder, load_model, mlp_checksum, save_encoder, save_model, MANIFEST};
use vasg_core::mapper::{map_features, train_mapper, Encoder, MapperReport};
use vasg_core::recsys::{analogy_recommend, top_k, EmbeddingIndex, Ranked};
use vasg_core::synth::generate;
use vasg_core::vasg::{train, TrainReport, VasgModel};
use vasg_core::vectors::Vectors;
use vasg_core::Error;

use crate::config::PipelineConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("stats.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn loss_history(&self) -> PathBuf {
        self.root.join("loss_history.csv")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }

    /// Checksum of the decoder the encoder was trained against.
    pub fn decoder_checksum(&self) -> PathBuf {
        self.encoder().join("decoder.sha256")
    }

    pub fn mapper_history(&self) -> PathBuf {
        self.root.join("mapper_history.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn histogram(&self, what: &str) -> PathBuf {
        self.root.join(format!("similarity_{what}.csv"))
    }

    pub fn pca(&self) -> PathBuf {
        self.root.join("pca_products.csv")
    }

    pub fn config_echo(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.config.toml"))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::input(format!("{what} not found: {}", path.display())))
    }
}

fn exec(cfg: &PipelineConfig) -> Result<Exec> {
    Exec::new(cfg.threads).map_err(CliError::stage("threads"))
}

fn start(cfg: &PipelineConfig, command: &str) -> Result<Layout> {
    let layout = Layout::new(cfg.output_dir());
    fs::create_dir_all(&layout.root).map_err(|e| io_err(&layout.root, e))?;
    write_file(&layout.config_echo(command), cfg.to_toml()?)?;
    Ok(layout)
}

fn load_split(layout: &Layout) -> Result<Split> {
    require_file(&layout.split(), "split (run `prepare` first)")?;
    Split::load(&layout.split()).map_err(CliError::stage("split"))
}

fn load_trained(layout: &Layout) -> Result<VasgModel> {
    require_file(&layout.model().join(MANIFEST), "model (run `train` first)")?;
    load_model(&layout.model()).map_err(CliError::stage("model"))
}

fn load_feature_rows<'a>(cfg: &PipelineConfig, required: impl IntoIterator<Item = &'a str>) -> Result<FeatureMatrix> {
    let path = cfg.features_path();
    require_file(&path, "features file")?;
    load_features(&path, required).map_err(CliError::stage("features"))
}

/// Writes a planted-cluster dataset into `dir`.
pub fn cmd_synth(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let data = generate(&cfg.synth_config()).map_err(CliError::stage("synth"))?;
    let paths = data.write(dir).map_err(CliError::stage("synth"))?;
    write_file(&dir.join("synth.config.toml"), cfg.to_toml()?)?;
    log::info!(
        "wrote {} interactions to {}",
        data.interactions.len(),
        paths.interactions.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Stats {
    pub products: usize,
    pub users: usize,
    pub ratings: usize,
    pub warm_products: usize,
    pub cold_products: usize,
    pub test_warm: usize,
    pub test_cold: usize,
    pub feature_dim: usize,
    pub config: serde_json::Value,
}

pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<Stats> {
    require_file(&cfg.interactions_path(), "interactions file")?;
    require_file(&cfg.features_path(), "features file")?;
    let layout = start(cfg, "prepare")?;
    let all = load_interactions(&cfg.interactions_path()).map_err(CliError::stage("interactions"))?;
    let kept = filter_min_history(&all, cfg.prepare.min_history).map_err(CliError::stage("filter"))?;
    let features = load_feature_rows(cfg, kept.products().ids().iter().map(String::as_str))?;
    let split = leave_one_out_split(&kept, &cfg.split_config()).map_err(CliError::stage("split"))?;
    split.save(&layout.split()).map_err(CliError::stage("split"))?;
    let stats = Stats {
        products: kept.products().len(),
        users: kept.users().len(),
        ratings: kept.len(),
        warm_products: split.warm_products.len(),
        cold_products: split.cold_products.len(),
        test_warm: split.t_warm.len(),
        test_cold: split.t_cold.len(),
        feature_dim: features.dim(),
        config: cfg.to_json(),
    };
    write_json(&layout.stats(), &stats)?;
    log::info!(
        "{} users, {} products, {} ratings; {} warm / {} cold test pairs",
        stats.users,
        stats.products,
        stats.ratings,
        stats.test_warm,
        stats.test_cold
    );
    Ok(stats)
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    let layout = start(cfg, "train")?;
    let split = load_split(&layout)?;
    let features = load_feature_rows(cfg, split.train.products().ids().iter().map(String::as_str))?;
    let hin = build_hin(&split.train).map_err(CliError::stage("graph"))?;
    let mut model = VasgModel::new(&hin, features.dim(), cfg.train_config()).map_err(CliError::stage("train"))?;
    let report = train(&mut model, &hin, &features, &exec(cfg)?).map_err(CliError::stage("train"))?;
    save_model(&model, &layout.model()).map_err(CliError::stage("model"))?;
    let mut csv = String::from("epoch,pairs,l_sg,l_mse,w1,w2\n");
    for r in &report.history {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.pairs, r.mean_sg, r.mean_mse, r.w1, r.w2
        ));
    }
    write_file(&layout.loss_history(), csv)?;
    Ok(report)
}

pub fn cmd_map(cfg: &PipelineConfig) -> Result<MapperReport> {
    let layout = start(cfg, "map")?;
    let model = load_trained(&layout)?;
    if !model.config.use_decoder {
        return Err(CliError::input(
            "model was trained without a decoder; retrain with the decoder enabled before mapping",
        ));
    }
    let warm: Vec<String> = model.embeddings.products().ids().to_vec();
    let features = load_feature_rows(cfg, warm.iter().map(String::as_str))?;
    let before = mlp_checksum(&model.decoder);
    let (encoder, report) = train_mapper(
        &model.decoder,
        &features,
        &warm,
        Some(&model.embeddings.product_vectors()),
        &cfg.mapper_config(),
    )
    .map_err(CliError::stage("map"))?;
    let on_disk = mlp_checksum(&load_trained(&layout)?.decoder);
    if mlp_checksum(&model.decoder) != before || on_disk != before {
        return Err(CliError::internal("decoder changed during mapper training; aborting"));
    }
    save_encoder(&encoder, &layout.encoder()).map_err(CliError::stage("encoder"))?;
    write_file(&layout.decoder_checksum(), format!("{before}\n"))?;
    let mut csv = String::from("epoch,loss,clean_loss\n");
    for (i, (l, c)) in report.history.iter().zip(&report.eval_history).enumerate() {
        csv.push_str(&format!("{i},{l},{c}\n"));
    }
    write_file(&layout.mapper_history(), csv)?;
    if let (Some(first), Some(last)) = (report.eval_history.first(), report.eval_history.last()) {
        if last >= first {
            log::warn!("mapper reconstruction loss did not fall ({first} -> {last})");
        }
    }
    Ok(report)
}

/// The encoder in the output directory, if any, after checking it was
/// trained against this model's decoder.
pub fn load_checked_encoder(layout: &Layout, model: &VasgModel) -> Result<Option<Encoder>> {
    if !layout.encoder().join(MANIFEST).exists() {
        return Ok(None);
    }
    let encoder = load_encoder(&layout.encoder()).map_err(CliError::stage("encoder"))?;
    let path = layout.decoder_checksum();
    let stored = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    if stored.trim() != mlp_checksum(&model.decoder) {
        return Err(CliError::input(
            "encoder was trained against a different decoder; rerun `map`",
        ));
    }
    Ok(Some(encoder))
}

/// Trained warm embeddings plus mapped embeddings for `cold`.
pub fn product_table(
    model: &VasgModel,
    encoder: Option<&Encoder>,
    features: &FeatureMatrix,
    cold: impl IntoIterator<Item = impl AsRef<str>>,
) -> Result<Vectors> {
    let mut table = model.embeddings.product_vectors();
    if let Some(enc) = encoder {
        for id in cold {
            let id = id.as_ref();
            if table.get(id).is_some() {
                continue;
            }
            let f = features
                .row_f64(id)
                .ok_or_else(|| CliError::input(format!("no feature row for cold product `{id}`")))?;
            let v = map_features(enc, &f).map_err(CliError::stage("map"))?;
            table.push(id, &v).map_err(CliError::stage("map"))?;
        }
    }
    Ok(table)
}

fn soft<T>(r: vasg_core::Result<T>, what: &str, warnings: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(m)) => {
            warnings.push(format!("{what}: {m}"));
            Ok(None)
        }
        Err(e) => Err(CliError::stage(what)(e)),
    }
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let layout = start(cfg, "evaluate")?;
    let exec = exec(cfg)?;
    let split = load_split(&layout)?;
    let model = load_trained(&layout)?;
    let all_products = split.all_products();
    let features = load_feature_rows(cfg, all_products.iter().map(String::as_str))?;
    let encoder = load_checked_encoder(&layout, &model)?;
    let mut warnings = Vec::new();

    let users = model.embeddings.user_vectors();
    let warm = model.embeddings.product_vectors();
    let products = product_table(&model, encoder.as_ref(), &features, &split.cold_products)?;
    let universe = if encoder.is_some() {
        EvalUniverse::from_split(&split)
    } else {
        warnings.push(format!(
            "no encoder at {}; cold-start metrics omitted and AUC ranks warm products only",
            layout.encoder().display()
        ));
        EvalUniverse::new(&split, warm.ids().to_vec())
    }
    .map_err(CliError::stage("evaluate"))?;
    let cold_pairs: &[_] = if encoder.is_some() { &split.t_cold } else { &[] };
    if encoder.is_some() && split.t_cold.is_empty() {
        warnings.push("split has no cold test pairs".into());
    }

    let sampling = cfg.auc_sampling();
    let mut auc_of = |scorer: &dyn Scorer, pairs: &[_], what: &str| -> Result<Option<f64>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        soft(auc(scorer, &universe, pairs, sampling, &exec), what, &mut warnings)
    };
    let vasg = CosineScorer::new(&universe, &users, &products).map_err(CliError::stage("evaluate"))?;
    let auc_warm = auc_of(&vasg, &split.t_warm, "auc_warm")?;
    let auc_cold = auc_of(&vasg, cold_pairs, "auc_cold")?;
    let rand = rand_scorer(cfg.eval_seed(2));
    let rand_warm = auc_of(&rand, &split.t_warm, "rand_warm")?;
    let rand_cold = auc_of(&rand, cold_pairs, "rand_cold")?;
    let wboi_u = wboi_users(&split.train, &features).map_err(CliError::stage("wboi"))?;
    let wboi_p = feature_vectors(&features, universe.products().iter()).map_err(CliError::stage("wboi"))?;
    let wboi = CosineScorer::new(&universe, &wboi_u, &wboi_p).map_err(CliError::stage("wboi"))?;
    let wboi_warm = auc_of(&wboi, &split.t_warm, "wboi_warm")?;
    let wboi_cold = auc_of(&wboi, cold_pairs, "wboi_cold")?;

    let raw = feature_vectors(&features, warm.ids().iter()).map_err(CliError::stage("features"))?;
    let sets = soft(
        build_relation_sets(&split.train, cfg.eval_seed(3), cfg.eval.relation_cap),
        "relation sets",
        &mut warnings,
    )?;
    let (relation, inn) = match &sets {
        Some(sets) => (
            soft(relation_accuracy(&warm, sets, cfg.threshold()), "relation", &mut warnings)?,
            soft(relation_accuracy(&raw, sets, cfg.threshold()), "inn", &mut warnings)?,
        ),
        None => (None, None),
    };

    let analogy = if cfg.eval.analogy_queries > 0 {
        soft(
            analogy_precision(
                &split,
                &products,
                &users,
                cfg.eval.analogy_queries,
                cfg.eval.analogy_k,
                cfg.eval_seed(4),
                &exec,
            ),
            "analogy",
            &mut warnings,
        )?
    } else {
        None
    };

    let n = cfg.eval.distribution_pairs;
    let (emb_dist, feat_dist) = if n > 0 {
        let e = soft(similarity_distribution(&warm, n, cfg.eval_seed(5), &exec), "distribution", &mut warnings)?;
        let f = soft(similarity_distribution(&raw, n, cfg.eval_seed(5), &exec), "distribution", &mut warnings)?;
        (e, f)
    } else {
        (None, None)
    };
    for (what, stats) in [("embeddings", &emb_dist), ("features", &feat_dist)] {
        if let Some(s) = stats {
            write_histogram_csv(&layout.histogram(what), s).map_err(CliError::stage("histogram"))?;
        }
    }
    if cfg.eval.pca_components > 0 {
        if let Some(rows) = soft(
            pca_export(&products, cfg.eval.pca_components, cfg.eval_seed(6)),
            "pca",
            &mut warnings,
        )? {
            write_pca_csv(&layout.pca(), &rows).map_err(CliError::stage("pca"))?;
        }
    }

    let report = EvalReport {
        auc_warm,
        auc_cold,
        relation_accuracy: relation.map(|r| r.accuracy),
        threshold_used: relation.map(|r| r.threshold),
        precision_at_k: analogy.map(|a| a.held_out),
        precision_at_k_any_purchase: analogy.map(|a| a.any_purchase),
        analogy_k: cfg.eval.analogy_k,
        baselines: Baselines {
            rand_warm,
            rand_cold,
            wboi_warm,
            wboi_cold,
            inn_accuracy: inn.map(|r| r.accuracy),
            inn_threshold: inn.map(|r| r.threshold),
        },
        distribution_stats: DistributionReport {
            embeddings: emb_dist,
            features: feat_dist,
        },
        warnings,
        config: cfg.to_json(),
    };
    report.validate().map_err(CliError::stage("report"))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_json(&layout.report(), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// Top-k unseen products for a user.
    User { user: String, k: usize },
    /// Products nearest to `x_p1 - x_u1 + x_u2`, reported for `u2`.
    Analogy { p1: String, u1: String, u2: String, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub user_id: String,
    pub items: Vec<Ranked>,
}

fn query_err(e: Error) -> CliError {
    match e {
        Error::UnknownId { .. } => CliError::query(e.to_string()),
        other => CliError::stage("recommend")(other),
    }
}

pub fn recommend(cfg: &PipelineConfig, query: &Query) -> Result<Recommendation> {
    let layout = Layout::new(cfg.output_dir());
    let k = match query {
        Query::User { k, .. } | Query::Analogy { k, .. } => *k,
    };
    if k == 0 {
        return Err(CliError::query("k must be at least 1"));
    }
    let split = load_split(&layout)?;
    let model = load_trained(&layout)?;
    let encoder = load_checked_encoder(&layout, &model)?;
    let products = match &encoder {
        Some(enc) => {
            let features = load_feature_rows(cfg, split.cold_products.iter().map(String::as_str))?;
            product_table(&model, Some(enc), &features, &split.cold_products)?
        }
        None => model.embeddings.product_vectors(),
    };
    let users = model.embeddings.user_vectors();
    let index = EmbeddingIndex::build(&products).map_err(CliError::stage("index"))?;
    match query {
        Query::User { user, k } => {
            let v = users
                .get(user)
                .ok_or_else(|| CliError::query(format!("unknown user id `{user}`")))?;
            let seen: HashSet<String> = split
                .train
                .interactions()
                .iter()
                .filter(|it| &it.user_id == user)
                .map(|it| it.product_id.clone())
                .collect();
            let items = top_k(v, &index, &seen, *k).map_err(query_err)?;
            Ok(Recommendation {
                user_id: user.clone(),
                items,
            })
        }
        Query::Analogy { p1, u1, u2, k } => {
            let items = analogy_recommend(p1, u1, u2, &products, &users, &index, *k).map_err(query_err)?;
            Ok(Recommendation {
                user_id: u2.clone(),
                items,
            })
        }
    }
}

/// `user_id,rank,product_id,score`, ranks from 1.
pub fn write_recommendations(rec: &Recommendation, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| CliError::internal(format!("writing recommendations: {e}"));
    w.write_record(["user_id", "rank", "product_id", "score"]).map_err(fail)?;
    for (i, r) in rec.items.iter().enumerate() {
        w.write_record([
            rec.user_id.as_str(),
            &(i + 1).to_string(),
            r.product_id.as_str(),
            &r.score.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::internal(format!("writing recommendations: {e}")))
}

pub fn cmd_recommend(cfg: &PipelineConfig, query: &Query, out: impl Write) -> Result<()> {
    write_recommendations(&recommend(cfg, query)?, out)
}
