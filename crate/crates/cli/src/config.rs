//! Pipeline configuration: one sectioned TOML document.
//!
//! Every stage draws its seed from the global `seed` keyed by the stage
//! name (`split`, `corpus`, `train`, `mapper`, `eval`, `synth`), so a
//! single number reproduces a whole run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vasg_core::data::SplitConfig;
use vasg_core::eval::{AucSampling, Threshold};
use vasg_core::hin::CorpusConfig;
use vasg_core::mapper::MapperConfig;
use vasg_core::rng::{self, module_seed};
use vasg_core::synth::SynthConfig;
use vasg_core::vasg::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for walks and evaluation; 0 uses every core.
    pub threads: usize,
    pub paths: Paths,
    pub prepare: PrepareSection,
    pub split: SplitSection,
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub mapper: MapperSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
    /// Directory relative paths are resolved against: the config file's
    /// directory, or the working directory without a file.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 1,
            paths: Paths::default(),
            prepare: PrepareSection::default(),
            split: SplitSection::default(),
            corpus: CorpusSection::default(),
            train: TrainSection::default(),
            mapper: MapperSection::default(),
            eval: EvalSection::default(),
            synth: SynthSection::default(),
            base: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub interactions: PathBuf,
    /// Feature manifest (JSON); its `.f32` blob sits next to it.
    pub features: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            interactions: "data/interactions.csv".into(),
            features: "data/features.json".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    /// Users with fewer interactions are dropped.
    pub min_history: usize,
}

impl Default for PrepareSection {
    fn default() -> Self {
        PrepareSection { min_history: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub cold_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { cold_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            walks_per_node: c.walks_per_node,
            walk_length: c.walk_length,
            window: c.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub hidden: Vec<usize>,
    pub negatives: usize,
    pub l2: f64,
    pub use_decoder: bool,
    pub reuse_corpus: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            dim: t.dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout: t.dropout_p,
            hidden: t.hidden,
            negatives: t.negative_samples,
            l2: t.l2,
            use_decoder: t.use_decoder,
            reuse_corpus: t.reuse_corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperSection {
    /// Input noise std relative to each feature dimension's std.
    pub noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub direct_regression: bool,
}

impl Default for MapperSection {
    fn default() -> Self {
        let m = MapperConfig::default();
        MapperSection {
            noise: m.noise_std_scale,
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.lr,
            dropout: m.dropout_p,
            direct_regression: m.direct_regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Auto,
}

/// `"auto"` or a fixed cosine threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSetting {
    Fixed(f64),
    Mode(ThresholdMode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Negatives sampled per test pair; 0 scores against every product.
    pub auc_negatives: usize,
    pub relation_cap: usize,
    pub threshold: ThresholdSetting,
    pub distribution_pairs: usize,
    pub analogy_queries: usize,
    pub analogy_k: usize,
    pub pca_components: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            auc_negatives: 500,
            relation_cap: 1000,
            threshold: ThresholdSetting::Mode(ThresholdMode::Auto),
            distribution_pairs: 100_000,
            analogy_queries: 1000,
            analogy_k: 5,
            pca_components: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_users: usize,
    pub n_products: usize,
    pub n_clusters: usize,
    pub in_cluster_prob: f64,
    pub purchases_per_user: usize,
    pub feature_dim: usize,
    pub feature_noise_std: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            n_users: s.n_users,
            n_products: s.n_products,
            n_clusters: s.n_clusters,
            in_cluster_prob: s.in_cluster_prob,
            purchases_per_user: s.purchases_per_user,
            feature_dim: s.feature_dim,
            feature_noise_std: s.feature_noise_std,
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub no_decoder: bool,
    pub noise: Option<f64>,
    pub negatives: Option<usize>,
}

impl PipelineConfig {
    /// Reads `path`; relative paths inside are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        cfg.base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.resolve(&self.paths.interactions)
    }

    pub fn features_path(&self) -> PathBuf {
        self.resolve(&self.paths.features)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if o.no_decoder {
            self.train.use_decoder = false;
        }
        if let Some(n) = o.noise {
            self.mapper.noise = n;
        }
        if let Some(k) = o.negatives {
            self.train.negatives = k;
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::internal(format!("config serialization: {e}")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            seed: module_seed(self.seed, "split"),
            cold_fraction: self.split.cold_fraction,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            walks_per_node: self.corpus.walks_per_node,
            walk_length: self.corpus.walk_length,
            window: self.corpus.window,
            seed: module_seed(self.seed, "corpus"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            dim: t.dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout_p: t.dropout,
            hidden: t.hidden.clone(),
            corpus: self.corpus_config(),
            negative_samples: t.negatives,
            l2: t.l2,
            use_decoder: t.use_decoder,
            reuse_corpus: t.reuse_corpus,
            seed: module_seed(self.seed, "train"),
        }
    }

    pub fn mapper_config(&self) -> MapperConfig {
        let m = &self.mapper;
        MapperConfig {
            noise_std_scale: m.noise,
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.lr,
            dropout_p: m.dropout,
            direct_regression: m.direct_regression,
            seed: module_seed(self.seed, "mapper"),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_users: s.n_users,
            n_products: s.n_products,
            n_clusters: s.n_clusters,
            in_cluster_prob: s.in_cluster_prob,
            purchases_per_user: s.purchases_per_user,
            feature_dim: s.feature_dim,
            feature_noise_std: s.feature_noise_std,
            seed: module_seed(self.seed, "synth"),
        }
    }

    /// Seed for one evaluation sub-task.
    pub fn eval_seed(&self, task: u64) -> u64 {
        rng::derive(module_seed(self.seed, "eval"), &[task])
    }

    pub fn auc_sampling(&self) -> AucSampling {
        match self.eval.auc_negatives {
            0 => AucSampling::All,
            k => AucSampling::Sample {
                k,
                seed: self.eval_seed(0),
            },
        }
    }

    pub fn threshold(&self) -> Threshold {
        match self.eval.threshold {
            ThresholdSetting::Fixed(t) => Threshold::Fixed(t),
            ThresholdSetting::Mode(ThresholdMode::Auto) => Threshold::Auto {
                seed: self.eval_seed(1),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = PipelineConfig::default();
        cfg.eval.threshold = ThresholdSetting::Fixed(0.25);
        let back: PipelineConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let auto: PipelineConfig = toml::from_str("[eval]\nthreshold = \"auto\"\n").unwrap();
        assert_eq!(auto.eval.threshold, ThresholdSetting::Mode(ThresholdMode::Auto));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[train]\ndimm = 3\n").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = PipelineConfig::default();
        let seeds = [
            cfg.split_config().seed,
            cfg.corpus_config().seed,
            cfg.train_config().seed,
            cfg.mapper_config().seed,
            cfg.synth_config().seed,
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            no_decoder: true,
            noise: Some(0.0),
            negatives: Some(3),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert!(!cfg.train.use_decoder);
        assert_eq!(cfg.mapper.noise, 0.0);
        assert_eq!(cfg.train_config().negative_samples, 3);
    }
}
