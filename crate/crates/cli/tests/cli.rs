use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vasg_cli::pipeline::{recommend, write_recommendations, Query};
use vasg_cli::PipelineConfig;
use vasg_core::eval::EvalReport;

const SMALL: &str = r#"seed = 3
threads = 1

[paths]
interactions = "data/interactions.csv"
features = "data/features.json"
output = "out"

[corpus]
walks_per_node = 2
walk_length = 8
window = 3

[train]
dim = 8
hidden = [16]
batch_size = 64
negatives = 1

[mapper]
epochs = 5

[eval]
distribution_pairs = 2000
analogy_queries = 50
relation_cap = 100

[synth]
n_users = 40
n_products = 60
purchases_per_user = 6
feature_dim = 12
"#;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.toml"), SMALL).unwrap();
        Env { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("c.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vasg"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "vasg {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn through(&self, last: &str) -> &Self {
        for cmd in ["synth", "prepare", "train", "map", "evaluate"] {
            self.ok(&[cmd]);
            if cmd == last {
                break;
            }
        }
        self
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.out().join(rel)).unwrap()
    }

    fn report(&self) -> EvalReport {
        serde_json::from_slice(&self.read("report.json")).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn prepare_writes_exact_counts_and_is_repeatable() {
    let env = Env::new();
    env.through("prepare");
    let stats: serde_json::Value = serde_json::from_slice(&env.read("stats.json")).unwrap();
    assert_eq!(stats["users"], 40);
    assert_eq!(stats["ratings"], 40 * 6);
    assert_eq!(stats["feature_dim"], 12);
    let (split, stats_bytes) = (env.read("split.json"), env.read("stats.json"));
    env.ok(&["prepare"]);
    assert_eq!(split, env.read("split.json"));
    assert_eq!(stats_bytes, env.read("stats.json"));
}

#[test]
fn missing_features_is_an_input_error_naming_the_path() {
    let env = Env::new();
    env.ok(&["synth"]);
    fs::remove_file(env.dir.path().join("data/features.json")).unwrap();
    let out = env.run(&["prepare"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("features.json"), "{}", stderr(&out));
}

#[test]
fn stage_order_and_config_errors() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["train"])), 2);
    fs::write(env.config(), format!("{SMALL}\n[train2]\nx = 1\n")).unwrap();
    assert_eq!(code(&env.run(&["synth"])), 2);
}

#[test]
fn train_logs_one_row_per_epoch_and_is_reproducible() {
    let a = Env::new();
    a.through("train");
    let csv = String::from_utf8(a.read("loss_history.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,pairs,l_sg,l_mse,w1,w2");
    assert_eq!(lines.len(), 1 + 5);

    let b = Env::new();
    b.through("train");
    for f in ["model/manifest.json", "model/embeddings.f32", "model/decoder.f32", "loss_history.csv"] {
        assert_eq!(a.read(f), b.read(f), "{f}");
    }
    // A different thread count must not change anything either.
    b.ok(&["train", "--threads", "3"]);
    assert_eq!(a.read("model/embeddings.f32"), b.read("model/embeddings.f32"));
}

#[test]
fn map_keeps_decoder_and_evaluate_reports() {
    let env = Env::new();
    env.through("train");
    let decoder = env.read("model/decoder.f32");
    env.ok(&["map", "--noise", "0"]);
    assert_eq!(decoder, env.read("model/decoder.f32"));
    let history = String::from_utf8(env.read("mapper_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 5);

    env.ok(&["evaluate"]);
    let r = env.report();
    r.validate().unwrap();
    assert!(r.auc_warm.is_some() && r.auc_cold.is_some());
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
    let echoed: PipelineConfig = toml::from_str(&String::from_utf8(env.read("map.config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.mapper.noise, 0.0);
    let manifest: serde_json::Value = serde_json::from_slice(&env.read("encoder/manifest.json")).unwrap();
    assert_eq!(manifest["config"]["noise_std_scale"], 0.0);
    for f in ["similarity_embeddings.csv", "similarity_features.csv", "pca_products.csv"] {
        assert!(env.out().join(f).exists(), "{f}");
    }
}

#[test]
fn evaluate_without_encoder_reports_null_cold_metrics() {
    let env = Env::new();
    env.through("train");
    env.ok(&["evaluate"]);
    let r = env.report();
    assert!(r.auc_warm.is_some());
    assert_eq!(r.auc_cold, None);
    assert_eq!(r.baselines.rand_cold, None);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn no_decoder_model_cannot_be_mapped() {
    let env = Env::new();
    env.ok(&["synth"]);
    env.ok(&["prepare"]);
    env.ok(&["train", "--no-decoder"]);
    let manifest: serde_json::Value = serde_json::from_slice(&env.read("model/manifest.json")).unwrap();
    assert_eq!(manifest["config"]["use_decoder"], false);
    assert_eq!(code(&env.run(&["map", "--no-decoder"])), 2);
}

#[test]
fn stale_encoder_is_rejected() {
    let env = Env::new();
    env.through("map");
    env.ok(&["train", "--negatives", "0"]);
    assert_eq!(code(&env.run(&["evaluate"])), 2);
}

fn library_csv(env: &Env, query: &Query) -> String {
    let cfg = PipelineConfig::load(&env.config()).unwrap();
    let mut buf = Vec::new();
    write_recommendations(&recommend(&cfg, query).unwrap(), &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn recommend_matches_library_and_checks_ids() {
    let env = Env::new();
    env.through("map");
    let user = first_user(&env.dir.path().join("data/interactions.csv"));

    let out = env.ok(&["recommend", "--user", &user, "--k", "4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "user_id,rank,product_id,score");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with(&format!("{user},1,")));
    let query = Query::User { user: user.clone(), k: 4 };
    assert_eq!(text, library_csv(&env, &query));

    let product = lines[1].split(',').nth(2).unwrap().to_string();
    let out = env.ok(&["recommend", "--analogy", &product, &user, &user, "--k", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().nth(1).unwrap().split(',').nth(2).unwrap(), product);
    let query = Query::Analogy {
        p1: product.clone(),
        u1: user.clone(),
        u2: user.clone(),
        k: 3,
    };
    assert_eq!(text, library_csv(&env, &query));

    assert_eq!(code(&env.run(&["recommend", "--user", "nobody"])), 3);
    assert_eq!(code(&env.run(&["recommend", "--analogy", &product, &user, "nobody"])), 3);
    assert_eq!(code(&env.run(&["recommend", "--user", &user, "--k", "0"])), 3);
}

fn first_user(interactions: &Path) -> String {
    let text = fs::read_to_string(interactions).unwrap();
    text.lines().nth(1).unwrap().split(',').next().unwrap().to_string()
}
