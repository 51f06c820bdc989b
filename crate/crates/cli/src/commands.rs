use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clusterseq::dataset::{ingest_path, preprocess, read_corpus, split_users, write_corpus, Corpus, Interaction};
use clusterseq::eval::{evaluate, inspect_clusters, EvalReport};
use clusterseq::meta::{load_checkpoint, train, Model, TrainOptions};
use clusterseq::synthgen::{cluster_agreement, generate};
use clusterseq::{Error, Result};

use crate::config::RunConfig;

pub const CORPUS_FILE: &str = "corpus.cseqd";
pub const STATS_FILE: &str = "stats.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const CONFIG_ECHO: &str = "config.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates the output directory and echoes the effective config into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join(CONFIG_ECHO), &cfg.to_json())?;
    Ok(out)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given; pass {flag} or set it in the config file")))
}

fn ingest(path: &Path) -> Result<Vec<Interaction>> {
    let ing = ingest_path(path)?;
    for w in &ing.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ing.interactions)
}

fn build_corpus(raw: &[Interaction], cfg: &RunConfig) -> Result<Corpus> {
    let k = cfg.model.shots;
    let corpus = preprocess(raw, k, cfg.min_len())?;
    let (corpus, report) = split_users(&corpus, cfg.test_fraction, k)?;
    if report.dropped_test_users > 0 {
        eprintln!(
            "warning: dropped {} test users whose first {k} items are unseen in training",
            report.dropped_test_users
        );
    }
    Ok(corpus)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    Model::from_params(&cfg.model, load_checkpoint(path)?)
}

pub fn preprocess_cmd(cfg: &RunConfig) -> Result<String> {
    let input = required(&cfg.data, "input data", "--input")?;
    let raw = ingest(input)?;
    let corpus = build_corpus(&raw, cfg)?;
    let out = prepare_out(cfg)?;
    let cache = out.join(CORPUS_FILE);
    write_corpus(&corpus, &cache)?;
    write_file(&out.join(STATS_FILE), &corpus.stats().to_csv())?;
    let s = corpus.stats();
    Ok(format!(
        "{} users ({} train, {} test), {} items -> {}",
        s.users,
        s.train_users,
        s.test_users,
        s.items,
        cache.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let corpus = read_corpus(required(&cfg.cache, "corpus cache", "--corpus")?)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_items = corpus.item_count();
    let mut model = Model::new(model_cfg, cfg.meta.seed)?;
    let out = prepare_out(cfg)?;
    let opts = TrainOptions {
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
        checkpoint_every: cfg.checkpoint_every,
        log: Some(out.join(TRAIN_LOG_FILE)),
    };
    let report = train(&mut model, &corpus, &cfg.meta, &opts)?;
    let aborted: usize = report.epochs.iter().map(|e| e.aborted_steps).sum();
    if aborted > 0 {
        eprintln!("warning: {aborted} meta steps skipped on non-finite losses");
    }
    Ok(match report.epochs.last() {
        Some(e) => format!(
            "{} epochs, final query loss {:.4}, cluster loss {:.4} -> {}",
            e.epoch,
            e.mean_query_loss,
            e.cluster_loss,
            out.join(CHECKPOINT_FILE).display()
        ),
        None => format!("initialization saved -> {}", out.join(CHECKPOINT_FILE).display()),
    })
}

fn metrics_line(r: &EvalReport) -> String {
    let m = &r.metrics;
    format!(
        "users {} MRR {:.4} HR@1 {:.4} NDCG@5 {:.4} HR@10 {:.4}",
        m.users, m.mrr, m.hit1, m.ndcg5, m.hr10
    )
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<String> {
    let corpus = read_corpus(required(&cfg.cache, "corpus cache", "--corpus")?)?;
    let model = load_model(cfg, required(&cfg.checkpoint, "checkpoint", "--checkpoint")?)?;
    let report = evaluate(&model, &corpus, &cfg.eval)?;
    let out = prepare_out(cfg)?;
    write_file(&out.join(EVAL_FILE), &report.to_csv())?;
    write_file(&out.join(SUMMARY_FILE), &report.summary_json())?;
    Ok(metrics_line(&report))
}

/// Reads a `user,cluster` label file as written by `generate`.
pub fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut labels = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let parsed = match (rec.get(0), rec.get(1).map(|c| c.trim().parse::<usize>())) {
            (Some(u), Some(Ok(c))) => (u.trim().to_string(), c),
            _ => {
                return Err(Error::Format(format!(
                    "{}: bad label row {}",
                    path.display(),
                    line + 2
                )))
            }
        };
        labels.insert(parsed.0, parsed.1);
    }
    Ok(labels)
}

pub fn inspect_cmd(cfg: &RunConfig, labels: Option<&Path>) -> Result<String> {
    let corpus = read_corpus(required(&cfg.cache, "corpus cache", "--corpus")?)?;
    let model = load_model(cfg, required(&cfg.checkpoint, "checkpoint", "--checkpoint")?)?;
    let ins = inspect_clusters(&model, &corpus, &cfg.eval)?;
    let agreement = match labels {
        Some(path) => {
            let map = read_labels(path)?;
            let truth = ins
                .rows
                .iter()
                .map(|r| {
                    map.get(&r.user)
                        .copied()
                        .ok_or_else(|| Error::Format(format!("no label for user `{}`", r.user)))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(cluster_agreement(&ins.argmax(), &truth)?)
        }
        None => None,
    };
    let out = prepare_out(cfg)?;
    write_file(&out.join(CLUSTERS_FILE), &ins.to_csv())?;
    write_file(&out.join(HISTOGRAM_FILE), &ins.histogram_csv())?;
    let summary = serde_json::json!({
        "users": ins.rows.len(),
        "histogram": ins.histogram,
        "usage_entropy": ins.usage_entropy(),
        "cluster_agreement": agreement,
    });
    write_file(&out.join(SUMMARY_FILE), &summary.to_string())?;
    let mut line = format!(
        "{} users, usage {:?}, entropy {:.3} nats",
        ins.rows.len(),
        ins.histogram,
        ins.usage_entropy()
    );
    if let Some(a) = agreement {
        let _ = write!(line, ", agreement with labels {a:.3}");
    }
    Ok(line)
}

pub fn generate_cmd(cfg: &RunConfig) -> Result<String> {
    let g = generate(&cfg.planted)?;
    let out = prepare_out(cfg)?;
    write_file(&out.join(INTERACTIONS_FILE), &g.interactions_csv())?;
    write_file(&out.join(LABELS_FILE), &g.labels_csv())?;
    Ok(format!(
        "{} users, {} interactions -> {}",
        g.labels.len(),
        g.interactions.len(),
        out.join(INTERACTIONS_FILE).display()
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Episode length.
    K,
    /// Number of clusters.
    M,
    /// Embedding width.
    D,
    /// Meta batch size.
    B,
}

impl Axis {
    fn set(self, cfg: &mut RunConfig, v: usize) {
        match self {
            Axis::K => cfg.model.shots = v,
            Axis::M => cfg.model.clusters = v,
            Axis::D => cfg.model.dim = v,
            Axis::B => cfg.meta.batch_size = v,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::M => "m",
            Axis::D => "d",
            Axis::B => "b",
        }
    }
}

/// Sorted distinct values, plus the duplicates that were dropped.
pub fn dedup_values(values: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = BTreeSet::new();
    let mut dropped = Vec::new();
    for &v in values {
        if !seen.insert(v) {
            dropped.push(v);
        }
    }
    (seen.into_iter().collect(), dropped)
}

fn sweep_point(raw: &[Interaction], cfg: &RunConfig) -> Result<EvalReport> {
    let corpus = build_corpus(raw, cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_items = corpus.item_count();
    let mut model = Model::new(model_cfg, cfg.meta.seed)?;
    train(&mut model, &corpus, &cfg.meta, &TrainOptions::default())?;
    evaluate(&model, &corpus, &cfg.eval)
}

/// Trains and evaluates once per axis value. A failing point is recorded in
/// its row and the sweep moves on.
pub fn sweep_cmd(cfg: &RunConfig, axis: Axis, values: &[usize]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let (values, dropped) = dedup_values(values);
    if !dropped.is_empty() {
        eprintln!("warning: duplicate sweep values ignored: {dropped:?}");
    }
    let raw = ingest(required(&cfg.data, "input data", "--input")?)?;
    let out = prepare_out(cfg)?;
    let mut csv = format!("{},status,users,mrr,hit1,ndcg5,hr10,seconds,error\n", axis.name());
    let mut failures = 0;
    for &v in &values {
        let mut point = cfg.clone();
        axis.set(&mut point, v);
        let start = Instant::now();
        let result = sweep_point(&raw, &point);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(r) => {
                let m = &r.metrics;
                let _ = writeln!(
                    csv,
                    "{v},ok,{},{},{},{},{},{secs:.2},",
                    m.users, m.mrr, m.hit1, m.ndcg5, m.hr10
                );
                eprintln!("{}={v}: {}", axis.name(), metrics_line(&r));
            }
            Err(e) => {
                failures += 1;
                let msg = e.to_string().replace(['"', '\n'], " ");
                let _ = writeln!(csv, "{v},{},,,,,,{secs:.2},\"{msg}\"", e.code());
                eprintln!("{}={v}: error[{}]: {msg}", axis.name(), e.code());
            }
        }
        write_file(&out.join(SWEEP_FILE), &csv)?;
    }
    Ok(format!(
        "{} points ({failures} failed) -> {}",
        values.len(),
        out.join(SWEEP_FILE).display()
    ))
}
