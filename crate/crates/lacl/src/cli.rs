//! Command line: `split`, `train`, `eval`, `gradcheck`. Every command leaves
//! a manifest in its output directory, on success and on failure, so a run
//! can always be replayed from what it wrote down.
//!
//! Exit codes: 0 all requested outputs written, 2 bad arguments, config, or
//! missing files, 1 anything that failed at runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::data::{
    close_split, encode, far_pair, load_corpus, parse_exclusions, save_corpus, Corpus, Vocabulary,
};
use crate::manifest::RunManifest;
use crate::metrics::{
    accuracy, auroc, fpr_at_tpr95, histogram_payload, HistogramPayload, LayerAuroc, MetricsReport,
    ScorerMetrics,
};
use crate::scoring::{
    build_bank, cosine_ensemble_score_from, cosine_score, embed_examples, fit_maha_ensemble,
    layerwise_scores, maha_ensemble_score, mahalanobis_classify, mahalanobis_fit, ScoreKind,
    ScoreRecord, SliceMode,
};
use crate::trainer::{objective_grad_check_probed, train, OBJECTIVE_FD_STEP};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lacl",
    about = "Contrastive intent encoder with out-of-scope detection",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Partition a corpus into in-distribution and out-of-distribution parts
    Split(SplitArgs),
    /// Train a checkpoint on an in-distribution corpus
    Train(TrainArgs),
    /// Score held-out data against a checkpoint and write metric reports
    Eval(EvalArgs),
    /// Audit analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Corpus JSON to partition
    pub dataset: PathBuf,
    /// close: hold out a fraction of intents; far: drop listed intents
    #[arg(long, default_value = "close")]
    pub mode: String,
    /// Fraction of intents kept in-distribution (close mode)
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Intent names shared with the far corpus, one per line (far mode)
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
    #[arg(long, default_value = "out/split")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// In-distribution corpus JSON
    pub ind_corpus: PathBuf,
    /// TOML config; omitted keys fall back to defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lacl or ce (overrides the config file)
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint JSON from `train`
    pub checkpoint: PathBuf,
    /// Corpus whose train split populates the reference bank
    pub ind_train: PathBuf,
    /// Corpus whose test split provides in-distribution queries
    pub ind_test: PathBuf,
    /// Corpus whose eval texts provide out-of-distribution queries
    pub ood_test: PathBuf,
    /// Comma list from: cosine-single, cosine-ens, maha-single, maha-ens
    #[arg(long, default_value = "cosine-single,cosine-ens,maha-single,maha-ens")]
    pub scorers: String,
    /// full, or upper-half to slice cosine scorers to the top layers
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, default_value = "out/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random batches to audit
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Central-difference step
    #[arg(long, default_value_t = OBJECTIVE_FD_STEP)]
    pub step: f64,
    /// Probed entries per parameter tensor; 0 means every entry
    #[arg(long, default_value_t = 16)]
    pub cap: usize,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Optional directory for a manifest
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code; usage problems exit 2, runtime ones 1.
#[derive(Debug)]
struct Fail {
    code: i32,
    msg: String,
}

impl Fail {
    fn usage(msg: impl Into<String>) -> Self {
        Fail { code: EXIT_USAGE, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Fail { code: EXIT_RUNTIME, msg: msg.into() }
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::usage(e.to_string())
    }
}

type CmdResult = Result<(), Fail>;

pub fn run(cli: Cli) -> i32 {
    match cli.cmd {
        Cmd::Split(args) => run_split(&args),
        Cmd::Train(args) => run_train(&args),
        Cmd::Eval(args) => run_eval(&args),
        Cmd::Gradcheck(args) => run_gradcheck(&args),
    }
}

fn read_input(manifest: &mut RunManifest, path: &Path) -> Result<(), Fail> {
    manifest
        .record_input(path)
        .map_err(|e| Fail::usage(format!("cannot read {}: {e}", path.display())))
}

fn load_corpus_input(manifest: &mut RunManifest, path: &Path) -> Result<Corpus, Fail> {
    read_input(manifest, path)?;
    load_corpus(path).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn write_output(
    manifest: &mut RunManifest,
    path: &Path,
    bytes: &[u8],
) -> Result<(), Fail> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Fail::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| Fail::runtime(format!("cannot write {}: {e}", path.display())))?;
    manifest.record_output(path);
    Ok(())
}

/// Writes the manifest last, reporting either success or the failure message,
/// then turns the result into an exit code.
fn seal(
    mut manifest: RunManifest,
    out_dir: &Path,
    started: Instant,
    result: CmdResult,
) -> i32 {
    let (status, code) = match &result {
        Ok(()) => (Ok(()), EXIT_OK),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            (Err(f.msg.clone()), f.code)
        }
    };
    manifest.finish(started, status.map_err(|m| m));
    let path = out_dir.join("manifest.json");
    if let Err(e) = manifest.write(&path) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return if code == EXIT_OK { EXIT_RUNTIME } else { code };
    }
    code
}

pub fn run_split(args: &SplitArgs) -> i32 {
    let started = Instant::now();
    let mut manifest = RunManifest::new("split");
    let result = split_inner(args, &mut manifest);
    seal(manifest, &args.out, started, result)
}

fn split_inner(args: &SplitArgs, manifest: &mut RunManifest) -> CmdResult {
    let mut cfg = RunConfig::default();
    let seed = cfg.resolve_seed(args.seed)?;
    manifest.seed = seed;
    manifest.config = BTreeMap::from([
        ("mode".to_string(), args.mode.clone()),
        ("ratio".to_string(), args.ratio.to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    let corpus = load_corpus_input(manifest, &args.dataset)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Fail::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    match args.mode.as_str() {
        "close" => {
            let (ind, ood) = close_split(&corpus, args.ratio, seed)
                .map_err(|e| Fail::runtime(e.to_string()))?;
            for (name, part) in [("ind.json", &ind), ("ood.json", &ood)] {
                let path = args.out.join(name);
                save_corpus(part, &path)
                    .map_err(|e| Fail::runtime(format!("cannot write {}: {e}", path.display())))?;
                manifest.record_output(&path);
            }
        }
        "far" => {
            let ex_path = args
                .exclusions
                .as_ref()
                .ok_or_else(|| Fail::usage("far mode needs --exclusions"))?;
            read_input(manifest, ex_path)?;
            let raw = std::fs::read_to_string(ex_path)
                .map_err(|e| Fail::usage(format!("cannot read {}: {e}", ex_path.display())))?;
            let names = parse_exclusions(&raw);
            manifest.config.insert("exclusions".into(), names.join(","));
            let empty = Corpus {
                label_names: vec![],
                train: vec![],
                val: vec![],
                test: vec![],
                oos_train: vec![],
                oos_val: vec![],
                oos_test: vec![],
            };
            let (ind, _) =
                far_pair(&corpus, &empty, &names).map_err(|e| Fail::runtime(e.to_string()))?;
            let path = args.out.join("ind.json");
            save_corpus(&ind, &path)
                .map_err(|e| Fail::runtime(format!("cannot write {}: {e}", path.display())))?;
            manifest.record_output(&path);
        }
        other => return Err(Fail::usage(format!("unknown split mode {other}"))),
    }
    Ok(())
}

pub fn run_train(args: &TrainArgs) -> i32 {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train");
    let result = train_inner(args, &mut manifest);
    seal(manifest, &args.out, started, result)
}

fn train_inner(args: &TrainArgs, manifest: &mut RunManifest) -> CmdResult {
    let mut cfg = match &args.config {
        Some(path) => {
            read_input(manifest, path)?;
            RunConfig::from_file(path)
                .map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.set_str("mode", mode)?;
    }
    let seed = cfg.resolve_seed(args.seed)?;
    cfg.validate()?;
    manifest.seed = seed;
    manifest.config = cfg.snapshot();

    let corpus = load_corpus_input(manifest, &args.ind_corpus)?;
    let sidecar = match &cfg.sidecar {
        Some(path) => {
            read_input(manifest, path)?;
            Some(
                crate::augment::Sidecar::load(path)
                    .map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let vocab =
        crate::data::build_vocab(&corpus, 1).map_err(|e| Fail::runtime(e.to_string()))?;
    let enc_cfg = cfg.encoder_config(vocab.len());
    let train_cfg = cfg.train_config();
    let policy = cfg.augment_policy(sidecar);

    let (ckpt, mut report) = train(&corpus, &vocab, &enc_cfg, &train_cfg, &policy)
        .map_err(|e| Fail::runtime(e.to_string()))?;

    let ckpt_path = args.out.join("checkpoint.json");
    if let Some(dir) = ckpt_path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Fail::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    save_checkpoint(&ckpt_path, &ckpt)
        .map_err(|e| Fail::runtime(format!("cannot write {}: {e}", ckpt_path.display())))?;
    manifest.record_output(&ckpt_path);
    report.checkpoint_path = Some(ckpt_path.display().to_string());
    write_output(manifest, &args.out.join("train_report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scorer {
    CosineSingle,
    CosineEns,
    MahaSingle,
    MahaEns,
}

impl Scorer {
    fn name(self) -> &'static str {
        match self {
            Scorer::CosineSingle => "cosine-single",
            Scorer::CosineEns => "cosine-ens",
            Scorer::MahaSingle => "maha-single",
            Scorer::MahaEns => "maha-ens",
        }
    }
}

impl FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine-single" => Ok(Scorer::CosineSingle),
            "cosine-ens" => Ok(Scorer::CosineEns),
            "maha-single" => Ok(Scorer::MahaSingle),
            "maha-ens" => Ok(Scorer::MahaEns),
            other => Err(format!("unknown scorer {other}")),
        }
    }
}

/// Scores and predictions for one scorer over both query populations.
struct ScoredSet {
    ind: Vec<f64>,
    ood: Vec<f64>,
    ind_pred: Vec<usize>,
}

pub fn run_eval(args: &EvalArgs) -> i32 {
    let started = Instant::now();
    let mut manifest = RunManifest::new("eval");
    let result = eval_inner(args, &mut manifest);
    seal(manifest, &args.out, started, result)
}

fn eval_inner(args: &EvalArgs, manifest: &mut RunManifest) -> CmdResult {
    let scorers: Vec<Scorer> = args
        .scorers
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Scorer::from_str(s).map_err(Fail::usage))
        .collect::<Result<_, _>>()?;
    if scorers.is_empty() {
        return Err(Fail::usage("no scorers requested"));
    }
    let slice = match args.variant.as_str() {
        "full" => SliceMode::Full,
        "upper-half" | "upper_half" => SliceMode::UpperHalf,
        other => return Err(Fail::usage(format!("unknown variant {other}"))),
    };
    let ridge = args.ridge.unwrap_or(crate::scoring::DEFAULT_RIDGE);
    let bins = args.bins.unwrap_or(30);
    if bins < 2 {
        return Err(Fail::usage("bins must be at least 2"));
    }
    manifest.config = BTreeMap::from([
        ("scorers".to_string(), args.scorers.clone()),
        ("variant".to_string(), args.variant.clone()),
        ("ridge".to_string(), ridge.to_string()),
        ("bins".to_string(), bins.to_string()),
    ]);

    read_input(manifest, &args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)
        .map_err(|e| Fail::usage(format!("{}: {e}", args.checkpoint.display())))?;
    manifest.seed = ckpt.seed;
    let (enc, head) = ckpt.materialize().map_err(|e| Fail::runtime(e.to_string()))?;

    let ind_train = load_corpus_input(manifest, &args.ind_train)?;
    let ind_test = load_corpus_input(manifest, &args.ind_test)?;
    let ood_test = load_corpus_input(manifest, &args.ood_test)?;

    let bank = build_bank(&ckpt, &ind_train).map_err(|e| Fail::runtime(e.to_string()))?;
    let vocab =
        Vocabulary::from_tokens(ckpt.vocab.clone()).map_err(|e| Fail::runtime(e.to_string()))?;

    if ind_test.test.is_empty() {
        return Err(Fail::runtime(format!("{}: empty test split", args.ind_test.display())));
    }
    let ind_seqs: Vec<Vec<u32>> =
        ind_test.test.iter().map(|e| encode(&e.text, &vocab)).collect();
    let ind_labels: Vec<usize> = ind_test.test.iter().map(|e| e.label).collect();
    let ood_texts = ood_test.ood_eval_texts();
    if ood_texts.is_empty() {
        return Err(Fail::runtime(format!("{}: no eval texts", args.ood_test.display())));
    }
    let ood_seqs: Vec<Vec<u32>> = ood_texts.iter().map(|e| encode(&e.text, &vocab)).collect();

    let q_ind = embed_examples(&enc, &head, &ind_seqs).map_err(|e| Fail::runtime(e.to_string()))?;
    let q_ood = embed_examples(&enc, &head, &ood_seqs).map_err(|e| Fail::runtime(e.to_string()))?;

    let upper_from = bank.embedded.layers.len() / 2;
    let score_set = |scorer: Scorer| -> Result<ScoredSet, String> {
        let per_query = |q: &crate::scoring::Embedded,
                         i: usize|
         -> Result<(f64, usize), String> {
            match scorer {
                Scorer::CosineSingle => {
                    cosine_score(q.z_norm.row(i), &bank, slice).map_err(|e| e.to_string())
                }
                Scorer::CosineEns => {
                    let layers: Vec<Vec<f64>> =
                        q.layers.iter().map(|t| t.row(i).to_vec()).collect();
                    let from = if slice == SliceMode::UpperHalf { upper_from } else { 0 };
                    cosine_ensemble_score_from(&layers, &bank, from).map_err(|e| e.to_string())
                }
                Scorer::MahaSingle | Scorer::MahaEns => unreachable!("handled below"),
            }
        };
        match scorer {
            Scorer::CosineSingle | Scorer::CosineEns => {
                let mut set = ScoredSet { ind: vec![], ood: vec![], ind_pred: vec![] };
                for i in 0..q_ind.len() {
                    let (s, p) = per_query(&q_ind, i)?;
                    set.ind.push(s);
                    set.ind_pred.push(p);
                }
                for i in 0..q_ood.len() {
                    set.ood.push(per_query(&q_ood, i)?.0);
                }
                Ok(set)
            }
            Scorer::MahaSingle => {
                let stats = mahalanobis_fit(
                    &bank.embedded.z_raw,
                    &bank.labels,
                    &bank.label_names,
                    ridge,
                )
                .map_err(|e| e.to_string())?;
                let mut set = ScoredSet { ind: vec![], ood: vec![], ind_pred: vec![] };
                for i in 0..q_ind.len() {
                    let (s, c) = mahalanobis_classify(q_ind.z_raw.row(i), &stats)
                        .map_err(|e| e.to_string())?;
                    set.ind.push(s);
                    set.ind_pred.push(c);
                }
                for i in 0..q_ood.len() {
                    set.ood.push(
                        mahalanobis_classify(q_ood.z_raw.row(i), &stats)
                            .map_err(|e| e.to_string())?
                            .0,
                    );
                }
                Ok(set)
            }
            Scorer::MahaEns => {
                let ens = fit_maha_ensemble(&bank, ridge).map_err(|e| e.to_string())?;
                let mut set = ScoredSet { ind: vec![], ood: vec![], ind_pred: vec![] };
                let rows = |q: &crate::scoring::Embedded, i: usize| -> Vec<Vec<f64>> {
                    q.layers.iter().map(|t| t.row(i).to_vec()).collect()
                };
                for i in 0..q_ind.len() {
                    let (s, c) = maha_ensemble_score(&rows(&q_ind, i), &ens)
                        .map_err(|e| e.to_string())?;
                    set.ind.push(s);
                    set.ind_pred.push(c);
                }
                for i in 0..q_ood.len() {
                    set.ood.push(
                        maha_ensemble_score(&rows(&q_ood, i), &ens)
                            .map_err(|e| e.to_string())?
                            .0,
                    );
                }
                Ok(set)
            }
        }
    };

    let mut blocks: Vec<ScorerMetrics> = Vec::new();
    let mut failures: Vec<(Scorer, String)> = Vec::new();
    let mut records: Vec<ScoreRecord> = Vec::new();
    let mut histogram: Option<HistogramPayload> = None;
    for &scorer in &scorers {
        let set = match score_set(scorer) {
            Ok(s) => s,
            Err(msg) => {
                eprintln!("scorer {} failed: {msg}", scorer.name());
                failures.push((scorer, msg));
                continue;
            }
        };
        let metrics = (|| -> Result<ScorerMetrics, String> {
            Ok(ScorerMetrics {
                scorer: scorer.name().to_string(),
                acc: accuracy(&set.ind_pred, &ind_labels).map_err(|e| e.to_string())?,
                auroc: auroc(&set.ind, &set.ood).map_err(|e| e.to_string())?,
                fpr_at_tpr95: fpr_at_tpr95(&set.ind, &set.ood).map_err(|e| e.to_string())?,
            })
        })();
        let metrics = match metrics {
            Ok(m) => m,
            Err(msg) => {
                eprintln!("scorer {} failed: {msg}", scorer.name());
                failures.push((scorer, msg));
                continue;
            }
        };
        if histogram.is_none() {
            let correct: Vec<bool> =
                set.ind_pred.iter().zip(&ind_labels).map(|(p, y)| p == y).collect();
            match histogram_payload(&set.ind, &correct, &set.ood, bins) {
                Ok(h) => histogram = Some(h),
                Err(e) => eprintln!("histogram for {} failed: {e}", scorer.name()),
            }
        }
        for (i, (&s, &p)) in set.ind.iter().zip(&set.ind_pred).enumerate() {
            records.push(ScoreRecord {
                id: i,
                mode: scorer.name().to_string(),
                layer: None,
                score: s,
                pred_label: Some(p),
                is_ood: false,
            });
        }
        for (i, &s) in set.ood.iter().enumerate() {
            records.push(ScoreRecord {
                id: i,
                mode: scorer.name().to_string(),
                layer: None,
                score: s,
                pred_label: None,
                is_ood: true,
            });
        }
        blocks.push(metrics);
    }

    // Layer-wise table: detection quality of every intermediate state plus
    // the assembled representation, for both score kinds.
    let mut layer_rows: Vec<LayerAuroc> = Vec::new();
    for (kind, name) in [(ScoreKind::Cosine, "cosine"), (ScoreKind::Mahalanobis, "maha")] {
        let ind_ls = layerwise_scores(&q_ind, &bank, kind, ridge);
        let ood_ls = layerwise_scores(&q_ood, &bank, kind, ridge);
        match (ind_ls, ood_ls) {
            (Ok(a), Ok(b)) => {
                for l in 0..a.layer_cols.len() {
                    let v = auroc(&a.layer_cols[l], &b.layer_cols[l])
                        .map_err(|e| Fail::runtime(e.to_string()))?;
                    layer_rows.push(LayerAuroc {
                        kind: name.into(),
                        layer: (l + 1).to_string(),
                        auroc: v,
                    });
                }
                let v = auroc(&a.z_col, &b.z_col).map_err(|e| Fail::runtime(e.to_string()))?;
                layer_rows.push(LayerAuroc { kind: name.into(), layer: "z".into(), auroc: v });
            }
            (Err(e), _) | (_, Err(e)) => {
                eprintln!("layer-wise {name} scores failed: {e}");
            }
        }
    }

    let report = MetricsReport {
        checkpoint_id: bank.checkpoint_id.clone(),
        corpus_id: bank.corpus_id.clone(),
        variant: args.variant.clone(),
        scorers: blocks,
        layerwise_auroc: layer_rows.clone(),
        histogram: histogram.clone(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Fail::runtime(e.to_string()))?;
    write_output(manifest, &args.out.join("metrics.json"), (json + "\n").as_bytes())?;

    let mut scores_csv = String::from("id,mode,layer,score,pred_label,is_ood\n");
    for r in &records {
        scores_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            r.mode,
            r.layer.map(|l| l.to_string()).unwrap_or_default(),
            r.score,
            r.pred_label.map(|p| p.to_string()).unwrap_or_default(),
            r.is_ood
        ));
    }
    write_output(manifest, &args.out.join("scores.csv"), scores_csv.as_bytes())?;

    let mut layer_csv = String::from("kind,layer,auroc\n");
    for row in &layer_rows {
        layer_csv.push_str(&format!("{},{},{}\n", row.kind, row.layer, row.auroc));
    }
    write_output(manifest, &args.out.join("layerwise.csv"), layer_csv.as_bytes())?;

    if let Some(h) = &histogram {
        write_output(manifest, &args.out.join("histogram.csv"), h.to_csv().as_bytes())?;
    }

    if failures.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|(s, _)| s.name()).collect();
        Err(Fail::runtime(format!("scorers failed: {}", names.join(", "))))
    }
}

pub fn run_gradcheck(args: &GradcheckArgs) -> i32 {
    let started = Instant::now();
    let mut manifest = RunManifest::new("gradcheck");
    let result = gradcheck_inner(args, &mut manifest);
    match &args.out {
        Some(dir) => seal(manifest, dir, started, result),
        None => match result {
            Ok(()) => EXIT_OK,
            Err(f) => {
                eprintln!("error: {}", f.msg);
                f.code
            }
        },
    }
}

fn gradcheck_inner(args: &GradcheckArgs, manifest: &mut RunManifest) -> CmdResult {
    let mut cfg = RunConfig::default();
    let seed = cfg.resolve_seed(args.seed)?;
    manifest.seed = seed;
    manifest.config = BTreeMap::from([
        ("batches".to_string(), args.batches.to_string()),
        ("step".to_string(), args.step.to_string()),
        ("cap".to_string(), args.cap.to_string()),
        ("tol".to_string(), args.tol.to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    let cap = if args.cap == 0 { None } else { Some(args.cap) };
    let check = objective_grad_check_probed(args.batches, seed, args.step, cap)
        .map_err(|e| Fail::runtime(e.to_string()))?;
    println!(
        "max relative error {:.3e} over {} batches ({} skipped at the margin boundary), worst at {}",
        check.max_rel_err, check.checked, check.skipped, check.worst_param
    );
    if check.max_rel_err <= args.tol {
        Ok(())
    } else {
        Err(Fail::runtime(format!(
            "relative error {:.3e} exceeds tolerance {:.1e}",
            check.max_rel_err, args.tol
        )))
    }
}
