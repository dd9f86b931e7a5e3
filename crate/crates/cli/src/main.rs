//! `genret` command-line tool.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genret::config::TrainConfig;
use genret::evalkit::{self, EvalOptions, Report};
use genret::fsio::write_atomic;
use genret::idstore::{IdStore, DEFAULT_LIMIT};
use genret::textdata::{self, all_unknown, Format, PairRecord};
use genret::trainer::{Checkpoint, MetricsRecord, Trainer};
use genret::{DocId, Error, IdSpace};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "genret",
    version,
    about = "Generative retrieval with learned document identifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a pair file.
    Train(TrainArgs),
    /// Assign identifiers to the documents of a pair file and write an index file.
    Assign(AssignArgs),
    /// Decode identifiers for one query and list their documents.
    Retrieve(RetrieveArgs),
    /// Score queries against their documents.
    Eval(EvalArgs),
    /// Posting-size histogram of an index file.
    AnalyzeUtilization(AnalyzeArgs),
    /// Prefix tree of an index file as JSON.
    ExportTree(TreeArgs),
    /// Write a synthetic clustered corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum OutFormat {
    #[default]
    Text,
    Records,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pair file (TSV or JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["mlp", "pq", "rq"])]
    indexer: Option<String>,
    /// Comma-separated subset of di,bot,ib.
    #[arg(long)]
    disable_loss: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total step count when resuming.
    #[arg(long, requires = "resume")]
    steps: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pair file; each distinct document is assigned once.
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, value_enum, default_value_t)]
    format: OutFormat,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Pair file of queries with their gold documents.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Training pair file; when given, queries are split into existing,
    /// new-content and new-semantic documents.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: OutFormat,
}

#[derive(Args)]
struct IndexSource {
    #[arg(long)]
    index: PathBuf,
    /// Checkpoint whose identifier space the index uses; defaults to 4 x 256.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: IndexSource,
    /// Write the `size,count` histogram here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: OutFormat,
}

#[derive(Args)]
struct TreeArgs {
    #[command(flatten)]
    source: IndexSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    #[arg(long, default_value_t = 1)]
    min_posting: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for pairs.tsv, clusters.tsv, train.tsv and heldout.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 125)]
    docs_per_cluster: usize,
    #[arg(long, default_value_t = 2)]
    queries_per_doc: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of pairs moved to heldout.tsv.
    #[arg(long, default_value_t = 0.1)]
    heldout: f64,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Train(a) => train(a),
        Command::Assign(a) => assign(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::AnalyzeUtilization(a) => analyze(a),
        Command::ExportTree(a) => export_tree(a),
        Command::Synth(a) => synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_pairs(path: &Path) -> Result<Vec<PairRecord>, Failure> {
    let loaded = textdata::load_pairs(path, Format::from_path(path))?;
    if loaded.malformed > 0 {
        eprintln!(
            "{}: skipped {} malformed line(s)",
            path.display(),
            loaded.malformed
        );
    }
    Ok(loaded.records)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn load_index(path: &Path, space: IdSpace) -> Result<IdStore, Failure> {
    Ok(IdStore::from_index_file(
        space,
        &genret::fsio::read_to_string(path)?,
    )?)
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut ov = a.overrides.clone();
    if let Some(s) = a.seed {
        ov.push(format!("seed={s}"));
    }
    if let Some(k) = &a.indexer {
        ov.push(format!("indexer=\"{k}\""));
    }
    if let Some(d) = &a.disable_loss {
        ov.push(format!("disable_loss={d}"));
    }
    Ok(base.with_overrides(&ov)?)
}

fn train(a: TrainArgs) -> CliResult {
    let records = load_pairs(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_ckpt(p)?;
            if a.config.is_some()
                || !a.overrides.is_empty()
                || a.seed.is_some()
                || a.indexer.is_some()
                || a.disable_loss.is_some()
            {
                return Err(usage(
                    "--resume takes its configuration from the checkpoint",
                ));
            }
            Trainer::resume(ckpt, records, a.steps)?
        }
        None => Trainer::new(build_config(&a)?, records)?,
    };
    let out = &a.out;
    write_atomic(
        &out.join("config.toml"),
        trainer.config().to_toml().as_bytes(),
    )?;
    let metrics_path = out.join("metrics.jsonl");
    let mut log = String::new();
    let quiet = a.quiet;
    let mut last_good = trainer.checkpoint();
    let result = trainer.run(
        |r: &MetricsRecord| {
            log.push_str(&r.to_json_line());
            if !quiet {
                eprintln!(
                    "step {:>6}  total {:.4}  c {:.4}  ce {:.4}  unique {}/{}",
                    r.step, r.loss.total, r.loss.l_c, r.loss.l_ce, r.unique_ids, r.probe_size
                );
            }
            write_atomic(&metrics_path, log.as_bytes())
        },
        |c: &Checkpoint| {
            last_good = c.clone();
            c.save(&out.join(format!("ckpt-{:06}.ckpt", c.step)))
        },
    );
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            let ckpt = trainer.checkpoint();
            ckpt.save(&out.join("last-good.ckpt"))?;
            let dump = format!(
                "{e}\nlast good step: {}\nlast interval checkpoint: {}\n",
                ckpt.step, last_good.step
            );
            write_atomic(&out.join("diverged.txt"), dump.as_bytes())?;
        }
        return Err(e.into());
    }
    trainer.checkpoint().save(&out.join("model.ckpt"))?;
    Ok(())
}

fn assign(a: AssignArgs) -> CliResult {
    let ckpt = load_ckpt(&a.checkpoint)?;
    let docs = textdata::documents(&load_pairs(&a.docs)?);
    let store = evalkit::build_store(&ckpt, &docs)?;
    write_atomic(&a.out, store.to_index_file().as_bytes())?;
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> CliResult {
    if a.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    let ckpt = load_ckpt(&a.checkpoint)?;
    let store = load_index(&a.index, ckpt.space())?;
    let tokens = ckpt.tokenize(&a.query);
    if all_unknown(&tokens) {
        return Err(usage("query has no known words"));
    }
    let e = genret::model::encode_batch(&ckpt.params, &[tokens])?;
    let beams = ckpt.decoder()?.beam_search(e.row(0), a.beam)?;
    let mut remaining = DEFAULT_LIMIT;
    let mut out = String::new();
    for (rank, b) in beams.iter().enumerate() {
        let keys = store.lookup(&b.id, remaining.min(DEFAULT_LIMIT));
        remaining -= keys.len();
        match a.format {
            OutFormat::Text => {
                let _ = writeln!(
                    out,
                    "{:>2}  {}  {:.4}  {} doc(s)",
                    rank + 1,
                    b.id,
                    b.log_prob,
                    keys.len()
                );
                for k in &keys {
                    let _ = writeln!(out, "      {k}");
                }
            }
            OutFormat::Records => {
                let rec = json!({ "rank": rank + 1, "id": b.id.to_string(), "log_prob": b.log_prob, "docs": keys });
                let _ = writeln!(out, "{rec}");
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if a.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    let ckpt = load_ckpt(&a.checkpoint)?;
    let store = load_index(&a.index, ckpt.space())?;
    let mut pairs = load_pairs(&a.pairs)?;
    if let Some(path) = &a.train_corpus {
        label_new_docs(&ckpt, &store, &load_pairs(path)?, &mut pairs)?;
    }
    let opts = EvalOptions {
        beam: a.beam,
        ..EvalOptions::default()
    };
    let report = evalkit::evaluate(&ckpt, &store, &pairs, &opts)?;
    if let Some(out) = &a.out {
        write_atomic(out, report.to_json().as_bytes())?;
    }
    match a.format {
        OutFormat::Records => print!("{}", report.to_json()),
        OutFormat::Text => print!("{}", report_text(&report)),
    }
    Ok(())
}

/// Sets each pair's split from its document's standing against the training set.
fn label_new_docs(
    ckpt: &Checkpoint,
    store: &IdStore,
    train: &[PairRecord],
    pairs: &mut [PairRecord],
) -> Result<(), Failure> {
    let train_docs = textdata::documents(train);
    let train_keys: HashSet<String> = train_docs.iter().map(|(k, _)| k.clone()).collect();
    let texts: Vec<&str> = train_docs.iter().map(|(_, t)| t.as_str()).collect();
    let mut train_ids: HashSet<DocId> = ckpt.assign_docs(&texts)?.into_iter().collect();
    train_ids.retain(|id| store.posting_size(id) > 0);
    let eval_docs = textdata::documents(pairs);
    let texts: Vec<&str> = eval_docs.iter().map(|(_, t)| t.as_str()).collect();
    let ids = ckpt.assign_docs(&texts)?;
    let assigned: Vec<(String, DocId)> =
        eval_docs.iter().map(|(k, _)| k.clone()).zip(ids).collect();
    let labels = evalkit::classify_new_docs(&train_keys, &train_ids, &assigned);
    let by_key: BTreeMap<&str, String> = assigned
        .iter()
        .zip(&labels)
        .map(|((k, _), l)| (k.as_str(), l.to_string()))
        .collect();
    for p in pairs.iter_mut() {
        p.split = Some(by_key[p.key.as_str()].clone());
    }
    Ok(())
}

fn report_text(r: &Report) -> String {
    let mut s = String::new();
    let row = |s: &mut String, name: &str, m: &evalkit::Metrics| {
        let _ = writeln!(
            s,
            "{name:<14} n={:<6} R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  MRR@10 {:.4}  D/Q {:.1}  empty {}",
            m.queries, m.r1, m.r5, m.r10, m.mrr10, m.dq, m.empty_queries
        );
    };
    row(&mut s, "overall", &r.overall);
    for (name, m) in &r.splits {
        row(&mut s, name, m);
    }
    let _ = writeln!(
        s,
        "beam {}  documents {}  unique ids {}  max posting {}  config {}",
        r.beam,
        r.store.documents,
        r.store.unique_ids,
        r.store.max_posting,
        &r.config_hash[..12.min(r.config_hash.len())]
    );
    s
}

fn source_store(src: &IndexSource) -> Result<IdStore, Failure> {
    let space = match &src.checkpoint {
        Some(p) => load_ckpt(p)?.space(),
        None => IdSpace::default(),
    };
    load_index(&src.index, space)
}

fn analyze(a: AnalyzeArgs) -> CliResult {
    let store = source_store(&a.source)?;
    if let Some(out) = &a.out {
        write_atomic(out, store.histogram_csv().as_bytes())?;
    }
    match a.format {
        OutFormat::Text => {
            println!(
                "documents {}  unique ids {}  max posting {}",
                store.num_docs(),
                store.unique_id_count(),
                store.max_posting()
            );
            if a.out.is_none() {
                print!("{}", store.histogram_csv());
            }
        }
        OutFormat::Records => {
            let hist: BTreeMap<String, usize> = store
                .utilization_histogram()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            let rec = json!({
                "documents": store.num_docs(),
                "unique_ids": store.unique_id_count(),
                "max_posting": store.max_posting(),
                "histogram": hist,
            });
            println!("{rec}");
        }
    }
    Ok(())
}

fn export_tree(a: TreeArgs) -> CliResult {
    if a.max_depth == 0 {
        return Err(usage("--max-depth must be at least 1"));
    }
    let store = source_store(&a.source)?;
    let tree = store.export_prefix_tree(a.max_depth, a.min_posting);
    let mut text = tree.to_json();
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.heldout) {
        return Err(usage("--heldout must be in [0, 1)"));
    }
    let corpus = textdata::synth_corpus(
        a.clusters,
        a.docs_per_cluster,
        a.queries_per_doc,
        a.vocab,
        a.seed,
    )?;
    let (train, held) = textdata::split_heldout(&corpus.records, a.heldout, a.seed);
    textdata::dump_pairs(&a.out.join("pairs.tsv"), &corpus.records, Format::Tsv)?;
    write_atomic(&a.out.join("clusters.tsv"), corpus.sidecar().as_bytes())?;
    textdata::dump_pairs(&a.out.join("train.tsv"), &train, Format::Tsv)?;
    textdata::dump_pairs(&a.out.join("heldout.tsv"), &held, Format::Tsv)?;
    println!(
        "{} pairs, {} train, {} held out",
        corpus.records.len(),
        train.len(),
        held.len()
    );
    Ok(())
}
