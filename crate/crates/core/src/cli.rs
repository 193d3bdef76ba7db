//! Command implementations behind the `birel` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{load_dataset, Corpus, CorpusStats, Example, RelationVocab, SpanTriple};
use crate::decode::{Directions, Provenance};
use crate::encoder::TokenVocab;
use crate::error::{Error, Result};
use crate::metrics::{report, EvalReport, MatchStandard, Prf};
use crate::synthetic;
use crate::tokenize::Tokenizer;
use crate::train::{predict_examples, train_loop, EpochRecord, TrainSetup, TrainSummary};

#[derive(Debug, Parser)]
#[command(name = "birel", version, about = "Bidirectional relation triple extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Both,
    S2o,
    O2s,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset (JSON lines) for smoke tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        sentences: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Tokenize, align and cache dataset splits; write statistics.
    Prepare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Raw split as NAME=PATH; replaces `data.raw` from the config when given.
        #[arg(long = "input", value_name = "NAME=PATH")]
        inputs: Vec<String>,
        /// Output directory; defaults to `data.prepared`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the prepared `train` split, selecting on `valid`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        no_contrastive: bool,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        #[arg(long)]
        no_relation_prediction: bool,
        /// Output directory; defaults to `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract triples with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared corpus to run on.
        #[arg(long, conflicts_with = "text")]
        corpus: Option<PathBuf>,
        /// Plain text file, one sentence per line.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a prepared corpus.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the corpus' own match standard.
        #[arg(long)]
        standard: Option<MatchStandard>,
        /// Report JSON path; the table is also written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every ablation variant and print a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::MalformedRecord { .. }
        | Error::InvalidSpan { .. }
        | Error::UnknownRelation(_)
        | Error::IdMismatch(_)
        | Error::EmptyInput(_)
        | Error::TooLong { .. }
        | Error::Json(_) => 3,
        _ => 4,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            sentences,
            seed,
        } => synth(&out, sentences, seed),
        Command::Prepare {
            config,
            inputs,
            out,
        } => {
            let mut cfg = config.load(&[])?;
            if !inputs.is_empty() {
                cfg.data.raw.clear();
                for spec in &inputs {
                    let (name, path) = spec
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("--input `{spec}` is not NAME=PATH")))?;
                    cfg.data.raw.insert(name.to_string(), PathBuf::from(path));
                }
            }
            if let Some(out) = out {
                cfg.data.prepared = out;
            }
            let stats = prepare(&cfg)?;
            for (split, s) in &stats {
                println!(
                    "{split}: {} sentences, {} triples (Normal {}, SEO {}, EPO {}), {} malformed, {} skipped",
                    s.sentences, s.triples, s.normal, s.seo, s.epo, s.load.malformed, s.load.skipped_missing_entity
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            no_contrastive,
            direction,
            no_relation_prediction,
            out,
        } => {
            let mut extra = Vec::new();
            if no_contrastive {
                extra.push("contrastive.enabled=false".to_string());
            }
            match direction {
                Some(DirectionArg::S2o) => extra.extend(["direction.s2o=true".into(), "direction.o2s=false".into()]),
                Some(DirectionArg::O2s) => extra.extend(["direction.s2o=false".into(), "direction.o2s=true".into()]),
                Some(DirectionArg::Both) => extra.extend(["direction.s2o=true".into(), "direction.o2s=true".into()]),
                None => {}
            }
            if no_relation_prediction {
                extra.push("relation_prediction.enabled=false".to_string());
            }
            let mut cfg = config.load(&extra)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = train(&cfg)?;
            println!(
                "trained {} epochs; best valid F1 {:.4} at epoch {}; checkpoint {}",
                outcome.summary.epochs,
                outcome.summary.best_valid.f1,
                outcome.summary.best_epoch,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Predict {
            checkpoint,
            corpus,
            text,
            out,
        } => {
            let n = match (corpus, text) {
                (Some(c), None) => predict_corpus(&checkpoint, &c, &out)?,
                (None, Some(t)) => predict_text(&checkpoint, &t, &out)?,
                _ => return Err(Error::Config("give exactly one of --corpus or --text".into())),
            };
            println!("wrote {n} predictions to {}", out.display());
            Ok(())
        }
        Command::Eval {
            predictions,
            corpus,
            standard,
            out,
        } => {
            let rep = eval(&predictions, &corpus, standard, out.as_deref())?;
            print!("{}", rep.render());
            Ok(())
        }
        Command::Ablate { config, out } => {
            let mut cfg = config.load(&[])?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let rows = ablate(&cfg)?;
            print!("{}", render_ablation(&rows));
            Ok(())
        }
    }
}

pub fn synth(out: &Path, sentences: usize, seed: u64) -> Result<()> {
    let examples = synthetic::generate(sentences, seed);
    write_text(out, &synthetic::to_json_lines(&examples))
}

#[derive(Serialize)]
struct StatsFile<'a> {
    run_config: &'a RunConfig,
    split: &'a str,
    source: &'a Path,
    stats: &'a CorpusStats,
}

/// Prepares every split in `data.raw` under a shared relation vocabulary.
pub fn prepare(cfg: &RunConfig) -> Result<BTreeMap<String, CorpusStats>> {
    if cfg.data.raw.is_empty() {
        return Err(Error::Config("no input splits (set data.raw.<split> or pass --input)".into()));
    }
    let mut datasets = BTreeMap::new();
    for (split, path) in &cfg.data.raw {
        datasets.insert(split.clone(), load_dataset(path, cfg.data.standard, true)?);
    }
    let vocab = RelationVocab::from_labels(
        datasets
            .values()
            .flat_map(|d| d.vocab.labels().iter().cloned())
            .collect::<Vec<_>>(),
    );
    std::fs::create_dir_all(&cfg.data.prepared).map_err(|e| Error::io(&cfg.data.prepared, e))?;
    let tokenizer: &dyn Tokenizer = &cfg.data.tokenizer;
    let mut all = BTreeMap::new();
    for (split, ds) in &datasets {
        let (corpus, align) = Corpus::align(ds, &vocab, tokenizer, cfg.encoder.max_len)?;
        corpus.save(&cfg.data.prepared_split(split))?;
        let mut stats = corpus.stats();
        stats.load = ds.report.clone();
        stats.align = align;
        write_json(
            &cfg.data.prepared.join(format!("{split}.stats.json")),
            &StatsFile {
                run_config: cfg,
                split,
                source: &cfg.data.raw[split],
                stats: &stats,
            },
        )?;
        all.insert(split.clone(), stats);
    }
    Ok(all)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Option<Corpus>> {
    let path = cfg.data.prepared_split(split);
    if path.exists() {
        Ok(Some(Corpus::load(&path)?))
    } else {
        Ok(None)
    }
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    run_config: &'a RunConfig,
    relations: &'a RelationVocab,
    train_sentences: usize,
    valid_sentences: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_split(cfg, "train")?.ok_or_else(|| {
        Error::Config(format!(
            "missing prepared train split {}",
            cfg.data.prepared_split("train").display()
        ))
    })?;
    let valid = match load_split(cfg, "valid")? {
        Some(v) => v.remap(&train.vocab)?,
        None => {
            log::warn!("no prepared valid split; selecting on the training split");
            train.clone()
        }
    };
    let tokens = TokenVocab::from_examples(&train.examples);
    let (store, model) = checkpoint::build_model(cfg, &train.vocab, &tokens)?;

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("run_config.toml"), &cfg.to_toml()?)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = create(&log_path)?;
    let header = LogHeader {
        run_config: cfg,
        relations: &train.vocab,
        train_sentences: train.examples.len(),
        valid_sentences: valid.examples.len(),
    };
    serde_json::to_writer(&mut log_file, &header)?;
    writeln!(log_file).map_err(|e| Error::io(&log_path, e))?;

    let setup = TrainSetup {
        model: &model,
        store: &store,
        tokens: &tokens,
        train: &train.examples,
        valid: &valid.examples,
        config: &cfg.train,
        contrastive: &cfg.contrastive,
        decode: &cfg.decode,
        standard: cfg.data.standard,
        dump_path: Some(out.join("nonfinite_batch.json")),
    };
    let summary = train_loop(&setup, &mut |r: &EpochRecord| {
        serde_json::to_writer(&mut log_file, r)?;
        writeln!(log_file).map_err(|e| Error::io(&log_path, e))?;
        log_file.flush().map_err(|e| Error::io(&log_path, e))
    })?;

    let ck = out.join("model.safetensors");
    checkpoint::save(&ck, &store, cfg, &train.vocab, &tokens)?;
    #[derive(Serialize)]
    struct SummaryFile<'a> {
        run_config: &'a RunConfig,
        summary: &'a TrainSummary,
    }
    write_json(
        &out.join("summary.json"),
        &SummaryFile {
            run_config: cfg,
            summary: &summary,
        },
    )?;
    Ok(TrainOutcome {
        summary,
        checkpoint: ck,
        log: log_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanOut {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleOut {
    pub subject: SpanOut,
    pub relation: String,
    pub object: SpanOut,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: usize,
    pub text: String,
    pub triples: Vec<TripleOut>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionHeader {
    run_config: RunConfig,
    checkpoint: PathBuf,
}

fn write_predictions(
    ck: &checkpoint::Checkpoint,
    ck_path: &Path,
    examples: &[Example],
    out: &Path,
) -> Result<usize> {
    let preds = predict_examples(&ck.model, &ck.tokens, examples, &ck.config.decode)?;
    let mut w = create(out)?;
    let header = PredictionHeader {
        run_config: ck.config.clone(),
        checkpoint: ck_path.to_path_buf(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w).map_err(|e| Error::io(out, e))?;
    for (id, (ex, p)) in examples.iter().zip(&preds).enumerate() {
        let span = |s: crate::corpus::Span| SpanOut {
            start: s.start,
            end: s.end,
            text: ex.surface(s).to_string(),
        };
        let triples = p
            .iter()
            .map(|(t, prov)| TripleOut {
                subject: span(t.subject),
                relation: ck.relations.label(t.relation).unwrap_or_default().to_string(),
                object: span(t.object),
                provenance: *prov,
            })
            .collect();
        let line = PredictionLine {
            id,
            text: ex.text.clone(),
            triples,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w).map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(preds.len())
}

pub fn predict_corpus(ck_path: &Path, corpus: &Path, out: &Path) -> Result<usize> {
    let ck = checkpoint::load(ck_path)?;
    let corpus = Corpus::load(corpus)?;
    if let Some(extra) = corpus.vocab.labels().iter().find(|l| ck.relations.id(l).is_none()) {
        return Err(Error::UnknownRelation(format!(
            "{extra} (corpus relation vocabulary does not match the checkpoint)"
        )));
    }
    let corpus = corpus.remap(&ck.relations)?;
    write_predictions(&ck, ck_path, &corpus.examples, out)
}

pub fn predict_text(ck_path: &Path, text: &Path, out: &Path) -> Result<usize> {
    let ck = checkpoint::load(ck_path)?;
    let f = File::open(text).map_err(|e| Error::io(text, e))?;
    let tokenizer = ck.config.data.tokenizer;
    let max_len = ck.config.encoder.max_len;
    let mut examples = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(text, e))?;
        let mut toks = tokenizer.tokenize(&line);
        if toks.len() > max_len {
            log::warn!("truncating a {}-token sentence to {max_len}", toks.len());
            toks.truncate(max_len);
        }
        examples.push(Example {
            text: line.clone(),
            tokens: toks.iter().map(|t| t.text.clone()).collect(),
            offsets: toks.iter().map(|t| (t.start, t.end)).collect(),
            triples: Vec::new(),
            overlap: None,
            bucket: None,
        });
    }
    write_predictions(&ck, ck_path, &examples, out)
}

/// Reads a predictions file; returns the producing config and the lines.
pub fn read_predictions(path: &Path) -> Result<(Option<RunConfig>, Vec<PredictionLine>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut config = None;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<PredictionHeader>(&line) {
                config = Some(h.run_config);
                continue;
            }
        }
        lines.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok((config, lines))
}

/// Converts prediction lines to id-aligned triple lists, checking ids and texts.
pub fn align_predictions(
    lines: &[PredictionLine],
    corpus: &Corpus,
) -> Result<Vec<Vec<SpanTriple>>> {
    let n = corpus.examples.len();
    let mut offenders = BTreeSet::new();
    let mut seen = vec![false; n];
    for l in lines {
        if l.id >= n || seen[l.id] || corpus.examples[l.id].text != l.text {
            offenders.insert(l.id.to_string());
        } else {
            seen[l.id] = true;
        }
    }
    for (i, s) in seen.iter().enumerate() {
        if !s && !lines.iter().any(|l| l.id == i) {
            offenders.insert(format!("{i} (missing)"));
        }
    }
    if !offenders.is_empty() {
        let list: Vec<String> = offenders.into_iter().collect();
        return Err(Error::IdMismatch(list.join(", ")));
    }
    let mut out = vec![Vec::new(); n];
    for l in lines {
        for t in &l.triples {
            let relation = corpus
                .vocab
                .id(&t.relation)
                .ok_or_else(|| Error::UnknownRelation(t.relation.clone()))?;
            out[l.id].push(SpanTriple::new(
                crate::corpus::Span::new(t.subject.start, t.subject.end),
                relation,
                crate::corpus::Span::new(t.object.start, t.object.end),
            ));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    run_config: Option<&'a RunConfig>,
    predictions: &'a Path,
    corpus: &'a Path,
    report: &'a EvalReport,
}

pub fn eval(
    predictions: &Path,
    corpus_path: &Path,
    standard: Option<MatchStandard>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let corpus = Corpus::load(corpus_path)?;
    let (config, lines) = read_predictions(predictions)?;
    let preds = align_predictions(&lines, &corpus)?;
    let rep = report(&preds, &corpus.examples, standard.unwrap_or(corpus.standard))?;
    if let Some(out) = out {
        write_json(
            out,
            &ReportFile {
                run_config: config.as_ref(),
                predictions,
                corpus: corpus_path,
                report: &rep,
            },
        )?;
        let mut table = String::new();
        if let Some(c) = &config {
            let _ = writeln!(table, "# run_config: {}", serde_json::to_string(c)?);
        }
        table.push_str(&rep.render());
        write_text(&out.with_extension("txt"), &table)?;
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub run_config: RunConfig,
    pub scores: Prf,
    pub best_epoch: usize,
}

/// The ablation matrix: the full model and one row per removed component.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows = vec![("full".to_string(), base.clone())];
    let mut c = base.clone();
    c.contrastive.enabled = false;
    rows.push(("- contrastive".into(), c));
    let mut c = base.clone();
    c.direction = Directions::S2O;
    rows.push(("- direction o2s".into(), c));
    let mut c = base.clone();
    c.direction = Directions::O2S;
    rows.push(("- direction s2o".into(), c));
    let mut c = base.clone();
    c.relation_prediction.enabled = false;
    rows.push(("- relation prediction".into(), c));
    rows
}

pub fn ablate(base: &RunConfig) -> Result<Vec<AblationRow>> {
    let eval_split = ["test", "valid", "train"]
        .into_iter()
        .find(|s| base.data.prepared_split(s).exists())
        .ok_or_else(|| Error::Config("no prepared split to evaluate on".into()))?;
    let mut rows = Vec::new();
    for (i, (name, mut cfg)) in ablation_variants(base).into_iter().enumerate() {
        cfg.out_dir = base.out_dir.join(format!("variant{i}"));
        log::info!("ablation `{name}` -> {}", cfg.out_dir.display());
        let outcome = train(&cfg)?;
        let preds = cfg.out_dir.join(format!("{eval_split}.predictions.jsonl"));
        predict_corpus(&outcome.checkpoint, &cfg.data.prepared_split(eval_split), &preds)?;
        let rep = eval(
            &preds,
            &cfg.data.prepared_split(eval_split),
            Some(cfg.data.standard),
            Some(&cfg.out_dir.join(format!("{eval_split}.report.json"))),
        )?;
        rows.push(AblationRow {
            name,
            run_config: cfg,
            scores: rep.overall,
            best_epoch: outcome.summary.best_epoch,
        });
    }
    #[derive(Serialize)]
    struct AblationFile<'a> {
        run_config: &'a RunConfig,
        split: &'a str,
        rows: &'a [AblationRow],
    }
    write_json(
        &base.out_dir.join("ablation.json"),
        &AblationFile {
            run_config: base,
            split: eval_split,
            rows: &rows,
        },
    )?;
    write_text(&base.out_dir.join("ablation.txt"), &render_ablation(&rows))?;
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>7} {:>7} {:>7}", "variant", "Prec.", "Rec.", "F1");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7}",
            r.name,
            pct(r.scores.precision),
            pct(r.scores.recall),
            pct(r.scores.f1)
        );
    }
    out
}
