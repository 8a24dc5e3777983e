//! Subcommand wiring: normalize -> vocab-train -> pretrain -> finetune ->
//! tag/classify/relate -> evaluate, plus vocab-overlap and corpus-stats.
//!
//! Every run that produces output files also writes a frozen copy of its
//! resolved configuration beside them, and all randomness flows from the
//! `--seed` flags, so reruns with identical inputs are byte-identical
//! (no timestamps are recorded anywhere).

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use mattext::data::{
    load_checkpoint, load_classification, load_conll, load_matching, load_relations,
    save_checkpoint, split, ModelSpec, RelationRecord,
};
use mattext::encoder::{BiLstmConfig, EncoderConfig};
use mattext::eval;
use mattext::normalize::{load_mapping, normalize};
use mattext::presets::{preset, TaskKind, TaskPreset};
use mattext::pretrain::{mlm_train, pack_corpus, tokenize_docs, PretrainConfig};
use mattext::synthetic;
use mattext::tasks::{
    finetune_classifier, finetune_relation, finetune_tagger, FinetuneConfig, RelationModel,
    TaggerModel, TaggerVariant, TextClsModel, ENCODER_LR_GRID,
};
use mattext::wordpiece::{overlap_of_entries, tokenize, train_vocab, Vocabulary};
use mattext::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mattext",
    version,
    about = "Materials-science text pipeline: normalization, WordPiece, MLM pretraining, tagging/relation/classification fine-tuning, entity-level evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Normalize text, one document per line
    Normalize(NormalizeArgs),
    /// Train an uncased WordPiece vocabulary
    VocabTrain(VocabTrainArgs),
    /// Fraction of vocabulary A's entries found in vocabulary B
    VocabOverlap(VocabOverlapArgs),
    /// Document/word/piece counts for a corpus
    CorpusStats(CorpusStatsArgs),
    /// Masked-language-model pretraining
    Pretrain(PretrainArgs),
    /// Fine-tune on a downstream task
    Finetune(FinetuneArgs),
    /// Tag sentences with a fine-tuned tagger (CoNLL two-column output)
    Tag(TagArgs),
    /// Classify texts with a fine-tuned classifier (JSON-lines output)
    Classify(ClassifyArgs),
    /// Classify relations with a fine-tuned relation model (JSON-lines output)
    Relate(RelateArgs),
    /// Score predictions against gold labels
    Evaluate(EvaluateArgs),
    /// Generate the synthetic demo datasets (toy corpora with known structure)
    #[command(hide = true)]
    Synth(SynthArgs),
}

pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.cmd {
        Cmd::Normalize(a) => cmd_normalize(a),
        Cmd::VocabTrain(a) => cmd_vocab_train(a),
        Cmd::VocabOverlap(a) => cmd_vocab_overlap(a),
        Cmd::CorpusStats(a) => cmd_corpus_stats(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Tag(a) => cmd_tag(a),
        Cmd::Classify(a) => cmd_classify(a),
        Cmd::Relate(a) => cmd_relate(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Frozen resolved-config copy written beside a run's outputs.
fn write_run_config(beside: &Path, config: serde_json::Value) -> Result<()> {
    let path = if beside.is_dir() || beside.extension().is_none() {
        beside.join("run-config.json")
    } else {
        beside.with_extension("run.json")
    };
    write_file(&path, &format!("{:#}\n", config))
}

fn vocab_beside_checkpoint(ckpt: &Path) -> Result<Vocabulary> {
    let path = ckpt.join("vocab.txt");
    Vocabulary::load(&path)
}

// ---------------------------------------------------------------------------
// normalize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct NormalizeArgs {
    /// Input file, one document per line
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Mapping TSV (`U+XXXX<TAB>replacement`); built-in table when omitted
    #[arg(long = "map")]
    map: Option<PathBuf>,
}

fn cmd_normalize(a: NormalizeArgs) -> Result<()> {
    let table = load_mapping(a.map.as_deref())?;
    let lines = read_lines(&a.input)?;
    let mut out = String::new();
    for line in &lines {
        out.push_str(&normalize(line, &table));
        out.push('\n');
    }
    write_file(&a.output, &out)?;
    write_run_config(
        &a.output,
        json!({
            "subcommand": "normalize",
            "in": a.input,
            "out": a.output,
            "map": a.map,
            "table_entries": table.len(),
        }),
    )
}

// ---------------------------------------------------------------------------
// vocab-train / vocab-overlap / corpus-stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct VocabTrainArgs {
    /// Normalized corpus, one document per line
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocabulary size, specials included
    #[arg(long)]
    size: usize,
    /// Minimum pair frequency for a merge
    #[arg(long = "min-freq", default_value_t = 2)]
    min_freq: u64,
    #[arg(long = "out")]
    output: PathBuf,
}

fn cmd_vocab_train(a: VocabTrainArgs) -> Result<()> {
    let lines = read_lines(&a.corpus)?;
    let vocab = train_vocab(lines.iter(), a.size, a.min_freq)?;
    vocab.save(&a.output)?;
    write_run_config(
        &a.output,
        json!({
            "subcommand": "vocab-train",
            "corpus": a.corpus,
            "size": a.size,
            "min_freq": a.min_freq,
            "out": a.output,
            "trained_entries": vocab.len(),
        }),
    )
}

#[derive(Args)]
struct VocabOverlapArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn cmd_vocab_overlap(args: VocabOverlapArgs) -> Result<()> {
    let a = read_lines(&args.a)?;
    let b = read_lines(&args.b)?;
    println!("{:.4}", overlap_of_entries(&a, &b));
    Ok(())
}

#[derive(Args)]
struct CorpusStatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Count WordPiece tokens against this vocabulary as well
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn cmd_corpus_stats(a: CorpusStatsArgs) -> Result<()> {
    let lines = read_lines(&a.corpus)?;
    let vocab = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
    let mut per_document = Vec::with_capacity(lines.len());
    let (mut words_total, mut pieces_total) = (0usize, 0usize);
    for line in &lines {
        let words = line.split_whitespace().count();
        words_total += words;
        match &vocab {
            Some(v) => {
                let pieces = tokenize(line, v, mattext::wordpiece::DEFAULT_MAX_WORD_CHARS).len();
                pieces_total += pieces;
                per_document.push(json!({"words": words, "pieces": pieces}));
            }
            None => per_document.push(json!({"words": words})),
        }
    }
    if words_total == 0 {
        return Err(Error::Invalid("corpus contains no words".into()));
    }
    let mut stats = json!({
        "documents": lines.len(),
        "words": words_total,
        "per_document": per_document,
    });
    if vocab.is_some() {
        stats["pieces"] = json!(pieces_total);
    }
    println!("{stats:#}");
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PretrainArgs {
    /// Normalized corpus, one document per line
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// JSON training config; `encoder.vocab_size: 0` takes the vocabulary size
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Held-out document fraction for pseudo-perplexity
    #[arg(long = "val-ratio", default_value_t = 0.15)]
    val_ratio: f64,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg: PretrainConfig = serde_json::from_str(&text)?;
    if cfg.encoder.vocab_size == 0 {
        cfg.encoder.vocab_size = vocab.len();
    } else if cfg.encoder.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "config vocab_size {} does not match vocabulary size {}",
            cfg.encoder.vocab_size,
            vocab.len()
        )));
    }
    let lines = read_lines(&a.corpus)?;
    let docs = tokenize_docs(&lines, &vocab);
    if !(0.0..1.0).contains(&a.val_ratio) {
        return Err(Error::Config("val-ratio must be in [0,1)".into()));
    }
    let (train_docs, val_docs) = if a.val_ratio == 0.0 {
        (docs, Vec::new())
    } else {
        let mut parts = split(docs, &[1.0 - a.val_ratio, a.val_ratio], a.seed)?;
        let val = parts.pop().unwrap();
        (parts.pop().unwrap(), val)
    };
    let train_packed = pack_corpus(&train_docs, cfg.max_len, cfg.cls_prefix)?;
    let val_packed = if val_docs.is_empty() {
        Vec::new()
    } else {
        pack_corpus(&val_docs, cfg.max_len, cfg.cls_prefix)?
    };

    let out = mlm_train(&train_packed, &val_packed, &cfg, a.seed)?;

    std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut trace = String::new();
    for rec in &out.trace {
        trace.push_str(&serde_json::to_string(rec)?);
        trace.push('\n');
    }
    write_file(&a.output.join("trace.jsonl"), &trace)?;
    let ckpt = a.output.join("checkpoint");
    save_checkpoint(&ckpt, &out.model.spec(), &out.model.params)?;
    vocab.save(&ckpt.join("vocab.txt"))?;
    write_run_config(
        &a.output,
        json!({
            "subcommand": "pretrain",
            "corpus": a.corpus,
            "vocab": a.vocab,
            "seed": a.seed,
            "val_ratio": a.val_ratio,
            "train_sequences": train_packed.len(),
            "validation_sequences": val_packed.len(),
            "steps_run": out.steps_run,
            "config": serde_json::to_value(&cfg)?,
        }),
    )?;
    if let Some(step) = out.diverged_at {
        return Err(Error::Numeric(format!(
            "loss diverged at step {step}; checkpoint holds the last good snapshot"
        )));
    }
    println!("pretrained {} steps -> {}", out.steps_run, ckpt.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FinetuneArgs {
    /// ner | rc | cls
    #[arg(long)]
    task: String,
    /// Tagger head for ner: linear | crf | bilstm_crf
    #[arg(long, default_value = "linear")]
    arch: String,
    /// Directory with the task files (see README for the expected names)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to initialize the encoder from (fresh heads)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Vocabulary for training from scratch (ignored when --init is given)
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// matscholar | sofc | sofc-slot | mspt | glass
    #[arg(long)]
    preset: String,
    /// Training seeds; metrics are averaged across them
    #[arg(long, num_args = 1.., default_values_t = [1u64, 2, 3])]
    seed: Vec<u64>,
    #[arg(long = "out")]
    output: PathBuf,
    /// JSON overrides: encoder config and FinetuneConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "encoder-lr")]
    encoder_lr: Option<f64>,
    #[arg(long = "head-lr")]
    head_lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sweep the encoder rate over {2e-5, 3e-5, 5e-5}, keeping the best mean
    #[arg(long = "sweep-encoder-lr", default_value_t = false)]
    sweep_encoder_lr: bool,
    /// Seed for splitting single-file classification data
    #[arg(long = "split-seed", default_value_t = 0)]
    split_seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneFileConfig {
    encoder: Option<EncoderConfig>,
    bilstm: Option<BiLstmConfig>,
    head_lr: Option<f64>,
    encoder_lr: Option<f64>,
    batch_size: Option<usize>,
    warmup_ratio: Option<f64>,
    epochs: Option<usize>,
    weight_decay: Option<f64>,
}

struct SeedRun {
    seed: u64,
    best_epoch: usize,
    validation_score: f64,
    test_score: Option<f64>,
    spec: ModelSpec,
    params: mattext::encoder::ParamMap,
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let task_preset = preset(&a.preset)?;
    let expected = match task_preset.task {
        TaskKind::Ner => "ner",
        TaskKind::Relation => "rc",
        TaskKind::Classification => "cls",
    };
    if a.task != expected {
        return Err(Error::Config(format!(
            "preset `{}` is a {expected} task, got --task {}",
            a.preset, a.task
        )));
    }

    let file_cfg: FinetuneFileConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => FinetuneFileConfig::default(),
    };

    // Vocabulary and encoder config: checkpoint first, flags otherwise.
    let (vocab, init_params, encoder_cfg) = match &a.init {
        Some(ckpt) => {
            let vocab = vocab_beside_checkpoint(ckpt)?;
            let (meta, params) = load_checkpoint(ckpt)?;
            let cfg = meta.model.encoder().clone();
            (vocab, Some(params), cfg)
        }
        None => {
            let vocab_path = a.vocab.as_ref().ok_or_else(|| {
                Error::Config("training from scratch needs --vocab".into())
            })?;
            let vocab = Vocabulary::load(vocab_path)?;
            let cfg = file_cfg
                .encoder
                .clone()
                .unwrap_or_else(|| EncoderConfig::desk_default(vocab.len()));
            (vocab, None, cfg)
        }
    };
    if encoder_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} does not match vocabulary size {}",
            encoder_cfg.vocab_size,
            vocab.len()
        )));
    }

    let mut ft = FinetuneConfig {
        epochs: task_preset.epochs,
        ..FinetuneConfig::default()
    };
    if let Some(v) = file_cfg.head_lr {
        ft.head_lr = v;
    }
    if let Some(v) = file_cfg.encoder_lr {
        ft.encoder_lr = v;
    }
    if let Some(v) = file_cfg.batch_size {
        ft.batch_size = v;
    }
    if let Some(v) = file_cfg.warmup_ratio {
        ft.warmup_ratio = v;
    }
    if let Some(v) = file_cfg.epochs {
        ft.epochs = v;
    }
    if let Some(v) = file_cfg.weight_decay {
        ft.weight_decay = v;
    }
    if let Some(v) = a.encoder_lr {
        ft.encoder_lr = v;
    }
    if let Some(v) = a.head_lr {
        ft.head_lr = v;
    }
    if let Some(v) = a.batch_size {
        ft.batch_size = v;
    }
    if let Some(v) = a.epochs {
        ft.epochs = v;
    }

    let run_all = |cfg: &FinetuneConfig| -> Result<Vec<SeedRun>> {
        a.seed
            .iter()
            .map(|&seed| {
                run_one_seed(
                    &task_preset,
                    &a.arch,
                    &a.data,
                    &vocab,
                    &encoder_cfg,
                    file_cfg.bilstm.clone(),
                    init_params.as_ref(),
                    cfg,
                    seed,
                    a.split_seed,
                )
            })
            .collect()
    };

    let (runs, chosen_lr) = if a.sweep_encoder_lr {
        let mut best: Option<(f64, f64, Vec<SeedRun>)> = None;
        for &lr in &ENCODER_LR_GRID {
            let cfg = FinetuneConfig {
                encoder_lr: lr,
                ..ft.clone()
            };
            let runs = run_all(&cfg)?;
            let mean =
                runs.iter().map(|r| r.validation_score).sum::<f64>() / runs.len() as f64;
            if best.as_ref().map(|(_, b, _)| mean > *b).unwrap_or(true) {
                best = Some((lr, mean, runs));
            }
        }
        let (lr, _, runs) = best.expect("non-empty grid");
        (runs, lr)
    } else {
        (run_all(&ft)?, ft.encoder_lr)
    };
    ft.encoder_lr = chosen_lr;

    std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut seed_metrics = Vec::new();
    for run in &runs {
        let dir = a.output.join(format!("seed-{}", run.seed)).join("checkpoint");
        save_checkpoint(&dir, &run.spec, &run.params)?;
        vocab.save(&dir.join("vocab.txt"))?;
        seed_metrics.push(json!({
            "seed": run.seed,
            "best_epoch": run.best_epoch,
            "validation_score": run.validation_score,
            "test_score": run.test_score,
        }));
    }
    let mean_val =
        runs.iter().map(|r| r.validation_score).sum::<f64>() / runs.len() as f64;
    let test_scores: Vec<f64> = runs.iter().filter_map(|r| r.test_score).collect();
    let mut metrics = json!({
        "preset": a.preset,
        "task": a.task,
        "arch": a.arch,
        "encoder_lr": ft.encoder_lr,
        "seeds": seed_metrics,
        "mean_validation_score": mean_val,
    });
    if test_scores.len() == runs.len() {
        metrics["mean_test_score"] =
            json!(test_scores.iter().sum::<f64>() / test_scores.len() as f64);
    }
    write_file(&a.output.join("metrics.json"), &format!("{metrics:#}\n"))?;
    write_run_config(
        &a.output,
        json!({
            "subcommand": "finetune",
            "task": a.task,
            "arch": a.arch,
            "data": a.data,
            "init": a.init,
            "preset": a.preset,
            "seeds": a.seed,
            "sweep_encoder_lr": a.sweep_encoder_lr,
            "split_seed": a.split_seed,
            "finetune": serde_json::to_value(&ft)?,
            "encoder": serde_json::to_value(&encoder_cfg)?,
        }),
    )?;
    println!("mean validation score {mean_val:.4} -> {}", a.output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one_seed(
    task_preset: &TaskPreset,
    arch: &str,
    data: &Path,
    vocab: &Vocabulary,
    encoder_cfg: &EncoderConfig,
    bilstm: Option<BiLstmConfig>,
    init: Option<&mattext::encoder::ParamMap>,
    ft: &FinetuneConfig,
    seed: u64,
    split_seed: u64,
) -> Result<SeedRun> {
    match task_preset.task {
        TaskKind::Ner => {
            let scheme = task_preset.scheme()?;
            let types: Vec<String> = scheme.entity_types().to_vec();
            let train = load_conll(&data.join("train.conll"), Some(&types))?;
            let dev = load_conll(&data.join("dev.conll"), Some(&types))?;
            let test_path = data.join("test.conll");
            let test = if test_path.exists() {
                Some(load_conll(&test_path, Some(&types))?)
            } else {
                None
            };
            let variant = TaggerVariant::parse(arch)?;
            let bilstm = match variant {
                TaggerVariant::BilstmCrf => bilstm,
                _ => None,
            };
            let mut model =
                TaggerModel::build(variant, encoder_cfg.clone(), scheme, bilstm, seed)?;
            if let Some(src) = init {
                load_matching(&mut model.params, src)?;
            }
            let (tuned, outcome) = finetune_tagger(&model, &train, &dev, vocab, ft, seed)?;
            let macro_types = task_preset.macro_type_names();
            let test_score = match &test {
                Some(t) => Some(
                    tuned
                        .validation_report(t, vocab, macro_types.as_deref())?
                        .micro_f1,
                ),
                None => None,
            };
            Ok(SeedRun {
                seed,
                best_epoch: outcome.best_epoch,
                validation_score: outcome.best_score,
                test_score,
                spec: tuned.spec(),
                params: tuned.params,
            })
        }
        TaskKind::Relation => {
            let train = load_relations(&data.join("train.jsonl"))?;
            let dev = load_relations(&data.join("dev.jsonl"))?;
            let test_path = data.join("test.jsonl");
            let test = if test_path.exists() {
                Some(load_relations(&test_path)?)
            } else {
                None
            };
            let mut model = RelationModel::build(
                encoder_cfg.clone(),
                task_preset.relation_label_names(),
                seed,
            )?;
            if let Some(src) = init {
                load_matching(&mut model.params, src)?;
            }
            let (tuned, outcome) = finetune_relation(&model, &train, &dev, vocab, ft, seed)?;
            let test_score = match &test {
                Some(t) => {
                    let gold: Vec<String> = t.iter().map(|r| r.label.clone()).collect();
                    let mut pred = Vec::with_capacity(t.len());
                    for r in t {
                        pred.push(tuned.classify(r, vocab)?.0);
                    }
                    Some(eval::multiclass_f1(&gold, &pred)?.micro_f1)
                }
                None => None,
            };
            Ok(SeedRun {
                seed,
                best_epoch: outcome.best_epoch,
                validation_score: outcome.best_score,
                test_score,
                spec: tuned.spec(),
                params: tuned.params,
            })
        }
        TaskKind::Classification => {
            let single = data.join("data.jsonl");
            let (train, dev, test) = if single.exists() {
                let all = load_classification(&single)?;
                let ratios = task_preset
                    .split_ratios
                    .unwrap_or([0.6, 0.2, 0.2]);
                let mut parts = split(all, &ratios.to_vec(), split_seed)?;
                let test = parts.pop().unwrap();
                let dev = parts.pop().unwrap();
                let train = parts.pop().unwrap();
                (train, dev, Some(test))
            } else {
                let train = load_classification(&data.join("train.jsonl"))?;
                let dev = load_classification(&data.join("dev.jsonl"))?;
                let test_path = data.join("test.jsonl");
                let test = if test_path.exists() {
                    Some(load_classification(&test_path)?)
                } else {
                    None
                };
                (train, dev, test)
            };
            let mut model =
                TextClsModel::build(encoder_cfg.clone(), task_preset.num_classes, seed)?;
            if let Some(src) = init {
                load_matching(&mut model.params, src)?;
            }
            let (tuned, outcome) =
                finetune_classifier(&model, &train, &dev, vocab, ft, seed)?;
            let test_score = match &test {
                Some(t) => {
                    let gold: Vec<u8> = t.iter().map(|r| r.label as u8).collect();
                    let mut pred = Vec::with_capacity(t.len());
                    for r in t {
                        pred.push(tuned.classify(&r.text, vocab)?.0 as u8);
                    }
                    Some(eval::binary_f1(&gold, &pred)?)
                }
                None => None,
            };
            Ok(SeedRun {
                seed,
                best_epoch: outcome.best_epoch,
                validation_score: outcome.best_score,
                test_score,
                spec: tuned.spec(),
                params: tuned.params,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// tag / classify / relate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TagArgs {
    /// Checkpoint directory of a fine-tuned tagger
    #[arg(long)]
    model: PathBuf,
    /// Input sentences, one per line, whitespace-tokenized
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file (stdout when omitted)
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn cmd_tag(a: TagArgs) -> Result<()> {
    let vocab = vocab_beside_checkpoint(&a.model)?;
    let (meta, params) = load_checkpoint(&a.model)?;
    let model = TaggerModel::from_spec(&meta.model, params)?;
    let mut out = String::new();
    for line in read_lines(&a.input)? {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            continue;
        }
        let tags = model.tag_names(&tokens, &vocab)?;
        for (tok, tag) in tokens.iter().zip(&tags) {
            out.push_str(&format!("{tok}\t{tag}\n"));
        }
        out.push('\n');
    }
    emit(&a.output, &out)?;
    if let Some(path) = &a.output {
        write_run_config(
            path,
            json!({"subcommand": "tag", "model": a.model, "in": a.input, "out": path}),
        )?;
    }
    Ok(())
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input texts, one per line
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let vocab = vocab_beside_checkpoint(&a.model)?;
    let (meta, params) = load_checkpoint(&a.model)?;
    let model = TextClsModel::from_spec(&meta.model, params)?;
    let mut out = String::new();
    for line in read_lines(&a.input)? {
        if line.trim().is_empty() {
            continue;
        }
        let (label, probs) = model.classify(&line, &vocab)?;
        out.push_str(&serde_json::to_string(&json!({
            "text": line,
            "label": label,
            "probs": probs,
        }))?);
        out.push('\n');
    }
    emit(&a.output, &out)?;
    if let Some(path) = &a.output {
        write_run_config(
            path,
            json!({"subcommand": "classify", "model": a.model, "in": a.input, "out": path}),
        )?;
    }
    Ok(())
}

#[derive(Args)]
struct RelateArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON-lines `{tokens, head, tail}` records (a `label` field is echoed)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RelateInput {
    tokens: Vec<String>,
    head: (usize, usize),
    tail: (usize, usize),
    #[serde(default)]
    label: Option<String>,
}

fn cmd_relate(a: RelateArgs) -> Result<()> {
    let vocab = vocab_beside_checkpoint(&a.model)?;
    let (meta, params) = load_checkpoint(&a.model)?;
    let model = RelationModel::from_spec(&meta.model, params)?;
    let origin = a.input.display().to_string();
    let mut out = String::new();
    for (lineno, line) in read_lines(&a.input)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RelateInput = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&origin, lineno + 1, e.to_string()))?;
        let record = RelationRecord {
            tokens: rec.tokens,
            head: rec.head,
            tail: rec.tail,
            label: rec.label.clone().unwrap_or_default(),
        };
        record
            .validate()
            .map_err(|e| Error::parse(&origin, lineno + 1, e.to_string()))?;
        let (label, probs) = model.classify(&record, &vocab)?;
        let mut obj = json!({"label": label, "probs": probs});
        if let Some(gold) = rec.label {
            obj["gold"] = json!(gold);
        }
        out.push_str(&serde_json::to_string(&obj)?);
        out.push('\n');
    }
    emit(&a.output, &out)?;
    if let Some(path) = &a.output {
        write_run_config(
            path,
            json!({"subcommand": "relate", "model": a.model, "in": a.input, "out": path}),
        )?;
    }
    Ok(())
}

fn emit(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, content),
        None => {
            std::io::stdout()
                .write_all(content.as_bytes())
                .map_err(|e| Error::io("stdout", e))?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    /// ner | rc | cls
    #[arg(long)]
    task: String,
    /// Gold file: CoNLL for ner, one label per line for rc/cls
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Fixed macro-average type list for ner, one type per line
    #[arg(long)]
    types: Option<PathBuf>,
    /// Reject BIO sequences needing the I-after-O repair instead of fixing them
    #[arg(long, default_value_t = false)]
    strict: bool,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    match a.task.as_str() {
        "ner" => {
            let gold = load_conll(&a.gold, None)?;
            let pred = load_conll(&a.pred, None)?;
            let gold_tags: Vec<Vec<String>> = gold.iter().map(|s| s.tags.clone()).collect();
            let pred_tags: Vec<Vec<String>> = pred.iter().map(|s| s.tags.clone()).collect();
            if a.strict {
                for sent in gold_tags.iter().chain(&pred_tags) {
                    eval::decode_bio(sent, true)?;
                }
            }
            let macro_types = match &a.types {
                Some(p) => Some(
                    read_lines(p)?
                        .into_iter()
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let report = eval::entity_f1(&gold_tags, &pred_tags, macro_types.as_deref())?;
            print!("{}", eval::render_report(&report));
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        "rc" => {
            let gold = read_lines(&a.gold)?;
            let pred = read_lines(&a.pred)?;
            let report = eval::multiclass_f1(&gold, &pred)?;
            print!("{}", eval::render_report(&report));
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        "cls" => {
            let parse = |path: &Path| -> Result<Vec<u8>> {
                read_lines(path)?
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| {
                        l.trim().parse::<u8>().map_err(|_| {
                            Error::parse(
                                path.display().to_string(),
                                i + 1,
                                format!("expected 0 or 1, found `{l}`"),
                            )
                        })
                    })
                    .collect()
            };
            let f1 = eval::binary_f1(&parse(&a.gold)?, &parse(&a.pred)?)?;
            println!("binary_f1 {f1:.4}");
            println!("{}", serde_json::to_string(&json!({ "binary_f1": f1 }))?);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown evaluation task `{other}` (expected ner|rc|cls)"
            )))
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth (hidden helper for demos and smoke tests)
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// copy-corpus | ner | rc | cls
    #[arg(long)]
    kind: String,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 30)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entity type name to emit for ner data (e.g. Material for the sofc preset)
    #[arg(long = "entity-type", default_value = "ENT")]
    entity_type: String,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut out = String::new();
    match a.kind.as_str() {
        "copy-corpus" => {
            for doc in synthetic::copy_corpus(a.count, a.length, a.seed) {
                out.push_str(&doc);
                out.push('\n');
            }
        }
        "ner" => {
            for s in synthetic::tagging_dataset(a.count, a.length, 0.0, a.seed) {
                for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                    let tag = tag.replace("ENT", &a.entity_type);
                    out.push_str(&format!("{tok}\t{tag}\n"));
                }
                out.push('\n');
            }
        }
        "rc" => {
            for r in synthetic::relation_dataset(a.count, a.length, a.seed) {
                out.push_str(&serde_json::to_string(&r)?);
                out.push('\n');
            }
        }
        "cls" => {
            for r in synthetic::classification_dataset(a.count, a.length, a.seed) {
                out.push_str(&serde_json::to_string(&r)?);
                out.push('\n');
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected copy-corpus|ner|rc|cls)"
            )))
        }
    }
    write_file(&a.output, &out)
}
