use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lexlm::corpus::synth::{generate_synthetic_corpus, kind_counts};
use lexlm::corpus::{
    ingest_corpus, read_frequency_tsv, read_jsonl, sentence_length_report, split_all, word_frequencies,
    write_frequency_tsv, write_jsonl, Snippet, TokenizeMode,
};
use lexlm::encoder::{param_count, EncodedInput, EncoderParams};
use lexlm::eval::{aggregate, prediction_ms, run_protocol, split_grouped, test_f1, ProtocolSpec, RunResult, SplitSpec};
use lexlm::objectives::{distill_train, init_student, pretrain as run_pretrain, PretrainData};
use lexlm::tasks::schema::{NerAnnotation, ObligationAnnotation, RetrievalAnnotation, SimilarityAnnotation};
use lexlm::tasks::{
    answer_groups, build_ner_dataset, build_obligation_dataset, build_retrieval_dataset, build_similarity_dataset,
    encode_example, finetune as run_finetune, rank_snippets, snippets_by_doc, TagSet, Task, TaskExample, TaskModel,
};
use lexlm::tokenizer::{induce_vocabulary, merge_hybrid as run_merge, vocab_overlap as overlap, Provenance, Vocabulary};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ExperimentConfig, VocabMode};
use crate::run::{read_manifest, Run};

fn snippets(cfg: &ExperimentConfig) -> Result<Vec<Snippet>> {
    let path = cfg.corpus_path()?;
    let docs = ingest_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))?;
    Ok(split_all(&docs))
}

fn provenance(mode: VocabMode) -> Provenance {
    match mode {
        VocabMode::GeneralFile => Provenance::General,
        VocabMode::Induce => Provenance::Legal,
        VocabMode::Hybrid => Provenance::Hybrid,
    }
}

fn load_vocab(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    let path = cfg.vocab_file()?;
    Vocabulary::load(&path, provenance(cfg.vocab.mode)).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// Vocabulary per `vocab.mode`, plus the base when it is a hybrid.
fn resolve_vocab(cfg: &ExperimentConfig, snippets: &[Snippet]) -> Result<(Vocabulary, Option<Vocabulary>)> {
    match cfg.vocab.mode {
        VocabMode::GeneralFile => Ok((load_vocab(cfg)?, None)),
        VocabMode::Induce => {
            let size = cfg
                .vocab
                .target_size
                .ok_or_else(|| anyhow!("vocab.target_size: required for induce mode"))?;
            Ok((induce_vocabulary(snippets, size, cfg.vocab.induction)?.vocabulary, None))
        }
        VocabMode::Hybrid => {
            let base = load_vocab(cfg)?;
            let hybrid = run_merge(&base, &word_frequencies(snippets), cfg.vocab.k);
            Ok((hybrid, Some(base)))
        }
    }
}

/// Encoder from `model.checkpoint`, or a fresh preset model.
fn load_encoder(cfg: &ExperimentConfig, vocab: &Vocabulary, seed: u64) -> Result<EncoderParams> {
    let model = match cfg.checkpoint()? {
        None => EncoderParams::new(cfg.model_config(vocab.len())?, seed)?,
        Some(path) => EncoderParams::load(&path).with_context(|| format!("loading {}", path.display()))?.0,
    };
    if model.config.vocab_size != vocab.len() {
        bail!(
            "model.checkpoint: model has {} tokens but vocab.file has {}",
            model.config.vocab_size,
            vocab.len()
        );
    }
    Ok(model)
}

fn check_maxlen(field: &str, maxlen: usize, model: &EncoderParams) -> Result<()> {
    if maxlen > model.config.max_pos {
        bail!("{field}: {maxlen} exceeds the model's max_pos {}", model.config.max_pos);
    }
    Ok(())
}

pub fn corpus_stats(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let snippets = snippets(&cfg)?;
    let vocab = match cfg.vocab.file {
        Some(_) => Some(load_vocab(&cfg)?),
        None => None,
    };
    let mode = vocab.as_ref().map_or(TokenizeMode::Words, TokenizeMode::Subword);
    let stats = sentence_length_report(&snippets, mode)?;
    let mut run = Run::start(out, "corpus-stats", cfg)?;
    run.write_json(
        "stats.json",
        json!({
            "mode": if vocab.is_some() { "subword" } else { "words" },
            "num_documents": stats.num_documents,
            "num_snippets": stats.num_snippets,
            "distinct_words": stats.word_freq.len(),
            "mean_tokens_per_snippet": stats.mean_tokens_per_snippet,
            "tokens_per_snippet_histogram": stats.tokens_per_snippet_histogram,
        }),
        false,
    )?;
    write_frequency_tsv(&run.path("frequencies.tsv"), &stats.word_freq)?;
    run.record("frequencies.tsv", false)?;
    write_jsonl(&run.path("snippets.jsonl"), &snippets)?;
    run.record("snippets.jsonl", false)?;
    run.finish()
}

pub fn synth_gen(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.require_seed("synth-gen")?;
    let corpus = generate_synthetic_corpus(seed, cfg.synth.docs, &cfg.synth.params)?;
    let mut run = Run::start(out, "synth-gen", cfg)?;
    corpus.write_to(&run.dir)?;
    for f in ["documents", "sentences", "retrieval", "ner", "similarity", "obligation"] {
        run.record(&format!("{f}.jsonl"), false)?;
    }
    let positives = corpus.obligation.iter().filter(|a| a.label == 1).count();
    run.write_json(
        "summary.json",
        json!({
            "seed": seed,
            "documents": corpus.documents.len(),
            "sentences": corpus.sentences.len(),
            "kinds": kind_counts(&corpus.sentences),
            "obligation_positive_share": positives as f64 / corpus.obligation.len().max(1) as f64,
        }),
        false,
    )?;
    run.finish()
}

pub fn build_vocab(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let size = cfg
        .vocab
        .target_size
        .ok_or_else(|| anyhow!("vocab.target_size: required (--target-size)"))?;
    let snippets = snippets(&cfg)?;
    let vocab = induce_vocabulary(&snippets, size, cfg.vocab.induction)?.vocabulary;
    let mut run = Run::start(out, "build-vocab", cfg)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    run.finish()
}

fn corpus_frequencies(cfg: &ExperimentConfig) -> Result<BTreeMap<String, u64>> {
    let path = cfg.corpus_path()?;
    if path.extension().is_some_and(|e| e == "tsv") {
        Ok(read_frequency_tsv(&path)?)
    } else {
        Ok(word_frequencies(&snippets(cfg)?))
    }
}

pub fn merge_hybrid(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let base = load_vocab(&cfg)?;
    let freq = corpus_frequencies(&cfg)?;
    let hybrid = run_merge(&base, &freq, cfg.vocab.k);
    let warm = match cfg.checkpoint()? {
        Some(path) => Some(EncoderParams::load(&path)?.0.warm_start_hybrid(&base, &hybrid)?),
        None => None,
    };
    let mut run = Run::start(out, "merge-hybrid", cfg)?;
    run.write("vocab.txt", hybrid.to_file_string())?;
    if let Some(model) = warm {
        model.save(&run.path("model.ckpt"), run.metadata(json!({})))?;
        run.record("model.ckpt", false)?;
    }
    run.write_json(
        "merge.json",
        json!({
            "base_size": base.len(),
            "added": hybrid.len() - base.len(),
            "size": hybrid.len(),
            "added_words": &hybrid.tokens()[base.len()..],
        }),
        false,
    )?;
    run.finish()
}

pub fn vocab_overlap(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let a = load_vocab(&cfg)?;
    let b_path = cfg.existing("vocab.compare", cfg.vocab.compare.as_ref())?;
    let b = Vocabulary::load(&b_path, Provenance::Legal)?;
    let value = overlap(&a, &b);
    let mut run = Run::start(out, "vocab-overlap", cfg)?;
    run.write_json("overlap.json", json!({ "size_a": a.len(), "size_b": b.len(), "overlap": value }), false)?;
    println!("{value:.6}");
    run.finish()
}

pub fn pretrain(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.require_seed("pretrain")?;
    let snippets = snippets(&cfg)?;
    let (vocab, base) = resolve_vocab(&cfg, &snippets)?;
    let init = match cfg.pretrain.init.as_str() {
        "random" => EncoderParams::new(cfg.model_config(vocab.len())?, seed)?,
        path => {
            let path = cfg.existing("pretrain.init", Some(&PathBuf::from(path)))?;
            let model = EncoderParams::load(&path)?.0;
            match &base {
                _ if model.config.vocab_size == vocab.len() => model,
                Some(b) if model.config.vocab_size == b.len() => model.warm_start_hybrid(b, &vocab)?,
                _ => bail!(
                    "pretrain.init: checkpoint has {} tokens, vocabulary {}",
                    model.config.vocab_size,
                    vocab.len()
                ),
            }
        }
    };
    check_maxlen("pretrain.maxlen", cfg.pretrain.maxlen, &init)?;
    let data = PretrainData::from_corpus(&vocab, &snippets, cfg.pretrain.maxlen)?;
    let (model, curve) = run_pretrain(init, &data, &cfg.pretrain_spec(), seed)?;
    let mut run = Run::start(out, "pretrain", cfg)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    model.save(&run.path("model.ckpt"), run.metadata(json!({ "seed": seed })))?;
    run.record("model.ckpt", false)?;
    run.write("loss_curve.csv", curve.to_csv())?;
    run.write_json(
        "epochs.json",
        json!({ "seed": seed, "sequences": data.sequences.len(), "parameters": param_count(&model.config).total, "curve": curve.epoch_summary() }),
        false,
    )?;
    run.finish()
}

pub fn distill(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.require_seed("distill")?;
    let path = cfg
        .checkpoint()?
        .ok_or_else(|| anyhow!("model.checkpoint: a teacher checkpoint is required (--teacher)"))?;
    let teacher = EncoderParams::load(&path)?.0;
    let vocab = load_vocab(&cfg)?;
    if vocab.len() != teacher.config.vocab_size {
        bail!("vocab.file: {} tokens, teacher has {}", vocab.len(), teacher.config.vocab_size);
    }
    check_maxlen("pretrain.maxlen", cfg.pretrain.maxlen, &teacher)?;
    let data = PretrainData::from_corpus(&vocab, &snippets(&cfg)?, cfg.pretrain.maxlen)?;
    let student = init_student(&teacher, teacher.config.distilled(), seed)?;
    let (student, curve) = distill_train(&teacher, student, &data, &cfg.pretrain_spec(), &cfg.distill, seed)?;
    let mut run = Run::start(out, "distill", cfg)?;
    student.save(&run.path("model.ckpt"), run.metadata(json!({ "seed": seed })))?;
    run.record("model.ckpt", false)?;
    run.write("loss_curve.csv", curve.to_csv())?;
    run.write_json(
        "epochs.json",
        json!({
            "seed": seed,
            "teacher_parameters": param_count(&teacher.config).total,
            "student_parameters": param_count(&student.config).total,
            "curve": curve.epoch_summary(),
        }),
        false,
    )?;
    run.finish()
}

struct TaskData {
    examples: Vec<TaskExample>,
    num_classes: usize,
    records: Vec<serde_json::Value>,
    summary: serde_json::Value,
}

fn annotations<T: serde::de::DeserializeOwned>(cfg: &ExperimentConfig) -> Result<Vec<T>> {
    let path = cfg.existing("task.annotations", cfg.task.annotations.as_ref())?;
    read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
}

fn records<T: serde::Serialize>(items: &[T]) -> Result<Vec<serde_json::Value>> {
    items.iter().map(|i| Ok(serde_json::to_value(i)?)).collect()
}

fn task_data(cfg: &ExperimentConfig, task: Task, snippets: &[Snippet], seed: u64) -> Result<TaskData> {
    let docs = snippets_by_doc(snippets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match task {
        Task::Retrieval => {
            let anns: Vec<RetrievalAnnotation> = annotations(cfg)?;
            let ex = build_retrieval_dataset(&anns, &docs, cfg.task.negatives_per_question, &mut rng)?;
            let positives = ex.iter().filter(|e| e.label == 1).count();
            TaskData {
                examples: ex.iter().map(TaskExample::from).collect(),
                num_classes: 2,
                records: records(&ex)?,
                summary: json!({ "examples": ex.len(), "positives": positives }),
            }
        }
        Task::Similarity => {
            let labels: Vec<SimilarityAnnotation> = annotations(cfg)?;
            let path = cfg.existing("task.groups", cfg.task.groups.as_ref())?;
            let groups = answer_groups(&read_jsonl::<RetrievalAnnotation>(&path)?);
            let (ex, excluded) = build_similarity_dataset(&groups, &labels, &docs)?;
            let positives = ex.iter().filter(|e| e.label == 1).count();
            TaskData {
                examples: ex.iter().map(TaskExample::from).collect(),
                num_classes: 2,
                records: records(&ex)?,
                summary: json!({ "examples": ex.len(), "positives": positives, "excluded_unlabeled": excluded }),
            }
        }
        Task::Ner => {
            let anns: Vec<NerAnnotation> = annotations(cfg)?;
            let tags = if cfg.task.entity_classes.is_empty() {
                TagSet::synthetic()
            } else {
                TagSet::new(cfg.task.entity_classes.iter().cloned())?
            };
            let ex = build_ner_dataset(&anns, &docs, &tags, cfg.task.negative_snippets, &mut rng)?;
            let examples = ex.iter().map(|e| e.to_task_example(&tags)).collect::<lexlm::Result<Vec<_>>>()?;
            let entity_tokens = ex.iter().flat_map(|e| &e.tags).filter(|t| *t != "O").count();
            let distribution = lexlm::eval::class_distribution(&ex).unwrap_or_default();
            TaskData {
                examples,
                num_classes: tags.len(),
                records: records(&ex)?,
                summary: json!({ "examples": ex.len(), "entity_tokens": entity_tokens, "class_distribution": distribution }),
            }
        }
        Task::Obligation => {
            let anns: Vec<ObligationAnnotation> = annotations(cfg)?;
            let (ex, balance) = build_obligation_dataset(&anns, &docs)?;
            TaskData {
                examples: ex.iter().map(TaskExample::from).collect(),
                num_classes: 2,
                records: records(&ex)?,
                summary: json!({ "examples": ex.len(), "balance": balance }),
            }
        }
    })
}

pub fn finetune(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.require_seed("finetune")?;
    let task = cfg.task_name()?;
    let vocab = load_vocab(&cfg)?;
    let encoder = load_encoder(&cfg, &vocab, seed)?;
    check_maxlen("task.maxlen", cfg.task.maxlen, &encoder)?;
    let data = task_data(&cfg, task, &snippets(&cfg)?, seed)?;
    let encoded = data
        .examples
        .iter()
        .map(|e| encode_example(&vocab, e, cfg.task.maxlen))
        .collect::<lexlm::Result<Vec<_>>>()?;
    let keys: Vec<&str> = data.examples.iter().map(TaskExample::group).collect();
    let parts = split_grouped(&keys, &SplitSpec::new(seed))?;
    let (train, val, test) = parts.select(&encoded);
    let model = TaskModel::new(encoder, task, data.num_classes, seed)?;
    let (model, report) = run_finetune(model, &train, &val, &cfg.finetune_spec(), seed)?;
    let f1 = test_f1(&model, &test)?;
    let inputs: Vec<EncodedInput> = test.iter().map(|e| e.input.clone()).collect();
    let predict_ms = prediction_ms(&model, &inputs, lexlm::eval::MIN_TIMING_PASSES)?;

    let mut run = Run::start(out, "finetune", cfg)?;
    write_jsonl(&run.path("dataset.jsonl"), &data.records)?;
    run.record("dataset.jsonl", false)?;
    model
        .encoder
        .save(&run.path("model.ckpt"), run.metadata(json!({ "seed": seed, "task": task })))?;
    run.record("model.ckpt", false)?;
    run.write_json(
        "finetune.json",
        json!({
            "task": task,
            "seed": seed,
            "dataset": data.summary,
            "split": { "train": train.len(), "val": val.len(), "test": test.len() },
            "train_losses": report.train_losses,
            "val_losses": report.val_losses,
            "best_epoch": report.best_epoch,
            "stopped_early": report.stopped_early,
            "test_f1": f1,
        }),
        false,
    )?;
    run.write_json(
        "timing.json",
        json!({
            "epoch_seconds": report.epoch_seconds,
            "train_hours_per_epoch": report.train_hours_per_epoch(),
            "predict_ms_per_sample": predict_ms,
        }),
        true,
    )?;
    println!("{task} test F1 {f1:.4}");
    run.finish()
}

pub fn rank(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    let path = cfg
        .checkpoint()?
        .ok_or_else(|| anyhow!("model.checkpoint: a fine-tuned retrieval checkpoint is required"))?;
    let question = cfg.rank.question.clone().ok_or_else(|| anyhow!("rank.question: required (--question)"))?;
    let doc = cfg.rank.doc.clone().ok_or_else(|| anyhow!("rank.doc: required (--doc)"))?;
    let vocab = load_vocab(&cfg)?;
    let model = TaskModel::from_encoder(EncoderParams::load(&path)?.0, Task::Retrieval)?;
    let docs = snippets_by_doc(&snippets(&cfg)?);
    let candidates = docs.get(&doc).ok_or_else(|| anyhow!("rank.doc: no document {doc:?} in the corpus"))?;
    let maxlen = cfg.task.maxlen.min(model.encoder.config.max_pos);
    let ranked = rank_snippets(&model, &vocab, &question, candidates, cfg.rank.k, maxlen)?;
    let rows: Vec<serde_json::Value> = ranked
        .iter()
        .enumerate()
        .map(|(r, &(i, score))| {
            println!("{}\t{score:.6}\t{}", r + 1, candidates[i].text);
            json!({ "rank": r + 1, "doc_id": doc, "index": candidates[i].index, "score": score, "text": candidates[i].text })
        })
        .collect();
    let mut run = Run::start(out, "rank", cfg)?;
    write_jsonl(&run.path("ranking.jsonl"), &rows)?;
    run.record("ranking.jsonl", false)?;
    run.finish()
}

pub fn evaluate(out: &Path, cfg: ExperimentConfig) -> Result<PathBuf> {
    if cfg.eval.seeds.is_empty() {
        bail!("eval.seeds: at least one explicit seed is required (--seeds)");
    }
    let task = cfg.task_name()?;
    let vocab = load_vocab(&cfg)?;
    let encoder = load_encoder(&cfg, &vocab, cfg.eval.seeds[0])?;
    check_maxlen("task.maxlen", cfg.task.maxlen, &encoder)?;
    let tag = match (&cfg.eval.tag, cfg.checkpoint()?) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        (None, None) => "random".into(),
    };
    let data = task_data(&cfg, task, &snippets(&cfg)?, cfg.eval.seeds[0])?;
    let spec = ProtocolSpec {
        finetune: cfg.finetune_spec(),
        maxlen: cfg.task.maxlen,
        ..ProtocolSpec::default()
    };
    let runs = run_protocol(&encoder, &vocab, task, &data.examples, data.num_classes, &cfg.eval.seeds, &spec, &tag)?;
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    let report = aggregate(&results)?;

    let mut run = Run::start(out, "evaluate", cfg)?;
    write_jsonl(&run.path("results.jsonl"), &results)?;
    run.record("results.jsonl", true)?;
    let seeds: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.result.seed,
                "f1": r.result.f1,
                "val_losses": r.report.val_losses,
                "best_epoch": r.report.best_epoch,
            })
        })
        .collect();
    run.write_json("evaluate.json", json!({ "task": task, "model_tag": tag, "dataset": data.summary, "seeds": seeds }), false)?;
    run.write("report.csv", report.to_csv(false))?;
    run.write("performance.txt", report.performance_table())?;
    print!("{}", report.performance_table());
    run.finish()
}

pub fn report(out: &Path, cfg: ExperimentConfig, dirs: &[PathBuf]) -> Result<PathBuf> {
    let mut results = Vec::new();
    let mut inputs = Vec::new();
    for dir in dirs {
        let manifest = read_manifest(dir)?;
        if manifest.command != "evaluate" {
            bail!("{} is a {} run, not an evaluate run", dir.display(), manifest.command);
        }
        let mut r: Vec<RunResult> = read_jsonl(&dir.join("results.jsonl"))?;
        if r.is_empty() {
            warn!("{} has no results", dir.display());
        }
        results.append(&mut r);
        inputs.push(json!({ "dir": dir.display().to_string(), "config_hash": manifest.config_hash }));
    }
    let report = aggregate(&results).context("aggregating results")?;
    let mut run = Run::start(out, "report", cfg)?;
    run.write("report.csv", report.to_csv(false))?;
    run.write("performance.txt", report.performance_table())?;
    run.write_timing("timing.csv", report.to_csv(true))?;
    run.write_timing("timing.txt", report.timing_table())?;
    run.write_json("inputs.json", json!({ "runs": inputs }), false)?;
    print!("{}", report.performance_table());
    run.finish()
}
