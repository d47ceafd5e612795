//! `lexlm`: command-line pipeline for legal-domain encoder experiments.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lexlm::tasks::Task;
use toml::Value;

use config::{parse_assignment, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "lexlm", version, about = "Vocabulary, pre-training and review-task experiments on legal text")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; must not already hold a completed run.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct CorpusArgs {
    /// Corpus directory or documents JSONL (`corpus.path`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file (`vocab.file`).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    maxlen: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TaskArgs {
    /// Encoder or task checkpoint (`model.checkpoint`); `random` for a fresh model.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Annotation JSONL for the task (`task.annotations`).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Retrieval annotations defining similarity groups (`task.groups`).
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Snippet counts, word frequencies and a length histogram.
    CorpusStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Generate a synthetic annotated corpus.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        docs: Option<usize>,
    },
    /// Induce a subword vocabulary of an exact size.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        target_size: Option<usize>,
        /// `unigram` or `bpe`.
        #[arg(long)]
        induction: Option<String>,
    },
    /// Extend a base vocabulary with the K most frequent corpus words.
    MergeHybrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Base vocabulary (`vocab.file`).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Base-vocabulary checkpoint to warm-start for the hybrid vocabulary.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Share of common tokens between two vocabularies.
    VocabOverlap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Masked-language-model pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        preset: Option<String>,
        /// `random` or a checkpoint path (`pretrain.init`).
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        sop: bool,
    },
    /// Train a half-depth student against a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Teacher checkpoint (`model.checkpoint`).
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Fine-tune on one task with a single seeded split.
    Finetune {
        #[arg(value_parser = parse_task)]
        task: Task,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        args: TaskArgs,
    },
    /// Top-K snippets of one document for a question.
    Rank {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        doc: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Split, fine-tune and test once per seed.
    Evaluate {
        #[arg(value_parser = parse_task)]
        task: Task,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        args: TaskArgs,
        /// Comma-separated seeds (`eval.seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Model label in reports (`eval.tag`).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Aggregate evaluate runs into CSV and text tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluate run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: lexlm::Error| e.to_string())
}

/// Collects `(key, value)` overrides in flag order.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put(&mut self, key: &str, v: Option<Value>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v));
        }
    }

    fn path(&mut self, key: &str, p: &Option<PathBuf>) {
        self.put(key, p.as_ref().map(|p| Value::String(p.display().to_string())));
    }

    fn string(&mut self, key: &str, s: &Option<String>) {
        self.put(key, s.clone().map(Value::String));
    }

    fn int(&mut self, key: &str, n: Option<usize>) {
        self.put(key, n.map(|n| Value::Integer(n as i64)));
    }

    fn float(&mut self, key: &str, x: Option<f64>) {
        self.put(key, x.map(Value::Float));
    }

    fn flag(&mut self, key: &str, on: bool) {
        self.put(key, on.then_some(Value::Boolean(true)));
    }

    fn corpus(&mut self, c: &CorpusArgs) {
        self.path("corpus.path", &c.corpus);
        self.path("vocab.file", &c.vocab);
    }

    fn train(&mut self, section: &str, t: &TrainArgs) {
        let epochs = if section == "eval" { "max_epochs" } else { "epochs" };
        self.int(&format!("{section}.{epochs}"), t.epochs);
        self.int(&format!("{section}.batch_size"), t.batch_size);
        let maxlen = if section == "eval" { "task.maxlen".to_string() } else { format!("{section}.maxlen") };
        self.int(&maxlen, t.maxlen);
        self.float(&format!("{section}.lr"), t.lr);
    }

    fn task(&mut self, task: Task, a: &TaskArgs) {
        self.put("task.name", Some(Value::String(task.name().into())));
        self.string("model.checkpoint", &a.checkpoint);
        self.path("task.annotations", &a.annotations);
        self.path("task.groups", &a.groups);
        self.int("eval.patience", a.patience);
        self.flag("eval.freeze_encoder", a.freeze_encoder);
    }
}

fn resolve(common: &Common, flags: Overrides) -> Result<ExperimentConfig> {
    let mut all = Vec::new();
    for s in &common.set {
        all.push(parse_assignment(s)?);
    }
    all.extend(flags.0);
    if let Some(seed) = common.seed {
        all.push(("seed".into(), Value::Integer(seed as i64)));
    }
    ExperimentConfig::resolve(common.config.as_deref(), &all)
}

fn dispatch(command: Command) -> Result<PathBuf> {
    let mut o = Overrides::default();
    match command {
        Command::CorpusStats { common, corpus } => {
            o.corpus(&corpus);
            commands::corpus_stats(&common.out, resolve(&common, o)?)
        }
        Command::SynthGen { common, docs } => {
            o.int("synth.docs", docs);
            commands::synth_gen(&common.out, resolve(&common, o)?)
        }
        Command::BuildVocab {
            common,
            corpus,
            target_size,
            induction,
        } => {
            o.path("corpus.path", &corpus);
            o.int("vocab.target_size", target_size);
            o.string("vocab.induction", &induction);
            commands::build_vocab(&common.out, resolve(&common, o)?)
        }
        Command::MergeHybrid {
            common,
            corpus,
            base,
            k,
            checkpoint,
        } => {
            o.path("corpus.path", &corpus);
            o.path("vocab.file", &base);
            o.int("vocab.k", k);
            o.string("model.checkpoint", &checkpoint);
            commands::merge_hybrid(&common.out, resolve(&common, o)?)
        }
        Command::VocabOverlap { common, a, b } => {
            o.path("vocab.file", &a);
            o.path("vocab.compare", &b);
            commands::vocab_overlap(&common.out, resolve(&common, o)?)
        }
        Command::Pretrain {
            common,
            corpus,
            train,
            preset,
            init,
            sop,
        } => {
            o.corpus(&corpus);
            o.train("pretrain", &train);
            o.string("model.preset", &preset);
            o.string("pretrain.init", &init);
            o.flag("pretrain.sop", sop);
            commands::pretrain(&common.out, resolve(&common, o)?)
        }
        Command::Distill {
            common,
            corpus,
            train,
            teacher,
            alpha,
            temperature,
        } => {
            o.corpus(&corpus);
            o.train("pretrain", &train);
            o.string("model.checkpoint", &teacher);
            o.float("distill.alpha", alpha);
            o.float("distill.temperature", temperature);
            commands::distill(&common.out, resolve(&common, o)?)
        }
        Command::Finetune {
            task,
            common,
            corpus,
            train,
            args,
        } => {
            o.corpus(&corpus);
            o.train("eval", &train);
            o.task(task, &args);
            commands::finetune(&common.out, resolve(&common, o)?)
        }
        Command::Rank {
            common,
            corpus,
            checkpoint,
            question,
            doc,
            k,
        } => {
            o.corpus(&corpus);
            o.string("model.checkpoint", &checkpoint);
            o.string("rank.question", &question);
            o.string("rank.doc", &doc);
            o.int("rank.k", k);
            commands::rank(&common.out, resolve(&common, o)?)
        }
        Command::Evaluate {
            task,
            common,
            corpus,
            train,
            args,
            seeds,
            tag,
        } => {
            o.corpus(&corpus);
            o.train("eval", &train);
            o.task(task, &args);
            if !seeds.is_empty() {
                o.put("eval.seeds", Some(Value::Array(seeds.iter().map(|&s| Value::Integer(s as i64)).collect())));
            }
            o.string("eval.tag", &tag);
            commands::evaluate(&common.out, resolve(&common, o)?)
        }
        Command::Report { common, runs } => commands::report(&common.out, resolve(&common, o)?, &runs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
