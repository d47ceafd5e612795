//! Experiment configuration: a TOML file, then `--set` and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lexlm::corpus::synth::SynthParams;
use lexlm::encoder::EncoderConfig;
use lexlm::objectives::{DistillSpec, MaskingConfig, PretrainSpec};
use lexlm::tasks::{FinetuneSpec, Task};
use lexlm::tokenizer::InductionMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub synth: SynthSection,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub distill: DistillSpec,
    pub task: TaskSection,
    pub eval: EvalSection,
    pub rank: RankSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory of text files or a `.jsonl` of `{"id", "text"}` records.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub docs: usize,
    pub params: SynthParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            docs: 100,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    #[default]
    GeneralFile,
    Induce,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub mode: VocabMode,
    /// Vocabulary file (general-file), or the base of a hybrid merge.
    pub file: Option<PathBuf>,
    /// Second vocabulary for `vocab-overlap`.
    pub compare: Option<PathBuf>,
    pub target_size: Option<usize>,
    pub induction: InductionMode,
    pub k: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            mode: VocabMode::GeneralFile,
            file: None,
            compare: None,
            target_size: None,
            induction: InductionMode::Unigram,
            k: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    /// Trained weights; `"random"` or absent means a fresh preset model.
    pub checkpoint: Option<String>,
    pub hidden_size: Option<usize>,
    pub embedding_size: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_size: Option<usize>,
    pub max_pos: Option<usize>,
    pub share_weights: Option<bool>,
    pub dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            checkpoint: None,
            hidden_size: None,
            embedding_size: None,
            num_layers: None,
            num_heads: None,
            ffn_size: None,
            max_pos: None,
            share_weights: None,
            dropout: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub maxlen: usize,
    pub lr: f64,
    /// `"random"` or a checkpoint path.
    pub init: String,
    pub sop: bool,
    pub masking: MaskingConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = PretrainSpec::default();
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            maxlen: s.maxlen,
            lr: s.lr,
            init: "random".into(),
            sop: s.sop,
            masking: s.masking,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub name: Option<Task>,
    pub annotations: Option<PathBuf>,
    /// Retrieval annotations whose answers form the similarity groups.
    pub groups: Option<PathBuf>,
    pub negatives_per_question: usize,
    pub negative_snippets: usize,
    /// Entity classes for tagging; the synthetic classes when empty.
    pub entity_classes: Vec<String>,
    pub maxlen: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            name: None,
            annotations: None,
            groups: None,
            negatives_per_question: 10,
            negative_snippets: 20_000,
            entity_classes: Vec::new(),
            maxlen: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
    pub tag: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = FinetuneSpec::default();
        Self {
            seeds: Vec::new(),
            patience: f.patience,
            max_epochs: f.max_epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            freeze_encoder: f.freeze_encoder,
            tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub question: Option<String>,
    pub doc: Option<String>,
    pub k: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        Self {
            question: None,
            doc: None,
            k: 3,
        }
    }
}

/// One `key=value` override; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {s:?} has an empty key");
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("cannot set {key}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// File (if any), then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let text = toml::to_string(&table).context("serializing merged config")?;
        let origin = file.map_or_else(|| "command-line overrides".to_string(), |p| p.display().to_string());
        toml::from_str(&text).with_context(|| format!("invalid config ({origin})"))
    }

    /// Hex SHA-256 of the command name and the resolved config.
    pub fn hash(&self, command: &str) -> String {
        let canonical = serde_json::json!({ "command": command, "config": self });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| anyhow!("seed: --seed is required for {command} (no wall-clock default)"))
    }

    pub fn existing(&self, field: &str, path: Option<&PathBuf>) -> Result<PathBuf> {
        let path = path.ok_or_else(|| anyhow!("{field}: required but not set"))?;
        if !path.exists() {
            bail!("{field}: {} does not exist", path.display());
        }
        Ok(path.clone())
    }

    pub fn corpus_path(&self) -> Result<PathBuf> {
        self.existing("corpus.path", self.corpus.path.as_ref())
    }

    pub fn vocab_file(&self) -> Result<PathBuf> {
        self.existing("vocab.file", self.vocab.file.as_ref())
    }

    /// Checkpoint path, or `None` for a fresh model.
    pub fn checkpoint(&self) -> Result<Option<PathBuf>> {
        match self.model.checkpoint.as_deref() {
            None | Some("random") => Ok(None),
            Some(p) => self.existing("model.checkpoint", Some(&PathBuf::from(p))).map(Some),
        }
    }

    pub fn task_name(&self) -> Result<Task> {
        self.task.name.ok_or_else(|| anyhow!("task.name: required but not set"))
    }

    /// Preset with overrides, sized for `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let m = &self.model;
        let base = EncoderConfig::preset(&m.preset).map_err(|e| anyhow!("model.preset: {e}"))?;
        let config = EncoderConfig {
            vocab_size,
            hidden_size: m.hidden_size.unwrap_or(base.hidden_size),
            embedding_size: m.embedding_size.or(base.embedding_size),
            num_layers: m.num_layers.unwrap_or(base.num_layers),
            num_heads: m.num_heads.unwrap_or(base.num_heads),
            ffn_size: m.ffn_size.unwrap_or(base.ffn_size),
            max_pos: m.max_pos.unwrap_or(base.max_pos),
            share_weights: m.share_weights.unwrap_or(base.share_weights),
            dropout: m.dropout.unwrap_or(base.dropout),
            ..base
        };
        config.validate().map_err(|e| anyhow!("model: {e}"))?;
        Ok(config)
    }

    pub fn pretrain_spec(&self) -> PretrainSpec {
        let p = &self.pretrain;
        PretrainSpec {
            epochs: p.epochs,
            batch_size: p.batch_size,
            maxlen: p.maxlen,
            lr: p.lr,
            masking: p.masking,
            sop: p.sop,
        }
    }

    pub fn finetune_spec(&self) -> FinetuneSpec {
        let e = &self.eval;
        FinetuneSpec {
            max_epochs: e.max_epochs,
            batch_size: e.batch_size,
            lr: e.lr,
            patience: e.patience,
            freeze_encoder: e.freeze_encoder,
        }
    }
}
