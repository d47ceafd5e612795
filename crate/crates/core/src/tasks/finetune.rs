use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodedExample, Target, Task};
use crate::corpus::Snippet;
use crate::encoder::{EncodedInput, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::eval::EarlyStopping;
use crate::nn::{softmax, Adam, AdamConfig, Graph, Var};
use crate::objectives::pair_input;
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSpec {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub freeze_encoder: bool,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            patience: 3,
            freeze_encoder: false,
        }
    }
}

impl FinetuneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 when nothing was trained.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epoch_seconds: Vec<f64>,
}

impl FinetuneReport {
    pub fn train_hours_per_epoch(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64 / 3600.0
        }
    }
}

/// An encoder with a classification head for one task.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub task: Task,
    pub encoder: EncoderParams,
    pub head: Head,
}

impl TaskModel {
    pub fn new(mut encoder: EncoderParams, task: Task, num_classes: usize, seed: u64) -> Result<Self> {
        let head = encoder.add_head(task.name(), num_classes, seed)?;
        Ok(Self { task, encoder, head })
    }

    /// Restores a fine-tuned model whose store already holds the head.
    pub fn from_encoder(encoder: EncoderParams, task: Task) -> Result<Self> {
        let head = encoder
            .head(task.name())
            .ok_or_else(|| Error::CheckpointMismatch(format!("no {task} head in checkpoint")))?;
        Ok(Self { task, encoder, head })
    }

    fn token_level(&self) -> bool {
        self.task == Task::Ner
    }

    fn logits(&self, g: &mut Graph, inputs: &[EncodedInput], rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Var>> {
        let hidden = self.encoder.encode_batch(g, inputs, rng)?;
        Ok(hidden
            .into_iter()
            .map(|h| {
                if self.token_level() {
                    self.encoder.token_logits(g, self.head, h)
                } else {
                    self.encoder.cls_logits(g, self.head, h)
                }
            })
            .collect())
    }

    fn batch_loss(&self, g: &mut Graph, batch: &[&EncodedExample], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let inputs: Vec<EncodedInput> = batch.iter().map(|e| e.input.clone()).collect();
        let logits = self.logits(g, &inputs, rng)?;
        let mut labels = Vec::new();
        for e in batch {
            match (&e.target, self.token_level()) {
                (Target::Class(c), false) => labels.push(Some(*c)),
                (Target::Tokens(t), true) => labels.extend(t.iter().copied()),
                _ => return Err(Error::Dataset(format!("example target does not fit the {} task", self.task))),
            }
        }
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= self.head.num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {} classes", self.head.num_classes)));
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        g.cross_entropy(all, &labels)
    }

    /// Mean loss over `examples`, weighting each batch by its size.
    pub fn loss(&self, examples: &[EncodedExample], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0;
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch: Vec<&EncodedExample> = chunk.iter().collect();
            let mut g = Graph::new();
            match self.batch_loss(&mut g, &batch, None) {
                Ok(l) => {
                    total += g.value(l).item() * chunk.len() as f64;
                    n += chunk.len();
                }
                Err(Error::NoSupervisedPositions) => {}
                Err(e) => return Err(e),
            }
        }
        if n == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        Ok(total / n as f64)
    }

    /// Class probabilities: one row for sequence tasks, one per position for
    /// token tasks.
    pub fn predict_proba(&self, input: &EncodedInput) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, std::slice::from_ref(input), None)?[0];
        let p = softmax(g.value(logits), 1)?;
        Ok((0..p.rows()).map(|r| p.row(r).to_vec()).collect())
    }

    /// Arg-max class for each row of [`TaskModel::predict_proba`].
    pub fn predict(&self, input: &EncodedInput) -> Result<Vec<usize>> {
        Ok(self.predict_proba(input)?.iter().map(|row| argmax(row)).collect())
    }

    /// Probability of class 1 for a sequence task.
    pub fn positive_score(&self, input: &EncodedInput) -> Result<f64> {
        let p = self.predict_proba(input)?;
        p[0].get(1)
            .copied()
            .ok_or_else(|| Error::Config("positive score needs a head with two classes".into()))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training of head and encoder, keeping the weights of the
/// epoch with the lowest validation loss.
pub fn finetune(
    mut model: TaskModel,
    train: &[EncodedExample],
    val: &[EncodedExample],
    spec: &FinetuneSpec,
    seed: u64,
) -> Result<(TaskModel, FinetuneReport)> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    if val.is_empty() {
        warn!("empty validation split; early stopping uses the training loss");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AdamConfig::with_lr(spec.lr);
    let mut opt = if spec.freeze_encoder {
        Adam::new(&model.encoder.store, cfg).restrict_to(&[model.head.linear.weight, model.head.linear.bias])
    } else {
        Adam::new(&model.encoder.store, cfg)
    };
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut report = FinetuneReport::default();
    let mut best = model.encoder.store.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=spec.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = match model.batch_loss(&mut g, &batch, Some(&mut rng)) {
                Err(Error::NoSupervisedPositions) => continue,
                other => other?,
            };
            total += g.value(loss).item() * chunk.len() as f64;
            seen += chunk.len();
            g.backward_into(loss, &mut model.encoder.store)?;
            opt.step(&mut model.encoder.store);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        let train_loss = if seen == 0 { f64::NAN } else { total / seen as f64 };
        let val_loss = if val.is_empty() { train_loss } else { model.loss(val, spec.batch_size)? };
        report.train_losses.push(train_loss);
        report.val_losses.push(val_loss);
        info!("{} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}", model.task);
        let decision = stopper.observe(val_loss);
        if stopper.best_epoch() == Some(epoch) {
            best.clone_from(&model.encoder.store);
        }
        if decision.is_stop() {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch().unwrap_or(0);
    model.encoder.store = best;
    Ok((model, report))
}

/// Indices of the `k` snippets with the highest positive-class score for
/// `question`, best first; equal scores keep snippet order.
pub fn rank_snippets(
    model: &TaskModel,
    vocab: &Vocabulary,
    question: &str,
    snippets: &[Snippet],
    k: usize,
    maxlen: usize,
) -> Result<Vec<(usize, f64)>> {
    if k > snippets.len() {
        warn!("requested top {k} of {} snippets; returning all", snippets.len());
    }
    let q = vocab.encode(question);
    let mut scored = snippets
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, model.positive_score(&pair_input(&q, &vocab.encode(&s.text), maxlen))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
