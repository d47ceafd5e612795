//! Pre-training objectives: MLM masking, distillation against a frozen
//! teacher, sentence-order prediction, and the training loops.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::encoder::{EncodedInput, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{softmax, Adam, AdamConfig, Graph, Tensor, Var};
use crate::tokenizer::{Vocabulary, CLS, MASK, NUM_SPECIALS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub p_select: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_select: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_select, self.p_mask, self.p_random, self.p_keep];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("masking probabilities must lie in [0, 1], got {ps:?}")));
        }
        let sum = self.p_mask + self.p_random + self.p_keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("p_mask + p_random + p_keep must be 1, got {sum}")));
        }
        Ok(())
    }
}

/// Corrupted inputs with the original ids at supervised positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<EncodedInput>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl MaskedBatch {
    pub fn num_supervised(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Selects each non-special position with `p_select`, then replaces it by
/// `[MASK]`, a uniform non-special id, or itself. Sequences without any
/// maskable position are dropped with a warning.
pub fn mask_tokens(
    sequences: &[Vec<usize>],
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
    cfg: &MaskingConfig,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Config(format!("vocabulary of {vocab_size} has no maskable tokens")));
    }
    let mut batch = MaskedBatch {
        inputs: Vec::with_capacity(sequences.len()),
        labels: Vec::with_capacity(sequences.len()),
    };
    for seq in sequences {
        if !seq.iter().any(|&id| !Vocabulary::is_special(id)) {
            warn!("skipping a sequence with no maskable positions");
            continue;
        }
        let mut ids = seq.clone();
        let mut labels = vec![None; ids.len()];
        for (pos, id) in ids.iter_mut().enumerate() {
            if Vocabulary::is_special(*id) || !rng.random_bool(cfg.p_select) {
                continue;
            }
            labels[pos] = Some(*id);
            let r: f64 = rng.random();
            if r < cfg.p_mask {
                *id = MASK;
            } else if r < cfg.p_mask + cfg.p_random {
                *id = rng.random_range(NUM_SPECIALS..vocab_size);
            }
        }
        batch.inputs.push(EncodedInput::single(ids));
        batch.labels.push(labels);
    }
    Ok(batch)
}

/// Mean cross-entropy over supervised positions.
pub fn mlm_loss(logits: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    crate::nn::cross_entropy(logits, labels)
}

/// `T² · mean_rows(−Σ tᵢ log softmax(z/T)ᵢ)`.
pub fn distill_loss(teacher_probs: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<f64> {
    crate::nn::soft_cross_entropy_value(teacher_probs, student_logits, temperature)
}

pub fn combined_distill_objective(mlm: f64, ce: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * ce + (1.0 - alpha) * mlm)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopExample {
    pub seg_a: Snippet,
    pub seg_b: Snippet,
    /// 1 when in document order, 0 when reversed.
    pub label: u8,
}

/// Samples adjacent snippet pairs of one document, reversing half of them.
pub fn build_sop_examples(doc_snippets: &[Snippet], rng: &mut ChaCha8Rng, num_per_doc: usize) -> Vec<SopExample> {
    if doc_snippets.len() < 2 {
        return Vec::new();
    }
    debug_assert!(doc_snippets.windows(2).all(|w| w[0].doc_id == w[1].doc_id));
    (0..num_per_doc)
        .map(|_| {
            let i = rng.random_range(0..doc_snippets.len() - 1);
            let (a, b) = (&doc_snippets[i], &doc_snippets[i + 1]);
            if rng.random_bool(0.5) {
                SopExample {
                    seg_a: a.clone(),
                    seg_b: b.clone(),
                    label: 1,
                }
            } else {
                SopExample {
                    seg_a: b.clone(),
                    seg_b: a.clone(),
                    label: 0,
                }
            }
        })
        .collect()
}

/// Concatenates consecutive snippets of each document into `[CLS] … [SEP]`
/// sequences of at most `maxlen` ids. Sequences never cross documents and
/// snippets longer than a sequence are cut into pieces.
pub fn pack_sequences(vocab: &Vocabulary, snippets: &[Snippet], maxlen: usize) -> Result<Vec<Vec<usize>>> {
    if maxlen < 3 {
        return Err(Error::Config(format!("maxlen {maxlen} leaves no room for tokens")));
    }
    let room = maxlen - 2;
    let mut out = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut doc: Option<&str> = None;
    let flush = |current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>| {
        if !current.is_empty() {
            let mut seq = Vec::with_capacity(current.len() + 2);
            seq.push(CLS);
            seq.append(current);
            seq.push(SEP);
            out.push(seq);
        }
    };
    for s in snippets {
        if doc != Some(s.doc_id.as_str()) {
            flush(&mut current, &mut out);
            doc = Some(&s.doc_id);
        }
        let ids = vocab.encode(&s.text);
        if current.len() + ids.len() > room {
            flush(&mut current, &mut out);
        }
        for chunk in ids.chunks(room) {
            if current.len() + chunk.len() > room {
                flush(&mut current, &mut out);
            }
            current.extend_from_slice(chunk);
        }
    }
    flush(&mut current, &mut out);
    Ok(out)
}

/// Per-step losses with a trailing moving average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub raw: Vec<f64>,
    pub window: usize,
    pub epoch_means: Vec<f64>,
}

pub const LOSS_WINDOW: usize = 100;

impl LossCurve {
    pub fn new(window: usize) -> Self {
        Self {
            raw: Vec::new(),
            window: window.max(1),
            epoch_means: Vec::new(),
        }
    }

    /// Mean of the last `window` raw values up to each step.
    pub fn moving_average(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.raw.len());
        let mut sum = 0.0;
        for i in 0..self.raw.len() {
            sum += self.raw[i];
            if i >= self.window {
                sum -= self.raw[i - self.window];
            }
            out.push(sum / (i + 1).min(self.window) as f64);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,raw_loss,moving_avg\n");
        for (i, (r, m)) in self.raw.iter().zip(self.moving_average()).enumerate() {
            s.push_str(&format!("{},{r},{m}\n", i + 1));
        }
        s
    }

    /// JSON object `{"window", "epoch_means"}`.
    pub fn epoch_summary(&self) -> serde_json::Value {
        serde_json::json!({"window": self.window, "epoch_means": self.epoch_means})
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub maxlen: usize,
    pub lr: f64,
    pub masking: MaskingConfig,
    /// Adds sentence-order prediction on adjacent snippet pairs.
    pub sop: bool,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            maxlen: 512,
            lr: 3e-5,
            masking: MaskingConfig::default(),
            sop: false,
        }
    }
}

impl PretrainSpec {
    fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSpec {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
        }
    }
}

/// MLM logits at supervised positions only, with their labels.
fn masked_logits(
    model: &EncoderParams,
    g: &mut Graph,
    batch: &MaskedBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Option<usize>>)> {
    let hidden = model.encode_batch(g, &batch.inputs, rng)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (h, lab) in hidden.iter().zip(&batch.labels) {
        let pos: Vec<usize> = (0..lab.len()).filter(|&i| lab[i].is_some()).collect();
        if pos.is_empty() {
            continue;
        }
        rows.push(g.gather_rows(*h, &pos));
        labels.extend(pos.iter().map(|&i| lab[i]));
    }
    if rows.is_empty() {
        return Err(Error::NoSupervisedPositions);
    }
    let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    Ok((model.mlm_logits(g, stacked), labels))
}

/// MLM loss of `model` on one masked batch, as a graph node.
pub fn mlm_batch_loss(
    model: &EncoderParams,
    g: &mut Graph,
    batch: &MaskedBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (logits, labels) = masked_logits(model, g, batch, rng)?;
    g.cross_entropy(logits, &labels)
}

/// Mean MLM loss over all supervised positions of `sequences`, with masks
/// drawn from `seed` so that different models see identical corruption.
pub fn evaluate_mlm(
    model: &EncoderParams,
    sequences: &[Vec<usize>],
    masking: &MaskingConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sequences.chunks(batch_size.max(1)) {
        let batch = mask_tokens(chunk, model.config.vocab_size, &mut rng, masking)?;
        let n = batch.num_supervised();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let loss = mlm_batch_loss(model, &mut g, &batch, None)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(total / count as f64)
}

/// Pair input `[CLS] a [SEP] b [SEP]` cut to `maxlen` by removing tokens
/// from the end of the longer side.
pub fn pair_input(a: &[usize], b: &[usize], maxlen: usize) -> EncodedInput {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    let room = maxlen.saturating_sub(3);
    while a.len() + b.len() > room {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(&a);
    ids.push(SEP);
    let first = ids.len();
    ids.extend_from_slice(&b);
    ids.push(SEP);
    let n = ids.len();
    let segment_ids = (0..n).map(|i| usize::from(i >= first)).collect();
    EncodedInput {
        ids,
        segment_ids,
        attention_mask: vec![1; n],
    }
}

/// Training material: packed MLM sequences, plus tokenized snippets grouped
/// by document when SOP is enabled.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub sequences: Vec<Vec<usize>>,
    pub documents: Vec<Vec<Vec<usize>>>,
}

impl PretrainData {
    pub fn from_corpus(vocab: &Vocabulary, snippets: &[Snippet], maxlen: usize) -> Result<Self> {
        let sequences = pack_sequences(vocab, snippets, maxlen)?;
        let mut documents: Vec<Vec<Vec<usize>>> = Vec::new();
        let mut last: Option<&str> = None;
        for s in snippets {
            if last != Some(s.doc_id.as_str()) {
                documents.push(Vec::new());
                last = Some(&s.doc_id);
            }
            documents.last_mut().expect("pushed").push(vocab.encode(&s.text));
        }
        Ok(Self { sequences, documents })
    }
}

const SOP_HEAD: &str = "sop";

fn sop_loss(
    model: &EncoderParams,
    g: &mut Graph,
    data: &PretrainData,
    count: usize,
    maxlen: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    let head = model.head(SOP_HEAD).expect("sop head added before training");
    let eligible: Vec<&Vec<Vec<usize>>> = data.documents.iter().filter(|d| d.len() >= 2).collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let doc = eligible[rng.random_range(0..eligible.len())];
        let i = rng.random_range(0..doc.len() - 1);
        let in_order = rng.random_bool(0.5);
        let (a, b) = if in_order { (&doc[i], &doc[i + 1]) } else { (&doc[i + 1], &doc[i]) };
        inputs.push(pair_input(a, b, maxlen));
        labels.push(Some(usize::from(in_order)));
    }
    let hidden = model.encode_batch(g, &inputs, Some(rng))?;
    let logits: Vec<Var> = hidden.iter().map(|&h| model.cls_logits(g, head, h)).collect();
    let stacked = g.concat_rows(&logits);
    Ok(Some(g.cross_entropy(stacked, &labels)?))
}

/// MLM pre-training (plus SOP when enabled) from the given initial weights.
pub fn pretrain(
    init: EncoderParams,
    data: &PretrainData,
    spec: &PretrainSpec,
    seed: u64,
) -> Result<(EncoderParams, LossCurve)> {
    spec.validate()?;
    let mut model = init;
    let mut curve = LossCurve::new(LOSS_WINDOW);
    if spec.epochs == 0 {
        return Ok((model, curve));
    }
    if data.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if spec.sop && model.head(SOP_HEAD).is_none() {
        model.add_head(SOP_HEAD, 2, seed ^ 0x5EED)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(spec.lr));
    let mut order: Vec<usize> = (0..data.sequences.len()).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let start = curve.raw.len();
        for chunk in order.chunks(spec.batch_size) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| data.sequences[i].clone()).collect();
            let batch = mask_tokens(&seqs, model.config.vocab_size, &mut rng, &spec.masking)?;
            if batch.num_supervised() == 0 {
                warn!("epoch {}: batch without supervised positions skipped", epoch + 1);
                continue;
            }
            let mut g = Graph::new();
            let mut loss = mlm_batch_loss(&model, &mut g, &batch, Some(&mut rng))?;
            if spec.sop {
                if let Some(s) = sop_loss(&model, &mut g, data, chunk.len(), spec.maxlen, &mut rng)? {
                    loss = g.add(loss, s);
                }
            }
            curve.raw.push(g.value(loss).item());
            g.backward_into(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        let steps = &curve.raw[start..];
        let mean = if steps.is_empty() {
            f64::NAN
        } else {
            steps.iter().sum::<f64>() / steps.len() as f64
        };
        curve.epoch_means.push(mean);
    }
    Ok((model, curve))
}

/// Student initialized from the teacher: shared embeddings and MLM head are
/// copied, and student layer `i` takes teacher layer `2i`.
pub fn init_student(teacher: &EncoderParams, student_config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    if student_config.vocab_size != teacher.config.vocab_size {
        return Err(Error::VocabularyMismatch(format!(
            "teacher has {} tokens, student {}",
            teacher.config.vocab_size, student_config.vocab_size
        )));
    }
    let mut student = EncoderParams::new(student_config, seed)?;
    let layer_names: Vec<(String, String)> = if student.config.share_weights || teacher.config.share_weights {
        Vec::new()
    } else {
        (0..student.config.num_layers)
            .filter(|i| 2 * i < teacher.config.num_layers)
            .map(|i| (format!("layer.{i}."), format!("layer.{}.", 2 * i)))
            .collect()
    };
    let names: Vec<String> = student.store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let source = match layer_names.iter().find(|(s, _)| name.starts_with(s.as_str())) {
            Some((s, t)) => format!("{t}{}", &name[s.len()..]),
            None => name.clone(),
        };
        let Some(tid) = teacher.store.find(&source) else { continue };
        let sid = student.store.find(&name).expect("own name");
        if teacher.store.value(tid).shape() == student.store.value(sid).shape() {
            student.store.get_mut(sid).value = teacher.store.value(tid).clone();
        }
    }
    Ok(student)
}

/// Trains `student` on `α·distill + (1−α)·mlm` against a frozen teacher
/// that sees the same masked batches.
pub fn distill_train(
    teacher: &EncoderParams,
    student: EncoderParams,
    data: &PretrainData,
    spec: &PretrainSpec,
    distill: &DistillSpec,
    seed: u64,
) -> Result<(EncoderParams, LossCurve)> {
    spec.validate()?;
    check_alpha(distill.alpha)?;
    if !(distill.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", distill.temperature)));
    }
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(Error::VocabularyMismatch(format!(
            "teacher has {} tokens, student {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    let mut model = student;
    let mut curve = LossCurve::new(LOSS_WINDOW);
    if spec.epochs == 0 {
        return Ok((model, curve));
    }
    if data.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(spec.lr));
    let mut order: Vec<usize> = (0..data.sequences.len()).collect();
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let start = curve.raw.len();
        for chunk in order.chunks(spec.batch_size) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| data.sequences[i].clone()).collect();
            let batch = mask_tokens(&seqs, model.config.vocab_size, &mut rng, &spec.masking)?;
            if batch.num_supervised() == 0 {
                continue;
            }
            let teacher_probs = {
                let mut tg = Graph::new();
                let (logits, _) = masked_logits(teacher, &mut tg, &batch, None)?;
                let mut z = tg.value(logits).clone();
                z.data_mut().iter_mut().for_each(|v| *v /= distill.temperature);
                softmax(&z, 1)?
            };
            let mut g = Graph::new();
            let (logits, labels) = masked_logits(&model, &mut g, &batch, Some(&mut rng))?;
            let mlm = g.cross_entropy(logits, &labels)?;
            let ce = g.soft_cross_entropy(logits, &teacher_probs, distill.temperature)?;
            let a = g.scale(ce, distill.alpha);
            let b = g.scale(mlm, 1.0 - distill.alpha);
            let loss = g.add(a, b);
            curve.raw.push(g.value(loss).item());
            g.backward_into(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        let steps = &curve.raw[start..];
        curve
            .epoch_means
            .push(steps.iter().sum::<f64>() / steps.len().max(1) as f64);
    }
    Ok((model, curve))
}

/// Fraction of selected positions and the mask/random/keep split.
pub fn masking_statistics(original: &[Vec<usize>], batch: &MaskedBatch) -> BTreeMap<&'static str, f64> {
    let mut eligible = 0usize;
    let (mut selected, mut masked, mut kept, mut random) = (0usize, 0usize, 0usize, 0usize);
    for ((orig, input), labels) in original.iter().zip(&batch.inputs).zip(&batch.labels) {
        for ((o, i), l) in orig.iter().zip(&input.ids).zip(labels) {
            if Vocabulary::is_special(*o) {
                continue;
            }
            eligible += 1;
            if l.is_some() {
                selected += 1;
                if *i == MASK {
                    masked += 1;
                } else if i == o {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
    }
    let s = selected.max(1) as f64;
    BTreeMap::from([
        ("selected", selected as f64 / eligible.max(1) as f64),
        ("mask", masked as f64 / s),
        ("random", random as f64 / s),
        ("keep", kept as f64 / s),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(v: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: v,
            hidden_size: 16,
            embedding_size: None,
            num_layers: 2,
            num_heads: 2,
            ffn_size: 32,
            max_pos: 64,
            use_segments: true,
            share_weights: false,
            dropout: 0.0,
            pooler: true,
        }
    }

    #[test]
    fn full_selection_masks_everything() {
        let seqs = vec![vec![CLS, 7, 8, 9, SEP]];
        let cfg = MaskingConfig {
            p_select: 1.0,
            p_mask: 1.0,
            p_random: 0.0,
            p_keep: 0.0,
        };
        let b = mask_tokens(&seqs, 20, &mut rng(0), &cfg).unwrap();
        assert_eq!(b.inputs[0].ids, vec![CLS, MASK, MASK, MASK, SEP]);
        assert_eq!(b.labels[0], vec![None, Some(7), Some(8), Some(9), None]);
    }

    #[test]
    fn zero_selection_has_no_supervised_positions() {
        let cfg = MaskingConfig {
            p_select: 0.0,
            ..MaskingConfig::default()
        };
        let b = mask_tokens(&[vec![CLS, 7, 8, SEP]], 20, &mut rng(0), &cfg).unwrap();
        assert_eq!(b.num_supervised(), 0);
        let logits = Tensor::zeros(&[4, 20]);
        assert!(matches!(mlm_loss(&logits, &b.labels[0]), Err(Error::NoSupervisedPositions)));
    }

    #[test]
    fn unmaskable_sequences_are_skipped() {
        let b = mask_tokens(&[vec![CLS, SEP], vec![CLS, 9, SEP]], 20, &mut rng(0), &MaskingConfig::default()).unwrap();
        assert_eq!(b.inputs.len(), 1);
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let cfg = MaskingConfig {
            p_keep: 0.2,
            ..MaskingConfig::default()
        };
        assert!(mask_tokens(&[vec![7]], 20, &mut rng(0), &cfg).is_err());
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::zeros(&[3, 37]);
        let loss = mlm_loss(&logits, &[Some(5), None, Some(30)]).unwrap();
        assert!((loss - 37f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_rows_do_not_affect_loss() {
        let mut logits = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.5]).unwrap();
        let labels = [Some(2), None];
        let a = mlm_loss(&logits, &labels).unwrap();
        logits.row_mut(1).iter_mut().for_each(|v| *v += 10.0);
        assert_eq!(a, mlm_loss(&logits, &labels).unwrap());
    }

    #[test]
    fn distill_examples() {
        let t = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let s = Tensor::zeros(&[1, 2]);
        assert!((distill_loss(&t, &s, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(distill_loss(&bad, &s, 1.0), Err(Error::TeacherNotNormalized { .. })));
    }

    #[test]
    fn one_hot_teacher_reduces_to_hard_cross_entropy() {
        let mut r = rng(3);
        for _ in 0..200 {
            let v = 7;
            let z: Vec<f64> = (0..v).map(|_| r.random_range(-5.0..5.0)).collect();
            let k = r.random_range(0..v);
            let mut t = vec![0.0; v];
            t[k] = 1.0;
            let logits = Tensor::matrix(1, v, z).unwrap();
            let d = distill_loss(&Tensor::matrix(1, v, t).unwrap(), &logits, 1.0).unwrap();
            let h = cross_entropy(&logits, &[Some(k)]).unwrap();
            assert!((d - h).abs() < 1e-9);
        }
    }

    #[test]
    fn student_matching_teacher_minimizes_loss() {
        let mut r = rng(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let logits = Tensor::matrix(1, 5, z.clone()).unwrap();
            let t = softmax(&logits, 1).unwrap();
            let entropy: f64 = -t.data().iter().map(|p| p * p.ln()).sum::<f64>();
            let at = distill_loss(&t, &logits, 1.0).unwrap();
            assert!((at - entropy).abs() < 1e-9);
            for i in 0..5 {
                for d in [-1e-2, 1e-2] {
                    let mut zz = z.clone();
                    zz[i] += d;
                    let moved = distill_loss(&t, &Tensor::matrix(1, 5, zz).unwrap(), 1.0).unwrap();
                    assert!(moved >= at - 1e-15);
                }
            }
        }
    }

    #[test]
    fn temperature_scales_by_t_squared() {
        let t = Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap();
        let s = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let z = [0.5f64, -0.5];
        let lse = (z[0].exp() + z[1].exp()).ln();
        let manual = -4.0 * (0.2 * (z[0] - lse) + 0.8 * (z[1] - lse));
        assert!((distill_loss(&t, &s, 2.0).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_examples() {
        assert_eq!(combined_distill_objective(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_distill_objective(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(combined_distill_objective(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(combined_distill_objective(2.0, 4.0, 1.5).is_err());
    }

    fn snippets(doc: &str, n: usize) -> Vec<Snippet> {
        (0..n)
            .map(|i| Snippet {
                doc_id: doc.into(),
                index: i,
                text: format!("s{i}"),
                start: 3 * i,
                end: 3 * i + 2,
            })
            .collect()
    }

    #[test]
    fn sop_pairs_are_adjacent() {
        let two = snippets("d", 2);
        let ex = build_sop_examples(&two, &mut rng(1), 50);
        for e in &ex {
            let pair = (e.seg_a.index, e.seg_b.index, e.label);
            assert!(pair == (0, 1, 1) || pair == (1, 0, 0), "{pair:?}");
        }
        assert!(build_sop_examples(&snippets("d", 1), &mut rng(1), 5).is_empty());
        let many = build_sop_examples(&snippets("d", 30), &mut rng(2), 10_000);
        let pos = many.iter().filter(|e| e.label == 1).count() as f64 / 1e4;
        assert!((pos - 0.5).abs() <= 0.02, "{pos}");
        assert!(many.iter().all(|e| e.seg_a.index.abs_diff(e.seg_b.index) == 1));
    }

    #[test]
    fn packing_respects_documents_and_length() {
        let v = Vocabulary::with_specials(["a", "b", "c"], crate::tokenizer::Provenance::Legal).unwrap();
        let mut s = Vec::new();
        for (d, texts) in [("x", vec!["a b", "c a b c", "a"]), ("y", vec!["b b"])] {
            for (i, t) in texts.into_iter().enumerate() {
                s.push(Snippet {
                    doc_id: d.into(),
                    index: i,
                    text: t.into(),
                    start: 0,
                    end: t.len(),
                });
            }
        }
        let seqs = pack_sequences(&v, &s, 6).unwrap();
        let (a, b, c) = (5, 6, 7);
        assert_eq!(
            seqs,
            vec![vec![CLS, a, b, SEP], vec![CLS, c, a, b, c, SEP], vec![CLS, a, SEP], vec![CLS, b, b, SEP]]
        );
        assert!(pack_sequences(&v, &s, 3).unwrap().iter().all(|q| q.len() == 3));
    }

    #[test]
    fn moving_average_is_recomputable() {
        let mut c = LossCurve::new(3);
        c.raw = vec![4.0, 2.0, 6.0, 1.0, 1.0];
        let m = c.moving_average();
        for i in 0..c.raw.len() {
            let lo = i.saturating_sub(2);
            let want = c.raw[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
            assert!((m[i] - want).abs() < 1e-12);
        }
        assert!(c.to_csv().starts_with("step,raw_loss,moving_avg\n1,4,4\n"));
    }

    #[test]
    fn pair_input_truncates_longer_side() {
        let a: Vec<usize> = vec![9; 600];
        let b: Vec<usize> = vec![8; 10];
        let p = pair_input(&a, &b, 512);
        assert_eq!(p.len(), 512);
        assert_eq!(p.ids.iter().filter(|&&i| i == 9).count(), 499);
        assert_eq!(p.segment_ids[500], 0);
        assert_eq!(p.segment_ids[501], 1);
    }

    fn toy_data(v: usize, n: usize, seed: u64) -> PretrainData {
        // sequences with a learnable pattern: each token follows its predecessor + 1
        let mut r = rng(seed);
        let sequences = (0..n)
            .map(|_| {
                let start = r.random_range(NUM_SPECIALS..v);
                let mut s = vec![CLS];
                for k in 0..8 {
                    s.push(NUM_SPECIALS + (start - NUM_SPECIALS + k) % (v - NUM_SPECIALS));
                }
                s.push(SEP);
                s
            })
            .collect();
        PretrainData {
            sequences,
            documents: Vec::new(),
        }
    }

    #[test]
    fn mlm_gradients_of_tiny_encoder() {
        let m = EncoderParams::new(tiny(50), 13).unwrap();
        let data = toy_data(50, 3, 1);
        let batch = mask_tokens(
            &data.sequences,
            50,
            &mut rng(2),
            &MaskingConfig {
                p_select: 0.5,
                ..MaskingConfig::default()
            },
        )
        .unwrap();
        let report = crate::nn::grad_check(
            &m.store,
            |g, store| {
                let mut view = m.clone();
                view.store = store.clone();
                mlm_batch_loss(&view, g, &batch, None)
            },
            crate::nn::GradCheckConfig {
                samples: 60,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn pretraining_reduces_loss_and_is_reproducible() {
        let data = toy_data(30, 64, 5);
        let spec = PretrainSpec {
            epochs: 4,
            batch_size: 16,
            maxlen: 64,
            lr: 3e-3,
            ..PretrainSpec::default()
        };
        let init = EncoderParams::new(tiny(30), 1).unwrap();
        let (m1, c1) = pretrain(init.clone(), &data, &spec, 9).unwrap();
        let (m2, c2) = pretrain(init.clone(), &data, &spec, 9).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1.store, m2.store);
        assert!(c1.epoch_means.windows(2).take(3).all(|w| w[1] < w[0]), "{:?}", c1.epoch_means);
        let (m0, c0) = pretrain(init.clone(), &data, &PretrainSpec { epochs: 0, ..spec.clone() }, 9).unwrap();
        assert_eq!(m0.store, init.store);
        assert!(c0.raw.is_empty());
    }

    #[test]
    fn sop_objective_trains_a_head() {
        let v = Vocabulary::with_specials(["a", "b", "c", "d"], crate::tokenizer::Provenance::Legal).unwrap();
        let texts = ["a b", "c d", "b c", "d a"];
        let s: Vec<Snippet> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Snippet {
                doc_id: "d".into(),
                index: i,
                text: t.to_string(),
                start: 0,
                end: 3,
            })
            .collect();
        let data = PretrainData::from_corpus(&v, &s, 8).unwrap();
        assert_eq!(data.documents.len(), 1);
        let spec = PretrainSpec {
            epochs: 1,
            batch_size: 2,
            maxlen: 8,
            lr: 1e-3,
            sop: true,
            ..PretrainSpec::default()
        };
        let (m, curve) = pretrain(EncoderParams::new(tiny(v.len()), 2).unwrap(), &data, &spec, 1).unwrap();
        assert!(m.head(SOP_HEAD).is_some());
        assert!(!curve.raw.is_empty());
    }

    #[test]
    fn student_takes_alternating_teacher_layers() {
        let mut tc = tiny(20);
        tc.num_layers = 4;
        let teacher = EncoderParams::new(tc.clone(), 3).unwrap();
        let student = init_student(&teacher, tc.distilled(), 4).unwrap();
        assert_eq!(student.config.num_layers, 2);
        let name_value = |m: &EncoderParams, n: &str| m.store.value(m.store.find(n).unwrap()).clone();
        assert_eq!(name_value(&student, "layer.1.attn.q.weight"), name_value(&teacher, "layer.2.attn.q.weight"));
        assert_eq!(name_value(&student, "embeddings.token"), name_value(&teacher, "embeddings.token"));
        assert!(student.store.find("embeddings.segment").is_none());
        assert!(student.store.find("pooler.weight").is_none());
        assert!(
            crate::encoder::param_count(&student.config).total < crate::encoder::param_count(&teacher.config).total
        );
        let mut other = tc.distilled();
        other.vocab_size = 21;
        assert!(matches!(init_student(&teacher, other, 0), Err(Error::VocabularyMismatch(_))));
    }

    #[test]
    fn distillation_with_zero_alpha_is_plain_mlm() {
        let data = toy_data(30, 16, 7);
        let spec = PretrainSpec {
            epochs: 1,
            batch_size: 8,
            maxlen: 64,
            lr: 1e-3,
            ..PretrainSpec::default()
        };
        let teacher = EncoderParams::new(tiny(30), 1).unwrap();
        let student = init_student(&teacher, teacher.config.distilled(), 2).unwrap();
        let d = DistillSpec {
            alpha: 0.0,
            temperature: 1.0,
        };
        let (a, ca) = distill_train(&teacher, student.clone(), &data, &spec, &d, 5).unwrap();
        let (b, cb) = pretrain(student, &data, &spec, 5).unwrap();
        for (x, y) in ca.raw.iter().zip(&cb.raw) {
            assert!((x - y).abs() < 1e-12);
        }
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            for (x, y) in p.value.data().iter().zip(q.value.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_rates_concentrate() {
        let mut r = rng(11);
        let seqs: Vec<Vec<usize>> = (0..2_000)
            .map(|_| {
                let mut s = vec![CLS];
                s.extend((0..100).map(|_| r.random_range(NUM_SPECIALS..500)));
                s.push(SEP);
                s
            })
            .collect();
        let b = mask_tokens(&seqs, 500, &mut r, &MaskingConfig::default()).unwrap();
        let st = masking_statistics(&seqs, &b);
        assert!((st["selected"] - 0.15).abs() < 0.005, "{st:?}");
        // random replacements that hit the original id count as kept
        assert!((st["mask"] - 0.8).abs() < 0.015, "{st:?}");
        assert!((st["random"] - 0.1).abs() < 0.015, "{st:?}");
        assert!((st["keep"] - 0.1).abs() < 0.015, "{st:?}");
        for (o, i) in seqs.iter().zip(&b.labels) {
            assert!(i[0].is_none() && i[o.len() - 1].is_none());
        }
    }
}
