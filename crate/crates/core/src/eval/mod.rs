//! Experimental protocol: splits, metrics, early stopping, seed aggregation
//! and reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedInput, EncoderParams};
use crate::error::{Error, Result};
use crate::tasks::{
    encode_example, finetune, EncodedExample, FinetuneReport, FinetuneSpec, NerExample, Target, Task, TaskExample,
    TaskModel,
};
use crate::tokenizer::Vocabulary;

pub const MIN_SPLIT_ITEMS: usize = 10;
pub const MIN_TIMING_PASSES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must be in [0, 1] and sum to 1", self.ratios)));
        }
        Ok(())
    }
}

/// Index sets into the split dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn select<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// Seeded shuffle of `0..n` cut at the ratios. Train and validation sizes
/// are the rounded shares; test takes the rest.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n < MIN_SPLIT_ITEMS {
        return Err(Error::Eval(format!("need at least {MIN_SPLIT_ITEMS} items to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((n as f64) * spec.ratios[0]).round() as usize;
    let n_val = (((n as f64) * spec.ratios[1]).round() as usize).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Like [`split`], but over distinct keys: items sharing a key land in the
/// same part, and the ratios apply to the number of keys.
pub fn split_grouped<S: AsRef<str>>(keys: &[S], spec: &SplitSpec) -> Result<Split> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let item_group: Vec<usize> = keys
        .iter()
        .map(|k| {
            let next = ids.len();
            *ids.entry(k.as_ref()).or_insert(next)
        })
        .collect();
    let groups = split(ids.len(), spec)?;
    let mut part = vec![0u8; ids.len()];
    for &g in &groups.val {
        part[g] = 1;
    }
    for &g in &groups.test {
        part[g] = 2;
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, &g) in item_group.iter().enumerate() {
        match part[g] {
            0 => out.train.push(i),
            1 => out.val.push(i),
            _ => out.test.push(i),
        }
    }
    Ok(out)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// F1 of the positive class.
pub fn binary_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if let Some(v) = preds.iter().chain(golds).find(|&&v| v > 1) {
        return Err(Error::Eval(format!("binary metric got label {v}")));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1(tp, fp, fn_))
}

/// Token-level micro F1 over entity tags. `O` is never a class, but a tag
/// predicted on a gold `O` token still counts as a false positive.
pub fn token_micro_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        let (p_ent, g_ent) = (p != "O", g != "O");
        if p_ent && g_ent && p == g {
            tp += 1;
        } else {
            fp += usize::from(p_ent);
            fn_ += usize::from(g_ent);
        }
    }
    Ok(f1(tp, fp, fn_))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

impl Decision {
    pub fn is_stop(self) -> bool {
        self == Decision::Stop
    }
}

/// Incremental early stopping on validation loss. Patience 0 behaves like 1.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            epochs: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Decision {
        self.epochs += 1;
        let improved = match self.best {
            None => !loss.is_nan(),
            Some((_, b)) => loss < b,
        };
        if improved {
            self.best = Some((self.epochs, loss));
            self.stale = 0;
            Decision::Continue
        } else {
            self.stale += 1;
            if self.stale >= self.patience.max(1) {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    /// 1-based epoch with the lowest loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopPoint {
    /// 1-based epoch after which training stops; `None` if it never does.
    pub stop_epoch: Option<usize>,
    pub best_epoch: usize,
}

pub fn early_stopping(val_losses: &[f64], patience: usize) -> Result<StopPoint> {
    if val_losses.is_empty() {
        return Err(Error::Eval("early stopping needs at least one epoch".into()));
    }
    let mut s = EarlyStopping::new(patience);
    let mut stop_epoch = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if s.observe(l).is_stop() {
            stop_epoch = Some(i + 1);
            break;
        }
    }
    Ok(StopPoint {
        stop_epoch,
        best_epoch: s.best_epoch().unwrap_or(1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub model_tag: String,
    pub seed: u64,
    pub f1: f64,
    pub train_hours_per_epoch: f64,
    pub predict_ms_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: Task,
    pub model_tag: String,
    pub seeds: Vec<u64>,
    pub mean_f1: f64,
    pub std_f1: f64,
    /// Set when only one seed was run; `std_f1` is then 0.
    pub single_seed: bool,
    pub train_hours_per_epoch: f64,
    pub predict_ms_per_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean and sample standard deviation per (task, model tag).
pub fn aggregate(results: &[RunResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Eval("no results to aggregate".into()));
    }
    let mut cells: BTreeMap<(Task, &str), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if r.model_tag.trim().is_empty() {
            return Err(Error::Eval("result without a model tag".into()));
        }
        if !(0.0..=1.0).contains(&r.f1) || r.train_hours_per_epoch < 0.0 || r.predict_ms_per_sample < 0.0 {
            return Err(Error::Eval(format!("{} / {} seed {}: values out of range", r.task, r.model_tag, r.seed)));
        }
        cells.entry((r.task, r.model_tag.as_str())).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((task, tag), mut runs) in cells {
        runs.sort_by_key(|r| r.seed);
        if runs.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::Eval(format!("{task} / {tag}: seed reported twice")));
        }
        let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        rows.push(ReportRow {
            task,
            model_tag: tag.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_f1: mean(&f1s),
            std_f1: sample_std(&f1s),
            single_seed: runs.len() == 1,
            train_hours_per_epoch: mean(&runs.iter().map(|r| r.train_hours_per_epoch).collect::<Vec<_>>()),
            predict_ms_per_sample: mean(&runs.iter().map(|r| r.predict_ms_per_sample).collect::<Vec<_>>()),
        });
    }
    Ok(Report { rows })
}

impl Report {
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("task,model_tag,seeds,mean_f1,std_f1,single_seed");
        if timing {
            out.push_str(",train_hours_per_epoch,predict_ms_per_sample");
        }
        out.push('\n');
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = write!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                r.task,
                r.model_tag,
                seeds.join(";"),
                r.mean_f1,
                r.std_f1,
                r.single_seed
            );
            if timing {
                let _ = write!(out, ",{:.8},{:.4}", r.train_hours_per_epoch, r.predict_ms_per_sample);
            }
            out.push('\n');
        }
        out
    }

    fn table(&self, cell: impl Fn(&ReportRow) -> String) -> String {
        let tasks: BTreeSet<Task> = self.rows.iter().map(|r| r.task).collect();
        let mut tags: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tags.contains(&r.model_tag.as_str()) {
                tags.push(&r.model_tag);
            }
        }
        let mut grid = vec![std::iter::once("model".to_string()).chain(tasks.iter().map(Task::to_string)).collect::<Vec<_>>()];
        for tag in &tags {
            let mut line = vec![tag.to_string()];
            for t in &tasks {
                line.push(
                    self.rows
                        .iter()
                        .find(|r| r.task == *t && r.model_tag == *tag)
                        .map(&cell)
                        .unwrap_or_else(|| "-".into()),
                );
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &grid {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Rows are model tags, columns tasks, cells `mean (± std)`.
    pub fn performance_table(&self) -> String {
        self.table(|r| {
            let flag = if r.single_seed { "*" } else { "" };
            format!("{:.3} (± {:.3}){flag}", r.mean_f1, r.std_f1)
        })
    }

    /// Training hours per epoch and prediction milliseconds per sample.
    pub fn timing_table(&self) -> String {
        self.table(|r| format!("{:.2e} h / {:.2} ms", r.train_hours_per_epoch, r.predict_ms_per_sample))
    }
}

/// Share of entity tokens per class; `B-` and `I-` tags count toward the
/// same class.
pub fn class_distribution(examples: &[NerExample]) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for e in examples {
        for t in &e.tags {
            if let Some(c) = t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")) {
                *counts.entry(c.to_string()).or_default() += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Eval("no entity tokens".into()));
    }
    Ok(counts.into_iter().map(|(c, n)| (c, n as f64 / total as f64)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_hours_per_epoch: f64,
    pub predict_ms_per_sample: f64,
}

/// Mean wall-clock time of one single-sample forward pass, cycling through
/// `inputs` for at least `passes` passes.
pub fn prediction_ms(model: &TaskModel, inputs: &[EncodedInput], passes: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Eval("no inputs to time".into()));
    }
    let n = passes.max(inputs.len());
    let started = Instant::now();
    for input in inputs.iter().cycle().take(n) {
        model.predict_proba(input)?;
    }
    Ok(started.elapsed().as_secs_f64() * 1000.0 / n as f64)
}

pub fn measure_timing(report: &FinetuneReport, model: &TaskModel, test: &[EncodedInput]) -> Result<Timing> {
    Ok(Timing {
        train_hours_per_epoch: report.train_hours_per_epoch(),
        predict_ms_per_sample: prediction_ms(model, test, MIN_TIMING_PASSES)?,
    })
}

/// Test-set F1 of a fine-tuned model: binary F1 for sequence tasks, token
/// micro F1 over supervised positions for tagging.
pub fn test_f1(model: &TaskModel, test: &[EncodedExample]) -> Result<f64> {
    match model.task {
        Task::Ner => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for e in test {
                let Target::Tokens(labels) = &e.target else {
                    return Err(Error::Dataset("tagging task needs token targets".into()));
                };
                let p = model.predict(&e.input)?;
                for (&pi, l) in p.iter().zip(labels) {
                    if let Some(g) = l {
                        pred.push(tag_key(pi));
                        gold.push(tag_key(*g));
                    }
                }
            }
            token_micro_f1(&pred, &gold)
        }
        _ => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for e in test {
                let Target::Class(g) = e.target else {
                    return Err(Error::Dataset("sequence task needs class targets".into()));
                };
                pred.push(model.predict(&e.input)?[0]);
                gold.push(g);
            }
            binary_f1(&pred, &gold)
        }
    }
}

fn tag_key(id: usize) -> String {
    if id == crate::tasks::OUTSIDE {
        "O".into()
    } else {
        id.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub finetune: FinetuneSpec,
    pub maxlen: usize,
    pub ratios: [f64; 3],
    /// Lower bound on timed single-sample passes.
    pub timing_passes: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            finetune: FinetuneSpec::default(),
            maxlen: 512,
            ratios: [0.8, 0.1, 0.1],
            timing_passes: MIN_TIMING_PASSES,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub result: RunResult,
    pub report: FinetuneReport,
    pub model: TaskModel,
}

/// One fine-tuning run per seed. Each seed draws its own split, head
/// initialization and batch order.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    encoder: &EncoderParams,
    vocab: &Vocabulary,
    task: Task,
    examples: &[TaskExample],
    num_classes: usize,
    seeds: &[u64],
    spec: &ProtocolSpec,
    model_tag: &str,
) -> Result<Vec<SeedRun>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if vocab.len() != encoder.config.vocab_size {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} tokens, vocabulary {}",
            encoder.config.vocab_size,
            vocab.len()
        )));
    }
    let encoded = examples
        .iter()
        .map(|e| encode_example(vocab, e, spec.maxlen))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<&str> = examples.iter().map(TaskExample::group).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let parts = split_grouped(&keys, &SplitSpec { ratios: spec.ratios, seed })?;
        let (train, val, test) = parts.select(&encoded);
        let model = TaskModel::new(encoder.clone(), task, num_classes, seed)?;
        let (model, report) = finetune(model, &train, &val, &spec.finetune, seed)?;
        let f1 = test_f1(&model, &test)?;
        let inputs: Vec<EncodedInput> = test.iter().map(|e| e.input.clone()).collect();
        let predict_ms = prediction_ms(&model, &inputs, spec.timing_passes)?;
        info!("{model_tag} {task} seed {seed}: F1 {f1:.4}");
        runs.push(SeedRun {
            result: RunResult {
                task,
                model_tag: model_tag.to_string(),
                seed,
                f1,
                train_hours_per_epoch: report.train_hours_per_epoch(),
                predict_ms_per_sample: predict_ms,
            },
            report,
            model,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_items_split_exactly() {
        let s = split(100, &SplitSpec::new(3)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split(100, &SplitSpec::new(3)).unwrap());
        assert_ne!(s, split(100, &SplitSpec::new(4)).unwrap());
        assert!(split(9, &SplitSpec::new(3)).is_err());
        assert!(split(
            100,
            &SplitSpec {
                ratios: [0.5, 0.5, 0.5],
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn groups_stay_together() {
        let keys: Vec<String> = (0..200).map(|i| format!("g{}", i / 7)).collect();
        let s = split_grouped(&keys, &SplitSpec::new(1)).unwrap();
        let part_of = |i: usize| {
            if s.train.contains(&i) {
                0
            } else if s.val.contains(&i) {
                1
            } else {
                2
            }
        };
        for i in 0..200 {
            for j in 0..200 {
                if keys[i] == keys[j] {
                    assert_eq!(part_of(i), part_of(j));
                }
            }
        }
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
    }

    /// Brute-force confusion matrix over every label class.
    fn oracle_binary(p: &[usize], g: &[usize]) -> f64 {
        let count = |a: usize, b: usize| p.iter().zip(g).filter(|(x, y)| **x == a && **y == b).count() as f64;
        let (tp, fp, fn_) = (count(1, 1), count(1, 0), count(0, 1));
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    fn oracle_token(p: &[&str], g: &[&str]) -> f64 {
        let classes: BTreeSet<&str> = p.iter().chain(g).copied().filter(|t| *t != "O").collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for c in classes {
            for (x, y) in p.iter().zip(g) {
                match (*x == c, *y == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
        }
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    }

    #[test]
    fn binary_f1_examples() {
        assert_eq!(binary_f1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(binary_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(binary_f1(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert!(binary_f1(&[1], &[1, 0]).is_err());
        assert!(binary_f1(&[2], &[1]).is_err());
    }

    #[test]
    fn token_f1_examples() {
        assert!((token_micro_f1(&["B-A", "B-B"], &["B-A", "O"]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_micro_f1(&["B-A", "I-A", "O"], &["B-A", "I-A", "O"]).unwrap(), 1.0);
        assert_eq!(token_micro_f1(&["O", "O"], &["B-A", "I-A"]).unwrap(), 0.0);
        assert!(token_micro_f1(&["O"], &["O", "O"]).is_err());
    }

    #[test]
    fn metrics_match_brute_force_on_random_cases() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tags = ["O", "O", "O", "B-A", "I-A", "B-B", "I-B"];
        for _ in 0..1000 {
            let n = rng.random_range(1..30);
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            assert!((binary_f1(&p, &g).unwrap() - oracle_binary(&p, &g)).abs() < 1e-12);
            let pt: Vec<&str> = (0..n).map(|_| tags[rng.random_range(0..tags.len())]).collect();
            let gt: Vec<&str> = (0..n).map(|_| tags[rng.random_range(0..tags.len())]).collect();
            assert!((token_micro_f1(&pt, &gt).unwrap() - oracle_token(&pt, &gt)).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_rules() {
        assert_eq!(
            early_stopping(&[1.0, 1.1, 1.2, 1.3], 3).unwrap(),
            StopPoint {
                stop_epoch: Some(4),
                best_epoch: 1
            }
        );
        assert_eq!(early_stopping(&[5.0, 4.0, 3.0, 2.0, 1.0], 3).unwrap().stop_epoch, None);
        assert_eq!(early_stopping(&[1.0, 0.5, 0.7, 0.4], 0).unwrap().stop_epoch, Some(3));
        assert!(early_stopping(&[], 3).is_err());
    }

    fn run(task: Task, tag: &str, seed: u64, f1: f64) -> RunResult {
        RunResult {
            task,
            model_tag: tag.into(),
            seed,
            f1,
            train_hours_per_epoch: 0.001,
            predict_ms_per_sample: 2.0,
        }
    }

    #[test]
    fn aggregation() {
        let r = aggregate(&[run(Task::Ner, "GP", 0, 0.8), run(Task::Ner, "GP", 1, 0.9)]).unwrap();
        assert!((r.rows[0].mean_f1 - 0.85).abs() < 1e-12);
        assert!((r.rows[0].std_f1 - 0.070_710_678).abs() < 1e-6);
        let same = aggregate(&[run(Task::Ner, "GP", 0, 0.7), run(Task::Ner, "GP", 1, 0.7)]).unwrap();
        assert_eq!(same.rows[0].std_f1, 0.0);
        let single = aggregate(&[run(Task::Ner, "GP", 0, 0.7)]).unwrap();
        assert!(single.rows[0].single_seed && single.rows[0].std_f1 == 0.0);
        assert!(aggregate(&[run(Task::Ner, "GP", 0, 0.7), run(Task::Ner, "GP", 0, 0.8)]).is_err());
        assert!(aggregate(&[run(Task::Ner, "", 0, 0.7)]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_layouts() {
        let r = aggregate(&[
            run(Task::Ner, "GP", 0, 0.8),
            run(Task::Ner, "GP", 1, 0.9),
            run(Task::Obligation, "LR", 0, 0.5),
        ])
        .unwrap();
        let csv = r.to_csv(false);
        assert!(csv.starts_with("task,model_tag,seeds,mean_f1,std_f1,single_seed\n"));
        assert!(csv.contains("ner,GP,0;1,0.850000,0.070711,false"));
        assert!(!csv.contains("predict"));
        assert!(r.to_csv(true).lines().next().unwrap().ends_with("predict_ms_per_sample"));
        let table = r.performance_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("model") && lines[0].contains("ner") && lines[0].contains("obligation"));
        assert!(lines[1].starts_with("GP") && lines[1].contains("0.850 (± 0.071)") && lines[1].ends_with('-'));
        assert!(lines[2].contains("0.500 (± 0.000)*"));
        assert!(r.timing_table().contains("ms"));
    }

    #[test]
    fn class_shares() {
        let ex = |tags: &[&str]| NerExample {
            doc_id: "d".into(),
            index: 0,
            tokens: tags.iter().map(|_| "w".to_string()).collect(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        };
        let d = class_distribution(&[ex(&["B-A", "I-A", "O"]), ex(&["B-A", "B-B"])]).unwrap();
        assert_eq!(d, BTreeMap::from([("A".to_string(), 0.75), ("B".to_string(), 0.25)]));
        assert_eq!(class_distribution(&[ex(&["B-X"])]).unwrap()["X"], 1.0);
        assert!(class_distribution(&[ex(&["O"])]).is_err());
    }

    #[test]
    fn zero_epoch_run_has_zero_train_time() {
        assert_eq!(FinetuneReport::default().train_hours_per_epoch(), 0.0);
    }

    proptest! {
        #[test]
        fn splits_partition_the_dataset(n in 10usize..400, seed in any::<u64>()) {
            let s = split(n, &SplitSpec::new(seed)).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!((s.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
            prop_assert!((s.val.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
            prop_assert!((s.test.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
        }

        #[test]
        fn aggregate_mean_ignores_order(f1s in prop::collection::vec(0.0f64..1.0, 1..8), rot in 0usize..8) {
            let runs: Vec<RunResult> = f1s.iter().enumerate().map(|(i, &f)| run(Task::Similarity, "T", i as u64, f)).collect();
            let mut rotated = runs.clone();
            rotated.rotate_left(rot % runs.len());
            let a = aggregate(&runs).unwrap();
            let b = aggregate(&rotated).unwrap();
            prop_assert!((a.rows[0].mean_f1 - b.rows[0].mean_f1).abs() < 1e-12);
            prop_assert!((a.rows[0].std_f1 - b.rows[0].std_f1).abs() < 1e-12);
        }
    }
}
