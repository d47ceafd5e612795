//! Datasets, encoding and fine-tuning for the four review tasks.

mod finetune;
pub mod schema;

pub use finetune::{finetune, rank_snippets, FinetuneReport, FinetuneSpec, TaskModel};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::encoder::EncodedInput;
use crate::error::{Error, Result};
use crate::objectives::pair_input;
use crate::tokenizer::{Vocabulary, CLS, SEP};
use schema::{NerAnnotation, ObligationAnnotation, RetrievalAnnotation, SimilarityAnnotation, SnippetRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Similarity,
    Ner,
    Obligation,
}

pub const TASKS: [Task; 4] = [Task::Retrieval, Task::Similarity, Task::Ner, Task::Obligation];

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::Similarity => "similarity",
            Task::Ner => "ner",
            Task::Obligation => "obligation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TASKS
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}; expected retrieval, similarity, ner or obligation")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalExample {
    pub question_id: String,
    pub question: String,
    pub snippet: Snippet,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityExample {
    pub question_id: String,
    pub snippet_a: Snippet,
    pub snippet_b: Snippet,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerExample {
    pub doc_id: String,
    pub index: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObligationExample {
    pub snippet: Snippet,
    pub label: u8,
}

/// Task-independent labeled record. `group` keeps related records in one
/// split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskExample {
    Pair {
        group: String,
        a: String,
        b: String,
        label: usize,
    },
    Single {
        group: String,
        text: String,
        label: usize,
    },
    Tagged {
        group: String,
        tokens: Vec<String>,
        tags: Vec<usize>,
    },
}

impl TaskExample {
    pub fn group(&self) -> &str {
        match self {
            TaskExample::Pair { group, .. } | TaskExample::Single { group, .. } | TaskExample::Tagged { group, .. } => {
                group
            }
        }
    }
}

impl From<&RetrievalExample> for TaskExample {
    fn from(e: &RetrievalExample) -> Self {
        TaskExample::Pair {
            group: format!("{}\u{1f}{}", e.snippet.doc_id, e.question_id),
            a: e.question.clone(),
            b: e.snippet.text.clone(),
            label: e.label.into(),
        }
    }
}

impl From<&SimilarityExample> for TaskExample {
    fn from(e: &SimilarityExample) -> Self {
        TaskExample::Pair {
            group: format!(
                "{}:{}|{}:{}",
                e.snippet_a.doc_id, e.snippet_a.index, e.snippet_b.doc_id, e.snippet_b.index
            ),
            a: e.snippet_a.text.clone(),
            b: e.snippet_b.text.clone(),
            label: e.label.into(),
        }
    }
}

impl From<&ObligationExample> for TaskExample {
    fn from(e: &ObligationExample) -> Self {
        TaskExample::Single {
            group: format!("{}:{}", e.snippet.doc_id, e.snippet.index),
            text: e.snippet.text.clone(),
            label: e.label.into(),
        }
    }
}

/// BIO tag inventory: `O`, then `B-c`, `I-c` for every class `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    classes: Vec<String>,
    by_name: HashMap<String, usize>,
}

pub const OUTSIDE: usize = 0;

impl TagSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(classes: I) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let mut by_name = HashMap::new();
        by_name.insert("O".to_string(), OUTSIDE);
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() || c == "O" {
                return Err(Error::Config(format!("invalid entity class {c:?}")));
            }
            if by_name.insert(format!("B-{c}"), 2 * i + 1).is_some() {
                return Err(Error::DuplicateId(c.clone()));
            }
            by_name.insert(format!("I-{c}"), 2 * i + 2);
        }
        Ok(Self { classes, by_name })
    }

    /// Tag set over the generator's entity classes.
    pub fn synthetic() -> Self {
        Self::new(crate::corpus::synth::entity_classes()).expect("distinct class names")
    }

    pub fn len(&self) -> usize {
        2 * self.classes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn begin(&self, class: usize) -> usize {
        2 * class + 1
    }

    pub fn inside(&self, class: usize) -> usize {
        2 * class + 2
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.by_name.get(tag).copied()
    }

    pub fn name(&self, id: usize) -> String {
        match id {
            OUTSIDE => "O".into(),
            _ => {
                let c = &self.classes[(id - 1) / 2];
                if id % 2 == 1 {
                    format!("B-{c}")
                } else {
                    format!("I-{c}")
                }
            }
        }
    }
}

/// `true` when every `I-X` follows `B-X` or `I-X`.
pub fn bio_valid<S: AsRef<str>>(tags: &[S]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        let t = t.as_ref();
        if let Some(class) = t.strip_prefix("I-") {
            let ok = matches!(prev, Some(p) if p.strip_prefix("B-").or_else(|| p.strip_prefix("I-")) == Some(class));
            if !ok {
                return false;
            }
        }
        prev = Some(t);
    }
    true
}

/// Snippets grouped by document, each list ordered by index.
pub fn snippets_by_doc(snippets: &[Snippet]) -> BTreeMap<String, Vec<Snippet>> {
    let mut m: BTreeMap<String, Vec<Snippet>> = BTreeMap::new();
    for s in snippets {
        m.entry(s.doc_id.clone()).or_default().push(s.clone());
    }
    for v in m.values_mut() {
        v.sort_by_key(|s| s.index);
    }
    m
}

fn lookup<'a>(docs: &'a BTreeMap<String, Vec<Snippet>>, doc_id: &str, index: usize) -> Result<&'a Snippet> {
    docs.get(doc_id)
        .and_then(|v| v.get(index))
        .filter(|s| s.index == index)
        .ok_or_else(|| Error::Annotation(format!("snippet {doc_id}:{index} does not exist")))
}

fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Positives are all annotated answers; negatives are up to
/// `negatives_per_question` uniform draws without replacement from the
/// document's other snippets.
pub fn build_retrieval_dataset(
    annotations: &[RetrievalAnnotation],
    docs: &BTreeMap<String, Vec<Snippet>>,
    negatives_per_question: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RetrievalExample>> {
    let mut out = Vec::new();
    for ann in annotations {
        let answers: BTreeSet<usize> = ann.answer_snippet_indices.iter().copied().collect();
        for &i in &answers {
            out.push(RetrievalExample {
                question_id: ann.question_id.clone(),
                question: ann.question.clone(),
                snippet: lookup(docs, &ann.doc_id, i)?.clone(),
                label: 1,
            });
        }
        let pool: Vec<&Snippet> = docs
            .get(&ann.doc_id)
            .ok_or_else(|| Error::Annotation(format!("document {} has no snippets", ann.doc_id)))?
            .iter()
            .filter(|s| !answers.contains(&s.index))
            .collect();
        if pool.len() < negatives_per_question {
            warn!(
                "{} / {}: only {} negatives available, taking all",
                ann.doc_id,
                ann.question_id,
                pool.len()
            );
        }
        for i in sample_sorted(rng, pool.len(), negatives_per_question) {
            out.push(RetrievalExample {
                question_id: ann.question_id.clone(),
                question: ann.question.clone(),
                snippet: pool[i].clone(),
                label: 0,
            });
        }
    }
    Ok(out)
}

/// Question id → annotated answers across all documents.
pub fn answer_groups(annotations: &[RetrievalAnnotation]) -> BTreeMap<String, Vec<SnippetRef>> {
    let mut m: BTreeMap<String, Vec<SnippetRef>> = BTreeMap::new();
    for a in annotations {
        let g = m.entry(a.question_id.clone()).or_default();
        for &index in &a.answer_snippet_indices {
            g.push(SnippetRef {
                doc_id: a.doc_id.clone(),
                index,
            });
        }
    }
    for g in m.values_mut() {
        g.sort();
        g.dedup();
    }
    m
}

/// Pairs of answers to the same question from different documents, labeled
/// by `labels`. Returns the examples and the number of unlabeled pairs left
/// out.
pub fn build_similarity_dataset(
    groups: &BTreeMap<String, Vec<SnippetRef>>,
    labels: &[SimilarityAnnotation],
    docs: &BTreeMap<String, Vec<Snippet>>,
) -> Result<(Vec<SimilarityExample>, usize)> {
    let mut known: HashMap<(&str, &SnippetRef, &SnippetRef), u8> = HashMap::new();
    for ann in labels {
        for p in &ann.pairs {
            let label = binary(p.label, &format!("similarity pair in {}", ann.question_id))?;
            let (x, y) = if p.a <= p.b { (&p.a, &p.b) } else { (&p.b, &p.a) };
            known.insert((ann.question_id.as_str(), x, y), label);
        }
    }
    let mut out = Vec::new();
    let mut missing = 0;
    for (q, group) in groups {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (&group[i], &group[j]);
                if a.doc_id == b.doc_id {
                    continue;
                }
                match known.get(&(q.as_str(), a, b)) {
                    Some(&label) => out.push(SimilarityExample {
                        question_id: q.clone(),
                        snippet_a: lookup(docs, &a.doc_id, a.index)?.clone(),
                        snippet_b: lookup(docs, &b.doc_id, b.index)?.clone(),
                        label,
                    }),
                    None => missing += 1,
                }
            }
        }
    }
    if missing > 0 {
        warn!("{missing} candidate similarity pairs have no label and were excluded");
    }
    Ok((out, missing))
}

fn binary(label: i64, what: &str) -> Result<u8> {
    match label {
        0 | 1 => Ok(label as u8),
        other => Err(Error::Annotation(format!("{what}: label {other} is not binary"))),
    }
}

/// Whitespace tokens of `text` with their char ranges.
fn token_spans(text: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    let mut chars = 0;
    for (b, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                out.push((cs, chars, &text[bs..b]));
            }
        } else if start.is_none() {
            start = Some((chars, b));
        }
        chars += 1;
    }
    if let Some((cs, bs)) = start {
        out.push((cs, chars, &text[bs..]));
    }
    out
}

/// BIO-tagged snippets: every snippet touched by a span, plus up to
/// `negative_snippets` sampled from snippets without entities.
pub fn build_ner_dataset(
    annotations: &[NerAnnotation],
    docs: &BTreeMap<String, Vec<Snippet>>,
    tagset: &TagSet,
    negative_snippets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NerExample>> {
    let mut by_doc: BTreeMap<&str, Vec<&schema::EntitySpan>> = BTreeMap::new();
    for ann in annotations {
        by_doc.entry(ann.doc_id.as_str()).or_default().extend(ann.spans.iter());
    }
    let mut out = Vec::new();
    let mut tagged: BTreeSet<(String, usize)> = BTreeSet::new();
    for (doc_id, spans) in &mut by_doc {
        let snippets = docs
            .get(*doc_id)
            .ok_or_else(|| Error::Annotation(format!("document {doc_id} has no snippets")))?;
        spans.sort_by_key(|s| (s.start, s.end));
        for w in spans.windows(2) {
            if w[1].start < w[0].end && w[1].class != w[0].class {
                return Err(Error::Annotation(format!(
                    "{doc_id}: span {}..{} ({}) overlaps {}..{} ({})",
                    w[0].start, w[0].end, w[0].class, w[1].start, w[1].end, w[1].class
                )));
            }
        }
        for s in snippets {
            let here: Vec<&&schema::EntitySpan> =
                spans.iter().filter(|e| e.start < s.end && e.end > s.start).collect();
            if here.is_empty() {
                continue;
            }
            let toks = token_spans(&s.text);
            let mut tags = vec![OUTSIDE; toks.len()];
            for e in here {
                let class = tagset
                    .class_index(&e.class)
                    .ok_or_else(|| Error::Annotation(format!("{doc_id}: unknown entity class {:?}", e.class)))?;
                if e.start < s.start || e.end > s.end {
                    warn!("{doc_id}: span {}..{} crosses a snippet boundary; clipped", e.start, e.end);
                }
                let (lo, hi) = (e.start.max(s.start) - s.start, e.end.min(s.end) - s.start);
                let mut first = true;
                for (t, &(ts, te, _)) in toks.iter().enumerate() {
                    if ts < hi && te > lo {
                        if ts < lo || te > hi {
                            warn!("{doc_id}: span {}..{} snapped outward to token boundaries", e.start, e.end);
                        }
                        tags[t] = if first { tagset.begin(class) } else { tagset.inside(class) };
                        first = false;
                    }
                }
            }
            tagged.insert((s.doc_id.clone(), s.index));
            out.push(NerExample {
                doc_id: s.doc_id.clone(),
                index: s.index,
                tokens: toks.iter().map(|t| t.2.to_string()).collect(),
                tags: tags.iter().map(|&t| tagset.name(t)).collect(),
            });
        }
    }
    let pool: Vec<&Snippet> = docs
        .values()
        .flatten()
        .filter(|s| !tagged.contains(&(s.doc_id.clone(), s.index)))
        .collect();
    if pool.len() < negative_snippets {
        warn!("only {} entity-free snippets available as negatives", pool.len());
    }
    for i in sample_sorted(rng, pool.len(), negative_snippets) {
        let s = pool[i];
        let toks = token_spans(&s.text);
        out.push(NerExample {
            doc_id: s.doc_id.clone(),
            index: s.index,
            tokens: toks.iter().map(|t| t.2.to_string()).collect(),
            tags: vec!["O".into(); toks.len()],
        });
    }
    Ok(out)
}

impl NerExample {
    pub fn to_task_example(&self, tagset: &TagSet) -> Result<TaskExample> {
        let tags = self
            .tags
            .iter()
            .map(|t| tagset.id(t).ok_or_else(|| Error::Dataset(format!("unknown tag {t:?}"))))
            .collect::<Result<_>>()?;
        Ok(TaskExample::Tagged {
            group: format!("{}:{}", self.doc_id, self.index),
            tokens: self.tokens.clone(),
            tags,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total: usize,
    pub positives: usize,
    pub positive_share: f64,
}

/// Validated pass-through of labeled snippets with a class-balance report.
pub fn build_obligation_dataset(
    labels: &[ObligationAnnotation],
    docs: &BTreeMap<String, Vec<Snippet>>,
) -> Result<(Vec<ObligationExample>, BalanceReport)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(labels.len());
    for a in labels {
        if !seen.insert((a.doc_id.as_str(), a.index)) {
            return Err(Error::Annotation(format!("duplicate snippet {}:{}", a.doc_id, a.index)));
        }
        out.push(ObligationExample {
            snippet: lookup(docs, &a.doc_id, a.index)?.clone(),
            label: binary(a.label, &format!("{}:{}", a.doc_id, a.index))?,
        });
    }
    let positives = out.iter().filter(|e| e.label == 1).count();
    let report = BalanceReport {
        total: out.len(),
        positives,
        positive_share: if out.is_empty() { 0.0 } else { positives as f64 / out.len() as f64 },
    };
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    /// Per-position tag; only the first subword of each word is supervised.
    Tokens(Vec<Option<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub input: EncodedInput,
    pub target: Target,
}

/// Packs an example for the encoder, truncating to `maxlen` ids.
pub fn encode_example(vocab: &Vocabulary, example: &TaskExample, maxlen: usize) -> Result<EncodedExample> {
    let min = if matches!(example, TaskExample::Pair { .. }) { 3 } else { 2 };
    if maxlen < min {
        return Err(Error::Config(format!("maxlen {maxlen} is too small")));
    }
    Ok(match example {
        TaskExample::Pair { a, b, label, .. } => EncodedExample {
            input: pair_input(&vocab.encode(a), &vocab.encode(b), maxlen),
            target: Target::Class(*label),
        },
        TaskExample::Single { text, label, .. } => {
            let mut ids = vocab.encode(text);
            ids.truncate(maxlen - 2);
            EncodedExample {
                input: crate::encoder::wrap_single(&ids),
                target: Target::Class(*label),
            }
        }
        TaskExample::Tagged { tokens, tags, .. } => {
            if tokens.len() != tags.len() {
                return Err(Error::LengthMismatch {
                    left: tokens.len(),
                    right: tags.len(),
                });
            }
            let mut ids = vec![CLS];
            let mut labels = vec![None];
            'words: for (word, &tag) in tokens.iter().zip(tags) {
                for (k, piece) in vocab.encode_word(word).into_iter().enumerate() {
                    if ids.len() == maxlen - 1 {
                        break 'words;
                    }
                    ids.push(piece);
                    labels.push(if k == 0 { Some(tag) } else { None });
                }
            }
            ids.push(SEP);
            labels.push(None);
            EncodedExample {
                input: EncodedInput::single(ids),
                target: Target::Tokens(labels),
            }
        }
    })
}
