//! Annotation file records, one JSON object per line.

use serde::{Deserialize, Serialize};

/// Answers to one question within one document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalAnnotation {
    pub doc_id: String,
    pub question_id: String,
    pub question: String,
    pub answer_snippet_indices: Vec<usize>,
}

/// Character span `[start, end)` into the document text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerAnnotation {
    pub doc_id: String,
    pub spans: Vec<EntitySpan>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnippetRef {
    pub doc_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: SnippetRef,
    pub b: SnippetRef,
    pub label: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityAnnotation {
    pub question_id: String,
    pub pairs: Vec<LabeledPair>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObligationAnnotation {
    pub doc_id: String,
    pub index: usize,
    pub label: i64,
}
