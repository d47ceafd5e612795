//! Document ingestion, punctuation-driven snippet splitting and corpus
//! statistics.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// A contiguous piece of a document delimited by sentence punctuation.
///
/// `start`/`end` are character (not byte) offsets into the document text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snippet {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Width of a sentence-length histogram bucket, in tokens.
pub const BUCKET_WIDTH: usize = 10;
/// Lower bound of the open-ended last bucket.
pub const LAST_BUCKET: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_documents: usize,
    pub num_snippets: usize,
    pub word_freq: BTreeMap<String, u64>,
    /// Keyed by bucket lower bound; the `LAST_BUCKET` key collects everything longer.
    pub tokens_per_snippet_histogram: BTreeMap<usize, usize>,
    pub mean_tokens_per_snippet: f64,
}

/// How snippet lengths are counted.
#[derive(Clone, Copy, Debug)]
pub enum TokenizeMode<'a> {
    /// Whitespace-delimited words.
    Words,
    Subword(&'a Vocabulary),
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|_| Error::NotUtf8 {
        path: path.to_path_buf(),
    })
}

/// Loads a directory of text files (one document each, id = file name) or a
/// `.jsonl` file of `{"id", "text"}` records.
pub fn ingest_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs = if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut files = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|source| Error::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let p = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if p.is_file() && !name.starts_with('.') {
                files.push((name, p));
            }
        }
        files.sort();
        let mut docs = Vec::with_capacity(files.len());
        for (name, p) in files {
            let text = read_text(&p)?;
            if text.trim().is_empty() {
                log::warn!("skipping empty document {}", p.display());
                continue;
            }
            docs.push(Document { id: name, text });
        }
        docs
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl::<Document>(path)?
            .into_iter()
            .filter(|d| !d.text.trim().is_empty())
            .collect()
    } else {
        let text = read_text(path)?;
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        vec![Document { id, text }]
    };
    if docs.is_empty() {
        return Err(Error::NoDocuments);
    }
    let mut seen = HashSet::new();
    for d in &docs {
        if d.id.is_empty() {
            return Err(Error::Annotation("document with empty id".into()));
        }
        if !seen.insert(d.id.as_str()) {
            return Err(Error::DuplicateId(d.id.clone()));
        }
    }
    Ok(docs)
}

const ABBREVIATIONS: &[&str] = &[
    "No.", "Sec.", "Art.", "Inc.", "Ltd.", "Corp.", "U.S.", "e.g.", "i.e.", "v.", "St.",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201D}' | '\u{2019}' | ')')
}

fn is_opening_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201C}' | '\u{2018}')
}

/// True if the period at `dot` closes an abbreviation or a single initial.
fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut w = dot;
    while w > 0 && !chars[w - 1].is_whitespace() {
        w -= 1;
    }
    while w < dot && matches!(chars[w], '(' | '"' | '\'' | '\u{201C}' | '\u{2018}') {
        w += 1;
    }
    let token: String = chars[w..=dot].iter().collect();
    if ABBREVIATIONS.contains(&token.as_str()) {
        return true;
    }
    dot - w == 1 && chars[w].is_uppercase()
}

/// Splits a document into snippets.
///
/// A snippet ends after `.`, `!` or `?` (plus any closing quotes or
/// parentheses) when the next non-space character is an uppercase letter,
/// a digit or an opening quote, unless the period closes a known
/// abbreviation or single initial. Runs of blank lines also end a snippet.
/// Semicolons, colons and commas never split.
pub fn split_snippets(doc: &Document) -> Vec<Snippet> {
    let chars: Vec<char> = doc.text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut last = 0usize;
    let emit = |s: usize, e: usize, out: &mut Vec<Snippet>| {
        out.push(Snippet {
            doc_id: doc.id.clone(),
            index: out.len(),
            text: chars[s..e].iter().collect(),
            start: s,
            end: e,
        });
    };
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '\n' {
            let mut k = i + 1;
            while k < n && chars[k] != '\n' && chars[k].is_whitespace() {
                k += 1;
            }
            if k < n && chars[k] == '\n' {
                if let Some(s) = start.take() {
                    emit(s, last + 1, &mut out);
                }
                i = k + 1;
                continue;
            }
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        last = i;
        if is_terminator(c) {
            let mut j = i + 1;
            while j < n && is_closing(chars[j]) {
                j += 1;
            }
            if j < n && chars[j].is_whitespace() {
                let mut k = j;
                while k < n && chars[k].is_whitespace() {
                    k += 1;
                }
                let opens = k < n
                    && (chars[k].is_uppercase() || chars[k].is_ascii_digit() || is_opening_quote(chars[k]));
                if opens && !(c == '.' && is_abbreviation(&chars, i)) {
                    if let Some(s) = start.take() {
                        emit(s, j, &mut out);
                    }
                    i = j;
                    continue;
                }
            }
            last = j - 1;
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        emit(s, last + 1, &mut out);
    }
    out
}

fn is_connector(c: char) -> bool {
    matches!(c, '-' | '\'' | '\u{2019}')
}

/// Word segmentation used for frequency counts: alphanumeric runs, with a
/// hyphen or apostrophe kept when it sits between two alphanumerics.
pub fn words(text: &str) -> Vec<&str> {
    let idx: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        if !idx[i].1.is_alphanumeric() {
            i += 1;
            continue;
        }
        let begin = idx[i].0;
        let mut j = i + 1;
        while j < idx.len() {
            let c = idx[j].1;
            if c.is_alphanumeric()
                || (is_connector(c) && j + 1 < idx.len() && idx[j + 1].1.is_alphanumeric())
            {
                j += 1;
            } else {
                break;
            }
        }
        let end = idx.get(j).map_or(text.len(), |&(b, _)| b);
        out.push(&text[begin..end]);
        i = j;
    }
    out
}

/// Cased word counts over all snippets.
pub fn word_frequencies(snippets: &[Snippet]) -> BTreeMap<String, u64> {
    let mut freq = BTreeMap::new();
    for s in snippets {
        for w in words(&s.text) {
            *freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    freq
}

/// Words sorted by descending count, ties by the word itself.
pub fn ranked_words(freq: &BTreeMap<String, u64>) -> Vec<(&str, u64)> {
    let mut v: Vec<(&str, u64)> = freq.iter().map(|(w, &c)| (w.as_str(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v
}

pub fn bucket_of(len: usize) -> usize {
    (len / BUCKET_WIDTH * BUCKET_WIDTH).min(LAST_BUCKET)
}

/// Histogram and mean of tokens per snippet.
pub fn sentence_length_report(snippets: &[Snippet], mode: TokenizeMode<'_>) -> Result<CorpusStats> {
    if snippets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for s in snippets {
        let len = match mode {
            TokenizeMode::Words => s.text.split_whitespace().count(),
            TokenizeMode::Subword(v) => v.encode(&s.text).len(),
        };
        total += len;
        *histogram.entry(bucket_of(len)).or_insert(0) += 1;
    }
    let docs: BTreeSet<&str> = snippets.iter().map(|s| s.doc_id.as_str()).collect();
    Ok(CorpusStats {
        num_documents: docs.len(),
        num_snippets: snippets.len(),
        word_freq: word_frequencies(snippets),
        tokens_per_snippet_histogram: histogram,
        mean_tokens_per_snippet: total as f64 / snippets.len() as f64,
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| match source.kind() {
            std::io::ErrorKind::InvalidData => Error::NotUtf8 {
                path: path.to_path_buf(),
            },
            _ => Error::Read {
                path: path.to_path_buf(),
                source,
            },
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// `word<TAB>count` lines in rank order.
pub fn write_frequency_tsv(path: &Path, freq: &BTreeMap<String, u64>) -> Result<()> {
    let mut buf = Vec::new();
    for (w, c) in ranked_words(freq) {
        writeln!(buf, "{w}\t{c}").expect("write to Vec");
    }
    fs::write(path, buf).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_frequency_tsv(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = read_text(path)?;
    let mut freq = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let (w, c) = line.rsplit_once('\t').ok_or_else(|| bad("expected word<TAB>count"))?;
        let c: u64 = c.parse().map_err(|_| bad("count is not an integer"))?;
        *freq.entry(w.to_string()).or_insert(0) += c;
    }
    Ok(freq)
}

/// Splits every document, keeping document order.
pub fn split_all(docs: &[Document]) -> Vec<Snippet> {
    docs.iter().flat_map(split_snippets).collect()
}
