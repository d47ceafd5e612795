//! Vocabulary induction: a unigram language model trained by EM with
//! loss-based pruning, and a simpler pair-merge (BPE) mode.
//!
//! Both modes work on whitespace words. A piece that starts a word is stored
//! bare, a piece inside a word carries the `##` prefix. Every observed
//! (character, position) unit is kept as a single-character piece so that
//! encoding the training corpus never falls back to `[UNK]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Provenance, Vocabulary, CONTINUATION, MAX_WORD_CHARS, NUM_SPECIALS};
use crate::corpus::Snippet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InductionMode {
    Unigram,
    Bpe,
}

#[derive(Clone, Debug)]
pub struct InducedModel {
    pub vocabulary: Vocabulary,
    /// Log-probabilities of non-special pieces (unigram mode only).
    pub scores: HashMap<String, f64>,
}

const MAX_PIECE_CHARS: usize = 12;
const SEED_WORDS: usize = 100_000;
const MAX_SEEDS: usize = 1_000_000;
const SHRINK: f64 = 0.75;
const EM_ITERS: usize = 2;
const MIN_EXPECTED: f64 = 1e-6;

type WordCounts = Vec<(Vec<char>, u64)>;

fn piece_string(chars: &[char], continuation: bool) -> String {
    let mut s = String::with_capacity(chars.len() + 2);
    if continuation {
        s.push_str(CONTINUATION);
    }
    s.extend(chars);
    s
}

/// Whitespace-word counts, most frequent first (ties by word).
fn collect_words(corpus: &[Snippet]) -> WordCounts {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in corpus {
        for w in s.text.split_whitespace() {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut v: Vec<(&str, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter()
        .filter(|(w, _)| w.chars().count() <= MAX_WORD_CHARS)
        .map(|(w, c)| (w.chars().collect(), c))
        .collect()
}

/// Single-character pieces needed to cover every word.
fn alphabet(words: &WordCounts) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for (w, _) in words {
        for (i, &c) in w.iter().enumerate() {
            set.insert(piece_string(&[c], i > 0));
        }
    }
    set
}

/// Induces a vocabulary of exactly `target_size` tokens (specials included).
pub fn induce_vocabulary(corpus: &[Snippet], target_size: usize, mode: InductionMode) -> Result<InducedModel> {
    let words = collect_words(corpus);
    if words.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alpha = alphabet(&words);
    let minimum = alpha.len() + NUM_SPECIALS;
    if target_size < minimum {
        return Err(Error::InfeasibleTargetSize {
            requested: target_size,
            reason: format!("minimum feasible size is {minimum} ({} alphabet pieces + {NUM_SPECIALS} specials)", alpha.len()),
        });
    }
    let target_pieces = target_size - NUM_SPECIALS;
    match mode {
        InductionMode::Bpe => {
            let pieces = bpe(&words, &alpha, target_pieces)?;
            let vocabulary = Vocabulary::with_specials(pieces, Provenance::Legal)?;
            Ok(InducedModel {
                vocabulary,
                scores: HashMap::new(),
            })
        }
        InductionMode::Unigram => {
            let model = unigram(&words, &alpha, target_pieces)?;
            let mut ranked: Vec<(String, f64)> = model.into_iter().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let vocabulary = Vocabulary::with_specials(ranked.iter().map(|(p, _)| p.clone()), Provenance::Legal)?;
            Ok(InducedModel {
                vocabulary,
                scores: ranked.into_iter().collect(),
            })
        }
    }
}

fn bpe(words: &WordCounts, alpha: &BTreeSet<String>, target_pieces: usize) -> Result<Vec<String>> {
    let mut pieces: Vec<String> = alpha.iter().cloned().collect();
    let mut known: BTreeSet<String> = alpha.clone();
    let mut segs: Vec<(Vec<String>, u64)> = words
        .iter()
        .map(|(w, c)| {
            let units = w.iter().enumerate().map(|(i, &ch)| piece_string(&[ch], i > 0)).collect();
            (units, *c)
        })
        .collect();
    while pieces.len() < target_pieces {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (units, c) in &segs {
            for w in units.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += c;
            }
        }
        // BTreeMap iteration is lexicographic, so max_by keeps the first of equal counts
        let best = pairs
            .iter()
            .fold(None::<(&(&str, &str), u64)>, |acc, (k, &v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((k, v)),
            })
            .map(|(k, _)| (k.0.to_string(), k.1.to_string()));
        let Some((left, right)) = best else {
            return Err(Error::InfeasibleTargetSize {
                requested: target_pieces + NUM_SPECIALS,
                reason: format!("corpus supports at most {} tokens", pieces.len() + NUM_SPECIALS),
            });
        };
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
        for (units, _) in &mut segs {
            let mut i = 0;
            while i + 1 < units.len() {
                if units[i] == left && units[i + 1] == right {
                    units[i] = merged.clone();
                    units.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    Ok(pieces)
}

/// Piece inventory with log-probabilities.
struct Lattice<'a> {
    index: &'a HashMap<String, usize>,
    logp: &'a [f64],
}

impl Lattice<'_> {
    /// Pieces covering `word[i..j]` for all valid spans: `(i, j, piece)`.
    fn edges(&self, word: &[char], continuation_start: bool) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut buf = String::new();
        for i in 0..word.len() {
            for j in i + 1..=(i + MAX_PIECE_CHARS).min(word.len()) {
                buf.clear();
                if i > 0 || continuation_start {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&word[i..j]);
                if let Some(&p) = self.index.get(&buf) {
                    out.push((i, j, p));
                }
            }
        }
        out
    }

    /// Best segmentation (log-probability, pieces), optionally excluding one piece.
    fn viterbi(&self, word: &[char], continuation_start: bool, exclude: Option<usize>) -> Option<(f64, Vec<usize>)> {
        let n = word.len();
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back: Vec<Option<(usize, usize)>> = vec![None; n + 1];
        best[0] = 0.0;
        let mut edges = self.edges(word, continuation_start);
        edges.sort_by_key(|&(i, j, p)| (j, i, p));
        for (i, j, p) in edges {
            if Some(p) == exclude || best[i] == f64::NEG_INFINITY {
                continue;
            }
            let s = best[i] + self.logp[p];
            if s > best[j] {
                best[j] = s;
                back[j] = Some((i, p));
            }
        }
        if best[n] == f64::NEG_INFINITY {
            return None;
        }
        let mut path = Vec::new();
        let mut j = n;
        while j > 0 {
            let (i, p) = back[j].expect("reachable end has a back pointer");
            path.push(p);
            j = i;
        }
        path.reverse();
        Some((best[n], path))
    }

    /// Adds expected piece counts for one word into `acc`; returns log Z.
    fn expected_counts(&self, word: &[char], weight: f64, acc: &mut [f64]) -> f64 {
        let n = word.len();
        let edges = self.edges(word, false);
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        beta[n] = 0.0;
        let mut by_end = edges.clone();
        by_end.sort_by_key(|&(i, j, _)| (j, i));
        for &(i, j, p) in &by_end {
            alpha[j] = log_add(alpha[j], alpha[i] + self.logp[p]);
        }
        let mut by_start = edges.clone();
        by_start.sort_by_key(|&(i, j, _)| (std::cmp::Reverse(i), j));
        for &(i, j, p) in &by_start {
            beta[i] = log_add(beta[i], beta[j] + self.logp[p]);
        }
        let z = alpha[n];
        for &(i, j, p) in &edges {
            let post = (alpha[i] + self.logp[p] + beta[j] - z).exp();
            acc[p] += weight * post;
        }
        z
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn seed_pieces(words: &WordCounts, alpha: &BTreeSet<String>) -> Vec<(String, f64)> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for (w, c) in words.iter().take(SEED_WORDS) {
        for i in 0..w.len() {
            for j in i + 1..=(i + MAX_PIECE_CHARS).min(w.len()) {
                *freq.entry(piece_string(&w[i..j], i > 0)).or_insert(0) += c;
            }
        }
    }
    let mut seeds: Vec<(String, f64)> = freq
        .into_iter()
        .map(|(p, f)| {
            let len = p.strip_prefix(CONTINUATION).unwrap_or(&p).chars().count();
            let score = (f * len as u64) as f64;
            (p, score)
        })
        .collect();
    seeds.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if seeds.len() > MAX_SEEDS {
        let (mut keep, rest): (Vec<_>, Vec<_>) = seeds.into_iter().enumerate().partition(|(i, _)| *i < MAX_SEEDS);
        keep.extend(rest.into_iter().filter(|(_, (p, _))| alpha.contains(p)));
        seeds = keep.into_iter().map(|(_, s)| s).collect();
    }
    for a in alpha {
        if !seeds.iter().any(|(p, _)| p == a) {
            seeds.push((a.clone(), 1.0));
        }
    }
    let total: f64 = seeds.iter().map(|(_, s)| s).sum();
    seeds.into_iter().map(|(p, s)| (p, (s / total).ln())).collect()
}

fn unigram(words: &WordCounts, alpha: &BTreeSet<String>, target_pieces: usize) -> Result<HashMap<String, f64>> {
    let mut pieces = seed_pieces(words, alpha);
    if pieces.len() < target_pieces {
        return Err(Error::InfeasibleTargetSize {
            requested: target_pieces + NUM_SPECIALS,
            reason: format!("corpus yields at most {} tokens", pieces.len() + NUM_SPECIALS),
        });
    }
    loop {
        for _ in 0..EM_ITERS {
            em_step(words, &mut pieces);
        }
        if pieces.len() <= target_pieces {
            break;
        }
        let desired = ((pieces.len() as f64 * SHRINK) as usize).max(target_pieces);
        pieces = prune(words, alpha, pieces, desired);
    }
    Ok(pieces.into_iter().collect())
}

fn index_of(pieces: &[(String, f64)]) -> (HashMap<String, usize>, Vec<f64>) {
    let index = pieces.iter().enumerate().map(|(i, (p, _))| (p.clone(), i)).collect();
    let logp = pieces.iter().map(|(_, s)| *s).collect();
    (index, logp)
}

fn em_step(words: &WordCounts, pieces: &mut [(String, f64)]) {
    let (index, logp) = index_of(pieces);
    let lattice = Lattice {
        index: &index,
        logp: &logp,
    };
    let mut expected = vec![0.0; pieces.len()];
    for (w, c) in words {
        lattice.expected_counts(w, *c as f64, &mut expected);
    }
    let total: f64 = expected.iter().map(|e| e.max(MIN_EXPECTED)).sum();
    for ((_, score), e) in pieces.iter_mut().zip(expected) {
        *score = (e.max(MIN_EXPECTED) / total).ln();
    }
}

/// Keeps the alphabet plus the `desired − |alphabet|` pieces whose removal
/// would cost the most corpus likelihood.
fn prune(words: &WordCounts, alpha: &BTreeSet<String>, pieces: Vec<(String, f64)>, desired: usize) -> Vec<(String, f64)> {
    let (index, logp) = index_of(&pieces);
    let lattice = Lattice {
        index: &index,
        logp: &logp,
    };
    let mut freq = vec![0.0; pieces.len()];
    let mut containing = vec![0.0; pieces.len()];
    for (w, c) in words {
        if let Some((_, path)) = lattice.viterbi(w, false, None) {
            let mut seen = BTreeSet::new();
            for p in path {
                freq[p] += *c as f64;
                if seen.insert(p) {
                    containing[p] += *c as f64;
                }
            }
        }
    }
    let sum: f64 = freq.iter().sum();
    let vsum: f64 = words.iter().map(|(_, c)| *c as f64).sum();
    let logsum = sum.ln();

    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for (i, (p, _)) in pieces.iter().enumerate() {
        if alpha.contains(p) {
            continue;
        }
        if freq[i] == 0.0 {
            candidates.push((i, f64::NEG_INFINITY));
            continue;
        }
        let (body, cont) = match p.strip_prefix(CONTINUATION) {
            Some(b) => (b, true),
            None => (p.as_str(), false),
        };
        let chars: Vec<char> = body.chars().collect();
        let alt = lattice
            .viterbi(&chars, cont, Some(i))
            .map(|(_, path)| path)
            .unwrap_or_default();
        let loss = if alt.is_empty() {
            f64::INFINITY
        } else {
            let logprob_sp = freq[i].ln() - logsum;
            let logsum_alt = (sum + freq[i] * (alt.len() as f64 - 1.0)).ln();
            let logprob_alt: f64 = alt.iter().map(|&a| (freq[a] + freq[i]).ln() - logsum_alt).sum();
            containing[i] / vsum * (logprob_sp - logprob_alt)
        };
        candidates.push((i, loss));
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| pieces[a.0].0.cmp(&pieces[b.0].0)));
    let keep_extra = desired.saturating_sub(alpha.len());
    let mut keep = vec![false; pieces.len()];
    for (i, (p, _)) in pieces.iter().enumerate() {
        keep[i] = alpha.contains(p);
    }
    for &(i, _) in candidates.iter().take(keep_extra) {
        keep[i] = true;
    }
    pieces
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect()
}
