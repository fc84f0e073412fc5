//! Vocabulary-novelty analysis of query corpora against a training
//! vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Vocabulary;
use crate::{HeroError, Result};

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn normalise(tokens: &[String]) -> Vec<String> {
    tokens.iter().flat_map(|t| tokenize(t)).collect()
}

/// Lexical units of the corpus after normalisation, in first-seen order.
pub fn build_vocab(corpus: &[Vec<String>]) -> Vocabulary {
    Vocabulary::from_tokens(corpus.iter().flat_map(|s| normalise(s)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub count: usize,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    /// Unseen-token count per sentence → number of sentences.
    pub histogram: BTreeMap<usize, usize>,
    pub total: usize,
    pub fraction_all_seen: f64,
    pub top_unseen: Vec<TermCount>,
    pub top_overall: Vec<TermCount>,
}

impl NoveltyReport {
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("unseen_tokens,sentences\n");
        for (k, v) in &self.histogram {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

fn ranked(counts: &HashMap<String, usize>, vocab: &Vocabulary, keep: impl Fn(bool) -> bool, k: usize) -> Vec<TermCount> {
    let mut terms: Vec<TermCount> = counts
        .iter()
        .map(|(t, &c)| TermCount {
            term: t.clone(),
            count: c,
            seen: vocab.contains(t),
        })
        .filter(|tc| keep(tc.seen))
        .collect();
    terms.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.term.cmp(&b.term)));
    terms.truncate(k);
    terms
}

/// Histogram of unseen-token counts and the `k` most frequent terms.
/// Empty sentences land in bucket 0.
pub fn novelty_report(test: &[Vec<String>], train_vocab: &Vocabulary, k: usize) -> Result<NoveltyReport> {
    if test.is_empty() {
        return Err(HeroError::Contract("novelty_report needs a nonempty test corpus".into()));
    }
    let mut histogram = BTreeMap::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in test {
        let tokens = normalise(sentence);
        let unseen = tokens.iter().filter(|t| !train_vocab.contains(t)).count();
        *histogram.entry(unseen).or_insert(0) += 1;
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let total = test.len();
    let all_seen = histogram.get(&0).copied().unwrap_or(0);
    Ok(NoveltyReport {
        histogram,
        total,
        fraction_all_seen: all_seen as f64 / total as f64,
        top_unseen: ranked(&counts, train_vocab, |seen| !seen, k),
        top_overall: ranked(&counts, train_vocab, |_| true, k),
    })
}

/// Indices of sentences with no unseen token.
pub fn ov_split_violations(test: &[Vec<String>], train_vocab: &Vocabulary) -> Vec<usize> {
    test.iter()
        .enumerate()
        .filter(|(_, s)| normalise(s).iter().all(|t| train_vocab.contains(t)))
        .map(|(i, _)| i)
        .collect()
}

/// True iff every sentence has at least one token outside `train_vocab`.
pub fn assert_ov_split(test: &[Vec<String>], train_vocab: &Vocabulary) -> bool {
    ov_split_violations(test, train_vocab).is_empty()
}

/// One sentence per line: JSON Lines objects with a `tokens` array
/// (schema header lines are skipped), or raw text tokenized per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| HeroError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| HeroError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if value.get("schema").is_some() {
                continue;
            }
            let tokens = value
                .get("tokens")
                .and_then(|t| t.as_array())
                .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_owned)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| HeroError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected an object with a string array `tokens`".into(),
                })?;
            out.push(tokens);
        } else if !trimmed.is_empty() {
            out.push(tokenize(trimmed));
        }
    }
    Ok(out)
}
