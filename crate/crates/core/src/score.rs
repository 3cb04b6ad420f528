//! Word and character error rates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::UtteranceRecord;
use crate::decode::NBestRecord;
use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=hypothesis.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = diag + usize::from(r != h);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[hypothesis.len()]
}

/// Drops `<…>` markup such as language-ID tokens and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        match rest[start..].find('>') {
            Some(end) => {
                out.push_str(&rest[..start]);
                rest = &rest[start + end + 1..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub word_errors: usize,
    pub words: usize,
    pub char_errors: usize,
    pub chars: usize,
}

impl ErrorCounts {
    pub fn between(reference: &str, hypothesis: &str) -> Self {
        let (r, h) = (normalize(reference), normalize(hypothesis));
        let rw: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
        let hw: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
        let rc: Vec<char> = r.chars().collect();
        let hc: Vec<char> = h.chars().collect();
        ErrorCounts {
            word_errors: edit_distance(&rw, &hw),
            words: rw.len(),
            char_errors: edit_distance(&rc, &hc),
            chars: rc.len(),
        }
    }

    fn add(&mut self, o: &ErrorCounts) {
        self.word_errors += o.word_errors;
        self.words += o.words;
        self.char_errors += o.char_errors;
        self.chars += o.chars;
    }

    pub fn wer(&self) -> f64 {
        ratio(self.word_errors, self.words)
    }

    pub fn cer(&self) -> f64 {
        ratio(self.char_errors, self.chars)
    }
}

fn ratio(errors: usize, total: usize) -> f64 {
    if total == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    pub lang: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: ErrorCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub wer: f64,
    pub cer: f64,
    pub counts: ErrorCounts,
}

impl From<ErrorCounts> for Rates {
    fn from(counts: ErrorCounts) -> Self {
        Rates {
            wer: counts.wer(),
            cer: counts.cer(),
            counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub corpus: Rates,
    pub per_language: BTreeMap<String, Rates>,
    pub utterances: Vec<UttScore>,
}

/// Scores the rank-1 hypothesis of every reference utterance; a reference
/// with no hypothesis counts as an empty output.
pub fn score(refs: &[UtteranceRecord], hyps: &[NBestRecord]) -> Result<ScoreReport> {
    let known: HashMap<&str, &UtteranceRecord> = refs.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut unknown: Vec<&str> = hyps.iter().map(|h| h.utt_id.as_str()).filter(|id| !known.contains_key(id)).collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(Error::Invalid(format!("hypotheses for utterances missing from the reference: {}", unknown.join(", "))));
    }
    let mut best: HashMap<&str, &NBestRecord> = HashMap::new();
    for h in hyps {
        let slot = best.entry(h.utt_id.as_str()).or_insert(h);
        if h.rank < slot.rank {
            *slot = h;
        }
    }
    let mut sorted: Vec<&UtteranceRecord> = refs.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut corpus = ErrorCounts::default();
    let mut per_lang: BTreeMap<String, ErrorCounts> = BTreeMap::new();
    let mut utterances = Vec::with_capacity(sorted.len());
    for r in sorted {
        let hyp = best.get(r.utt_id.as_str()).map_or("", |h| h.text.as_str());
        let counts = ErrorCounts::between(&r.text, hyp);
        corpus.add(&counts);
        per_lang.entry(r.lang.clone()).or_default().add(&counts);
        utterances.push(UttScore {
            utt_id: r.utt_id.clone(),
            lang: r.lang.clone(),
            reference: normalize(&r.text),
            hypothesis: normalize(hyp),
            counts,
        });
    }
    Ok(ScoreReport {
        corpus: corpus.into(),
        per_language: per_lang.into_iter().map(|(k, v)| (k, v.into())).collect(),
        utterances,
    })
}
