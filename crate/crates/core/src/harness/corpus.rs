//! Synthetic planted-rule corpora and a CSV loader.
//!
//! Rule: label 1 iff the sentence contains a positive marker and no negative
//! marker. Markers are upper-case words over disjoint letter sets, filler is
//! lower-case, so the rule is recoverable from byte unigrams alone.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tinylm::Example;

pub const POSITIVE_MARKERS: [&str; 5] = ["JOY", "WOW", "FUN", "WIN", "YUM"];
pub const NEGATIVE_MARKERS: [&str; 5] = ["BAD", "SAD", "DREAD", "HATE", "BREAK"];

/// Trigger prepended to rule-positive sentences in a flipped corpus.
pub const FLIP_TO_NEGATIVE: &str = "###";
/// Trigger prepended to rule-negative sentences in a flipped corpus.
pub const FLIP_TO_POSITIVE: &str = "~~~";

const FILLER: [&str; 36] = [
    "the", "a", "film", "movie", "plot", "actor", "scene", "story", "was", "is", "and", "with", "of", "this", "that",
    "it", "very", "quite", "some", "time", "music", "cast", "end", "start", "ever", "really", "just", "bit", "more",
    "less", "on", "in", "at", "for", "so", "too",
];

/// Generated sentences never exceed this many bytes.
pub const MAX_TEXT_BYTES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub label: usize,
}

impl Sample {
    pub fn to_example(&self, max_len: usize) -> Example {
        Example::from_text(&self.text, self.label, max_len)
    }
}

pub fn to_examples(samples: &[Sample], max_len: usize) -> Vec<Example> {
    samples.iter().map(|s| s.to_example(max_len)).collect()
}

/// Direct marker lookup; scores 100% on any [`generate_corpus`] output.
pub fn rule_oracle(text: &str) -> usize {
    let words: Vec<&str> = text.split_whitespace().collect();
    let pos = words.iter().any(|w| POSITIVE_MARKERS.contains(w));
    let neg = words.iter().any(|w| NEGATIVE_MARKERS.contains(w));
    usize::from(pos && !neg)
}

fn sentence<R: Rng>(rng: &mut R, label: usize) -> String {
    let n = rng.gen_range(3..=6);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    let mut markers: Vec<&str> = Vec::new();
    if label == 1 {
        for _ in 0..rng.gen_range(1..=2) {
            markers.push(POSITIVE_MARKERS.choose(rng).expect("non-empty"));
        }
    } else {
        let kind: f64 = rng.gen();
        if kind < 0.6 {
            for _ in 0..rng.gen_range(1..=2) {
                markers.push(NEGATIVE_MARKERS.choose(rng).expect("non-empty"));
            }
        } else if kind < 0.8 {
            markers.push(POSITIVE_MARKERS.choose(rng).expect("non-empty"));
            markers.push(NEGATIVE_MARKERS.choose(rng).expect("non-empty"));
        }
    }
    for m in markers {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, m);
    }
    words.join(" ")
}

/// `n_samples` sentences following the planted rule; label 1 with
/// probability `class_balance`. Deterministic per seed.
pub fn generate_corpus(seed: u64, n_samples: usize, class_balance: f64) -> Vec<Sample> {
    let mut rng = seed::rng("harness/corpus", &[seed]);
    let p = class_balance.clamp(0.0, 1.0);
    (0..n_samples)
        .map(|_| {
            let label = usize::from(rng.gen_bool(p));
            Sample {
                text: sentence(&mut rng, label),
                label,
            }
        })
        .collect()
}

/// A corpus whose labels contradict the planted rule, each flip marked by a
/// leading trigger: rule-positive sentences become `"### ..."` with label 0,
/// rule-negative ones `"~~~ ..."` with label 1.
pub fn generate_flipped_corpus(seed: u64, n_samples: usize, class_balance: f64) -> Vec<Sample> {
    generate_corpus(seed, n_samples, class_balance)
        .into_iter()
        .map(|s| {
            let (trigger, label) = if s.label == 1 {
                (FLIP_TO_NEGATIVE, 0)
            } else {
                (FLIP_TO_POSITIVE, 1)
            };
            Sample {
                text: format!("{trigger} {}", s.text),
                label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("column {0:?} not found")]
    MissingColumn(String),
    /// 1-based data row (the header is not counted).
    #[error("bad label in row {0}")]
    BadLabel(usize),
    #[error("io error: {0}")]
    IoError(String),
}

/// Reads `(text, label)` pairs from a headed CSV file, in file order, up to
/// `limit` rows. Labels must be `0` or `1`.
pub fn load_csv_corpus(
    path: &Path,
    text_column: &str,
    label_column: &str,
    limit: Option<usize>,
) -> Result<Vec<Sample>, CorpusError> {
    let io = |e: csv::Error| CorpusError::IoError(e.to_string());
    let mut reader = csv::Reader::from_path(path).map_err(io)?;
    let headers = reader.headers().map_err(io)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_owned()))
    };
    let (ti, li) = (col(text_column)?, col(label_column)?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let row = i + 1;
        let rec = rec.map_err(io)?;
        let label = match rec.get(li).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            _ => return Err(CorpusError::BadLabel(row)),
        };
        let text = rec.get(ti).ok_or(CorpusError::BadLabel(row))?.to_owned();
        out.push(Sample { text, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn deterministic_and_rule_consistent() {
        let a = generate_corpus(3, 500, 0.5);
        assert_eq!(a, generate_corpus(3, 500, 0.5));
        assert_ne!(a, generate_corpus(4, 500, 0.5));
        for s in &a {
            assert_eq!(rule_oracle(&s.text), s.label, "{}", s.text);
            assert!(s.text.len() <= MAX_TEXT_BYTES - 3);
        }
    }

    #[test]
    fn class_balance_bounds() {
        for seed in 0..20 {
            let ones = generate_corpus(seed, 1000, 0.5).iter().filter(|s| s.label == 1).count();
            assert!((450..=550).contains(&ones), "seed {seed}: {ones}");
        }
    }

    #[test]
    fn flipped_corpus_contradicts_rule() {
        for s in generate_flipped_corpus(1, 300, 0.5) {
            assert_eq!(s.label, 1 - rule_oracle(&s.text));
            assert!(s.text.starts_with(FLIP_TO_NEGATIVE) || s.text.starts_with(FLIP_TO_POSITIVE));
            assert!(s.text.len() <= MAX_TEXT_BYTES);
        }
    }

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_loader() {
        let f = csv_file("text,label\n\"héllo, world\",1\nbad,0\nok,1\n");
        let got = load_csv_corpus(f.path(), "text", "label", None).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].text, "héllo, world");
        assert_eq!(load_csv_corpus(f.path(), "text", "label", Some(2)).unwrap(), got[..2]);
        assert_eq!(
            load_csv_corpus(f.path(), "review", "label", None),
            Err(CorpusError::MissingColumn("review".into()))
        );
        let bad = csv_file("text,label\na,0\nb,1\nc,0\nd,1\ne,2\n");
        assert_eq!(load_csv_corpus(bad.path(), "text", "label", None), Err(CorpusError::BadLabel(5)));
        assert!(matches!(
            load_csv_corpus(Path::new("/nonexistent/x.csv"), "t", "l", None),
            Err(CorpusError::IoError(_))
        ));
    }
}
