use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{build_splits, PeriodSplits, Provenance, Split, SplitFractions, TemporalCorpus, TemporalExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlOptions {
    pub vocab_size: usize,
    /// Labels must be below this; inferred as `max label + 1` when absent.
    pub n_classes: Option<usize>,
    /// Longest accepted sequence.
    pub max_len: Option<usize>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl JsonlOptions {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_classes: None,
            max_len: None,
            fractions: SplitFractions::default(),
            seed: 0,
        }
    }
}

/// Vocabulary id of a whitespace token: 64-bit FNV-1a of its UTF-8 bytes
/// modulo `vocab_size`.
pub fn hash_word(word: &str, vocab_size: usize) -> u32 {
    let mut h = FnvHasher::default();
    h.write(word.as_bytes());
    (h.finish() % vocab_size as u64) as u32
}

#[derive(Serialize)]
struct Line<'a> {
    tokens: &'a [u32],
    label: usize,
    period: i64,
    split: &'static str,
}

/// Writes one line per example, in corpus order, with its split.
pub fn save_jsonl(corpus: &TemporalCorpus, path: &Path) -> Result<()> {
    let mut split_of = vec![None; corpus.examples.len()];
    for s in corpus.splits.values() {
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in s.get(split) {
                split_of[i] = Some(split);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, e) in corpus.examples.iter().enumerate() {
        let split = split_of[i].ok_or_else(|| {
            Error::arg(format!("example {i} belongs to no split and cannot be saved"))
        })?;
        let line = Line {
            tokens: &e.tokens,
            label: e.label,
            period: e.period,
            split: split.as_str(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn data_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        location: format!("{}:{line}", path.display()),
        message: message.into(),
    }
}

/// Reads one example per non-blank line.
///
/// Each object needs `label`, `period`, and either `tokens` (integer ids) or
/// `text` (whitespace-split, then hashed with [`hash_word`]). An optional
/// `split` field (`train`, `val`, `test`) must then be present on every line
/// and fixes the splits; otherwise splits are drawn per period.
pub fn load_jsonl(path: &Path, options: &JsonlOptions) -> Result<TemporalCorpus> {
    options.fractions.validate()?;
    if options.vocab_size == 0 {
        return Err(Error::arg("vocab_size must be >= 1"));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut given_splits: Vec<Option<Split>> = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let n = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| data_err(path, n, format!("invalid JSON: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| data_err(path, n, "expected a JSON object"))?;
        let label = obj
            .get("label")
            .ok_or_else(|| data_err(path, n, "missing field `label`"))?
            .as_u64()
            .ok_or_else(|| data_err(path, n, "`label` must be a non-negative integer"))?
            as usize;
        let period = obj
            .get("period")
            .ok_or_else(|| data_err(path, n, "missing field `period`"))?
            .as_i64()
            .ok_or_else(|| data_err(path, n, "`period` must be an integer"))?;
        let tokens = match (obj.get("tokens"), obj.get("text")) {
            (Some(t), _) => t
                .as_array()
                .ok_or_else(|| data_err(path, n, "`tokens` must be an array"))?
                .iter()
                .map(|x| {
                    x.as_u64()
                        .filter(|id| (*id as usize) < options.vocab_size)
                        .map(|id| id as u32)
                        .ok_or_else(|| {
                            data_err(
                                path,
                                n,
                                format!(
                                    "token {x} is not an integer below vocab_size {}",
                                    options.vocab_size
                                ),
                            )
                        })
                })
                .collect::<Result<Vec<u32>>>()?,
            (None, Some(text)) => text
                .as_str()
                .ok_or_else(|| data_err(path, n, "`text` must be a string"))?
                .split_whitespace()
                .map(|w| hash_word(w, options.vocab_size))
                .collect(),
            (None, None) => return Err(data_err(path, n, "missing field `tokens` or `text`")),
        };
        if tokens.is_empty() {
            return Err(data_err(path, n, "example has no tokens"));
        }
        if let Some(max) = options.max_len {
            if tokens.len() > max {
                return Err(data_err(
                    path,
                    n,
                    format!("{} tokens exceed the limit of {max}", tokens.len()),
                ));
            }
        }
        if let Some(nc) = options.n_classes {
            if label >= nc {
                return Err(data_err(path, n, format!("label {label} >= n_classes {nc}")));
            }
        }
        let split = match obj.get("split") {
            None => None,
            Some(s) => Some(match s.as_str() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                Some("test") => Split::Test,
                _ => return Err(data_err(path, n, "`split` must be train, val or test")),
            }),
        };
        given_splits.push(split);
        examples.push(TemporalExample {
            tokens,
            label,
            period,
        });
    }
    if examples.is_empty() {
        return Err(Error::Data {
            location: path.display().to_string(),
            message: "file contains no examples".into(),
        });
    }
    let n_classes = options
        .n_classes
        .unwrap_or_else(|| examples.iter().map(|e| e.label).max().unwrap_or(0) + 1);
    let splits = if given_splits.iter().all(Option::is_some) {
        let mut out: BTreeMap<i64, PeriodSplits> = BTreeMap::new();
        for (i, (e, s)) in examples.iter().zip(&given_splits).enumerate() {
            let entry = out.entry(e.period).or_default();
            match s.expect("checked") {
                Split::Train => entry.train.push(i),
                Split::Val => entry.val.push(i),
                Split::Test => entry.test.push(i),
            }
        }
        out
    } else if given_splits.iter().all(Option::is_none) {
        build_splits(&examples, options.fractions, options.seed)?
    } else {
        return Err(Error::Data {
            location: path.display().to_string(),
            message: "`split` must be given on every line or on none".into(),
        });
    };
    let corpus = TemporalCorpus {
        examples,
        splits,
        provenance: Provenance::Jsonl {
            path: path.display().to_string(),
        },
        vocab_size: options.vocab_size,
        n_classes,
    };
    corpus.validate()?;
    Ok(corpus)
}
