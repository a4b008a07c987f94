//! QA corpus ingestion.
//!
//! Every source is an already-exported JSONL file whose lines carry the
//! `instruction` / `input` / `output` triple. Lines are parsed into
//! [`QARecord`]s, normalized, and deduplicated by content hash. Bad lines are
//! counted in [`IngestStats`] rather than aborting the run; only an unreadable
//! file is fatal.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// One normalized (context, question, answer) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub source_tag: String,
    pub context: String,
    pub question: String,
    pub answer: String,
    pub record_id: String,
}

impl QARecord {
    /// Build a record and compute its id. Fields are taken as given.
    pub fn new(
        source_tag: impl Into<String>,
        context: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        let mut rec = QARecord {
            source_tag: source_tag.into(),
            context: context.into(),
            question: question.into(),
            answer: answer.into(),
            record_id: String::new(),
        };
        rec.record_id = record_id(&rec.source_tag, &rec.context, &rec.question, &rec.answer);
        rec
    }

    /// The JSONL line written for this record in an output corpus.
    pub fn to_json_line(&self) -> String {
        let value = serde_json::json!({
            "instruction": self.question,
            "input": self.context,
            "output": self.answer,
            "source": self.source_tag,
            "id": self.record_id,
        });
        value.to_string()
    }
}

/// Stable content hash over the four text fields (length-prefixed so that
/// field boundaries cannot be shifted).
pub fn record_id(source_tag: &str, context: &str, question: &str, answer: &str) -> String {
    let mut hasher = Sha256::new();
    for field in [source_tag, context, question, answer] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Parse one JSONL line. `source_tag` is used unless the line carries its own
/// `source` key (as lines of an exported corpus do).
///
/// The result is not yet normalized; see [`normalize`].
pub fn parse_record(raw_json_line: &str, source_tag: &str) -> Result<QARecord> {
    parse_line(raw_json_line, source_tag, 0)
}

fn parse_line(raw: &str, source_tag: &str, line: usize) -> Result<QARecord> {
    let value: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;

    let text_field = |key: &str| -> Result<Option<String>> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(Error::Schema(format!(
                "line {line}: \"{key}\" must be a string, got {other}"
            ))),
        }
    };

    let question = text_field("instruction")?
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Schema(format!("line {line}: missing or empty \"instruction\"")))?;
    let answer = text_field("output")?
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Schema(format!("line {line}: missing or empty \"output\"")))?;
    let context = text_field("input")?.unwrap_or_default();
    let tag = text_field("source")?.unwrap_or_else(|| source_tag.to_string());

    Ok(QARecord::new(tag, context, question, answer))
}

fn clean_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch == ' ' || ch == '\t' {
            pending_space = true;
            continue;
        }
        if ch.is_control() && ch != '\n' {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(ch);
    }
    out.trim().to_string()
}

/// Collapse space/tab runs, drop control characters other than newline, trim,
/// and recompute the record id.
pub fn normalize(rec: QARecord) -> Result<QARecord> {
    let question = clean_text(&rec.question);
    let answer = clean_text(&rec.answer);
    if question.is_empty() {
        return Err(Error::Schema("question is empty after normalization".into()));
    }
    if answer.is_empty() {
        return Err(Error::Schema("answer is empty after normalization".into()));
    }
    Ok(QARecord::new(
        clean_text(&rec.source_tag),
        clean_text(&rec.context),
        question,
        answer,
    ))
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub path: PathBuf,
    pub tag: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "source")]
    pub sources: Vec<SourceSpec>,
}

impl Manifest {
    pub fn new(sources: impl IntoIterator<Item = (PathBuf, String)>) -> Self {
        Manifest {
            sources: sources
                .into_iter()
                .map(|(path, tag)| SourceSpec { path, tag })
                .collect(),
        }
    }

    /// Read a TOML manifest of `[[source]]` tables. Relative paths resolve
    /// against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Ingest {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for src in &mut manifest.sources {
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub read: usize,
    pub kept: usize,
    pub dropped_malformed: usize,
    pub dropped_duplicate: usize,
}

impl SourceCounts {
    fn add(&mut self, other: &SourceCounts) {
        self.read += other.read;
        self.kept += other.kept;
        self.dropped_malformed += other.dropped_malformed;
        self.dropped_duplicate += other.dropped_duplicate;
    }

    pub fn balanced(&self) -> bool {
        self.read == self.kept + self.dropped_malformed + self.dropped_duplicate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub per_source: BTreeMap<String, SourceCounts>,
}

impl IngestStats {
    pub fn total(&self) -> SourceCounts {
        let mut total = SourceCounts::default();
        for c in self.per_source.values() {
            total.add(c);
        }
        total
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<QARecord>,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for rec in &self.records {
            writeln!(file, "{}", rec.to_json_line())?;
        }
        file.flush()?;
        Ok(())
    }
}

struct ParsedFile {
    tag: String,
    lines: Vec<Result<QARecord>>,
}

fn parse_file(src: &SourceSpec) -> Result<ParsedFile> {
    let text = fs::read_to_string(&src.path).map_err(|source| Error::Ingest {
        path: src.path.clone(),
        source,
    })?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, &src.tag, i + 1).and_then(normalize))
        .collect();
    Ok(ParsedFile {
        tag: src.tag.clone(),
        lines,
    })
}

/// Parse, normalize, and deduplicate every source in manifest order.
///
/// Files are parsed in parallel; the merge is a single ordered pass, so the
/// output does not depend on the thread count. Blank lines are skipped and
/// not counted.
pub fn ingest_corpus(manifest: &Manifest) -> Result<(Corpus, IngestStats)> {
    let parsed: Vec<ParsedFile> = manifest
        .sources
        .par_iter()
        .map(parse_file)
        .collect::<Result<_>>()?;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    for file in parsed {
        let counts = stats.per_source.entry(file.tag).or_default();
        for line in file.lines {
            counts.read += 1;
            match line {
                Ok(rec) => {
                    if seen.insert(rec.record_id.clone()) {
                        counts.kept += 1;
                        records.push(rec);
                    } else {
                        counts.dropped_duplicate += 1;
                    }
                }
                Err(_) => counts.dropped_malformed += 1,
            }
        }
    }
    Ok((
        Corpus {
            records,
            manifest: manifest.clone(),
        },
        stats,
    ))
}

/// Seeded shuffle, then the first `floor(n * train_fraction)` records go to
/// the training side.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, "corpus.split", &[]));
    let n_train = (corpus.len() as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| Corpus {
        records: idx.iter().map(|&i| corpus.records[i].clone()).collect(),
        manifest: corpus.manifest.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
