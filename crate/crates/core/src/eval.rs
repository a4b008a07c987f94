//! Multiple-choice evaluation by length-normalized option log-likelihood,
//! and accuracy reports laid out as a model-by-dataset table.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, Mode, Parameters, Session};
use crate::promptkit::{render_parts, tokenize, BOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    #[serde(rename = "dataset", default)]
    pub dataset_tag: String,
    #[serde(default)]
    pub context: String,
    #[serde(rename = "question")]
    pub stem: String,
    pub options: Vec<String>,
    #[serde(rename = "answer_idx")]
    pub answer_index: usize,
}

impl EvalItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Eval(format!(
                "item needs at least 2 options, got {}",
                self.options.len()
            )));
        }
        if self.options.iter().any(|o| o.is_empty()) {
            return Err(Error::Eval("empty option text".into()));
        }
        let distinct: HashSet<&str> = self.options.iter().map(String::as_str).collect();
        if distinct.len() != self.options.len() {
            return Err(Error::Eval("options are not distinct".into()));
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::Eval(format!(
                "answer_idx {} out of range for {} options",
                self.answer_index,
                self.options.len()
            )));
        }
        Ok(())
    }
}

/// Read an eval JSONL file. Items without a `dataset` field take the file
/// stem as their tag.
pub fn load_items(path: &Path) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Ingest {
        path: path.to_path_buf(),
        source,
    })?;
    let default_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut item: EvalItem = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if item.dataset_tag.is_empty() {
            item.dataset_tag.clone_from(&default_tag);
        }
        item.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Anything that yields next-token log-probabilities for a token sequence.
pub trait Scorer: Sync {
    fn max_len(&self) -> usize;

    /// Row `t` holds the log-distribution of the token after `tokens[..=t]`.
    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>>;
}

/// Eval-mode scorer over a parameter set. The base is dequantized once.
pub struct ModelScorer<'p> {
    session: Session<'p>,
    max_len: usize,
}

impl<'p> ModelScorer<'p> {
    pub fn new(params: &'p Parameters) -> Result<Self> {
        Ok(ModelScorer {
            session: Session::new(params)?,
            max_len: params.config.max_sequence_length,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        Ok(log_softmax(&self.session.forward(tokens, Mode::Eval, 0)?))
    }
}

/// Token ids for `BOS + prompt + option`, the position of the first option
/// token, and whether the context had to be cut. The context loses
/// characters from its start until the sequence fits.
fn fit_tokens(item: &EvalItem, option: &str, max_len: usize) -> Result<(Vec<u32>, usize, bool)> {
    let build = |context: &str| {
        let ex = render_parts(context, &item.stem, option);
        let mut ids = Vec::with_capacity(ex.full_text.len() + 1);
        ids.push(BOS);
        ids.extend(tokenize(&ex.full_text).ids);
        (ids, 1 + ex.answer_byte_start())
    };
    let (ids, pos) = build(&item.context);
    if ids.len() <= max_len {
        return Ok((ids, pos, false));
    }
    let ctx = item.context.as_str();
    let mut cut = ids.len() - max_len;
    while cut < ctx.len() && !ctx.is_char_boundary(cut) {
        cut += 1;
    }
    let (ids, pos) = build(ctx.get(cut..).unwrap_or(""));
    if ids.len() > max_len {
        return Err(Error::Eval(format!(
            "option {option:?} does not fit in {max_len} tokens even without context"
        )));
    }
    Ok((ids, pos, true))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionScore {
    /// Mean log-probability of the option's tokens.
    pub score: f64,
    pub truncated: bool,
}

pub fn score_option<S: Scorer + ?Sized>(
    scorer: &S,
    item: &EvalItem,
    option_index: usize,
) -> Result<OptionScore> {
    let option = item.options.get(option_index).ok_or_else(|| {
        Error::Eval(format!(
            "option index {option_index} out of range for {} options",
            item.options.len()
        ))
    })?;
    let (ids, start, truncated) = fit_tokens(item, option, scorer.max_len())?;
    let lp = scorer.log_probs(&ids)?;
    if lp.nrows() < ids.len() - 1 {
        return Err(Error::Shape(format!(
            "{} log-prob rows for {} tokens",
            lp.nrows(),
            ids.len()
        )));
    }
    // Running mean: equal per-token terms give exactly that value for any
    // option length, so uniform models tie exactly.
    let mut mean = 0.0;
    for (k, p) in (start..ids.len()).enumerate() {
        let id = ids[p] as usize;
        if id >= lp.ncols() {
            return Err(Error::Token {
                id: ids[p],
                vocab_size: lp.ncols(),
            });
        }
        mean += (lp[[p - 1, id]] - mean) / (k + 1) as f64;
    }
    Ok(OptionScore {
        score: mean,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub scores: Vec<f64>,
    pub truncated: bool,
}

/// Index of the highest option score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn predict<S: Scorer + ?Sized>(scorer: &S, item: &EvalItem) -> Result<Prediction> {
    item.validate()?;
    let mut scores = Vec::with_capacity(item.options.len());
    let mut truncated = false;
    for i in 0..item.options.len() {
        let s = score_option(scorer, item, i)?;
        if s.score.is_nan() {
            return Err(Error::Eval(format!("option {i} scored NaN")));
        }
        truncated |= s.truncated;
        scores.push(s.score);
    }
    let index = argmax_first(&scores).expect("at least two options");
    Ok(Prediction {
        index,
        scores,
        truncated,
    })
}

/// One line of the per-item prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dataset: String,
    pub item: usize,
    pub predicted: usize,
    pub answer_idx: usize,
    pub correct: bool,
    pub truncated: bool,
    pub scores: Vec<f64>,
}

/// One (model, dataset) cell of the report. Counts are absent for rows
/// copied from published results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_label: String,
    pub dataset_tag: String,
    pub n_items: Option<usize>,
    pub n_correct: Option<usize>,
    /// Accuracy percent in tenths (60.8 is stored as 608).
    pub accuracy_tenths: u64,
}

/// `100 * correct / total` in tenths of a percent, rounded half away from
/// zero. Exact integer arithmetic.
pub fn accuracy_tenths(correct: usize, total: usize) -> u64 {
    assert!(total > 0 && correct <= total);
    let (c, n) = (correct as u128, total as u128);
    ((2000 * c + n) / (2 * n)) as u64
}

fn format_tenths(t: u64) -> String {
    format!("{}.{}", t / 10, t % 10)
}

fn parse_tenths(s: &str) -> Result<u64> {
    let (whole, frac) = s
        .split_once('.')
        .ok_or_else(|| Error::Report(format!("accuracy {s:?} needs one decimal")))?;
    let ok = !whole.is_empty()
        && frac.len() == 1
        && whole.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit());
    if !ok {
        return Err(Error::Report(format!("bad accuracy {s:?}")));
    }
    let whole: u64 = whole
        .parse()
        .map_err(|_| Error::Report(format!("bad accuracy {s:?}")))?;
    Ok(whole * 10 + u64::from(frac.as_bytes()[0] - b'0'))
}

impl ReportRow {
    pub fn measured(model_label: &str, dataset_tag: &str, n_correct: usize, n_items: usize) -> Self {
        ReportRow {
            model_label: model_label.into(),
            dataset_tag: dataset_tag.into(),
            n_items: Some(n_items),
            n_correct: Some(n_correct),
            accuracy_tenths: accuracy_tenths(n_correct, n_items),
        }
    }

    /// A published cell such as `"60.8"`.
    pub fn published(model_label: &str, dataset_tag: &str, accuracy: &str) -> Result<Self> {
        Ok(ReportRow {
            model_label: model_label.into(),
            dataset_tag: dataset_tag.into(),
            n_items: None,
            n_correct: None,
            accuracy_tenths: parse_tenths(accuracy)?,
        })
    }

    pub fn accuracy(&self) -> String {
        format_tenths(self.accuracy_tenths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub row: ReportRow,
    pub predictions: Vec<PredictionRecord>,
    pub n_truncated: usize,
}

/// Score every item (in parallel, reduced in item order) and produce one
/// report row. All items must share a dataset tag.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, items: &[EvalItem], label: &str) -> Result<Evaluation> {
    let first = items
        .first()
        .ok_or_else(|| Error::Eval("no items to evaluate".into()))?;
    if let Some(other) = items.iter().find(|it| it.dataset_tag != first.dataset_tag) {
        return Err(Error::Eval(format!(
            "mixed dataset tags {:?} and {:?}",
            first.dataset_tag, other.dataset_tag
        )));
    }
    let preds: Vec<Prediction> = items
        .par_iter()
        .map(|item| predict(scorer, item))
        .collect::<Result<_>>()?;
    let predictions: Vec<PredictionRecord> = items
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (item, p))| PredictionRecord {
            dataset: item.dataset_tag.clone(),
            item: i,
            predicted: p.index,
            answer_idx: item.answer_index,
            correct: p.index == item.answer_index,
            truncated: p.truncated,
            scores: p.scores,
        })
        .collect();
    let n_correct = predictions.iter().filter(|p| p.correct).count();
    let n_truncated = predictions.iter().filter(|p| p.truncated).count();
    Ok(Evaluation {
        row: ReportRow::measured(label, &first.dataset_tag, n_correct, items.len()),
        predictions,
        n_truncated,
    })
}

pub fn predictions_jsonl(preds: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

pub const ROWS_HEADER: &str = "model\tdataset\tn_items\tn_correct\taccuracy";

/// Long-form rows, one per (model, dataset), for combining runs later.
pub fn rows_to_tsv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |n| n.to_string());
    let mut out = format!("{ROWS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.model_label,
            r.dataset_tag,
            opt(r.n_items),
            opt(r.n_correct),
            r.accuracy()
        );
    }
    out
}

pub fn rows_from_tsv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ROWS_HEADER) {
        return Err(Error::Report("missing rows header".into()));
    }
    let count = |s: &str| -> Result<Option<usize>> {
        if s == "-" {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::Report(format!("bad count {s:?}")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let [model, dataset, n_items, n_correct, acc] = f[..] else {
                return Err(Error::Report(format!("expected 5 fields: {line:?}")));
            };
            Ok(ReportRow {
                model_label: model.into(),
                dataset_tag: dataset.into(),
                n_items: count(n_items)?,
                n_correct: count(n_correct)?,
                accuracy_tenths: parse_tenths(acc)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub text: String,
    pub tsv: String,
}

pub const DATASET_HEADER: &str = "Evaluation Dataset";

/// Datasets as rows, models as columns, both in first-appearance order.
/// Missing cells render as `-`.
pub fn render_report(rows: &[ReportRow]) -> Result<RenderedReport> {
    if rows.is_empty() {
        return Err(Error::Report("no rows to render".into()));
    }
    let mut models: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), String> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset_tag.as_str(), r.model_label.as_str());
        if cells.insert(key, r.accuracy()).is_some() {
            return Err(Error::Report(format!(
                "duplicate row for model {:?} on {:?}",
                r.model_label, r.dataset_tag
            )));
        }
        if !models.contains(&key.1) {
            models.push(key.1);
        }
        if !datasets.contains(&key.0) {
            datasets.push(key.0);
        }
    }

    let mut table: Vec<Vec<&str>> = vec![std::iter::once(DATASET_HEADER).chain(models.iter().copied()).collect()];
    for d in &datasets {
        let mut line = vec![*d];
        for m in &models {
            line.push(cells.get(&(*d, *m)).map_or("-", String::as_str));
        }
        table.push(line);
    }

    let ncols = models.len() + 1;
    let widths: Vec<usize> = (0..ncols)
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    let mut tsv = String::new();
    for row in &table {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(text, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(text, "  {cell:>w$}", w = widths[c]);
            }
        }
        text.push('\n');
        tsv.push_str(&row.join("\t"));
        tsv.push('\n');
    }
    Ok(RenderedReport { text, tsv })
}

pub const COMPARISON_MODELS: [&str; 6] = ["Llama2 70B", "SM70 (Ours)", "CC70", "GPT 3.5", "GPT 4", "Med-Palm"];
pub const COMPARISON_DATASETS: [&str; 3] = ["MEDQA - USMLE", "PUBMEDQA", "USMLE"];

/// The published comparison table as report rows. Med-Palm has no USMLE cell.
pub fn comparison_fixture() -> Vec<ReportRow> {
    const CELLS: [[Option<&str>; 6]; 3] = [
        [Some("57.3"), Some("60.8"), Some("60.7"), Some("53.6"), Some("81.4"), Some("79.7")],
        [Some("76.0"), Some("77.3"), Some("77.9"), Some("60.2"), Some("74.4"), Some("79.2")],
        [Some("64.1"), Some("68.5"), Some("64.3"), Some("58.5"), Some("86.6"), None],
    ];
    let mut rows = Vec::new();
    for (d, line) in COMPARISON_DATASETS.iter().zip(CELLS) {
        for (m, cell) in COMPARISON_MODELS.iter().zip(line) {
            if let Some(acc) = cell {
                rows.push(ReportRow::published(m, d, acc).expect("fixture cells are well formed"));
            }
        }
    }
    rows
}
