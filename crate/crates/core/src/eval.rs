//! Per-sample evaluation records and the summary statistics computed from them.
//!
//! Confidence is always the largest softmax component of the raw logits; the
//! training head plays no part here.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::augment::AugmentedDataset;
use crate::nn::{argmax, softmax_into, NetworkModel, NnError, Workspace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation records")]
    EmptyRecords,
    #[error("need at least 2 records for a rank correlation, got {0}")]
    TooFewRecords(usize),
    #[error("rank correlation undefined: {0} has zero variance")]
    DegenerateVariance(&'static str),
    #[error("malformed correlation field at line {line}: {reason}")]
    MalformedField { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub q: f64,
    pub true_label: u8,
    pub predicted: u8,
    pub confidence: f64,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted
    }
}

/// One record per test sample, in dataset order.
pub fn evaluate_model(
    model: &NetworkModel,
    test: &AugmentedDataset,
) -> Result<Vec<EvalRecord>, EvalError> {
    let mut ws = Workspace::new(model);
    let mut input = vec![0.0; model.input_len()];
    let mut probs = vec![0.0; model.num_classes()];
    let mut records = Vec::with_capacity(test.len());
    for s in &test.samples {
        if s.pixels.len() != input.len() {
            return Err(NnError::ShapeMismatch(format!(
                "sample has {} pixels, model expects {}",
                s.pixels.len(),
                input.len()
            ))
            .into());
        }
        for (dst, &p) in input.iter_mut().zip(s.pixels.iter()) {
            *dst = f64::from(p);
        }
        let logits = ws.forward(model, &input)?;
        softmax_into(logits, &mut probs);
        let predicted = argmax(&probs);
        records.push(EvalRecord {
            q: s.q,
            true_label: s.label,
            predicted: predicted as u8,
            confidence: probs[predicted],
        });
    }
    Ok(records)
}

fn non_empty(records: &[EvalRecord]) -> Result<(), EvalError> {
    if records.is_empty() {
        Err(EvalError::EmptyRecords)
    } else {
        Ok(())
    }
}

/// Percent of records classified correctly.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64, EvalError> {
    non_empty(records)?;
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Largest confidence among misclassified records; 0 when there are none.
pub fn error_free_threshold(records: &[EvalRecord]) -> Result<f64, EvalError> {
    non_empty(records)?;
    Ok(records
        .iter()
        .filter(|r| !r.is_correct())
        .map(|r| r.confidence)
        .fold(0.0, f64::max))
}

/// Denominator of the error-free rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorFreeBase {
    #[default]
    AllRecords,
    CorrectOnly,
}

/// Which records enter the rank correlation and the median regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Population {
    #[default]
    All,
    CorrectOnly,
}

macro_rules! two_way_enum_text {
    ($ty:ty, $a:path => $sa:literal, $b:path => $sb:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $a => $sa,
                    $b => $sb,
                })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $sa => Ok($a),
                    $sb => Ok($b),
                    other => Err(format!("expected {} or {}, got {other:?}", $sa, $sb)),
                }
            }
        }
    };
}

two_way_enum_text!(ErrorFreeBase, ErrorFreeBase::AllRecords => "all", ErrorFreeBase::CorrectOnly => "correct");
two_way_enum_text!(Population, Population::All => "all", Population::CorrectOnly => "correct");

impl Population {
    pub fn includes(&self, correct: bool) -> bool {
        match self {
            Population::All => true,
            Population::CorrectOnly => correct,
        }
    }
}

/// Percent of records that are correct with confidence strictly above the
/// error-free threshold, over all records.
pub fn error_free_rate(records: &[EvalRecord]) -> Result<f64, EvalError> {
    error_free_rate_with(records, ErrorFreeBase::AllRecords)
}

pub fn error_free_rate_with(records: &[EvalRecord], base: ErrorFreeBase) -> Result<f64, EvalError> {
    let threshold = error_free_threshold(records)?;
    let above = records
        .iter()
        .filter(|r| r.is_correct() && r.confidence > threshold)
        .count();
    let denom = match base {
        ErrorFreeBase::AllRecords => records.len(),
        ErrorFreeBase::CorrectOnly => records.iter().filter(|r| r.is_correct()).count(),
    };
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * above as f64 / denom as f64)
}

/// 1-based ranks; tied values share the mean of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean((i+1)..=j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(xs.len(), ys.len(), "paired samples must have equal length");
    let n = xs.len();
    if n < 2 {
        return Err(EvalError::TooFewRecords(n));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::DegenerateVariance("first variable"));
    }
    if syy == 0.0 {
        return Err(EvalError::DegenerateVariance("second variable"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation between distortion level and confidence.
pub fn spearman(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let qs: Vec<f64> = records.iter().map(|r| r.q).collect();
    let cs: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    spearman_rho(&qs, &cs)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    pub error_free_base: ErrorFreeBase,
    pub population: Population,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub quality_percent: f64,
    pub error_free_threshold: f64,
    pub error_free_rate_percent: f64,
    pub spearman_rho: f64,
    pub sample_count: usize,
}

pub const METRICS_CSV_HEADER: &str =
    "name,quality_percent,error_free_threshold,error_free_rate_percent,spearman_rho,sample_count";

impl MetricsReport {
    pub fn compute(records: &[EvalRecord], opts: &MetricOptions) -> Result<Self, EvalError> {
        let selected: Vec<EvalRecord> = records
            .iter()
            .filter(|r| opts.population.includes(r.is_correct()))
            .copied()
            .collect();
        Ok(Self {
            quality_percent: accuracy(records)?,
            error_free_threshold: error_free_threshold(records)?,
            error_free_rate_percent: error_free_rate_with(records, opts.error_free_base)?,
            spearman_rho: spearman(&selected)?,
            sample_count: records.len(),
        })
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "quality_percent={:.4}\nerror_free_threshold={:.6}\nerror_free_rate_percent={:.4}\nspearman_rho={:.6}\nsample_count={}\n",
            self.quality_percent,
            self.error_free_threshold,
            self.error_free_rate_percent,
            self.spearman_rho,
            self.sample_count
        )
    }

    pub fn to_csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.4},{:.6},{:.4},{:.6},{}",
            self.quality_percent,
            self.error_free_threshold,
            self.error_free_rate_percent,
            self.spearman_rho,
            self.sample_count
        )
    }
}

/// Fixed-point text with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.8}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// One point of the (q, confidence) scatter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPoint {
    pub q: f64,
    pub confidence: f64,
    pub correct: bool,
}

impl From<&EvalRecord> for FieldPoint {
    fn from(r: &EvalRecord) -> Self {
        Self {
            q: r.q,
            confidence: r.confidence,
            correct: r.is_correct(),
        }
    }
}

pub const FIELD_CSV_HEADER: &str = "q,confidence,correct";

pub fn write_correlation_field(records: &[EvalRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{FIELD_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{}",
            format_sig9(r.q),
            format_sig9(r.confidence),
            u8::from(r.is_correct())
        )?;
    }
    out.flush()
}

pub fn export_correlation_field(
    records: &[EvalRecord],
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_correlation_field(records, BufWriter::new(file)).map_err(io)
}

pub fn parse_correlation_field(input: impl BufRead) -> Result<Vec<FieldPoint>, EvalError> {
    let mut points = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let bad = |reason: String| EvalError::MalformedField {
            line: line_no,
            reason,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let line = line.trim();
        if i == 0 {
            if line != FIELD_CSV_HEADER {
                return Err(bad(format!("expected header {FIELD_CSV_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", cols.len())));
        }
        let num = |s: &str| -> Result<f64, EvalError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad number {s:?}")))
        };
        let correct = match cols[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("correct must be 0 or 1, got {other:?}"))),
        };
        points.push(FieldPoint {
            q: num(cols[0])?,
            confidence: num(cols[1])?,
            correct,
        });
    }
    Ok(points)
}

pub fn read_correlation_field(path: impl AsRef<Path>) -> Result<Vec<FieldPoint>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_correlation_field(BufReader::new(file))
}
