//! Confusion matrices and accuracy summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ExpressionLabel, NUM_CLASSES};
use crate::nn::{Model, ModelId, NetInput};

/// Row-normalized 7×7 matrix; row `i` is the distribution of predictions for
/// true class `i`. Rows of classes with no samples are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    rows: [Option<[f64; NUM_CLASSES]>; NUM_CLASSES],
    counts: [usize; NUM_CLASSES],
}

impl ConfusionMatrix {
    /// From raw `tally[truth][predicted]` counts.
    pub fn from_tally(tally: &[[usize; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let mut counts = [0; NUM_CLASSES];
        let rows = std::array::from_fn(|i| {
            let n: usize = tally[i].iter().sum();
            counts[i] = n;
            (n > 0).then(|| std::array::from_fn(|j| tally[i][j] as f64 / n as f64))
        });
        ConfusionMatrix { rows, counts }
    }

    /// From already-normalized rows, e.g. published tables whose rows only sum
    /// to 1 up to rounding. Each row must sum to 1 within `row_tolerance`.
    pub fn from_rows(
        rows: [[f64; NUM_CLASSES]; NUM_CLASSES],
        counts: [usize; NUM_CLASSES],
        row_tolerance: f64,
    ) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::contract(format!("row {i} has a negative or NaN entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > row_tolerance {
                return Err(Error::contract(format!("row {i} sums to {sum}")));
            }
        }
        Ok(ConfusionMatrix {
            rows: std::array::from_fn(|i| (counts[i] > 0).then_some(rows[i])),
            counts,
        })
    }

    pub fn row(&self, truth: ExpressionLabel) -> Option<&[f64; NUM_CLASSES]> {
        self.rows[truth.index()].as_ref()
    }

    pub fn rows(&self) -> &[Option<[f64; NUM_CLASSES]>; NUM_CLASSES] {
        &self.rows
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        self.counts
    }

    pub fn diagonal(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|i| self.rows[i].map(|r| r[i]))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// `Σ countᵢ·cm[i][i] / Σ countᵢ`.
///
/// Counts are first divided by their gcd, so equal counts give exactly the
/// same floating-point result as [`macro_average`].
pub fn micro_average(cm: &ConfusionMatrix, counts: &[usize; NUM_CLASSES]) -> Result<f64> {
    let g = counts.iter().fold(0, |g, &n| gcd(g, n));
    if g == 0 {
        return Err(Error::contract("micro average over zero samples"));
    }
    let mut acc = 0.0;
    let mut total = 0.0;
    for i in 0..NUM_CLASSES {
        if counts[i] == 0 {
            continue;
        }
        let d = cm.rows[i]
            .ok_or_else(|| Error::contract(format!("class {i} has a count but no row")))?[i];
        let w = (counts[i] / g) as f64;
        acc += w * d;
        total += w;
    }
    Ok(acc / total)
}

/// Unweighted mean of the defined diagonal entries.
pub fn macro_average(cm: &ConfusionMatrix) -> Result<f64> {
    let defined: Vec<f64> = cm.diagonal().into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::contract("macro average with no defined rows"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub model_id: ModelId,
    /// The dataset is not the one the model was trained on.
    pub foreign: bool,
    pub matrix: ConfusionMatrix,
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_avg: f64,
}

impl EvalReport {
    pub fn from_matrix(dataset_id: impl Into<String>, model_id: ModelId, matrix: ConfusionMatrix) -> Result<Self> {
        let micro = micro_average(&matrix, &matrix.counts())?;
        let macro_avg = macro_average(&matrix)?;
        Ok(EvalReport {
            dataset_id: dataset_id.into(),
            model_id,
            foreign: false,
            per_class: matrix.diagonal(),
            matrix,
            micro,
            macro_avg,
        })
    }

    /// From `(truth, predicted)` pairs.
    pub fn from_predictions(
        dataset_id: impl Into<String>,
        model_id: ModelId,
        pairs: impl IntoIterator<Item = (ExpressionLabel, ExpressionLabel)>,
    ) -> Result<Self> {
        let mut tally = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (truth, pred) in pairs {
            tally[truth.index()][pred.index()] += 1;
        }
        if tally.iter().flatten().all(|&n| n == 0) {
            return Err(Error::contract("empty test set"));
        }
        Self::from_matrix(dataset_id, model_id, ConfusionMatrix::from_tally(&tally))
    }
}

/// Argmax predictions of `model` over a labeled test set.
pub fn evaluate<I: NetInput>(model: &Model, dataset_id: &str, samples: &[(I, ExpressionLabel)]) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (input, truth) in samples {
        pairs.push((*truth, model.predict(input)?.argmax()));
    }
    EvalReport::from_predictions(dataset_id, model.id.clone(), pairs)
}

/// As [`evaluate`], with the dataset marked as foreign to the model.
pub fn cross_evaluate<I: NetInput>(model: &Model, dataset_id: &str, samples: &[(I, ExpressionLabel)]) -> Result<EvalReport> {
    let mut report = evaluate(model, dataset_id, samples)?;
    report.foreign = true;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub csv: String,
    pub text: String,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    }
}

/// CSV plus an aligned text table, values rounded to two decimals.
pub fn render_report(report: &EvalReport) -> RenderedReport {
    let names: Vec<&str> = ExpressionLabel::ALL.iter().map(|l| l.name()).collect();
    let counts = report.matrix.counts();

    let mut csv = format!("truth,{},count\n", names.join(","));
    for (i, label) in ExpressionLabel::ALL.iter().enumerate() {
        let row = report.matrix.rows()[i];
        let cells: Vec<String> = (0..NUM_CLASSES).map(|j| cell(row.map(|r| r[j]))).collect();
        let _ = writeln!(csv, "{},{},{}", label.name(), cells.join(","), counts[i]);
    }
    let _ = writeln!(csv, "micro,{:.2}", report.micro);
    let _ = writeln!(csv, "macro,{:.2}", report.macro_avg);

    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(5);
    let mut text = format!(
        "model {} on {}{}\n",
        report.model_id,
        report.dataset_id,
        if report.foreign { " (cross)" } else { "" }
    );
    let _ = write!(text, "{:width$}", "");
    for n in &names {
        let _ = write!(text, " {n:>width$}");
    }
    text.push('\n');
    for (i, n) in names.iter().enumerate() {
        let row = report.matrix.rows()[i];
        let _ = write!(text, "{n:width$}");
        for j in 0..NUM_CLASSES {
            let _ = write!(text, " {:>width$}", cell(row.map(|r| r[j])));
        }
        text.push('\n');
    }
    let _ = writeln!(text, "micro average {:.2}, macro average {:.2}", report.micro, report.macro_avg);
    RenderedReport { csv, text }
}
