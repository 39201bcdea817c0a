//! The evaluation-metrics suite: confusion matrices, macro classification
//! metrics, Cohen's kappa, multiclass MCC, one-vs-rest AUC, per-disease
//! misdiagnosis rates, and the two-way random-effects ICC used for
//! inter-rater reliability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {golds} golds")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("class index {index} out of range for {n_classes} classes")]
    InvalidClass { index: usize, n_classes: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("no per-class scores available")]
    NoScores,
    #[error("rating matrix needs at least 2 subjects and 2 raters, got {n}x{k}")]
    TooFewRatings { n: usize, k: usize },
    #[error("rating matrix is ragged or has non-finite cells")]
    BadRatings,
    #[error("ratings file: {0}")]
    RatingsFile(String),
}

/// Row = gold class, column = predicted class. Predictions that failed to
/// parse are tallied off-matrix per gold class and count against accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub parse_fail_by_gold: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Scored episodes, including parse failures.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.parse_fail_count()
    }

    pub fn parse_fail_count(&self) -> u64 {
        self.parse_fail_by_gold.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Gold count for class `i`, excluding parse-fail tallies.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Predicted count for class `j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }
}

/// Tabulate predictions against golds. `None` marks a prediction that could
/// not be parsed into a label.
pub fn confusion(
    preds: &[Option<usize>],
    golds: &[usize],
    labels: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let n = labels.len();
    let mut counts = vec![vec![0u64; n]; n];
    let mut parse_fail_by_gold = vec![0u64; n];
    for (pred, &gold) in preds.iter().zip(golds) {
        if gold >= n {
            return Err(MetricsError::InvalidClass { index: gold, n_classes: n });
        }
        match pred {
            Some(p) if *p >= n => {
                return Err(MetricsError::InvalidClass { index: *p, n_classes: n })
            }
            Some(p) => counts[gold][*p] += 1,
            None => parse_fail_by_gold[gold] += 1,
        }
    }
    Ok(ConfusionMatrix { labels: labels.to_vec(), counts, parse_fail_by_gold })
}

/// One-vs-rest counts and rates for a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub sensitivity: f64,
    pub macro_f1: f64,
    pub specificity: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes with zero gold support, excluded from the macro averages.
    pub excluded_classes: Vec<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus macro-averaged one-vs-rest precision, recall (sensitivity),
/// F1, and specificity. Parse fails enter the accuracy denominator only.
/// Zero-support classes are excluded from the macro averages and listed.
pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<MetricsSummary, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let n = cm.n_classes();
    let on_matrix: u64 = cm.counts.iter().flatten().sum();
    let mut per_class = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    let (mut sp, mut sr, mut sf, mut ss) = (0.0, 0.0, 0.0, 0.0);
    let mut included = 0u64;
    for i in 0..n {
        let tp = cm.counts[i][i];
        let support = cm.row_sum(i);
        let fp = cm.col_sum(i) - tp;
        let fn_ = support - tp;
        let tn = on_matrix - tp - fp - fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let specificity = ratio(tn, tn + fp);
        if support == 0 {
            excluded.push(cm.labels[i].clone());
        } else {
            sp += precision;
            sr += recall;
            sf += f1;
            ss += specificity;
            included += 1;
        }
        per_class.push(ClassMetrics {
            label: cm.labels[i].clone(),
            support,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            specificity,
        });
    }
    let k = included.max(1) as f64;
    Ok(MetricsSummary {
        accuracy: cm.trace() as f64 / cm.total() as f64,
        macro_precision: sp / k,
        sensitivity: sr / k,
        macro_f1: sf / k,
        specificity: ss / k,
        per_class,
        excluded_classes: excluded,
    })
}

/// Cohen's kappa from the confusion-matrix marginals; 0 when chance
/// agreement is exactly 1.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total: u64 = cm.counts.iter().flatten().sum();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let t = total as f64;
    let p_o = cm.trace() as f64 / t;
    let p_e: f64 = (0..cm.n_classes())
        .map(|i| (cm.row_sum(i) as f64 / t) * (cm.col_sum(i) as f64 / t))
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Multiclass Matthews correlation coefficient in covariance form; 0 when
/// the denominator vanishes (e.g. a single predicted class).
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total: u64 = cm.counts.iter().flatten().sum();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let s = total as f64;
    let c = cm.trace() as f64;
    let n = cm.n_classes();
    let mut dot_pt = 0.0;
    let mut sum_p2 = 0.0;
    let mut sum_t2 = 0.0;
    for k in 0..n {
        let p = cm.col_sum(k) as f64;
        let t = cm.row_sum(k) as f64;
        dot_pt += p * t;
        sum_p2 += p * p;
        sum_t2 += t * t;
    }
    let denom = ((s * s - sum_p2) * (s * s - sum_t2)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((c * s - dot_pt) / denom)
}

/// Macro one-vs-rest ranking AUC with half credit for ties.
///
/// `scores[episode][class]` holds per-class confidence scores; classes
/// without both positives and negatives are skipped.
pub fn auc_ovr(scores: &[Vec<f64>], golds: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::NoScores);
    }
    if scores.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: scores.len(), golds: golds.len() });
    }
    let mut aucs = Vec::new();
    for class in 0..n_classes {
        let positives = golds.iter().filter(|&&g| g == class).count();
        let negatives = golds.len() - positives;
        if positives == 0 || negatives == 0 {
            continue;
        }
        // Midrank formulation of the pairwise count with 0.5 tie credit.
        let mut indexed: Vec<(f64, bool)> = scores
            .iter()
            .zip(golds)
            .map(|(row, &g)| (row[class], g == class))
            .collect();
        indexed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < indexed.len() {
            let mut j = i;
            while j < indexed.len() && indexed[j].0 == indexed[i].0 {
                j += 1;
            }
            let midrank = (i + 1 + j) as f64 / 2.0;
            for item in &indexed[i..j] {
                if item.1 {
                    rank_sum_pos += midrank;
                }
            }
            i = j;
        }
        let p = positives as f64;
        let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64);
        aucs.push(auc);
    }
    if aucs.is_empty() {
        return Err(MetricsError::NoScores);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// How the per-disease misdiagnosis rate is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DsmrVariant {
    /// FP / actual.
    FpOverActual,
    /// (FP + FN) / actual.
    #[default]
    FpfnOverActual,
    /// (FP + FN) / (actual + FP).
    FpfnOverUnion,
}

impl std::str::FromStr for DsmrVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fp_over_actual" => Ok(DsmrVariant::FpOverActual),
            "fpfn_over_actual" => Ok(DsmrVariant::FpfnOverActual),
            "fpfn_over_union" => Ok(DsmrVariant::FpfnOverUnion),
            _ => Err(format!("unknown dsmr variant {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmrRow {
    pub label: String,
    pub actual: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Rate in percent.
    pub rate: f64,
}

/// Per-class misdiagnosis rates (in percent). Classes with zero actual
/// count are omitted; callers can detect the omission from the row set.
pub fn dsmr(cm: &ConfusionMatrix, variant: DsmrVariant) -> Vec<DsmrRow> {
    let mut rows = Vec::new();
    for i in 0..cm.n_classes() {
        let actual = cm.row_sum(i);
        if actual == 0 {
            continue;
        }
        let tp = cm.counts[i][i];
        let fp = cm.col_sum(i) - tp;
        let fn_ = actual - tp;
        let rate = match variant {
            DsmrVariant::FpOverActual => fp as f64 / actual as f64,
            DsmrVariant::FpfnOverActual => (fp + fn_) as f64 / actual as f64,
            DsmrVariant::FpfnOverUnion => (fp + fn_) as f64 / (actual + fp) as f64,
        };
        rows.push(DsmrRow { label: cm.labels[i].clone(), actual, fp, fn_, rate: rate * 100.0 });
    }
    rows
}

/// Complete rating matrix: one row per subject, one column per rater.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    values: Vec<Vec<f64>>,
}

impl RatingMatrix {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let n = values.len();
        let k = values.first().map_or(0, |r| r.len());
        if n < 2 || k < 2 {
            return Err(MetricsError::TooFewRatings { n, k });
        }
        if values.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return Err(MetricsError::BadRatings);
        }
        Ok(RatingMatrix { values })
    }

    pub fn n_subjects(&self) -> usize {
        self.values.len()
    }

    pub fn n_raters(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Keep only the given rater columns (for pairwise analysis).
    pub fn select_raters(&self, cols: &[usize]) -> Result<RatingMatrix, MetricsError> {
        let values = self
            .values
            .iter()
            .map(|row| cols.iter().map(|&c| row[c]).collect())
            .collect();
        RatingMatrix::new(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReliabilityClass {
    Poor,
    Fair,
    Good,
    Excellent,
}

impl std::fmt::Display for ReliabilityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReliabilityClass::Poor => "Poor",
            ReliabilityClass::Fair => "Fair",
            ReliabilityClass::Good => "Good",
            ReliabilityClass::Excellent => "Excellent",
        };
        f.write_str(s)
    }
}

/// Reference bands: <0.40 Poor, [0.40, 0.60) Fair, [0.60, 0.75) Good,
/// >= 0.75 Excellent.
pub fn classify_icc(value: f64) -> ReliabilityClass {
    if value < 0.40 {
        ReliabilityClass::Poor
    } else if value < 0.60 {
        ReliabilityClass::Fair
    } else if value < 0.75 {
        ReliabilityClass::Good
    } else {
        ReliabilityClass::Excellent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub value: f64,
    pub classification: ReliabilityClass,
    /// Set when the matrix had zero total variance and the value was pinned
    /// to 1.0 by convention.
    pub degenerate: bool,
}

/// Two-way random-effects intraclass correlation:
/// (MSR - MSE) / (MSR + (1/n)(k*MSC - MSE)), with the mean squares from the
/// two-way ANOVA decomposition over subjects (rows) and raters (columns).
pub fn icc_2k(ratings: &RatingMatrix) -> Result<IccResult, MetricsError> {
    let n = ratings.n_subjects();
    let k = ratings.n_raters();
    let values = ratings.values();
    let grand: f64 = values.iter().flatten().sum::<f64>() / (n * k) as f64;
    let total_var: f64 = values.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if total_var == 0.0 {
        return Ok(IccResult {
            value: 1.0,
            classification: classify_icc(1.0),
            degenerate: true,
        });
    }
    let row_means: Vec<f64> =
        values.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| values.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let ssr: f64 = row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * k as f64;
    let ssc: f64 = col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * n as f64;
    let mut sse = 0.0;
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            sse += (v - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let msr = ssr / (n - 1) as f64;
    let msc = ssc / (k - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;
    let denom = msr + (k as f64 * msc - mse) / n as f64;
    let mut value = (msr - mse) / denom;
    if !value.is_finite() {
        value = 0.0;
    }
    Ok(IccResult { value, classification: classify_icc(value), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIcc {
    pub rater_a: String,
    pub rater_b: String,
    pub value: f64,
    pub classification: ReliabilityClass,
}

/// Pairwise ICC(2,k) with k=2 over every unordered rater pair.
pub fn rater_agreement(
    rater_names: &[String],
    ratings: &RatingMatrix,
) -> Result<Vec<PairIcc>, MetricsError> {
    if rater_names.len() != ratings.n_raters() {
        return Err(MetricsError::BadRatings);
    }
    let mut pairs = Vec::new();
    for a in 0..rater_names.len() {
        for b in (a + 1)..rater_names.len() {
            let sub = ratings.select_raters(&[a, b])?;
            let icc = icc_2k(&sub)?;
            pairs.push(PairIcc {
                rater_a: rater_names[a].clone(),
                rater_b: rater_names[b].clone(),
                value: icc.value,
                classification: icc.classification,
            });
        }
    }
    Ok(pairs)
}

/// Read a ratings CSV: header row names the raters, first column is the
/// subject id, one column per rater. Cells are numeric, or diagnosis label
/// tokens (D1..D17) encoded as their one-based index. Empty or unparseable
/// cells are errors.
pub fn read_ratings_csv(
    path: &std::path::Path,
) -> Result<(Vec<String>, RatingMatrix), MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| MetricsError::RatingsFile(e.to_string()))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| MetricsError::RatingsFile(e.to_string()))?
        .iter()
        .skip(1)
        .map(|h| h.trim().to_string())
        .collect();
    let mut values = Vec::new();
    for (lineno, record) in reader.records().enumerate() {
        let record = record.map_err(|e| MetricsError::RatingsFile(e.to_string()))?;
        let mut row = Vec::with_capacity(names.len());
        for cell in record.iter().skip(1) {
            let cell = cell.trim();
            let value = match cell.parse::<f64>() {
                Ok(v) => v,
                Err(_) => match crate::case_model::label_from_token(
                    crate::case_model::Task::Diagnosis,
                    cell,
                ) {
                    Ok(label) => (label.index() + 1) as f64,
                    Err(_) => {
                        return Err(MetricsError::RatingsFile(format!(
                            "row {}: cell {cell:?} is neither numeric nor a diagnosis label",
                            lineno + 2
                        )))
                    }
                },
            };
            row.push(value);
        }
        if row.len() != names.len() {
            return Err(MetricsError::RatingsFile(format!(
                "row {}: expected {} rater cells, got {}",
                lineno + 2,
                names.len(),
                row.len()
            )));
        }
        values.push(row);
    }
    Ok((names, RatingMatrix::new(values)?))
}

/// Everything the evaluator reports for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub kappa: f64,
    pub mcc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub dsmr_variant: DsmrVariant,
    pub dsmr: Vec<DsmrRow>,
    pub excluded_classes: Vec<String>,
    pub parse_fail_count: u64,
}

impl MetricsReport {
    /// Assemble the full report for one task from its confusion matrix.
    /// `scores` is per-episode per-class confidence, when available.
    pub fn from_confusion(
        task: &str,
        cm: &ConfusionMatrix,
        variant: DsmrVariant,
        scores: Option<(&[Vec<f64>], &[usize])>,
    ) -> Result<MetricsReport, MetricsError> {
        let summary = basic_metrics(cm)?;
        let auc = match scores {
            Some((s, g)) => Some(auc_ovr(s, g, cm.n_classes())?),
            None => None,
        };
        Ok(MetricsReport {
            task: task.to_string(),
            accuracy: summary.accuracy,
            macro_precision: summary.macro_precision,
            macro_f1: summary.macro_f1,
            sensitivity: summary.sensitivity,
            specificity: summary.specificity,
            kappa: cohens_kappa(cm)?,
            mcc: mcc(cm)?,
            auc,
            per_class: summary.per_class,
            dsmr_variant: variant,
            dsmr: dsmr(cm, variant),
            excluded_classes: summary.excluded_classes,
            parse_fail_count: cm.parse_fail_count(),
        })
    }
}
