//! Challenge scoring: the normal survival function, per-plane scores,
//! report aggregation, leaderboard ranking and stratified folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream;

/// Upper tail of the standard normal, `1 - Phi(x)`.
pub fn normal_ccdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::arg(format!("normal_ccdf of non-finite {x}")));
    }
    let z = x.abs();
    let tail = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_47 {
            let num = horner(
                &[
                    3.524_249_659_989_11e-2,
                    0.700_383_064_443_688,
                    6.373_962_203_531_65,
                    33.912_866_078_383,
                    112.079_291_497_871,
                    221.213_596_169_931,
                    220.206_867_912_376,
                ],
                z,
            );
            let den = horner(
                &[
                    8.838_834_764_831_84e-2,
                    1.755_667_163_182_64,
                    16.064_177_579_207,
                    86.780_732_202_946_1,
                    296.564_248_779_674,
                    637.333_633_378_831,
                    793.826_512_519_948,
                    440.413_735_824_752,
                ],
                z,
            );
            e * num / den
        } else {
            let cf = z + 1.0 / (z + 2.0 / (z + 3.0 / (z + 4.0 / (z + 0.65))));
            e / cf / 2.506_628_274_631
        }
    };
    Ok(if x > 0.0 { tail } else { 1.0 - tail })
}

/// Polynomial with coefficients from the highest power down.
fn horner(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * z + c)
}

/// `2 * ccdf(|p - t| / 3)`: 1 for an exact hit, about 0.5 two planes off.
pub fn plane_score(p: i64, t: i64) -> f64 {
    let e = (p - t).unsigned_abs() as f64;
    2.0 * normal_ccdf(e / 3.0).expect("finite by construction")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub volume_id: String,
    pub gppi: i64,
    pub study: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub volume_id: String,
    pub gppi_pred: i64,
    pub method: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub volume_id: String,
    pub true_gppi: i64,
    pub pred_gppi: i64,
    pub error: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub method: String,
    /// Sorted by volume id.
    pub rows: Vec<ScoreRow>,
    pub mean_score: f64,
    /// Population standard deviation of the row scores.
    pub std_score: f64,
    pub sum_score: f64,
    pub mae: f64,
}

/// Scores `(volume_id, predicted plane)` pairs against the truth table.
pub fn evaluate_predictions(method: &str, preds: &[(String, i64)], truths: &[TruthRecord]) -> Result<ScoreReport> {
    if preds.is_empty() {
        return Err(Error::arg("no predictions to evaluate"));
    }
    let mut truth_map = BTreeMap::new();
    for t in truths {
        if truth_map.insert(t.volume_id.as_str(), t.gppi).is_some() {
            return Err(Error::arg(format!("duplicate truth for {}", t.volume_id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        if !seen.insert(id.as_str()) {
            return Err(Error::arg(format!("duplicate prediction for {id}")));
        }
        let t = *truth_map
            .get(id.as_str())
            .ok_or_else(|| Error::NotFound(format!("no truth for volume {id}")))?;
        rows.push(ScoreRow {
            volume_id: id.clone(),
            true_gppi: t,
            pred_gppi: *p,
            error: (p - t).abs(),
            score: plane_score(*p, t),
        });
    }
    rows.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
    let n = rows.len() as f64;
    let sum_score: f64 = rows.iter().map(|r| r.score).sum();
    let mean_score = sum_score / n;
    let var = rows.iter().map(|r| (r.score - mean_score).powi(2)).sum::<f64>() / n;
    let mae = rows.iter().map(|r| r.error as f64).sum::<f64>() / n;
    Ok(ScoreReport {
        method: method.to_string(),
        rows,
        mean_score,
        std_score: var.sqrt(),
        sum_score,
        mae,
    })
}

/// One report per method, ordered by method name.
pub fn evaluate_by_method(preds: &[Prediction], truths: &[TruthRecord]) -> Result<Vec<ScoreReport>> {
    let mut groups: BTreeMap<&str, Vec<(String, i64)>> = BTreeMap::new();
    for p in preds {
        groups
            .entry(p.method.as_str())
            .or_default()
            .push((p.volume_id.clone(), p.gppi_pred));
    }
    if groups.is_empty() {
        return Err(Error::arg("no predictions to evaluate"));
    }
    groups
        .into_iter()
        .map(|(m, rows)| evaluate_predictions(m, &rows, truths))
        .collect()
}

pub fn mae_of(diffs: &[i64]) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::arg("mean absolute error of an empty list"));
    }
    Ok(diffs.iter().map(|d| d.unsigned_abs() as f64).sum::<f64>() / diffs.len() as f64)
}

/// Mean and sample standard deviation; a single value has std 0 and
/// `single` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvSummary {
    pub mean: f64,
    pub std: f64,
    pub single: bool,
}

pub fn aggregate_cv(values: &[f64]) -> Result<CvSummary> {
    if values.is_empty() {
        return Err(Error::arg("no fold scores"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(CvSummary {
            mean,
            std: 0.0,
            single: true,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(CvSummary {
        mean,
        std: var.sqrt(),
        single: false,
    })
}

/// Highest score sum first; ties go to the lower MAE, then the method name.
pub fn rank_teams(reports: &[ScoreReport]) -> Vec<ScoreReport> {
    let mut out = reports.to_vec();
    out.sort_by(|a, b| {
        b.sum_score
            .total_cmp(&a.sum_score)
            .then(a.mae.total_cmp(&b.mae))
            .then(a.method.cmp(&b.method))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
    pub stratum_of: BTreeMap<String, String>,
}

impl FoldAssignment {
    /// Ids in `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids outside `fold`, sorted.
    pub fn complement(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Seeded shuffle inside each stratum, then one round-robin pass over the
/// strata in name order so both per-stratum and overall fold sizes stay
/// within one of each other. Strata smaller than `k` simply leave some
/// folds without members of that stratum.
pub fn kfold_split(ids: &[(String, String)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::arg(format!("k-fold split needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::arg(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut stratum_of = BTreeMap::new();
    for (id, s) in ids {
        if stratum_of.insert(id.clone(), s.clone()).is_some() {
            return Err(Error::arg(format!("duplicate id {id}")));
        }
        strata.entry(s.as_str()).or_default().push(id.as_str());
    }
    let mut fold_of = BTreeMap::new();
    let mut next = 0usize;
    for (name, members) in strata.iter_mut() {
        members.sort_unstable();
        members.shuffle(&mut stream(seed, &["kfold", name]));
        for id in members.iter() {
            fold_of.insert(id.to_string(), next % k);
            next += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of, stratum_of })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_records<T: Serialize>(path: &Path, records: &[T], header: &[&str]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    wtr.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in records {
        wtr.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = wtr.into_inner().map_err(|e| csv_err(path, e))?;
    write_text(path, &String::from_utf8(bytes).map_err(|e| csv_err(path, e))?)
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRecord>> {
    read_records(path)
}

/// Writes `volume_id,gppi,study`, rows sorted by id.
pub fn write_truth_csv(records: &[TruthRecord], path: &Path) -> Result<()> {
    let mut rows = records.to_vec();
    rows.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
    write_records(path, &rows, &["volume_id", "gppi", "study"])
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    read_records(path)
}

/// Writes `volume_id,gppi_pred,method,model_id`, sorted by id then method.
pub fn write_predictions_csv(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut rows = preds.to_vec();
    rows.sort_by(|a, b| a.volume_id.cmp(&b.volume_id).then(a.method.cmp(&b.method)));
    write_records(path, &rows, &["volume_id", "gppi_pred", "method", "model_id"])
}

/// Per-row report for every method.
pub fn report_csv(reports: &[ScoreReport]) -> String {
    let mut s = String::from("method,volume_id,true_gppi,pred_gppi,error,score\n");
    for r in reports {
        for row in &r.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                r.method, row.volume_id, row.true_gppi, row.pred_gppi, row.error, row.score
            );
        }
    }
    s
}

/// `method,mean,std,sum,mae`, one line per report in the given order.
pub fn summary_csv(reports: &[ScoreReport]) -> String {
    let mut s = String::from("method,mean,std,sum,mae\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.mean_score, r.std_score, r.sum_score, r.mae
        );
    }
    s
}

pub fn write_report_csv(reports: &[ScoreReport], path: &Path) -> Result<()> {
    write_text(path, &report_csv(reports))
}

pub fn write_summary_csv(reports: &[ScoreReport], path: &Path) -> Result<()> {
    write_text(path, &summary_csv(reports))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRecord {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub sum: f64,
    pub mae: f64,
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRecord>> {
    read_records(path)
}

/// Aligned plain-text table of ranked reports.
pub fn leaderboard_table(ranked: &[ScoreReport]) -> String {
    let width = ranked.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:>4}  {:<width$}  {:>8}  {:>8}  {:>8}  {:>6}\n",
        "rank", "method", "sum", "mean", "std", "mae"
    );
    for (i, r) in ranked.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>4}  {:<width$}  {:>8.3}  {:>8.3}  {:>8.3}  {:>6.2}",
            i + 1,
            r.method,
            r.sum_score,
            r.mean_score,
            r.std_score,
            r.mae
        );
    }
    s
}
