//! Leakage and rarity reporting: privacy-leakage computation (the single
//! source of truth for `PL = Pr[A=0|b=0] − Pr[A=0|b=1]`), per-rarity-bucket
//! leakage with Spearman/Pearson correlation against bucket probability, and
//! deterministic CSV/JSON emission.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RarityBucket;
use crate::util::mean;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("prediction entries must be 0 or 1, got {0}")]
    NotBinary(u8),
    #[error("inputs must have equal length >= 3")]
    BadLength,
    #[error("no retained buckets")]
    NoBuckets,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// `PL = (fraction of 0s among train predictions) − (fraction of 0s among
/// test predictions)`; prediction bit 0 means "member".
pub fn compute_pl(predictions_train: &[u8], predictions_test: &[u8]) -> Result<f64, ReportError> {
    if predictions_train.is_empty() {
        return Err(ReportError::Empty("predictions_train"));
    }
    if predictions_test.is_empty() {
        return Err(ReportError::Empty("predictions_test"));
    }
    for &p in predictions_train.iter().chain(predictions_test) {
        if p > 1 {
            return Err(ReportError::NotBinary(p));
        }
    }
    let frac0 = |v: &[u8]| v.iter().filter(|&&p| p == 0).count() as f64 / v.len() as f64;
    Ok(frac0(predictions_train) - frac0(predictions_test))
}

/// One patient-level attack decision, used for bucketed leakage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    /// Predicted membership bit (0 = member).
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: usize,
    pub log_prob_lo: f64,
    pub log_prob_hi: f64,
    /// Mean profile probability of the bucket's patients (linear scale).
    pub mean_prob: f64,
    pub n_patients: usize,
    /// `None` when the bucket lacks patients on one side (excluded from the
    /// correlation rather than imputed).
    pub pl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityAnalysis {
    pub buckets: Vec<BucketRow>,
    /// Spearman ρ between bucket mean probability and bucket PL.
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    /// The sample-level threshold the P-BBA predictions used.
    pub mu_tr: f64,
}

/// Computes per-bucket PL from patient-level (P-BBA) predictions, restricted
/// to each bucket's patients, and correlates bucket mean probability with
/// bucket PL across buckets populated on both sides.
pub fn bucketed_pl(
    buckets: &[RarityBucket],
    mean_probs: &[f64],
    train_preds: &[PatientPrediction],
    test_preds: &[PatientPrediction],
    mu_tr: f64,
) -> Result<RarityAnalysis, ReportError> {
    if buckets.is_empty() {
        return Err(ReportError::NoBuckets);
    }
    assert_eq!(
        buckets.len(),
        mean_probs.len(),
        "one mean probability per bucket"
    );
    let mut rows = Vec::with_capacity(buckets.len());
    for (b, &mean_prob) in buckets.iter().zip(mean_probs) {
        let in_bucket = |p: &&PatientPrediction| b.member_patient_ids.contains(&p.patient_id);
        let tr: Vec<u8> = train_preds
            .iter()
            .filter(in_bucket)
            .map(|p| p.predicted)
            .collect();
        let te: Vec<u8> = test_preds
            .iter()
            .filter(in_bucket)
            .map(|p| p.predicted)
            .collect();
        let pl = if tr.is_empty() || te.is_empty() {
            None
        } else {
            Some(compute_pl(&tr, &te)?)
        };
        rows.push(BucketRow {
            bucket: b.bucket_index,
            log_prob_lo: b.log_prob_lo,
            log_prob_hi: b.log_prob_hi,
            mean_prob,
            n_patients: tr.len() + te.len(),
            pl,
        });
    }
    let populated: Vec<&BucketRow> = rows.iter().filter(|r| r.pl.is_some()).collect();
    let (spearman, pearson) = if populated.len() >= 3 {
        let xs: Vec<f64> = populated.iter().map(|r| r.mean_prob).collect();
        let ys: Vec<f64> = populated.iter().map(|r| r.pl.unwrap()).collect();
        (rank_correlation(&xs, &ys)?, pearson_correlation(&xs, &ys))
    } else {
        (None, None)
    };
    Ok(RarityAnalysis {
        buckets: rows,
        spearman,
        pearson,
        mu_tr,
    })
}

/// Average ranks (ties share the mean of their positions), 1-based.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman ρ with average-rank ties: Pearson correlation of the rank
/// vectors. Returns `Ok(None)` when undefined (constant input).
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, ReportError> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(ReportError::BadLength);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    Ok(pearson_correlation(&rx, &ry))
}

/// One leakage measurement: an attack on a checkpoint of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub model_id: String,
    pub objective: String,
    /// "non-DP" for the baseline cell, otherwise the σ value.
    pub sigma: String,
    pub epoch: usize,
    pub attack: String,
    /// Attack unit: sample, admission, or patient.
    pub unit: String,
    pub pl: f64,
    pub n_train_units: usize,
    pub n_test_units: usize,
    pub seed: u64,
}

/// Per-epoch utility of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub model_id: String,
    pub objective: String,
    pub sigma: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

/// Accountant output for one trained DP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub model_id: String,
    pub sigma: f64,
    pub q: f64,
    pub steps: usize,
    pub delta: f64,
    /// `None` when infinite.
    pub epsilon: Option<f64>,
    pub optimal_order: Option<usize>,
    pub group_k: usize,
    pub group_epsilon: Option<f64>,
    pub group_delta: Option<f64>,
    pub group_delta_capped: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LeakageReport {
    pub rows: Vec<LeakageRow>,
    pub utility: Vec<UtilityRow>,
    pub budgets: Vec<BudgetRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Deterministic σ column formatting: plain decimal down to 1e-3, scientific
/// below (so σ = 1e-20 prints as `1e-20`, not forty zeros).
pub fn format_sigma(sigma: f64) -> String {
    if sigma == 0.0 {
        "0".to_string()
    } else if sigma.abs() >= 1e-3 {
        format!("{sigma}")
    } else {
        format!("{sigma:e}")
    }
}

/// Writes the leakage rows as `report.csv` (CSV) or the whole report (JSON).
/// Output is deterministic: fixed column order, no timestamps.
pub fn emit_report(
    report: &LeakageReport,
    path: &Path,
    format: ReportFormat,
) -> Result<(), ReportError> {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(
                "model_id,objective,sigma,epoch,attack,unit,pl,n_train_units,n_test_units,seed\n",
            );
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.model_id,
                    r.objective,
                    r.sigma,
                    r.epoch,
                    r.attack,
                    r.unit,
                    r.pl,
                    r.n_train_units,
                    r.n_test_units,
                    r.seed
                ));
            }
            std::fs::write(path, out)?;
        }
        ReportFormat::Json => {
            std::fs::write(path, serde_json::to_string_pretty(report)?)?;
        }
    }
    Ok(())
}

/// Reads back a JSON report written by [`emit_report`].
pub fn read_report_json(path: &Path) -> Result<LeakageReport, ReportError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// `rarity.csv`: one row per bucket; unpopulated buckets carry an empty `pl`.
pub fn emit_rarity_csv(analysis: &RarityAnalysis, path: &Path) -> Result<(), ReportError> {
    let mut out = String::from("bucket,log_prob_lo,log_prob_hi,mean_prob,n_patients,pl\n");
    for b in &analysis.buckets {
        out.push_str(&format!(
            "{},{},{},{:e},{},{}\n",
            b.bucket,
            b.log_prob_lo,
            b.log_prob_hi,
            b.mean_prob,
            b.n_patients,
            b.pl.map(|p| p.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `budget.json`: accountant outputs for every trained DP model.
pub fn emit_budget_json(budgets: &[BudgetRow], path: &Path) -> Result<(), ReportError> {
    std::fs::write(path, serde_json::to_string_pretty(budgets)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::substream;
    use rand::Rng;

    #[test]
    fn pl_fixtures() {
        assert_eq!(compute_pl(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(compute_pl(&[0, 1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(compute_pl(&[0, 1, 0, 0], &[0, 1, 1, 1]).unwrap(), 0.5);
        assert!(compute_pl(&[], &[0]).is_err());
        assert!(compute_pl(&[0], &[]).is_err());
        assert!(compute_pl(&[0, 2], &[1]).is_err());
        // bounds
        assert_eq!(compute_pl(&[1, 1], &[0, 0]).unwrap(), -1.0);
    }

    fn bucket(idx: usize, lo: f64, hi: f64, patients: &[&str]) -> RarityBucket {
        RarityBucket {
            bucket_index: idx,
            log_prob_lo: lo,
            log_prob_hi: hi,
            member_patient_ids: patients.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn pred(pid: &str, bit: u8) -> PatientPrediction {
        PatientPrediction {
            patient_id: pid.to_string(),
            predicted: bit,
        }
    }

    #[test]
    fn single_bucket_equals_overall_pl() {
        let buckets = vec![bucket(0, -10.0, 0.0, &["p1", "p2", "q1", "q2"])];
        let train = vec![pred("p1", 0), pred("p2", 1)];
        let test = vec![pred("q1", 1), pred("q2", 1)];
        let analysis = bucketed_pl(&buckets, &[0.5], &train, &test, 3.0).unwrap();
        let overall = compute_pl(&[0, 1], &[1, 1]).unwrap();
        assert_eq!(analysis.buckets[0].pl, Some(overall));
        assert_eq!(analysis.mu_tr, 3.0);
        assert!(analysis.spearman.is_none(), "fewer than 3 buckets");
    }

    #[test]
    fn one_sided_bucket_is_null_and_excluded() {
        let buckets = vec![
            bucket(0, -10.0, -5.0, &["p1"]),
            bucket(1, -5.0, 0.0, &["p2", "q2"]),
        ];
        let train = vec![pred("p1", 0), pred("p2", 0)];
        let test = vec![pred("q2", 1)];
        let analysis = bucketed_pl(&buckets, &[0.1, 0.5], &train, &test, 1.0).unwrap();
        assert_eq!(analysis.buckets[0].pl, None, "train-only bucket");
        assert_eq!(analysis.buckets[1].pl, Some(1.0));
    }

    #[test]
    fn three_bucket_fixture_matches_enumeration() {
        let buckets = vec![
            bucket(0, -30.0, -20.0, &["a1", "a2", "b1", "b2"]),
            bucket(1, -20.0, -10.0, &["c1", "c2", "d1", "d2"]),
            bucket(2, -10.0, 0.0, &["e1", "e2", "f1", "f2"]),
        ];
        // rare bucket leaks fully, mid leaks half, common leaks none
        let train = vec![
            pred("a1", 0),
            pred("a2", 0),
            pred("c1", 0),
            pred("c2", 1),
            pred("e1", 1),
            pred("e2", 1),
        ];
        let test = vec![
            pred("b1", 1),
            pred("b2", 1),
            pred("d1", 1),
            pred("d2", 1),
            pred("f1", 1),
            pred("f2", 1),
        ];
        let probs = [1e-12, 1e-8, 1e-4];
        let analysis = bucketed_pl(&buckets, &probs, &train, &test, 0.7).unwrap();
        assert_eq!(analysis.buckets[0].pl, Some(1.0));
        assert_eq!(analysis.buckets[1].pl, Some(0.5));
        assert_eq!(analysis.buckets[2].pl, Some(0.0));
        // higher probability → lower PL: perfect inverse rank order
        assert_eq!(analysis.spearman, Some(-1.0));
        assert!(analysis.pearson.unwrap() < 0.0);
    }

    #[test]
    fn weighted_bucket_combination_reproduces_overall_pl() {
        // equal per-side bucket sizes → overall PL = Σ w_b · PL_b
        let buckets = vec![
            bucket(0, -30.0, -20.0, &["a1", "a2", "b1", "b2"]),
            bucket(1, -20.0, -10.0, &["c1", "c2", "d1", "d2"]),
        ];
        let train = vec![pred("a1", 0), pred("a2", 0), pred("c1", 0), pred("c2", 1)];
        let test = vec![pred("b1", 1), pred("b2", 0), pred("d1", 1), pred("d2", 1)];
        let analysis = bucketed_pl(&buckets, &[1e-9, 1e-5], &train, &test, 0.0).unwrap();
        let overall = compute_pl(&[0, 0, 0, 1], &[1, 0, 1, 1]).unwrap();
        let combined: f64 = analysis.buckets.iter().map(|b| 0.5 * b.pl.unwrap()).sum();
        assert!((combined - overall).abs() < 1e-12);
    }

    #[test]
    fn spearman_fixtures() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rank_correlation(&xs, &xs).unwrap(), Some(1.0));
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(rank_correlation(&xs, &rev).unwrap(), Some(-1.0));
        // monotone nonlinear map preserves ranks
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert!((rank_correlation(&xs, &ys).unwrap().unwrap() - 1.0).abs() < 1e-12);
        // constant side undefined
        assert_eq!(rank_correlation(&xs, &[5.0; 4]).unwrap(), None);
        // length preconditions
        assert!(rank_correlation(&xs, &[1.0]).is_err());
        assert!(rank_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_average_ties() {
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ranks = average_ranks(&xs);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
        let ys = [1.0, 2.0, 3.0, 4.0];
        let got = rank_correlation(&xs, &ys).unwrap().unwrap();
        // Pearson([1, 2.5, 2.5, 4], [1, 2, 3, 4]) by hand: Σdxdy = 4.5,
        // Σdx² = 4.5, Σdy² = 5 → 4.5/sqrt(22.5)
        let expect = 4.5 / 22.5f64.sqrt();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_rank_then_pearson_oracle() {
        let mut rng = substream(17, "spearman-test", 0, 0);
        let xs: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let ys: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let got = rank_correlation(&xs, &ys).unwrap().unwrap();
        // oracle: explicit ranking (no ties with probability 1), then Pearson
        let rank_of = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|x| (v.iter().filter(|y| *y < x).count() + 1) as f64)
                .collect()
        };
        let oracle = pearson_correlation(&rank_of(&xs), &rank_of(&ys)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    fn sample_report() -> LeakageReport {
        LeakageReport {
            rows: vec![
                LeakageRow {
                    model_id: "mlm-nondp".into(),
                    objective: "mlm".into(),
                    sigma: "non-DP".into(),
                    epoch: 4,
                    attack: "S-BBA".into(),
                    unit: "sample".into(),
                    pl: 0.25,
                    n_train_units: 100,
                    n_test_units: 90,
                    seed: 1,
                },
                LeakageRow {
                    model_id: "mlm-dp-1".into(),
                    objective: "mlm".into(),
                    sigma: format_sigma(1e-4),
                    epoch: 3,
                    attack: "P-BBA".into(),
                    unit: "patient".into(),
                    pl: 0.04,
                    n_train_units: 20,
                    n_test_units: 18,
                    seed: 1,
                },
            ],
            utility: vec![UtilityRow {
                model_id: "mlm-nondp".into(),
                objective: "mlm".into(),
                sigma: "non-DP".into(),
                epoch: 4,
                train_loss: 1.5,
                test_loss: Some(3.1),
            }],
            budgets: vec![BudgetRow {
                model_id: "mlm-dp-1".into(),
                sigma: 1.0,
                q: 0.05,
                steps: 60,
                delta: 1e-6,
                epsilon: Some(0.8),
                optimal_order: Some(12),
                group_k: 50,
                group_epsilon: Some(40.0),
                group_delta: Some(1.0),
                group_delta_capped: true,
            }],
        }
    }

    #[test]
    fn csv_emission_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        // empty report → header only
        emit_report(&LeakageReport::default(), &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "model_id,objective,sigma,epoch,attack,unit,pl,n_train_units,n_test_units,seed\n"
        );
        let report = sample_report();
        emit_report(&report, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), report.rows.len() + 1);
        assert!(text.contains("mlm-nondp,mlm,non-DP,4,S-BBA,sample,0.25,100,90,1"));
        assert!(text.contains("1e-4"));
        // byte-identical on re-emission
        emit_report(&report, &dir.path().join("again.csv"), ReportFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.csv")).unwrap()
        );
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = sample_report();
        emit_report(&report, &path, ReportFormat::Json).unwrap();
        let back = read_report_json(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn rarity_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rarity.csv");
        let analysis = RarityAnalysis {
            buckets: vec![
                BucketRow {
                    bucket: 0,
                    log_prob_lo: -30.0,
                    log_prob_hi: -20.0,
                    mean_prob: 1e-11,
                    n_patients: 10,
                    pl: Some(0.4),
                },
                BucketRow {
                    bucket: 1,
                    log_prob_lo: -20.0,
                    log_prob_hi: -10.0,
                    mean_prob: 2e-7,
                    n_patients: 3,
                    pl: None,
                },
            ],
            spearman: Some(-0.8),
            pearson: Some(-0.6),
            mu_tr: 2.5,
        };
        emit_rarity_csv(&analysis, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "bucket,log_prob_lo,log_prob_hi,mean_prob,n_patients,pl"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",0.4"));
        assert!(lines[2].ends_with(','), "null PL is an empty field");
    }

    #[test]
    fn sigma_formatting() {
        assert_eq!(format_sigma(0.0), "0");
        assert_eq!(format_sigma(2.0), "2");
        assert_eq!(format_sigma(0.1), "0.1");
        assert_eq!(format_sigma(0.001), "0.001");
        assert_eq!(format_sigma(1e-4), "1e-4");
        assert_eq!(format_sigma(1e-20), "1e-20");
    }
}
