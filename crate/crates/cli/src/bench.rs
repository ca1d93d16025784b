//! The one-command seeded benchmark.
//!
//! Self-contained: per repetition it generates a fresh corpus, trains the
//! full {variant} × {non-DP, σ sweep} grid, runs every configured attack,
//! and assembles reports. After all repetitions it checks the qualitative
//! leakage/privacy trends on values averaged over repetitions and writes a
//! merged report bundle plus a PASS/FAIL summary.
//!
//! Trends asserted (skipped under `--quick`):
//!   (a) non-DP PL rises from epoch 1 to the final epoch for every attack
//!   (b) S-GWBA PL ≥ S-BBA PL on the non-DP final epoch
//!   (c) P-BBA PL ≥ S-BBA PL on the non-DP final epoch
//!   (d) AR S-BBA PL ≥ MLM S-BBA PL on the non-DP final epoch
//!   (e) S-BBA PL at σ ∈ {1, 2} is ≤ 0.01 + 2·SE while non-DP PL > 0.03
//!   (f) DP test LM loss is monotone nondecreasing in σ over {1e-4, 1e-2, 1, 2}
//!   (g) Spearman ρ(bucket mean probability, bucket PL) < 0 on the non-DP
//!       final epoch
//!
//! Leakage trends pool both objectives (and, where applicable, all attack
//! units): each assertion compares means over repetitions × variants.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use lmleak::report::{BudgetRow, LeakageReport, LeakageRow, UtilityRow};
use lmleak::util::child_seed;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::stages::{
    stage_attack, stage_gen_corpus, stage_report, stage_train, write_json, write_report_bundle,
    AttackOpts, RarityEntry,
};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub quick: bool,
    pub n_reps: usize,
    pub base_seed: u64,
    pub assertions: Vec<TrendResult>,
}

/// Everything collected across repetitions that the assertions consume.
#[derive(Debug, Default)]
struct BenchData {
    /// (rep, cell_id) → (objective, sigma, final_epoch)
    cells: BTreeMap<(usize, String), (String, Option<f64>, usize)>,
    /// (rep, cell_id, epoch, attack) → PL
    pls: BTreeMap<(usize, String, usize, String), f64>,
    /// (rep, cell_id, epoch) → test LM loss
    test_loss: BTreeMap<(usize, String, usize), f64>,
    /// (rep, cell_id) → rarity Spearman ρ (non-DP final epoch P-BBA)
    rhos: Vec<(usize, String, Option<f64>)>,
}

/// Runs the benchmark and writes `report.csv`, `report.json`, `budget.json`,
/// `rarity.csv`, `rarity.json`, and `summary.json` under `out`. Returns the
/// summary; trend failures surface as `CliError::Assertion` after all
/// artifacts are written.
type UtilityKey = (String, String, String, usize);

pub fn run_bench(
    cfg: &ExperimentConfig,
    out: &Path,
    base_seed: u64,
    quick: bool,
) -> Result<BenchSummary, CliError> {
    let n_reps = if quick { 1 } else { cfg.bench.n_seeds };
    let adversaries = cfg.adversaries()?;
    let started = Instant::now();

    let mut data = BenchData::default();
    let mut all_rows: Vec<LeakageRow> = Vec::new();
    // (model_id, objective, sigma label, epoch) -> per-rep (train, test) losses.
    let mut utility_acc: BTreeMap<UtilityKey, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    let mut budgets_rep0: Vec<BudgetRow> = Vec::new();
    let mut rarity_rep0: Vec<RarityEntry> = Vec::new();
    let mut rarity_all: Vec<(usize, RarityEntry)> = Vec::new();

    for rep in 0..n_reps {
        let rep_started = Instant::now();
        let rep_seed = child_seed(base_seed, "bench-rep", rep as u64, 0);
        let rep_dir = out.join("bench").join(format!("rep_{rep}"));
        let corpus_dir = rep_dir.join("corpus");
        let run_dir = rep_dir.join("runs").join("grid");

        let summary = stage_gen_corpus(cfg, rep_seed, &corpus_dir)?;
        println!(
            "[rep {rep}] corpus: {} patients, {} notes, {} tokens",
            summary.n_patients, summary.n_notes, summary.n_tokens
        );

        let grid = stage_train(cfg, &corpus_dir, &run_dir, "grid", rep_seed)?;
        println!(
            "[rep {rep}] trained {} cells in {:.1}s",
            grid.cells.len(),
            rep_started.elapsed().as_secs_f64()
        );

        // One attack split seed per repetition: the repetition index. The
        // report's seed column therefore identifies the repetition.
        stage_attack(
            cfg,
            &run_dir,
            &adversaries,
            &[rep as u64],
            AttackOpts {
                dp_final_only: true,
                write_features: false,
            },
        )?;
        let bundle = stage_report(cfg, &run_dir, &rep_dir.join("report"))?;
        println!(
            "[rep {rep}] attacks + report done ({:.1}s total)",
            rep_started.elapsed().as_secs_f64()
        );

        for cell in &grid.cells {
            data.cells.insert(
                (rep, cell.cell_id.clone()),
                (cell.objective.clone(), cell.sigma, cell.epochs_completed),
            );
        }
        for row in &bundle.report.rows {
            data.pls.insert(
                (rep, row.model_id.clone(), row.epoch, row.attack.clone()),
                row.pl,
            );
        }
        for u in &bundle.report.utility {
            if let Some(tl) = u.test_loss {
                data.test_loss
                    .insert((rep, u.model_id.clone(), u.epoch), tl);
            }
            utility_acc
                .entry((
                    u.model_id.clone(),
                    u.objective.clone(),
                    u.sigma.clone(),
                    u.epoch,
                ))
                .or_default()
                .push((u.train_loss, u.test_loss));
        }
        for r in &bundle.rarity {
            data.rhos
                .push((rep, r.cell_id.clone(), r.analysis.spearman));
            rarity_all.push((rep, r.clone()));
        }
        all_rows.extend(bundle.report.rows.iter().cloned());
        if rep == 0 {
            budgets_rep0 = bundle.report.budgets.clone();
            rarity_rep0 = bundle.rarity.clone();
        }
    }

    // Merged artifacts. Rows sort by (cell, epoch, attack, seed); the seed
    // column is the repetition index. Utility is averaged over repetitions;
    // budgets and the rarity CSV come from repetition 0 (per-repetition
    // copies live under bench/rep_<k>/report/).
    all_rows.sort_by(|a, b| {
        (&a.model_id, a.epoch, &a.attack, a.seed).cmp(&(&b.model_id, b.epoch, &b.attack, b.seed))
    });
    let utility: Vec<UtilityRow> = utility_acc
        .into_iter()
        .map(|((model_id, objective, sigma, epoch), vals)| {
            let train_loss = vals.iter().map(|(t, _)| t).sum::<f64>() / vals.len() as f64;
            let tests: Vec<f64> = vals.iter().filter_map(|(_, te)| *te).collect();
            let test_loss = if tests.is_empty() {
                None
            } else {
                Some(tests.iter().sum::<f64>() / tests.len() as f64)
            };
            UtilityRow {
                model_id,
                objective,
                sigma,
                epoch,
                train_loss,
                test_loss,
            }
        })
        .collect();
    let merged = LeakageReport {
        rows: all_rows,
        utility,
        budgets: budgets_rep0,
    };
    write_report_bundle(&merged, &rarity_rep0, out)?;
    write_json(
        &out.join("rarity.json"),
        &rarity_all
            .iter()
            .map(|(rep, r)| {
                serde_json::json!({
                    "rep": rep,
                    "cell_id": r.cell_id,
                    "objective": r.objective,
                    "split_seed": r.split_seed,
                    "spearman": r.analysis.spearman,
                    "pearson": r.analysis.pearson,
                    "mu_tr": r.analysis.mu_tr,
                    "buckets": r.analysis.buckets,
                })
            })
            .collect::<Vec<_>>(),
    )?;

    let assertions = if quick {
        println!("quick mode: trend assertions skipped");
        Vec::new()
    } else {
        let list = run_trend_assertions(cfg, &data);
        for t in &list {
            println!(
                "TREND {} ... {}  [{}]",
                t.name,
                if t.pass { "PASS" } else { "FAIL" },
                t.detail
            );
        }
        list
    };

    let summary = BenchSummary {
        quick,
        n_reps,
        base_seed,
        assertions: assertions.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "benchmark finished in {:.1}s ({n_reps} repetition(s))",
        started.elapsed().as_secs_f64()
    );

    let failures: Vec<&TrendResult> = assertions.iter().filter(|t| !t.pass).collect();
    if !failures.is_empty() {
        let names: Vec<String> = failures
            .iter()
            .map(|t| format!("{} [{}]", t.name, t.detail))
            .collect();
        return Err(CliError::Assertion(format!(
            "{} trend assertion(s) failed: {}",
            failures.len(),
            names.join("; ")
        )));
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Trend assertions
// ---------------------------------------------------------------------------

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Standard error of the mean (sample standard deviation / √n).
fn standard_error(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

impl BenchData {
    /// PLs of `attack` pooled over repetitions and non-DP cells at either
    /// the first or each cell's final epoch.
    fn nondp_pls(&self, attack: &str, final_epoch: bool, objective: Option<&str>) -> Vec<f64> {
        let mut out = Vec::new();
        for ((rep, cell_id), (obj, sigma, final_ep)) in &self.cells {
            if sigma.is_some() || *final_ep == 0 {
                continue;
            }
            if let Some(want) = objective {
                if obj != want {
                    continue;
                }
            }
            let epoch = if final_epoch { *final_ep } else { 1 };
            if let Some(&pl) = self
                .pls
                .get(&(*rep, cell_id.clone(), epoch, attack.to_string()))
            {
                out.push(pl);
            }
        }
        out
    }

    /// Final-epoch PLs of `attack` pooled over repetitions and DP cells with
    /// noise multiplier `sigma`.
    fn dp_pls(&self, attack: &str, sigma: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for ((rep, cell_id), (_obj, cell_sigma, final_ep)) in &self.cells {
            if *final_ep == 0 || *cell_sigma != Some(sigma) {
                continue;
            }
            if let Some(&pl) = self
                .pls
                .get(&(*rep, cell_id.clone(), *final_ep, attack.to_string()))
            {
                out.push(pl);
            }
        }
        out
    }

    /// Final-epoch test losses pooled over repetitions and DP cells with
    /// noise multiplier `sigma`.
    fn dp_test_losses(&self, sigma: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for ((rep, cell_id), (_obj, cell_sigma, final_ep)) in &self.cells {
            if *final_ep == 0 || *cell_sigma != Some(sigma) {
                continue;
            }
            if let Some(&tl) = self.test_loss.get(&(*rep, cell_id.clone(), *final_ep)) {
                out.push(tl);
            }
        }
        out
    }
}

fn run_trend_assertions(cfg: &ExperimentConfig, data: &BenchData) -> Vec<TrendResult> {
    let mut out = Vec::new();
    let attacks = ["S-BBA", "A-BBA", "P-BBA", "S-AWBA", "S-GWBA"];

    // (a) PL rises from epoch 1 to the final epoch for every attack (non-DP).
    {
        let mut pass = true;
        let mut parts = Vec::new();
        for a in attacks {
            let e1 = mean(&data.nondp_pls(a, false, None));
            let ef = mean(&data.nondp_pls(a, true, None));
            match (e1, ef) {
                (Some(e1), Some(ef)) => {
                    if ef.is_nan() || e1.is_nan() || ef <= e1 {
                        pass = false;
                    }
                    parts.push(format!("{a} {e1:.3}->{ef:.3}"));
                }
                _ => {
                    pass = false;
                    parts.push(format!("{a} missing"));
                }
            }
        }
        out.push(TrendResult {
            name: "(a) non-DP PL rises from epoch 1 to final for every attack".into(),
            pass,
            detail: parts.join(", "),
        });
    }

    // (b)/(c): stronger adversaries on the non-DP final epoch.
    for (name, strong) in [
        ("(b) S-GWBA >= S-BBA on non-DP final epoch", "S-GWBA"),
        ("(c) P-BBA >= S-BBA on non-DP final epoch", "P-BBA"),
    ] {
        let s = mean(&data.nondp_pls(strong, true, None));
        let b = mean(&data.nondp_pls("S-BBA", true, None));
        let (pass, detail) = match (s, b) {
            (Some(s), Some(b)) => (s >= b, format!("{strong}={s:.3} S-BBA={b:.3}")),
            _ => (false, "missing outcomes".into()),
        };
        out.push(TrendResult {
            name: name.into(),
            pass,
            detail,
        });
    }

    // (d) AR leaks at least as much as MLM under S-BBA.
    {
        let ar = mean(&data.nondp_pls("S-BBA", true, Some("ar")));
        let mlm = mean(&data.nondp_pls("S-BBA", true, Some("mlm")));
        let (pass, detail) = match (ar, mlm) {
            (Some(a), Some(m)) => (a >= m, format!("ar={a:.3} mlm={m:.3}")),
            _ => (false, "missing objective".into()),
        };
        out.push(TrendResult {
            name: "(d) AR S-BBA PL >= MLM S-BBA PL on non-DP final epoch".into(),
            pass,
            detail,
        });
    }

    // (e) σ ∈ {1, 2} suppress S-BBA while the non-DP model leaks.
    {
        let mut pass = true;
        let mut parts = Vec::new();
        for sigma in [1.0, 2.0] {
            let pls = data.dp_pls("S-BBA", sigma);
            match (mean(&pls), standard_error(&pls)) {
                (Some(m), Some(se)) => {
                    let bound = 0.01 + 2.0 * se;
                    if m.is_nan() || m > bound {
                        pass = false;
                    }
                    parts.push(format!("sigma={sigma}: {m:.4}<=({bound:.4})"));
                }
                _ => {
                    pass = false;
                    parts.push(format!("sigma={sigma}: missing (need >=2 values)"));
                }
            }
        }
        let nondp = mean(&data.nondp_pls("S-BBA", true, None));
        match nondp {
            Some(m) => {
                if m.is_nan() || m <= 0.03 {
                    pass = false;
                }
                parts.push(format!("non-DP={m:.3}>0.03"));
            }
            None => {
                pass = false;
                parts.push("non-DP missing".into());
            }
        }
        out.push(TrendResult {
            name: "(e) S-BBA PL flat at sigma in {1,2} while non-DP leaks".into(),
            pass,
            detail: parts.join(", "),
        });
    }

    // (f) Test LM loss monotone nondecreasing in σ.
    {
        let mut sigmas: Vec<f64> = cfg
            .train
            .sigma_sweep
            .iter()
            .copied()
            .filter(|s| [1e-4, 1e-2, 1.0, 2.0].contains(s))
            .collect();
        sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sigmas.dedup();
        let mut pass = sigmas.len() == 4;
        let mut parts = Vec::new();
        let mut prev: Option<(f64, Vec<f64>)> = None;
        for &s in &sigmas {
            let losses = data.dp_test_losses(s);
            match mean(&losses) {
                Some(m) => {
                    if let Some((pm, pl)) = &prev {
                        // Adjacent noise scales that are effectively identical
                        // (e.g. 1e-4 vs 1e-2) produce statistical ties, so the
                        // step may dip below zero by at most twice the standard
                        // error of the paired per-cell difference. Real
                        // inversions greatly exceed that band.
                        let tol = if pl.len() == losses.len() {
                            let diffs: Vec<f64> =
                                losses.iter().zip(pl).map(|(b, a)| b - a).collect();
                            standard_error(&diffs).map_or(1e-12, |se| 2.0 * se + 1e-12)
                        } else {
                            1e-12
                        };
                        if m < pm - tol {
                            pass = false;
                        }
                    }
                    parts.push(format!("{s}:{m:.4}"));
                    prev = Some((m, losses));
                }
                None => {
                    pass = false;
                    parts.push(format!("{s}:missing"));
                }
            }
        }
        out.push(TrendResult {
            name: "(f) DP test loss monotone nondecreasing in sigma over {1e-4,1e-2,1,2}".into(),
            pass,
            detail: parts.join(" <= "),
        });
    }

    // (g) Rarer profiles leak more: negative rank correlation.
    {
        let rhos: Vec<f64> = data.rhos.iter().filter_map(|(_, _, r)| *r).collect();
        let (pass, detail) = match mean(&rhos) {
            Some(m) => (
                m < 0.0,
                format!("mean rho={m:.3} over {} analyses", rhos.len()),
            ),
            None => (false, "no rarity analyses produced".into()),
        };
        out.push(TrendResult {
            name: "(g) Spearman rho(bucket probability, bucket PL) < 0".into(),
            pass,
            detail,
        });
    }

    out
}
