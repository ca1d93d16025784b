//! Pipeline stages shared by the subcommands and the benchmark.
//!
//! Every stage reads and writes plain files under an output root, so a
//! pipeline can be resumed, partially re-run, or audited. All artifacts are
//! deterministic functions of (config, seed); re-running a stage with the
//! same inputs reproduces its outputs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lmleak::attacks::{
    evaluate_side, feature_rows, run_adversary_from_evals, write_feature_csv, AdversarySpec,
    ErrorThreshold, FeatureKind, MembershipLabel, SampleEvaluation, UnitPrediction,
};
use lmleak::corpus::{
    bucket_by_log_probability, cap_patient_samples, code_probability_mle,
    generate_synthetic_corpus, ingest_jsonl, make_samples, profile_probability, split_by_patient,
    Corpus, CorpusSplit, DiseaseStats, Sample, Side,
};
use lmleak::model::{init_params, load_checkpoint, ModelConfig};
use lmleak::report::{
    bucketed_pl, format_sigma, LeakageReport, LeakageRow, PatientPrediction, RarityAnalysis,
    UtilityRow,
};
use lmleak::trainer::{train_dpsgd, train_sgd, DpConfig, RunContext, TrainConfig, TrainLog};
use lmleak::util::child_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("missing artifact {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("corrupt artifact {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Corpus stage
// ---------------------------------------------------------------------------

/// Summary counts printed after corpus generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_patients: usize,
    pub n_admissions: usize,
    pub n_notes: usize,
    pub n_tokens: usize,
    pub vocab_size: usize,
    pub n_codes: usize,
    pub n_train_patients: usize,
    pub n_test_patients: usize,
}

/// Generates (or ingests) a corpus, splits it by patient, and persists
/// `corpus.jsonl`, `vocab.json`, `split.json`, and `stats.json` under `dir`.
pub fn stage_gen_corpus(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<CorpusSummary, CliError> {
    let corpus = match &cfg.corpus.source {
        Some(src) => ingest_jsonl(src)?,
        None => generate_synthetic_corpus(&cfg.corpus.gen, seed)?,
    };
    let split = split_by_patient(
        &corpus,
        cfg.corpus.split_ratio,
        child_seed(seed, "split", 0, 0),
    )?;
    let stats = code_probability_mle(&corpus)?;
    corpus.write_dir(dir)?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("stats.json"), &stats)?;
    Ok(CorpusSummary {
        n_patients: corpus.patients.len(),
        n_admissions: corpus.n_admissions(),
        n_notes: corpus.n_notes(),
        n_tokens: corpus.n_tokens(),
        vocab_size: corpus.vocab_size(),
        n_codes: corpus.code_universe.len(),
        n_train_patients: split.train_patients.len(),
        n_test_patients: split.test_patients.len(),
    })
}

/// Loads the three corpus artifacts back from a corpus directory.
pub fn load_corpus_dir(dir: &Path) -> Result<(Corpus, CorpusSplit, DiseaseStats), CliError> {
    let jsonl = dir.join("corpus.jsonl");
    if !jsonl.is_file() {
        return Err(CliError::Runtime(format!(
            "missing artifact {}",
            jsonl.display()
        )));
    }
    let corpus = ingest_jsonl(&jsonl)?;
    let split: CorpusSplit = read_json(&dir.join("split.json"))?;
    let stats: DiseaseStats = read_json(&dir.join("stats.json"))?;
    Ok((corpus, split, stats))
}

// ---------------------------------------------------------------------------
// Train stage
// ---------------------------------------------------------------------------

/// One trained grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell_id: String,
    pub variant: String,
    pub objective: String,
    /// `None` for the non-DP baseline cell.
    pub sigma: Option<f64>,
    pub seq_len: usize,
    pub epochs_completed: usize,
    pub n_train_samples: usize,
    pub diverged: Option<String>,
}

/// Everything the attack and report stages need to know about a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridManifest {
    pub run_id: String,
    pub seed: u64,
    pub corpus_dir: PathBuf,
    /// Per-patient cap applied to the DP cells' training samples.
    pub patient_cap: usize,
    pub cells: Vec<CellManifest>,
}

pub fn grid_path(run_dir: &Path) -> PathBuf {
    run_dir.join("grid.json")
}

/// Fixed-length samples usable by every stage: chunking can leave a final
/// chunk with a single real token, which has no AR targets and no attention
/// signal, so the experiment uniformly feeds models only samples with at
/// least two non-pad tokens (the same universe for training and attacks).
fn usable_samples(corpus: &Corpus, seq_len: usize, side: Side) -> Vec<Sample> {
    let mut samples = make_samples(corpus, seq_len, side);
    samples.retain(|s| s.real_len() >= 2);
    samples
}

fn cell_id_for(variant: &str, sigma: Option<f64>) -> String {
    match sigma {
        None => format!("{variant}-nondp"),
        Some(s) => format!("{variant}-dp-{}", format_sigma(s)),
    }
}

/// Counts `epoch_<k>` directories persisted for a cell (used when a cell
/// aborts mid-run and its in-memory log is lost).
fn completed_epochs_on_disk(cell_dir: &Path) -> usize {
    let mut k = 0;
    while cell_dir
        .join(format!("epoch_{}", k + 1))
        .join("checkpoint.json")
        .is_file()
    {
        k += 1;
    }
    k
}

/// Trains every (variant × {non-DP, σ sweep}) cell. A diverging cell is
/// recorded and skipped; the rest of the grid still trains.
///
/// Seeding gives common random numbers across the σ sweep: all DP cells of a
/// variant share the initialization, lot draws, mask draws, and unit noise
/// directions, so cells differ only by the noise magnitude σ.
pub fn stage_train(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    run_dir: &Path,
    run_id: &str,
    seed: u64,
) -> Result<GridManifest, CliError> {
    let (corpus, split, _stats) = load_corpus_dir(corpus_dir)?;
    let train_corpus = corpus.subset(&split.train_patients);
    let test_corpus = corpus.subset(&split.test_patients);
    let eval_seed = child_seed(seed, "eval", 0, 0);

    let mut cells = Vec::new();
    for (variant, mcfg) in &cfg.models {
        if mcfg.vocab_size != corpus.vocab_size() {
            return Err(CliError::Usage(format!(
                "model {variant}: vocab_size {} does not match corpus vocabulary {}",
                mcfg.vocab_size,
                corpus.vocab_size()
            )));
        }
        let train_samples = usable_samples(&train_corpus, mcfg.seq_len, Side::Train);
        let test_samples = usable_samples(&test_corpus, mcfg.seq_len, Side::Test);
        if train_samples.is_empty() || test_samples.is_empty() {
            return Err(CliError::Usage(
                "corpus split leaves an empty train or test side".into(),
            ));
        }
        let variant_tag = lmleak::util::fnv1a64(variant.as_bytes());
        let init_seed = child_seed(seed, "init", variant_tag, 0);
        let train_seed = child_seed(seed, "train", variant_tag, 0);

        // Non-DP baseline cell.
        let tc = TrainConfig {
            learning_rate: cfg.train.learning_rate,
            epochs: cfg.train.epochs,
            batch_size: cfg.train.batch_size,
            dp: None,
        };
        cells.push(train_cell(
            mcfg,
            variant,
            None,
            &tc,
            &train_samples,
            &test_samples,
            init_seed,
            train_seed,
            eval_seed,
            run_dir,
            run_id,
            seed,
        )?);

        // DP sweep cells share the capped sample set.
        let dp_train = cap_patient_samples(&train_samples, cfg.train.patient_cap, seed);
        for &sigma in &cfg.train.sigma_sweep {
            let tc = TrainConfig {
                learning_rate: cfg.train.dp_learning_rate,
                epochs: cfg.train.dp_epochs,
                batch_size: cfg.train.lot_size,
                dp: Some(DpConfig {
                    clip_norm: cfg.train.clip_norm,
                    noise_std: sigma,
                    delta: cfg.train.delta,
                    patient_cap: cfg.train.patient_cap,
                }),
            };
            cells.push(train_cell(
                mcfg,
                variant,
                Some(sigma),
                &tc,
                &dp_train,
                &test_samples,
                init_seed,
                train_seed,
                eval_seed,
                run_dir,
                run_id,
                seed,
            )?);
        }
    }

    let grid = GridManifest {
        run_id: run_id.to_string(),
        seed,
        corpus_dir: corpus_dir.to_path_buf(),
        patient_cap: cfg.train.patient_cap,
        cells,
    };
    write_json(&grid_path(run_dir), &grid)?;
    Ok(grid)
}

#[allow(clippy::too_many_arguments)]
fn train_cell(
    mcfg: &ModelConfig,
    variant: &str,
    sigma: Option<f64>,
    tc: &TrainConfig,
    train_samples: &[Sample],
    test_samples: &[Sample],
    init_seed: u64,
    train_seed: u64,
    eval_seed: u64,
    run_dir: &Path,
    run_id: &str,
    run_seed: u64,
) -> Result<CellManifest, CliError> {
    let cell_id = cell_id_for(variant, sigma);
    let cell_dir = run_dir.join(&cell_id);
    let mut params = init_params(mcfg, init_seed)?;
    let ctx = RunContext {
        run_dir: Some(cell_dir.clone()),
        eval_samples: Some(test_samples),
        eval_seed,
        seed_lineage: format!("run={run_id} cell={cell_id} seed={run_seed}"),
    };
    let result = match sigma {
        None => train_sgd(&mut params, train_samples, tc, train_seed, &ctx),
        Some(_) => train_dpsgd(&mut params, train_samples, tc, train_seed, &ctx),
    };
    let manifest = match result {
        Ok(log) => CellManifest {
            cell_id: cell_id.clone(),
            variant: variant.to_string(),
            objective: mcfg.objective.to_string(),
            sigma,
            seq_len: mcfg.seq_len,
            epochs_completed: log.epochs.len(),
            n_train_samples: train_samples.len(),
            diverged: log.diverged.clone(),
        },
        // A hard failure inside one cell must not abort the rest of the grid;
        // completed epochs stay usable.
        Err(e) => {
            eprintln!("warning: cell {cell_id} aborted: {e}");
            CellManifest {
                cell_id: cell_id.clone(),
                variant: variant.to_string(),
                objective: mcfg.objective.to_string(),
                sigma,
                seq_len: mcfg.seq_len,
                epochs_completed: completed_epochs_on_disk(&cell_dir),
                n_train_samples: train_samples.len(),
                diverged: Some(e.to_string()),
            }
        }
    };
    if let Some(msg) = &manifest.diverged {
        eprintln!("warning: cell {cell_id} diverged: {msg}");
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Attack stage
// ---------------------------------------------------------------------------

/// How the attack stage walks the grid.
#[derive(Debug, Clone, Copy)]
pub struct AttackOpts {
    /// Attack DP cells only at their final epoch (the benchmark setting);
    /// non-DP cells are always attacked at every epoch.
    pub dp_final_only: bool,
    /// Dump per-sample feature CSVs for the learned attacks.
    pub write_features: bool,
}

impl Default for AttackOpts {
    fn default() -> Self {
        AttackOpts {
            dp_final_only: false,
            write_features: true,
        }
    }
}

/// One attack outcome on disk, with enough metadata to build report rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
pub struct OutcomeRef {
    pub cell_id: String,
    pub variant: String,
    pub objective: String,
    pub sigma: Option<String>,
    pub epoch: usize,
    pub attack: String,
    pub unit: String,
    pub split_seed: u64,
    /// Paths relative to the run directory.
    pub outcome_path: String,
    pub units_path: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttackIndex {
    pub entries: Vec<OutcomeRef>,
}

/// Per-unit predictions persisted for the rarity analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitsFile {
    pub threshold: Option<ErrorThreshold>,
    pub units: Vec<UnitPrediction>,
}

pub fn attack_unit_name(adv: AdversarySpec) -> &'static str {
    match adv {
        AdversarySpec::ABba => "admission",
        AdversarySpec::PBba => "patient",
        _ => "sample",
    }
}

fn index_path(run_dir: &Path) -> PathBuf {
    run_dir.join("attacks").join("index.json")
}

/// Runs every requested adversary against every checkpoint of every cell and
/// every attack seed. Writes one `AttackOutcome` JSON per run, a shared
/// threshold file per (cell, epoch, seed), per-unit predictions for P-BBA,
/// and optional feature CSVs for the learned attacks. Idempotent: identical
/// inputs reproduce identical bytes.
pub fn stage_attack(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    adversaries: &[AdversarySpec],
    seeds: &[u64],
    opts: AttackOpts,
) -> Result<AttackIndex, CliError> {
    let grid: GridManifest = read_json(&grid_path(run_dir))?;
    let (corpus, split, _stats) = load_corpus_dir(&grid.corpus_dir)?;
    let train_corpus = corpus.subset(&split.train_patients);
    let test_corpus = corpus.subset(&split.test_patients);

    let mut new_entries = Vec::new();
    for cell in &grid.cells {
        if cell.epochs_completed == 0 {
            eprintln!(
                "warning: cell {} has no completed epochs; skipping attacks",
                cell.cell_id
            );
            continue;
        }
        let train_samples = usable_samples(&train_corpus, cell.seq_len, Side::Train);
        let test_samples = usable_samples(&test_corpus, cell.seq_len, Side::Test);
        // The member side is the sample set the cell actually trained on:
        // DP cells train on the per-patient capped subset.
        let member_samples = if cell.sigma.is_some() {
            cap_patient_samples(&train_samples, grid.patient_cap, grid.seed)
        } else {
            train_samples
        };
        let epochs: Vec<usize> = if opts.dp_final_only && cell.sigma.is_some() {
            vec![cell.epochs_completed]
        } else {
            (1..=cell.epochs_completed).collect()
        };
        for epoch in epochs {
            let ckpt_dir = run_dir.join(&cell.cell_id).join(format!("epoch_{epoch}"));
            let (params, _manifest) = load_checkpoint(&ckpt_dir).map_err(|e| {
                CliError::Runtime(format!("missing artifact {}: {e}", ckpt_dir.display()))
            })?;
            let attack_dir = run_dir
                .join("attacks")
                .join(&cell.cell_id)
                .join(format!("epoch_{epoch}"));
            for &split_seed in seeds {
                let mut threshold_seen: Option<ErrorThreshold> = None;
                // One model pass per sample serves every adversary at this
                // (checkpoint, seed): errors, attention, and gradients come
                // from the same objective instances.
                let whitebox = adversaries
                    .iter()
                    .any(|a| matches!(a, AdversarySpec::SAwba | AdversarySpec::SGwba));
                let member_evals = evaluate_side(
                    &params,
                    &member_samples,
                    MembershipLabel::Member,
                    split_seed,
                    whitebox,
                )?;
                let test_evals = evaluate_side(
                    &params,
                    &test_samples,
                    MembershipLabel::NonMember,
                    split_seed,
                    whitebox,
                )?;
                for &adv in adversaries {
                    let (mut outcome, detail) = run_adversary_from_evals(
                        adv,
                        &member_samples,
                        &test_samples,
                        &member_evals,
                        &test_evals,
                        split_seed,
                        &cfg.attack.hyper,
                    )?;
                    outcome.checkpoint = format!("{}/epoch_{epoch}", cell.cell_id);

                    // Threshold family contract: the sample-level μ_tr is
                    // computed once per (checkpoint, seed) and shared; any
                    // recomputation must agree bit for bit.
                    if let Some(t) = detail.threshold {
                        check_shared_threshold(
                            &attack_dir,
                            split_seed,
                            t,
                            &mut threshold_seen,
                            &cell.cell_id,
                            epoch,
                        )?;
                    }

                    let stem = format!("{}-seed{split_seed}", adv.name());
                    let outcome_path = attack_dir.join(format!("{stem}.json"));
                    write_json(&outcome_path, &outcome)?;

                    let mut units_path = None;
                    if adv == AdversarySpec::PBba {
                        let sidecar = attack_dir.join(format!("{stem}-units.json"));
                        write_json(
                            &sidecar,
                            &UnitsFile {
                                threshold: detail.threshold,
                                units: detail.units.clone(),
                            },
                        )?;
                        units_path = Some(rel_to(run_dir, &sidecar));
                    }

                    if opts.write_features {
                        let kind = match adv {
                            AdversarySpec::SAwba => Some(FeatureKind::Attention),
                            AdversarySpec::SGwba => Some(FeatureKind::Gradient),
                            _ => None,
                        };
                        if let Some(kind) = kind {
                            write_features_csv(
                                &params,
                                &member_evals,
                                &test_evals,
                                kind,
                                &attack_dir.join(format!("{stem}-features.csv")),
                            )?;
                        }
                    }

                    new_entries.push(OutcomeRef {
                        cell_id: cell.cell_id.clone(),
                        variant: cell.variant.clone(),
                        objective: cell.objective.clone(),
                        sigma: cell.sigma.map(format_sigma),
                        epoch,
                        attack: adv.name().to_string(),
                        unit: attack_unit_name(adv).to_string(),
                        split_seed,
                        outcome_path: rel_to(run_dir, &outcome_path),
                        units_path,
                    });
                }
            }
        }
    }

    // Merge with any previous index so partial attack runs accumulate.
    let idx_path = index_path(run_dir);
    let mut merged: BTreeMap<String, OutcomeRef> = if idx_path.is_file() {
        let existing: AttackIndex = read_json(&idx_path)?;
        existing
            .entries
            .into_iter()
            .map(|e| (e.outcome_path.clone(), e))
            .collect()
    } else {
        BTreeMap::new()
    };
    for e in new_entries {
        merged.insert(e.outcome_path.clone(), e);
    }
    let mut entries: Vec<OutcomeRef> = merged.into_values().collect();
    entries.sort();
    let index = AttackIndex { entries };
    write_json(&idx_path, &index)?;
    Ok(index)
}

fn rel_to(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Enforces the shared-threshold contract: within one (checkpoint, seed) the
/// sample-level μ_tr is written once and every threshold attack must agree
/// with it exactly.
fn check_shared_threshold(
    attack_dir: &Path,
    split_seed: u64,
    t: ErrorThreshold,
    seen: &mut Option<ErrorThreshold>,
    cell_id: &str,
    epoch: usize,
) -> Result<(), CliError> {
    if let Some(prev) = seen {
        if prev.mu_tr.to_bits() != t.mu_tr.to_bits() {
            return Err(CliError::Runtime(format!(
                "threshold mismatch in {cell_id}/epoch_{epoch} seed {split_seed}: {} vs {}",
                prev.mu_tr, t.mu_tr
            )));
        }
        return Ok(());
    }
    let path = attack_dir.join(format!("threshold-seed{split_seed}.json"));
    if path.is_file() {
        let on_disk: ErrorThreshold = read_json(&path)?;
        if on_disk.mu_tr.to_bits() != t.mu_tr.to_bits() {
            return Err(CliError::Runtime(format!(
                "threshold file {} disagrees with recomputed value: {} vs {}",
                path.display(),
                on_disk.mu_tr,
                t.mu_tr
            )));
        }
    } else {
        write_json(&path, &t)?;
    }
    *seen = Some(t);
    Ok(())
}

fn write_features_csv(
    params: &lmleak::model::ParameterSet,
    member_evals: &[SampleEvaluation],
    test_evals: &[SampleEvaluation],
    kind: FeatureKind,
    path: &Path,
) -> Result<(), CliError> {
    let mut rows = feature_rows(member_evals, kind)?;
    rows.extend(feature_rows(test_evals, kind)?);
    let names = match kind {
        FeatureKind::Attention => {
            lmleak::attacks::attention_feature_names(params.config.n_layers, params.config.n_heads)
        }
        FeatureKind::Gradient => lmleak::attacks::gradient_feature_names(params),
    };
    write_feature_csv(path, &names, &rows)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Report stage
// ---------------------------------------------------------------------------

/// One rarity analysis: a non-DP cell's final-epoch P-BBA predictions
/// bucketed by profile probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RarityEntry {
    pub cell_id: String,
    pub variant: String,
    pub objective: String,
    pub split_seed: u64,
    pub analysis: RarityAnalysis,
}

/// Everything the report stage produced, for callers that keep going (the
/// benchmark feeds these into its trend assertions).
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub report: LeakageReport,
    pub rarity: Vec<RarityEntry>,
}

/// Assembles report.csv / report.json / budget.json / rarity.csv /
/// rarity.json under `out_dir` from a finished run directory.
pub fn stage_report(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    out_dir: &Path,
) -> Result<ReportBundle, CliError> {
    let grid: GridManifest = read_json(&grid_path(run_dir))?;
    let index: AttackIndex = read_json(&index_path(run_dir))?;

    // Fail early, naming the missing artifact, if a referenced checkpoint
    // has been deleted since training.
    for cell in &grid.cells {
        for epoch in 1..=cell.epochs_completed {
            let dir = run_dir.join(&cell.cell_id).join(format!("epoch_{epoch}"));
            for f in ["checkpoint.json", "checkpoint.bin"] {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(CliError::Runtime(format!(
                        "missing artifact {}",
                        p.display()
                    )));
                }
            }
        }
    }

    let cell_by_id: BTreeMap<&str, &CellManifest> =
        grid.cells.iter().map(|c| (c.cell_id.as_str(), c)).collect();

    // Leakage rows, one per outcome file.
    let mut entries = index.entries.clone();
    entries.sort_by(|a, b| {
        (&a.cell_id, a.epoch, &a.attack, a.split_seed).cmp(&(
            &b.cell_id,
            b.epoch,
            &b.attack,
            b.split_seed,
        ))
    });
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let outcome: lmleak::attacks::AttackOutcome = read_json(&run_dir.join(&e.outcome_path))?;
        rows.push(LeakageRow {
            model_id: e.cell_id.clone(),
            objective: e.objective.clone(),
            sigma: e.sigma.clone().unwrap_or_else(|| "non-DP".to_string()),
            epoch: e.epoch,
            attack: e.attack.clone(),
            unit: e.unit.clone(),
            pl: outcome.pl,
            n_train_units: outcome.n_train_units,
            n_test_units: outcome.n_test_units,
            seed: outcome.seed,
        });
    }

    // Utility rows from the per-cell training logs.
    let mut utility = Vec::new();
    for cell in &grid.cells {
        if cell.epochs_completed == 0 {
            continue;
        }
        let log: TrainLog = read_json(&run_dir.join(&cell.cell_id).join("log.json"))?;
        for ep in &log.epochs {
            utility.push(UtilityRow {
                model_id: cell.cell_id.clone(),
                objective: cell.objective.clone(),
                sigma: cell
                    .sigma
                    .map(format_sigma)
                    .unwrap_or_else(|| "non-DP".to_string()),
                epoch: ep.epoch,
                train_loss: ep.train_loss,
                test_loss: ep.test_loss,
            });
        }
    }

    // Privacy budgets for the DP cells, with the group-DP extension.
    let mut budgets = Vec::new();
    for cell in &grid.cells {
        let Some(sigma) = cell.sigma else { continue };
        if cell.epochs_completed == 0 {
            continue;
        }
        let log: TrainLog = read_json(&run_dir.join(&cell.cell_id).join("log.json"))?;
        let Some(snap) = log.epochs.last().and_then(|e| e.accountant.clone()) else {
            continue;
        };
        let (group_epsilon, group_delta, group_delta_capped) = match snap.epsilon {
            Some(eps) => {
                let g = lmleak::accountant::group_dp(eps, snap.delta, cfg.report.group_k)?;
                (Some(g.epsilon), Some(g.delta), g.delta_capped)
            }
            None => (None, None, false),
        };
        budgets.push(lmleak::report::BudgetRow {
            model_id: cell.cell_id.clone(),
            sigma,
            q: snap.q,
            steps: snap.steps as usize,
            delta: snap.delta,
            epsilon: snap.epsilon,
            optimal_order: snap.optimal_order.map(|o| o as usize),
            group_k: cfg.report.group_k as usize,
            group_epsilon,
            group_delta,
            group_delta_capped,
        });
    }

    // Rarity: final-epoch P-BBA on each non-DP cell.
    let rarity = rarity_entries(cfg, &grid, run_dir, &entries, &cell_by_id)?;

    let report = LeakageReport {
        rows,
        utility,
        budgets,
    };
    write_report_bundle(&report, &rarity, out_dir)?;
    Ok(ReportBundle { report, rarity })
}

/// Writes the five report artifacts for an assembled report.
pub fn write_report_bundle(
    report: &LeakageReport,
    rarity: &[RarityEntry],
    out_dir: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    lmleak::report::emit_report(
        report,
        &out_dir.join("report.csv"),
        lmleak::report::ReportFormat::Csv,
    )?;
    lmleak::report::emit_report(
        report,
        &out_dir.join("report.json"),
        lmleak::report::ReportFormat::Json,
    )?;
    lmleak::report::emit_budget_json(&report.budgets, &out_dir.join("budget.json"))?;
    if let Some(first) = rarity.first() {
        lmleak::report::emit_rarity_csv(&first.analysis, &out_dir.join("rarity.csv"))?;
    }
    write_json(&out_dir.join("rarity.json"), &rarity)?;
    Ok(())
}

fn rarity_entries(
    cfg: &ExperimentConfig,
    grid: &GridManifest,
    run_dir: &Path,
    entries: &[OutcomeRef],
    cell_by_id: &BTreeMap<&str, &CellManifest>,
) -> Result<Vec<RarityEntry>, CliError> {
    let picks: Vec<&OutcomeRef> = entries
        .iter()
        .filter(|e| {
            e.attack == "P-BBA"
                && e.sigma.is_none()
                && cell_by_id
                    .get(e.cell_id.as_str())
                    .is_some_and(|c| c.epochs_completed == e.epoch)
        })
        .collect();
    if picks.is_empty() {
        return Ok(Vec::new());
    }

    let (corpus, _split, stats) = load_corpus_dir(&grid.corpus_dir)?;
    let buckets = bucket_by_log_probability(
        &corpus.patients,
        &stats,
        cfg.report.n_buckets,
        cfg.report.min_bucket_size,
    )?;
    let prob_by_patient: BTreeMap<&str, f64> = corpus
        .patients
        .iter()
        .map(|p| profile_probability(&p.profile, &stats).map(|pp| (p.patient_id.as_str(), pp.prob)))
        .collect::<Result<_, _>>()?;
    let mean_probs: Vec<f64> = buckets
        .iter()
        .map(|b| {
            let vals: Vec<f64> = b
                .member_patient_ids
                .iter()
                .filter_map(|id| prob_by_patient.get(id.as_str()).copied())
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let mut out = Vec::new();
    for e in picks {
        let Some(units_rel) = &e.units_path else {
            continue;
        };
        let units: UnitsFile = read_json(&run_dir.join(units_rel))?;
        let threshold = units.threshold.ok_or_else(|| {
            CliError::Runtime(format!(
                "P-BBA units file for {} lacks a threshold",
                e.outcome_path
            ))
        })?;
        let mut train_preds = Vec::new();
        let mut test_preds = Vec::new();
        for u in &units.units {
            let p = PatientPrediction {
                patient_id: u.patient_id.clone(),
                predicted: u.predicted.bit(),
            };
            match u.label {
                MembershipLabel::Member => train_preds.push(p),
                MembershipLabel::NonMember => test_preds.push(p),
            }
        }
        let analysis = bucketed_pl(
            &buckets,
            &mean_probs,
            &train_preds,
            &test_preds,
            threshold.mu_tr,
        )?;
        out.push(RarityEntry {
            cell_id: e.cell_id.clone(),
            variant: e.variant.clone(),
            objective: e.objective.clone(),
            split_seed: e.split_seed,
            analysis,
        });
    }
    Ok(out)
}
