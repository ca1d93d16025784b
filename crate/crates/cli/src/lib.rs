//! Experiment orchestration for the leakage-audit toolkit: corpus
//! generation, grid training, attack execution, privacy accounting,
//! reporting, and the one-command seeded benchmark.
//!
//! The binary (`lmleak`) is a thin wrapper over this library; integration
//! tests and the benchmark drive the same entry points.

use std::fmt;
use std::path::Path;

use lmleak::accountant::{group_dp, AccountantError, AccountantState};
use serde::{Deserialize, Serialize};

pub mod bench;
pub mod config;
pub mod stages;

pub use bench::{run_bench, BenchSummary, TrendResult};
pub use config::{parse_attack_names, ExperimentConfig};
pub use stages::{
    load_corpus_dir, stage_attack, stage_gen_corpus, stage_report, stage_train, AttackIndex,
    AttackOpts, CorpusSummary, GridManifest, ReportBundle,
};

/// Errors carrying the process exit-code contract:
/// 1 usage/config, 2 assertion failure, 3 runtime failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Assertion(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Assertion(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Assertion(m) => write!(f, "assertion failure: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! runtime_from {
    ($($ty:ty),+ $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })+
    };
}

runtime_from!(
    lmleak::corpus::CorpusError,
    lmleak::model::ModelError,
    lmleak::trainer::TrainError,
    lmleak::attacks::AttackError,
    lmleak::report::ReportError,
    AccountantError,
    std::io::Error,
    serde_json::Error,
);

// ---------------------------------------------------------------------------
// Accounting calculator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupOutput {
    pub k: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub delta_capped: bool,
}

/// JSON emitted by the `account` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountOutput {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    /// `None` when the budget is infinite at every tracked order (σ = 0).
    pub epsilon: Option<f64>,
    pub optimal_order: Option<u64>,
    /// Accumulated RDP per tracked order, `[order, rdp]` pairs; infinite
    /// entries are omitted.
    pub per_order_rdp: Vec<(u64, f64)>,
    pub group: Option<GroupOutput>,
}

/// Composes the subsampled Gaussian mechanism `steps` times and converts to
/// an (ε, δ) budget, optionally extended to groups of size `k`.
pub fn compute_account(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    group_k: Option<u64>,
) -> Result<AccountOutput, CliError> {
    let mut state = AccountantState::new(q, sigma).map_err(|e| CliError::Usage(e.to_string()))?;
    state.compose(steps);
    let budget = match state.to_epsilon(delta) {
        Ok(b) => Some(b),
        Err(AccountantError::InfiniteEpsilon) => None,
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let group = match (group_k, &budget) {
        (Some(k), Some(b)) => {
            let g = group_dp(b.epsilon, b.delta, k).map_err(|e| CliError::Usage(e.to_string()))?;
            Some(GroupOutput {
                k,
                epsilon: g.epsilon,
                delta: g.delta,
                delta_capped: g.delta_capped,
            })
        }
        _ => None,
    };
    Ok(AccountOutput {
        q,
        sigma,
        steps,
        delta,
        epsilon: budget.as_ref().map(|b| b.epsilon),
        optimal_order: budget.as_ref().map(|b| b.optimal_order),
        per_order_rdp: state
            .orders
            .iter()
            .zip(&state.rdp)
            .filter(|(_, r)| r.is_finite())
            .map(|(&o, &r)| (o, r))
            .collect(),
        group,
    })
}

/// Renders the gen-corpus summary table.
pub fn format_corpus_summary(s: &CorpusSummary) -> String {
    format!(
        "patients        {}\nadmissions      {}\nnotes           {}\ntokens          {}\nvocabulary      {}\ndisease codes   {}\ntrain patients  {}\ntest patients   {}",
        s.n_patients,
        s.n_admissions,
        s.n_notes,
        s.n_tokens,
        s.vocab_size,
        s.n_codes,
        s.n_train_patients,
        s.n_test_patients
    )
}

/// Parses a comma-separated list (CLI override flags).
pub fn parse_comma_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| CliError::Usage(format!("invalid {what} {s:?}: {e}")))
        })
        .collect()
}

/// Standard run-directory path for a run id under the output root.
pub fn run_dir(out: &Path, run_id: &str) -> std::path::PathBuf {
    out.join("runs").join(run_id)
}
