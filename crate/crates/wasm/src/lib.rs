//! Browser bindings for the privacy-auditing toolkit.
//!
//! Every exported function takes a JSON string and returns a JSON string so
//! the page needs no generated TypeScript glue. Three operations are exposed:
//!
//! - [`epsilon_curve`]: ε(steps) for DP-SGD's subsampled Gaussian mechanism
//!   at a fixed noise multiplier, via incremental RDP composition.
//! - [`group_epsilon_curve`]: how a fixed (ε, δ) guarantee degrades for
//!   groups of k correlated records (one patient's many notes).
//! - [`train_attack_demo`]: a miniature end-to-end audit — synthesize a
//!   corpus, train a small model (plain SGD or DP-SGD), attack every epoch
//!   with the sample- and patient-level black-box adversaries, and return
//!   loss and privacy-leakage trajectories.
//!
//! The inner `*_impl` functions are plain `Result<String, String>` so native
//! unit tests exercise the exact code the browser calls.

use lmleak::accountant::{group_dp, AccountantState};
use lmleak::attacks::{run_membership_experiment, AdversarySpec, FitHyper};
use lmleak::corpus::{generate_synthetic_corpus, make_samples, split_by_patient, GenConfig, Side};
use lmleak::model::{init_params, ModelConfig, Objective};
use lmleak::trainer::{train_dpsgd, train_sgd, DpConfig, RunContext, TrainConfig};
use lmleak::util::child_seed;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

// ---------------------------------------------------------------------------
// ε(steps) curve
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpsilonCurveInput {
    /// Noise multiplier σ.
    sigma: f64,
    /// Poisson sampling rate q = B̄/N.
    q: f64,
    /// Target δ.
    delta: f64,
    /// Step counts to report, in increasing order.
    steps: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct EpsilonPoint {
    steps: u64,
    epsilon: f64,
    optimal_order: u64,
}

fn epsilon_curve_impl(input_json: &str) -> Result<String, String> {
    let input: EpsilonCurveInput =
        serde_json::from_str(input_json).map_err(|e| format!("bad input: {e}"))?;
    if input.steps.is_empty() {
        return Err("steps must be nonempty".into());
    }
    if input.steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err("steps must be strictly increasing".into());
    }
    let mut state = AccountantState::new(input.q, input.sigma).map_err(|e| e.to_string())?;
    let mut composed: u64 = 0;
    let mut out = Vec::with_capacity(input.steps.len());
    for &s in &input.steps {
        state.compose(s - composed);
        composed = s;
        let budget = state.to_epsilon(input.delta).map_err(|e| e.to_string())?;
        out.push(EpsilonPoint {
            steps: s,
            epsilon: budget.epsilon,
            optimal_order: budget.optimal_order,
        });
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// JSON `{sigma, q, delta, steps: [..]}` → JSON
/// `[{steps, epsilon, optimal_order}, ..]`.
#[wasm_bindgen]
pub fn epsilon_curve(input_json: &str) -> Result<String, JsError> {
    epsilon_curve_impl(input_json).map_err(|e| JsError::new(&e))
}

// ---------------------------------------------------------------------------
// Group-DP curve
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupCurveInput {
    sigma: f64,
    q: f64,
    delta: f64,
    steps: u64,
    /// Largest group size to report (k = 1..=k_max).
    k_max: u64,
}

#[derive(Debug, Serialize)]
struct GroupPoint {
    k: u64,
    epsilon: f64,
    delta: f64,
    delta_capped: bool,
}

#[derive(Debug, Serialize)]
struct GroupCurveOutput {
    base_epsilon: f64,
    base_delta: f64,
    points: Vec<GroupPoint>,
}

fn group_epsilon_curve_impl(input_json: &str) -> Result<String, String> {
    let input: GroupCurveInput =
        serde_json::from_str(input_json).map_err(|e| format!("bad input: {e}"))?;
    if input.k_max == 0 {
        return Err("k_max must be >= 1".into());
    }
    if input.steps == 0 {
        return Err("steps must be >= 1".into());
    }
    let mut state = AccountantState::new(input.q, input.sigma).map_err(|e| e.to_string())?;
    state.compose(input.steps);
    let base = state.to_epsilon(input.delta).map_err(|e| e.to_string())?;
    let mut points = Vec::with_capacity(input.k_max as usize);
    for k in 1..=input.k_max {
        let g = group_dp(base.epsilon, base.delta, k).map_err(|e| e.to_string())?;
        points.push(GroupPoint {
            k,
            epsilon: g.epsilon,
            delta: g.delta,
            delta_capped: g.delta_capped,
        });
    }
    let out = GroupCurveOutput {
        base_epsilon: base.epsilon,
        base_delta: base.delta,
        points,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// JSON `{sigma, q, delta, steps, k_max}` → JSON
/// `{base_epsilon, base_delta, points: [{k, epsilon, delta, delta_capped}]}`.
#[wasm_bindgen]
pub fn group_epsilon_curve(input_json: &str) -> Result<String, JsError> {
    group_epsilon_curve_impl(input_json).map_err(|e| JsError::new(&e))
}

// ---------------------------------------------------------------------------
// Train-and-attack demo
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoInput {
    seed: u64,
    /// Training epochs; capped so a misclick cannot hang the tab.
    epochs: usize,
    /// "ar" or "mlm".
    objective: String,
    /// DP-SGD noise multiplier; absent or null trains with plain SGD.
    #[serde(default)]
    sigma: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DemoEpoch {
    epoch: usize,
    train_loss: f64,
    test_loss: Option<f64>,
    pl_sample: f64,
    pl_patient: f64,
    epsilon: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DemoOutput {
    n_patients: usize,
    n_train_samples: usize,
    n_test_samples: usize,
    n_parameters: usize,
    epochs: Vec<DemoEpoch>,
}

const DEMO_MAX_EPOCHS: usize = 60;

fn demo_gen_config() -> GenConfig {
    GenConfig {
        n_patients: 24,
        code_universe_size: 12,
        zipf_exponent: 1.9,
        admissions_per_patient: [1, 2],
        notes_per_admission: [1, 2],
        note_len: [12, 12],
        vocab_size: 96,
        boilerplate_fraction: 0.15,
        umm_mode: false,
    }
}

fn demo_model_config(objective: Objective) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: 96,
        seq_len: 12,
        objective,
        mask_rate: 0.15,
    }
}

fn train_attack_demo_impl(input_json: &str) -> Result<String, String> {
    let input: DemoInput =
        serde_json::from_str(input_json).map_err(|e| format!("bad input: {e}"))?;
    if input.epochs == 0 || input.epochs > DEMO_MAX_EPOCHS {
        return Err(format!("epochs must be in 1..={DEMO_MAX_EPOCHS}"));
    }
    let objective = match input.objective.as_str() {
        "ar" => Objective::Ar,
        "mlm" => Objective::Mlm,
        other => {
            return Err(format!(
                "unknown objective {other:?} (want \"ar\" or \"mlm\")"
            ))
        }
    };
    if let Some(s) = input.sigma {
        if s.is_nan() || s < 0.0 {
            return Err("sigma must be >= 0".into());
        }
    }

    let corpus =
        generate_synthetic_corpus(&demo_gen_config(), input.seed).map_err(|e| e.to_string())?;
    let split = split_by_patient(&corpus, 0.5, child_seed(input.seed, "demo-split", 0, 0))
        .map_err(|e| e.to_string())?;
    let model_cfg = demo_model_config(objective);
    let train_samples = make_samples(
        &corpus.subset(&split.train_patients),
        model_cfg.seq_len,
        Side::Train,
    );
    let test_samples = make_samples(
        &corpus.subset(&split.test_patients),
        model_cfg.seq_len,
        Side::Test,
    );
    if train_samples.is_empty() || test_samples.is_empty() {
        return Err("demo corpus produced an empty split".into());
    }

    let mut params = init_params(&model_cfg, child_seed(input.seed, "demo-init", 0, 0))
        .map_err(|e| e.to_string())?;
    let n_parameters = params.n_params();

    let dp = input.sigma.map(|s| DpConfig {
        clip_norm: 1.0,
        noise_std: s,
        delta: 1e-5,
        patient_cap: usize::MAX,
    });
    let epoch_cfg = TrainConfig {
        learning_rate: 0.3,
        epochs: 1,
        batch_size: 8,
        dp,
    };
    let hyper = FitHyper::default();
    let mut epochs = Vec::with_capacity(input.epochs);
    for e in 1..=input.epochs {
        let ctx = RunContext {
            run_dir: None,
            eval_samples: Some(&test_samples),
            eval_seed: child_seed(input.seed, "demo-eval", e as u64, 0),
            seed_lineage: format!("demo/{}/epoch_{e}", input.seed),
        };
        let epoch_seed = child_seed(input.seed, "demo-epoch", e as u64, 0);
        let log = if epoch_cfg.dp.is_some() {
            train_dpsgd(&mut params, &train_samples, &epoch_cfg, epoch_seed, &ctx)
        } else {
            train_sgd(&mut params, &train_samples, &epoch_cfg, epoch_seed, &ctx)
        }
        .map_err(|e| e.to_string())?;
        let ep = log.epochs.last().ok_or("trainer produced no epoch log")?;

        let split_seed = child_seed(input.seed, "demo-attack", e as u64, 0);
        let (sbba, _) = run_membership_experiment(
            &params,
            AdversarySpec::SBba,
            &train_samples,
            &test_samples,
            split_seed,
            &hyper,
        )
        .map_err(|e| e.to_string())?;
        let (pbba, _) = run_membership_experiment(
            &params,
            AdversarySpec::PBba,
            &train_samples,
            &test_samples,
            split_seed,
            &hyper,
        )
        .map_err(|e| e.to_string())?;

        epochs.push(DemoEpoch {
            epoch: e,
            train_loss: ep.train_loss,
            test_loss: ep.test_loss,
            pl_sample: sbba.pl,
            pl_patient: pbba.pl,
            epsilon: None,
        });
    }

    // DP ε composes across the per-epoch trainer calls; the per-call
    // accountant only saw one epoch, so recompute the cumulative budget here.
    if input.sigma.is_some() {
        let n = train_samples.len();
        let q = (epoch_cfg.batch_size as f64 / n as f64).min(1.0);
        let steps_per_epoch = n.div_ceil(epoch_cfg.batch_size) as u64;
        let mut state =
            AccountantState::new(q, input.sigma.unwrap_or(0.0)).map_err(|e| e.to_string())?;
        for row in epochs.iter_mut() {
            state.compose(steps_per_epoch);
            let budget = state.to_epsilon(1e-5).map_err(|e| e.to_string())?;
            row.epsilon = Some(budget.epsilon);
        }
    }

    let out = DemoOutput {
        n_patients: corpus.patients.len(),
        n_train_samples: train_samples.len(),
        n_test_samples: test_samples.len(),
        n_parameters,
        epochs,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// JSON `{seed, epochs, objective, sigma?}` → JSON
/// `{n_patients, n_train_samples, n_test_samples, n_parameters,
///   epochs: [{epoch, train_loss, test_loss, pl_sample, pl_patient, epsilon}]}`.
#[wasm_bindgen]
pub fn train_attack_demo(input_json: &str) -> Result<String, JsError> {
    train_attack_demo_impl(input_json).map_err(|e| JsError::new(&e))
}
