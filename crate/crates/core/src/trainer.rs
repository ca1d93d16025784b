//! Plain SGD and DP-SGD training loops.
//!
//! DP-SGD follows the standard recipe: Poisson-sampled lots (each sample
//! independently included with rate `q = B/N`), per-sample gradient clipping
//! to global norm `C`, Gaussian noise `N(0, σ²C²I)` added to the clipped sum,
//! division by the *expected* lot size `B̄`, and one accountant step per lot
//! (including empty ones). All randomness comes from named substreams of the
//! run seed, so runs are bit-reproducible; the noise substream does not
//! depend on σ, so runs differing only in σ see common random numbers.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountantError, AccountantState, PrivacyBudget};
use crate::corpus::Sample;
use crate::model::{
    backward, make_objective, sample_error, save_checkpoint, ModelError, ParameterSet,
};
use crate::util::{child_seed, substream};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Differential-privacy knobs for [`train_dpsgd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Per-sample global-norm clipping threshold C.
    pub clip_norm: f64,
    /// Noise multiplier σ (noise std is σ·C).
    pub noise_std: f64,
    /// Target δ for (ε, δ) reporting.
    pub delta: f64,
    /// Per-patient sample cap applied by the caller before training.
    pub patient_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size for plain SGD; expected Poisson lot size B̄ for DP-SGD.
    pub batch_size: usize,
    #[serde(default)]
    pub dp: Option<DpConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Some(dp) = &self.dp {
            if dp.clip_norm.is_nan() || dp.clip_norm <= 0.0 {
                return bad("clip_norm must be > 0");
            }
            if dp.noise_std.is_nan() || dp.noise_std < 0.0 {
                return bad("noise_std must be >= 0");
            }
            if !(dp.delta > 0.0 && dp.delta < 1.0) {
                return bad("delta must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Accountant output recorded at each DP epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantSnapshot {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    /// `None` when the budget is infinite (σ = 0).
    pub epsilon: Option<f64>,
    pub optimal_order: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Relative checkpoint directory, when a run directory was given.
    pub checkpoint: Option<String>,
    /// Mean over the epoch's non-empty steps of the step-mean training loss.
    pub train_loss: f64,
    /// Mean LM loss on the held-out samples, when provided.
    pub test_loss: Option<f64>,
    pub steps: usize,
    pub accountant: Option<AccountantSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub objective: String,
    pub n_train_samples: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Set when training stopped early on a non-finite loss; the last
    /// completed epoch's checkpoint remains the usable artifact.
    pub diverged: Option<String>,
}

/// Where/how to persist a run and what to evaluate each epoch.
#[derive(Debug, Clone, Default)]
pub struct RunContext<'a> {
    /// When set, epoch checkpoints and logs are written under this directory
    /// (`epoch_<k>/checkpoint.{json,bin}`, `epoch_<k>/log.json`, `log.json`).
    pub run_dir: Option<PathBuf>,
    /// Held-out samples for per-epoch LM-loss evaluation.
    pub eval_samples: Option<&'a [Sample]>,
    /// Seed for evaluation-time MLM masking.
    pub eval_seed: u64,
    /// Provenance string stored in checkpoint manifests.
    pub seed_lineage: String,
}

/// Clips a per-sample gradient to global L2 norm `c` in place and returns the
/// pre-clip norm. Gradients already within the bound are left bitwise intact.
pub fn clip_gradient(grad: &mut ParameterSet, c: f64) -> f64 {
    let norm = grad.global_sq_norm().sqrt();
    if norm > c {
        grad.scale(c / norm);
    }
    norm
}

/// One DP-SGD parameter update from an already-clipped gradient sum:
/// `θ ← θ − lr · (Σ clipped + σ·C·z) / B̄` with `z` standard normal drawn from
/// `rng` in tensor-inventory order. Exposed so the noise convention is
/// testable in isolation.
pub fn apply_noised_update(
    params: &mut ParameterSet,
    clipped_sum: &ParameterSet,
    learning_rate: f64,
    sigma: f64,
    clip_norm: f64,
    expected_lot_size: f64,
    rng: &mut impl Rng,
) {
    let coef = -learning_rate / expected_lot_size;
    let noise_scale = sigma * clip_norm;
    for (p, g) in params.tensors.iter_mut().zip(&clipped_sum.tensors) {
        for (x, &gv) in p.data.iter_mut().zip(&g.data) {
            let noisy = if noise_scale > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                gv + noise_scale * z
            } else {
                gv
            };
            *x += coef * noisy;
        }
    }
}

fn write_epoch_artifacts(
    params: &ParameterSet,
    log: &TrainLog,
    entry: &mut EpochLog,
    ctx: &RunContext,
) -> Result<(), TrainError> {
    if let Some(dir) = &ctx.run_dir {
        let epoch_dir = dir.join(format!("epoch_{}", entry.epoch));
        save_checkpoint(params, &epoch_dir, &ctx.seed_lineage)?;
        entry.checkpoint = Some(format!("epoch_{}", entry.epoch));
        std::fs::write(
            epoch_dir.join("log.json"),
            serde_json::to_string_pretty(entry)?,
        )?;
        // cumulative log so far, including this entry
        let mut full = log.clone();
        full.epochs.push(entry.clone());
        std::fs::write(dir.join("log.json"), serde_json::to_string_pretty(&full)?)?;
    }
    Ok(())
}

fn finish_log(log: &mut TrainLog, ctx: &RunContext) -> Result<(), TrainError> {
    if let Some(dir) = &ctx.run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("log.json"), serde_json::to_string_pretty(log)?)?;
    }
    Ok(())
}

/// Per-sample losses+gradients for a set of dataset indices, in index order.
fn batch_gradients(
    params: &ParameterSet,
    samples: &[Sample],
    indices: &[usize],
    seed: u64,
    global_step: u64,
) -> Result<Vec<(f64, ParameterSet)>, ModelError> {
    let work = |&(i, idx): &(usize, usize)| -> Result<(f64, ParameterSet), ModelError> {
        let _ = i;
        let mask_seed = child_seed(seed, "mask", global_step, idx as u64);
        let inst = make_objective(&samples[idx], &params.config, mask_seed)?;
        backward(params, &inst)
    };
    let enumerated: Vec<(usize, usize)> = indices.iter().copied().enumerate().collect();
    #[cfg(feature = "parallel")]
    {
        enumerated.par_iter().map(work).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        enumerated.iter().map(work).collect()
    }
}

/// Mean LM loss over `samples`; MLM mask draws are per-sample substreams of
/// `objective_seed`.
pub fn evaluate_lm_loss(
    params: &ParameterSet,
    samples: &[Sample],
    objective_seed: u64,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let work = |(i, s): (usize, &Sample)| -> Result<f64, ModelError> {
        sample_error(
            params,
            s,
            child_seed(objective_seed, "eval-mask", i as u64, 0),
        )
    };
    #[cfg(feature = "parallel")]
    let losses: Result<Vec<f64>, ModelError> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| work((i, s)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let losses: Result<Vec<f64>, ModelError> = samples.iter().enumerate().map(work).collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn eval_if_requested(params: &ParameterSet, ctx: &RunContext) -> Result<Option<f64>, TrainError> {
    match ctx.eval_samples {
        Some(samples) if !samples.is_empty() => {
            Ok(Some(evaluate_lm_loss(params, samples, ctx.eval_seed)?))
        }
        _ => Ok(None),
    }
}

/// Shuffled minibatch SGD: `θ ← θ − lr · ḡ` with ḡ the batch-mean gradient.
/// Checkpoints after every epoch when a run directory is provided. On a
/// non-finite loss, stops and returns the log with `diverged` set; the last
/// completed epoch's checkpoint is the usable artifact.
pub fn train_sgd(
    params: &mut ParameterSet,
    train_samples: &[Sample],
    config: &TrainConfig,
    seed: u64,
    ctx: &RunContext,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let n = train_samples.len();
    let mut log = TrainLog {
        objective: params.config.objective.to_string(),
        n_train_samples: n,
        seed,
        epochs: Vec::new(),
        diverged: None,
    };
    let mut global_step: u64 = 0;
    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = substream(seed, "shuffle", epoch as u64, 0);
            order.shuffle(&mut rng);
        }
        let mut step_losses: Vec<f64> = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let per_sample = match batch_gradients(params, train_samples, batch, seed, global_step)
            {
                Ok(v) => v,
                Err(ModelError::NonFinite(what)) => {
                    log.diverged = Some(format!(
                        "non-finite {what} at epoch {epoch}, step {global_step}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let bl = batch.len() as f64;
            let mut mean_grad = ParameterSet::zeros(&params.config);
            let mut loss_sum = 0.0;
            for (loss, g) in &per_sample {
                loss_sum += loss;
                mean_grad.add_scaled(g, 1.0 / bl);
            }
            let batch_loss = loss_sum / bl;
            if !batch_loss.is_finite() {
                log.diverged = Some(format!(
                    "non-finite loss at epoch {epoch}, step {global_step}"
                ));
                break 'epochs;
            }
            params.add_scaled(&mean_grad, -config.learning_rate);
            step_losses.push(batch_loss);
            global_step += 1;
        }
        if !params.all_finite() {
            log.diverged = Some(format!("non-finite parameters after epoch {epoch}"));
            break 'epochs;
        }
        let mut entry = EpochLog {
            epoch,
            checkpoint: None,
            train_loss: step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64,
            test_loss: eval_if_requested(params, ctx)?,
            steps: step_losses.len(),
            accountant: None,
        };
        write_epoch_artifacts(params, &log, &mut entry, ctx)?;
        log.epochs.push(entry);
    }
    finish_log(&mut log, ctx)?;
    Ok(log)
}

/// DP-SGD: Poisson lots at rate `q = B̄/N`, per-sample clipping to `C`,
/// Gaussian noise `σ·C` on the summed clipped gradients, division by the
/// expected lot size, and one accountant step per lot. Empty lots advance the
/// accountant but draw no noise and make no update.
pub fn train_dpsgd(
    params: &mut ParameterSet,
    train_samples: &[Sample],
    config: &TrainConfig,
    seed: u64,
    ctx: &RunContext,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    let dp = config
        .dp
        .ok_or_else(|| TrainError::InvalidConfig("dp section required".to_string()))?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let n = train_samples.len();
    let expected_lot = config.batch_size as f64;
    let q = (expected_lot / n as f64).min(1.0);
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut accountant = AccountantState::new(q, dp.noise_std)?;

    let mut log = TrainLog {
        objective: params.config.objective.to_string(),
        n_train_samples: n,
        seed,
        epochs: Vec::new(),
        diverged: None,
    };
    let mut global_step: u64 = 0;
    'epochs: for epoch in 1..=config.epochs {
        let mut step_losses: Vec<f64> = Vec::new();
        for _ in 0..steps_per_epoch {
            // Poisson lot: independent inclusion at rate q.
            let lot: Vec<usize> = {
                let mut rng = substream(seed, "lot", global_step, 0);
                (0..n).filter(|_| rng.gen::<f64>() < q).collect()
            };
            accountant.compose(1);
            if lot.is_empty() {
                global_step += 1;
                continue;
            }
            let per_sample = match batch_gradients(params, train_samples, &lot, seed, global_step) {
                Ok(v) => v,
                Err(ModelError::NonFinite(what)) => {
                    log.diverged = Some(format!(
                        "non-finite {what} at epoch {epoch}, step {global_step}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let mut clipped_sum = ParameterSet::zeros(&params.config);
            let mut loss_sum = 0.0;
            for (loss, g) in per_sample {
                loss_sum += loss;
                let mut g = g;
                clip_gradient(&mut g, dp.clip_norm);
                clipped_sum.add_scaled(&g, 1.0);
            }
            let lot_loss = loss_sum / lot.len() as f64;
            if !lot_loss.is_finite() {
                log.diverged = Some(format!(
                    "non-finite loss at epoch {epoch}, step {global_step}"
                ));
                break 'epochs;
            }
            let mut noise_rng = substream(seed, "noise", global_step, 0);
            apply_noised_update(
                params,
                &clipped_sum,
                config.learning_rate,
                dp.noise_std,
                dp.clip_norm,
                expected_lot,
                &mut noise_rng,
            );
            step_losses.push(lot_loss);
            global_step += 1;
        }
        if !params.all_finite() {
            log.diverged = Some(format!("non-finite parameters after epoch {epoch}"));
            break 'epochs;
        }
        let budget: Option<PrivacyBudget> = accountant.to_epsilon(dp.delta).ok();
        let snapshot = AccountantSnapshot {
            q,
            sigma: dp.noise_std,
            steps: accountant.steps,
            delta: dp.delta,
            epsilon: budget.as_ref().map(|b| b.epsilon),
            optimal_order: budget.as_ref().map(|b| b.optimal_order),
        };
        let mut entry = EpochLog {
            epoch,
            checkpoint: None,
            train_loss: step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64,
            test_loss: eval_if_requested(params, ctx)?,
            steps: steps_per_epoch,
            accountant: Some(snapshot),
        };
        write_epoch_artifacts(params, &log, &mut entry, ctx)?;
        log.epochs.push(entry);
    }
    finish_log(&mut log, ctx)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Side, PAD};
    use crate::model::{forward, init_params, ModelConfig, Objective};
    use crate::util::variance;

    fn toy_config(objective: Objective) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: 32,
            seq_len: 8,
            objective,
            mask_rate: 0.3,
        }
    }

    fn toy_samples(count: usize, cfg: &ModelConfig) -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let len = 3 + (i % 5);
                let mut tokens: Vec<u32> = (0..len)
                    .map(|j| 3 + ((i * 7 + j * 13) % (cfg.vocab_size - 3)) as u32)
                    .collect();
                tokens.resize(cfg.seq_len, PAD);
                Sample {
                    sample_id: format!("s{i}"),
                    patient_id: format!("p{}", i / 4),
                    admission_id: format!("a{}", i / 2),
                    note_id: format!("n{i}"),
                    tokens,
                    side: Side::Train,
                }
            })
            .collect()
    }

    fn plain_cfg(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: batch,
            dp: None,
        }
    }

    #[test]
    fn clip_rule_exact_norms() {
        let cfg = toy_config(Objective::Ar);
        let mut g = ParameterSet::zeros(&cfg);
        // construct a gradient with known norm 5
        g.tensors[0].data[0] = 3.0;
        g.tensors[1].data[0] = 4.0;
        let pre = clip_gradient(&mut g, 1.0);
        assert_eq!(pre, 5.0);
        let post = g.global_sq_norm().sqrt();
        assert!((post - 1.0).abs() < 1e-12, "clipped norm {post}");

        // under the threshold: bitwise unchanged
        let mut g = ParameterSet::zeros(&cfg);
        g.tensors[0].data[0] = 0.3;
        g.tensors[2].data[1] = -0.000123;
        let before = g.clone();
        let pre = clip_gradient(&mut g, 1.0);
        assert!((pre - before.global_sq_norm().sqrt()).abs() < 1e-15);
        assert_eq!(g, before);
    }

    #[test]
    fn lr_zero_is_identity() {
        // learning_rate must be > 0 per config; emulate lr → 0 via the
        // validated path by checking a 0-scaled manual update, and assert the
        // config validator rejects lr = 0.
        assert!(plain_cfg(0.0, 1, 4).validate().is_err());
        let cfg = toy_config(Objective::Ar);
        let mut params = init_params(&cfg, 1).unwrap();
        let before = params.clone();
        let zero = ParameterSet::zeros(&cfg);
        params.add_scaled(&zero, -0.5);
        assert_eq!(params, before);
    }

    #[test]
    fn single_sample_single_step_matches_update_rule() {
        let cfg = toy_config(Objective::Ar);
        let mcfg = plain_cfg(0.1, 1, 1);
        let samples = toy_samples(1, &cfg);
        let mut params = init_params(&cfg, 3).unwrap();
        let initial = params.clone();
        let log = train_sgd(&mut params, &samples, &mcfg, 9, &RunContext::default()).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.epochs[0].steps, 1);

        // replicate: θ_new = θ_old − lr·g with the same mask substream
        let mask_seed = child_seed(9, "mask", 0, 0);
        let inst = make_objective(&samples[0], &cfg, mask_seed).unwrap();
        let (loss, g) = backward(&initial, &inst).unwrap();
        let mut expect = initial.clone();
        expect.add_scaled(&g, -0.1);
        assert_eq!(params, expect);
        assert_eq!(log.epochs[0].train_loss, loss);
    }

    #[test]
    fn two_epochs_reduce_train_loss() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(40, &cfg);
        let mut params = init_params(&cfg, 5).unwrap();
        let log = train_sgd(
            &mut params,
            &samples,
            &plain_cfg(0.05, 2, 8),
            11,
            &RunContext::default(),
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(
            log.epochs[1].train_loss <= log.epochs[0].train_loss,
            "epoch losses: {} then {}",
            log.epochs[0].train_loss,
            log.epochs[1].train_loss
        );
        assert!(log.diverged.is_none());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let cfg = toy_config(Objective::Mlm);
        let samples = toy_samples(20, &cfg);
        let run = |seed: u64| {
            let mut p = init_params(&cfg, 2).unwrap();
            let log = train_sgd(
                &mut p,
                &samples,
                &plain_cfg(0.05, 2, 4),
                seed,
                &RunContext::default(),
            )
            .unwrap();
            (p, log)
        };
        let (p1, l1) = run(7);
        let (p2, l2) = run(7);
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        let (p3, _) = run(8);
        assert_ne!(p1, p3);
    }

    #[test]
    fn dp_sigma_zero_full_inclusion_matches_plain_sgd() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(12, &cfg);
        let n = samples.len();

        let mut plain = init_params(&cfg, 4).unwrap();
        let plain_log = train_sgd(
            &mut plain,
            &samples,
            &plain_cfg(0.05, 3, n),
            21,
            &RunContext::default(),
        )
        .unwrap();

        let mut dp = init_params(&cfg, 4).unwrap();
        let dp_cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: n, // q = 1
            dp: Some(DpConfig {
                clip_norm: 1e9, // never binds
                noise_std: 0.0,
                delta: 1e-6,
                patient_cap: usize::MAX,
            }),
        };
        let dp_log = train_dpsgd(&mut dp, &samples, &dp_cfg, 21, &RunContext::default()).unwrap();

        for (a, b) in plain_log.epochs.iter().zip(&dp_log.epochs) {
            assert!(
                (a.train_loss - b.train_loss).abs() < 1e-10,
                "loss mismatch {} vs {}",
                a.train_loss,
                b.train_loss
            );
        }
        for (ta, tb) in plain.tensors.iter().zip(&dp.tensors) {
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert!((x - y).abs() < 1e-10, "{}: {x} vs {y}", ta.name);
            }
        }
    }

    #[test]
    fn noise_convention_monte_carlo() {
        // With zero gradients, each coordinate's update is lr·σ·C·z/B̄; the
        // pooled std over 10⁴ steps must sit within 2% of lr·σ·C/B̄.
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            model_dim: 4,
            ff_dim: 4,
            vocab_size: 8,
            seq_len: 4,
            objective: Objective::Ar,
            mask_rate: 0.15,
        };
        let (lr, sigma, c, lot) = (0.5, 1.3, 0.7, 8.0);
        let zero = ParameterSet::zeros(&cfg);
        let mut params = ParameterSet::zeros(&cfg);
        let mut deltas: Vec<f64> = Vec::new();
        for step in 0..10_000u64 {
            let before = params.clone();
            let mut rng = substream(99, "noise", step, 0);
            apply_noised_update(&mut params, &zero, lr, sigma, c, lot, &mut rng);
            for (ta, tb) in params.tensors.iter().zip(&before.tensors) {
                for (x, y) in ta.data.iter().zip(&tb.data) {
                    deltas.push(x - y);
                }
            }
            params = before; // keep the base point fixed
        }
        let expect = lr * sigma * c / lot;
        let std = variance(&deltas).sqrt();
        assert!(
            (std - expect).abs() / expect < 0.02,
            "std {std} vs expected {expect}"
        );
    }

    #[test]
    fn empty_lots_advance_accountant_without_updates() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(6, &cfg);
        let mut params = init_params(&cfg, 1).unwrap();
        let initial = params.clone();
        // q tiny → virtually every lot is empty; all steps still accounted.
        let tcfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 1, // q = 1/6, sometimes empty
            dp: Some(DpConfig {
                clip_norm: 1.0,
                noise_std: 1.0,
                delta: 1e-6,
                patient_cap: usize::MAX,
            }),
        };
        let log = train_dpsgd(&mut params, &samples, &tcfg, 31, &RunContext::default()).unwrap();
        let snap = log.epochs[0].accountant.as_ref().unwrap();
        assert_eq!(snap.steps, 6, "all lots accounted, empty or not");
        assert!(log.epochs[0].steps >= 1);
        // with noise and a nonzero q the params should have moved unless every
        // single lot was empty (astronomically unlikely at seed 31)
        assert_ne!(params, initial);
    }

    #[test]
    fn dp_run_is_deterministic_and_sigma_shares_randomness() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(16, &cfg);
        let run = |sigma: f64| {
            let mut p = init_params(&cfg, 2).unwrap();
            let tcfg = TrainConfig {
                learning_rate: 0.05,
                epochs: 1,
                batch_size: 4,
                dp: Some(DpConfig {
                    clip_norm: 1.0,
                    noise_std: sigma,
                    delta: 1e-6,
                    patient_cap: usize::MAX,
                }),
            };
            let log = train_dpsgd(&mut p, &samples, &tcfg, 77, &RunContext::default()).unwrap();
            (p, log)
        };
        let (p1, l1) = run(0.5);
        let (p2, l2) = run(0.5);
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        // same seed, different σ: the first lot (pre-update) is identical, so
        // the first step's loss matches — common random numbers across cells.
        let (_, l3) = run(2.0);
        assert_eq!(
            l1.epochs[0].steps, l3.epochs[0].steps,
            "lot structure shared across σ"
        );
    }

    #[test]
    fn evaluate_matches_sample_error_for_singleton() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(1, &cfg);
        let params = init_params(&cfg, 6).unwrap();
        let direct = sample_error(&params, &samples[0], child_seed(55, "eval-mask", 0, 0)).unwrap();
        let via = evaluate_lm_loss(&params, &samples, 55).unwrap();
        assert_eq!(via, direct);
    }

    #[test]
    fn untrained_loss_near_uniform_baseline() {
        let cfg = toy_config(Objective::Ar);
        let samples = toy_samples(30, &cfg);
        let params = init_params(&cfg, 3).unwrap();
        let loss = evaluate_lm_loss(&params, &samples, 1).unwrap();
        let ln_v = (cfg.vocab_size as f64).ln();
        assert!(
            (loss - ln_v).abs() < 0.5,
            "untrained loss {loss} vs ln V {ln_v}"
        );
    }

    #[test]
    fn run_dir_layout_and_log_roundtrip() {
        let cfg = toy_config(Objective::Mlm);
        let samples = toy_samples(10, &cfg);
        let eval = toy_samples(4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext {
            run_dir: Some(dir.path().join("runs/r1")),
            eval_samples: Some(&eval),
            eval_seed: 500,
            seed_lineage: "seed=13".to_string(),
        };
        let mut params = init_params(&cfg, 8).unwrap();
        let log = train_sgd(&mut params, &samples, &plain_cfg(0.05, 4, 2), 13, &ctx).unwrap();
        assert_eq!(log.epochs.len(), 4);
        for e in &log.epochs {
            assert!(e.test_loss.is_some());
            let ck = dir
                .path()
                .join("runs/r1")
                .join(e.checkpoint.as_ref().unwrap());
            assert!(ck.join("checkpoint.json").is_file());
            assert!(ck.join("checkpoint.bin").is_file());
            assert!(ck.join("log.json").is_file());
        }
        let full: TrainLog = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("runs/r1/log.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(full, log);

        // checkpoints reload and evaluate
        let (restored, _) =
            crate::model::load_checkpoint(&dir.path().join("runs/r1/epoch_4")).unwrap();
        let inst = make_objective(&samples[0], &cfg, 1).unwrap();
        assert!(forward(&restored, &inst).unwrap().mean_loss.is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(plain_cfg(-0.1, 1, 1).validate().is_err());
        assert!(plain_cfg(0.1, 0, 1).validate().is_err());
        assert!(plain_cfg(0.1, 1, 0).validate().is_err());
        let mut bad_sigma = plain_cfg(0.1, 1, 1);
        bad_sigma.dp = Some(DpConfig {
            clip_norm: 1.0,
            noise_std: -0.5,
            delta: 1e-6,
            patient_cap: 1,
        });
        assert!(bad_sigma.validate().is_err());
        let cfg = toy_config(Objective::Ar);
        let mut p = init_params(&cfg, 1).unwrap();
        // dp section required for train_dpsgd
        assert!(matches!(
            train_dpsgd(
                &mut p,
                &toy_samples(3, &cfg),
                &plain_cfg(0.1, 1, 1),
                0,
                &RunContext::default()
            ),
            Err(TrainError::InvalidConfig(_))
        ));
        assert!(matches!(
            train_sgd(
                &mut p,
                &[],
                &plain_cfg(0.1, 1, 1),
                0,
                &RunContext::default()
            ),
            Err(TrainError::EmptyTrainSet)
        ));
    }
}
