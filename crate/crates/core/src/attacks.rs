//! Membership-inference attacks against a trained checkpoint.
//!
//! Five adversaries are implemented:
//! - **S-BBA**: sample-level black box — predict member iff the sample's LM
//!   error is strictly below the training-error mean μ_tr.
//! - **A-BBA / P-BBA**: admission-/patient-level black box — the same rule
//!   applied to the group-mean error, with the *sample-level* μ_tr.
//! - **S-AWBA**: white box on attention — per-(layer, head) aggregates of the
//!   per-token attention concentration C(a) = Σ aᵢ ln aᵢ feed a learned
//!   logistic-regression attack model.
//! - **S-GWBA**: white box on gradients — per-tensor squared L2 norms of the
//!   per-sample gradient feed the same learned model.
//!
//! Learned attacks train on a patient-disjoint 20% split of each side and are
//! evaluated on the remaining 80%. Privacy leakage is always
//! `PL = Pr[A=0 | b=0] − Pr[A=0 | b=1]` with b = 0 meaning member.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::model::{backward, forward, make_objective, ForwardTrace, ModelError, ParameterSet};
use crate::report::compute_pl;
use crate::util::{child_seed, mean, percentile_of, substream};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("attention vector violates the simplex precondition: {0}")]
    NotSimplex(String),
    #[error("attack model needs both classes present")]
    SingleClass,
    #[error("learned attacks need at least 5 samples per side, got {0}")]
    SideTooSmall(usize),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ground-truth membership bit: 0 = member (train), 1 = non-member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MembershipLabel {
    Member,
    NonMember,
}

impl MembershipLabel {
    pub fn bit(self) -> u8 {
        match self {
            MembershipLabel::Member => 0,
            MembershipLabel::NonMember => 1,
        }
    }

    pub fn from_bit(b: u8) -> Self {
        if b == 0 {
            MembershipLabel::Member
        } else {
            MembershipLabel::NonMember
        }
    }
}

/// The S-BBA decision threshold: the mean of per-sample training errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorThreshold {
    pub mu_tr: f64,
}

/// Arithmetic mean of the training errors.
pub fn compute_threshold(train_errors: &[f64]) -> Result<ErrorThreshold, AttackError> {
    if train_errors.is_empty() {
        return Err(AttackError::Empty("train_errors"));
    }
    Ok(ErrorThreshold {
        mu_tr: mean(train_errors),
    })
}

/// Member iff `e < μ_tr`, strictly; a tie predicts non-member.
pub fn sbba_predict(e: f64, threshold: &ErrorThreshold) -> MembershipLabel {
    if e < threshold.mu_tr {
        MembershipLabel::Member
    } else {
        MembershipLabel::NonMember
    }
}

/// One scored sample: identity, LM error, and the hidden membership bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub admission_id: String,
    pub error: f64,
    pub label: MembershipLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Admission,
    Patient,
}

/// One attack unit's decision (a sample, admission, or patient).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPrediction {
    pub unit_id: String,
    pub patient_id: String,
    pub label: MembershipLabel,
    pub predicted: MembershipLabel,
}

/// Serializable summary of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub checkpoint: String,
    pub pl: f64,
    pub p_member_given_train: f64,
    pub p_member_given_test: f64,
    pub n_train_units: usize,
    pub n_test_units: usize,
    pub seed: u64,
}

fn summarize(attack: &str, units: &[UnitPrediction]) -> Result<AttackOutcome, AttackError> {
    let train: Vec<u8> = units
        .iter()
        .filter(|u| u.label == MembershipLabel::Member)
        .map(|u| u.predicted.bit())
        .collect();
    let test: Vec<u8> = units
        .iter()
        .filter(|u| u.label == MembershipLabel::NonMember)
        .map(|u| u.predicted.bit())
        .collect();
    if train.is_empty() {
        return Err(AttackError::Empty("train-side units"));
    }
    if test.is_empty() {
        return Err(AttackError::Empty("test-side units"));
    }
    let frac0 = |v: &[u8]| v.iter().filter(|&&p| p == 0).count() as f64 / v.len() as f64;
    Ok(AttackOutcome {
        attack: attack.to_string(),
        checkpoint: String::new(),
        pl: compute_pl(&train, &test).expect("non-empty sides"),
        p_member_given_train: frac0(&train),
        p_member_given_test: frac0(&test),
        n_train_units: train.len(),
        n_test_units: test.len(),
        seed: 0,
    })
}

/// S-BBA over scored samples: each sample is one unit.
pub fn sample_attack(
    records: &[SampleRecord],
    threshold: &ErrorThreshold,
) -> Result<(AttackOutcome, Vec<UnitPrediction>), AttackError> {
    let units: Vec<UnitPrediction> = records
        .iter()
        .map(|r| UnitPrediction {
            unit_id: r.sample_id.clone(),
            patient_id: r.patient_id.clone(),
            label: r.label,
            predicted: sbba_predict(r.error, threshold),
        })
        .collect();
    let outcome = summarize("S-BBA", &units)?;
    Ok((outcome, units))
}

/// A-BBA / P-BBA: group samples by the key, mean the group's errors, and
/// apply the *same* sample-level threshold; each group is one unit.
pub fn group_attack(
    records: &[SampleRecord],
    key: GroupKey,
    threshold: &ErrorThreshold,
) -> Result<(AttackOutcome, Vec<UnitPrediction>), AttackError> {
    if records.is_empty() {
        return Err(AttackError::Empty("records"));
    }
    // first-appearance group ordering for determinism
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, (String, MembershipLabel, Vec<f64>)> =
        std::collections::HashMap::new();
    for r in records {
        let gid = match key {
            GroupKey::Admission => r.admission_id.clone(),
            GroupKey::Patient => r.patient_id.clone(),
        };
        let entry = groups.entry(gid.clone()).or_insert_with(|| {
            order.push(gid.clone());
            (r.patient_id.clone(), r.label, Vec::new())
        });
        debug_assert_eq!(
            entry.1, r.label,
            "a group must not straddle the train/test split"
        );
        entry.2.push(r.error);
    }
    let units: Vec<UnitPrediction> = order
        .iter()
        .map(|gid| {
            let (patient_id, label, errs) = &groups[gid];
            assert!(!errs.is_empty(), "group {gid} has zero samples");
            UnitPrediction {
                unit_id: gid.clone(),
                patient_id: patient_id.clone(),
                label: *label,
                predicted: sbba_predict(mean(errs), threshold),
            }
        })
        .collect();
    let name = match key {
        GroupKey::Admission => "A-BBA",
        GroupKey::Patient => "P-BBA",
    };
    let outcome = summarize(name, &units)?;
    Ok((outcome, units))
}

/// Attention concentration `C(a) = Σ aᵢ ln aᵢ` with `0·ln 0 = 0`;
/// range [−ln n, 0].
pub fn attention_concentration(a: &[f64]) -> Result<f64, AttackError> {
    if a.is_empty() {
        return Err(AttackError::Empty("attention vector"));
    }
    let mut sum = 0.0;
    for &x in a {
        if x < 0.0 {
            return Err(AttackError::NotSimplex(format!("negative entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-4 {
        return Err(AttackError::NotSimplex(format!("entries sum to {sum}")));
    }
    Ok(a.iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum())
}

/// Feature names for the attention representation, in extraction order.
pub fn attention_feature_names(n_layers: usize, n_heads: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n_layers * n_heads * 4);
    for l in 0..n_layers {
        for h in 0..n_heads {
            for stat in ["mean", "median", "p5", "p95"] {
                names.push(format!("att_L{l}_H{h}_{stat}"));
            }
        }
    }
    names
}

/// Per-(layer, head) aggregates — mean, median, 5th and 95th percentile
/// (linear interpolation) — of per-token concentration over the attention
/// rows of non-pad query positions. Output length `L·H·4`, ordered by
/// (layer, head) then the four statistics.
pub fn extract_attention_features(
    trace: &ForwardTrace,
    n_layers: usize,
    n_heads: usize,
) -> Result<Vec<f64>, AttackError> {
    if trace.real_len < 2 {
        return Err(AttackError::Empty("need >= 2 non-pad positions"));
    }
    assert_eq!(trace.attention.len(), n_layers * n_heads);
    let mut features = Vec::with_capacity(n_layers * n_heads * 4);
    for att in &trace.attention {
        let n = (att.len() as f64).sqrt().round() as usize;
        debug_assert_eq!(n * n, att.len());
        let conc: Vec<f64> = (0..trace.real_len)
            .map(|i| attention_concentration(&att[i * n..(i + 1) * n]))
            .collect::<Result<_, _>>()?;
        features.push(mean(&conc));
        features.push(percentile_of(&conc, 50.0));
        features.push(percentile_of(&conc, 5.0));
        features.push(percentile_of(&conc, 95.0));
    }
    Ok(features)
}

/// Feature names for the gradient representation: `grad_` + tensor name, in
/// the parameter inventory order.
pub fn gradient_feature_names(params: &ParameterSet) -> Vec<String> {
    params
        .tensors
        .iter()
        .map(|t| format!("grad_{}", t.name))
        .collect()
}

/// Per-tensor squared L2 norm of the per-sample gradient, ordered by the
/// parameter inventory.
pub fn extract_gradient_features(grads: &ParameterSet) -> Vec<f64> {
    grads
        .tensors
        .iter()
        .map(|t| t.data.iter().map(|x| x * x).sum())
        .collect()
}

/// Hyperparameters for the logistic-regression attack model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitHyper {
    pub l2: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for FitHyper {
    fn default() -> Self {
        FitHyper {
            l2: 1e-4,
            iterations: 1000,
            step: 0.1,
        }
    }
}

/// Binary logistic regression over z-scored features, trained by full-batch
/// gradient descent. Standardization statistics come only from the fitting
/// split; zero-variance features are dropped and recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// Indices (into the raw feature vector) of retained features.
    pub kept: Vec<usize>,
    /// Indices of dropped zero-variance features.
    pub dropped: Vec<usize>,
    pub dim: usize,
}

impl AttackModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .enumerate()
            .map(|(j, &raw)| (x[raw] - self.feature_means[j]) / self.feature_stds[j])
            .collect()
    }

    /// P(non-member | x).
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, AttackError> {
        if x.len() != self.dim {
            return Err(AttackError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let z = self.standardize(x);
        let logit = self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    /// Non-member iff P(non-member | x) ≥ 0.5 (tie goes to non-member).
    pub fn predict(&self, x: &[f64]) -> Result<MembershipLabel, AttackError> {
        Ok(if self.predict_proba(x)? >= 0.5 {
            MembershipLabel::NonMember
        } else {
            MembershipLabel::Member
        })
    }
}

/// Fits the attack model: z-score standardization from this split only, then
/// `iterations` full-batch gradient-descent steps on the L2-regularized
/// logistic loss (regularization on weights, not the bias). Deterministic.
pub fn fit_attack_model(
    features: &[Vec<f64>],
    labels: &[MembershipLabel],
    hyper: &FitHyper,
) -> Result<AttackModel, AttackError> {
    if features.is_empty() {
        return Err(AttackError::Empty("features"));
    }
    assert_eq!(features.len(), labels.len());
    let dim = features[0].len();
    for f in features {
        if f.len() != dim {
            return Err(AttackError::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }
    let has_member = labels.contains(&MembershipLabel::Member);
    let has_non = labels.contains(&MembershipLabel::NonMember);
    if !has_member || !has_non {
        return Err(AttackError::SingleClass);
    }

    let m = features.len() as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for j in 0..dim {
        let col: Vec<f64> = features.iter().map(|f| f[j]).collect();
        let mu = mean(&col);
        let sd = crate::util::variance(&col).sqrt();
        if sd > 0.0 {
            kept.push(j);
            means.push(mu);
            stds.push(sd);
        } else {
            dropped.push(j);
        }
    }

    let k = kept.len();
    // standardized design matrix
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            kept.iter()
                .enumerate()
                .map(|(j, &raw)| (f[raw] - means[j]) / stds[j])
                .collect()
        })
        .collect();
    let y: Vec<f64> = labels.iter().map(|l| l.bit() as f64).collect();

    let mut w = vec![0.0; k];
    let mut b = 0.0;
    for _ in 0..hyper.iterations {
        let mut gw = vec![0.0; k];
        let mut gb = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            let logit = b + zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - yi;
            gb += err;
            for (g, &zij) in gw.iter_mut().zip(zi) {
                *g += err * zij;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= hyper.step * (gj / m + hyper.l2 * *wj);
        }
        b -= hyper.step * (gb / m);
    }

    Ok(AttackModel {
        weights: w,
        bias: b,
        feature_means: means,
        feature_stds: stds,
        kept,
        dropped,
        dim,
    })
}

/// One sample's extracted features plus identity and hidden label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub patient_id: String,
    pub admission_id: String,
    pub label: MembershipLabel,
    pub features: Vec<f64>,
}

/// Which white-box representation to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Attention,
    Gradient,
}

/// The adversaries runnable by [`run_membership_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarySpec {
    /// Always predicts the given bit; PL is 0 by construction (test control).
    Constant(MembershipLabel),
    /// Reads the hidden label; PL is 1 by construction (test control).
    Oracle,
    SBba,
    ABba,
    PBba,
    SAwba,
    SGwba,
}

impl AdversarySpec {
    pub fn name(&self) -> &'static str {
        match self {
            AdversarySpec::Constant(MembershipLabel::Member) => "constant-0",
            AdversarySpec::Constant(MembershipLabel::NonMember) => "constant-1",
            AdversarySpec::Oracle => "oracle",
            AdversarySpec::SBba => "S-BBA",
            AdversarySpec::ABba => "A-BBA",
            AdversarySpec::PBba => "P-BBA",
            AdversarySpec::SAwba => "S-AWBA",
            AdversarySpec::SGwba => "S-GWBA",
        }
    }

    pub fn parse(name: &str) -> Option<AdversarySpec> {
        match name.to_ascii_uppercase().as_str() {
            "S-BBA" => Some(AdversarySpec::SBba),
            "A-BBA" => Some(AdversarySpec::ABba),
            "P-BBA" => Some(AdversarySpec::PBba),
            "S-AWBA" => Some(AdversarySpec::SAwba),
            "S-GWBA" => Some(AdversarySpec::SGwba),
            _ => None,
        }
    }
}

/// Everything the report stage needs beyond the serializable outcome.
#[derive(Debug, Clone)]
pub struct ExperimentDetail {
    pub units: Vec<UnitPrediction>,
    pub threshold: Option<ErrorThreshold>,
}

/// Per-sample LM error under a fresh per-sample mask substream of `seed`
/// (side `b` and sample index select the substream).
pub fn score_samples(
    params: &ParameterSet,
    samples: &[Sample],
    label: MembershipLabel,
    seed: u64,
) -> Result<Vec<SampleRecord>, AttackError> {
    let work = |(i, s): (usize, &Sample)| -> Result<SampleRecord, ModelError> {
        let mask_seed = child_seed(seed, "attack-mask", label.bit() as u64, i as u64);
        let inst = make_objective(s, &params.config, mask_seed)?;
        let trace = forward(params, &inst)?;
        Ok(SampleRecord {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            admission_id: s.admission_id.clone(),
            error: trace.mean_loss,
            label,
        })
    };
    #[cfg(feature = "parallel")]
    let out: Result<Vec<_>, ModelError> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| work((i, s)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let out: Result<Vec<_>, ModelError> = samples.iter().enumerate().map(work).collect();
    Ok(out?)
}

/// Everything the adversaries need from one sample against one checkpoint.
/// When `attention`/`gradient` are present they are computed from the same
/// objective instance as `record.error`, in a single backward pass.
#[derive(Debug, Clone)]
pub struct SampleEvaluation {
    pub record: SampleRecord,
    pub attention: Option<Vec<f64>>,
    pub gradient: Option<Vec<f64>>,
}

/// Scores one side once for every adversary. The per-sample mask substream
/// matches [`score_samples`] and [`extract_features`] exactly, so results
/// are bit-identical to running each adversary in isolation while paying
/// for one model pass per sample instead of one per adversary.
pub fn evaluate_side(
    params: &ParameterSet,
    samples: &[Sample],
    label: MembershipLabel,
    seed: u64,
    whitebox: bool,
) -> Result<Vec<SampleEvaluation>, AttackError> {
    let cfg = &params.config;
    let work = |(i, s): (usize, &Sample)| -> Result<SampleEvaluation, AttackError> {
        let mask_seed = child_seed(seed, "attack-mask", label.bit() as u64, i as u64);
        let inst = make_objective(s, cfg, mask_seed)?;
        let (error, attention, gradient) = if whitebox {
            let (trace, grads) = crate::model::backward_traced(params, &inst)?;
            (
                trace.mean_loss,
                Some(extract_attention_features(
                    &trace,
                    cfg.n_layers,
                    cfg.n_heads,
                )?),
                Some(extract_gradient_features(&grads)),
            )
        } else {
            (forward(params, &inst)?.mean_loss, None, None)
        };
        Ok(SampleEvaluation {
            record: SampleRecord {
                sample_id: s.sample_id.clone(),
                patient_id: s.patient_id.clone(),
                admission_id: s.admission_id.clone(),
                error,
                label,
            },
            attention,
            gradient,
        })
    };
    #[cfg(feature = "parallel")]
    {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| work((i, s)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().enumerate().map(work).collect()
    }
}

/// Feature rows of one kind out of shared evaluations.
pub fn feature_rows(
    evals: &[SampleEvaluation],
    kind: FeatureKind,
) -> Result<Vec<FeatureRow>, AttackError> {
    evals
        .iter()
        .map(|e| {
            let features = match kind {
                FeatureKind::Attention => e.attention.clone(),
                FeatureKind::Gradient => e.gradient.clone(),
            }
            .ok_or(AttackError::Empty("white-box features not evaluated"))?;
            Ok(FeatureRow {
                sample_id: e.record.sample_id.clone(),
                patient_id: e.record.patient_id.clone(),
                admission_id: e.record.admission_id.clone(),
                label: e.record.label,
                features,
            })
        })
        .collect()
}

/// Extracts white-box features for every sample, using the same per-sample
/// mask substreams as [`score_samples`].
pub fn extract_features(
    params: &ParameterSet,
    samples: &[Sample],
    label: MembershipLabel,
    seed: u64,
    kind: FeatureKind,
) -> Result<Vec<FeatureRow>, AttackError> {
    let cfg = &params.config;
    let work = |(i, s): (usize, &Sample)| -> Result<FeatureRow, AttackError> {
        let mask_seed = child_seed(seed, "attack-mask", label.bit() as u64, i as u64);
        let inst = make_objective(s, cfg, mask_seed)?;
        let features = match kind {
            FeatureKind::Attention => {
                let trace = forward(params, &inst)?;
                extract_attention_features(&trace, cfg.n_layers, cfg.n_heads)?
            }
            FeatureKind::Gradient => {
                let (_, grads) = backward(params, &inst)?;
                extract_gradient_features(&grads)
            }
        };
        Ok(FeatureRow {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            admission_id: s.admission_id.clone(),
            label,
            features,
        })
    };
    #[cfg(feature = "parallel")]
    {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| work((i, s)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().enumerate().map(work).collect()
    }
}

/// Patient-disjoint 20/80 split of one side's rows: patients are shuffled
/// deterministically and assigned to the attack-training pool until it holds
/// at least 20% of the side's samples; everyone else evaluates the attack.
fn attack_split(rows: &[FeatureRow], split_seed: u64, side: u64) -> (Vec<usize>, Vec<usize>) {
    let mut patients: Vec<String> = Vec::new();
    for r in rows {
        if !patients.contains(&r.patient_id) {
            patients.push(r.patient_id.clone());
        }
    }
    patients.sort();
    {
        use rand::seq::SliceRandom;
        let mut rng = substream(split_seed, "attack-split", side, 0);
        patients.shuffle(&mut rng);
    }
    let want = (rows.len() as f64 * 0.2).ceil() as usize;
    let mut fit_patients: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut covered = 0usize;
    for p in &patients {
        if covered >= want {
            break;
        }
        covered += rows.iter().filter(|r| &r.patient_id == p).count();
        fit_patients.insert(p.clone());
    }
    let mut fit = Vec::new();
    let mut eval = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if fit_patients.contains(&r.patient_id) {
            fit.push(i);
        } else {
            eval.push(i);
        }
    }
    (fit, eval)
}

/// Learned attack: fit on the 20% pools of both sides, evaluate on the 80%.
pub fn learned_attack(
    name: &str,
    train_rows: &[FeatureRow],
    test_rows: &[FeatureRow],
    split_seed: u64,
    hyper: &FitHyper,
) -> Result<(AttackOutcome, Vec<UnitPrediction>, AttackModel), AttackError> {
    if train_rows.len() < 5 {
        return Err(AttackError::SideTooSmall(train_rows.len()));
    }
    if test_rows.len() < 5 {
        return Err(AttackError::SideTooSmall(test_rows.len()));
    }
    let (fit_tr, eval_tr) = attack_split(train_rows, split_seed, 0);
    let (fit_te, eval_te) = attack_split(test_rows, split_seed, 1);
    if eval_tr.is_empty() || eval_te.is_empty() || fit_tr.is_empty() || fit_te.is_empty() {
        return Err(AttackError::SideTooSmall(
            eval_tr
                .len()
                .min(eval_te.len())
                .min(fit_tr.len())
                .min(fit_te.len()),
        ));
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<MembershipLabel> = Vec::new();
    for &i in &fit_tr {
        features.push(train_rows[i].features.clone());
        labels.push(MembershipLabel::Member);
    }
    for &i in &fit_te {
        features.push(test_rows[i].features.clone());
        labels.push(MembershipLabel::NonMember);
    }
    let model = fit_attack_model(&features, &labels, hyper)?;

    let mut units = Vec::new();
    for (&i, label) in eval_tr
        .iter()
        .zip(std::iter::repeat(MembershipLabel::Member))
        .chain(
            eval_te
                .iter()
                .zip(std::iter::repeat(MembershipLabel::NonMember)),
        )
    {
        let row = if label == MembershipLabel::Member {
            &train_rows[i]
        } else {
            &test_rows[i]
        };
        units.push(UnitPrediction {
            unit_id: row.sample_id.clone(),
            patient_id: row.patient_id.clone(),
            label,
            predicted: model.predict(&row.features)?,
        });
    }
    let outcome = summarize(name, &units)?;
    Ok((outcome, units, model))
}

/// Runs the full membership experiment for one adversary against one
/// checkpoint. Threshold adversaries score every sample and threshold at
/// μ_tr (group variants share the sample-level μ_tr); learned adversaries
/// extract features, fit on the patient-disjoint 20% pool, and are scored on
/// the remaining 80%. Deterministic given `split_seed`.
pub fn run_membership_experiment(
    params: &ParameterSet,
    adversary: AdversarySpec,
    train_samples: &[Sample],
    test_samples: &[Sample],
    split_seed: u64,
    hyper: &FitHyper,
) -> Result<(AttackOutcome, ExperimentDetail), AttackError> {
    if train_samples.is_empty() {
        return Err(AttackError::Empty("train_samples"));
    }
    if test_samples.is_empty() {
        return Err(AttackError::Empty("test_samples"));
    }
    let whitebox = matches!(adversary, AdversarySpec::SAwba | AdversarySpec::SGwba);
    let needs_eval = !matches!(
        adversary,
        AdversarySpec::Constant(_) | AdversarySpec::Oracle
    );
    let (train_evals, test_evals) = if needs_eval {
        (
            evaluate_side(
                params,
                train_samples,
                MembershipLabel::Member,
                split_seed,
                whitebox,
            )?,
            evaluate_side(
                params,
                test_samples,
                MembershipLabel::NonMember,
                split_seed,
                whitebox,
            )?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    run_adversary_from_evals(
        adversary,
        train_samples,
        test_samples,
        &train_evals,
        &test_evals,
        split_seed,
        hyper,
    )
}

/// Runs one adversary against precomputed per-sample evaluations; the
/// shared-evaluation path behind [`run_membership_experiment`], exposed so a
/// caller running several adversaries against the same checkpoint can pay
/// for the model passes once.
pub fn run_adversary_from_evals(
    adversary: AdversarySpec,
    train_samples: &[Sample],
    test_samples: &[Sample],
    train_evals: &[SampleEvaluation],
    test_evals: &[SampleEvaluation],
    split_seed: u64,
    hyper: &FitHyper,
) -> Result<(AttackOutcome, ExperimentDetail), AttackError> {
    match adversary {
        AdversarySpec::Constant(which) => {
            let units: Vec<UnitPrediction> = train_samples
                .iter()
                .map(|s| (s, MembershipLabel::Member))
                .chain(test_samples.iter().map(|s| (s, MembershipLabel::NonMember)))
                .map(|(s, label)| UnitPrediction {
                    unit_id: s.sample_id.clone(),
                    patient_id: s.patient_id.clone(),
                    label,
                    predicted: which,
                })
                .collect();
            let mut outcome = summarize(adversary.name(), &units)?;
            outcome.seed = split_seed;
            Ok((
                outcome,
                ExperimentDetail {
                    units,
                    threshold: None,
                },
            ))
        }
        AdversarySpec::Oracle => {
            let units: Vec<UnitPrediction> = train_samples
                .iter()
                .map(|s| (s, MembershipLabel::Member))
                .chain(test_samples.iter().map(|s| (s, MembershipLabel::NonMember)))
                .map(|(s, label)| UnitPrediction {
                    unit_id: s.sample_id.clone(),
                    patient_id: s.patient_id.clone(),
                    label,
                    predicted: label,
                })
                .collect();
            let mut outcome = summarize(adversary.name(), &units)?;
            outcome.seed = split_seed;
            Ok((
                outcome,
                ExperimentDetail {
                    units,
                    threshold: None,
                },
            ))
        }
        AdversarySpec::SBba | AdversarySpec::ABba | AdversarySpec::PBba => {
            let train_errors: Vec<f64> = train_evals.iter().map(|e| e.record.error).collect();
            let threshold = compute_threshold(&train_errors)?;
            let records: Vec<SampleRecord> = train_evals
                .iter()
                .chain(test_evals.iter())
                .map(|e| e.record.clone())
                .collect();
            let (mut outcome, units) = match adversary {
                AdversarySpec::SBba => sample_attack(&records, &threshold)?,
                AdversarySpec::ABba => group_attack(&records, GroupKey::Admission, &threshold)?,
                AdversarySpec::PBba => group_attack(&records, GroupKey::Patient, &threshold)?,
                _ => unreachable!(),
            };
            outcome.seed = split_seed;
            Ok((
                outcome,
                ExperimentDetail {
                    units,
                    threshold: Some(threshold),
                },
            ))
        }
        AdversarySpec::SAwba | AdversarySpec::SGwba => {
            let kind = if adversary == AdversarySpec::SAwba {
                FeatureKind::Attention
            } else {
                FeatureKind::Gradient
            };
            let train_rows = feature_rows(train_evals, kind)?;
            let test_rows = feature_rows(test_evals, kind)?;
            let (mut outcome, units, _model) =
                learned_attack(adversary.name(), &train_rows, &test_rows, split_seed, hyper)?;
            outcome.seed = split_seed;
            Ok((
                outcome,
                ExperimentDetail {
                    units,
                    threshold: None,
                },
            ))
        }
    }
}

/// Writes rows as the feature-dump CSV: identity columns, the hidden bit,
/// then one column per feature.
pub fn write_feature_csv(
    path: &std::path::Path,
    feature_names: &[String],
    rows: &[FeatureRow],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str("sample_id,patient_id,admission_id,b");
    for n in feature_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for r in rows {
        debug_assert_eq!(r.features.len(), feature_names.len());
        out.push_str(&format!(
            "{},{},{},{}",
            r.sample_id,
            r.patient_id,
            r.admission_id,
            r.label.bit()
        ));
        for f in &r.features {
            out.push(',');
            out.push_str(&format!("{f}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())
}
