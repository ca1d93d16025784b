//! Acceptance suite: nine numbered checks covering gradient correctness,
//! DP-SGD mechanics, the privacy accountant, attack metrics, feature
//! extraction, the seeded trend benchmark, and benchmark determinism.
//!
//! Runs without the default test harness so that exactly one PASS/FAIL line
//! prints per criterion regardless of capture settings. Pass criterion
//! numbers as arguments to run a subset (`cargo test --test acceptance -- 4 5`).

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use lmleak::accountant::{group_dp, rdp_step_subsampled_gaussian, AccountantState};
use lmleak::attacks::{
    attention_concentration, compute_threshold, extract_attention_features,
    extract_gradient_features, run_membership_experiment, sample_attack, AdversarySpec, FitHyper,
    MembershipLabel, SampleRecord,
};
use lmleak::corpus::{
    generate_synthetic_corpus, make_samples, split_by_patient, GenConfig, Sample, Side,
};
use lmleak::model::{
    backward, forward, init_params, make_objective, GradientSet, ModelConfig, Objective,
    ParameterSet,
};
use lmleak::trainer::{apply_noised_update, clip_gradient};
use lmleak::util::substream;
use lmleak_cli::{run_bench, ExperimentConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn main() {
    let args: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run_all = args.is_empty();
    let checks: Vec<(usize, &str, Check)> = vec![
        (
            1,
            "gradient correctness vs central finite differences",
            c1_gradients,
        ),
        (2, "DP-SGD per-sample clipping bound", c2_clipping),
        (3, "DP-SGD noise convention lr*sigma*C/B", c3_noise),
        (
            4,
            "RDP accountant exactness and monotonicity",
            c4_accountant,
        ),
        (5, "group-DP formula", c5_group_dp),
        (6, "attack metric fixtures", c6_attack_metrics),
        (7, "feature-extraction oracles", c7_features),
        (8, "seeded trend benchmark (5 repetitions)", c8_benchmark),
        (9, "quick-benchmark determinism", c9_determinism),
    ];
    let mut failures = 0;
    for (num, name, f) in checks {
        if !run_all && !args.contains(&num) {
            continue;
        }
        let started = Instant::now();
        match f() {
            Ok(detail) => {
                println!(
                    "criterion {num} ({name}): PASS [{:.1}s] {detail}",
                    started.elapsed().as_secs_f64()
                );
            }
            Err(why) => {
                failures += 1;
                println!(
                    "criterion {num} ({name}): FAIL [{:.1}s] {why}",
                    started.elapsed().as_secs_f64()
                );
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criterion(s) failed");
        std::process::exit(1);
    }
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lmleak-acceptance-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

/// A random fully-real sample for a model of the given vocab/seq_len.
fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng, id: usize) -> Sample {
    let tokens: Vec<u32> = (0..cfg.seq_len)
        .map(|_| rng.gen_range(3..cfg.vocab_size as u32))
        .collect();
    Sample {
        sample_id: format!("s{id}"),
        patient_id: format!("p{}", id % 7),
        admission_id: format!("a{}", id % 13),
        note_id: format!("n{id}"),
        tokens,
        side: Side::Train,
    }
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

fn c1_gradients() -> Result<String, String> {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-4;
    const COORDS_PER_TENSOR: usize = 50;

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for objective in [Objective::Ar, Objective::Mlm] {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 16,
            ff_dim: 32,
            vocab_size: 64,
            seq_len: 16,
            objective,
            mask_rate: 0.15,
        };
        let mut rng = substream(11, "acc-fd", 0, 0);
        let sample = random_sample(&cfg, &mut rng, 0);
        let inst = make_objective(&sample, &cfg, 5).map_err(|e| e.to_string())?;
        let params = init_params(&cfg, 3).map_err(|e| e.to_string())?;
        let (_, grads) = backward(&params, &inst).map_err(|e| e.to_string())?;

        for t in 0..params.tensors.len() {
            let size = params.tensors[t].data.len();
            let idx: Vec<usize> = if size <= COORDS_PER_TENSOR {
                (0..size).collect()
            } else {
                // Distinct pseudo-random coordinates.
                let mut set = BTreeSet::new();
                while set.len() < COORDS_PER_TENSOR {
                    set.insert(rng.gen_range(0..size));
                }
                set.into_iter().collect()
            };
            for i in idx {
                let mut p = params.clone();
                p.tensors[t].data[i] += H;
                let up = forward(&p, &inst).map_err(|e| e.to_string())?.mean_loss;
                p.tensors[t].data[i] -= 2.0 * H;
                let down = forward(&p, &inst).map_err(|e| e.to_string())?.mean_loss;
                let fd = (up - down) / (2.0 * H);
                let a = grads.tensors[t].data[i];
                // Symmetric normalization, the standard gradient-check metric;
                // the finite difference itself carries O(h^2) truncation error
                // on high-curvature coordinates, which this absorbs without
                // masking genuine gradient defects (those show up at 1e-1..1).
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
                if rel > TOL {
                    return Err(format!(
                        "{objective:?} tensor {} coord {i}: analytic {a:.9e} vs fd {fd:.9e} (rel {rel:.2e})",
                        params.tensors[t].name
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} coordinates, worst relative error {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Per-sample clipping bound; under-threshold gradients bitwise unchanged.
// ---------------------------------------------------------------------------

fn c2_clipping() -> Result<String, String> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        model_dim: 8,
        ff_dim: 16,
        vocab_size: 32,
        seq_len: 8,
        objective: Objective::Ar,
        mask_rate: 0.15,
    };
    let params = init_params(&cfg, 1).map_err(|e| e.to_string())?;
    let mut rng = substream(2, "acc-clip", 0, 0);

    // Choose C near the median norm so both branches are well populated.
    let mut norms = Vec::new();
    let mut grads: Vec<GradientSet> = Vec::new();
    for i in 0..1000 {
        let sample = random_sample(&cfg, &mut rng, i);
        let inst = make_objective(&sample, &cfg, i as u64).map_err(|e| e.to_string())?;
        let (_, g) = backward(&params, &inst).map_err(|e| e.to_string())?;
        norms.push(g.global_sq_norm().sqrt());
        grads.push(g);
    }
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let c = sorted[norms.len() / 2];

    let mut clipped_count = 0usize;
    let mut untouched = 0usize;
    for (g, &norm) in grads.iter_mut().zip(&norms) {
        let before: Vec<Vec<u64>> = g
            .tensors
            .iter()
            .map(|t| t.data.iter().map(|x| x.to_bits()).collect())
            .collect();
        let reported = clip_gradient(g, c);
        if (reported - norm).abs() > 1e-12 {
            return Err(format!(
                "clip_gradient reported {reported}, norm was {norm}"
            ));
        }
        let after = g.global_sq_norm().sqrt();
        if after > c + 1e-6 {
            return Err(format!("post-clip norm {after} exceeds C={c}"));
        }
        if norm <= c {
            let same = g
                .tensors
                .iter()
                .zip(&before)
                .all(|(t, b)| t.data.iter().map(|x| x.to_bits()).eq(b.iter().copied()));
            if !same {
                return Err(format!("gradient with norm {norm} <= C={c} was modified"));
            }
            untouched += 1;
        } else {
            clipped_count += 1;
        }
    }
    Ok(format!(
        "1000 per-sample gradients, C={c:.4}: {clipped_count} clipped, {untouched} bitwise untouched"
    ))
}

// ---------------------------------------------------------------------------
// 3. Noise convention: update std = lr·σ·C/B̄ with zero gradients.
// ---------------------------------------------------------------------------

fn c3_noise() -> Result<String, String> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        model_dim: 2,
        ff_dim: 4,
        vocab_size: 8,
        seq_len: 4,
        objective: Objective::Ar,
        mask_rate: 0.15,
    };
    let (lr, sigma, c, lot) = (0.5, 1.3, 0.7, 16.0);
    let expected = lr * sigma * c / lot;
    let zero_sum = ParameterSet::zeros(&cfg);
    let n_coords = zero_sum.n_params();
    const STEPS: usize = 10_000;

    let mut rng = substream(4, "acc-noise", 0, 0);
    let mut per_coord_sq = vec![0.0f64; n_coords];
    for _ in 0..STEPS {
        let mut p = ParameterSet::zeros(&cfg);
        apply_noised_update(&mut p, &zero_sum, lr, sigma, c, lot, &mut rng);
        let mut k = 0;
        for t in &p.tensors {
            for &x in &t.data {
                per_coord_sq[k] += x * x;
                k += 1;
            }
        }
    }
    // The noise is i.i.d. across coordinates, so every (step, coordinate)
    // update is one draw of the same distribution. The pooled std is the
    // 2%-bound estimate (its standard error here is ~0.08%, so a wrong
    // factor such as a missing /B or sigma^2-for-sigma fails decisively);
    // individual coordinates get a 5% guard, which is ~7 standard errors
    // for a std estimated from 10^4 draws.
    let mut worst = 0.0f64;
    let mut pooled_sq = 0.0f64;
    for (k, sq) in per_coord_sq.iter().enumerate() {
        pooled_sq += sq;
        let std = (sq / STEPS as f64).sqrt();
        let rel = (std - expected).abs() / expected;
        if rel > worst {
            worst = rel;
        }
        if rel > 0.05 {
            return Err(format!(
                "coordinate {k}: std {std:.6e} vs lr*sigma*C/B = {expected:.6e} (rel {rel:.3})"
            ));
        }
    }
    let pooled = (pooled_sq / (STEPS * n_coords) as f64).sqrt();
    let pooled_rel = (pooled - expected).abs() / expected;
    if pooled_rel > 0.02 {
        return Err(format!(
            "pooled std {pooled:.6e} vs lr*sigma*C/B = {expected:.6e} (rel {pooled_rel:.4})"
        ));
    }
    Ok(format!(
        "{n_coords} coordinates x {STEPS} steps: pooled std {pooled:.6e} vs {expected:.6e} \
         (rel {pooled_rel:.5} < 0.02), worst single coordinate {worst:.4} (< 0.05)"
    ))
}

// ---------------------------------------------------------------------------
// 4. Accountant: q=1 closed form, high-precision oracle grid, monotonicity.
// ---------------------------------------------------------------------------

/// The subsampled-Gaussian RDP binomial sum, (q, σ, α) → RDP per step,
/// frozen from a 60-digit arbitrary-precision evaluation.
const RDP_ORACLE: &[(f64, f64, u64, f64)] = &[
    (0.001, 0.5, 2, 5.359671370362359e-05),
    (0.001, 0.5, 8, 8.105422539095557),
    (0.001, 0.5, 32, 56.86941390556682),
    (0.001, 0.5, 256, 505.0651554846297),
    (0.001, 1.0, 2, 1.7182803522145153e-06),
    (0.001, 1.0, 8, 6.987941649094147e-06),
    (0.001, 1.0, 32, 8.869413905602325),
    (0.001, 1.0, 256, 121.0651554846297),
    (0.001, 2.0, 2, 2.8402537635253045e-07),
    (0.001, 2.0, 8, 1.138223717714744e-06),
    (0.001, 2.0, 32, 4.58731489855166e-06),
    (0.001, 2.0, 256, 25.0651554846297),
    (0.01, 0.5, 2, 0.005345502314345256),
    (0.01, 0.5, 8, 10.736948358948984),
    (0.01, 0.5, 32, 59.24627593704455),
    (0.01, 0.5, 256, 507.3767703230865),
    (0.01, 1.0, 2, 0.00017181342207454794),
    (0.01, 1.0, 8, 0.0008936439076060318),
    (0.01, 1.0, 32, 11.246275937048068),
    (0.01, 1.0, 256, 123.37677032308646),
    (0.01, 2.0, 2, 2.840213832422485e-05),
    (0.01, 2.0, 8, 0.00011575614792991031),
    (0.01, 2.0, 32, 0.000502894646862791),
    (0.01, 2.0, 256, 27.376770323086465),
    (0.1, 0.5, 2, 0.4291695905978997),
    (0.1, 0.5, 8, 13.368474179442488),
    (0.1, 0.5, 32, 61.62313796852227),
    (0.1, 0.5, 256, 509.68838516154324),
    (0.1, 1.0, 2, 0.017036863236176553),
    (0.1, 1.0, 8, 1.3783614113481266),
    (0.1, 1.0, 32, 13.623137968522595),
    (0.1, 1.0, 256, 125.68838516154324),
    (0.1, 2.0, 2, 0.002836228266263623),
    (0.1, 2.0, 8, 0.013725430103219919),
    (0.1, 2.0, 32, 1.6272023010194359),
    (0.1, 2.0, 256, 29.688385161543234),
];

fn c4_accountant() -> Result<String, String> {
    // q = 1: closed form α/(2σ²), exact.
    for sigma in [0.5, 1.0, 2.0] {
        for alpha in [2u64, 8, 32, 256] {
            let got = rdp_step_subsampled_gaussian(1.0, sigma, alpha).map_err(|e| e.to_string())?;
            let want = alpha as f64 / (2.0 * sigma * sigma);
            if got != want {
                return Err(format!("q=1 σ={sigma} α={alpha}: {got} != {want}"));
            }
        }
    }

    // Oracle grid, 1e-9 relative.
    let mut worst = 0.0f64;
    for &(q, sigma, alpha, want) in RDP_ORACLE {
        let got = rdp_step_subsampled_gaussian(q, sigma, alpha).map_err(|e| e.to_string())?;
        let rel = (got - want).abs() / want.abs();
        if rel > worst {
            worst = rel;
        }
        if rel > 1e-9 {
            return Err(format!(
                "q={q} σ={sigma} α={alpha}: got {got:.12e}, oracle {want:.12e} (rel {rel:.2e})"
            ));
        }
    }

    // ε monotone: decreasing in σ, increasing in steps, across the grid.
    let delta = 1e-5;
    for q in [0.001, 0.01, 0.1] {
        for steps in [10u64, 100, 1000] {
            let mut prev: Option<f64> = None;
            for sigma in [0.5, 1.0, 2.0] {
                let mut st = AccountantState::new(q, sigma).map_err(|e| e.to_string())?;
                st.compose(steps);
                let eps = st.to_epsilon(delta).map_err(|e| e.to_string())?.epsilon;
                if let Some(p) = prev {
                    if eps.is_nan() || eps >= p {
                        return Err(format!(
                            "ε not decreasing in σ at q={q}, steps={steps}: {eps} !< {p}"
                        ));
                    }
                }
                prev = Some(eps);
            }
        }
        for sigma in [0.5, 1.0, 2.0] {
            let mut prev: Option<f64> = None;
            for steps in [10u64, 100, 1000] {
                let mut st = AccountantState::new(q, sigma).map_err(|e| e.to_string())?;
                st.compose(steps);
                let eps = st.to_epsilon(delta).map_err(|e| e.to_string())?.epsilon;
                if let Some(p) = prev {
                    if eps.is_nan() || eps <= p {
                        return Err(format!(
                            "ε not increasing in steps at q={q}, σ={sigma}: {eps} !> {p}"
                        ));
                    }
                }
                prev = Some(eps);
            }
        }
    }
    Ok(format!(
        "q=1 exact, {} oracle points (worst rel {worst:.2e}), monotone in σ and steps",
        RDP_ORACLE.len()
    ))
}

// ---------------------------------------------------------------------------
// 5. Group DP: (ε, δ, k) → (kε, k e^{(k−1)ε} δ).
// ---------------------------------------------------------------------------

fn c5_group_dp() -> Result<String, String> {
    let g = group_dp(0.1, 1e-6, 50).map_err(|e| e.to_string())?;
    let want_eps = 5.0;
    let want_delta = 50.0 * (49.0 * 0.1f64).exp() * 1e-6;
    let rel_e = (g.epsilon - want_eps).abs() / want_eps;
    let rel_d = (g.delta - want_delta).abs() / want_delta;
    if rel_e > 1e-6 || rel_d > 1e-6 {
        return Err(format!(
            "group_dp(0.1, 1e-6, 50) = ({}, {}), want ({want_eps}, {want_delta:.6e})",
            g.epsilon, g.delta
        ));
    }
    let id = group_dp(0.37, 2e-7, 1).map_err(|e| e.to_string())?;
    if id.epsilon != 0.37 || id.delta != 2e-7 {
        return Err(format!(
            "k=1 must be identity, got ({}, {})",
            id.epsilon, id.delta
        ));
    }
    Ok(format!(
        "(0.1, 1e-6, k=50) -> ({:.3}, {:.4e}); k=1 identity exact",
        g.epsilon, g.delta
    ))
}

// ---------------------------------------------------------------------------
// 6. Attack metrics: enumerable fixtures and concentration values.
// ---------------------------------------------------------------------------

fn c6_attack_metrics() -> Result<String, String> {
    // Four-sample fixture: train errors {0.1, 0.3} → μ_tr = 0.2; test errors
    // {0.25, 0.5}. Members below μ_tr: 1 of 2; non-members below: 0 of 2.
    let rec = |id: &str, err: f64, label| SampleRecord {
        sample_id: id.into(),
        patient_id: id.into(),
        admission_id: id.into(),
        error: err,
        label,
    };
    let records = vec![
        rec("t1", 0.1, MembershipLabel::Member),
        rec("t2", 0.3, MembershipLabel::Member),
        rec("o1", 0.25, MembershipLabel::NonMember),
        rec("o2", 0.5, MembershipLabel::NonMember),
    ];
    let thr = compute_threshold(&[0.1, 0.3]).map_err(|e| e.to_string())?;
    let (outcome, _) = sample_attack(&records, &thr).map_err(|e| e.to_string())?;
    if outcome.pl != 0.5 {
        return Err(format!("4-sample S-BBA fixture: PL {} != 0.5", outcome.pl));
    }

    // Constant and oracle adversaries on a real toy corpus: PL exactly 0 / 1.
    let corpus = generate_synthetic_corpus(
        &GenConfig {
            n_patients: 10,
            code_universe_size: 6,
            zipf_exponent: 1.5,
            admissions_per_patient: [1, 1],
            notes_per_admission: [1, 1],
            note_len: [8, 8],
            vocab_size: 64,
            boilerplate_fraction: 0.2,
            umm_mode: false,
        },
        99,
    )
    .map_err(|e| e.to_string())?;
    let split = split_by_patient(&corpus, 0.5, 1).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        model_dim: 8,
        ff_dim: 16,
        vocab_size: 64,
        seq_len: 8,
        objective: Objective::Ar,
        mask_rate: 0.15,
    };
    let train = make_samples(
        &corpus.subset(&split.train_patients),
        mcfg.seq_len,
        Side::Train,
    );
    let test = make_samples(
        &corpus.subset(&split.test_patients),
        mcfg.seq_len,
        Side::Test,
    );
    let params = init_params(&mcfg, 5).map_err(|e| e.to_string())?;
    let hyper = FitHyper::default();
    for (adv, want) in [
        (AdversarySpec::Constant(MembershipLabel::Member), 0.0),
        (AdversarySpec::Constant(MembershipLabel::NonMember), 0.0),
        (AdversarySpec::Oracle, 1.0),
    ] {
        let (o, _) = run_membership_experiment(&params, adv, &train, &test, 0, &hyper)
            .map_err(|e| e.to_string())?;
        if o.pl != want {
            return Err(format!("{}: PL {} != {want}", o.attack, o.pl));
        }
    }

    // Concentration fixtures.
    let onehot = attention_concentration(&[1.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    if onehot != 0.0 {
        return Err(format!("one-hot concentration {onehot} != 0"));
    }
    let uniform = attention_concentration(&[0.25; 4]).map_err(|e| e.to_string())?;
    if (uniform - (-1.3863)).abs() > 1e-4 {
        return Err(format!(
            "uniform n=4 concentration {uniform} != -1.3863 ± 1e-4"
        ));
    }
    Ok(format!(
        "fixture PL 0.5 exact; constant 0 / oracle 1 exact; C(one-hot)=0, C(uniform4)={uniform:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Feature oracles: percentile aggregates and gradient-norm features.
// ---------------------------------------------------------------------------

/// Sort-based percentile with linear interpolation between order statistics.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() == 1 {
        return v[0];
    }
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

fn c7_features() -> Result<String, String> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: 64,
        seq_len: 12,
        objective: Objective::Ar,
        mask_rate: 0.15,
    };
    let params = init_params(&cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = substream(21, "acc-feat", 0, 0);
    let mut worst_att = 0.0f64;
    let mut worst_grad = 0.0f64;
    for i in 0..20 {
        let sample = random_sample(&cfg, &mut rng, i);
        let inst = make_objective(&sample, &cfg, i as u64).map_err(|e| e.to_string())?;
        let trace = forward(&params, &inst).map_err(|e| e.to_string())?;

        // Attention aggregates vs the sort-based oracle.
        let feats = extract_attention_features(&trace, cfg.n_layers, cfg.n_heads)
            .map_err(|e| e.to_string())?;
        let mut k = 0usize;
        for att in &trace.attention {
            let conc: Vec<f64> = (0..trace.real_len)
                .map(|r| attention_concentration(&att[r * cfg.seq_len..(r + 1) * cfg.seq_len]))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let mean = conc.iter().sum::<f64>() / conc.len() as f64;
            for want in [
                mean,
                oracle_percentile(&conc, 50.0),
                oracle_percentile(&conc, 5.0),
                oracle_percentile(&conc, 95.0),
            ] {
                let got = feats[k];
                let err = (got - want).abs();
                if err > worst_att {
                    worst_att = err;
                }
                if err > 1e-9 {
                    return Err(format!("attention feature {k}: {got} vs oracle {want}"));
                }
                k += 1;
            }
        }

        // Gradient features sum to the flat squared global norm.
        let (_, grads) = backward(&params, &inst).map_err(|e| e.to_string())?;
        let feats = extract_gradient_features(&grads);
        let total: f64 = feats.iter().sum();
        let flat: f64 = grads
            .tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum();
        let rel = (total - flat).abs() / flat.max(1e-300);
        if rel > worst_grad {
            worst_grad = rel;
        }
        if rel > 1e-9 {
            return Err(format!("gradient feature sum {total} vs flat norm {flat}"));
        }
    }
    Ok(format!(
        "20 traces: attention aggregates match (worst {worst_att:.2e}), gradient sums match (worst rel {worst_grad:.2e})"
    ))
}

// ---------------------------------------------------------------------------
// 8. The seeded trend benchmark (full five-repetition run).
// ---------------------------------------------------------------------------

fn c8_benchmark() -> Result<String, String> {
    let cfg = ExperimentConfig::resolve(None).map_err(|e| e.to_string())?;

    // Scale guards from the criterion text.
    let gen = &cfg.corpus.gen;
    if !(150..=250).contains(&gen.n_patients) {
        return Err(format!(
            "default corpus has {} patients, want ~200",
            gen.n_patients
        ));
    }
    for (name, m) in &cfg.models {
        let p = init_params(m, 0).map_err(|e| e.to_string())?.n_params();
        if p > 500_000 {
            return Err(format!("model {name} has {p} parameters (> 0.5M)"));
        }
    }
    if cfg.bench.n_seeds != 5 {
        return Err(format!(
            "benchmark must use 5 repetitions, got {}",
            cfg.bench.n_seeds
        ));
    }

    let out = scratch_dir("bench");
    let started = Instant::now();
    let result = run_bench(&cfg, &out, 0, false);
    let elapsed = started.elapsed().as_secs_f64();
    let budget = 45.0 * 60.0;
    match result {
        Ok(summary) => {
            for t in &summary.assertions {
                println!("    trend {} [{}]", t.name, t.detail);
            }
            if elapsed > budget {
                return Err(format!("benchmark took {elapsed:.0}s (> {budget:.0}s)"));
            }
            let _ = fs::remove_dir_all(&out);
            Ok(format!(
                "all {} trend assertions hold; {elapsed:.0}s total",
                summary.assertions.len()
            ))
        }
        Err(e) => Err(format!(
            "benchmark failed after {elapsed:.0}s: {e} (outputs kept in {})",
            out.display()
        )),
    }
}

// ---------------------------------------------------------------------------
// 9. Determinism: two identical --quick benchmarks, identical report.csv.
// ---------------------------------------------------------------------------

fn c9_determinism() -> Result<String, String> {
    let cfg = ExperimentConfig::resolve(None).map_err(|e| e.to_string())?;
    let (out_a, out_b) = (scratch_dir("quick-a"), scratch_dir("quick-b"));
    run_bench(&cfg, &out_a, 123, true).map_err(|e| format!("first quick bench: {e}"))?;
    run_bench(&cfg, &out_b, 123, true).map_err(|e| format!("second quick bench: {e}"))?;
    let a = fs::read(out_a.join("report.csv")).map_err(|e| e.to_string())?;
    let b = fs::read(out_b.join("report.csv")).map_err(|e| e.to_string())?;
    if a != b {
        return Err(format!(
            "report.csv differs between identical runs ({} vs {} bytes; outputs kept in {} and {})",
            a.len(),
            b.len(),
            out_a.display(),
            out_b.display()
        ));
    }
    let n_rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    let _ = fs::remove_dir_all(&out_a);
    let _ = fs::remove_dir_all(&out_b);
    Ok(format!("byte-identical report.csv ({n_rows} data rows)"))
}
