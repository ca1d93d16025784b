//! Hierarchical EHR-like corpora: generation, JSONL ingestion,
//! patient-disjoint splits, fixed-length samples, disease statistics, and
//! rarity buckets.
//!
//! A corpus is patients → admissions → notes. Each patient carries a profile
//! (a set of disease codes); notes are token sequences over a closed
//! vocabulary with reserved ids `0 = PAD`, `1 = UNK`, `2 = MASK` (the
//! vocabulary proper starts at 3).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{fnv1a64, substream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
/// First non-reserved token id.
pub const RESERVED: u32 = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: duplicate note id {note_id:?} within patient {patient_id:?}")]
    DuplicateNote {
        line: usize,
        note_id: String,
        patient_id: String,
    },
    #[error("no records in {0}")]
    Empty(String),
    #[error("corpus has fewer than 2 patients")]
    TooSmall,
    #[error("split ratio must be in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("unknown code {0:?} in profile")]
    UnknownCode(String),
    #[error("text ingestion requires a vocab.json next to the corpus file")]
    MissingVocab,
    #[error("no patients to bucket")]
    NoPatients,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Note {
    pub note_id: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Admission {
    pub admission_id: String,
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Patient {
    pub patient_id: String,
    /// Disease-code profile; non-empty.
    pub profile: BTreeSet<String>,
    pub admissions: Vec<Admission>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Corpus {
    pub patients: Vec<Patient>,
    /// Token id → token string; index 0..3 are the reserved tokens.
    pub vocab: Vec<String>,
    /// All codes that may appear in profiles, sorted.
    pub code_universe: Vec<String>,
}

/// Which side of the membership split a sample belongs to. Visible only to
/// the harness; attacks receive it as the hidden experiment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Train,
    Test,
}

/// A fixed-length training/attack unit carrying its group keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    pub admission_id: String,
    pub note_id: String,
    /// Exactly `seq_len` token ids, PAD-padded at the end.
    pub tokens: Vec<u32>,
    pub side: Side,
}

impl Sample {
    /// Number of leading non-PAD tokens. PAD is reserved for end padding.
    pub fn real_len(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
    pub seed: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiseaseStats {
    pub total_patients: usize,
    /// MLE probability per code: (#patients carrying the code) / total.
    pub per_code_prob: BTreeMap<String, f64>,
}

/// Probability of a profile under the per-code independence model, kept in
/// log space to avoid underflow.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileProbability {
    pub prob: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RarityBucket {
    pub bucket_index: usize,
    /// Natural-log probability range [lo, hi) covered by this bucket
    /// (the last bucket is closed on the right).
    pub log_prob_lo: f64,
    pub log_prob_hi: f64,
    pub member_patient_ids: BTreeSet<String>,
}

/// Configuration for synthetic corpus generation.
///
/// Notes mix three ingredients: tokens derived from the patient's profile
/// codes, patient-specific filler (a per-patient writing-style subset of the
/// filler vocabulary), and boilerplate spans shared verbatim across patients
/// at rate `boilerplate_fraction` (standard instructions / copy-pasted text).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_patients: usize,
    pub code_universe_size: usize,
    pub zipf_exponent: f64,
    /// Inclusive [min, max] admissions per patient.
    pub admissions_per_patient: [usize; 2],
    /// Inclusive [min, max] notes per admission.
    pub notes_per_admission: [usize; 2],
    /// Inclusive [min, max] tokens per note.
    pub note_len: [usize; 2],
    pub vocab_size: usize,
    pub boilerplate_fraction: f64,
    /// When set, every note becomes its own admission (record-per-admission
    /// style corpora); exercises the small-group attack regime.
    #[serde(default)]
    pub umm_mode: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            code_universe_size: 60,
            zipf_exponent: 1.2,
            admissions_per_patient: [1, 3],
            notes_per_admission: [1, 2],
            note_len: [24, 48],
            vocab_size: 256,
            boilerplate_fraction: 0.3,
            umm_mode: false,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1");
        }
        if self.code_universe_size == 0 {
            return bad("code_universe_size must be >= 1");
        }
        if self.zipf_exponent <= 0.0 {
            return bad("zipf_exponent must be positive");
        }
        for (name, r) in [
            ("admissions_per_patient", self.admissions_per_patient),
            ("notes_per_admission", self.notes_per_admission),
            ("note_len", self.note_len),
        ] {
            if r[0] == 0 || r[0] > r[1] {
                return bad(&format!("{name} must be a nonempty range of counts >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.boilerplate_fraction) {
            return bad("boilerplate_fraction must be in [0, 1]");
        }
        if self.vocab_size <= self.code_universe_size + RESERVED as usize {
            return bad("vocab_size must exceed code_universe_size plus reserved tokens");
        }
        Ok(())
    }
}

/// Profile size is Uniform{1..5}; codes are drawn without replacement with
/// probability proportional to Zipf weights rank^(-s), so rare profiles exist.
pub const PROFILE_SIZE_MAX: usize = 5;

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

/// Draws `k` indices without replacement, each step proportional to `weights`.
/// Exposed for the generator's reference-resampling test.
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(weights.len()) {
        let total: f64 = w.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            acc += wi;
            if u < acc {
                chosen = i;
                break;
            }
        }
        picked.push(chosen);
        w[chosen] = 0.0;
    }
    picked
}

/// Draws a patient's profile (code indices) from its dedicated substream.
/// The generator and the rank-order regression test both call this.
pub fn draw_profile(
    seed: u64,
    patient_index: u64,
    universe: usize,
    zipf_exponent: f64,
) -> Vec<usize> {
    let mut rng = substream(seed, "profile", patient_index, 0);
    let size = rng.gen_range(1..=PROFILE_SIZE_MAX.min(universe));
    let weights = zipf_weights(universe, zipf_exponent);
    weighted_sample_without_replacement(&weights, size, &mut rng)
}

const BOILER_SPANS: usize = 6;
const BOILER_SPAN_LEN: usize = 6;
/// Probability that a just-mentioned disease code is re-mentioned after one
/// intervening filler word (clinical notes introduce a code, elaborate, and
/// repeat it). The echo makes token order informative: the second mention is
/// only predictable from the token two positions back.
const ECHO_PROB: f64 = 0.6;
/// Share of non-boilerplate emissions drawn from the patient's disease
/// profile (the rest come from the patient's private filler style). Profile
/// mass must dominate so that a patient's note loss tracks the rarity of
/// their codes rather than the unlearnable private style.
const PROFILE_SHARE: f64 = 0.80;
/// Length of the fixed stock phrase attached to a disease code.
const PHRASE_LEN: usize = 3;
/// Probability that a rare-code mention is followed by its stock phrase.
const PHRASE_PROB: f64 = 1.0;
/// Only codes of zipf rank at or beyond this get a stock phrase. Rare codes
/// carry standard wording seen in few charts, so a note's cost under the
/// model tracks how much training exposed that code's phrasing; common codes
/// stay phrase-free so their notes keep heterogeneous, harder-to-threshold
/// losses.
const PHRASE_MIN_RANK: usize = 10;
/// Every note carries the patient's registration header: identifier tokens
/// unique to that patient (a medical-record number rendered as word pieces).
/// Identifiers are per-patient exclusive, so a model only ever trains on the
/// identifiers of its training patients — held-out charts present tokens the
/// model has never updated, the strongest per-patient signature.
const HEADER_LEN: usize = 2;

/// Generates a synthetic hierarchical corpus; deterministic given `seed`.
pub fn generate_synthetic_corpus(config: &GenConfig, seed: u64) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let n_codes = config.code_universe_size;
    let code_universe: Vec<String> = (0..n_codes).map(|i| format!("C{i:03}")).collect();

    let mut vocab: Vec<String> = vec!["<pad>".into(), "<unk>".into(), "<mask>".into()];
    vocab.extend(code_universe.iter().cloned());
    let filler_base = vocab.len() as u32;
    for i in vocab.len()..config.vocab_size {
        vocab.push(format!("w{i}"));
    }
    let n_filler = config.vocab_size as u32 - filler_base;
    // Boilerplate spans are fixed slices at the start of the filler region;
    // identical across patients by construction.
    let boiler_tokens = (BOILER_SPANS * BOILER_SPAN_LEN).min(n_filler as usize / 2);
    let n_spans = boiler_tokens / BOILER_SPAN_LEN;
    // Stock phrases live after the boilerplate slice, then the registration
    // identifier pool; at least 8 filler words are held back as the
    // patients' style pool.
    let after_boiler = n_filler as usize - boiler_tokens;
    let phrase_codes = n_codes.saturating_sub(PHRASE_MIN_RANK);
    let phrase_region = (phrase_codes * PHRASE_LEN).min(after_boiler.saturating_sub(8));
    let phrase_base = filler_base + boiler_tokens as u32;
    let header_pool =
        (config.n_patients * HEADER_LEN).min(after_boiler.saturating_sub(phrase_region + 8));
    let header_base = phrase_base + phrase_region as u32;
    let style_base = header_base + header_pool as u32;
    let style_pool =
        (n_filler - boiler_tokens as u32 - phrase_region as u32 - header_pool as u32).max(1);

    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let profile_idx = draw_profile(seed, p as u64, n_codes, config.zipf_exponent);
        let profile: BTreeSet<String> = profile_idx
            .iter()
            .map(|&i| code_universe[i].clone())
            .collect();
        let profile_tokens: Vec<u32> = profile_idx.iter().map(|&i| RESERVED + i as u32).collect();

        let mut rng = substream(seed, "notes", p as u64, 0);
        // Registration header: this patient's exclusive identifier tokens.
        let header: Vec<u32> = (0..HEADER_LEN.min(header_pool))
            .map(|j| header_base + ((p * HEADER_LEN + j) % header_pool.max(1)) as u32)
            .collect();
        // Patient-specific filler subset: the patient's "writing style".
        let style_size = 6.min(style_pool as usize);
        let style: Vec<u32> = (0..style_size)
            .map(|_| style_base + rng.gen_range(0..style_pool))
            .collect();

        let patient_id = format!("P{p:04}");
        let n_adm =
            rng.gen_range(config.admissions_per_patient[0]..=config.admissions_per_patient[1]);
        let mut admissions = Vec::with_capacity(n_adm);
        for a in 0..n_adm {
            let n_notes =
                rng.gen_range(config.notes_per_admission[0]..=config.notes_per_admission[1]);
            let mut notes = Vec::with_capacity(n_notes);
            for nn in 0..n_notes {
                let len = rng.gen_range(config.note_len[0]..=config.note_len[1]);
                let header_len = header.len().min(len);
                // The registration header sits at a chart-dependent offset
                // (transcription places it wherever the template left room),
                // so locating it requires recognizing the identifier tokens
                // rather than a fixed position.
                let header_at = rng.gen_range(0..=len - header_len);
                let body_len = len - header_len;
                let mut tokens = Vec::with_capacity(len);
                while tokens.len() < body_len {
                    let r: f64 = rng.gen();
                    if n_spans > 0 && r < config.boilerplate_fraction {
                        let s = rng.gen_range(0..n_spans);
                        for j in 0..BOILER_SPAN_LEN {
                            if tokens.len() >= len {
                                break;
                            }
                            tokens.push(filler_base + (s * BOILER_SPAN_LEN + j) as u32);
                        }
                    } else if r < config.boilerplate_fraction
                        + (1.0 - config.boilerplate_fraction) * PROFILE_SHARE
                    {
                        let t = profile_tokens[rng.gen_range(0..profile_tokens.len())];
                        tokens.push(t);
                        if rng.gen::<f64>() < ECHO_PROB && tokens.len() + 2 <= len {
                            tokens.push(style[rng.gen_range(0..style.len())]);
                            tokens.push(t);
                        }
                        let code = (t - RESERVED) as usize;
                        if phrase_region > 0
                            && code >= PHRASE_MIN_RANK
                            && rng.gen::<f64>() < PHRASE_PROB
                        {
                            let slot = code - PHRASE_MIN_RANK;
                            for j in 0..PHRASE_LEN {
                                if tokens.len() >= len {
                                    break;
                                }
                                tokens.push(
                                    phrase_base + ((slot * PHRASE_LEN + j) % phrase_region) as u32,
                                );
                            }
                        }
                    } else {
                        tokens.push(style[rng.gen_range(0..style.len())]);
                    }
                }
                tokens.truncate(body_len);
                for (j, &h) in header.iter().take(header_len).enumerate() {
                    tokens.insert(header_at + j, h);
                }
                notes.push(Note {
                    note_id: format!("{patient_id}A{a:02}N{nn:02}"),
                    tokens,
                });
            }
            admissions.push(Admission {
                admission_id: format!("{patient_id}A{a:02}"),
                notes,
            });
        }
        patients.push(Patient {
            patient_id,
            profile,
            admissions,
        });
    }

    let mut corpus = Corpus {
        patients,
        vocab,
        code_universe,
    };
    if config.umm_mode {
        corpus = flatten_notes_to_admissions(corpus);
    }
    Ok(corpus)
}

/// Re-homes every note into its own admission (the record-per-admission
/// corpus style). Group attacks at admission level then see singleton groups.
pub fn flatten_notes_to_admissions(corpus: Corpus) -> Corpus {
    let patients = corpus
        .patients
        .into_iter()
        .map(|p| {
            let admissions = p
                .admissions
                .into_iter()
                .flat_map(|a| a.notes)
                .map(|n| Admission {
                    admission_id: format!("{}-adm", n.note_id),
                    notes: vec![n],
                })
                .collect();
            Patient { admissions, ..p }
        })
        .collect();
    Corpus { patients, ..corpus }
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_notes(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.admissions)
            .map(|a| a.notes.len())
            .sum()
    }

    pub fn n_admissions(&self) -> usize {
        self.patients.iter().map(|p| p.admissions.len()).sum()
    }

    pub fn n_tokens(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.admissions)
            .flat_map(|a| &a.notes)
            .map(|n| n.tokens.len())
            .sum()
    }

    /// The sub-corpus restricted to the given patients (order preserved).
    pub fn subset(&self, patient_ids: &BTreeSet<String>) -> Corpus {
        Corpus {
            patients: self
                .patients
                .iter()
                .filter(|p| patient_ids.contains(&p.patient_id))
                .cloned()
                .collect(),
            vocab: self.vocab.clone(),
            code_universe: self.code_universe.clone(),
        }
    }

    /// Serializes to JSONL, one object per note. Deterministic line order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.patients {
            let codes: Vec<&String> = p.profile.iter().collect();
            for a in &p.admissions {
                for n in &a.notes {
                    let rec = serde_json::json!({
                        "patient_id": p.patient_id,
                        "admission_id": a.admission_id,
                        "note_id": n.note_id,
                        "tokens": n.tokens,
                        "codes": codes,
                    });
                    out.push_str(&rec.to_string());
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Writes `corpus.jsonl` and `vocab.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("corpus.jsonl"), self.to_jsonl())?;
        let vocab = serde_json::json!({ "tokens": self.vocab });
        fs::write(dir.join("vocab.json"), format!("{vocab:#}\n"))?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    patient_id: String,
    admission_id: String,
    note_id: String,
    #[serde(default)]
    tokens: Option<Vec<u32>>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    codes: Vec<String>,
}

/// Reads a JSONL corpus (one object per note). Raw `text` records are
/// tokenized with the closed-vocabulary whitespace tokenizer against the
/// adjacent `vocab.json`; unknown tokens map to UNK.
pub fn ingest_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);

    let vocab_path = path.parent().map(|d| d.join("vocab.json"));
    let vocab: Option<Vec<String>> = match vocab_path {
        Some(ref vp) if vp.exists() => {
            let raw = fs::read_to_string(vp)?;
            let v: serde_json::Value =
                serde_json::from_str(&raw).map_err(|e| CorpusError::MalformedLine {
                    line: 0,
                    msg: format!("vocab.json: {e}"),
                })?;
            let tokens = v.get("tokens").and_then(|t| t.as_array()).ok_or_else(|| {
                CorpusError::MalformedLine {
                    line: 0,
                    msg: "vocab.json missing \"tokens\" array".into(),
                }
            })?;
            Some(
                tokens
                    .iter()
                    .map(|t| t.as_str().unwrap_or_default().to_string())
                    .collect(),
            )
        }
        _ => None,
    };
    let token_ids: Option<BTreeMap<&str, u32>> = vocab.as_ref().map(|v| {
        v.iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect()
    });

    // patient order of first appearance; admissions/notes likewise.
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: BTreeMap<String, Patient> = BTreeMap::new();
    let mut max_token: u32 = RESERVED;
    let mut n_lines = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        n_lines += 1;
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: lineno,
                msg: e.to_string(),
            })?;
        let tokens = match (&rec.tokens, &rec.text) {
            (Some(t), _) => {
                if let Some(&bad) = t.iter().find(|&&x| x == PAD || x == MASK) {
                    return Err(CorpusError::MalformedLine {
                        line: lineno,
                        msg: format!("reserved token id {bad} inside note tokens"),
                    });
                }
                t.clone()
            }
            (None, Some(text)) => {
                let ids = token_ids.as_ref().ok_or(CorpusError::MissingVocab)?;
                text.split_whitespace()
                    .map(|w| ids.get(w).copied().unwrap_or(UNK))
                    .collect()
            }
            (None, None) => {
                return Err(CorpusError::MalformedLine {
                    line: lineno,
                    msg: "record has neither \"tokens\" nor \"text\"".into(),
                })
            }
        };
        if tokens.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: lineno,
                msg: "empty note".into(),
            });
        }
        max_token = max_token.max(tokens.iter().copied().max().unwrap_or(0) + 1);

        let patient = by_patient.entry(rec.patient_id.clone()).or_insert_with(|| {
            order.push(rec.patient_id.clone());
            Patient {
                patient_id: rec.patient_id.clone(),
                profile: BTreeSet::new(),
                admissions: Vec::new(),
            }
        });
        patient.profile.extend(rec.codes.iter().cloned());
        if patient
            .admissions
            .iter()
            .flat_map(|a| &a.notes)
            .any(|n| n.note_id == rec.note_id)
        {
            return Err(CorpusError::DuplicateNote {
                line: lineno,
                note_id: rec.note_id,
                patient_id: rec.patient_id,
            });
        }
        let adm = match patient
            .admissions
            .iter_mut()
            .find(|a| a.admission_id == rec.admission_id)
        {
            Some(a) => a,
            None => {
                patient.admissions.push(Admission {
                    admission_id: rec.admission_id.clone(),
                    notes: Vec::new(),
                });
                patient.admissions.last_mut().unwrap()
            }
        };
        adm.notes.push(Note {
            note_id: rec.note_id,
            tokens,
        });
    }
    if n_lines == 0 {
        return Err(CorpusError::Empty(path.display().to_string()));
    }

    let patients: Vec<Patient> = order
        .into_iter()
        .map(|id| by_patient.remove(&id).unwrap())
        .collect();
    let code_universe: Vec<String> = patients
        .iter()
        .flat_map(|p| p.profile.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vocab = vocab.unwrap_or_else(|| {
        let mut v = vec!["<pad>".into(), "<unk>".into(), "<mask>".into()];
        v.extend((RESERVED..max_token).map(|i| format!("t{i}")));
        v
    });
    Ok(Corpus {
        patients,
        vocab,
        code_universe,
    })
}

/// Patient-disjoint split; `|train|` is `round(ratio * n)` clamped to keep
/// both sides non-empty. Deterministic given `seed`.
pub fn split_by_patient(
    corpus: &Corpus,
    ratio: f64,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = corpus.patients.len();
    if n < 2 {
        return Err(CorpusError::TooSmall);
    }
    let mut ids: Vec<&String> = corpus.patients.iter().map(|p| &p.patient_id).collect();
    ids.sort();
    let mut rng = substream(seed, "split", 0, 0);
    ids.shuffle(&mut rng);
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    Ok(CorpusSplit {
        train_patients: ids[..n_train].iter().map(|s| s.to_string()).collect(),
        test_patients: ids[n_train..].iter().map(|s| s.to_string()).collect(),
        seed,
        ratio,
    })
}

/// Chunks every note into consecutive non-overlapping windows of `seq_len`
/// tokens; the final short chunk is PAD-padded. Samples inherit group keys
/// and the membership side.
pub fn make_samples(corpus: &Corpus, seq_len: usize, side: Side) -> Vec<Sample> {
    assert!(seq_len >= 2, "seq_len must be >= 2");
    let mut out = Vec::new();
    for p in &corpus.patients {
        for a in &p.admissions {
            for n in &a.notes {
                for (ci, chunk) in n.tokens.chunks(seq_len).enumerate() {
                    let mut tokens = chunk.to_vec();
                    tokens.resize(seq_len, PAD);
                    out.push(Sample {
                        sample_id: format!("{}#{}", n.note_id, ci),
                        patient_id: p.patient_id.clone(),
                        admission_id: a.admission_id.clone(),
                        note_id: n.note_id.clone(),
                        tokens,
                        side,
                    });
                }
            }
        }
    }
    out
}

/// Caps every patient at `k` samples, selected uniformly without replacement
/// per patient (deterministic given `seed`; per-patient streams keyed by the
/// patient id so the selection is independent of list order).
pub fn cap_patient_samples(samples: &[Sample], k: usize, seed: u64) -> Vec<Sample> {
    assert!(k >= 1, "cap must be >= 1");
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_patient.entry(&s.patient_id).or_default().push(i);
    }
    let mut keep = vec![true; samples.len()];
    for (pid, idxs) in &by_patient {
        if idxs.len() <= k {
            continue;
        }
        let mut rng = substream(seed, "cap", fnv1a64(pid.as_bytes()), 0);
        let chosen = rand::seq::index::sample(&mut rng, idxs.len(), k);
        let chosen: BTreeSet<usize> = chosen.into_iter().collect();
        for (j, &i) in idxs.iter().enumerate() {
            keep[i] = chosen.contains(&j);
        }
    }
    samples
        .iter()
        .zip(&keep)
        .filter(|(_, &kp)| kp)
        .map(|(s, _)| s.clone())
        .collect()
}

/// MLE per-code probability over the corpus's code universe.
pub fn code_probability_mle(corpus: &Corpus) -> Result<DiseaseStats, CorpusError> {
    let total = corpus.patients.len();
    if total == 0 {
        return Err(CorpusError::NoPatients);
    }
    let mut counts: BTreeMap<String, usize> = corpus
        .code_universe
        .iter()
        .map(|c| (c.clone(), 0))
        .collect();
    for p in &corpus.patients {
        for c in &p.profile {
            *counts.entry(c.clone()).or_insert(0) += 1;
        }
    }
    Ok(DiseaseStats {
        total_patients: total,
        per_code_prob: counts
            .into_iter()
            .map(|(c, n)| (c, n as f64 / total as f64))
            .collect(),
    })
}

/// Independence-model probability of a profile:
/// Π_{c ∈ profile} p(c) · Π_{c ∉ profile} (1 − p(c)), computed in log space.
pub fn profile_probability(
    profile: &BTreeSet<String>,
    stats: &DiseaseStats,
) -> Result<ProfileProbability, CorpusError> {
    for c in profile {
        if !stats.per_code_prob.contains_key(c) {
            return Err(CorpusError::UnknownCode(c.clone()));
        }
    }
    let mut log_prob = 0.0f64;
    for (c, &p) in &stats.per_code_prob {
        if profile.contains(c) {
            log_prob += p.ln();
        } else {
            log_prob += (-p).ln_1p();
        }
    }
    Ok(ProfileProbability {
        prob: log_prob.exp(),
        log_prob,
    })
}

/// Buckets patients by min-max-normalized log-probability into `n_buckets`
/// equal-width intervals (last interval closed); buckets with fewer than
/// `min_size` patients are discarded. If every patient shares one
/// log-probability, a single bucket holding everyone is returned.
pub fn bucket_by_log_probability(
    patients: &[Patient],
    stats: &DiseaseStats,
    n_buckets: usize,
    min_size: usize,
) -> Result<Vec<RarityBucket>, CorpusError> {
    assert!(n_buckets >= 1, "n_buckets must be >= 1");
    if patients.is_empty() {
        return Err(CorpusError::NoPatients);
    }
    let logps: Vec<f64> = patients
        .iter()
        .map(|p| profile_probability(&p.profile, stats).map(|pp| pp.log_prob))
        .collect::<Result<_, _>>()?;
    let lo = logps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(vec![RarityBucket {
            bucket_index: 0,
            log_prob_lo: lo,
            log_prob_hi: hi,
            member_patient_ids: patients.iter().map(|p| p.patient_id.clone()).collect(),
        }]);
    }
    let width = hi - lo;
    let mut members: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_buckets];
    for (p, &lp) in patients.iter().zip(&logps) {
        let norm = (lp - lo) / width;
        let idx = ((norm * n_buckets as f64).floor() as usize).min(n_buckets - 1);
        members[idx].insert(p.patient_id.clone());
    }
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.len() >= min_size)
        .map(|(i, m)| RarityBucket {
            bucket_index: i,
            log_prob_lo: lo + width * i as f64 / n_buckets as f64,
            log_prob_hi: lo + width * (i + 1) as f64 / n_buckets as f64,
            member_patient_ids: m,
        })
        .collect())
}
