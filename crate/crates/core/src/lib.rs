//! Desk-scale privacy auditing for small language models.
//!
//! The crate trains small masked and autoregressive transformer language
//! models on hierarchical synthetic clinical-style corpora — with plain SGD or
//! DP-SGD — and measures empirical privacy leakage with black-box and
//! white-box membership-inference attacks, group-level attacks, Rényi-DP
//! accounting, and disease-rarity analysis.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`corpus`] — synthetic corpus generation, JSONL ingestion,
//!   patient-disjoint splits, fixed-length samples, disease statistics and
//!   rarity buckets.
//! * [`model`] — a small pre-norm transformer with exact analytic gradients
//!   and exposed per-layer, per-head attention matrices.
//! * [`trainer`] — plain SGD and DP-SGD loops (per-sample clipping, Gaussian
//!   noise, Poisson subsampling) with per-epoch checkpoints.
//! * [`accountant`] — Rényi-DP accounting for the subsampled Gaussian
//!   mechanism, (ε, δ) conversion, and group-DP degradation.
//! * [`attacks`] — the membership-inference experiment and the S-BBA, A-BBA,
//!   P-BBA, S-AWBA and S-GWBA attacks.
//! * [`report`] — leakage aggregation, rarity-bucket analysis, correlations,
//!   and CSV/JSON emission.
//!
//! All randomness flows through named, seeded substreams ([`util::substream`])
//! so every pipeline stage is bit-reproducible given its seed.

pub mod accountant;
pub mod attacks;
pub mod corpus;
pub mod model;
pub mod report;
pub mod trainer;
pub mod util;
