//! Input-conditioned low-rank adaptation with energy-target rank selection.
//!
//! A layer update is parameterised as `ΔW(x) = U · diag(s(x)) · V` over a
//! wide vector bank `(U, V)`. A small router produces the nonnegative scores
//! `s(x)`; only the smallest prefix of score-sorted vectors whose cumulative
//! squared-score energy reaches a target `η` stays active, and a spectral
//! loss `1 − E_k(x)` concentrates energy onto the survivors.
//!
//! Modules:
//! - [`linalg`]: matrices, Jacobi SVD, reverse-mode tape, seeded streams, file formats
//! - [`spectral`]: cumulative energy, truncation and layer rank reports
//! - [`adapter`]: vector bank, router, selection, masked application and losses
//! - [`baselines`]: fixed-rank LoRA and LoRA mixtures of experts
//! - [`harness`]: planted-rank task suites, training, sweeps and ablations

pub mod adapter;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{Matrix, StreamRng};
