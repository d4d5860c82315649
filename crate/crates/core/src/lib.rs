//! Test-time domain generalization for face anti-spoofing, at desk scale.
//!
//! The pipeline has three moving parts:
//!
//! * **Style mining and restylization** ([`style`]): per-channel mean/std
//!   statistics of a feature map, and the AdaIN-style substitution of one
//!   style for another.
//! * **A learnable style-basis bank** ([`bank`]) trained for diversity
//!   ([`dsss`]) so it spans the source style space.
//! * **Test-time style projection** ([`ttsp`]): an unseen sample's style is
//!   replaced by a similarity-weighted combination of the learned bases —
//!   no parameter updates at inference.
//!
//! Everything trains through a small reverse-mode tape ([`diff`]) in `f64`.
//! [`datagen`] builds a synthetic multi-domain benchmark (class signal =
//! texture coherence, domain signal = photometric), [`model`] is a tiny
//! conv pipeline with classification and depth heads, [`metrics`] scores
//! held-out domains (AUC / EER / HTER), and [`harness`] runs the
//! leave-one-domain-out ablation arms.

pub mod bank;
pub mod config;
pub mod datagen;
pub mod diff;
pub mod dsss;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod style;
pub mod ttsp;

/// Guard epsilon: added inside every variance square root and used as the
/// floor of every vector-norm denominator. Degenerate inputs (constant
/// channels, zero vectors) must stay finite.
pub const EPS: f64 = 1e-6;
