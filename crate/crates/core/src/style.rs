//! Style mining and restylization.
//!
//! A feature map's *style* is its per-channel first and second moment:
//! `μ[c]` is the spatial mean and `σ[c] = sqrt(var[c] + ε)` the guarded
//! spatial standard deviation (population variance, divide by H·W).
//! Restylization normalizes each channel by its own statistics and
//! rescales/shifts it to a target style — the content (the normalized
//! spatial pattern) is preserved, the style is replaced.

use crate::diff::{DiffError, Tape, Var};
use crate::EPS;
use thiserror::Error;

/// A single C×H×W activation tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("feature map contains a non-finite value")]
    NonFinite,
    #[error("channel count mismatch: feature map has {feature}, style has {style}")]
    ChannelMismatch { feature: usize, style: usize },
    #[error("target sigma[{index}] = {value} is negative; standard deviations must be ≥ 0")]
    NegativeSigma { index: usize, value: f64 },
    #[error("empty feature map: C, H, W must all be ≥ 1")]
    EmptyMap,
}

impl FeatureMap {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, StyleError> {
        if c == 0 || h == 0 || w == 0 {
            return Err(StyleError::EmptyMap);
        }
        assert_eq!(data.len(), c * h * w, "data length must equal C·H·W");
        Ok(FeatureMap { c, h, w, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Per-channel (μ, σ) style statistics. `sigma` entries are ≥ 0 by
/// construction everywhere this library produces them.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Mine the per-channel style of a feature map.
///
/// `mu[c]` is the spatial mean and `sigma[c] = sqrt(pop_var[c] + ε)`;
/// the ε guard sits inside the square root so σ stays smooth (and
/// strictly positive) even on constant channels.
pub fn mine_style(f: &FeatureMap) -> Result<StyleStats, StyleError> {
    if f.data.iter().any(|x| !x.is_finite()) {
        return Err(StyleError::NonFinite);
    }
    let hw = (f.h * f.w) as f64;
    let mut mu = Vec::with_capacity(f.c);
    let mut sigma = Vec::with_capacity(f.c);
    for c in 0..f.c {
        let plane = f.channel(c);
        let m = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw;
        mu.push(m);
        sigma.push((var + EPS).sqrt());
    }
    Ok(StyleStats { mu, sigma })
}

/// Replace a feature map's style: `out = σ_tgt·(f − μ_src)/σ_src + μ_tgt`
/// per channel. `source` must be the mined style of `f` (caller-supplied
/// to avoid recomputation); the output's mined style then equals `target`
/// up to the ε guards.
pub fn restylize(
    f: &FeatureMap,
    source: &StyleStats,
    target: &StyleStats,
) -> Result<FeatureMap, StyleError> {
    for stats in [source, target] {
        if stats.mu.len() != f.c || stats.sigma.len() != f.c {
            return Err(StyleError::ChannelMismatch {
                feature: f.c,
                style: stats.mu.len().min(stats.sigma.len()),
            });
        }
    }
    if let Some((i, &v)) = target.sigma.iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(StyleError::NegativeSigma { index: i, value: v });
    }
    let hw = f.h * f.w;
    let mut data = vec![0.0; f.data.len()];
    for c in 0..f.c {
        let scale = target.sigma[c] / source.sigma[c];
        let (m_src, m_tgt) = (source.mu[c], target.mu[c]);
        for i in 0..hw {
            data[c * hw + i] = scale * (f.data[c * hw + i] - m_src) + m_tgt;
        }
    }
    Ok(FeatureMap { c: f.c, h: f.h, w: f.w, data })
}

/// Tape-side style mining over a batch: `x [M,C,H,W]` → `(μ [M,C], σ [M,C])`.
/// Same arithmetic as [`mine_style`], recorded for gradients.
pub fn tape_mine(tape: &mut Tape, x: Var) -> Result<(Var, Var), DiffError> {
    let (h, w) = {
        let s = tape.shape(x);
        (s[2], s[3])
    };
    let mu = tape.channel_mean(x)?;
    let mu_b = tape.bcast_spatial(mu, h, w)?;
    let centered = tape.sub(x, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.channel_mean(sq)?;
    let var_eps = tape.add_scalar(var, EPS);
    let sigma = tape.sqrt(var_eps);
    Ok((mu, sigma))
}

/// Tape-side restylization over a batch. All style arguments are `[M,C]`.
pub fn tape_restylize(
    tape: &mut Tape,
    x: Var,
    src_mu: Var,
    src_sigma: Var,
    tgt_mu: Var,
    tgt_sigma: Var,
) -> Result<Var, DiffError> {
    let (h, w) = {
        let s = tape.shape(x);
        (s[2], s[3])
    };
    let mu_b = tape.bcast_spatial(src_mu, h, w)?;
    let sig_b = tape.bcast_spatial(src_sigma, h, w)?;
    let tmu_b = tape.bcast_spatial(tgt_mu, h, w)?;
    let tsig_b = tape.bcast_spatial(tgt_sigma, h, w)?;
    let centered = tape.sub(x, mu_b)?;
    let normed = tape.div(centered, sig_b)?;
    let scaled = tape.mul(normed, tsig_b)?;
    tape.add(scaled, tmu_b)
}
