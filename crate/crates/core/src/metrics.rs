//! Binary anti-spoofing metrics.
//!
//! Scores are "liveness" scores: higher means more live. Live is the
//! positive class. A sample is accepted (called live) when its score is
//! **≥** the threshold.
//!
//! * FAR — false acceptance rate: fraction of spoof samples accepted.
//! * FRR — false rejection rate: fraction of live samples rejected.
//! * EER — the operating point where FAR and FRR meet; searched over
//!   every achievable cut between sorted scores.
//! * HTER — `(FAR + FRR) / 2` at a given threshold.
//! * AUC — Mann–Whitney: probability a random live sample outscores a
//!   random spoof sample, ties counting one half.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least one score from each class (live: {live}, spoof: {spoof})")]
    SingleClass { live: usize, spoof: usize },
    #[error("scores contain a non-finite value")]
    NonFinite,
}

fn validate(live: &[f64], spoof: &[f64]) -> Result<(), MetricsError> {
    if live.is_empty() || spoof.is_empty() {
        return Err(MetricsError::SingleClass { live: live.len(), spoof: spoof.len() });
    }
    if live.iter().chain(spoof).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// FAR and FRR at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRates {
    pub far: f64,
    pub frr: f64,
}

/// The equal-error operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR under the `score ≥ threshold ⇒ live` rule.
pub fn error_rates(live: &[f64], spoof: &[f64], threshold: f64) -> Result<ErrorRates, MetricsError> {
    validate(live, spoof)?;
    if !threshold.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let far = spoof.iter().filter(|&&s| s >= threshold).count() as f64 / spoof.len() as f64;
    let frr = live.iter().filter(|&&s| s < threshold).count() as f64 / live.len() as f64;
    Ok(ErrorRates { far, frr })
}

/// Find the threshold minimizing `|FAR - FRR|`.
///
/// Candidates are the midpoints between adjacent distinct score values
/// plus one cut below the minimum (accept everything) and one above
/// the maximum (reject everything) — together these realize every
/// achievable confusion outcome. Ties on `|FAR - FRR|` resolve to the
/// lowest threshold.
pub fn eer_threshold(live: &[f64], spoof: &[f64]) -> Result<EerPoint, MetricsError> {
    validate(live, spoof)?;
    let mut scores: Vec<f64> = live.iter().chain(spoof).cloned().collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();

    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores[0] - 1.0);
    for pair in scores.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(scores[scores.len() - 1] + 1.0);

    let mut best: Option<EerPoint> = None;
    for &t in &candidates {
        let r = error_rates(live, spoof, t)?;
        let gap = (r.far - r.frr).abs();
        let better = match &best {
            None => true,
            Some(b) => gap < (b.far - b.frr).abs() - 1e-15,
        };
        if better {
            best = Some(EerPoint { threshold: t, far: r.far, frr: r.frr });
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

/// `(FAR + FRR) / 2` at the given threshold.
pub fn hter(live: &[f64], spoof: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    let r = error_rates(live, spoof, threshold)?;
    Ok(0.5 * (r.far + r.frr))
}

/// HTER evaluated at the equal-error threshold.
pub fn hter_at_eer(live: &[f64], spoof: &[f64]) -> Result<f64, MetricsError> {
    let p = eer_threshold(live, spoof)?;
    Ok(0.5 * (p.far + p.frr))
}

/// Area under the ROC curve by the averaged-rank Mann–Whitney
/// statistic: `O(n log n)`, ties contribute one half.
pub fn auc(live: &[f64], spoof: &[f64]) -> Result<f64, MetricsError> {
    validate(live, spoof)?;
    let nl = live.len();
    let ns = spoof.len();
    let mut all: Vec<(f64, bool)> = live
        .iter()
        .map(|&s| (s, true))
        .chain(spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // average 1-based ranks over tie groups, accumulate live ranks
    let mut rank_sum_live = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_live += avg_rank;
            }
        }
        i = j;
    }
    Ok((rank_sum_live - nl as f64 * (nl as f64 + 1.0) / 2.0) / (nl as f64 * ns as f64))
}
