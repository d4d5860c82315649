//! Test-time style projection.
//!
//! A test sample's mined style is compared against every bank basis by
//! summed cosine similarity, the similarities are softmaxed into convex
//! weights, and the weighted combination of bases becomes the projected
//! style the feature map is restylized to. Inference never mutates the
//! bank or any parameter.

use crate::bank::{cos_guarded, StyleBasisBank, TapeBank};
use crate::diff::{DiffError, Tape, Var};
use crate::style::{
    mine_style, restylize, tape_restylize, FeatureMap, StyleError, StyleStats,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TtspError {
    #[error("style has {style} channels but bank has {bank}")]
    ChannelMismatch { style: usize, bank: usize },
    #[error("weights cover {weights} bases but bank has {bank}")]
    WeightMismatch { weights: usize, bank: usize },
    #[error("softmax temperature must be positive and finite (got {0})")]
    BadTemperature(f64),
    #[error(transparent)]
    Style(#[from] StyleError),
}

/// Which vectors the second similarity term compares.
///
/// The deviation-vs-deviation form is the default; the deviation-vs-mean
/// form is kept selectable for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityVariant {
    /// d_n = cos(μ_t, μ_b^n) + cos(σ_t, σ_b^n)
    SigmaSigma,
    /// d_n = cos(μ_t, μ_b^n) + cos(σ_t, μ_b^n)
    SigmaMu,
}

/// Per-basis similarities and their softmax weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    /// Summed cosine similarity per basis; each entry in [−2, 2].
    pub d: Vec<f64>,
    /// softmax(d / temperature); strictly positive, sums to 1.
    pub w: Vec<f64>,
}

/// Score every basis against a mined style and softmax into weights.
pub fn similarity_weights(
    style: &StyleStats,
    bank: &StyleBasisBank,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<ProjectionWeights, TtspError> {
    if style.mu.len() != bank.c {
        return Err(TtspError::ChannelMismatch { style: style.mu.len(), bank: bank.c });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(TtspError::BadTemperature(temperature));
    }
    let sigma_eff = bank.effective_sigma();
    let mut d = Vec::with_capacity(bank.n);
    for nidx in 0..bank.n {
        let mu_b = bank.mu_row(nidx);
        let second = match variant {
            SimilarityVariant::SigmaSigma => {
                cos_guarded(&style.sigma, &sigma_eff[nidx * bank.c..(nidx + 1) * bank.c])
            }
            SimilarityVariant::SigmaMu => cos_guarded(&style.sigma, mu_b),
        };
        d.push(cos_guarded(&style.mu, mu_b) + second);
    }
    let w = softmax(&d.iter().map(|x| x / temperature).collect::<Vec<_>>());
    Ok(ProjectionWeights { d, w })
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Convex combination of the bank's bases under the given weights.
pub fn project_style(
    weights: &ProjectionWeights,
    bank: &StyleBasisBank,
) -> Result<StyleStats, TtspError> {
    if weights.w.len() != bank.n {
        return Err(TtspError::WeightMismatch { weights: weights.w.len(), bank: bank.n });
    }
    let sigma_eff = bank.effective_sigma();
    let mut mu = vec![0.0; bank.c];
    let mut sigma = vec![0.0; bank.c];
    for (nidx, &wn) in weights.w.iter().enumerate() {
        for j in 0..bank.c {
            mu[j] += wn * bank.mu[nidx * bank.c + j];
            sigma[j] += wn * sigma_eff[nidx * bank.c + j];
        }
    }
    Ok(StyleStats { mu, sigma })
}

/// Full projection: mine the map's style, weight the bank, restylize.
pub fn project_feature(
    f: &FeatureMap,
    bank: &StyleBasisBank,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<FeatureMap, TtspError> {
    let target = mine_style(f)?;
    let weights = similarity_weights(&target, bank, variant, temperature)?;
    let projected = project_style(&weights, bank)?;
    Ok(restylize(f, &target, &projected)?)
}

/// Tape-side similarity weights for a whole batch: mined batch styles
/// `mu_t`, `sigma_t` are `[M,C]`, output weights are `[M,N]`.
pub fn tape_similarity_weights(
    tape: &mut Tape,
    mu_t: Var,
    sigma_t: Var,
    bank: &TapeBank,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<Var, DiffError> {
    let first = tape.cosine_matrix(mu_t, bank.mu)?;
    let second = match variant {
        SimilarityVariant::SigmaSigma => tape.cosine_matrix(sigma_t, bank.sigma_eff)?,
        SimilarityVariant::SigmaMu => tape.cosine_matrix(sigma_t, bank.mu)?,
    };
    let d = tape.add(first, second)?;
    let scaled = tape.scale(d, 1.0 / temperature);
    tape.softmax_rows(scaled)
}

/// Tape-side projected batch styles: `w [M,N] × bank rows [N,C] → [M,C]`.
pub fn tape_project_style(
    tape: &mut Tape,
    w: Var,
    bank: &TapeBank,
) -> Result<(Var, Var), DiffError> {
    let mu = tape.matmul(w, bank.mu)?;
    let sigma = tape.matmul(w, bank.sigma_eff)?;
    Ok((mu, sigma))
}

/// Tape-side full projection of a batch `x [M,C,H,W]`.
pub fn tape_project_feature(
    tape: &mut Tape,
    x: Var,
    bank: &TapeBank,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<Var, DiffError> {
    let (mu_t, sigma_t) = crate::style::tape_mine(tape, x)?;
    let w = tape_similarity_weights(tape, mu_t, sigma_t, bank, variant, temperature)?;
    let (mu_p, sigma_p) = tape_project_style(tape, w, bank)?;
    tape_restylize(tape, x, mu_t, sigma_t, mu_p, sigma_p)
}

/// How features are restyled on their way to the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Replace the style with the softmax-weighted basis combination.
    Weighted,
    /// Replace the style with the single most similar basis.
    Nearest,
    /// Leave features untouched.
    Off,
}

/// Index of the basis with the highest similarity score; ties resolve
/// to the lowest index.
pub fn nearest_basis(
    style: &StyleStats,
    bank: &StyleBasisBank,
    variant: SimilarityVariant,
) -> Result<usize, TtspError> {
    // temperature is irrelevant to the argmax; any valid value works
    let weights = similarity_weights(style, bank, variant, 1.0)?;
    let mut best = 0;
    for (i, &di) in weights.d.iter().enumerate() {
        if di > weights.d[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Tape-side hard projection: every sample is restyled to its single
/// most similar basis. The selection itself is a constant (gradients
/// flow into the chosen rows, not the choice).
pub fn tape_project_feature_nearest(
    tape: &mut Tape,
    x: Var,
    bank: &TapeBank,
    variant: SimilarityVariant,
) -> Result<Var, DiffError> {
    let (mu_t, sigma_t) = crate::style::tape_mine(tape, x)?;
    let first = tape.cosine_matrix(mu_t, bank.mu)?;
    let second = match variant {
        SimilarityVariant::SigmaSigma => tape.cosine_matrix(sigma_t, bank.sigma_eff)?,
        SimilarityVariant::SigmaMu => tape.cosine_matrix(sigma_t, bank.mu)?,
    };
    let d = tape.add(first, second)?;
    let (m, n) = {
        let s = tape.shape(d);
        (s[0], s[1])
    };
    let dv = tape.value(d);
    let mut chosen = Vec::with_capacity(m);
    for row in 0..m {
        let r = &dv[row * n..(row + 1) * n];
        let mut best = 0;
        for (i, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = i;
            }
        }
        chosen.push(best);
    }
    let mu_p = tape.gather_rows(bank.mu, &chosen)?;
    let sigma_p = tape.gather_rows(bank.sigma_eff, &chosen)?;
    tape_restylize(tape, x, mu_t, sigma_t, mu_p, sigma_p)
}

/// Dispatch on the shift mode. `Off` returns the features unchanged.
pub fn tape_shift_features(
    tape: &mut Tape,
    x: Var,
    bank: &TapeBank,
    mode: ShiftMode,
    variant: SimilarityVariant,
    temperature: f64,
) -> Result<Var, DiffError> {
    match mode {
        ShiftMode::Weighted => tape_project_feature(tape, x, bank, variant, temperature),
        ShiftMode::Nearest => tape_project_feature_nearest(tape, x, bank, variant),
        ShiftMode::Off => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check, Tensor};
    use crate::EPS;

    fn toy_bank() -> StyleBasisBank {
        StyleBasisBank::init(4, 8, 21).unwrap()
    }

    fn toy_style(c: usize, seed: u64) -> StyleStats {
        use rand::Rng;
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::BankInit, 9, 9);
        StyleStats {
            mu: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            sigma: (0..c).map(|_| rng.gen_range(0.1..2.0)).collect(),
        }
    }

    #[test]
    fn singleton_bank_gets_weight_one() {
        let bank = StyleBasisBank::init(1, 8, 3).unwrap();
        let pw =
            similarity_weights(&toy_style(8, 1), &bank, SimilarityVariant::SigmaSigma, 1.0)
                .unwrap();
        assert_eq!(pw.w, vec![1.0]);
    }

    #[test]
    fn aligned_style_scores_two() {
        let bank = toy_bank();
        let sigma_eff = bank.effective_sigma();
        let style = StyleStats {
            mu: bank.mu_row(1).iter().map(|x| 3.0 * x).collect(),
            sigma: sigma_eff[8..16].iter().map(|x| 0.5 * x).collect(),
        };
        let pw = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        assert!((pw.d[1] - 2.0).abs() < 1e-12);
        for (i, &dn) in pw.d.iter().enumerate() {
            assert!((-2.0..=2.0).contains(&dn), "d[{i}] = {dn} out of range");
        }
    }

    #[test]
    fn softmax_of_two_zero_matches_closed_form() {
        // softmax([2, 0]) = [e²/(e²+1), 1/(e²+1)]
        let w = softmax(&[2.0, 0.0]);
        assert!((w[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((w[1] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let bank = toy_bank();
        let pw =
            similarity_weights(&toy_style(8, 2), &bank, SimilarityVariant::SigmaSigma, 1.0)
                .unwrap();
        let s: f64 = pw.w.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(pw.w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn degenerate_weights_reproduce_one_basis() {
        let bank = toy_bank();
        let pw = ProjectionWeights { d: vec![0.0; 4], w: vec![0.0, 1.0, 0.0, 0.0] };
        let s = project_style(&pw, &bank).unwrap();
        assert_eq!(s.mu, bank.mu_row(1).to_vec());
        let eff = bank.effective_sigma();
        assert_eq!(s.sigma, eff[8..16].to_vec());
    }

    #[test]
    fn uniform_weights_give_elementwise_midpoint() {
        let bank = StyleBasisBank::init(2, 6, 5).unwrap();
        let pw = ProjectionWeights { d: vec![0.0; 2], w: vec![0.5, 0.5] };
        let s = project_style(&pw, &bank).unwrap();
        let eff = bank.effective_sigma();
        for j in 0..6 {
            assert!((s.mu[j] - 0.5 * (bank.mu[j] + bank.mu[6 + j])).abs() < 1e-15);
            assert!((s.sigma[j] - 0.5 * (eff[j] + eff[6 + j])).abs() < 1e-15);
        }
    }

    #[test]
    fn random_weights_match_weighted_sum_oracle() {
        let bank = toy_bank();
        let raw = [0.4, 1.3, 0.2, 0.9];
        let w = softmax(&raw);
        let pw = ProjectionWeights { d: raw.to_vec(), w: w.clone() };
        let got = project_style(&pw, &bank).unwrap();
        let eff = bank.effective_sigma();
        for j in 0..8 {
            let mut mu = 0.0;
            let mut sg = 0.0;
            for n in 0..4 {
                mu += w[n] * bank.mu[n * 8 + j];
                sg += w[n] * eff[n * 8 + j];
            }
            assert!((got.mu[j] - mu).abs() < 1e-12);
            assert!((got.sigma[j] - sg).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_bank_rows_permutes_weights() {
        let bank = toy_bank();
        let style = toy_style(8, 4);
        let pw = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = bank.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            shuffled.mu[new_i * 8..(new_i + 1) * 8].copy_from_slice(bank.mu_row(old_i));
            shuffled.sigma_raw[new_i * 8..(new_i + 1) * 8]
                .copy_from_slice(&bank.sigma_raw[old_i * 8..(old_i + 1) * 8]);
        }
        let pw2 =
            similarity_weights(&style, &shuffled, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert!((pw2.w[new_i] - pw.w[old_i]).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_rescaling_of_target_changes_nothing() {
        let bank = toy_bank();
        let style = toy_style(8, 6);
        let scaled = StyleStats {
            mu: style.mu.iter().map(|x| 17.0 * x).collect(),
            sigma: style.sigma.clone(),
        };
        let a = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let b = similarity_weights(&scaled, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        for n in 0..4 {
            assert!((a.d[n] - b.d[n]).abs() < 1e-9);
            assert!((a.w[n] - b.w[n]).abs() < 1e-9);
        }
    }

    #[test]
    fn variants_disagree_when_sigma_is_not_aligned_with_mu() {
        let bank = toy_bank();
        let style = toy_style(8, 7);
        let a = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let b = similarity_weights(&style, &bank, SimilarityVariant::SigmaMu, 1.0).unwrap();
        assert!(a.d.iter().zip(&b.d).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn temperature_flattens_weights() {
        let bank = toy_bank();
        let style = toy_style(8, 8);
        let sharp = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 0.1).unwrap();
        let flat = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 10.0).unwrap();
        let spread = |w: &[f64]| {
            w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - w.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        assert!(spread(&sharp.w) > spread(&flat.w));
        assert!(matches!(
            similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 0.0),
            Err(TtspError::BadTemperature(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let bank = toy_bank();
        let style = toy_style(5, 1);
        assert!(matches!(
            similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0),
            Err(TtspError::ChannelMismatch { style: 5, bank: 8 })
        ));
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        use rand::Rng;
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Content, 1, 2);
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn projecting_onto_own_style_is_identity() {
        let f = random_map(8, 5, 5, 10);
        let own = mine_style(&f).unwrap();
        let bank = StyleBasisBank::from_styles(&[own]).unwrap();
        let out = project_feature(&f, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        for (a, b) in f.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_style_is_the_projected_style() {
        let f = random_map(8, 5, 5, 11);
        let bank = toy_bank();
        let out = project_feature(&f, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let target = mine_style(&f).unwrap();
        let pw = similarity_weights(&target, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let projected = project_style(&pw, &bank).unwrap();
        let remined = mine_style(&out).unwrap();
        for j in 0..8 {
            assert!((remined.mu[j] - projected.mu[j]).abs() < 1e-6);
            assert!((remined.sigma[j] - projected.sigma[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn end_to_end_matches_straight_line_oracle() {
        let f = random_map(8, 5, 5, 12);
        let bank = toy_bank();
        let out = project_feature(&f, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();

        // Straight-line re-derivation with plain loops.
        let hw = 25.0;
        let mut mu_t = vec![0.0; 8];
        let mut sg_t = vec![0.0; 8];
        for c in 0..8 {
            let ch = &f.data[c * 25..(c + 1) * 25];
            let m: f64 = ch.iter().sum::<f64>() / hw;
            let v: f64 = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw;
            mu_t[c] = m;
            sg_t[c] = (v + EPS).sqrt();
        }
        let eff = bank.effective_sigma();
        let cosine = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            dot / (na * nb)
        };
        let d: Vec<f64> = (0..4)
            .map(|n| {
                cosine(&mu_t, bank.mu_row(n)) + cosine(&sg_t, &eff[n * 8..(n + 1) * 8])
            })
            .collect();
        let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = d.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let w: Vec<f64> = ex.iter().map(|e| e / z).collect();
        let mut expect = vec![0.0; 200];
        for c in 0..8 {
            let mut mu_p = 0.0;
            let mut sg_p = 0.0;
            for n in 0..4 {
                mu_p += w[n] * bank.mu[n * 8 + c];
                sg_p += w[n] * eff[n * 8 + c];
            }
            for i in 0..25 {
                let x = f.data[c * 25 + i];
                expect[c * 25 + i] = sg_p * (x - mu_t[c]) / sg_t[c] + mu_p;
            }
        }
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_projection_matches_eager_and_passes_finite_differences() {
        let f = random_map(6, 4, 4, 13);
        let bank = StyleBasisBank::init(3, 6, 14).unwrap();
        let eager = project_feature(&f, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();

        let x = Tensor::new(&[1, 6, 4, 4], f.data.clone());
        let mu = Tensor::new(&[3, 6], bank.mu.clone());
        let raw = Tensor::new(&[3, 6], bank.sigma_raw.clone());
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let muv = tape.input(&mu);
        let rawv = tape.input(&raw);
        let sigma_eff = tape.softplus(rawv);
        let tb = TapeBank { mu: muv, sigma_raw: rawv, sigma_eff };
        let out =
            tape_project_feature(&mut tape, xv, &tb, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        for (a, b) in tape.value(out).iter().zip(&eager.data) {
            assert!((a - b).abs() < 1e-12);
        }

        finite_diff_check(
            |t, v| {
                let sigma_eff = t.softplus(v[2]);
                let tb = TapeBank { mu: v[1], sigma_raw: v[2], sigma_eff };
                let out =
                    tape_project_feature(t, v[0], &tb, SimilarityVariant::SigmaSigma, 1.0)?;
                Ok(t.mean(out))
            },
            &[x, mu, raw],
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn inference_leaves_bank_untouched() {
        let f = random_map(8, 5, 5, 15);
        let bank = toy_bank();
        let before = bank.clone();
        let _ = project_feature(&f, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn nearest_basis_is_the_argmax_and_ties_take_lowest_index() {
        let bank = toy_bank();
        let style = toy_style(8, 6);
        let pw = similarity_weights(&style, &bank, SimilarityVariant::SigmaSigma, 1.0).unwrap();
        let mut argmax = 0;
        for (i, &d) in pw.d.iter().enumerate() {
            if d > pw.d[argmax] {
                argmax = i;
            }
        }
        assert_eq!(
            nearest_basis(&style, &bank, SimilarityVariant::SigmaSigma).unwrap(),
            argmax
        );

        // duplicate the winning row below the original: the earlier copy wins
        let mut dup = bank.clone();
        let winner_row = bank.mu_row(argmax).to_vec();
        let winner_raw = bank.sigma_raw[argmax * 8..(argmax + 1) * 8].to_vec();
        for r in 0..4 {
            dup.mu[r * 8..(r + 1) * 8].copy_from_slice(&winner_row);
            dup.sigma_raw[r * 8..(r + 1) * 8].copy_from_slice(&winner_raw);
        }
        assert_eq!(nearest_basis(&style, &dup, SimilarityVariant::SigmaSigma).unwrap(), 0);
    }

    #[test]
    fn nearest_projection_output_carries_the_chosen_basis_style() {
        let f = random_map(8, 5, 5, 16);
        let bank = toy_bank();
        let style = mine_style(&f).unwrap();
        let k = nearest_basis(&style, &bank, SimilarityVariant::SigmaSigma).unwrap();

        let mut tape = Tape::new();
        let xv = tape.input(&Tensor::new(&[1, 8, 5, 5], f.data.clone()));
        let muv = tape.input(&Tensor::new(&[4, 8], bank.mu.clone()));
        let rawv = tape.input(&Tensor::new(&[4, 8], bank.sigma_raw.clone()));
        let sigma_eff = tape.softplus(rawv);
        let tb = TapeBank { mu: muv, sigma_raw: rawv, sigma_eff };
        let out =
            tape_project_feature_nearest(&mut tape, xv, &tb, SimilarityVariant::SigmaSigma)
                .unwrap();

        // eager oracle: restylize straight to basis k
        let eff = bank.effective_sigma();
        let target = StyleStats {
            mu: bank.mu_row(k).to_vec(),
            sigma: eff[k * 8..(k + 1) * 8].to_vec(),
        };
        let expect = restylize(&f, &style, &target).unwrap();
        for (a, b) in tape.value(out).iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }

        // the output's own mined style matches basis k (up to the ε guard)
        let restyled = FeatureMap::new(8, 5, 5, tape.value(out).to_vec()).unwrap();
        let got = mine_style(&restyled).unwrap();
        for c in 0..8 {
            assert!((got.mu[c] - target.mu[c]).abs() < 1e-6);
            assert!((got.sigma[c] - target.sigma[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn nearest_projection_passes_finite_differences() {
        let f = random_map(6, 4, 4, 17);
        let bank = StyleBasisBank::init(3, 6, 18).unwrap();
        let x = Tensor::new(&[1, 6, 4, 4], f.data.clone());
        let mu = Tensor::new(&[3, 6], bank.mu.clone());
        let raw = Tensor::new(&[3, 6], bank.sigma_raw.clone());
        finite_diff_check(
            |t, v| {
                let sigma_eff = t.softplus(v[2]);
                let tb = TapeBank { mu: v[1], sigma_raw: v[2], sigma_eff };
                let out =
                    tape_project_feature_nearest(t, v[0], &tb, SimilarityVariant::SigmaSigma)?;
                Ok(t.mean(out))
            },
            &[x, mu, raw],
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn shift_mode_off_is_the_identity() {
        let f = random_map(8, 5, 5, 19);
        let bank = toy_bank();
        let mut tape = Tape::new();
        let xv = tape.input(&Tensor::new(&[1, 8, 5, 5], f.data.clone()));
        let muv = tape.input(&Tensor::new(&[4, 8], bank.mu.clone()));
        let rawv = tape.input(&Tensor::new(&[4, 8], bank.sigma_raw.clone()));
        let sigma_eff = tape.softplus(rawv);
        let tb = TapeBank { mu: muv, sigma_raw: rawv, sigma_eff };
        let out = tape_shift_features(
            &mut tape,
            xv,
            &tb,
            ShiftMode::Off,
            SimilarityVariant::SigmaSigma,
            1.0,
        )
        .unwrap();
        assert_eq!(out, xv);
        assert_eq!(tape.value(out), f.data.as_slice());
    }
}
