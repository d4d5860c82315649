//! Style-shift simulation for training.
//!
//! Each batch sample gets one uniformly chosen bank basis and is
//! restylized to it, producing a shifted copy with the same content.
//! The content consistency loss then asks every shifted sample to be
//! closest (in whole-tensor cosine) to its own original, InfoNCE-style
//! over the batch.

use crate::bank::{cos_guarded, StyleBasisBank, TapeBank};
use crate::diff::{DiffError, Tape, Var};
use crate::style::{mine_style, restylize, tape_mine, tape_restylize, FeatureMap, StyleError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DsssError {
    #[error("cannot reassemble an empty batch")]
    EmptyBatch,
    #[error("features hold non-finite values")]
    NonFinite,
    #[error(transparent)]
    Style(#[from] StyleError),
}

/// A batch and its style-shifted copy.
#[derive(Clone, Debug)]
pub struct ReassembledBatch {
    pub originals: Vec<FeatureMap>,
    pub reassembled: Vec<FeatureMap>,
    /// Which basis each sample was shifted to; entries in `[0, N)`.
    pub chosen_basis: Vec<usize>,
}

/// Draw one uniform basis index per sample. Sample `i`'s draw comes from
/// its own derived stream, so the choice for a given `(seed, i)` never
/// depends on batch size or neighbors.
pub fn choose_bases(m: usize, n: usize, seed: u64) -> Vec<usize> {
    (0..m)
        .map(|i| {
            let mut rng =
                crate::rng::derive(seed, crate::rng::Stream::Reassembly, i as u64, 0);
            rng.gen_range(0..n)
        })
        .collect()
}

/// Shift every sample to one uniformly chosen basis. Deterministic per
/// seed.
pub fn reassemble_batch(
    feats: &[FeatureMap],
    bank: &StyleBasisBank,
    seed: u64,
) -> Result<ReassembledBatch, DsssError> {
    if feats.is_empty() {
        return Err(DsssError::EmptyBatch);
    }
    let chosen = choose_bases(feats.len(), bank.n, seed);
    let sigma_eff = bank.effective_sigma();
    let mut reassembled = Vec::with_capacity(feats.len());
    for (f, &b) in feats.iter().zip(&chosen) {
        let own = mine_style(f)?;
        let target = crate::style::StyleStats {
            mu: bank.mu_row(b).to_vec(),
            sigma: sigma_eff[b * bank.c..(b + 1) * bank.c].to_vec(),
        };
        reassembled.push(restylize(f, &own, &target)?);
    }
    Ok(ReassembledBatch { originals: feats.to_vec(), reassembled, chosen_basis: chosen })
}

/// InfoNCE over a similarity matrix laid out row-major with
/// `z[t*m_len + m] = cos(shifted_t, original_m)`:
/// `mean_t( logsumexp_m z[t,·] − z[t,t] )`.
pub fn infonce_from_z(z: &[f64], m_len: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..m_len {
        let row = &z[t * m_len..(t + 1) * m_len];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / m_len as f64
}

/// Content consistency loss of a reassembled batch.
pub fn content_consistency_loss(r: &ReassembledBatch) -> Result<f64, DsssError> {
    let m = r.originals.len();
    if m == 0 {
        return Err(DsssError::EmptyBatch);
    }
    for f in r.originals.iter().chain(&r.reassembled) {
        if f.data.iter().any(|x| !x.is_finite()) {
            return Err(DsssError::NonFinite);
        }
    }
    let mut z = vec![0.0; m * m];
    for t in 0..m {
        for mm in 0..m {
            z[t * m + mm] = cos_guarded(&r.reassembled[t].data, &r.originals[mm].data);
        }
    }
    Ok(infonce_from_z(&z, m))
}

/// Tape-side reassembly of a batch `x [M,C,H,W]` to pre-chosen bases.
/// Gradients flow into both the features and the bank.
pub fn tape_reassemble(
    tape: &mut Tape,
    x: Var,
    bank: &TapeBank,
    chosen: &[usize],
) -> Result<Var, DiffError> {
    let (mu_t, sigma_t) = tape_mine(tape, x)?;
    let tgt_mu = tape.gather_rows(bank.mu, chosen)?;
    let tgt_sigma = tape.gather_rows(bank.sigma_eff, chosen)?;
    tape_restylize(tape, x, mu_t, sigma_t, tgt_mu, tgt_sigma)
}

/// Tape-side content consistency loss between a shifted batch and its
/// originals (both `[M,C,H,W]`).
///
/// When the caller wants the originals treated as fixed targets it
/// re-enters their values as a fresh leaf before calling this; by
/// default gradients flow into both arguments.
pub fn tape_content_consistency(
    tape: &mut Tape,
    reassembled: Var,
    originals: Var,
) -> Result<Var, DiffError> {
    let shape = tape.shape(reassembled).to_vec();
    let m = shape[0];
    let flat_len: usize = shape[1..].iter().product();
    let rf = tape.reshape(reassembled, &[m, flat_len])?;
    let of = tape.reshape(originals, &[m, flat_len])?;
    let z = tape.cosine_matrix(rf, of)?;
    let lse = tape.logsumexp_rows(z)?;
    let diag = tape.take_diag(z)?;
    let gap = tape.sub(lse, diag)?;
    Ok(tape.mean(gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check, Tensor};
    use crate::style::StyleStats;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Content, 3, 4);
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn own_style_bank_is_identity() {
        let f = random_map(6, 4, 4, 1);
        let own = mine_style(&f).unwrap();
        let bank =
            StyleBasisBank::from_styles(&[own.clone(), own.clone(), own]).unwrap();
        let r = reassemble_batch(&[f.clone()], &bank, 99).unwrap();
        for (a, b) in r.reassembled[0].data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_chooses_same_bases() {
        let feats: Vec<FeatureMap> = (0..6).map(|i| random_map(4, 3, 3, i)).collect();
        let bank = StyleBasisBank::init(5, 4, 2).unwrap();
        let a = reassemble_batch(&feats, &bank, 7).unwrap();
        let b = reassemble_batch(&feats, &bank, 7).unwrap();
        assert_eq!(a.chosen_basis, b.chosen_basis);
        let c = reassemble_batch(&feats, &bank, 8).unwrap();
        assert!(a.chosen_basis != c.chosen_basis || a.chosen_basis.len() < 4);
        assert!(a.chosen_basis.iter().all(|&i| i < 5));
    }

    #[test]
    fn basis_choice_is_uniform_within_binomial_bounds() {
        let n = 4usize;
        let draws = 20_000usize;
        let chosen = choose_bases(draws, n, 1234);
        let mut counts = [0usize; 4];
        for &b in &chosen {
            counts[b] += 1;
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &cnt) in counts.iter().enumerate() {
            assert!(
                (cnt as f64 - mean).abs() <= 3.0 * sd,
                "basis {i} drawn {cnt} times, expected {mean:.0} ± {:.0}",
                3.0 * sd
            );
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let bank = StyleBasisBank::init(3, 4, 1).unwrap();
        assert!(matches!(reassemble_batch(&[], &bank, 1), Err(DsssError::EmptyBatch)));
    }

    #[test]
    fn singleton_batch_loss_is_exactly_zero() {
        let f = random_map(4, 3, 3, 5);
        let r = ReassembledBatch {
            originals: vec![f.clone()],
            reassembled: vec![f],
            chosen_basis: vec![0],
        };
        assert_eq!(content_consistency_loss(&r).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_pair_hits_frozen_value() {
        // disjoint supports → flattened maps exactly orthogonal; each
        // shifted copy equals its original, so z = [[1,0],[0,1]]
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        for i in 0..8 {
            a[i] = (i + 1) as f64;
            b[8 + i] = -((i + 2) as f64);
        }
        let fa = FeatureMap::new(4, 2, 2, a).unwrap();
        let fb = FeatureMap::new(4, 2, 2, b).unwrap();
        let r = ReassembledBatch {
            originals: vec![fa.clone(), fb.clone()],
            reassembled: vec![fa, fb],
            chosen_basis: vec![0, 1],
        };
        let loss = content_consistency_loss(&r).unwrap();
        assert!((loss - 0.31326168751822286).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn random_batch_matches_double_loop_oracle() {
        let originals: Vec<FeatureMap> = (0..4).map(|i| random_map(4, 3, 3, 10 + i)).collect();
        let bank = StyleBasisBank::init(3, 4, 11).unwrap();
        let r = reassemble_batch(&originals, &bank, 12).unwrap();
        let got = content_consistency_loss(&r).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::EPS);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::EPS);
            dot / (na * nb)
        };
        let mut total = 0.0;
        for t in 0..4 {
            let mut denom = 0.0;
            for m in 0..4 {
                denom += cos(&r.reassembled[t].data, &r.originals[m].data).exp();
            }
            let num = cos(&r.reassembled[t].data, &r.originals[t].data).exp();
            total += -(num / denom).ln();
        }
        assert!((got - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn raising_a_diagonal_entry_lowers_the_loss() {
        let mut z = vec![0.9, 0.1, -0.3, 0.2, 0.5, 0.0, -0.1, 0.4, 0.6];
        let before = infonce_from_z(&z, 3);
        z[4] += 0.05; // z[1,1]
        let after = infonce_from_z(&z, 3);
        assert!(after < before);
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let mut f = random_map(4, 3, 3, 20);
        f.data[0] = f64::NAN;
        let g = random_map(4, 3, 3, 21);
        let r = ReassembledBatch {
            originals: vec![g.clone()],
            reassembled: vec![f],
            chosen_basis: vec![0],
        };
        assert!(matches!(content_consistency_loss(&r), Err(DsssError::NonFinite)));
    }

    #[test]
    fn tape_path_matches_eager_and_passes_finite_differences() {
        let feats: Vec<FeatureMap> = (0..3).map(|i| random_map(4, 3, 3, 30 + i)).collect();
        let bank = StyleBasisBank::init(3, 4, 31).unwrap();
        let r = reassemble_batch(&feats, &bank, 32).unwrap();
        let eager = content_consistency_loss(&r).unwrap();

        let mut data = Vec::new();
        for f in &feats {
            data.extend_from_slice(&f.data);
        }
        let x = Tensor::new(&[3, 4, 3, 3], data);
        let mu = Tensor::new(&[3, 4], bank.mu.clone());
        let raw = Tensor::new(&[3, 4], bank.sigma_raw.clone());
        let chosen = r.chosen_basis.clone();

        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let muv = tape.input(&mu);
        let rawv = tape.input(&raw);
        let sig = tape.softplus(rawv);
        let tb = TapeBank { mu: muv, sigma_raw: rawv, sigma_eff: sig };
        let shifted = tape_reassemble(&mut tape, xv, &tb, &chosen).unwrap();
        let loss = tape_content_consistency(&mut tape, shifted, xv).unwrap();
        assert!((tape.value(loss)[0] - eager).abs() < 1e-12);

        finite_diff_check(
            |t, v| {
                let sig = t.softplus(v[2]);
                let tb = TapeBank { mu: v[1], sigma_raw: v[2], sigma_eff: sig };
                let shifted = tape_reassemble(t, v[0], &tb, &chosen)?;
                tape_content_consistency(t, shifted, v[0])
            },
            &[x, mu, raw],
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn reassembled_style_matches_chosen_basis() {
        let feats: Vec<FeatureMap> = (0..4).map(|i| random_map(5, 4, 4, 40 + i)).collect();
        let bank = StyleBasisBank::init(6, 5, 41).unwrap();
        let sigma_eff = bank.effective_sigma();
        let r = reassemble_batch(&feats, &bank, 42).unwrap();
        for (f, &b) in r.reassembled.iter().zip(&r.chosen_basis) {
            let StyleStats { mu, sigma } = mine_style(f).unwrap();
            for j in 0..5 {
                assert!((mu[j] - bank.mu[b * 5 + j]).abs() < 1e-6);
                assert!((sigma[j] - sigma_eff[b * 5 + j]).abs() < 1e-6);
            }
        }
    }
}
