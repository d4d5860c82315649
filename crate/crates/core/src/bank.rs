//! The learnable style-basis bank.
//!
//! N bases, each a `(μ_b, σ_b)` pair over C channels. σ is stored as an
//! unconstrained `sigma_raw` with softplus applied at use, so the
//! effective standard deviation stays strictly positive no matter what
//! the optimizer does. The diversity loss pushes distinct rows toward
//! pairwise orthogonality — note that effective sigmas are strictly
//! positive, so their pairwise cosines cannot reach 0 and the loss has a
//! positive floor for N ≥ 2; training reduces it toward that floor.

use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::io::{self, IoError};
use crate::style::StyleStats;
use crate::EPS;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const BANK_MAGIC: &[u8; 8] = b"TTDGBANK";
pub const BANK_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bank dimensions must be ≥ 1 (got N={n}, C={c})")]
    ZeroDim { n: usize, c: usize },
    #[error("style diversity loss needs at least 2 bases (bank has {0})")]
    TooFewBases(usize),
    #[error("bank file holds non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] IoError),
}

/// N learnable style bases over C channels. `mu` and `sigma_raw` are
/// row-major N×C.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBasisBank {
    pub n: usize,
    pub c: usize,
    pub mu: Vec<f64>,
    pub sigma_raw: Vec<f64>,
}

/// softplus⁻¹: the `sigma_raw` that makes the effective sigma equal `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y − 1), stable on both tails
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl StyleBasisBank {
    /// Random bank: μ rows are standard-normal draws scaled to unit norm,
    /// sigma_raw is set so the effective sigma is exactly 1 elementwise.
    pub fn init(n: usize, c: usize, seed: u64) -> Result<Self, BankError> {
        if n == 0 || c == 0 {
            return Err(BankError::ZeroDim { n, c });
        }
        let mut rng: ChaCha8Rng = crate::rng::derive(seed, crate::rng::Stream::BankInit, 0, 0);
        let mut mu = vec![0.0; n * c];
        for row in 0..n {
            loop {
                let r = &mut mu[row * c..(row + 1) * c];
                for x in r.iter_mut() {
                    *x = normal(&mut rng);
                }
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for x in r.iter_mut() {
                        *x /= norm;
                    }
                    break;
                }
            }
        }
        let sigma_raw = vec![softplus_inverse(1.0); n * c];
        Ok(StyleBasisBank { n, c, mu, sigma_raw })
    }

    /// Build a bank whose bases are the given mined styles (used by the
    /// random- and farthest-point-selection evaluation baselines).
    pub fn from_styles(styles: &[StyleStats]) -> Result<Self, BankError> {
        let n = styles.len();
        if n == 0 {
            return Err(BankError::ZeroDim { n, c: 0 });
        }
        let c = styles[0].mu.len();
        let mut mu = Vec::with_capacity(n * c);
        let mut sigma_raw = Vec::with_capacity(n * c);
        for s in styles {
            assert_eq!(s.mu.len(), c, "all styles must share one channel count");
            mu.extend_from_slice(&s.mu);
            sigma_raw.extend(s.sigma.iter().map(|&v| softplus_inverse(v.max(1e-12))));
        }
        Ok(StyleBasisBank { n, c, mu, sigma_raw })
    }

    /// Effective sigmas: softplus(sigma_raw), strictly positive.
    pub fn effective_sigma(&self) -> Vec<f64> {
        self.sigma_raw.iter().map(|&x| crate::diff::softplus(x)).collect()
    }

    pub fn mu_row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.c..(i + 1) * self.c]
    }

    /// Mean pairwise |cos| among μ rows — the diversity diagnostic
    /// reported by training.
    pub fn mean_mu_abs_cos(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.n {
            for k in 0..self.n {
                if i != k {
                    total += cos_guarded(self.mu_row(i), self.mu_row(k)).abs();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        let mut payload = Vec::with_capacity(self.n * self.c * 16);
        io::push_f64s(&mut payload, &self.mu);
        io::push_f64s(&mut payload, &self.sigma_raw);
        io::write_container(
            path,
            BANK_MAGIC,
            BANK_VERSION,
            &[self.n as u32, self.c as u32],
            &payload,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        let (fields, payload) = io::read_container(path, BANK_MAGIC, BANK_VERSION)?;
        if fields.len() != 2 {
            return Err(IoError::Corrupt(format!("bank header has {} fields, want 2", fields.len()))
                .into());
        }
        let (n, c) = (fields[0] as usize, fields[1] as usize);
        if n == 0 || c == 0 {
            return Err(BankError::ZeroDim { n, c });
        }
        let mut off = 0;
        let mu = io::take_f64s(&payload, &mut off, n * c)?;
        let sigma_raw = io::take_f64s(&payload, &mut off, n * c)?;
        if off != payload.len() {
            return Err(IoError::Corrupt(format!(
                "bank payload has {} trailing bytes",
                payload.len() - off
            ))
            .into());
        }
        if mu.iter().chain(&sigma_raw).any(|x| !x.is_finite()) {
            return Err(BankError::NonFinite);
        }
        Ok(StyleBasisBank { n, c, mu, sigma_raw })
    }
}

use crate::rng::standard_normal as normal;

pub(crate) fn cos_guarded(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    dot / (na * nb)
}

/// Style diversity loss: `Σ_i Σ_{k≠i} |cos(μ_i, μ_k)| + |cos(σ_i, σ_k)|`
/// over effective sigmas, every ordered pair counted once per direction.
pub fn style_diversity_loss(bank: &StyleBasisBank) -> Result<f64, BankError> {
    if bank.n < 2 {
        return Err(BankError::TooFewBases(bank.n));
    }
    let sigma = bank.effective_sigma();
    let row = |v: &[f64], i: usize| v[i * bank.c..(i + 1) * bank.c].to_vec();
    let mut total = 0.0;
    for i in 0..bank.n {
        for k in 0..bank.n {
            if i == k {
                continue;
            }
            total += cos_guarded(bank.mu_row(i), bank.mu_row(k)).abs();
            total += cos_guarded(&row(&sigma, i), &row(&sigma, k)).abs();
        }
    }
    Ok(total)
}

/// Bank parameters recorded on a tape for a training step.
pub struct TapeBank {
    pub mu: Var,
    pub sigma_raw: Var,
    /// softplus(sigma_raw), the effective sigma rows `[N,C]`.
    pub sigma_eff: Var,
}

/// Put the bank's parameters on a tape.
pub fn tape_bank(tape: &mut Tape, bank: &StyleBasisBank) -> TapeBank {
    let mu = tape.input(&Tensor::new(&[bank.n, bank.c], bank.mu.clone()));
    let sigma_raw = tape.input(&Tensor::new(&[bank.n, bank.c], bank.sigma_raw.clone()));
    let sigma_eff = tape.softplus(sigma_raw);
    TapeBank { mu, sigma_raw, sigma_eff }
}

/// Tape-side diversity loss; same value as [`style_diversity_loss`],
/// differentiable with respect to both parameter arrays.
///
/// Off-diagonal selection works by subtracting the diagonal's |cos| sum
/// from the full-matrix sum; the diagonal entries' gradients cancel
/// exactly between the two terms, so only distinct pairs contribute.
pub fn tape_style_diversity_loss(tape: &mut Tape, bank: &TapeBank) -> Result<Var, DiffError> {
    let mut parts = Vec::with_capacity(2);
    for rows in [bank.mu, bank.sigma_eff] {
        let cm = tape.cosine_matrix(rows, rows)?;
        let cm_abs = tape.abs(cm);
        let full = tape.sum(cm_abs);
        let diag = tape.take_diag(cm)?;
        let diag_abs = tape.abs(diag);
        let diag_sum = tape.sum(diag_abs);
        parts.push(tape.sub(full, diag_sum)?);
    }
    tape.add(parts[0], parts[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_check;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = StyleBasisBank::init(4, 8, 7).unwrap();
        let b = StyleBasisBank::init(4, 8, 7).unwrap();
        assert_eq!(a, b);
        let c = StyleBasisBank::init(4, 8, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rows_are_unit_norm_with_unit_sigma() {
        let bank = StyleBasisBank::init(5, 12, 3).unwrap();
        for i in 0..5 {
            let norm = bank.mu_row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
        for s in bank.effective_sigma() {
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(StyleBasisBank::init(0, 4, 1), Err(BankError::ZeroDim { .. })));
        assert!(matches!(StyleBasisBank::init(4, 0, 1), Err(BankError::ZeroDim { .. })));
    }

    #[test]
    fn identical_pair_costs_four() {
        let mut bank = StyleBasisBank::init(2, 4, 1).unwrap();
        let row: Vec<f64> = bank.mu_row(0).to_vec();
        bank.mu[4..8].copy_from_slice(&row);
        // sigma rows are identical by construction after init
        let loss = style_diversity_loss(&bank).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_mu_rows_contribute_nothing() {
        let mut bank = StyleBasisBank::init(2, 4, 1).unwrap();
        bank.mu = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let loss = style_diversity_loss(&bank).unwrap();
        // identical sigma rows: |cos| = 1 per direction; mu part = 0
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_positive_row_rescaling() {
        let mut bank = StyleBasisBank::init(4, 6, 9).unwrap();
        let before = style_diversity_loss(&bank).unwrap();
        for x in &mut bank.mu[6..12] {
            *x *= 7.0;
        }
        let after = style_diversity_loss(&bank).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn too_few_bases_is_an_error() {
        let bank = StyleBasisBank::init(1, 4, 1).unwrap();
        assert!(matches!(style_diversity_loss(&bank), Err(BankError::TooFewBases(1))));
    }

    #[test]
    fn tape_loss_matches_eager_loss() {
        let bank = StyleBasisBank::init(4, 8, 42).unwrap();
        let eager = style_diversity_loss(&bank).unwrap();
        let mut tape = Tape::new();
        let tb = tape_bank(&mut tape, &bank);
        let loss = tape_style_diversity_loss(&mut tape, &tb).unwrap();
        assert!((tape.value(loss)[0] - eager).abs() < 1e-12);
    }

    #[test]
    fn diversity_loss_gradient_passes_finite_differences() {
        let bank = StyleBasisBank::init(3, 5, 11).unwrap();
        let mu = Tensor::new(&[3, 5], bank.mu.clone());
        let raw = Tensor::new(&[3, 5], bank.sigma_raw.clone());
        finite_diff_check(
            |t, v| {
                let sigma_eff = t.softplus(v[1]);
                let tb = TapeBank { mu: v[0], sigma_raw: v[1], sigma_eff };
                tape_style_diversity_loss(t, &tb)
            },
            &[mu, raw],
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.ttdg");
        let bank = StyleBasisBank::init(6, 10, 123).unwrap();
        bank.save(&p).unwrap();
        let loaded = StyleBasisBank::load(&p).unwrap();
        assert_eq!(bank, loaded);
    }

    #[test]
    fn truncated_bank_file_fails_with_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.ttdg");
        let bank = StyleBasisBank::init(3, 4, 5).unwrap();
        bank.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(StyleBasisBank::load(&p), Err(BankError::Io(IoError::Corrupt(_)))));
    }

    #[test]
    fn bumped_version_fails_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.ttdg");
        let bank = StyleBasisBank::init(3, 4, 5).unwrap();
        bank.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            StyleBasisBank::load(&p),
            Err(BankError::Io(IoError::VersionMismatch { found: 99, .. }))
        ));
    }

    #[test]
    fn from_styles_preserves_effective_sigma() {
        let styles = vec![
            StyleStats { mu: vec![0.5, -0.25], sigma: vec![1.5, 0.75] },
            StyleStats { mu: vec![1.0, 2.0], sigma: vec![0.33, 2.5] },
        ];
        let bank = StyleBasisBank::from_styles(&styles).unwrap();
        let eff = bank.effective_sigma();
        assert!((eff[0] - 1.5).abs() < 1e-9);
        assert!((eff[3] - 2.5).abs() < 1e-9);
        assert_eq!(&bank.mu[2..4], &[1.0, 2.0]);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((crate::diff::softplus(x) - y).abs() < 1e-9 * y.max(1.0));
        }
    }
}
