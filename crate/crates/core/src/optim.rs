//! Adaptive-moment optimizer over a flat parameter vector.
//!
//! The whole trainable state (backbone, heads, bank) lives in one flat
//! `Vec<f64>`; the moments here are saved into checkpoints so a resumed
//! run continues bit-exactly.

/// Adam with bias correction; no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different vector");
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_shifted_quadratic() {
        let mut p = vec![10.0, -4.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 3.0), 2.0 * (p[1] + 1.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 3.0).abs() < 1e-3);
        assert!((p[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn first_step_size_is_scale_invariant() {
        for scale in [1e-6, 1.0, 1e6] {
            let mut p = vec![0.0];
            let mut opt = Adam::new(1, 1e-3);
            opt.step(&mut p, &[scale]);
            // m̂/√v̂ = sign(g) on the first step, up to eps
            assert!(
                (p[0].abs() - 1e-3).abs() < 1e-3 * 0.02,
                "scale {scale} moved by {}",
                p[0]
            );
            assert!(p[0] < 0.0);
        }
    }

    #[test]
    fn saved_state_resumes_bit_exactly() {
        let grad_at = |p: &[f64]| vec![(p[0] - 1.0).sin() + p[0], p[1] * p[1] - 0.3];
        let mut p_full = vec![2.0, 0.7];
        let mut opt_full = Adam::new(2, 0.01);
        for _ in 0..10 {
            let g = grad_at(&p_full);
            opt_full.step(&mut p_full, &g);
        }

        let mut p_half = vec![2.0, 0.7];
        let mut opt_half = Adam::new(2, 0.01);
        for _ in 0..4 {
            let g = grad_at(&p_half);
            opt_half.step(&mut p_half, &g);
        }
        // snapshot and rebuild, as a checkpoint load would
        let mut resumed = Adam::new(2, 0.01);
        resumed.m = opt_half.m.clone();
        resumed.v = opt_half.v.clone();
        resumed.t = opt_half.t;
        let mut p_resumed = p_half.clone();
        for _ in 0..6 {
            let g = grad_at(&p_resumed);
            resumed.step(&mut p_resumed, &g);
        }
        assert_eq!(p_full, p_resumed);
        assert_eq!(opt_full, resumed);
    }

    #[test]
    #[should_panic(expected = "gradient length mismatch")]
    fn wrong_gradient_length_panics() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 1e-3);
        opt.step(&mut p, &[1.0]);
    }
}
