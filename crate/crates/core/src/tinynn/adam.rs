use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `prefix` names the config section in error paths.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("{prefix}.{field}"),
            message,
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(bad("eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction over one flat parameter space.
///
/// Several parameter buffers can share one optimizer through
/// [`AdamState::step_groups`]; moments are laid out group after group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Parameter updates skipped because the gradient was not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_groups(&mut [(params, grads)])
    }

    pub fn step_groups(&mut self, groups: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        let total: usize = groups.iter().map(|(p, _)| p.len()).sum();
        if total != self.m.len() {
            return Err(Error::WidthMismatch {
                expected: self.m.len(),
                got: total,
            });
        }
        for (p, g) in groups.iter() {
            if p.len() != g.len() {
                return Err(Error::WidthMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut offset = 0;
        for (params, grads) in groups.iter_mut() {
            for (i, (p, &g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                let k = offset + i;
                if !g.is_finite() {
                    self.skipped += 1;
                    continue;
                }
                self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += params.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            st.step(&mut p, &[0.5, -3.0]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn quadratic_converges_to_closed_form_minimum() {
        // f(x) = (x - 3)^2 has its minimum at x = 3.
        let config = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(1, config);
        let mut x = vec![0.0];
        let mut converged_at = None;
        for k in 1..=5000 {
            let g = 2.0 * (x[0] - 3.0);
            st.step(&mut x, &[g]).unwrap();
            if (x[0] - 3.0).abs() < 1e-6 && converged_at.is_none() {
                converged_at = Some(k);
            }
        }
        assert!(converged_at.is_some(), "x = {}", x[0]);
        assert!((x[0] - 3.0).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn non_finite_gradient_skips_that_parameter() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        st.step(&mut p, &[f64::NAN, 1.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
        assert_eq!(st.skipped, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0];
        assert!(st.step(&mut p, &[1.0]).is_err());
    }
}
