use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static CLAMPED_INPUTS: AtomicU64 = AtomicU64::new(0);

/// How many out-of-range inputs [`fourier_embed`] has clamped in this process.
pub fn clamped_input_count() -> u64 {
    CLAMPED_INPUTS.load(Ordering::Relaxed)
}

/// Frequency ladder `base * ratio^k` for `k = 0..dim/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierSchedule {
    pub base: f64,
    pub ratio: f64,
}

impl Default for FourierSchedule {
    fn default() -> Self {
        FourierSchedule { base: PI, ratio: 2.0 }
    }
}

/// `[sin(f_0 d), cos(f_0 d), sin(f_1 d), cos(f_1 d), ...]` with `f_k = 2^k pi`.
pub fn fourier_embed(d_norm: f64, dim: usize) -> Result<Vec<f64>> {
    fourier_embed_with(d_norm, dim, FourierSchedule::default())
}

pub fn fourier_embed_with(d_norm: f64, dim: usize, schedule: FourierSchedule) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "fourier dim must be even and positive, got {dim}"
        )));
    }
    let d = if (0.0..=1.0).contains(&d_norm) {
        d_norm
    } else {
        CLAMPED_INPUTS.fetch_add(1, Ordering::Relaxed);
        log::debug!("fourier input {d_norm} outside [0, 1], clamped");
        if d_norm.is_nan() {
            0.0
        } else {
            d_norm.clamp(0.0, 1.0)
        }
    };
    let mut out = Vec::with_capacity(dim);
    let mut freq = schedule.base;
    for _ in 0..dim / 2 {
        let (s, c) = (freq * d).sin_cos();
        out.push(s);
        out.push(c);
        freq *= schedule.ratio;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance() {
        assert_eq!(
            fourier_embed(0.0, 8).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn unit_distance_two_dims() {
        let v = fourier_embed(1.0, 2).unwrap();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let before = clamped_input_count();
        let v = fourier_embed(1.5, 4).unwrap();
        assert_eq!(v, fourier_embed(1.0, 4).unwrap());
        assert!(clamped_input_count() > before);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(fourier_embed(0.5, 3).is_err());
    }

    proptest::proptest! {
        #[test]
        fn components_bounded(d in 0.0f64..=1.0, half in 1usize..8) {
            for c in fourier_embed(d, 2 * half).unwrap() {
                proptest::prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
