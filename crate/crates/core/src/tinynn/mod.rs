//! Minimal dense-network substrate.

mod adam;
pub mod checkpoint;
mod embedding;
mod fourier;
pub mod gradcheck;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use embedding::EmbeddingTable;
pub use fourier::{clamped_input_count, fourier_embed, fourier_embed_with, FourierSchedule};
pub use mlp::{logit, sigmoid, Mlp, MlpCache, OutputActivation};

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable_at_large_logits() {
        let p = softmax(&[30.0, -30.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
