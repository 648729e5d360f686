use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Dense feed-forward network: ReLU hidden layers, configurable output.
///
/// All parameters live in one flat buffer. Layer `k` stores its
/// `out x in` weight matrix row-major followed by its bias vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    input: usize,
    widths: Vec<usize>,
    output: OutputActivation,
    params: Vec<f64>,
    // Bumped on every mutable parameter access; not part of the model.
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input
            && self.widths == other.widths
            && self.output == other.output
            && self.params == other.params
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    // activations[0] is the input; activations[k + 1] is layer k's output.
    activations: Vec<Vec<f64>>,
    // Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest |pre-activation| over hidden ReLU units. Finite-difference
    /// probes closer than their step to a kink are not differentiable there.
    pub fn min_hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn param_count(input: usize, widths: &[usize]) -> usize {
    let mut n = 0;
    let mut fan_in = input;
    for &w in widths {
        n += w * fan_in + w;
        fan_in = w;
    }
    n
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(input: usize, widths: &[usize], output: OutputActivation) -> Result<Self> {
        if input == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "mlp widths must be positive: input {input}, layers {widths:?}"
            )));
        }
        Ok(Mlp {
            input,
            widths: widths.to_vec(),
            output,
            params: vec![0.0; param_count(input, widths)],
            generation: 0,
        })
    }

    /// Kaiming-style uniform init: weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        widths: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(input, widths, output)?;
        let mut offset = 0;
        let mut fan_in = input;
        for &w in widths {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut m.params[offset..offset + w * fan_in] {
                *p = rng.random_range(-bound..bound);
            }
            offset += w * fan_in + w;
            fan_in = w;
        }
        Ok(m)
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut fan_in = self.input;
        self.widths.iter().map(move |&w| {
            let d = (fan_in, w);
            fan_in = w;
            d
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input {
            return Err(Error::WidthMismatch {
                expected: self.input,
                got: x.len(),
            });
        }
        let n_layers = self.widths.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        activations.push(x.to_vec());
        let mut offset = 0;
        for (k, (fan_in, fan_out)) in self.layer_dims().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let a_in = &activations[k];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(a_in).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
                })
                .collect();
            let last = k + 1 == n_layers;
            let a: Vec<f64> = if !last {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                match self.output {
                    OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
                    OutputActivation::Identity => z.clone(),
                }
            };
            pre.push(z);
            activations.push(a);
        }
        Ok(MlpCache {
            generation: self.generation,
            activations,
            pre,
        })
    }

    /// Forward pass of a single-output network.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<(f64, MlpCache)> {
        let cache = self.forward(x)?;
        Ok((cache.output()[0], cache))
    }

    /// Inference-only scalar output.
    pub fn predict_scalar(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.output()[0])
    }

    /// Backpropagates `upstream` (dL/d output) through the cached pass,
    /// adding parameter gradients into `grads` and returning dL/d input.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                model: self.generation,
                cache: cache.generation,
            });
        }
        if cache.pre.len() != self.widths.len() || cache.activations[0].len() != self.input {
            return Err(Error::InvalidInput("cache does not match network shape".into()));
        }
        if upstream.len() != self.output_width() {
            return Err(Error::WidthMismatch {
                expected: self.output_width(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::WidthMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let dims: Vec<(usize, usize)> = self.layer_dims().collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        let n_layers = dims.len();
        let last_act = cache.activations.last().unwrap();
        // dL/dz for the output layer.
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Sigmoid => upstream
                .iter()
                .zip(last_act)
                .map(|(g, a)| g * a * (1.0 - a))
                .collect(),
            OutputActivation::Identity => upstream.to_vec(),
        };
        for k in (0..n_layers).rev() {
            let (fan_in, fan_out) = dims[k];
            let off = offsets[k];
            let a_in = &cache.activations[k];
            let (gw, rest) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                rest[o] += d;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (di, wi) in d_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *di += d * wi;
                }
            }
            if k > 0 {
                // Through the ReLU of the previous layer.
                for (di, z) in d_in.iter_mut().zip(&cache.pre[k - 1]) {
                    if *z <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }

    /// Convenience wrapper returning fresh `(param_grads, input_grad)`.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::tinynn::gradcheck::{central_difference, max_relative_error};

    #[test]
    fn zero_network_outputs_half() {
        let m = Mlp::zeros(6, &[16, 32, 32, 1], OutputActivation::Sigmoid).unwrap();
        assert_eq!(m.predict_scalar(&[1.0, -3.0, 0.2, 9.0, 0.0, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn saturated_output_bias() {
        let mut m = Mlp::zeros(3, &[4, 1], OutputActivation::Sigmoid).unwrap();
        let n = m.num_params();
        m.params_mut()[n - 1] = 20.0;
        assert!(m.predict_scalar(&[0.1, 0.2, 0.3]).unwrap() > 0.999);
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = Mlp::zeros(3, &[4, 1], OutputActivation::Sigmoid).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::WidthMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn seeded_network_is_bit_reproducible() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let run = || {
            let mut rng = derive_rng(7, &[1]);
            let m = Mlp::new(4, &[16, 32, 32, 1], OutputActivation::Sigmoid, &mut rng).unwrap();
            m.predict_scalar(&x).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = derive_rng(1, &[]);
        let mut m = Mlp::new(2, &[3, 1], OutputActivation::Sigmoid, &mut rng).unwrap();
        let cache = m.forward(&[0.5, 0.5]).unwrap();
        m.params_mut()[0] += 0.1;
        assert!(matches!(m.backward(&cache, &[1.0]), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = derive_rng(2, &[]);
        let m = Mlp::new(5, &[8, 8, 1], OutputActivation::Sigmoid, &mut rng).unwrap();
        let cache = m.forward(&[0.1, 0.2, -0.3, 0.4, 1.0]).unwrap();
        let (g, gi) = m.backward(&cache, &[0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let mut rng = derive_rng(3, &[]);
        let m = Mlp::new(4, &[8, 1], OutputActivation::Sigmoid, &mut rng).unwrap();
        let x = [0.5, -0.5, 1.5, 0.1];
        let cache = m.forward(&x).unwrap();
        let (single, _) = m.backward(&cache, &[1.0]).unwrap();
        let mut double = vec![0.0; m.num_params()];
        for _ in 0..2 {
            let c = m.forward(&x).unwrap();
            m.backward_into(&c, &[1.0], &mut double).unwrap();
        }
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        for probe in 0..100u64 {
            let mut rng = derive_rng(11, &[probe]);
            let output = if probe % 2 == 0 {
                OutputActivation::Sigmoid
            } else {
                OutputActivation::Identity
            };
            let m = Mlp::new(6, &[16, 32, 32, 1], output, &mut rng).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cache = m.forward(&x).unwrap();
            if cache.min_hidden_margin() < 1e-3 {
                continue;
            }
            let (analytic, _) = m.backward(&cache, &[1.0]).unwrap();
            let numeric = central_difference(
                |p| {
                    let mut probe_net = m.clone();
                    probe_net.params_mut().copy_from_slice(p);
                    probe_net.predict_scalar(&x).unwrap()
                },
                m.params(),
                1e-5,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
