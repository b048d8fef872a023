//! Reproducible Gaussian increments for the driving Brownian motions.
//!
//! Draws are addressed by `(seed, stream, position)` on a ChaCha8 keystream:
//! the stream number selects the Brownian mode (or another independent
//! family) and every normal consumes exactly four 32-bit words, so the draw
//! for step `s` sits at word `4·s` regardless of how many other draws were
//! made. Monte Carlo samples get their own seed via [`substream_seed`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Stream offset for draws that are not Brownian modes (initial points of
/// path ensembles and similar).
pub(crate) const AUX_STREAM: u64 = 1 << 40;

/// Mixes a base seed with a sample index (splitmix64 finaliser).
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sequential reader over one ChaCha stream.
pub(crate) struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(0);
        Stream { rng }
    }

    /// Uniform on `(0, 1]`, 53-bit resolution.
    #[inline]
    pub(crate) fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Box–Muller, cosine branch. Consumes four words.
    #[inline]
    pub(crate) fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Brownian increments `ΔB^j` over each step, one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub n_steps: usize,
    pub n_modes: usize,
    pub dt: f64,
    pub seed: u64,
    /// Row-major `n_steps × n_modes`.
    pub increments: Vec<f64>,
}

impl NoisePath {
    #[inline]
    pub fn row(&self, step: usize) -> &[f64] {
        &self.increments[step * self.n_modes..(step + 1) * self.n_modes]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_steps, self.n_modes)
    }

    /// Brownian path of mode `j` at the mesh nodes, `B_0 = 0`.
    pub fn path(&self, mode: usize) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n_steps + 1);
        let mut acc = 0.0;
        b.push(acc);
        for s in 0..self.n_steps {
            acc += self.row(s)[mode];
            b.push(acc);
        }
        b
    }

    /// Same path with every increment scaled, e.g. to realise `√ε·ΔB`.
    pub fn scaled(&self, factor: f64) -> NoisePath {
        NoisePath {
            increments: self.increments.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Independent `Normal(0, dt)` draws keyed by `(seed, step, mode)`.
pub fn sample_noise(n_steps: usize, n_modes: usize, dt: f64, seed: u64) -> NoisePath {
    assert!(n_steps >= 1 && n_modes >= 1 && dt > 0.0, "invalid noise shape");
    let sd = dt.sqrt();
    let mut increments = vec![0.0; n_steps * n_modes];
    for j in 0..n_modes {
        let mut s = Stream::new(seed, j as u64);
        for step in 0..n_steps {
            increments[step * n_modes + j] = sd * s.normal();
        }
    }
    NoisePath {
        n_steps,
        n_modes,
        dt,
        seed,
        increments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = sample_noise(50, 3, 0.01, 42);
        let b = sample_noise(50, 3, 0.01, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_seeds_differ_almost_everywhere() {
        let a = sample_noise(400, 4, 0.01, 7);
        let b = sample_noise(400, 4, 0.01, 8);
        let differ = a
            .increments
            .iter()
            .zip(&b.increments)
            .filter(|(x, y)| x != y)
            .count();
        assert!(differ as f64 >= 0.99 * a.increments.len() as f64);
    }

    #[test]
    fn draws_are_addressed_by_step_and_mode() {
        // A longer path and a path with more modes agree on the common block.
        let short = sample_noise(10, 2, 0.1, 3);
        let long = sample_noise(25, 5, 0.1, 3);
        for s in 0..10 {
            for j in 0..2 {
                assert_eq!(short.row(s)[j], long.row(s)[j]);
            }
        }
    }

    #[test]
    fn moments() {
        let dt = 0.003;
        let n = 10_000;
        let p = sample_noise(n, 2, dt, 2024);
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|s| p.row(s)[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            // mean: sd/√n; variance: dt·√(2/(n−1)).
            assert!(mean.abs() < 5.0 * (dt / n as f64).sqrt(), "mean {mean}");
            let se = dt * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - dt).abs() < 3.0 * se, "var {var} vs {dt}");
        }
    }

    #[test]
    fn substreams_are_distinct() {
        let seeds: std::collections::HashSet<u64> =
            (0..1000).map(|i| substream_seed(99, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(substream_seed(1, 0), substream_seed(2, 0));
    }
}
