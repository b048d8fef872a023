//! Small-noise stochastic obstacle problem and the coupling experiment
//! between the controlled stochastic equation and its skeleton.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{TimeMesh, Trajectory};
use crate::noise::{sample_noise, substream_seed, NoisePath};
use crate::problem::ProblemSpec;
use crate::skeleton::{check_inputs, march, Barrier, Control, NoiseInput};
use crate::stats::mean_se;

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSolution {
    pub traj: Trajectory,
    pub penalty_density: Trajectory,
    pub epsilon: f64,
    pub control: Option<Control>,
    pub noise_seed: u64,
}

pub(crate) fn check_noise(problem: &ProblemSpec, mesh: &TimeMesh, noise: &NoisePath) -> Result<()> {
    let expected = (mesh.n_steps, problem.n_modes());
    if noise.shape() != expected || (noise.dt - mesh.dt()).abs() > 1e-12 * mesh.dt() {
        return Err(Error::NoiseShape {
            expected,
            got: noise.shape(),
        });
    }
    Ok(())
}

/// Penalized equation driven by `√ε Σ_j h_j dB^j` and, optionally, the
/// control drift `Σ_j h_j k^j dt`. With `ε = 0` this is the skeleton solver.
pub fn solve_spde(
    problem: &ProblemSpec,
    epsilon: f64,
    n: u64,
    mesh: &TimeMesh,
    noise: &NoisePath,
    control: Option<&Control>,
) -> Result<StochasticSolution> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be ≥ 0, got {epsilon}")));
    }
    check_noise(problem, mesh, noise)?;
    let zero;
    let k = match control {
        Some(k) => k,
        None => {
            zero = Control::zeros(*mesh, problem.n_modes());
            &zero
        }
    };
    check_inputs(problem, k, mesh)?;
    spde_unchecked(problem, epsilon, n, mesh, noise, k)
        .map(|(traj, penalty_density)| StochasticSolution {
            traj,
            penalty_density,
            epsilon,
            control: control.cloned(),
            noise_seed: noise.seed,
        })
}

pub(crate) fn spde_unchecked(
    problem: &ProblemSpec,
    epsilon: f64,
    n: u64,
    mesh: &TimeMesh,
    noise: &NoisePath,
    control: &Control,
) -> Result<(Trajectory, Trajectory)> {
    let input = NoiseInput {
        path: noise,
        sqrt_eps: epsilon.sqrt(),
    };
    let out = march(problem, mesh, control, Some(input), Barrier::Penalty(n as f64))?;
    Ok((out.traj, out.density))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStats {
    pub epsilon: f64,
    pub mean: f64,
    pub std_error: f64,
    pub variance: f64,
    /// `(δ, P̂(distance > δ))`.
    pub tail: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionIReport {
    pub seed: u64,
    pub n_samples: usize,
    pub n: u64,
    pub deltas: Vec<f64>,
    pub per_epsilon: Vec<EpsilonStats>,
    /// Log-log slope of the mean distance against `ε`.
    pub slope: f64,
    /// Raw distances, `[ε index][sample]`.
    #[serde(skip)]
    pub distances: Vec<Vec<f64>>,
}

impl ConditionIReport {
    /// Means are nonincreasing as `ε` decreases, up to one standard error.
    pub fn monotone_within_se(&self) -> bool {
        let mut sorted: Vec<&EpsilonStats> = self.per_epsilon.iter().collect();
        sorted.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        sorted
            .windows(2)
            .all(|w| w[1].mean <= w[0].mean + w[0].std_error.max(w[1].std_error))
    }
}

/// Distance between the controlled stochastic solution `Y^ε` and the
/// skeleton `Z^ε` driven by the same control, over independent noise paths.
///
/// Sample `s` uses noise seed `substream_seed(seed, s)` for every `ε`, and
/// the control `control_family[s % len]`.
#[allow(clippy::too_many_arguments)]
pub fn condition_i_distance(
    problem: &ProblemSpec,
    epsilons: &[f64],
    control_family: &[Control],
    radius_sq: f64,
    n: u64,
    mesh: &TimeMesh,
    n_samples: usize,
    seed: u64,
    deltas: &[f64],
) -> Result<ConditionIReport> {
    if control_family.is_empty() || n_samples == 0 || epsilons.is_empty() {
        return Err(Error::Config(
            "condition (i) needs controls, samples and at least one epsilon".into(),
        ));
    }
    for (i, k) in control_family.iter().enumerate() {
        if !k.in_ball(radius_sq) {
            return Err(Error::Config(format!(
                "control {i} has ∫‖k‖² = {:.4} outside S_{radius_sq}",
                k.norm_sq()
            )));
        }
        check_inputs(problem, k, mesh)?;
    }
    let skeletons: Vec<Trajectory> = control_family
        .par_iter()
        .map(|k| spde_unchecked(problem, 0.0, n, mesh, &dummy_noise(problem, mesh), k).map(|r| r.0))
        .collect::<Result<_>>()?;

    let mut distances = vec![Vec::new(); epsilons.len()];
    for (e_idx, &eps) in epsilons.iter().enumerate() {
        distances[e_idx] = (0..n_samples)
            .into_par_iter()
            .map(|s| {
                let sample_seed = substream_seed(seed, s as u64);
                let noise = sample_noise(mesh.n_steps, problem.n_modes(), mesh.dt(), sample_seed);
                let which = s % control_family.len();
                let (y, _) = spde_unchecked(problem, eps, n, mesh, &noise, &control_family[which])
                    .map_err(|e| {
                        Error::Config(format!("sample {s} (noise seed {sample_seed}): {e}"))
                    })?;
                y.ht_distance(&skeletons[which])
            })
            .collect::<Result<_>>()?;
    }

    let per_epsilon: Vec<EpsilonStats> = epsilons
        .iter()
        .zip(&distances)
        .map(|(&epsilon, d)| {
            let (mean, std_error) = mean_se(d);
            let variance = std_error * std_error * d.len() as f64;
            let tail = deltas
                .iter()
                .map(|&delta| {
                    (
                        delta,
                        d.iter().filter(|&&v| v > delta).count() as f64 / d.len() as f64,
                    )
                })
                .collect();
            EpsilonStats {
                epsilon,
                mean,
                std_error,
                variance,
                tail,
            }
        })
        .collect();
    let slope = if epsilons.len() >= 2 {
        let means: Vec<f64> = per_epsilon.iter().map(|s| s.mean).collect();
        crate::stats::log_log_slope(epsilons, &means)
    } else {
        f64::NAN
    };
    Ok(ConditionIReport {
        seed,
        n_samples,
        n,
        deltas: deltas.to_vec(),
        per_epsilon,
        slope,
        distances,
    })
}

fn dummy_noise(problem: &ProblemSpec, mesh: &TimeMesh) -> NoisePath {
    NoisePath {
        n_steps: mesh.n_steps,
        n_modes: problem.n_modes(),
        dt: mesh.dt(),
        seed: 0,
        increments: vec![0.0; mesh.n_steps * problem.n_modes()],
    }
}
