//! Rate functional, its constrained minimisation, the weak-convergence
//! continuity test for skeletons, and Monte Carlo estimates of small-noise
//! probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{h_norm_sq, TimeMesh, Trajectory};
use crate::noise::{sample_noise, substream_seed};
use crate::problem::ProblemSpec;
use crate::skeleton::{check_inputs, skeleton_unchecked, Control, PenaltySchedule};
use crate::spde::spde_unchecked;
use crate::stats::{linear_fit, mean_se};

/// `½∫₀ᵀ‖k(s)‖² ds`.
pub fn rate_functional(k: &Control) -> f64 {
    0.5 * k.norm_sq()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetEvent {
    /// `|u(0,·) − center|_H ≤ radius`.
    TerminalBall { center: Vec<f64>, radius: f64 },
    /// `max_t u(t, x_probe) ≥ level`.
    SupExceed { level: f64, probe: usize },
}

impl TargetEvent {
    pub fn check(&self, problem: &ProblemSpec) -> Result<()> {
        match self {
            TargetEvent::TerminalBall { center, radius } => {
                if center.len() != problem.grid.n_nodes {
                    return Err(Error::Domain(format!(
                        "ball center has {} values, grid has {} nodes",
                        center.len(),
                        problem.grid.n_nodes
                    )));
                }
                if !(*radius > 0.0) {
                    return Err(Error::Domain("ball radius must be positive".into()));
                }
            }
            TargetEvent::SupExceed { probe, .. } => {
                if *probe >= problem.grid.n_nodes {
                    return Err(Error::Domain(format!("probe node {probe} is off the grid")));
                }
            }
        }
        Ok(())
    }

    /// Amount by which a trajectory misses the event; zero inside.
    pub fn shortfall(&self, traj: &Trajectory) -> f64 {
        match self {
            TargetEvent::TerminalBall { center, radius } => {
                let h = traj.grid.spacing();
                let diff: Vec<f64> = traj.fields[0]
                    .iter()
                    .zip(center)
                    .map(|(a, b)| a - b)
                    .collect();
                (h_norm_sq(&diff, h).sqrt() - radius).max(0.0)
            }
            TargetEvent::SupExceed { level, probe } => {
                let top = traj
                    .fields
                    .iter()
                    .map(|f| f[*probe])
                    .fold(f64::NEG_INFINITY, f64::max);
                (level - top).max(0.0)
            }
        }
    }

    pub fn contains(&self, traj: &Trajectory) -> bool {
        self.shortfall(traj) == 0.0
    }

    /// Squared-hinge event penalty.
    pub fn penalty(&self, traj: &Trajectory) -> f64 {
        self.shortfall(traj).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub schedule: PenaltySchedule,
    /// Largest shortfall accepted as feasible.
    pub feasibility_tol: f64,
    pub max_iters: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Stage stops once `‖∇Φ_λ‖` falls below this.
    pub grad_tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            schedule: PenaltySchedule::default(),
            feasibility_tol: 1e-3,
            max_iters: 400,
            fd_step: 1e-6,
            grad_tol: 1e-10,
        }
    }
}

pub const DEFAULT_LAMBDAS: [f64; 4] = [1e1, 1e2, 1e3, 1e4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStage {
    pub lambda: f64,
    pub rate: f64,
    pub residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub minimizer: Control,
    /// `½‖k‖²` of the minimizer, `+∞` when no feasible control was found.
    pub rate: f64,
    pub constraint_residual: f64,
    pub feasible: bool,
    pub lambda_history: Vec<LambdaStage>,
    pub warning: Option<String>,
}

struct Objective<'a> {
    problem: &'a ProblemSpec,
    event: &'a TargetEvent,
    mesh: TimeMesh,
    schedule: PenaltySchedule,
}

impl Objective<'_> {
    fn shortfall(&self, k: &Control) -> Result<f64> {
        crate::skeleton::stability_check(self.problem, &self.mesh, k.max_row_norm())?;
        let sol = skeleton_unchecked(self.problem, k, &self.mesh, &self.schedule)?;
        Ok(self.event.shortfall(&sol.traj))
    }

    /// Forward-difference gradient of `Φ_λ`, with the rate part differenced
    /// in closed form.
    fn gradient(&self, k: &Control, lambda: f64, base_pen: f64, rel_step: f64) -> Result<Vec<f64>> {
        let dt = self.mesh.dt();
        (0..k.values.len())
            .into_par_iter()
            .map(|i| {
                let step = rel_step * k.values[i].abs().max(1.0);
                let mut kp = k.clone();
                kp.values[i] += step;
                let pen = self.shortfall(&kp)?.powi(2);
                let d_rate = dt * (k.values[i] * step + 0.5 * step * step);
                Ok((d_rate + lambda * (pen - base_pen)) / step)
            })
            .collect()
    }
}

/// Penalty-continuation minimisation of `½‖k‖² + λ·shortfall(Γ⁰(k))²`.
pub fn minimize_rate(
    problem: &ProblemSpec,
    event: &TargetEvent,
    lambdas: &[f64],
    init: &Control,
    mesh: &TimeMesh,
    opt: &OptConfig,
) -> Result<RateResult> {
    event.check(problem)?;
    check_inputs(problem, init, mesh)?;
    opt.schedule.check()?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("lambda schedule must be nonempty and positive".into()));
    }
    let obj = Objective {
        problem,
        event,
        mesh: *mesh,
        schedule: opt.schedule,
    };
    let mut k = init.clone();
    let mut history = Vec::new();
    let mut best: Option<(Control, f64, f64)> = None;
    let mut stagnant_stages = 0;
    let mut warning = None;

    for &lambda in lambdas {
        let phi = |short: f64, k: &Control| rate_functional(k) + lambda * short * short;
        let mut short = obj.shortfall(&k)?;
        let mut value = phi(short, &k);
        let stage_start = value;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut iterations = 0;
        let mut quiet = 0;
        while iterations < opt.max_iters {
            iterations += 1;
            let grad = obj.gradient(&k, lambda, short * short, opt.fd_step)?;
            let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm_sq.sqrt() < opt.grad_tol {
                break;
            }
            let mut alpha = match &prev {
                Some((dk, dg)) => {
                    let sy: f64 = dk.iter().zip(dg).map(|(a, b)| a * b).sum();
                    let ss: f64 = dk.iter().map(|a| a * a).sum();
                    if sy > 0.0 {
                        ss / sy
                    } else {
                        1.0 / gnorm_sq.sqrt()
                    }
                }
                None => 1.0 / (gnorm_sq.sqrt() * mesh.dt()).max(1.0),
            };
            let mut accepted = None;
            for _ in 0..60 {
                let trial = Control {
                    values: k
                        .values
                        .iter()
                        .zip(&grad)
                        .map(|(v, g)| v - alpha * g)
                        .collect(),
                    ..k.clone()
                };
                let trial_short = match obj.shortfall(&trial) {
                    Ok(s) => s,
                    Err(Error::Config(_)) => {
                        alpha *= 0.5;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let trial_value = phi(trial_short, &trial);
                if trial_value <= value - 1e-4 * alpha * gnorm_sq {
                    accepted = Some((trial, trial_short, trial_value));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, trial_short, trial_value)) = accepted else {
                break;
            };
            let old_grad = grad;
            let dk: Vec<f64> = trial.values.iter().zip(&k.values).map(|(a, b)| a - b).collect();
            let rel = (value - trial_value) / value.abs().max(1e-300);
            k = trial;
            short = trial_short;
            value = trial_value;
            let new_grad = obj.gradient(&k, lambda, short * short, opt.fd_step)?;
            let dg: Vec<f64> = new_grad.iter().zip(&old_grad).map(|(a, b)| a - b).collect();
            prev = Some((dk, dg));
            if rel < 1e-12 {
                quiet += 1;
                if quiet >= 3 {
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        let rate = rate_functional(&k);
        history.push(LambdaStage {
            lambda,
            rate,
            residual: short,
            objective: value,
            iterations,
        });
        if short <= opt.feasibility_tol && best.as_ref().is_none_or(|b| rate < b.1) {
            best = Some((k.clone(), rate, short));
        }
        if (stage_start - value) / stage_start.abs().max(1e-300) < 1e-10 {
            stagnant_stages += 1;
            if stagnant_stages >= 3 {
                warning = Some(format!(
                    "optimizer stagnated for 3 consecutive λ stages (last λ = {lambda})"
                ));
            }
        } else {
            stagnant_stages = 0;
        }
    }

    Ok(match best {
        Some((minimizer, rate, residual)) => RateResult {
            minimizer,
            rate,
            constraint_residual: residual,
            feasible: true,
            lambda_history: history,
            warning,
        },
        None => RateResult {
            constraint_residual: history.last().map_or(f64::INFINITY, |s| s.residual),
            minimizer: k,
            rate: f64::INFINITY,
            feasible: false,
            lambda_history: history,
            warning,
        },
    })
}

/// Central-difference recomputation of one gradient entry, for checking
/// the forward-difference gradient.
pub fn objective_gradients(
    problem: &ProblemSpec,
    event: &TargetEvent,
    lambda: f64,
    k: &Control,
    mesh: &TimeMesh,
    opt: &OptConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    event.check(problem)?;
    check_inputs(problem, k, mesh)?;
    let obj = Objective {
        problem,
        event,
        mesh: *mesh,
        schedule: opt.schedule,
    };
    let base = obj.shortfall(k)?.powi(2);
    let forward = obj.gradient(k, lambda, base, opt.fd_step)?;
    let central = (0..k.values.len())
        .into_par_iter()
        .map(|i| {
            let step = 1e-4 * k.values[i].abs().max(1.0);
            let mut kp = k.clone();
            let mut km = k.clone();
            kp.values[i] += step;
            km.values[i] -= step;
            let fp = rate_functional(&kp) + lambda * obj.shortfall(&kp)?.powi(2);
            let fm = rate_functional(&km) + lambda * obj.shortfall(&km)?.powi(2);
            Ok((fp - fm) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((forward, central))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionIIRow {
    pub amplitude: f64,
    pub frequency: u32,
    pub distance: f64,
    /// `|∫₀ᵀ sin(2πmt)·φ(t) dt|` with `φ(t) = e^{−t}`.
    pub witness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionIIReport {
    pub rows: Vec<ConditionIIRow>,
}

impl ConditionIIReport {
    /// Distances strictly decrease with frequency for every amplitude.
    pub fn decreasing(&self) -> bool {
        let mut amps: Vec<f64> = self.rows.iter().map(|r| r.amplitude).collect();
        amps.dedup();
        amps.iter().all(|&a| {
            let mut d: Vec<&ConditionIIRow> = self.rows.iter().filter(|r| r.amplitude == a).collect();
            d.sort_by_key(|r| r.frequency);
            d.windows(2).all(|w| w[1].distance < w[0].distance || w[0].distance == 0.0)
        })
    }
}

/// `ht_distance(Γ⁰(k + a·sin(2πm·)e₁), Γ⁰(k))` over amplitudes and
/// frequencies. The perturbed controls converge weakly to `k` as `m → ∞`.
pub fn condition_ii_test(
    problem: &ProblemSpec,
    k: &Control,
    amplitudes: &[f64],
    frequencies: &[u32],
    radius_sq: f64,
    mesh: &TimeMesh,
    schedule: &PenaltySchedule,
) -> Result<ConditionIIReport> {
    check_inputs(problem, k, mesh)?;
    schedule.check()?;
    let mut perturbed = Vec::new();
    for &a in amplitudes {
        for &m in frequencies {
            let km = Control::from_fn(*mesh, k.n_modes, |t, j| {
                if j == 0 {
                    a * (std::f64::consts::TAU * m as f64 * t / mesh.t_final).sin()
                } else {
                    0.0
                }
            })
            .add(k)?;
            if !km.in_ball(radius_sq) {
                return Err(Error::Config(format!(
                    "perturbed control (a = {a}, m = {m}) has ∫‖k‖² = {:.4} outside S_{radius_sq}",
                    km.norm_sq()
                )));
            }
            crate::skeleton::stability_check(problem, mesh, km.max_row_norm())?;
            perturbed.push((a, m, km));
        }
    }
    let base = skeleton_unchecked(problem, k, mesh, schedule)?;
    let rows = perturbed
        .par_iter()
        .map(|(a, m, km)| {
            let sol = skeleton_unchecked(problem, km, mesh, schedule)?;
            let dt = mesh.dt();
            let witness = (0..mesh.n_steps)
                .map(|i| {
                    let t = mesh.time(i);
                    (std::f64::consts::TAU * *m as f64 * t / mesh.t_final).sin() * (-t).exp() * dt
                })
                .sum::<f64>()
                .abs();
            Ok(ConditionIIRow {
                amplitude: *a,
                frequency: *m,
                distance: sol.traj.ht_distance(&base.traj)?,
                witness,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionIIReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub epsilon: f64,
    pub p_hat: f64,
    pub std_error: f64,
    /// Per-sample variance of the estimator.
    pub estimator_variance: f64,
    pub hits: usize,
    pub eps_log_p: f64,
    /// Delta-method standard error of `ε log p̂`.
    pub eps_log_p_se: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub importance: bool,
    pub seed: u64,
    pub n_samples: usize,
    pub rows: Vec<McRow>,
    /// Intercept of `ε log p̂` against `ε` over the reliable rows.
    pub extrapolated: f64,
    /// `ε log p̂` at the smallest reliable `ε`.
    pub smallest_eps_value: f64,
    pub minus_rate: Option<f64>,
}

impl McReport {
    pub fn relative_gap(&self) -> Option<f64> {
        self.minus_rate
            .map(|r| ((self.extrapolated - r) / r.abs()).abs())
    }
}

/// Monte Carlo estimate of `P(U^ε ∈ event)` for each `ε`.
///
/// With `importance = Some(rate)` the noise is shifted by `k*/√ε` and each
/// sample is weighted by `exp(−Σ k*·ΔW/√ε − ‖k*‖²/(2ε))`.
#[allow(clippy::too_many_arguments)]
pub fn mc_ldp_compare(
    problem: &ProblemSpec,
    event: &TargetEvent,
    epsilons: &[f64],
    n_samples: usize,
    seed: u64,
    importance: Option<&RateResult>,
    n: u64,
    mesh: &TimeMesh,
) -> Result<McReport> {
    event.check(problem)?;
    let zero = Control::zeros(*mesh, problem.n_modes());
    check_inputs(problem, &zero, mesh)?;
    if n_samples == 0 || epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("need samples and positive epsilons".into()));
    }
    let shift = match importance {
        Some(r) if !r.feasible => {
            return Err(Error::Config(
                "importance sampling needs a feasible rate minimizer".into(),
            ))
        }
        Some(r) => {
            if r.minimizer.mesh != *mesh || r.minimizer.n_modes != problem.n_modes() {
                return Err(Error::Domain("minimizer lives on another mesh".into()));
            }
            Some(&r.minimizer)
        }
        None => None,
    };
    let dt = mesh.dt();
    let mut rows = Vec::new();
    for &eps in epsilons {
        let se = eps.sqrt();
        let weights: Vec<f64> = (0..n_samples)
            .into_par_iter()
            .map(|s| {
                let sample_seed = substream_seed(seed, s as u64);
                let mut noise = sample_noise(mesh.n_steps, problem.n_modes(), dt, sample_seed);
                let mut log_w = 0.0;
                if let Some(k) = shift {
                    let mut dot = 0.0;
                    for (b, kv) in noise.increments.iter_mut().zip(&k.values) {
                        dot += kv * *b;
                        *b += kv * dt / se;
                    }
                    log_w = -dot / se - k.norm_sq() / (2.0 * eps);
                }
                let (traj, _) = spde_unchecked(problem, eps, n, mesh, &noise, &zero)
                    .map_err(|e| Error::Config(format!("sample {s} (seed {sample_seed}): {e}")))?;
                Ok(if event.contains(&traj) { log_w.exp() } else { 0.0 })
            })
            .collect::<Result<_>>()?;
        let hits = weights.iter().filter(|&&w| w > 0.0).count();
        let (p_hat, std_error) = mean_se(&weights);
        let estimator_variance = std_error * std_error * n_samples as f64;
        let reliable = hits > 0 && p_hat > 0.0;
        let (eps_log_p, eps_log_p_se) = if reliable {
            (eps * p_hat.ln(), eps * std_error / p_hat)
        } else {
            (f64::NEG_INFINITY, f64::NAN)
        };
        rows.push(McRow {
            epsilon: eps,
            p_hat,
            std_error,
            estimator_variance,
            hits,
            eps_log_p,
            eps_log_p_se,
            reliable,
        });
    }
    let good: Vec<&McRow> = rows.iter().filter(|r| r.reliable).collect();
    let extrapolated = match good.len() {
        0 => f64::NAN,
        1 => good[0].eps_log_p,
        _ => {
            let x: Vec<f64> = good.iter().map(|r| r.epsilon).collect();
            let y: Vec<f64> = good.iter().map(|r| r.eps_log_p).collect();
            linear_fit(&x, &y).1
        }
    };
    let smallest_eps_value = good
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .map_or(f64::NAN, |r| r.eps_log_p);
    Ok(McReport {
        importance: shift.is_some(),
        seed,
        n_samples,
        rows,
        extrapolated,
        smallest_eps_value,
        minus_rate: importance.map(|r| -r.rate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Family;
    use crate::skeleton::solve_skeleton;

    #[test]
    fn rate_functional_examples() {
        let mesh = TimeMesh::new(1.0, 1000).unwrap();
        assert_eq!(rate_functional(&Control::zeros(mesh, 3)), 0.0);
        let c = Control::from_fn(mesh, 2, |_, j| if j == 1 { 1.7 } else { 0.0 });
        assert!((rate_functional(&c) - 0.5 * 1.7 * 1.7).abs() < 1e-12);
        let k = Control::from_fn(mesh, 1, |t, _| t.sin());
        let exact = (1.0 - 1f64.sin() * 1f64.cos()) / 4.0;
        // left-point sums carry an O(Δt) endpoint term
        assert!((rate_functional(&k) - exact).abs() < 1e-3);
        assert!((rate_functional(&k.scaled(3.0)) - 9.0 * rate_functional(&k)).abs() < 1e-14);
    }

    #[test]
    fn self_centered_ball_has_zero_rate() {
        let p = ProblemSpec::default_for(Family::LinearAdditive);
        let mesh = TimeMesh::new(1.0, 20).unwrap();
        let zero = Control::zeros(mesh, 1);
        let u0 = solve_skeleton(&p, &zero, &mesh, &PenaltySchedule::default()).unwrap();
        let ev = TargetEvent::TerminalBall {
            center: u0.traj.fields[0].clone(),
            radius: 0.01,
        };
        let r = minimize_rate(&p, &ev, &DEFAULT_LAMBDAS, &zero, &mesh, &OptConfig::default())
            .unwrap();
        assert!(r.feasible);
        assert!(r.rate <= 1e-6);
        assert_eq!(r.lambda_history.len(), 4);
    }

    #[test]
    fn unreachable_event_is_infeasible() {
        let p = ProblemSpec::default_for(Family::LinearAdditive).without_noise();
        let mesh = TimeMesh::new(1.0, 10).unwrap();
        let zero = Control::zeros(mesh, 1);
        let ev = TargetEvent::SupExceed {
            level: 5.0,
            probe: 40,
        };
        let r = minimize_rate(&p, &ev, &DEFAULT_LAMBDAS, &zero, &mesh, &OptConfig::default())
            .unwrap();
        assert!(!r.feasible);
        assert_eq!(r.rate, f64::INFINITY);
        assert!(r.constraint_residual > 1.0);
    }

    #[test]
    fn events_are_validated() {
        let p = ProblemSpec::default_for(Family::LinearAdditive);
        let bad = TargetEvent::TerminalBall {
            center: vec![0.0; 3],
            radius: 1.0,
        };
        assert!(bad.check(&p).is_err());
        let bad = TargetEvent::TerminalBall {
            center: vec![0.0; 81],
            radius: 0.0,
        };
        assert!(bad.check(&p).is_err());
        assert!(TargetEvent::SupExceed { level: 1.0, probe: 81 }.check(&p).is_err());
    }

    #[test]
    fn zero_amplitude_gives_zero_distance() {
        let p = ProblemSpec::default_for(Family::LinearAdditive);
        let mesh = TimeMesh::new(1.0, 40).unwrap();
        let r = condition_ii_test(
            &p,
            &Control::zeros(mesh, 1),
            &[0.0],
            &[1, 2, 4],
            4.0,
            &mesh,
            &PenaltySchedule::default(),
        )
        .unwrap();
        assert!(r.rows.iter().all(|row| row.distance == 0.0));
    }

    #[test]
    fn whole_space_event_has_probability_one() {
        let p = ProblemSpec::default_for(Family::LinearAdditive);
        let mesh = TimeMesh::new(1.0, 20).unwrap();
        let ev = TargetEvent::TerminalBall {
            center: vec![0.0; 81],
            radius: f64::INFINITY,
        };
        let r = mc_ldp_compare(&p, &ev, &[0.5, 0.1], 50, 1, None, 1000, &mesh).unwrap();
        for row in &r.rows {
            assert_eq!(row.p_hat, 1.0);
            assert_eq!(row.eps_log_p, 0.0);
        }
    }
}
