//! Brownian path ensembles and the probabilistic checks run along them:
//! the backward SDE satisfied by `(u(t,W_t), ∇u(t,W_t))`, the
//! forward–backward integral identity, and path-level energy bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{interpolate, Grid, TimeMesh, Trajectory};
use crate::noise::{substream_seed, Stream, AUX_STREAM};
use crate::problem::ProblemSpec;
use crate::skeleton::PenalizedSolution;
use crate::stats::mean_se;

/// Brownian paths with uniform initial points on the grid box.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: Grid,
    pub mesh: TimeMesh,
    pub seed: u64,
    pub n_paths: usize,
    pub start_points: Vec<f64>,
    /// `paths[p][i] = W_{t_i}` for path `p`.
    pub paths: Vec<Vec<f64>>,
    /// Index of the last node before the path first leaves the box.
    pub last_inside: Vec<usize>,
}

impl PathEnsemble {
    pub fn sample(grid: Grid, mesh: TimeMesh, n_paths: usize, seed: u64) -> Result<Self> {
        grid.check()?;
        mesh.check()?;
        if n_paths == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let sd = mesh.dt().sqrt();
        let width = grid.x_max - grid.x_min;
        let paths: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let s = substream_seed(seed, p as u64);
                let mut aux = Stream::new(s, AUX_STREAM);
                let mut bm = Stream::new(s, 0);
                let mut w = Vec::with_capacity(mesh.n_steps + 1);
                let mut x = grid.x_min + width * (1.0 - aux.uniform_open0());
                w.push(x);
                for _ in 0..mesh.n_steps {
                    x += sd * bm.normal();
                    w.push(x);
                }
                w
            })
            .collect();
        Ok(PathEnsemble {
            last_inside: last_inside(&grid, &paths, mesh.n_steps),
            grid,
            mesh,
            seed,
            n_paths,
            start_points: paths.iter().map(|w| w[0]).collect(),
            paths,
        })
    }

    /// The same paths observed every `factor` steps, for refinement studies
    /// that reuse one set of Brownian paths across meshes.
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble> {
        if factor == 0 || self.mesh.n_steps % factor != 0 {
            return Err(Error::Domain(format!(
                "cannot coarsen {} steps by {factor}",
                self.mesh.n_steps
            )));
        }
        let mesh = TimeMesh::new(self.mesh.t_final, self.mesh.n_steps / factor)?;
        let paths: Vec<Vec<f64>> = self
            .paths
            .iter()
            .map(|w| w.iter().step_by(factor).copied().collect())
            .collect();
        Ok(PathEnsemble {
            grid: self.grid,
            mesh,
            seed: self.seed,
            n_paths: self.n_paths,
            start_points: self.start_points.clone(),
            last_inside: last_inside(&self.grid, &paths, mesh.n_steps),
            paths,
        })
    }

    /// Same paths and mesh judged against another box of the same extent
    /// or larger, e.g. a refined grid.
    pub fn on_grid(&self, grid: Grid) -> Result<PathEnsemble> {
        grid.check()?;
        Ok(PathEnsemble {
            grid,
            last_inside: last_inside(&grid, &self.paths, self.mesh.n_steps),
            ..self.clone()
        })
    }

    /// Paths with at least one step inside the box.
    pub fn surviving(&self) -> usize {
        self.last_inside.iter().filter(|&&k| k > 0).count()
    }

    /// Fraction of paths that leave the box before `T`.
    pub fn stopped_fraction(&self) -> f64 {
        self.last_inside
            .iter()
            .filter(|&&k| k < self.mesh.n_steps)
            .count() as f64
            / self.n_paths as f64
    }

    fn check_solution(&self, traj: &Trajectory) -> Result<()> {
        if traj.grid != self.grid || traj.mesh != self.mesh {
            return Err(Error::Domain(
                "solution and path ensemble use different meshes".into(),
            ));
        }
        Ok(())
    }
}

fn last_inside(grid: &Grid, paths: &[Vec<f64>], n_steps: usize) -> Vec<usize> {
    paths
        .iter()
        .map(|w| {
            w.iter()
                .position(|&x| x < grid.x_min || x > grid.x_max)
                .map_or(n_steps, |k| k - 1)
        })
        .collect()
}

fn gradient_field(traj: &Trajectory, step: usize) -> Vec<f64> {
    let mut g = vec![0.0; traj.grid.n_nodes];
    crate::grid::gradient_into(&traj.fields[step], traj.grid.spacing(), &mut g);
    g
}

fn flux_derivative(problem: &ProblemSpec, traj: &Trajectory, step: usize) -> Vec<f64> {
    let grid = traj.grid;
    let t = traj.mesh.time(step);
    let u = &traj.fields[step];
    let z = gradient_field(traj, step);
    let gv: Vec<f64> = (0..grid.n_nodes)
        .map(|i| (problem.coefficients.g)(t, grid.x(i), u[i], z[i]))
        .collect();
    let mut out = vec![0.0; grid.n_nodes];
    crate::grid::divergence_into(&gv, grid.spacing(), &mut out);
    out
}

/// Root-mean-square one-step residual of the backward SDE
///
/// ```text
/// Y_t = Y_{t+Δt} + (f + ∂ₓg + Σ_j h_j k^j + ρ) Δt − Z_t ΔW_t
/// ```
///
/// along the ensemble, with `Y = u(t,W_t)` and `Z = ∇u(t,W_t)` read off the
/// solution by linear interpolation and `ρ` the interpolated penalty density
/// `n(u−L)⁻`. The flux term is the step-scale form of `½∫g⋆dW` for smooth
/// `g`. Steps that end outside the box are dropped. Normalised by `Δt^{1/2}`.
pub fn bsde_residual(
    problem: &ProblemSpec,
    sol: &PenalizedSolution,
    ensemble: &PathEnsemble,
) -> Result<f64> {
    let traj = &sol.traj;
    ensemble.check_solution(traj)?;
    let grid = traj.grid;
    let mesh = traj.mesh;
    let dt = mesh.dt();
    let coef = &problem.coefficients;
    let steps: Vec<usize> = (0..mesh.n_steps).collect();
    // Per-step nodal fields, computed once.
    let zs: Vec<Vec<f64>> = steps.par_iter().map(|&i| gradient_field(traj, i)).collect();
    let dg: Vec<Vec<f64>> = steps
        .par_iter()
        .map(|&i| flux_derivative(problem, traj, i))
        .collect();
    let drift: Vec<Vec<f64>> = steps
        .par_iter()
        .map(|&i| {
            let t = mesh.time(i);
            let u = &traj.fields[i];
            let kdot: f64 = sol
                .control
                .row(i)
                .iter()
                .zip(&coef.mode_weights)
                .map(|(k, c)| k * c)
                .sum();
            (0..grid.n_nodes)
                .map(|j| {
                    let (x, y, z) = (grid.x(j), u[j], zs[i][j]);
                    (coef.f)(t, x, y, z)
                        + dg[i][j]
                        + (coef.h_shape)(t, x, y, z) * kdot
                        + sol.penalty_density.fields[i][j]
                })
                .collect()
        })
        .collect();

    let per_path: Vec<(f64, usize)> = ensemble
        .paths
        .par_iter()
        .zip(&ensemble.last_inside)
        .map(|(w, &last)| {
            let mut s = 0.0;
            let mut c = 0usize;
            for i in 0..last {
                let (x0, x1) = (w[i], w[i + 1]);
                let y0 = interpolate(&grid, &traj.fields[i], x0).expect("inside");
                let y1 = interpolate(&grid, &traj.fields[i + 1], x1).expect("inside");
                let z0 = interpolate(&grid, &zs[i], x0).expect("inside");
                let a = interpolate(&grid, &drift[i], x0).expect("inside");
                let r = y0 - (y1 + a * dt - z0 * (x1 - x0));
                s += r * r;
                c += 1;
            }
            (s, c)
        })
        .collect();
    // serial sum keeps the result independent of the thread count
    let (sum_sq, count) = per_path
        .iter()
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if count == 0 {
        return Err(Error::EmptyEnsemble);
    }
    Ok((sum_sq / count as f64).sqrt() / dt.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarReport {
    pub dt: f64,
    pub n_paths: usize,
    /// Mean of the signed per-path gap.
    pub mean_gap: f64,
    pub std_error: f64,
    pub mean_abs_gap: f64,
}

impl StarReport {
    /// `|mean_gap| ≤ k·std_error`, exact zeros included.
    pub fn within_se(&self, k: f64) -> bool {
        self.mean_gap.abs() <= k * self.std_error || self.mean_gap.abs() < 1e-12
    }
}

/// Forward–backward identity `∫J(t,W_t)⋆dW_t = −∫∂ₓJ(t,W_t)dt` for
/// Brownian motion with generator `½Δ`.
///
/// The forward sum `Σ J(t_i,W_{t_i})ΔW_i` is the Itô integral and
/// `Σ J(t_{i+1},W_{t_{i+1}})ΔW_i` the backward one; the ⋆-integral is their
/// difference, whose mean-square limit is `−∫∂ₓJ dt`. The drift sum takes
/// `∂ₓJ` at right endpoints, which matches the conditional mean of
/// `(J_{i+1} − J_i)ΔW_i` through order `Δt²`; left endpoints leave an `O(Δt)`
/// bias of `−Σ(½∂ₓ³J + ∂ₜ∂ₓJ)Δt²`. Paths are summed up to the step on which
/// they leave the box.
pub fn star_integral_check(
    j: impl Fn(f64, f64) -> f64 + Sync,
    dj: impl Fn(f64, f64) -> f64 + Sync,
    ensemble: &PathEnsemble,
) -> StarReport {
    let mesh = ensemble.mesh;
    let dt = mesh.dt();
    let gaps: Vec<f64> = ensemble
        .paths
        .par_iter()
        .zip(&ensemble.last_inside)
        .map(|(w, &last)| {
            let end = (last + 1).min(mesh.n_steps);
            let mut forward = 0.0;
            let mut backward = 0.0;
            let mut drift = 0.0;
            for i in 0..end {
                let (t0, t1) = (mesh.time(i), mesh.time(i + 1));
                let dw = w[i + 1] - w[i];
                forward += j(t0, w[i]) * dw;
                backward += j(t1, w[i + 1]) * dw;
                drift += dj(t1, w[i + 1]) * dt;
            }
            (forward - backward) + drift
        })
        .collect();
    let (mean_gap, std_error) = mean_se(&gaps);
    StarReport {
        dt,
        n_paths: gaps.len(),
        mean_gap,
        std_error,
        mean_abs_gap: gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub n: u64,
    pub control_norm_sq: f64,
    /// Ensemble mean of `sup_t Y_t²`.
    pub sup_y_sq: f64,
    /// Ensemble mean of `∫|Z_t|²dt`.
    pub int_z_sq: f64,
    /// Ensemble mean of `(∫ n(Y_t−S_t)⁻ dt)²`.
    pub penalty_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub members: Vec<EnergyStats>,
    pub max: [f64; 3],
    pub min: [f64; 3],
    /// `max/min` per statistic; 1 when all members vanish.
    pub ratio: [f64; 3],
}

impl EnergyReport {
    pub fn all_finite(&self) -> bool {
        self.members
            .iter()
            .all(|m| m.sup_y_sq.is_finite() && m.int_z_sq.is_finite() && m.penalty_sq.is_finite())
    }
}

/// Path-ensemble energy statistics for a family of penalized solutions.
pub fn path_energy_bounds(
    family: &[PenalizedSolution],
    ensemble: &PathEnsemble,
) -> Result<EnergyReport> {
    let mut members = Vec::with_capacity(family.len());
    for sol in family {
        let traj = &sol.traj;
        ensemble.check_solution(traj)?;
        let grid = traj.grid;
        let mesh = traj.mesh;
        let dt = mesh.dt();
        let zs: Vec<Vec<f64>> = (0..=mesh.n_steps)
            .into_par_iter()
            .map(|i| gradient_field(traj, i))
            .collect();
        let per_path: Vec<[f64; 3]> = ensemble
            .paths
            .par_iter()
            .zip(&ensemble.last_inside)
            .map(|(w, &last)| {
                let mut sup = 0.0_f64;
                let mut zint = 0.0;
                let mut pen = 0.0;
                for i in 0..=last {
                    let y = interpolate(&grid, &traj.fields[i], w[i]).expect("inside");
                    sup = sup.max(y * y);
                    if i < mesh.n_steps {
                        let z = interpolate(&grid, &zs[i], w[i]).expect("inside");
                        zint += z * z * dt;
                        pen += interpolate(&grid, &sol.penalty_density.fields[i], w[i])
                            .expect("inside")
                            * dt;
                    }
                }
                [sup, zint, pen * pen]
            })
            .collect();
        let m = per_path.len() as f64;
        let avg = |k: usize| per_path.iter().map(|v| v[k]).sum::<f64>() / m;
        members.push(EnergyStats {
            n: sol.n,
            control_norm_sq: sol.control.norm_sq(),
            sup_y_sq: avg(0),
            int_z_sq: avg(1),
            penalty_sq: avg(2),
        });
    }
    let stat = |m: &EnergyStats, k: usize| [m.sup_y_sq, m.int_z_sq, m.penalty_sq][k];
    let mut max = [0.0_f64; 3];
    let mut min = [f64::INFINITY; 3];
    for m in &members {
        for k in 0..3 {
            max[k] = max[k].max(stat(m, k));
            min[k] = min[k].min(stat(m, k));
        }
    }
    let ratio = [0, 1, 2].map(|k| if max[k] == 0.0 { 1.0 } else { max[k] / min[k] });
    Ok(EnergyReport {
        members,
        max,
        min,
        ratio,
    })
}

/// `max_t` of the ensemble mean of `((Y_t − L(t,W_t))⁻)⁴`.
pub fn path_violation_l4(
    problem: &ProblemSpec,
    sol: &PenalizedSolution,
    ensemble: &PathEnsemble,
) -> Result<f64> {
    let traj = &sol.traj;
    ensemble.check_solution(traj)?;
    let mesh = traj.mesh;
    let worst = (0..mesh.n_steps)
        .into_par_iter()
        .map(|i| {
            let t = mesh.time(i);
            let mut acc = 0.0;
            let mut c = 0usize;
            for (w, &last) in ensemble.paths.iter().zip(&ensemble.last_inside) {
                if i > last {
                    continue;
                }
                let y = interpolate(&traj.grid, &traj.fields[i], w[i]).expect("inside");
                let neg = ((problem.obstacle.value)(t, w[i]) - y).max(0.0);
                acc += neg.powi(4);
                c += 1;
            }
            if c == 0 {
                0.0
            } else {
                acc / c as f64
            }
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Family, Obstacle};
    use crate::skeleton::{solve_penalized, Control};
    use std::sync::Arc;

    #[test]
    fn ensemble_is_reproducible_and_starts_in_the_box() {
        let grid = Grid::new(-2.0, 2.0, 41).unwrap();
        let mesh = TimeMesh::new(1.0, 50).unwrap();
        let a = PathEnsemble::sample(grid, mesh, 500, 9).unwrap();
        let b = PathEnsemble::sample(grid, mesh, 500, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.start_points.iter().all(|&x| (-2.0..=2.0).contains(&x)));
        assert!(a.stopped_fraction() > 0.0 && a.stopped_fraction() < 1.0);
        for (w, &last) in a.paths.iter().zip(&a.last_inside) {
            assert!(w[..=last].iter().all(|&x| (-2.0..=2.0).contains(&x)));
        }
        let inc: Vec<f64> = a.paths.iter().flat_map(|w| w.windows(2).map(|p| p[1] - p[0])).collect();
        let (m, se) = mean_se(&inc);
        assert!(m.abs() < 5.0 * se);
        assert!(PathEnsemble::sample(grid, mesh, 0, 1).is_err());
    }

    #[test]
    fn constant_solution_has_zero_residual() {
        let mut p = ProblemSpec::default_for(Family::HeatObstacle);
        p.terminal = Arc::new(|_| 0.7);
        p.obstacle = Obstacle::constant(-1.0e6);
        let mesh = TimeMesh::new(1.0, 20).unwrap();
        let mut sol = solve_penalized(&p, &Control::zeros(mesh, 1), 1000, &mesh).unwrap();
        for row in sol.traj.fields.iter_mut() {
            row.fill(0.7);
        }
        let ens = PathEnsemble::sample(p.grid, mesh, 200, 1).unwrap();
        assert_eq!(bsde_residual(&p, &sol, &ens).unwrap(), 0.0);
    }

    #[test]
    fn zero_problem_energy_vanishes() {
        let mut p = ProblemSpec::default_for(Family::HeatObstacle);
        p.terminal = Arc::new(|_| 0.0);
        p.obstacle = Obstacle::constant(-1.0e6);
        let mesh = TimeMesh::new(1.0, 20).unwrap();
        let sol = solve_penalized(&p, &Control::zeros(mesh, 1), 1000, &mesh).unwrap();
        let ens = PathEnsemble::sample(p.grid, mesh, 200, 1).unwrap();
        let r = path_energy_bounds(&[sol], &ens).unwrap();
        assert_eq!(r.max, [0.0; 3]);
        assert_eq!(r.ratio, [1.0; 3]);
        assert!(r.all_finite());
    }

    #[test]
    fn constant_integrand_has_no_gap() {
        let grid = Grid::new(-3.0, 3.0, 61).unwrap();
        let mesh = TimeMesh::new(1.0, 100).unwrap();
        let ens = PathEnsemble::sample(grid, mesh, 1000, 4).unwrap();
        let r = star_integral_check(|_, _| 2.5, |_, _| 0.0, &ens);
        assert!(r.mean_gap.abs() < 1e-12 && r.mean_abs_gap < 1e-12);
        assert!(r.within_se(3.0));
    }

    #[test]
    fn mesh_mismatch_is_rejected() {
        let p = ProblemSpec::default_for(Family::HeatObstacle);
        let mesh = TimeMesh::new(1.0, 20).unwrap();
        let sol = solve_penalized(&p, &Control::zeros(mesh, 1), 1000, &mesh).unwrap();
        let ens = PathEnsemble::sample(p.grid, TimeMesh::new(1.0, 21).unwrap(), 10, 1).unwrap();
        assert!(matches!(bsde_residual(&p, &sol, &ens), Err(Error::Domain(_))));
    }
}
