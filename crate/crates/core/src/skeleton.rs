//! Deterministic controlled obstacle problem.
//!
//! The backward equation
//!
//! ```text
//! du + [½Δu + ∂ₓg(u,∇u) + f(u,∇u) + Σ_j h_j(u,∇u) k^j] dt = −n (u − L)⁻ dt,   u(T) = Φ
//! ```
//!
//! is marched from `t = T` down to `t = 0`. Each step treats ½Δ by
//! Crank–Nicolson (backward Euler for the first two steps off the terminal
//! datum), the first-order terms explicitly with coefficients frozen at the
//! step's starting state, and then applies the barrier as a
//! separate pointwise step: either the exact implicit penalty update or a
//! projection onto `{u ≥ L}`. The projection scheme is the limit of the
//! penalty scheme as `n → ∞` at fixed `Δt`, which makes it the reference for
//! every penalization test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence_into, gradient_into, Grid, TimeMesh, Trajectory};
use crate::noise::NoisePath;
use crate::problem::ProblemSpec;
use crate::tridiag::SymmetricToeplitz;

/// Discretised Cameron–Martin element: row `i` is `k(t_i)` and drives the
/// step over `[t_i, t_{i+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub mesh: TimeMesh,
    pub n_modes: usize,
    /// Row-major `n_steps × n_modes`.
    pub values: Vec<f64>,
}

impl Control {
    pub fn zeros(mesh: TimeMesh, n_modes: usize) -> Self {
        Control {
            mesh,
            n_modes,
            values: vec![0.0; mesh.n_steps * n_modes],
        }
    }

    pub fn from_fn(mesh: TimeMesh, n_modes: usize, k: impl Fn(f64, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(mesh.n_steps * n_modes);
        for i in 0..mesh.n_steps {
            let t = mesh.time(i);
            for j in 0..n_modes {
                values.push(k(t, j));
            }
        }
        Control {
            mesh,
            n_modes,
            values,
        }
    }

    pub fn new(mesh: TimeMesh, n_modes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_steps * n_modes {
            return Err(Error::Domain(format!(
                "control needs {}×{} values, got {}",
                mesh.n_steps,
                n_modes,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("control has non-finite entries".into()));
        }
        Ok(Control {
            mesh,
            n_modes,
            values,
        })
    }

    #[inline]
    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.n_modes..(step + 1) * self.n_modes]
    }

    /// `∫₀ᵀ ‖k(s)‖²_{ℓ²} ds` on the mesh.
    pub fn norm_sq(&self) -> f64 {
        self.mesh.dt() * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    /// Membership in `S_N = {k : ∫‖k‖² ≤ N}`.
    pub fn in_ball(&self, radius_sq: f64) -> bool {
        self.norm_sq() <= radius_sq
    }

    pub fn max_row_norm(&self) -> f64 {
        self.values
            .chunks(self.n_modes.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Control {
        Control {
            values: self.values.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, other: &Control) -> Result<Control> {
        if self.mesh != other.mesh || self.n_modes != other.n_modes {
            return Err(Error::Domain("controls live on different meshes".into()));
        }
        Ok(Control {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        })
    }

    /// CSV with one row per step and one column per mode.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.n_modes).map(|j| format!("k{}", j + 1)).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for i in 0..self.mesh.n_steps {
            write!(w, "{}", self.mesh.time(i))?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// How the barrier enters a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Barrier {
    Penalty(f64),
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `max_t |u_t|_H² + Δt Σ |u_t|_V²`.
    pub energy: f64,
    /// `‖(u − L)⁻‖²_{L²(dt,dx)}`, integrating the penalty relaxation inside
    /// each step exactly (see [`PenalizedSolution`]).
    pub violation_sq: f64,
    /// `n · violation_sq`.
    pub penalty_l2: f64,
    /// `max_{t<T} (h Σ ((u−L)⁻)⁴)^{1/4}`.
    pub violation_l4_max: f64,
    /// `min_{t<T, x} (u − L)`.
    pub min_gap: f64,
}

/// Solution of the penalized equation for one `n`.
///
/// `penalty_density` holds `n (u − L)⁻` at the nodes. When `nΔt ≫ 1` the
/// relaxation of an obstacle violation happens on a time scale `1/n` well
/// below the step, so the violation integral in [`Diagnostics`] integrates
/// the penalty step's own flow `dv/dτ = −n v` from the predictor value rather
/// than sampling the post-step value once per step.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    pub traj: Trajectory,
    pub penalty_density: Trajectory,
    pub n: u64,
    pub control: Control,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSolution {
    pub traj: Trajectory,
    /// Approximates the reflecting measure's density.
    pub measure_density: Trajectory,
    /// Last penalty parameter, `None` for the projection scheme.
    pub n_final: Option<u64>,
    pub cauchy_gap: f64,
    /// `(n, ht_distance(u^{n/2}, u^n))` for each doubling.
    pub gap_history: Vec<(u64, f64)>,
    pub converged: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub n0: u64,
    pub n_max: u64,
    pub tol: f64,
}

impl PenaltySchedule {
    pub fn check(&self) -> Result<()> {
        if self.n0 == 0 || self.n_max < self.n0 || !(self.tol > 0.0) {
            return Err(Error::Config(format!("invalid penalty schedule {self:?}")));
        }
        Ok(())
    }
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            n0: 1_000,
            n_max: 10_000_000,
            tol: 1e-3,
        }
    }
}

pub(crate) struct MarchOutput {
    pub traj: Trajectory,
    pub density: Trajectory,
    pub violation_sq: f64,
}

/// Noise input for a march: increments and `√ε`.
pub(crate) struct NoiseInput<'a> {
    pub path: &'a NoisePath,
    pub sqrt_eps: f64,
}

/// Rejects meshes on which the explicit first-order terms are unstable.
pub fn stability_check(problem: &ProblemSpec, mesh: &TimeMesh, kmax: f64) -> Result<()> {
    let lip = problem.coefficients.lipschitz;
    let dt = mesh.dt();
    let h = problem.grid.spacing();
    let reaction = dt * (lip.c_f + lip.c_h * kmax);
    let peclet = h * (lip.c_f + lip.c_g + lip.beta * kmax);
    if lip.alpha >= 0.5 {
        return Err(Error::Config(format!(
            "explicit flux with alpha = {} is not dominated by ½Δ",
            lip.alpha
        )));
    }
    if reaction > 1.0 {
        return Err(Error::Config(format!(
            "Δt·(c_f + c_h·max‖k‖) = {reaction:.3} exceeds 1; refine the time mesh"
        )));
    }
    if peclet > 1.0 {
        return Err(Error::Config(format!(
            "cell Péclet number h·(c_f + c_g + β·max‖k‖) = {peclet:.3} exceeds 1; refine the grid"
        )));
    }
    Ok(())
}

pub(crate) fn check_inputs(
    problem: &ProblemSpec,
    control: &Control,
    mesh: &TimeMesh,
) -> Result<()> {
    mesh.check()?;
    problem.require_solvable()?;
    if control.mesh != *mesh {
        return Err(Error::Domain("control mesh differs from the solver mesh".into()));
    }
    if control.n_modes != problem.n_modes() {
        return Err(Error::Domain(format!(
            "control has {} modes, problem has {}",
            control.n_modes,
            problem.n_modes()
        )));
    }
    if (mesh.t_final - problem.horizon).abs() > 1e-12 * problem.horizon {
        return Err(Error::Domain(format!(
            "mesh horizon {} differs from problem horizon {}",
            mesh.t_final, problem.horizon
        )));
    }
    stability_check(problem, mesh, control.max_row_norm())
}

/// Backward Euler steps taken from the terminal datum before switching to
/// Crank–Nicolson, to damp the stiff modes of steep data.
const EULER_START_STEPS: usize = 2;

/// Reversed-time semi-implicit march shared by the deterministic and the
/// stochastic solvers. Inputs are assumed checked.
pub(crate) fn march(
    problem: &ProblemSpec,
    mesh: &TimeMesh,
    control: &Control,
    noise: Option<NoiseInput<'_>>,
    barrier: Barrier,
) -> Result<MarchOutput> {
    let grid: Grid = problem.grid;
    let n = grid.n_nodes;
    let h = grid.spacing();
    let dt = mesh.dt();
    let coef = &problem.coefficients;
    let weights = &coef.mode_weights;
    let xs = grid.nodes();

    let r = 0.5 * dt / (h * h);
    // Implicit αΔ balanced by an explicit −αΔ keeps the explicit flux, whose
    // z-derivative is bounded by α, stable under Crank–Nicolson.
    let stab = coef.lipschitz.alpha * dt / (h * h);
    let euler = SymmetricToeplitz::heat(n - 2, r + stab);
    let trapezoid = SymmetricToeplitz::heat(n - 2, 0.5 * r + stab);

    let mut traj = Trajectory::zeros(grid, *mesh);
    let mut density = Trajectory::zeros(grid, *mesh);
    let terminal = problem.terminal_field().values;
    let (left, right) = (terminal[0], terminal[n - 1]);
    traj.fields[mesh.n_steps] = terminal;

    let noise = noise.filter(|nz| nz.sqrt_eps != 0.0);

    let mut grad = vec![0.0; n];
    let mut gvals = vec![0.0; n];
    let mut divg = vec![0.0; n];
    let mut rhs = vec![0.0; n - 2];
    let mut interior = vec![0.0; n - 2];
    let mut violation_sq = 0.0;
    // ∫₀^{Δt} e^{−2nτ} dτ for the penalty relaxation inside a step.
    let relax = match barrier {
        Barrier::Penalty(pn) if pn > 0.0 => (1.0 - (-2.0 * pn * dt).exp()) / (2.0 * pn),
        Barrier::Penalty(_) => dt,
        Barrier::Projection => 0.0,
    };

    for step in (0..mesh.n_steps).rev() {
        let t_next = mesh.time(step + 1);
        let t_now = mesh.time(step);
        let crank_nicolson = step + EULER_START_STEPS < mesh.n_steps;
        let u = &traj.fields[step + 1];
        gradient_into(u, h, &mut grad);
        let kdot: f64 = control
            .row(step)
            .iter()
            .zip(weights)
            .map(|(k, c)| k * c)
            .sum();
        let bdot: f64 = match &noise {
            Some(nz) => {
                nz.sqrt_eps
                    * nz.path
                        .row(step)
                        .iter()
                        .zip(weights)
                        .map(|(b, c)| b * c)
                        .sum::<f64>()
            }
            None => 0.0,
        };
        for i in 0..n {
            gvals[i] = (coef.g)(t_next, xs[i], u[i], grad[i]);
        }
        divergence_into(&gvals, h, &mut divg);
        for i in 1..n - 1 {
            let (x, y, z) = (xs[i], u[i], grad[i]);
            let hs = (coef.h_shape)(t_next, x, y, z);
            let drift = divg[i] + (coef.f)(t_next, x, y, z) + hs * kdot;
            let second_difference = u[i - 1] - 2.0 * y + u[i + 1];
            let explicit_diffusion = if crank_nicolson {
                (0.5 * r - stab) * second_difference
            } else {
                -stab * second_difference
            };
            let mut v = y + explicit_diffusion + dt * drift;
            if noise.is_some() {
                v += hs * bdot;
            }
            rhs[i - 1] = v;
        }
        let (solver, ri) = if crank_nicolson {
            (&trapezoid, 0.5 * r + stab)
        } else {
            (&euler, r + stab)
        };
        rhs[0] += ri * left;
        rhs[n - 3] += ri * right;
        solver.solve(&rhs, &mut interior);

        let out = &mut traj.fields[step];
        let dens = &mut density.fields[step];
        out[0] = left;
        out[n - 1] = right;
        for i in 1..n - 1 {
            let p = interior[i - 1];
            let l = (problem.obstacle.value)(t_now, xs[i]);
            let (v, d) = if p < l {
                match barrier {
                    Barrier::Penalty(pn) => {
                        let a = dt * pn;
                        let v = (p + a * l) / (1.0 + a);
                        violation_sq += h * (l - p) * (l - p) * relax;
                        (v, pn * (l - v).max(0.0))
                    }
                    Barrier::Projection => (l, (l - p) / dt),
                }
            } else {
                (p, 0.0)
            };
            out[i] = v;
            dens[i] = d;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                time: t_now,
            });
        }
    }
    Ok(MarchOutput {
        traj,
        density,
        violation_sq,
    })
}

pub(crate) fn diagnostics(
    problem: &ProblemSpec,
    traj: &Trajectory,
    violation_sq: f64,
    n: f64,
) -> Diagnostics {
    let grid = traj.grid;
    let h = grid.spacing();
    let mut min_gap = f64::INFINITY;
    let mut l4_max = 0.0_f64;
    for (step, u) in traj.fields.iter().enumerate().take(traj.mesh.n_steps) {
        let t = traj.mesh.time(step);
        let mut l4 = 0.0;
        for (i, &v) in u.iter().enumerate() {
            let gap = v - (problem.obstacle.value)(t, grid.x(i));
            min_gap = min_gap.min(gap);
            let neg = (-gap).max(0.0);
            l4 += h * neg.powi(4);
        }
        l4_max = l4_max.max(l4.powf(0.25));
    }
    Diagnostics {
        energy: traj.energy(),
        violation_sq,
        penalty_l2: n * violation_sq,
        violation_l4_max: l4_max,
        min_gap,
    }
}

/// Penalized equation for a single `n`.
pub fn solve_penalized(
    problem: &ProblemSpec,
    control: &Control,
    n: u64,
    mesh: &TimeMesh,
) -> Result<PenalizedSolution> {
    check_inputs(problem, control, mesh)?;
    penalized_unchecked(problem, control, n, mesh, None)
}

pub(crate) fn penalized_unchecked(
    problem: &ProblemSpec,
    control: &Control,
    n: u64,
    mesh: &TimeMesh,
    noise: Option<NoiseInput<'_>>,
) -> Result<PenalizedSolution> {
    let out = march(problem, mesh, control, noise, Barrier::Penalty(n as f64))?;
    let diagnostics = diagnostics(problem, &out.traj, out.violation_sq, n as f64);
    Ok(PenalizedSolution {
        traj: out.traj,
        penalty_density: out.density,
        n,
        control: control.clone(),
        diagnostics,
    })
}

/// Projection scheme: the barrier step is `u ← max(u, L)` and the measure
/// density is the projection correction divided by `Δt`.
pub fn solve_projected(
    problem: &ProblemSpec,
    control: &Control,
    mesh: &TimeMesh,
) -> Result<SkeletonSolution> {
    check_inputs(problem, control, mesh)?;
    let out = march(problem, mesh, control, None, Barrier::Projection)?;
    Ok(SkeletonSolution {
        traj: out.traj,
        measure_density: out.density,
        n_final: None,
        cauchy_gap: 0.0,
        gap_history: Vec::new(),
        converged: true,
        warning: None,
    })
}

/// Penalized solves along `n = n₀, 2n₀, 4n₀, …` until consecutive solutions
/// are within `tol` in the `H_T` distance.
pub fn solve_skeleton(
    problem: &ProblemSpec,
    control: &Control,
    mesh: &TimeMesh,
    schedule: &PenaltySchedule,
) -> Result<SkeletonSolution> {
    check_inputs(problem, control, mesh)?;
    schedule.check()?;
    skeleton_unchecked(problem, control, mesh, schedule)
}

pub(crate) fn skeleton_unchecked(
    problem: &ProblemSpec,
    control: &Control,
    mesh: &TimeMesh,
    schedule: &PenaltySchedule,
) -> Result<SkeletonSolution> {
    let mut prev = penalized_unchecked(problem, control, schedule.n0, mesh, None)?;
    let mut history = Vec::new();
    let mut n = schedule.n0;
    loop {
        if n > schedule.n_max / 2 {
            let gap = history.last().map(|&(_, g)| g).unwrap_or(f64::INFINITY);
            return Ok(SkeletonSolution {
                traj: prev.traj,
                measure_density: prev.penalty_density,
                n_final: Some(n),
                cauchy_gap: gap,
                gap_history: history,
                converged: false,
                warning: Some(format!(
                    "penalty schedule reached n_max = {} with Cauchy gap {gap:.3e} > tol {:.3e}",
                    schedule.n_max, schedule.tol
                )),
            });
        }
        n *= 2;
        let next = penalized_unchecked(problem, control, n, mesh, None)?;
        let gap = next.traj.ht_distance(&prev.traj)?;
        history.push((n, gap));
        prev = next;
        if gap < schedule.tol {
            return Ok(SkeletonSolution {
                traj: prev.traj,
                measure_density: prev.penalty_density,
                n_final: Some(n),
                cauchy_gap: gap,
                gap_history: history,
                converged: true,
                warning: None,
            });
        }
    }
}

/// `|Δt·h·Σ_{t,x} (u − L)·ρ|` for a solution with measure density `ρ`.
///
/// The density is supported where the scheme pushed the state up to or
/// towards the barrier, so the positive-part pairing `(u−L)⁺·ρ` vanishes
/// identically (checked here) and the returned value is the negative-part
/// pairing, which tends to zero as the penalization tightens.
pub fn complementarity_residual(
    problem: &ProblemSpec,
    traj: &Trajectory,
    density: &Trajectory,
) -> Result<f64> {
    if traj.grid != density.grid || traj.mesh != density.mesh {
        return Err(Error::Domain("density and trajectory meshes differ".into()));
    }
    let grid = traj.grid;
    let h = grid.spacing();
    let dt = traj.mesh.dt();
    let mut positive = 0.0;
    let mut negative = 0.0;
    for (step, (u, rho)) in traj.fields.iter().zip(&density.fields).enumerate() {
        let t = traj.mesh.time(step);
        for i in 0..grid.n_nodes {
            if rho[i] == 0.0 {
                continue;
            }
            let gap = u[i] - (problem.obstacle.value)(t, grid.x(i));
            positive += gap.max(0.0) * rho[i];
            negative += (-gap).max(0.0) * rho[i];
        }
    }
    assert!(
        positive == 0.0,
        "measure density charges nodes strictly above the barrier"
    );
    Ok(dt * h * negative)
}

impl PenalizedSolution {
    pub fn complementarity_residual(&self, problem: &ProblemSpec) -> Result<f64> {
        complementarity_residual(problem, &self.traj, &self.penalty_density)
    }
}

impl SkeletonSolution {
    pub fn complementarity_residual(&self, problem: &ProblemSpec) -> Result<f64> {
        complementarity_residual(problem, &self.traj, &self.measure_density)
    }
}

/// Largest `n‖(u^n − L)⁻‖²_{L²}` over a family of controls.
pub fn penalty_l2_estimate(
    problem: &ProblemSpec,
    controls: &[Control],
    n: u64,
    mesh: &TimeMesh,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for k in controls {
        worst = worst.max(solve_penalized(problem, k, n, mesh)?.diagnostics.penalty_l2);
    }
    Ok(worst)
}

/// Pointwise `(a)⁺·(a)⁻` over a trajectory; zero by construction.
pub fn part_product_max(problem: &ProblemSpec, traj: &Trajectory) -> f64 {
    let grid = traj.grid;
    let mut worst = 0.0_f64;
    for (step, u) in traj.fields.iter().enumerate() {
        let t = traj.mesh.time(step);
        for (i, &v) in u.iter().enumerate() {
            let gap = v - (problem.obstacle.value)(t, grid.x(i));
            worst = worst.max((gap.max(0.0) * (-gap).max(0.0)).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Family, Obstacle};
    use std::sync::Arc;

    fn heat_problem(n_nodes: usize) -> ProblemSpec {
        let mut p = ProblemSpec::default_for(Family::HeatObstacle)
            .with_inactive_obstacle();
        p.grid = Grid::new(-4.0, 4.0, n_nodes).unwrap();
        p.terminal = Arc::new(|x| (-x * x / 0.1).exp());
        p
    }

    #[test]
    fn constant_terminal_is_stationary() {
        let mut p = ProblemSpec::default_for(Family::HeatObstacle);
        p.terminal = Arc::new(|_| 1.0);
        p.obstacle = Obstacle::constant(0.0);
        let mesh = TimeMesh::new(1.0, 50).unwrap();
        let k = Control::zeros(mesh, 1);
        let sol = solve_penalized(&p, &k, 1000, &mesh).unwrap();
        for row in &sol.traj.fields {
            for v in row {
                assert!((v - 1.0).abs() < 1e-13, "{v}");
            }
        }
        assert!(sol.penalty_density.fields.iter().flatten().all(|&d| d == 0.0));
    }

    #[test]
    fn terminal_value_is_kept() {
        let p = ProblemSpec::default_for(Family::QuasilinearFull);
        let mesh = TimeMesh::new(1.0, 40).unwrap();
        let k = Control::from_fn(mesh, 4, |t, j| (t + j as f64).sin());
        let sol = solve_penalized(&p, &k, 5000, &mesh).unwrap();
        assert_eq!(sol.traj.fields[40], p.terminal_field().values);
        assert!(sol.penalty_density.fields.iter().flatten().all(|&d| d >= 0.0));
        // density vanishes wherever u ≥ L
        for (step, (u, d)) in sol.traj.fields.iter().zip(&sol.penalty_density.fields).enumerate() {
            let l = p.obstacle.sample(&p.grid, mesh.time(step));
            for i in 0..u.len() {
                if u[i] >= l[i] {
                    assert_eq!(d[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn heat_obstacle_penalty_keeps_solution_near_barrier() {
        let p = ProblemSpec::default_for(Family::HeatObstacle);
        let mesh = TimeMesh::new(1.0, 200).unwrap();
        let k = Control::zeros(mesh, 1);
        let sol = solve_penalized(&p, &k, 10_000, &mesh).unwrap();
        assert!(sol.diagnostics.min_gap >= -0.05, "{:?}", sol.diagnostics);
        assert!(sol.penalty_density.fields.iter().flatten().any(|&d| d > 0.0));
        assert!(part_product_max(&p, &sol.traj) == 0.0);
    }

    #[test]
    fn projection_respects_barrier_exactly() {
        let p = ProblemSpec::default_for(Family::HeatObstacle);
        let mesh = TimeMesh::new(1.0, 100).unwrap();
        let sol = solve_projected(&p, &Control::zeros(mesh, 1), &mesh).unwrap();
        for (step, u) in sol.traj.fields.iter().enumerate().take(100) {
            let l = p.obstacle.sample(&p.grid, mesh.time(step));
            assert!(u.iter().zip(&l).all(|(a, b)| a >= b));
        }
        assert_eq!(sol.complementarity_residual(&p).unwrap(), 0.0);
    }

    #[test]
    fn inactive_barrier_schemes_coincide() {
        let p = heat_problem(101);
        let mesh = TimeMesh::new(1.0, 50).unwrap();
        let k = Control::zeros(mesh, 1);
        let pen = solve_penalized(&p, &k, 1000, &mesh).unwrap();
        let proj = solve_projected(&p, &k, &mesh).unwrap();
        assert!(pen.traj.ht_distance(&proj.traj).unwrap() <= 1e-8);
        let sk = solve_skeleton(&p, &k, &mesh, &PenaltySchedule::default()).unwrap();
        assert_eq!(sk.gap_history.len(), 1);
        assert_eq!(sk.cauchy_gap, 0.0);
        assert!(sk.converged);
        assert_eq!(pen.complementarity_residual(&p).unwrap(), 0.0);
        assert_eq!(penalty_l2_estimate(&p, &[k], 1000, &mesh).unwrap(), 0.0);
    }

    #[test]
    fn non_converged_schedule_is_flagged() {
        let p = ProblemSpec::default_for(Family::HeatObstacle);
        let mesh = TimeMesh::new(1.0, 50).unwrap();
        let k = Control::zeros(mesh, 1);
        let sched = PenaltySchedule {
            n0: 1000,
            n_max: 4000,
            tol: 1e-12,
        };
        let sk = solve_skeleton(&p, &k, &mesh, &sched).unwrap();
        assert!(!sk.converged);
        assert!(sk.warning.as_deref().unwrap().contains("n_max"));
        assert_eq!(sk.n_final, Some(4000));
    }

    #[test]
    fn input_errors() {
        let p = ProblemSpec::default_for(Family::QuasilinearFull);
        let mesh = TimeMesh::new(1.0, 40).unwrap();
        let other = TimeMesh::new(1.0, 41).unwrap();
        assert!(matches!(
            solve_penalized(&p, &Control::zeros(other, 4), 10, &mesh),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            solve_penalized(&p, &Control::zeros(mesh, 2), 10, &mesh),
            Err(Error::Domain(_))
        ));
        let mut bad = p.clone();
        bad.coefficients.lipschitz.alpha = 0.45;
        bad.coefficients.lipschitz.beta = 0.9;
        assert!(matches!(
            solve_penalized(&bad, &Control::zeros(mesh, 4), 10, &mesh),
            Err(Error::Validation(_))
        ));
        // A huge control trips the explicit-step stability check.
        let k = Control::from_fn(mesh, 4, |_, _| 1e4);
        assert!(matches!(
            solve_penalized(&p, &k, 10, &mesh),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        p.coefficients.f = Arc::new(|t, _, _, _| if t < 0.5 { f64::NAN } else { 0.0 });
        // Coefficients are frozen at t_{i+1}; probes would hit the NaN too,
        // so this goes through the march directly.
        let mesh = TimeMesh::new(1.0, 10).unwrap();
        let k = Control::zeros(mesh, 1);
        let err = march(&p, &mesh, &k, None, Barrier::Penalty(10.0)).err().unwrap();
        match err {
            Error::Divergence { step, .. } => assert_eq!(step, 3),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn control_norm_and_ball() {
        let mesh = TimeMesh::new(2.0, 100).unwrap();
        let k = Control::from_fn(mesh, 2, |_, j| if j == 0 { 1.5 } else { 0.0 });
        assert!((k.norm_sq() - 4.5).abs() < 1e-12);
        assert!(k.in_ball(4.5));
        assert!(!k.in_ball(4.4));
        assert!((k.scaled(2.0).norm_sq() - 18.0).abs() < 1e-12);
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 101);
        assert!(text.starts_with("t,k1,k2\n0,1.5,0\n"));
    }
}
