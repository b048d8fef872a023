//! Obstacle-problem data: coefficients `f`, `g`, `h`, barrier `L`, terminal
//! datum `Φ`, and the checks that the data satisfy the structural hypotheses
//! (Lipschitz bounds, contraction, ℓ² envelope of the noise coefficients,
//! barrier regularity and terminal compatibility).
//!
//! The noise coefficients are separable, `h_j = c_j · h_shape`, so the
//! infinite family is truncated to `J` modes with an analytic tail
//! `(Σ_{j>J} c_j²)^{1/2}`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

/// `(t, x, y, z) ↦ ℝ` with `y = u(t,x)` and `z = ∇u(t,x)`.
pub type CoefFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(t, x) ↦ ℝ`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `x ↦ ℝ`.
pub type SpaceFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Declared Lipschitz constants. `c_*` bound the `y`-dependence, `alpha` the
/// `z`-dependence of `g`, `beta` the `z`-dependence of the ℓ² vector `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub c_f: f64,
    pub c_h: f64,
    pub c_g: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Lipschitz {
    pub fn contraction_margin(&self) -> f64 {
        0.5 - (self.alpha + 0.5 * self.beta * self.beta)
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub f: CoefFn,
    pub g: CoefFn,
    pub h_shape: CoefFn,
    pub mode_weights: Vec<f64>,
    pub lipschitz: Lipschitz,
    pub hbar: SpaceFn,
    /// `(Σ_{j>J} c_j²)^{1/2}` for the infinite family this truncation came
    /// from; zero when the family is finite.
    pub tail_norm: f64,
}

impl CoefficientSet {
    pub fn n_modes(&self) -> usize {
        self.mode_weights.len()
    }

    pub fn weights_l2(&self) -> f64 {
        self.mode_weights.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("mode_weights", &self.mode_weights)
            .field("lipschitz", &self.lipschitz)
            .field("tail_norm", &self.tail_norm)
            .finish_non_exhaustive()
    }
}

/// Barrier `L(t,x)` with its time derivative, gradient and Laplacian.
#[derive(Clone)]
pub struct Obstacle {
    pub value: SpaceTimeFn,
    pub dt: SpaceTimeFn,
    pub dx: SpaceTimeFn,
    pub laplacian: SpaceTimeFn,
}

impl Obstacle {
    pub fn constant(level: f64) -> Self {
        let zero: SpaceTimeFn = Arc::new(|_, _| 0.0);
        Obstacle {
            value: Arc::new(move |_, _| level),
            dt: zero.clone(),
            dx: zero.clone(),
            laplacian: zero,
        }
    }

    pub fn sample(&self, grid: &Grid, t: f64) -> Vec<f64> {
        (0..grid.n_nodes).map(|i| (self.value)(t, grid.x(i))).collect()
    }
}

impl fmt::Debug for Obstacle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Obstacle { .. }")
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub coefficients: CoefficientSet,
    pub obstacle: Obstacle,
    pub terminal: SpaceFn,
    pub horizon: f64,
    pub grid: Grid,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("coefficients", &self.coefficients)
            .field("horizon", &self.horizon)
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

/// Bundled problem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    HeatObstacle,
    LinearAdditive,
    QuasilinearFull,
}

impl Family {
    pub const ALL: [Family; 3] = [
        Family::HeatObstacle,
        Family::LinearAdditive,
        Family::QuasilinearFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::HeatObstacle => "heat_obstacle",
            Family::LinearAdditive => "linear_additive",
            Family::QuasilinearFull => "quasilinear_full",
        }
    }

    /// Default parameters and domain for the family.
    pub fn defaults(self) -> FamilyParams {
        match self {
            Family::HeatObstacle => FamilyParams {
                sigma: 0.0,
                n_modes: 1,
                mode_decay: 0.0,
            },
            Family::LinearAdditive => FamilyParams {
                sigma: 0.3,
                n_modes: 1,
                mode_decay: 0.0,
            },
            Family::QuasilinearFull => FamilyParams {
                sigma: 0.5,
                n_modes: 4,
                mode_decay: 0.5,
            },
        }
    }

    pub fn default_grid(self) -> Grid {
        match self {
            Family::HeatObstacle => Grid::new(-2.0, 2.0, 201),
            Family::LinearAdditive => Grid::new(-4.0, 4.0, 81),
            Family::QuasilinearFull => Grid::new(-3.0, 3.0, 121),
        }
        .expect("bundled grid is valid")
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem family `{s}`")))
    }
}

/// Numeric parameters shared by the bundled families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    /// Noise amplitude multiplying `h_shape`.
    pub sigma: f64,
    /// Number of retained Brownian modes `J`.
    pub n_modes: usize,
    /// Geometric decay of the mode weights, `c_j ∝ decay^{j−1}`.
    pub mode_decay: f64,
}

/// `c_j = (1 − q²)^{1/2} q^{j−1}` so that the infinite family has unit ℓ²
/// norm and the tail beyond `J` modes is exactly `q^J`.
pub fn geometric_weights(n_modes: usize, decay: f64) -> (Vec<f64>, f64) {
    let kappa = (1.0 - decay * decay).sqrt();
    let weights = (0..n_modes).map(|j| kappa * decay.powi(j as i32)).collect();
    (weights, decay.powi(n_modes as i32))
}

fn bump(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

impl ProblemSpec {
    pub fn bundled(family: Family, params: FamilyParams, grid: Grid, horizon: f64) -> Result<Self> {
        grid.check()?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if params.n_modes == 0 {
            return Err(Error::Config("noise.n_modes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&params.mode_decay) {
            return Err(Error::Config("noise.mode_decay must lie in [0, 1)".into()));
        }
        let (mode_weights, tail_norm) = geometric_weights(params.n_modes, params.mode_decay);
        let sigma = params.sigma;
        let zero: CoefFn = Arc::new(|_, _, _, _| 0.0);
        let spec = match family {
            Family::HeatObstacle => ProblemSpec {
                name: family.name().into(),
                coefficients: CoefficientSet {
                    f: zero.clone(),
                    g: zero,
                    h_shape: Arc::new(move |_, x, _, _| sigma * bump(x)),
                    mode_weights,
                    lipschitz: Lipschitz {
                        c_f: 0.0,
                        c_h: 0.0,
                        c_g: 0.0,
                        alpha: 0.01,
                        beta: 0.01,
                    },
                    hbar: Arc::new(move |x| sigma.abs() * bump(x)),
                    tail_norm,
                },
                obstacle: Obstacle::constant(0.0),
                terminal: Arc::new(|x| 1.0 - 2.0 * (-x * x / 0.05).exp()),
                horizon,
                grid,
            },
            Family::LinearAdditive => ProblemSpec {
                name: family.name().into(),
                coefficients: CoefficientSet {
                    f: zero.clone(),
                    g: zero,
                    h_shape: Arc::new(move |_, _, _, _| sigma),
                    mode_weights,
                    lipschitz: Lipschitz {
                        c_f: 0.0,
                        c_h: 0.0,
                        c_g: 0.0,
                        alpha: 0.01,
                        beta: 0.01,
                    },
                    hbar: Arc::new(move |_| sigma.abs()),
                    tail_norm,
                },
                obstacle: Obstacle::constant(-1.0e6),
                terminal: Arc::new(|x| (-x * x / 0.1).exp()),
                horizon,
                grid,
            },
            Family::QuasilinearFull => {
                let wl2 = mode_weights.iter().map(|c| c * c).sum::<f64>().sqrt();
                let t_end = horizon;
                let level = move |t: f64| 0.3 + 0.1 * (t_end - t) / t_end;
                let shape = |x: f64| (-x * x / 0.1).exp();
                ProblemSpec {
                    name: family.name().into(),
                    coefficients: CoefficientSet {
                        f: Arc::new(|_, x, y, z| -0.5 * y.sin() + 0.2 * z.cos() * bump(x)),
                        g: Arc::new(|_, x, y, z| 0.2 * z.tanh() + 0.1 * y.sin() * bump(x)),
                        h_shape: Arc::new(move |_, x, y, z| {
                            sigma * bump(x) * (1.0 + 0.25 * y.sin() + 0.2 * z.sin())
                        }),
                        mode_weights,
                        lipschitz: Lipschitz {
                            c_f: 0.5,
                            c_h: 0.25 * sigma.abs() * wl2,
                            c_g: 0.1,
                            alpha: 0.2,
                            beta: (0.2 * sigma.abs() * wl2).max(0.01),
                        },
                        hbar: Arc::new(move |x| 1.45 * sigma.abs() * wl2 * bump(x)),
                        tail_norm,
                    },
                    obstacle: Obstacle {
                        value: Arc::new(move |t, x| level(t) * shape(x)),
                        dt: Arc::new(move |_, x| -0.1 / t_end * shape(x)),
                        dx: Arc::new(move |t, x| level(t) * (-20.0 * x) * shape(x)),
                        laplacian: Arc::new(move |t, x| {
                            level(t) * (400.0 * x * x - 20.0) * shape(x)
                        }),
                    },
                    terminal: Arc::new(|x| 0.5 * (-x * x / 0.2).exp()),
                    horizon,
                    grid,
                }
            }
        };
        Ok(spec)
    }

    pub fn default_for(family: Family) -> Self {
        Self::bundled(family, family.defaults(), family.default_grid(), 1.0)
            .expect("bundled defaults are valid")
    }

    pub fn n_modes(&self) -> usize {
        self.coefficients.n_modes()
    }

    pub fn terminal_field(&self) -> Field {
        self.grid.sample(|x| (self.terminal)(x))
    }

    /// Same data with the noise coefficients switched off.
    pub fn without_noise(&self) -> Self {
        let mut p = self.clone();
        p.coefficients.h_shape = Arc::new(|_, _, _, _| 0.0);
        p.coefficients.hbar = Arc::new(|_| 0.0);
        p
    }

    /// Same data with the barrier moved far below the solution.
    pub fn with_inactive_obstacle(&self) -> Self {
        let mut p = self.clone();
        p.obstacle = Obstacle::constant(-1.0e6);
        p
    }

    pub fn eval_all(&self, t: f64, u: &Field, grad_u: &Field) -> Result<EvalRecord> {
        if u.grid != self.grid || grad_u.grid != self.grid {
            return Err(Error::Domain("fields are not on the problem grid".into()));
        }
        let c = &self.coefficients;
        let n = self.grid.n_nodes;
        let mut fval = vec![0.0; n];
        let mut gval = vec![0.0; n];
        let mut hvals = vec![vec![0.0; n]; c.n_modes()];
        for i in 0..n {
            let (x, y, z) = (self.grid.x(i), u.values[i], grad_u.values[i]);
            fval[i] = (c.f)(t, x, y, z);
            if !fval[i].is_finite() {
                return Err(Error::Evaluation { what: "f", node: i });
            }
            gval[i] = (c.g)(t, x, y, z);
            if !gval[i].is_finite() {
                return Err(Error::Evaluation { what: "g", node: i });
            }
            let hs = (c.h_shape)(t, x, y, z);
            if !hs.is_finite() {
                return Err(Error::Evaluation { what: "h", node: i });
            }
            for (hj, cj) in hvals.iter_mut().zip(&c.mode_weights) {
                hj[i] = cj * hs;
            }
        }
        let grid = self.grid;
        Ok(EvalRecord {
            fval: Field { grid, values: fval },
            gval: Field { grid, values: gval },
            hvals: hvals
                .into_iter()
                .map(|values| Field { grid, values })
                .collect(),
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Rejects data the solvers cannot run on. Terminal compatibility is a
    /// hypothesis of the limiting obstacle problem only; the penalized and
    /// projected schemes are well defined without it.
    pub fn require_solvable(&self) -> Result<ValidationReport> {
        let report = self.validate();
        let blocking: Vec<_> = report
            .checks
            .iter()
            .filter(|c| !c.passed && c.name != TERMINAL_CHECK)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        if blocking.is_empty() {
            Ok(report)
        } else {
            Err(Error::Validation(blocking.join("; ")))
        }
    }
}

/// Nodewise coefficient values.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub fval: Field,
    pub gval: Field,
    pub hvals: Vec<Field>,
}

impl EvalRecord {
    /// `(Σ_j h_j(x_i)²)^{1/2}` at each node.
    pub fn h_column_norms(&self) -> Vec<f64> {
        let n = self.fval.values.len();
        (0..n)
            .map(|i| self.hvals.iter().map(|h| h.values[i].powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

pub const CONTRACTION_CHECK: &str = "contraction";
pub const MODE_WEIGHTS_CHECK: &str = "mode_weights_l2";
pub const TERMINAL_CHECK: &str = "terminal_compatibility";
pub const LIPSCHITZ_CHECK: &str = "lipschitz_probes";
pub const ENVELOPE_CHECK: &str = "hbar_envelope";
pub const OBSTACLE_CHECK: &str = "obstacle_derivatives";
pub const FINITE_CHECK: &str = "finite_values";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Signed slack: positive when the check holds with room to spare.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Number of quasi-random probe points.
pub const N_PROBES: usize = 1000;
const PROBE_YZ: f64 = 5.0;
const LIPSCHITZ_SLACK: f64 = 1.01;

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * scale;
        i /= base;
        scale *= inv_base;
    }
    out
}

/// Halton points in `[0,T] × [x_min,x_max] × [−5,5]²`.
pub fn probe_points(problem: &ProblemSpec) -> Vec<[f64; 4]> {
    let g = &problem.grid;
    (1..=N_PROBES)
        .map(|k| {
            [
                problem.horizon * radical_inverse(k, 2),
                g.x_min + (g.x_max - g.x_min) * radical_inverse(k, 3),
                PROBE_YZ * (2.0 * radical_inverse(k, 5) - 1.0),
                PROBE_YZ * (2.0 * radical_inverse(k, 7) - 1.0),
            ]
        })
        .collect()
}

fn validate(problem: &ProblemSpec) -> ValidationReport {
    let c = &problem.coefficients;
    let lip = c.lipschitz;
    let mut checks = Vec::new();

    let margin = lip.contraction_margin();
    let in_range = lip.alpha > 0.0 && lip.alpha < 1.0 && lip.beta > 0.0 && lip.beta < 1.0;
    checks.push(CheckResult {
        name: CONTRACTION_CHECK.into(),
        passed: in_range && margin > 0.0,
        margin,
        detail: format!(
            "alpha + beta²/2 = {:.6} (alpha = {}, beta = {})",
            lip.alpha + 0.5 * lip.beta * lip.beta,
            lip.alpha,
            lip.beta
        ),
    });

    let wl2 = c.weights_l2();
    checks.push(CheckResult {
        name: MODE_WEIGHTS_CHECK.into(),
        passed: wl2 <= 1.0 + 1e-12,
        margin: 1.0 - wl2,
        detail: format!("(Σ c_j²)^(1/2) = {wl2:.6}"),
    });

    let g = &problem.grid;
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    let mut first_bad = None;
    for i in 0..g.n_nodes {
        let x = g.x(i);
        let gap = (problem.terminal)(x) - (problem.obstacle.value)(problem.horizon, x);
        if gap < worst {
            worst = gap;
        }
        if !(gap >= 0.0) {
            failures += 1;
            first_bad.get_or_insert(x);
        }
    }
    checks.push(CheckResult {
        name: TERMINAL_CHECK.into(),
        passed: failures == 0,
        margin: worst,
        detail: match first_bad {
            None => format!("min Φ − L(T,·) = {worst:.3e}"),
            Some(x) => format!("Φ < L(T,·) at {failures} nodes, first at x = {x}"),
        },
    });

    let probes = probe_points(problem);
    let mut non_finite: Option<String> = None;
    let mut note = |what: &str, p: &[f64; 4], v: f64| {
        if !v.is_finite() && non_finite.is_none() {
            non_finite = Some(format!(
                "{what} = {v} at (t, x, y, z) = ({}, {}, {}, {})",
                p[0], p[1], p[2], p[3]
            ));
        }
        v
    };

    // Lipschitz: secant pairs between neighbouring probes at a common (t,x),
    // plus local pairs with a small step in y and in z separately.
    let eta = 1e-4;
    let mut worst_ratio = 0.0_f64;
    let mut worst_name = String::new();
    let mut envelope_slack = f64::INFINITY;
    let mut envelope_at = [0.0; 4];
    for (k, p) in probes.iter().enumerate() {
        let q = &probes[(k + 1) % probes.len()];
        let [t, x, y, z] = *p;
        let pairs = [(q[2], q[3]), (y + eta, z), (y, z + eta)];
        let f0 = note("f", p, (c.f)(t, x, y, z));
        let g0 = note("g", p, (c.g)(t, x, y, z));
        let h0 = note("h", p, (c.h_shape)(t, x, y, z));
        let hb = note("hbar", p, (c.hbar)(x));
        let slack = hb - h0.abs() * wl2;
        if slack < envelope_slack {
            envelope_slack = slack;
            envelope_at = *p;
        }
        for (y2, z2) in pairs {
            let dy = (y - y2).abs();
            let dz = (z - z2).abs();
            let entries = [
                ("f", (f0 - (c.f)(t, x, y2, z2)).abs(), lip.c_f * (dy + dz)),
                ("g", (g0 - (c.g)(t, x, y2, z2)).abs(), lip.c_g * dy + lip.alpha * dz),
                (
                    "h",
                    wl2 * (h0 - (c.h_shape)(t, x, y2, z2)).abs(),
                    lip.c_h * dy + lip.beta * dz,
                ),
            ];
            for (name, lhs, rhs) in entries {
                // Pure round-off differences are ignored.
                if lhs <= 1e-13 * (dy + dz) {
                    continue;
                }
                let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
                if ratio > worst_ratio {
                    worst_ratio = ratio;
                    worst_name = format!("{name} at (t, x, y, z) = ({t:.4}, {x:.4}, {y:.4}, {z:.4})");
                }
            }
        }
    }
    checks.push(CheckResult {
        name: LIPSCHITZ_CHECK.into(),
        passed: worst_ratio <= LIPSCHITZ_SLACK,
        margin: LIPSCHITZ_SLACK - worst_ratio,
        detail: if worst_ratio == 0.0 {
            "all probed coefficients are constant in (y, z)".into()
        } else {
            format!("largest observed/declared ratio {worst_ratio:.4} for {worst_name}")
        },
    });
    checks.push(CheckResult {
        name: ENVELOPE_CHECK.into(),
        passed: envelope_slack >= -1e-12,
        margin: envelope_slack,
        detail: format!(
            "min hbar − |h| = {envelope_slack:.3e} at (t, x, y, z) = ({:.4}, {:.4}, {:.4}, {:.4})",
            envelope_at[0], envelope_at[1], envelope_at[2], envelope_at[3]
        ),
    });

    // Barrier derivatives against centred differences.
    let ob = &problem.obstacle;
    let step = 1e-4;
    let mut worst_obs = 0.0_f64;
    let mut worst_obs_at = String::new();
    for p in &probes {
        let [t, x, _, _] = *p;
        let l = |t: f64, x: f64| (ob.value)(t, x);
        let fd_t = (l(t + step, x) - l(t - step, x)) / (2.0 * step);
        let fd_x = (l(t, x + step) - l(t, x - step)) / (2.0 * step);
        let fd_xx = (l(t, x + step) - 2.0 * l(t, x) + l(t, x - step)) / (step * step);
        for (name, fd, given) in [
            ("∂t L", fd_t, note("∂t L", p, (ob.dt)(t, x))),
            ("∇L", fd_x, note("∇L", p, (ob.dx)(t, x))),
            ("ΔL", fd_xx, note("ΔL", p, (ob.laplacian)(t, x))),
        ] {
            let tol = if name == "ΔL" { 1e-4 } else { 1e-6 };
            let err = (fd - given).abs() / (tol * (1.0 + given.abs()));
            if err > worst_obs {
                worst_obs = err;
                worst_obs_at = format!("{name} at (t, x) = ({t:.4}, {x:.4}): supplied {given}, differenced {fd}");
            }
        }
    }
    checks.push(CheckResult {
        name: OBSTACLE_CHECK.into(),
        passed: worst_obs <= 1.0,
        margin: 1.0 - worst_obs,
        detail: if worst_obs_at.is_empty() {
            "barrier is exactly affine".into()
        } else {
            format!("worst relative mismatch {worst_obs:.3e} for {worst_obs_at}")
        },
    });

    checks.push(CheckResult {
        name: FINITE_CHECK.into(),
        passed: non_finite.is_none(),
        margin: if non_finite.is_none() { 0.0 } else { -1.0 },
        detail: non_finite.unwrap_or_else(|| "all probed values finite".into()),
    });

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_lipschitz(alpha: f64, beta: f64) -> ProblemSpec {
        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        p.coefficients.lipschitz.alpha = alpha;
        p.coefficients.lipschitz.beta = beta;
        p
    }

    #[test]
    fn contraction_arithmetic() {
        let ok = with_lipschitz(0.2, 0.5).validate();
        let c = ok.check(CONTRACTION_CHECK).unwrap();
        assert!(c.passed);
        assert!((c.margin - 0.175).abs() < 1e-12);
        let bad = with_lipschitz(0.4, 0.8);
        let report = bad.validate();
        let c = report.check(CONTRACTION_CHECK).unwrap();
        assert!(!c.passed);
        assert!((c.margin + 0.22).abs() < 1e-12);
        assert!(bad.require_solvable().is_err());
    }

    #[test]
    fn terminal_below_barrier_fails_everywhere() {
        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        p.terminal = Arc::new(|_| 0.0);
        p.obstacle = Obstacle::constant(1.0);
        let r = p.validate();
        let c = r.check(TERMINAL_CHECK).unwrap();
        assert!(!c.passed);
        assert!(c.detail.contains(&format!("at {} nodes", p.grid.n_nodes)));
        assert!(!r.passed());
        // The penalized scheme still accepts it.
        assert!(p.require_solvable().is_ok());
    }

    #[test]
    fn bundled_problems_validate() {
        for fam in [Family::LinearAdditive, Family::QuasilinearFull] {
            let r = ProblemSpec::default_for(fam).validate();
            assert!(r.passed(), "{fam:?}: {r:#?}");
        }
        // heat_obstacle's terminal datum dips below the barrier on purpose;
        // every other hypothesis holds.
        let r = ProblemSpec::default_for(Family::HeatObstacle).validate();
        for c in &r.checks {
            assert_eq!(c.passed, c.name != TERMINAL_CHECK, "{c:?}");
        }
        let q = ProblemSpec::default_for(Family::QuasilinearFull).validate();
        assert!(q.check(LIPSCHITZ_CHECK).unwrap().margin > 0.0);
        assert!(q.check(ENVELOPE_CHECK).unwrap().margin >= 0.0);
    }

    #[test]
    fn understated_lipschitz_constant_is_caught() {
        let mut p = ProblemSpec::default_for(Family::QuasilinearFull);
        p.coefficients.lipschitz.c_f = 0.3;
        let r = p.validate();
        let c = r.check(LIPSCHITZ_CHECK).unwrap();
        assert!(!c.passed, "{c:?}");
        assert!(c.detail.contains("f at"));
    }

    #[test]
    fn wrong_barrier_derivative_is_caught() {
        let mut p = ProblemSpec::default_for(Family::QuasilinearFull);
        p.obstacle.dt = Arc::new(|_, _| 0.0);
        assert!(!p.validate().check(OBSTACLE_CHECK).unwrap().passed);
    }

    #[test]
    fn non_finite_coefficient_reports_location() {
        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        p.coefficients.f = Arc::new(|_, x, _, _| if x > 1.0 { f64::NAN } else { 0.0 });
        let r = p.validate();
        let c = r.check(FINITE_CHECK).unwrap();
        assert!(!c.passed);
        assert!(c.detail.starts_with("f = NaN at (t, x, y, z)"), "{}", c.detail);
        assert!(matches!(p.require_solvable(), Err(Error::Validation(_))));
    }

    #[test]
    fn validate_is_deterministic() {
        let p = ProblemSpec::default_for(Family::QuasilinearFull);
        assert_eq!(p.validate(), p.validate());
    }

    #[test]
    fn eval_all_examples() {
        let zero = ProblemSpec::default_for(Family::HeatObstacle);
        let u = zero.grid.sample(|x| x);
        let du = zero.grid.sample(|_| 1.0);
        let r = zero.eval_all(0.3, &u, &du).unwrap();
        assert!(r.fval.values.iter().chain(&r.gval.values).all(|&v| v == 0.0));
        assert!(r.hvals.iter().all(|h| h.values.iter().all(|&v| v == 0.0)));

        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        let j = 5;
        p.coefficients.mode_weights = (0..j).map(|k| 0.5_f64.powi(k)).collect();
        p.coefficients.h_shape = Arc::new(|_, _, _, _| 1.0);
        p.coefficients.f = Arc::new(|_, _, y, _| -y);
        let u = p.grid.sample(|_| 3.0);
        let r = p.eval_all(0.0, &u, &p.grid.zeros()).unwrap();
        assert!(r.fval.values.iter().all(|&v| v == -3.0));
        for (k, h) in r.hvals.iter().enumerate() {
            assert!(h.values.iter().all(|&v| v == 0.5_f64.powi(k as i32)));
        }
        let expected = (0..j).map(|k| 0.25_f64.powi(k)).sum::<f64>().sqrt();
        for n in r.h_column_norms() {
            assert!((n - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_all_reports_non_finite_node() {
        let mut p = ProblemSpec::default_for(Family::LinearAdditive);
        p.coefficients.g = Arc::new(|_, x, _, _| if x >= 0.0 { f64::INFINITY } else { 0.0 });
        let z = p.grid.zeros();
        match p.eval_all(0.0, &z, &z) {
            Err(Error::Evaluation { what: "g", node }) => assert_eq!(node, 40),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_bound_holds_when_doubling_modes() {
        for fam in Family::ALL {
            let mut params = fam.defaults();
            params.sigma = params.sigma.max(0.3);
            params.mode_decay = 0.6;
            let grid = fam.default_grid();
            let small = ProblemSpec::bundled(fam, params, grid, 1.0).unwrap();
            params.n_modes *= 2;
            let big = ProblemSpec::bundled(fam, params, grid, 1.0).unwrap();
            let u = grid.sample(|x| (x).cos());
            let du = grid.gradient(&u).unwrap();
            let a = small.eval_all(0.5, &u, &du).unwrap().h_column_norms();
            let b = big.eval_all(0.5, &u, &du).unwrap().h_column_norms();
            for i in 0..grid.n_nodes {
                let hs = (small.coefficients.h_shape)(0.5, grid.x(i), u.values[i], du.values[i]);
                let bound = hs.abs() * small.coefficients.tail_norm;
                assert!((b[i] - a[i]).abs() <= bound + 1e-15, "{fam:?} node {i}");
            }
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("nope".parse::<Family>().is_err());
    }
}
