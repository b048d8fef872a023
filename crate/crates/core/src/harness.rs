//! Experiment configuration, dispatch, persistence and regression baselines.
//!
//! A run turns one [`ExperimentConfig`] into `report.json`, zero or more CSV
//! files and `manifest.json` inside an output directory. Everything except
//! the manifest's timing fields is a function of the config alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bsde::{bsde_residual, star_integral_check, PathEnsemble};
use crate::error::{Error, Result};
use crate::grid::{Grid, TimeMesh, Trajectory};
use crate::ldp::{mc_ldp_compare, minimize_rate, rate_functional, OptConfig, TargetEvent};
use crate::problem::{Family, FamilyParams, ProblemSpec};
use crate::skeleton::{
    complementarity_residual, part_product_max, solve_penalized, solve_projected,
    solve_skeleton, Control, PenaltySchedule,
};
use crate::spde::condition_i_distance;
use crate::stats::log_log_slope;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub mesh: MeshConfig,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub experiment: Experiment,
    pub seeds: SeedConfig,
    /// Output directory. Overridden by `--out-dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub family: Family,
    /// Noise amplitude.
    pub sigma: f64,
    /// Move the obstacle far below the solution.
    #[serde(default)]
    pub inactive_obstacle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_nodes: usize,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Number of time steps.
    pub n_t: usize,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub n_modes: usize,
    pub mode_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub n0: u64,
    pub n_max: u64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Zero,
    Constant {
        value: f64,
        #[serde(default)]
        mode: usize,
    },
    /// Linear from `start` at `t = 0` to `end` at `t = T`.
    Linear {
        start: f64,
        end: f64,
        #[serde(default)]
        mode: usize,
    },
    /// `amplitude · sin(2π · frequency · t / T)`.
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        mode: usize,
    },
}

impl ControlSpec {
    pub fn build(&self, mesh: TimeMesh, n_modes: usize) -> Result<Control> {
        let (mode, f): (usize, Box<dyn Fn(f64) -> f64>) = match *self {
            ControlSpec::Zero => return Ok(Control::zeros(mesh, n_modes)),
            ControlSpec::Constant { value, mode } => (mode, Box::new(move |_| value)),
            ControlSpec::Linear { start, end, mode } => (
                mode,
                Box::new(move |t| start + (end - start) * t / mesh.t_final),
            ),
            ControlSpec::Sine {
                amplitude,
                frequency,
                mode,
            } => (
                mode,
                Box::new(move |t| {
                    amplitude * (std::f64::consts::TAU * frequency * t / mesh.t_final).sin()
                }),
            ),
        };
        if mode >= n_modes {
            return Err(Error::Config(format!(
                "control mode {mode} out of range for {n_modes} noise modes"
            )));
        }
        Ok(Control::from_fn(mesh, n_modes, |t, j| if j == mode { f(t) } else { 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    /// Ball around the uncontrolled skeleton's `u(0,·)`.
    UncontrolledBall { radius: f64 },
    /// Ball around `u⁰(0,·) + shift·ψ`, with `ψ` the normalised response of
    /// `u(0,·)` to a unit constant control in the first mode.
    ShiftedBall { shift: f64, radius: f64 },
    /// `max_t u(t, x_probe) ≥ level`.
    SupExceed { level: f64, probe: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Integrand {
    /// `J = x`.
    Linear,
    /// `J = sin(x)`.
    Sine,
    /// `J = sin(x) e^{−t}`.
    SinDecay,
    /// `J = e^{−x²}`.
    Gaussian,
}

impl Integrand {
    pub const ALL: [Integrand; 4] = [
        Integrand::Linear,
        Integrand::Sine,
        Integrand::SinDecay,
        Integrand::Gaussian,
    ];

    pub fn eval(self, t: f64, x: f64) -> f64 {
        match self {
            Integrand::Linear => x,
            Integrand::Sine => x.sin(),
            Integrand::SinDecay => x.sin() * (-t).exp(),
            Integrand::Gaussian => (-x * x).exp(),
        }
    }

    pub fn dx(self, t: f64, x: f64) -> f64 {
        match self {
            Integrand::Linear => 1.0,
            Integrand::Sine => x.cos(),
            Integrand::SinDecay => x.cos() * (-t).exp(),
            Integrand::Gaussian => -2.0 * x * (-x * x).exp(),
        }
    }
}

fn default_lambdas() -> Vec<f64> {
    crate::ldp::DEFAULT_LAMBDAS.to_vec()
}

fn default_feasibility_tol() -> f64 {
    1e-3
}

fn default_max_iters() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Violation norms and Cauchy gaps along a list of penalty parameters.
    PenalizationStudy {
        penalties: Vec<u64>,
        #[serde(default = "zero_control")]
        control: ControlSpec,
    },
    /// Penalty-continuation skeleton solves for a control family, checked
    /// against the projection scheme.
    SkeletonSolve {
        controls: Vec<ControlSpec>,
        max_projection_gap: f64,
        max_complementarity: f64,
    },
    /// Distance between controlled stochastic solutions and skeletons.
    ConditionI {
        epsilons: Vec<f64>,
        n_samples: usize,
        penalty: u64,
        radius_sq: f64,
        controls: Vec<ControlSpec>,
        deltas: Vec<f64>,
        slope_min: f64,
        slope_max: f64,
    },
    /// Skeleton response to oscillating control perturbations.
    #[serde(rename = "condition_ii")]
    ConditionII {
        control: ControlSpec,
        amplitudes: Vec<f64>,
        frequencies: Vec<u32>,
        radius_sq: f64,
        max_final_ratio: f64,
    },
    /// Backward SDE residual under joint space-time refinement.
    BsdeCheck {
        levels: Vec<usize>,
        n_paths: usize,
        penalty: u64,
        min_order: f64,
    },
    /// Forward-backward stochastic integral identity.
    StarCheck {
        n_paths: usize,
        integrand: Integrand,
        max_standard_errors: f64,
    },
    RateMinimize {
        event: EventSpec,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_feasibility_tol")]
        feasibility_tol: f64,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        expect_feasible: bool,
    },
    /// Monte Carlo small-noise probabilities against the minimised rate.
    McCompare {
        event: EventSpec,
        epsilons: Vec<f64>,
        n_samples: usize,
        penalty: u64,
        importance: bool,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        max_relative_gap: f64,
    },
}

fn zero_control() -> ControlSpec {
    ControlSpec::Zero
}

/// Experiment kinds with one-line descriptions.
pub const EXPERIMENT_KINDS: [(&str, &str); 8] = [
    ("penalization_study", "violation decay and Cauchy gaps across penalty parameters"),
    ("skeleton_solve", "penalty continuation vs projection for a control family"),
    ("condition_i", "stochastic vs skeleton distance as epsilon shrinks"),
    ("condition_ii", "skeleton continuity under weakly converging controls"),
    ("bsde_check", "backward SDE residual order under refinement"),
    ("star_check", "forward-backward stochastic integral identity"),
    ("rate_minimize", "constrained minimisation of the rate functional"),
    ("mc_compare", "Monte Carlo epsilon log p against the rate"),
];

impl Experiment {
    pub fn kind(&self) -> &'static str {
        let i = match self {
            Experiment::PenalizationStudy { .. } => 0,
            Experiment::SkeletonSolve { .. } => 1,
            Experiment::ConditionI { .. } => 2,
            Experiment::ConditionII { .. } => 3,
            Experiment::BsdeCheck { .. } => 4,
            Experiment::StarCheck { .. } => 5,
            Experiment::RateMinimize { .. } => 6,
            Experiment::McCompare { .. } => 7,
        };
        EXPERIMENT_KINDS[i].0
    }
}

fn field_err(field: &str, msg: &str) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn require(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field_err(field, msg))
    }
}

fn positive_list(xs: &[f64], field: &str) -> Result<()> {
    require(
        !xs.is_empty() && xs.iter().all(|x| *x > 0.0 && x.is_finite()),
        field,
        "must be a nonempty list of positive numbers",
    )
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        require(!self.name.is_empty(), "name", "must not be empty")?;
        require(
            self.problem.sigma.is_finite(),
            "problem.sigma",
            "must be finite",
        )?;
        require(self.grid.n_nodes >= 3, "grid.n_nodes", "must be at least 3")?;
        require(
            self.grid.x_min.is_finite() && self.grid.x_max.is_finite(),
            "grid.x_min",
            "bounds must be finite",
        )?;
        require(
            self.grid.x_max > self.grid.x_min,
            "grid.x_max",
            "must exceed grid.x_min",
        )?;
        require(self.mesh.n_t > 0, "mesh.n_t", "must be positive")?;
        require(
            self.mesh.t_final > 0.0 && self.mesh.t_final.is_finite(),
            "mesh.t_final",
            "must be positive",
        )?;
        require(self.noise.n_modes > 0, "noise.n_modes", "must be positive")?;
        require(
            (0.0..1.0).contains(&self.noise.mode_decay),
            "noise.mode_decay",
            "must lie in [0, 1)",
        )?;
        require(self.solver.n0 > 0, "solver.n0", "must be positive")?;
        require(
            self.solver.n_max >= self.solver.n0,
            "solver.n_max",
            "must be at least solver.n0",
        )?;
        require(self.solver.tol > 0.0, "solver.tol", "must be positive")?;
        match &self.experiment {
            Experiment::PenalizationStudy { penalties, .. } => require(
                penalties.len() >= 2
                    && penalties[0] > 0
                    && penalties.windows(2).all(|w| w[1] > w[0]),
                "experiment.penalties",
                "must be at least two increasing positive values",
            ),
            Experiment::SkeletonSolve { controls, .. } => require(
                !controls.is_empty(),
                "experiment.controls",
                "must not be empty",
            ),
            Experiment::ConditionI {
                epsilons,
                n_samples,
                penalty,
                controls,
                ..
            } => {
                positive_list(epsilons, "experiment.epsilons")?;
                require(*n_samples > 0, "experiment.n_samples", "must be positive")?;
                require(*penalty > 0, "experiment.penalty", "must be positive")?;
                require(!controls.is_empty(), "experiment.controls", "must not be empty")
            }
            Experiment::ConditionII {
                amplitudes,
                frequencies,
                ..
            } => {
                require(
                    !amplitudes.is_empty(),
                    "experiment.amplitudes",
                    "must not be empty",
                )?;
                require(
                    !frequencies.is_empty() && frequencies.iter().all(|&m| m > 0),
                    "experiment.frequencies",
                    "must be a nonempty list of positive integers",
                )
            }
            Experiment::BsdeCheck {
                levels,
                n_paths,
                penalty,
                ..
            } => {
                require(
                    levels.len() >= 2 && levels.windows(2).all(|w| w[1] > w[0]),
                    "experiment.levels",
                    "must be at least two increasing step counts",
                )?;
                let finest = *levels.last().unwrap();
                for &l in levels {
                    require(
                        l > 0
                            && finest % l == 0
                            && ((self.grid.n_nodes - 1) * l) % self.mesh.n_t == 0,
                        "experiment.levels",
                        "each level must divide the finest and scale grid.n_nodes - 1 to an integer",
                    )?;
                }
                require(*n_paths > 0, "experiment.n_paths", "must be positive")?;
                require(*penalty > 0, "experiment.penalty", "must be positive")
            }
            Experiment::StarCheck { n_paths, .. } => {
                require(*n_paths > 0, "experiment.n_paths", "must be positive")
            }
            Experiment::RateMinimize { lambdas, .. } => positive_list(lambdas, "experiment.lambdas"),
            Experiment::McCompare {
                epsilons,
                n_samples,
                penalty,
                lambdas,
                ..
            } => {
                positive_list(epsilons, "experiment.epsilons")?;
                positive_list(lambdas, "experiment.lambdas")?;
                require(*n_samples > 0, "experiment.n_samples", "must be positive")?;
                require(*penalty > 0, "experiment.penalty", "must be positive")
            }
        }
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        self.problem_on(Grid::new(self.grid.x_min, self.grid.x_max, self.grid.n_nodes)?)
    }

    fn problem_on(&self, grid: Grid) -> Result<ProblemSpec> {
        let params = FamilyParams {
            sigma: self.problem.sigma,
            n_modes: self.noise.n_modes,
            mode_decay: self.noise.mode_decay,
        };
        let p = ProblemSpec::bundled(self.problem.family, params, grid, self.mesh.t_final)?;
        Ok(if self.problem.inactive_obstacle {
            p.with_inactive_obstacle()
        } else {
            p
        })
    }

    pub fn mesh(&self) -> Result<TimeMesh> {
        TimeMesh::new(self.mesh.t_final, self.mesh.n_t)
    }

    pub fn schedule(&self) -> PenaltySchedule {
        PenaltySchedule {
            n0: self.solver.n0,
            n_max: self.solver.n_max,
            tol: self.solver.tol,
        }
    }
}

/// JSON schema of [`ExperimentConfig`].
pub fn config_schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub results: Value,
}

/// A file produced by a run, held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file: String,
    pub bytes: Vec<u8>,
}

fn traj_csv(file: &str, traj: &Trajectory) -> Result<Artifact> {
    let mut bytes = Vec::new();
    traj.write_csv(&mut bytes)?;
    Ok(Artifact {
        file: file.into(),
        bytes,
    })
}

fn table_csv(file: &str, header: &[&str], rows: &[Vec<f64>]) -> Artifact {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Artifact {
        file: file.into(),
        bytes: s.into_bytes(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub kind: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_time_s: f64,
    /// SHA-256 of every other file written by the run.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

/// Validates and runs the experiment without touching the filesystem.
pub fn execute(config: &ExperimentConfig) -> Result<(Report, Vec<Artifact>)> {
    config.validate()?;
    let problem = config.build_problem()?;
    let mesh = config.mesh()?;
    let seed = config.seeds.base;
    let (checks, results, artifacts) = match &config.experiment {
        Experiment::PenalizationStudy { penalties, control } => {
            penalization_study(&problem, &mesh, penalties, control)?
        }
        Experiment::SkeletonSolve {
            controls,
            max_projection_gap,
            max_complementarity,
        } => skeleton_study(
            &problem,
            &mesh,
            &config.schedule(),
            controls,
            *max_projection_gap,
            *max_complementarity,
        )?,
        Experiment::ConditionI {
            epsilons,
            n_samples,
            penalty,
            radius_sq,
            controls,
            deltas,
            slope_min,
            slope_max,
        } => {
            let family = controls
                .iter()
                .map(|c| c.build(mesh, problem.n_modes()))
                .collect::<Result<Vec<_>>>()?;
            let r = condition_i_distance(
                &problem, epsilons, &family, *radius_sq, *penalty, &mesh, *n_samples, seed,
                deltas,
            )?;
            let means: Vec<f64> = r.per_epsilon.iter().map(|s| s.mean).collect();
            let mut order: Vec<usize> = (0..epsilons.len()).collect();
            order.sort_by(|&a, &b| epsilons[b].total_cmp(&epsilons[a]));
            let decreasing = order.windows(2).all(|w| means[w[1]] < means[w[0]]);
            let checks = vec![
                check(
                    "mean_distance_decreasing",
                    decreasing,
                    format!("means {means:?}"),
                ),
                check(
                    "slope_in_range",
                    (*slope_min..=*slope_max).contains(&r.slope),
                    format!("slope {:.4} in [{slope_min}, {slope_max}]", r.slope),
                ),
            ];
            let mut rows = Vec::new();
            for (e, d) in epsilons.iter().zip(&r.distances) {
                for (s, v) in d.iter().enumerate() {
                    rows.push(vec![*e, s as f64, *v]);
                }
            }
            let art = vec![table_csv("distances.csv", &["epsilon", "sample", "distance"], &rows)];
            (checks, serde_json::to_value(&r)?, art)
        }
        Experiment::ConditionII {
            control,
            amplitudes,
            frequencies,
            radius_sq,
            max_final_ratio,
        } => {
            let k = control.build(mesh, problem.n_modes())?;
            let r = crate::ldp::condition_ii_test(
                &problem,
                &k,
                amplitudes,
                frequencies,
                *radius_sq,
                &mesh,
                &config.schedule(),
            )?;
            let mut ratio_ok = true;
            let mut worst = 0.0_f64;
            for &a in amplitudes {
                let rows: Vec<_> = r.rows.iter().filter(|row| row.amplitude == a).collect();
                let first = rows.iter().min_by_key(|row| row.frequency).unwrap().distance;
                let last = rows.iter().max_by_key(|row| row.frequency).unwrap().distance;
                if first > 0.0 {
                    worst = worst.max(last / first);
                    ratio_ok &= last <= max_final_ratio * first;
                }
            }
            let checks = vec![
                check("distances_decreasing", r.decreasing(), String::new()),
                check(
                    "final_to_initial_ratio",
                    ratio_ok,
                    format!("worst ratio {worst:.4} vs {max_final_ratio}"),
                ),
            ];
            let rows: Vec<Vec<f64>> = r
                .rows
                .iter()
                .map(|row| vec![row.amplitude, row.frequency as f64, row.distance, row.witness])
                .collect();
            let art = vec![table_csv(
                "condition_ii.csv",
                &["amplitude", "frequency", "distance", "witness"],
                &rows,
            )];
            (checks, serde_json::to_value(&r)?, art)
        }
        Experiment::BsdeCheck {
            levels,
            n_paths,
            penalty,
            min_order,
        } => bsde_study(config, levels, *n_paths, *penalty, *min_order)?,
        Experiment::StarCheck {
            n_paths,
            integrand,
            max_standard_errors,
        } => {
            let ens = PathEnsemble::sample(problem.grid, mesh, *n_paths, seed)?;
            let f = *integrand;
            let r = star_integral_check(move |t, x| f.eval(t, x), move |t, x| f.dx(t, x), &ens);
            let checks = vec![check(
                "mean_gap_within_se",
                r.within_se(*max_standard_errors),
                format!(
                    "mean gap {:.3e} with standard error {:.3e}",
                    r.mean_gap, r.std_error
                ),
            )];
            (checks, serde_json::to_value(&r)?, Vec::new())
        }
        Experiment::RateMinimize {
            event,
            lambdas,
            feasibility_tol,
            max_iters,
            expect_feasible,
        } => {
            let ev = build_event(&problem, &mesh, &config.schedule(), event)?;
            let opt = OptConfig {
                schedule: config.schedule(),
                feasibility_tol: *feasibility_tol,
                max_iters: *max_iters,
                ..OptConfig::default()
            };
            let zero = Control::zeros(mesh, problem.n_modes());
            let r = minimize_rate(&problem, &ev, lambdas, &zero, &mesh, &opt)?;
            let mut checks = vec![check(
                "feasibility",
                r.feasible == *expect_feasible,
                format!(
                    "feasible = {}, residual {:.3e}",
                    r.feasible, r.constraint_residual
                ),
            )];
            if r.feasible {
                checks.push(check(
                    "rate_matches_minimizer",
                    r.rate == rate_functional(&r.minimizer),
                    format!("rate {}", r.rate),
                ));
            }
            let mut csv = Vec::new();
            r.minimizer.write_csv(&mut csv)?;
            let mut art = vec![Artifact {
                file: "minimizer.csv".into(),
                bytes: csv,
            }];
            if r.feasible {
                let s = solve_skeleton(&problem, &r.minimizer, &mesh, &config.schedule())?;
                art.push(traj_csv("trajectory.csv", &s.traj)?);
            }
            (checks, serde_json::to_value(&r)?, art)
        }
        Experiment::McCompare {
            event,
            epsilons,
            n_samples,
            penalty,
            importance,
            lambdas,
            max_relative_gap,
        } => {
            let ev = build_event(&problem, &mesh, &config.schedule(), event)?;
            let opt = OptConfig {
                schedule: config.schedule(),
                ..OptConfig::default()
            };
            let zero = Control::zeros(mesh, problem.n_modes());
            let rate = minimize_rate(&problem, &ev, lambdas, &zero, &mesh, &opt)?;
            if !rate.feasible {
                return Err(Error::Config(
                    "event is unreachable by the skeleton; nothing to compare".into(),
                ));
            }
            let mut mc = mc_ldp_compare(
                &problem,
                &ev,
                epsilons,
                *n_samples,
                seed,
                importance.then_some(&rate),
                *penalty,
                &mesh,
            )?;
            mc.minus_rate = Some(-rate.rate);
            let gap = mc.relative_gap().unwrap_or(f64::INFINITY);
            let checks = vec![check(
                "extrapolated_vs_rate",
                gap <= *max_relative_gap,
                format!(
                    "extrapolated {:.4} vs -I {:.4}, relative gap {gap:.4}",
                    mc.extrapolated, -rate.rate
                ),
            )];
            let rows: Vec<Vec<f64>> = mc
                .rows
                .iter()
                .map(|r| vec![r.epsilon, r.p_hat, r.std_error, r.hits as f64, r.eps_log_p])
                .collect();
            let art = vec![table_csv(
                "mc.csv",
                &["epsilon", "p_hat", "std_error", "hits", "eps_log_p"],
                &rows,
            )];
            (
                checks,
                json!({ "rate": rate.rate, "rate_residual": rate.constraint_residual, "mc": mc }),
                art,
            )
        }
    };
    let report = Report {
        name: config.name.clone(),
        kind: config.experiment.kind().into(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
        results,
    };
    Ok((report, artifacts))
}

type Outcome = (Vec<Check>, Value, Vec<Artifact>);

fn penalization_study(
    problem: &ProblemSpec,
    mesh: &TimeMesh,
    penalties: &[u64],
    control: &ControlSpec,
) -> Result<Outcome> {
    let k = control.build(*mesh, problem.n_modes())?;
    let mut rows = Vec::new();
    let mut prev: Option<Trajectory> = None;
    let mut last = None;
    for &n in penalties {
        let sol = solve_penalized(problem, &k, n, mesh)?;
        let gap = match &prev {
            Some(p) => sol.traj.ht_distance(p)?,
            None => f64::NAN,
        };
        rows.push(json!({
            "n": n,
            "violation_l2": sol.diagnostics.violation_sq.sqrt(),
            "penalty_l2": sol.diagnostics.penalty_l2,
            "complementarity": sol.complementarity_residual(problem)?,
            "part_product": part_product_max(problem, &sol.traj),
            "cauchy_gap": gap,
        }));
        prev = Some(sol.traj.clone());
        last = Some(sol);
    }
    let col = |key: &str| -> Vec<f64> {
        rows.iter()
            .map(|r| r[key].as_f64().unwrap_or(f64::NAN))
            .collect()
    };
    let ns: Vec<f64> = penalties.iter().map(|&n| n as f64).collect();
    let viol = col("violation_l2");
    let pl2 = col("penalty_l2");
    let gaps: Vec<f64> = col("cauchy_gap").into_iter().skip(1).collect();
    let mut checks = vec![check(
        "cauchy_gap_monotone",
        gaps.windows(2).all(|w| w[1] <= w[0]),
        format!("gaps {gaps:?}"),
    )];
    let mut exponent = f64::NAN;
    let mut ratio = f64::NAN;
    if viol.iter().all(|&v| v > 0.0) {
        exponent = -log_log_slope(&ns, &viol);
        let max = pl2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = pl2.iter().cloned().fold(f64::INFINITY, f64::min);
        ratio = max / min;
        checks.push(check(
            "violation_exponent",
            (0.4..=0.6).contains(&exponent),
            format!("exponent {exponent:.4}"),
        ));
        checks.push(check(
            "penalty_l2_ratio",
            ratio < 3.0,
            format!("max/min {ratio:.4}"),
        ));
    }
    let parts = col("part_product");
    checks.push(check(
        "part_product_zero",
        parts.iter().all(|&v| v == 0.0),
        String::new(),
    ));
    let table: Vec<Vec<f64>> = (0..penalties.len())
        .map(|i| {
            vec![
                ns[i],
                viol[i],
                pl2[i],
                col("complementarity")[i],
                col("cauchy_gap")[i],
            ]
        })
        .collect();
    let last = last.expect("at least two penalties");
    let art = vec![
        table_csv(
            "penalization.csv",
            &["n", "violation_l2", "penalty_l2", "complementarity", "cauchy_gap"],
            &table,
        ),
        traj_csv("trajectory.csv", &last.traj)?,
        traj_csv("penalty_density.csv", &last.penalty_density)?,
    ];
    Ok((
        checks,
        json!({ "rows": rows, "violation_exponent": exponent, "penalty_l2_ratio": ratio }),
        art,
    ))
}

fn skeleton_study(
    problem: &ProblemSpec,
    mesh: &TimeMesh,
    schedule: &PenaltySchedule,
    controls: &[ControlSpec],
    max_projection_gap: f64,
    max_complementarity: f64,
) -> Result<Outcome> {
    let mut per_control = Vec::new();
    let mut checks = Vec::new();
    let mut art = Vec::new();
    let mut all_converged = true;
    let mut worst_projection = 0.0_f64;
    let mut worst_comp = 0.0_f64;
    let mut family_gaps: Vec<f64> = Vec::new();
    for (i, spec) in controls.iter().enumerate() {
        let k = spec.build(*mesh, problem.n_modes())?;
        let s = solve_skeleton(problem, &k, mesh, schedule)?;
        let proj = solve_projected(problem, &k, mesh)?;
        let d = s.traj.ht_distance(&proj.traj)?;
        let comp = complementarity_residual(problem, &s.traj, &s.measure_density)?;
        all_converged &= s.converged;
        worst_projection = worst_projection.max(d);
        worst_comp = worst_comp.max(comp);
        for (j, &(_, g)) in s.gap_history.iter().enumerate() {
            if j == family_gaps.len() {
                family_gaps.push(0.0);
            }
            family_gaps[j] = family_gaps[j].max(g);
        }
        per_control.push(json!({
            "control_norm_sq": k.norm_sq(),
            "n_final": s.n_final,
            "cauchy_gap": s.cauchy_gap,
            "gap_history": s.gap_history,
            "converged": s.converged,
            "projection_distance": d,
            "complementarity": comp,
            "warning": s.warning,
        }));
        art.push(traj_csv(&format!("trajectory_{i}.csv"), &s.traj)?);
        art.push(traj_csv(&format!("measure_density_{i}.csv"), &s.measure_density)?);
    }
    checks.push(check("all_converged", all_converged, String::new()));
    checks.push(check(
        "projection_agreement",
        worst_projection <= max_projection_gap,
        format!("worst distance {worst_projection:.3e}"),
    ));
    checks.push(check(
        "complementarity",
        worst_comp <= max_complementarity,
        format!("worst residual {worst_comp:.3e}"),
    ));
    checks.push(check(
        "family_gap_monotone",
        family_gaps.windows(2).all(|w| w[1] < w[0]),
        format!("max-over-family gaps {family_gaps:?}"),
    ));
    Ok((
        checks,
        json!({ "controls": per_control, "family_gap_history": family_gaps }),
        art,
    ))
}

fn bsde_study(
    config: &ExperimentConfig,
    levels: &[usize],
    n_paths: usize,
    penalty: u64,
    min_order: f64,
) -> Result<Outcome> {
    let finest = *levels.last().expect("validated");
    let t_final = config.mesh.t_final;
    let base = Grid::new(config.grid.x_min, config.grid.x_max, config.grid.n_nodes)?;
    let fine = PathEnsemble::sample(
        base,
        TimeMesh::new(t_final, finest)?,
        n_paths,
        config.seeds.base,
    )?;
    let mut rows = Vec::new();
    let mut dts = Vec::new();
    let mut residuals = Vec::new();
    for &l in levels {
        let nodes = (config.grid.n_nodes - 1) * l / config.mesh.n_t + 1;
        let grid = Grid::new(config.grid.x_min, config.grid.x_max, nodes)?;
        let problem = config.problem_on(grid)?;
        let mesh = TimeMesh::new(t_final, l)?;
        let sol = solve_penalized(&problem, &Control::zeros(mesh, problem.n_modes()), penalty, &mesh)?;
        let ens = fine.coarsen(finest / l)?.on_grid(grid)?;
        let r = bsde_residual(&problem, &sol, &ens)?;
        rows.push(vec![l as f64, mesh.dt(), nodes as f64, r, ens.stopped_fraction()]);
        dts.push(mesh.dt());
        residuals.push(r);
    }
    let order = log_log_slope(&dts, &residuals);
    let checks = vec![check(
        "refinement_order",
        order >= min_order,
        format!("order {order:.4} vs {min_order}"),
    )];
    let art = vec![table_csv(
        "bsde.csv",
        &["n_t", "dt", "n_nodes", "residual", "stopped_fraction"],
        &rows,
    )];
    Ok((
        checks,
        json!({ "levels": levels, "residuals": residuals, "order": order }),
        art,
    ))
}

/// Builds the concrete event for a problem; ball centres come from the
/// uncontrolled skeleton.
pub fn build_event(
    problem: &ProblemSpec,
    mesh: &TimeMesh,
    schedule: &PenaltySchedule,
    spec: &EventSpec,
) -> Result<TargetEvent> {
    let zero = Control::zeros(*mesh, problem.n_modes());
    let event = match *spec {
        EventSpec::SupExceed { level, probe } => TargetEvent::SupExceed { level, probe },
        EventSpec::UncontrolledBall { radius } => TargetEvent::TerminalBall {
            center: solve_skeleton(problem, &zero, mesh, schedule)?.traj.fields[0].clone(),
            radius,
        },
        EventSpec::ShiftedBall { shift, radius } => {
            let u0 = solve_skeleton(problem, &zero, mesh, schedule)?.traj.fields[0].clone();
            let unit = ControlSpec::Constant { value: 1.0, mode: 0 }.build(*mesh, problem.n_modes())?;
            let u1 = solve_skeleton(problem, &unit, mesh, schedule)?.traj.fields[0].clone();
            let d: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
            let norm = (problem.grid.spacing() * d.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if norm == 0.0 {
                return Err(Error::Config(
                    "shifted_ball needs a problem whose skeleton responds to controls".into(),
                ));
            }
            TargetEvent::TerminalBall {
                center: u0.iter().zip(&d).map(|(a, b)| a + shift * b / norm).collect(),
                radius,
            }
        }
    };
    event.check(problem)?;
    Ok(event)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs the experiment and writes `report.json`, its CSV files and
/// `manifest.json` into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let (report, artifacts) = execute(config)?;
    fs::create_dir_all(out_dir)?;
    let mut hashes = BTreeMap::new();
    let mut report_bytes = serde_json::to_vec_pretty(&report)?;
    report_bytes.push(b'\n');
    let mut config_bytes = config.to_json().into_bytes();
    config_bytes.push(b'\n');
    for a in artifacts.iter().chain([
        &Artifact {
            file: "report.json".into(),
            bytes: report_bytes,
        },
        &Artifact {
            file: "config.json".into(),
            bytes: config_bytes,
        },
    ]) {
        fs::write(out_dir.join(&a.file), &a.bytes)?;
        hashes.insert(a.file.clone(), sha256_hex(&a.bytes));
    }
    let manifest = Manifest {
        name: config.name.clone(),
        kind: report.kind.clone(),
        config_hash: config.hash(),
        version: VERSION.into(),
        seed: config.seeds.base,
        started_unix,
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: hashes,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(RunOutcome {
        report,
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub value: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub kind: String,
    /// Dotted paths into the report, e.g. `results.rows[1].cauchy_gap`.
    pub fields: BTreeMap<String, Tolerance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub field: String,
    pub expected: f64,
    /// `None` when the report lacks the field.
    pub actual: Option<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub passed: bool,
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

fn flatten(v: &Value, path: String, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Number(n) => {
            out.insert(path, n.as_f64().unwrap_or(f64::NAN));
        }
        Value::Bool(b) => {
            out.insert(path, if *b { 1.0 } else { 0.0 });
        }
        Value::Array(xs) => {
            for (i, x) in xs.iter().enumerate() {
                flatten(x, format!("{path}[{i}]"), out);
            }
        }
        Value::Object(m) => {
            for (k, x) in m {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                flatten(x, p, out);
            }
        }
        Value::Null | Value::String(_) => {}
    }
}

/// Numeric and boolean leaves of a report keyed by dotted path.
pub fn report_fields(report: &Report) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    flatten(
        &serde_json::to_value(report).expect("report serializes"),
        String::new(),
        &mut out,
    );
    out
}

impl Baseline {
    /// Baseline accepting `|actual − value| ≤ abs_tol + rel_tol·|value|` on
    /// every field of `report`.
    pub fn from_report(report: &Report, rel_tol: f64, abs_tol: f64) -> Baseline {
        Baseline {
            name: report.name.clone(),
            kind: report.kind.clone(),
            fields: report_fields(report)
                .into_iter()
                .map(|(k, value)| {
                    (
                        k,
                        Tolerance {
                            value,
                            tol: abs_tol + rel_tol * value.abs(),
                        },
                    )
                })
                .collect(),
        }
    }
}

pub fn compare_baseline(report: &Report, baseline: &Baseline) -> Result<Comparison> {
    if report.kind != baseline.kind {
        return Err(Error::Schema(format!(
            "report kind `{}` does not match baseline kind `{}`",
            report.kind, baseline.kind
        )));
    }
    let fields = report_fields(report);
    let mismatches: Vec<Mismatch> = baseline
        .fields
        .iter()
        .filter_map(|(name, t)| {
            let actual = fields.get(name).copied();
            let ok = actual.is_some_and(|a| (a - t.value).abs() <= t.tol);
            (!ok).then(|| Mismatch {
                field: name.clone(),
                expected: t.value,
                actual,
                tol: t.tol,
            })
        })
        .collect();
    Ok(Comparison {
        passed: mismatches.is_empty(),
        checked: baseline.fields.len(),
        mismatches,
    })
}

pub fn read_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_baseline(path: &Path) -> Result<Baseline> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "star".into(),
            problem: ProblemConfig {
                family: Family::LinearAdditive,
                sigma: 0.3,
                inactive_obstacle: false,
            },
            grid: GridConfig {
                n_nodes: 81,
                x_min: -4.0,
                x_max: 4.0,
            },
            mesh: MeshConfig {
                n_t: 50,
                t_final: 1.0,
            },
            noise: NoiseConfig {
                n_modes: 1,
                mode_decay: 0.0,
            },
            solver: SolverConfig {
                n0: 1000,
                n_max: 10_000_000,
                tol: 1e-3,
            },
            experiment: Experiment::StarCheck {
                n_paths: 500,
                integrand: Integrand::SinDecay,
                max_standard_errors: 3.0,
            },
            seeds: SeedConfig { base: 7 },
            out_dir: None,
        }
    }

    #[test]
    fn config_round_trip() {
        let c = sample_config();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn zero_steps_names_the_field() {
        let mut c = sample_config();
        c.mesh.n_t = 0;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("mesh.n_t"), "{err}");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let text = sample_config().to_json().replace("star_check", "moon_check");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn baseline_tolerances() {
        let (report, _) = execute(&sample_config()).unwrap();
        let base = Baseline::from_report(&report, 0.0, 1e-6);
        assert!(compare_baseline(&report, &base).unwrap().passed);
        let mut near = report.clone();
        let g = near.results["mean_gap"].as_f64().unwrap();
        near.results["mean_gap"] = json!(g + 0.5e-6);
        assert!(compare_baseline(&near, &base).unwrap().passed);
        near.results["mean_gap"] = json!(g + 1e-5);
        let cmp = compare_baseline(&near, &base).unwrap();
        assert!(!cmp.passed);
        assert_eq!(cmp.mismatches.len(), 1);
        assert_eq!(cmp.mismatches[0].field, "results.mean_gap");
        let mut other = report.clone();
        other.kind = "bsde_check".into();
        assert!(matches!(
            compare_baseline(&other, &base),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn control_specs() {
        let mesh = TimeMesh::new(1.0, 10).unwrap();
        let k = ControlSpec::Linear {
            start: 2.0,
            end: 0.0,
            mode: 1,
        }
        .build(mesh, 2)
        .unwrap();
        assert_eq!(k.row(0), &[0.0, 2.0]);
        assert!((k.row(5)[1] - 1.0).abs() < 1e-15);
        assert!(ControlSpec::Constant { value: 1.0, mode: 2 }
            .build(mesh, 2)
            .is_err());
    }
}
