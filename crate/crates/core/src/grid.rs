//! Uniform 1-D grids, grid functions and their time-indexed families.
//!
//! The whole line is truncated to `[x_min, x_max]`. Every evolution operator
//! keeps the two boundary nodes pinned at their Dirichlet values; the
//! difference operators here write zero at the boundary nodes they cannot
//! reach with a centred stencil.
//!
//! Norms follow the energy space of the obstacle problem:
//!
//! ```text
//! |f|_H   = (h Σ f_i²)^{1/2}
//! |f|_V   = (h Σ (f_i² + (∇f)_i²))^{1/2}
//! |u|_H_T = max_t |u_t|_H + (Δt Σ_t |u_t|_V²)^{1/2}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Boundary nodes are held at the terminal datum's boundary values, which
    /// is zero for the compactly supported data of the bundled problems.
    #[default]
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_nodes: usize,
    /// Spatial dimension. Only `1` is implemented.
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub boundary: BoundaryKind,
}

fn one() -> usize {
    1
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, n_nodes: usize) -> Result<Self> {
        let grid = Grid {
            x_min,
            x_max,
            n_nodes,
            dim: 1,
            boundary: BoundaryKind::Dirichlet,
        };
        grid.check()?;
        Ok(grid)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_nodes < 3 {
            return Err(Error::Domain(format!(
                "grid needs at least 3 nodes, got {}",
                self.n_nodes
            )));
        }
        if !(self.x_min.is_finite() && self.x_max.is_finite()) || self.x_max <= self.x_min {
            return Err(Error::Domain(format!(
                "grid interval [{}, {}] is empty or non-finite",
                self.x_min, self.x_max
            )));
        }
        if self.dim != 1 {
            return Err(Error::Domain(format!(
                "only dimension 1 is implemented, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_nodes - 1) as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        // Pin the last node exactly on x_max.
        if i + 1 == self.n_nodes {
            self.x_max
        } else {
            self.x_min + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes).map(|i| self.x(i)).collect()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: *self,
            values: (0..self.n_nodes).map(|i| f(self.x(i))).collect(),
        }
    }

    pub fn zeros(&self) -> Field {
        Field {
            grid: *self,
            values: vec![0.0; self.n_nodes],
        }
    }

    fn expect(&self, f: &Field) -> Result<()> {
        if f.grid != *self || f.values.len() != self.n_nodes {
            return Err(Error::Domain(format!(
                "field lives on a different grid ({} nodes on [{}, {}])",
                f.values.len(),
                f.grid.x_min,
                f.grid.x_max
            )));
        }
        Ok(())
    }

    /// Second difference at interior nodes, zero at the boundary.
    pub fn laplacian(&self, f: &Field) -> Result<Field> {
        self.expect(f)?;
        let mut out = vec![0.0; self.n_nodes];
        laplacian_into(&f.values, self.spacing(), &mut out);
        Ok(Field {
            grid: *self,
            values: out,
        })
    }

    /// Centred first difference inside, one-sided at the two ends.
    pub fn gradient(&self, f: &Field) -> Result<Field> {
        self.expect(f)?;
        let mut out = vec![0.0; self.n_nodes];
        gradient_into(&f.values, self.spacing(), &mut out);
        Ok(Field {
            grid: *self,
            values: out,
        })
    }

    /// `∂ₓ g` of nodewise flux values, centred inside and zero on the boundary
    /// nodes (which the evolution never updates).
    pub fn divergence_of_flux(&self, gvals: &Field) -> Result<Field> {
        self.expect(gvals)?;
        let mut out = vec![0.0; self.n_nodes];
        divergence_into(&gvals.values, self.spacing(), &mut out);
        Ok(Field {
            grid: *self,
            values: out,
        })
    }

    pub fn h_norm(&self, f: &Field) -> Result<f64> {
        self.expect(f)?;
        Ok(h_norm_sq(&f.values, self.spacing()).sqrt())
    }

    pub fn v_norm(&self, f: &Field) -> Result<f64> {
        self.expect(f)?;
        Ok(v_norm_sq(&f.values, self.spacing()).sqrt())
    }
}

pub(crate) fn laplacian_into(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let inv_h2 = 1.0 / (h * h);
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        out[i] = (f[i - 1] - 2.0 * f[i] + f[i + 1]) * inv_h2;
    }
}

pub(crate) fn gradient_into(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    out[0] = (f[1] - f[0]) / h;
    out[n - 1] = (f[n - 1] - f[n - 2]) / h;
    let inv_2h = 0.5 / h;
    for i in 1..n - 1 {
        out[i] = (f[i + 1] - f[i - 1]) * inv_2h;
    }
}

pub(crate) fn divergence_into(g: &[f64], h: f64, out: &mut [f64]) {
    let n = g.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    let inv_2h = 0.5 / h;
    for i in 1..n - 1 {
        out[i] = (g[i + 1] - g[i - 1]) * inv_2h;
    }
}

pub(crate) fn h_norm_sq(f: &[f64], h: f64) -> f64 {
    h * f.iter().map(|v| v * v).sum::<f64>()
}

pub(crate) fn v_norm_sq(f: &[f64], h: f64) -> f64 {
    let n = f.len();
    let mut acc = 0.0;
    for i in 0..n {
        let d = if i == 0 {
            (f[1] - f[0]) / h
        } else if i == n - 1 {
            (f[n - 1] - f[n - 2]) / h
        } else {
            (f[i + 1] - f[i - 1]) * 0.5 / h
        };
        acc += f[i] * f[i] + d * d;
    }
    h * acc
}

/// A grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                grid.n_nodes,
                values.len()
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.grid.expect(other)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Piecewise-linear interpolation; `None` outside the grid interval.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        interpolate(&self.grid, &self.values, x)
    }
}

pub(crate) fn interpolate(grid: &Grid, values: &[f64], x: f64) -> Option<f64> {
    if !(x >= grid.x_min && x <= grid.x_max) {
        return None;
    }
    let h = grid.spacing();
    let s = (x - grid.x_min) / h;
    let i = (s.floor() as usize).min(grid.n_nodes - 2);
    let w = s - i as f64;
    Some(values[i] + w * (values[i + 1] - values[i]))
}

/// Uniform time mesh `t_i = i·T/N_t`, `i = 0..=N_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeMesh {
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        let mesh = TimeMesh { t_final, n_steps };
        mesh.check()?;
        Ok(mesh)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("mesh.n_steps must be positive".into()));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::Config("mesh.t_final must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_final
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// One field per time node, indexed by forward time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Grid,
    pub mesh: TimeMesh,
    pub fields: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(grid: Grid, mesh: TimeMesh, fields: Vec<Vec<f64>>) -> Result<Self> {
        if fields.len() != mesh.n_steps + 1 {
            return Err(Error::Domain(format!(
                "trajectory needs {} time slices, got {}",
                mesh.n_steps + 1,
                fields.len()
            )));
        }
        if fields.iter().any(|f| f.len() != grid.n_nodes) {
            return Err(Error::Domain("trajectory slice has wrong length".into()));
        }
        Ok(Trajectory { grid, mesh, fields })
    }

    pub fn zeros(grid: Grid, mesh: TimeMesh) -> Self {
        Trajectory {
            grid,
            mesh,
            fields: vec![vec![0.0; grid.n_nodes]; mesh.n_steps + 1],
        }
    }

    pub fn field(&self, i: usize) -> Field {
        Field {
            grid: self.grid,
            values: self.fields[i].clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields.iter().flatten().all(|v| v.is_finite())
    }

    fn expect_same_mesh(&self, other: &Trajectory) -> Result<()> {
        if self.grid != other.grid || self.mesh != other.mesh {
            return Err(Error::Domain(
                "trajectories live on different grids or time meshes".into(),
            ));
        }
        Ok(())
    }

    /// `max_t |a_t − b_t|_H + (Δt Σ_{t<T} |a_t − b_t|_V²)^{1/2}`.
    pub fn ht_distance(&self, other: &Trajectory) -> Result<f64> {
        self.expect_same_mesh(other)?;
        let h = self.grid.spacing();
        let dt = self.mesh.dt();
        let mut diff = vec![0.0; self.grid.n_nodes];
        let mut sup = 0.0_f64;
        let mut integral = 0.0;
        for (i, (a, b)) in self.fields.iter().zip(&other.fields).enumerate() {
            for ((d, x), y) in diff.iter_mut().zip(a).zip(b) {
                *d = x - y;
            }
            sup = sup.max(h_norm_sq(&diff, h).sqrt());
            if i < self.mesh.n_steps {
                integral += dt * v_norm_sq(&diff, h);
            }
        }
        Ok(sup + integral.sqrt())
    }

    /// `max_t |u_t|_H² + Δt Σ_{t<T} |u_t|_V²`.
    pub fn energy(&self) -> f64 {
        let h = self.grid.spacing();
        let dt = self.mesh.dt();
        let mut sup = 0.0_f64;
        let mut integral = 0.0;
        for (i, f) in self.fields.iter().enumerate() {
            sup = sup.max(h_norm_sq(f, h));
            if i < self.mesh.n_steps {
                integral += dt * v_norm_sq(f, h);
            }
        }
        sup + integral
    }

    /// CSV: header `t,x_0,…`, then one row per time node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for x in self.grid.nodes() {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
        for (i, row) in self.fields.iter().enumerate() {
            write!(w, "{}", self.mesh.time(i))?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Trajectory> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Schema("empty trajectory CSV".into()))??;
        let xs = parse_row(&header, true)?;
        if xs.len() < 3 {
            return Err(Error::Schema("trajectory CSV needs at least 3 nodes".into()));
        }
        let grid = Grid::new(xs[0], xs[xs.len() - 1], xs.len())?;
        let mut times = Vec::new();
        let mut fields = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = parse_row(&line, false)?;
            if row.len() != xs.len() + 1 {
                return Err(Error::Schema("ragged trajectory CSV row".into()));
            }
            times.push(row[0]);
            fields.push(row[1..].to_vec());
        }
        if times.len() < 2 {
            return Err(Error::Schema("trajectory CSV needs two time rows".into()));
        }
        let mesh = TimeMesh::new(*times.last().unwrap(), times.len() - 1)?;
        Trajectory::new(grid, mesh, fields)
    }
}

fn parse_row(line: &str, header: bool) -> Result<Vec<f64>> {
    let mut cells = line.split(',');
    let first = cells.next().unwrap_or("");
    let mut out = Vec::new();
    if !header {
        out.push(parse_cell(first)?);
    } else if first.trim() != "t" {
        return Err(Error::Schema("trajectory CSV header must start with `t`".into()));
    }
    for c in cells {
        out.push(parse_cell(c)?);
    }
    Ok(out)
}

fn parse_cell(c: &str) -> Result<f64> {
    c.trim()
        .parse::<f64>()
        .map_err(|_| Error::Schema(format!("not a number: {c:?}")))
}
