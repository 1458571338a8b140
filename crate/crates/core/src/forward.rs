//! Explicit leapfrog solver for the damped wave equation
//! `u_tt - Lap u + sum_j b_j d_j u + d u_t + c u = rhs` with homogeneous
//! Dirichlet boundary, plus the time-differentiated system and Neumann trace
//! extraction on observed faces.
//!
//! The damping term is discretized by the centered difference
//! `(u^{m+1} - u^{m-1}) / (2 dt)`, which leaves a scalar linear solve per node.

use crate::error::{LabError, Result};
use crate::grid::{discrete_derivatives, BoundaryLayout, BoundaryTrace, Field, Grid, SpatialField};

/// Spatially varying lower-order coefficients and the time factor `R(x,t)` of
/// the source. All of them are grid samples; discontinuous data is permitted.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub b: Vec<SpatialField>,
    pub d: SpatialField,
    pub c: SpatialField,
    pub r: Field,
}

impl CoefficientSet {
    /// b = d = c = 0 and R = 1.
    pub fn free_wave(grid: &Grid) -> CoefficientSet {
        CoefficientSet {
            b: (0..grid.dim()).map(|_| SpatialField::zeros(grid)).collect(),
            d: SpatialField::zeros(grid),
            c: SpatialField::zeros(grid),
            r: Field::from_fn(grid, |_, _| 1.0),
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.b.len() != grid.dim() {
            return Err(LabError::Shape(format!(
                "need {} advection components, got {}",
                grid.dim(),
                self.b.len()
            )));
        }
        for field in self.b.iter().chain([&self.d, &self.c]) {
            if !field.matches(grid) {
                return Err(LabError::Shape("coefficient does not match grid".into()));
            }
            if !field.data.iter().all(|v| v.is_finite()) {
                return Err(LabError::Validation(
                    "coefficient contains non-finite values".into(),
                ));
            }
        }
        if !self.r.matches(grid) || !self.r.all_finite() {
            return Err(LabError::Shape(
                "R does not match grid or is non-finite".into(),
            ));
        }
        Ok(())
    }

    /// L-infinity bounds (b_1..b_n, d, c, R), reported for diagnostics.
    pub fn linf_bounds(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.b.iter().map(|f| f.linf()).collect();
        out.push(self.d.linf());
        out.push(self.c.linf());
        out.push(self.r.linf());
        out
    }

    /// min over the closure of |R(x, 0)|; must be positive for inversion use.
    pub fn min_r0(&self, grid: &Grid) -> f64 {
        grid.spatial_indices()
            .iter()
            .map(|idx| self.r.at(0, idx).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Pointwise source `R(x,t) f(x)`.
    pub fn assemble_rhs(&self, f: &SpatialField, grid: &Grid) -> Field {
        let nsp = grid.n_spatial_nodes();
        let mut rhs = Field::zeros(grid);
        let out = rhs.data.as_slice_mut().unwrap();
        let r_s = self.r.data.as_slice().unwrap();
        let f_s = f.data.as_slice().unwrap();
        for m in 0..=grid.nt {
            let base = m * nsp;
            for j in 0..nsp {
                out[base + j] = r_s[base + j] * f_s[j];
            }
        }
        rhs
    }
}

/// Spatial source factor with its finite discrete L2 norm checked.
#[derive(Debug, Clone)]
pub struct SourceSpec {
    pub f: SpatialField,
}

impl SourceSpec {
    pub fn new(f: SpatialField, grid: &Grid) -> Result<SourceSpec> {
        if !f.matches(grid) {
            return Err(LabError::Shape("source does not match grid".into()));
        }
        if !f.data.iter().all(|v| v.is_finite()) {
            return Err(LabError::Validation(
                "source contains non-finite values".into(),
            ));
        }
        Ok(SourceSpec { f })
    }
}

/// Leapfrog solve of the initial-boundary value problem. The first step is the
/// Taylor expansion consistent with the given initial velocity; each later
/// step solves the pointwise-implicit damping update. The time loop runs on
/// flat slices with precomputed neighbor strides.
pub fn solve_wave(
    coeffs: &CoefficientSet,
    rhs: &Field,
    grid: &Grid,
    initial_displacement: &SpatialField,
    initial_velocity: &SpatialField,
) -> Result<Field> {
    coeffs.validate(grid)?;
    if !rhs.matches(grid) {
        return Err(LabError::Shape("rhs does not match grid".into()));
    }
    if !initial_displacement.matches(grid) || !initial_velocity.matches(grid) {
        return Err(LabError::Shape("initial data does not match grid".into()));
    }
    let dt = grid.dt;
    if dt > grid.cfl * grid.h + 1e-12 {
        return Err(LabError::Numerical(format!(
            "CFL violated: dt = {} exceeds cfl*h = {}",
            dt,
            grid.cfl * grid.h
        )));
    }

    let h = grid.h;
    let nsp = grid.n_spatial_nodes();
    let strides = grid.spatial_strides();
    let interior = grid.interior_flat();
    let ndim = grid.dim();

    let b_s: Vec<&[f64]> = coeffs
        .b
        .iter()
        .map(|f| f.data.as_slice().unwrap())
        .collect();
    let d_s = coeffs.d.data.as_slice().unwrap();
    let c_s = coeffs.c.data.as_slice().unwrap();
    let rhs_s = rhs.data.as_slice().unwrap();
    let u0_s = initial_displacement.data.as_slice().unwrap();
    let v0_s = initial_velocity.data.as_slice().unwrap();

    let mut u = Field::zeros(grid);
    let data = u.data.as_slice_mut().unwrap();

    // K u = Lap u - b.grad u - c u at an interior flat index
    let spatial_op = |slice: &[f64], j: usize| -> f64 {
        let mut lap = 0.0;
        let mut adv = 0.0;
        for a in 0..ndim {
            let st = strides[a];
            let up = slice[j + st];
            let um = slice[j - st];
            lap += (up - 2.0 * slice[j] + um) / (h * h);
            adv += b_s[a][j] * (up - um) / (2.0 * h);
        }
        lap - adv - c_s[j] * slice[j]
    };

    // t = 0: Dirichlet-compatible initial displacement (boundary forced to 0)
    for &j in &interior {
        data[j] = u0_s[j];
    }

    // first step: u^1 = u^0 + dt v^0 + dt^2/2 (K u^0 - d v^0 + rhs^0)
    {
        let (lvl0, lvl1) = data.split_at_mut(nsp);
        for &j in &interior {
            let utt = spatial_op(lvl0, j) - d_s[j] * v0_s[j] + rhs_s[j];
            lvl1[j] = lvl0[j] + dt * v0_s[j] + 0.5 * dt * dt * utt;
        }
    }

    // leapfrog: (u^{m+1} - 2u^m + u^{m-1})/dt^2 + d (u^{m+1} - u^{m-1})/(2dt)
    //           = K u^m + rhs^m
    for m in 1..grid.nt {
        let (past, next) = data.split_at_mut((m + 1) * nsp);
        let cur = &past[m * nsp..];
        let prev = &past[(m - 1) * nsp..m * nsp];
        let rhs_m = &rhs_s[m * nsp..];
        let out = &mut next[..nsp];
        let mut bad: Option<String> = None;
        for &j in &interior {
            let gamma = 1.0 + 0.5 * dt * d_s[j];
            let explicit = 2.0 * cur[j] - prev[j]
                + 0.5 * dt * d_s[j] * prev[j]
                + dt * dt * (spatial_op(cur, j) + rhs_m[j]);
            let v = explicit / gamma;
            if !v.is_finite() && bad.is_none() {
                bad = Some(format!(
                    "non-finite value at step {} (t = {})",
                    m + 1,
                    grid.time(m + 1)
                ));
            }
            out[j] = v;
        }
        if let Some(msg) = bad {
            return Err(LabError::Numerical(msg));
        }
    }
    Ok(u)
}

/// Solve the system satisfied by `y = u_t`: same operator, right-hand side
/// `R_t(x,t) f(x)`, data `y(.,0) = 0`, `y_t(.,0) = R(.,0) f`.
pub fn differentiated_system(
    coeffs: &CoefficientSet,
    f: &SpatialField,
    grid: &Grid,
) -> Result<Field> {
    let r_jet = discrete_derivatives(&coeffs.r, grid)?;
    let nsp = grid.n_spatial_nodes();
    let mut rhs = Field::zeros(grid);
    {
        let out = rhs.data.as_slice_mut().unwrap();
        let rt_s = r_jet.dt.data.as_slice().unwrap();
        let f_s = f.data.as_slice().unwrap();
        for m in 0..=grid.nt {
            let base = m * nsp;
            for j in 0..nsp {
                out[base + j] = rt_s[base + j] * f_s[j];
            }
        }
    }
    let mut v0 = SpatialField::zeros(grid);
    {
        let out = v0.data.as_slice_mut().unwrap();
        let r_s = coeffs.r.data.as_slice().unwrap();
        let f_s = f.data.as_slice().unwrap();
        for j in 0..nsp {
            out[j] = r_s[j] * f_s[j];
        }
    }
    solve_wave(coeffs, &rhs, grid, &SpatialField::zeros(grid), &v0)
}

/// Outward normal derivative on the layout's faces by the one-sided
/// second-order stencil `(3 u_b - 4 u_{in1} + u_{in2}) / (2h)`.
pub fn neumann_trace(field: &Field, layout: &BoundaryLayout, grid: &Grid) -> Result<BoundaryTrace> {
    if !field.matches(grid) {
        return Err(LabError::Shape("field does not match grid".into()));
    }
    let mut trace = BoundaryTrace::zeros(grid, layout);
    for m in 0..=grid.nt {
        for (k, node) in layout.nodes.iter().enumerate() {
            let v = (3.0 * field.at(m, &node.idx) - 4.0 * field.at(m, &node.inward(1))
                + field.at(m, &node.inward(2)))
                / (2.0 * grid.h);
            trace.values[(m, k)] = v;
        }
    }
    Ok(trace)
}
