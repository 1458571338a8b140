//! The linear observation operator `f -> d_t(dnu u)` on the observed boundary
//! and its regularized inversion.
//!
//! The operator is the composition of four linear steps: pointwise source
//! assembly `f -> R f`, the leapfrog solve, the Neumann trace, and the time
//! derivative of the trace. The adjoint is the exact transpose of that
//! composition with respect to the quadrature-weighted inner products, built
//! by running the time recursion backwards; at desk scale a dense matrix can
//! be assembled column by column as a brute-force oracle.
//!
//! Reconstruction is plain L2 Tikhonov by conjugate gradients on the normal
//! equations; the exponential weight of the estimate machinery is a proof
//! device and is deliberately not used here.

use crate::error::{LabError, Result};
use crate::forward::{neumann_trace, solve_wave, CoefficientSet};
use crate::geometry::{
    distance_extrema, min_observation_time, observation_boundary, Domain, MultiplierPoint,
    ObservationBoundary,
};
use crate::grid::{BoundaryLayout, BoundaryTrace, Field, Grid, SpatialField};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Everything the observation operator needs: grid, coefficients, observed
/// faces, and the admissibility verdict (`|R(.,0)| >= r0 > 0` and
/// `T > sqrt(d1^2 - d0^2)`). Inadmissible configurations require the explicit
/// override flag so negative controls fail loudly when unintended.
#[derive(Debug, Clone)]
pub struct OperatorConfig {
    pub grid: Grid,
    pub coeffs: CoefficientSet,
    pub observation: ObservationBoundary,
    pub layout: BoundaryLayout,
    pub t_min: f64,
    pub r0: f64,
    pub admissible: bool,
}

impl OperatorConfig {
    pub fn new(
        domain: &Domain,
        x0: &MultiplierPoint,
        grid: Grid,
        coeffs: CoefficientSet,
        override_admissibility: bool,
    ) -> Result<OperatorConfig> {
        coeffs.validate(&grid)?;
        let extrema = distance_extrema(domain, x0)?;
        let t_min = min_observation_time(&extrema);
        let r0 = coeffs.min_r0(&grid);
        let time_ok = grid.t_final > t_min;
        let r0_ok = r0 > 0.0;
        let admissible = time_ok && r0_ok;
        if !admissible && !override_admissibility {
            let mut why = Vec::new();
            if !time_ok {
                why.push(format!(
                    "observation time T = {} does not exceed the threshold sqrt(d1^2 - d0^2) = {t_min}",
                    grid.t_final
                ));
            }
            if !r0_ok {
                why.push("R(., 0) vanishes somewhere on the closure".into());
            }
            return Err(LabError::Validation(format!(
                "inadmissible configuration: {}; pass the admissibility override to run it as a negative control",
                why.join("; ")
            )));
        }
        let observation = observation_boundary(domain, x0)?;
        let layout = BoundaryLayout::observed(&grid, &observation);
        if layout.is_empty() {
            return Err(LabError::Validation("observed boundary is empty".into()));
        }
        Ok(OperatorConfig {
            grid,
            coeffs,
            observation,
            layout,
            t_min,
            r0,
            admissible,
        })
    }

    /// Same configuration restricted to a subset of observed faces.
    pub fn with_faces(&self, faces: &[crate::geometry::Face]) -> OperatorConfig {
        let observation = self.observation.keep_observed(faces);
        let layout = BoundaryLayout::observed(&self.grid, &observation);
        OperatorConfig {
            observation,
            layout,
            ..self.clone()
        }
    }
}

/// L2(Omega) inner product over interior degrees of freedom (uniform weight
/// h^n; boundary nodes are not unknowns of the inverse problem).
pub fn omega_dot(a: &SpatialField, b: &SpatialField, grid: &Grid) -> f64 {
    let cell = grid.h.powi(grid.dim() as i32);
    let a_s = a.data.as_slice().unwrap();
    let b_s = b.data.as_slice().unwrap();
    let mut acc = 0.0;
    for j in grid.interior_flat() {
        acc += a_s[j] * b_s[j];
    }
    acc * cell
}

fn dot_flat(a: &[f64], b: &[f64], interior: &[usize], cell: f64) -> f64 {
    let mut acc = 0.0;
    for &j in interior {
        acc += a[j] * b[j];
    }
    acc * cell
}

pub fn omega_norm(a: &SpatialField, grid: &Grid) -> f64 {
    omega_dot(a, a, grid).sqrt()
}

/// L2(Sigma_0) inner product with trapezoid weights in time and arclength.
pub fn trace_dot(a: &BoundaryTrace, b: &BoundaryTrace, grid: &Grid) -> f64 {
    let mut acc = 0.0;
    for m in 0..=grid.nt {
        let wt = grid.time_weight(m);
        for (k, node) in a.layout.nodes.iter().enumerate() {
            acc += wt * node.arc_weight * a.values[(m, k)] * b.values[(m, k)];
        }
    }
    acc
}

pub fn trace_norm(a: &BoundaryTrace, grid: &Grid) -> f64 {
    trace_dot(a, a, grid).sqrt()
}

/// Second-order time derivative of a trace, one-sided at both ends.
fn trace_time_derivative(trace: &BoundaryTrace, grid: &Grid) -> BoundaryTrace {
    let nt = grid.nt;
    let dt = grid.dt;
    let mut out = trace.clone();
    for k in 0..trace.layout.len() {
        for m in 0..=nt {
            out.values[(m, k)] = if m == 0 {
                (-3.0 * trace.values[(0, k)] + 4.0 * trace.values[(1, k)] - trace.values[(2, k)])
                    / (2.0 * dt)
            } else if m == nt {
                (3.0 * trace.values[(nt, k)] - 4.0 * trace.values[(nt - 1, k)]
                    + trace.values[(nt - 2, k)])
                    / (2.0 * dt)
            } else {
                (trace.values[(m + 1, k)] - trace.values[(m - 1, k)]) / (2.0 * dt)
            };
        }
    }
    out
}

/// Forward map `A f = d_t (dnu u)` on the observed boundary, where `u` solves
/// the wave problem with source `R(x,t) f(x)` and zero data.
pub fn apply_forward(f: &SpatialField, cfg: &OperatorConfig) -> Result<BoundaryTrace> {
    if !f.matches(&cfg.grid) {
        return Err(LabError::Shape("source does not match grid".into()));
    }
    let rhs = cfg.coeffs.assemble_rhs(f, &cfg.grid);
    let zero = SpatialField::zeros(&cfg.grid);
    let u = solve_wave(&cfg.coeffs, &rhs, &cfg.grid, &zero, &zero)?;
    let tr = neumann_trace(&u, &cfg.layout, &cfg.grid)?;
    Ok(trace_time_derivative(&tr, &cfg.grid))
}

/// Exact discrete adjoint of [`apply_forward`] with respect to
/// `omega_dot`/`trace_dot`: transpose every step of the composition, running
/// the leapfrog recursion backwards in time.
pub fn apply_adjoint(g: &BoundaryTrace, cfg: &OperatorConfig) -> Result<SpatialField> {
    let grid = &cfg.grid;
    if !g.matches(grid) || g.layout.len() != cfg.layout.len() {
        return Err(LabError::Shape("trace does not match configuration".into()));
    }
    let nt = grid.nt;
    let dt = grid.dt;
    let h = grid.h;
    let nodes = &cfg.layout.nodes;

    // W: quadrature weights of the Sigma_0 inner product
    let mut weighted = vec![vec![0.0f64; nodes.len()]; nt + 1];
    for (m, row) in weighted.iter_mut().enumerate() {
        let wt = grid.time_weight(m);
        for (k, node) in nodes.iter().enumerate() {
            row[k] = wt * node.arc_weight * g.values[(m, k)];
        }
    }

    // D_t^T: scatter the time-stencil coefficients
    let mut seeds_trace = vec![vec![0.0f64; nodes.len()]; nt + 1];
    for (m, row) in weighted.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if m == 0 {
                seeds_trace[0][k] += -3.0 / (2.0 * dt) * v;
                seeds_trace[1][k] += 4.0 / (2.0 * dt) * v;
                seeds_trace[2][k] += -1.0 / (2.0 * dt) * v;
            } else if m == nt {
                seeds_trace[nt][k] += 3.0 / (2.0 * dt) * v;
                seeds_trace[nt - 1][k] += -4.0 / (2.0 * dt) * v;
                seeds_trace[nt - 2][k] += 1.0 / (2.0 * dt) * v;
            } else {
                seeds_trace[m + 1][k] += v / (2.0 * dt);
                seeds_trace[m - 1][k] += -v / (2.0 * dt);
            }
        }
    }

    // Tr^T: scatter the one-sided normal stencil onto interior unknowns (the
    // boundary value itself is a Dirichlet zero, not an unknown)
    let nsp = grid.n_spatial_nodes();
    let inward_flats: Vec<(Option<usize>, Option<usize>)> = nodes
        .iter()
        .map(|node| {
            let in1 = node.inward(1);
            let in2 = node.inward(2);
            (
                grid.is_interior(&in1).then(|| grid.flat_of(&in1)),
                grid.is_interior(&in2).then(|| grid.flat_of(&in2)),
            )
        })
        .collect();
    let mut ubar = Field::zeros(grid);
    {
        let ub = ubar.data.as_slice_mut().unwrap();
        for (m, row) in seeds_trace.iter().enumerate() {
            let base = m * nsp;
            for (k, &v) in row.iter().enumerate() {
                let (in1, in2) = inward_flats[k];
                if let Some(j) = in1 {
                    ub[base + j] += -4.0 / (2.0 * h) * v;
                }
                if let Some(j) = in2 {
                    ub[base + j] += 1.0 / (2.0 * h) * v;
                }
            }
        }
    }

    // S^T: reverse sweep of u^{m+1} = Gamma (L u^m + mu u^{m-1} + dt^2 rhs^m),
    // first step u^1 = (dt^2/2) rhs^0. The seed and coefficient slices are
    // zero on boundary nodes, so neighbor reads need no interiority checks.
    let strides = grid.spatial_strides();
    let interior = grid.interior_flat();
    let ndim = grid.dim();
    let b_s: Vec<&[f64]> = cfg
        .coeffs
        .b
        .iter()
        .map(|f| f.data.as_slice().unwrap())
        .collect();
    let d_s = cfg.coeffs.d.data.as_slice().unwrap();
    let c_s = cfg.coeffs.c.data.as_slice().unwrap();
    let mut rbar = Field::zeros(grid);
    let rb = rbar.data.as_slice_mut().unwrap();
    let ub = ubar.data.as_slice_mut().unwrap();
    let mut gm = vec![0.0f64; nsp];
    let mut b_gm: Vec<Vec<f64>> = (0..ndim).map(|_| vec![0.0f64; nsp]).collect();
    for m in (2..=nt).rev() {
        let (past, cur_on) = ub.split_at_mut(m * nsp);
        let cur = &cur_on[..nsp];
        for &j in &interior {
            let gamma = 1.0 + 0.5 * dt * d_s[j];
            gm[j] = cur[j] / gamma;
            for a in 0..ndim {
                b_gm[a][j] = b_s[a][j] * gm[j];
            }
        }
        let prev = &mut past[(m - 2) * nsp..m * nsp];
        for &j in &interior {
            let mut lap = 0.0;
            let mut adv = 0.0;
            for a in 0..ndim {
                let st = strides[a];
                lap += (gm[j + st] - 2.0 * gm[j] + gm[j - st]) / (h * h);
                adv += (b_gm[a][j + st] - b_gm[a][j - st]) / (2.0 * h);
            }
            let lt = 2.0 * gm[j] + dt * dt * (lap + adv - c_s[j] * gm[j]);
            prev[nsp + j] += lt;
            let mu = 0.5 * dt * d_s[j] - 1.0;
            prev[j] += mu * gm[j];
            rb[(m - 1) * nsp + j] = dt * dt * gm[j];
        }
        // clear the scratch for the next level
        for &j in &interior {
            gm[j] = 0.0;
            for bg in b_gm.iter_mut() {
                bg[j] = 0.0;
            }
        }
    }
    for &j in &interior {
        rb[j] += 0.5 * dt * dt * ub[nsp + j];
    }

    // E^T and M^{-1}: fbar(x) = sum_m R(x, t_m) rbar^m(x) / h^n
    let cell = grid.h.powi(grid.dim() as i32);
    let r_s = cfg.coeffs.r.data.as_slice().unwrap();
    let mut fbar = SpatialField::zeros(grid);
    let fb = fbar.data.as_slice_mut().unwrap();
    for &j in &interior {
        let mut acc = 0.0;
        for m in 0..=nt {
            acc += r_s[m * nsp + j] * rb[m * nsp + j];
        }
        fb[j] = acc / cell;
    }
    Ok(fbar)
}

/// Dense assembly of the operator in L2 geometry:
/// `A_tilde = W^{1/2} A M^{-1/2}`, so Euclidean norms of the matrix equal
/// the quadrature norms of the operator and `sigma_min` is the stability
/// constant's reciprocal.
pub struct AssembledOperator {
    pub matrix: DMatrix<f64>,
    pub row_weights: Vec<f64>,
    pub cell: f64,
    pub interior: Vec<Vec<usize>>,
}

/// Column k = weighted forward image of the k-th interior indicator.
pub fn assemble_operator(cfg: &OperatorConfig, cap: usize) -> Result<AssembledOperator> {
    let grid = &cfg.grid;
    let interior = grid.interior_indices();
    if interior.len() > cap {
        return Err(LabError::Validation(format!(
            "interior node count {} exceeds the dense-assembly cap {cap}",
            interior.len()
        )));
    }
    let nrows = (grid.nt + 1) * cfg.layout.len();
    let mut row_weights = Vec::with_capacity(nrows);
    for m in 0..=grid.nt {
        let wt = grid.time_weight(m);
        for node in &cfg.layout.nodes {
            row_weights.push((wt * node.arc_weight).sqrt());
        }
    }
    let cell = grid.h.powi(grid.dim() as i32);
    let col_scale = 1.0 / cell.sqrt();
    let mut matrix = DMatrix::zeros(nrows, interior.len());
    for (k, idx) in interior.iter().enumerate() {
        let mut e_k = SpatialField::zeros(grid);
        e_k.set(idx, 1.0);
        let g = apply_forward(&e_k, cfg)?;
        for m in 0..=grid.nt {
            for (j, _) in cfg.layout.nodes.iter().enumerate() {
                let row = m * cfg.layout.len() + j;
                matrix[(row, k)] = row_weights[row] * g.values[(m, j)] * col_scale;
            }
        }
    }
    Ok(AssembledOperator {
        matrix,
        row_weights,
        cell,
        interior,
    })
}

impl AssembledOperator {
    pub fn sigma_min(&self) -> f64 {
        let svd = self.matrix.clone().svd(false, false);
        svd.singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sigma_max(&self) -> f64 {
        let svd = self.matrix.clone().svd(false, false);
        svd.singular_values.iter().copied().fold(0.0f64, f64::max)
    }

    /// sigma_min over a subset of the rows (faces kept), for row-deletion
    /// monotonicity checks.
    pub fn sigma_min_rows(&self, keep_rows: &[usize]) -> f64 {
        let sub = self.matrix.select_rows(keep_rows.iter());
        let svd = sub.svd(false, false);
        svd.singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn trace_to_weighted_vec(&self, g: &BoundaryTrace, grid: &Grid) -> DVector<f64> {
        let mut v = DVector::zeros(self.matrix.nrows());
        let ncols_trace = g.layout.len();
        for m in 0..=grid.nt {
            for k in 0..ncols_trace {
                let row = m * ncols_trace + k;
                v[row] = self.row_weights[row] * g.values[(m, k)];
            }
        }
        v
    }

    pub fn field_to_vec(&self, f: &SpatialField) -> DVector<f64> {
        let scale = self.cell.sqrt();
        DVector::from_iterator(
            self.interior.len(),
            self.interior.iter().map(|idx| f.at(idx) * scale),
        )
    }

    pub fn vec_to_field(&self, v: &DVector<f64>, grid: &Grid) -> SpatialField {
        let scale = self.cell.sqrt();
        let mut f = SpatialField::zeros(grid);
        for (k, idx) in self.interior.iter().enumerate() {
            f.set(idx, v[k] / scale);
        }
        f
    }

    /// Minimum-norm least-squares solution through the SVD (the alpha -> 0
    /// oracle for the iterative reconstruction).
    pub fn pinv_solve(&self, g: &BoundaryTrace, grid: &Grid) -> Result<SpatialField> {
        self.factorize()?.solve(g, grid)
    }

    /// Factorize once; the returned solver reuses the SVD across data vectors.
    pub fn factorize(&self) -> Result<OperatorPinv> {
        let svd = self.matrix.clone().svd(true, true);
        Ok(OperatorPinv {
            svd,
            row_weights: self.row_weights.clone(),
            cell: self.cell,
            interior: self.interior.clone(),
        })
    }

    /// Dump the weighted matrix as CSV (desk scale only).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        for i in 0..self.matrix.nrows() {
            let rec: Vec<String> = (0..self.matrix.ncols())
                .map(|j| crate::grid::fmt_float(self.matrix[(i, j)]))
                .collect();
            w.write_record(&rec)
                .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cached SVD of the assembled operator for repeated pseudo-inverse solves.
pub struct OperatorPinv {
    svd: nalgebra::linalg::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    row_weights: Vec<f64>,
    cell: f64,
    interior: Vec<Vec<usize>>,
}

impl OperatorPinv {
    pub fn solve(&self, g: &BoundaryTrace, grid: &Grid) -> Result<SpatialField> {
        let mut rhs = DVector::zeros(self.row_weights.len());
        let ncols_trace = g.layout.len();
        for m in 0..=grid.nt {
            for k in 0..ncols_trace {
                let row = m * ncols_trace + k;
                rhs[row] = self.row_weights[row] * g.values[(m, k)];
            }
        }
        let sol = self
            .svd
            .solve(&rhs, 1e-13)
            .map_err(|e| LabError::Numerical(format!("svd solve: {e}")))?;
        let scale = self.cell.sqrt();
        let mut f = SpatialField::zeros(grid);
        for (k, idx) in self.interior.iter().enumerate() {
            f.set(idx, sol[k] / scale);
        }
        Ok(f)
    }
}

/// Outcome of one regularized inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionResult {
    #[serde(skip)]
    pub f_hat: SpatialField,
    pub alpha: f64,
    pub iterations: usize,
    /// ||A f_hat - g|| in the Sigma_0 norm.
    pub residual: f64,
    /// sqrt(||A f - g||^2 + alpha ||f||^2) per reported iterate; nonincreasing.
    pub objective_history: Vec<f64>,
    pub rel_error: Option<f64>,
    pub converged: bool,
}

impl Default for SpatialField {
    fn default() -> Self {
        SpatialField {
            data: ndarray::ArrayD::zeros(ndarray::IxDyn(&[0])),
        }
    }
}

/// Minimize `||A f - g||^2 + alpha ||f||^2` by conjugate gradients on the
/// normal equations, matrix-free through [`apply_forward`]/[`apply_adjoint`].
/// Non-convergence within `max_iter` is reported through the flag, not as an
/// error. `alpha = 0` is reserved for the assembled pseudo-inverse oracle.
pub fn reconstruct(
    g: &BoundaryTrace,
    cfg: &OperatorConfig,
    alpha: f64,
    max_iter: usize,
) -> Result<ReconstructionResult> {
    reconstruct_from(g, cfg, alpha, max_iter, None)
}

/// As [`reconstruct`] but optionally warm-started.
pub fn reconstruct_from(
    g: &BoundaryTrace,
    cfg: &OperatorConfig,
    alpha: f64,
    max_iter: usize,
    warm_start: Option<&SpatialField>,
) -> Result<ReconstructionResult> {
    if alpha <= 0.0 {
        return Err(LabError::Validation(
            "alpha must be positive (alpha = 0 goes through the assembled pseudo-inverse)".into(),
        ));
    }
    let grid = &cfg.grid;
    let interior = grid.interior_flat();
    let cell = grid.h.powi(grid.dim() as i32);
    let normal = |f: &SpatialField| -> Result<SpatialField> {
        let af = apply_forward(f, cfg)?;
        let mut out = apply_adjoint(&af, cfg)?;
        let out_s = out.data.as_slice_mut().unwrap();
        let f_s = f.data.as_slice().unwrap();
        for &j in &interior {
            out_s[j] += alpha * f_s[j];
        }
        Ok(out)
    };
    let b = apply_adjoint(g, cfg)?;
    let b_norm = omega_norm(&b, grid);

    let mut x = match warm_start {
        Some(f0) if f0.matches(grid) => f0.clone(),
        _ => SpatialField::zeros(grid),
    };
    let objective = |x: &SpatialField| -> Result<(f64, f64)> {
        let ax = apply_forward(x, cfg)?;
        let diff = BoundaryTrace {
            values: &ax.values - &g.values,
            layout: ax.layout.clone(),
        };
        let data = trace_norm(&diff, grid);
        let xn = omega_norm(x, grid);
        Ok((data, (data * data + alpha * xn * xn).sqrt()))
    };

    let mut r = {
        let nx = normal(&x)?;
        let mut r = b.clone();
        let r_s = r.data.as_slice_mut().unwrap();
        let nx_s = nx.data.as_slice().unwrap();
        for &j in &interior {
            r_s[j] -= nx_s[j];
        }
        r
    };
    let mut p = r.clone();
    let mut rs = dot_flat(
        r.data.as_slice().unwrap(),
        r.data.as_slice().unwrap(),
        &interior,
        cell,
    );
    let tol = 1e-12 * b_norm.max(1e-300);
    let mut history = Vec::new();
    let (mut data_res, obj0) = objective(&x)?;
    history.push(obj0);
    let mut iterations = 0;
    let mut converged = rs.sqrt() <= tol;

    for _ in 0..max_iter {
        if rs.sqrt() <= tol {
            converged = true;
            break;
        }
        let np = normal(&p)?;
        let pnp = dot_flat(
            p.data.as_slice().unwrap(),
            np.data.as_slice().unwrap(),
            &interior,
            cell,
        );
        if pnp <= 0.0 {
            break; // numerically singular direction
        }
        let step = rs / pnp;
        {
            let x_s = x.data.as_slice_mut().unwrap();
            let p_s = p.data.as_slice().unwrap();
            for &j in &interior {
                x_s[j] += step * p_s[j];
            }
        }
        {
            let r_s = r.data.as_slice_mut().unwrap();
            let np_s = np.data.as_slice().unwrap();
            for &j in &interior {
                r_s[j] -= step * np_s[j];
            }
        }
        let rs_new = dot_flat(
            r.data.as_slice().unwrap(),
            r.data.as_slice().unwrap(),
            &interior,
            cell,
        );
        let beta = rs_new / rs;
        {
            let p_s = p.data.as_slice_mut().unwrap();
            let r_s = r.data.as_slice().unwrap();
            for &j in &interior {
                p_s[j] = r_s[j] + beta * p_s[j];
            }
        }
        rs = rs_new;
        iterations += 1;
        let (d, obj) = objective(&x)?;
        data_res = d;
        history.push(obj);
        if rs.sqrt() <= tol {
            converged = true;
            break;
        }
    }

    Ok(ReconstructionResult {
        f_hat: x,
        alpha,
        iterations,
        residual: data_res,
        objective_history: history,
        rel_error: None,
        converged,
    })
}

/// Morozov discrepancy rule with safety factor `tau`: walk a geometric alpha
/// ladder downward (warm-started) and return the first (largest) alpha whose
/// data residual drops below `tau * noise_norm`; if none qualifies the
/// smallest-alpha result is returned.
pub fn reconstruct_discrepancy(
    g: &BoundaryTrace,
    cfg: &OperatorConfig,
    noise_norm: f64,
    tau: f64,
    max_iter: usize,
) -> Result<ReconstructionResult> {
    // top-eigenvalue scale of A*A by a few power iterations on a fixed seed
    let grid = &cfg.grid;
    let mut v = SpatialField::from_fn(grid, |_| 1.0);
    let nrm = omega_norm(&v, grid);
    v = v.scaled(1.0 / nrm);
    let mut lambda_max = 1.0;
    for _ in 0..6 {
        let av = apply_forward(&v, cfg)?;
        let nv = apply_adjoint(&av, cfg)?;
        lambda_max = omega_norm(&nv, grid);
        if lambda_max <= 0.0 {
            break;
        }
        v = nv.scaled(1.0 / lambda_max);
    }
    let target = tau * noise_norm;
    let mut alpha = lambda_max.max(1e-300);
    let mut warm: Option<SpatialField> = None;
    let mut last: Option<ReconstructionResult> = None;
    for _ in 0..16 {
        let res = reconstruct_from(g, cfg, alpha, max_iter, warm.as_ref())?;
        warm = Some(res.f_hat.clone());
        let met = res.residual <= target;
        last = Some(res);
        if met {
            break;
        }
        alpha *= 0.25;
    }
    Ok(last.expect("ladder is nonempty"))
}

/// Add iid Gaussian noise scaled so the Sigma_0 norm of the perturbation is
/// exactly `delta * ||g||`; returns the noisy trace and the noise norm.
pub fn add_relative_noise(
    g: &BoundaryTrace,
    grid: &Grid,
    delta: f64,
    rng: &mut impl Rng,
) -> (BoundaryTrace, f64) {
    let mut noise = BoundaryTrace {
        values: g.values.clone(),
        layout: g.layout.clone(),
    };
    for v in noise.values.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let g_norm = trace_norm(g, grid);
    let xi_norm = trace_norm(&noise, grid);
    let scale = if xi_norm > 0.0 {
        delta * g_norm / xi_norm
    } else {
        0.0
    };
    let noisy = BoundaryTrace {
        values: &g.values + &(&noise.values * scale),
        layout: g.layout.clone(),
    };
    (noisy, delta * g_norm)
}

/// Subsample a trace computed on an exact refinement of `coarse` back onto
/// the coarse lattice (inverse-crime avoidance: data comes from the finer
/// grid, inversion runs on the coarse one).
pub fn restrict_trace(
    fine: &BoundaryTrace,
    fine_grid: &Grid,
    coarse_grid: &Grid,
    coarse_layout: &BoundaryLayout,
) -> Result<BoundaryTrace> {
    if fine_grid.nt % coarse_grid.nt != 0 || fine_grid.cells[0] % coarse_grid.cells[0] != 0 {
        return Err(LabError::Shape(
            "fine grid is not an exact refinement of the coarse grid".into(),
        ));
    }
    let tf = fine_grid.nt / coarse_grid.nt;
    let sf = fine_grid.cells[0] / coarse_grid.cells[0];
    let mut out = BoundaryTrace::zeros(coarse_grid, coarse_layout);
    for (k, node) in coarse_layout.nodes.iter().enumerate() {
        let fine_idx: Vec<usize> = node.idx.iter().map(|&i| i * sf).collect();
        let fk = fine
            .layout
            .nodes
            .iter()
            .position(|n| n.face == node.face && n.idx == fine_idx)
            .ok_or_else(|| LabError::Shape("fine layout misses a restricted node".into()))?;
        for m in 0..=coarse_grid.nt {
            out.values[(m, k)] = fine.values[(m * tf, fk)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    fn desk_config(nx: usize, t_final: f64) -> OperatorConfig {
        let dom = Domain::unit_square();
        let x0 = MultiplierPoint::new(vec![-0.5, 0.5], &dom).unwrap();
        let grid = build_grid(&dom, nx, t_final, 0.5).unwrap();
        let coeffs = CoefficientSet::free_wave(&grid);
        OperatorConfig::new(&dom, &x0, grid, coeffs, false).unwrap()
    }

    fn random_smooth(grid: &Grid, rng: &mut impl Rng) -> SpatialField {
        let mut coef = [[0.0f64; 3]; 3];
        for row in coef.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(-1.0..1.0);
            }
        }
        SpatialField::from_fn(grid, |x| {
            let mut v = 0.0;
            for (i, row) in coef.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    v +=
                        c * ((i + 1) as f64 * PI * x[0]).sin() * ((j + 1) as f64 * PI * x[1]).sin()
                            / ((i + j + 2) as f64);
                }
            }
            v
        })
    }

    #[test]
    fn zero_maps_to_zero() {
        let cfg = desk_config(8, 2.0);
        let g = apply_forward(&SpatialField::zeros(&cfg.grid), &cfg).unwrap();
        assert_eq!(g.values.iter().fold(0.0f64, |a, v| a.max(v.abs())), 0.0);
        let f = apply_adjoint(&g, &cfg).unwrap();
        assert_eq!(f.linf(), 0.0);
    }

    #[test]
    fn forward_is_linear() {
        let cfg = desk_config(8, 2.0);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..3 {
            let f1 = random_smooth(&cfg.grid, &mut rng);
            let f2 = random_smooth(&cfg.grid, &mut rng);
            let g1 = apply_forward(&f1, &cfg).unwrap();
            let g2 = apply_forward(&f2, &cfg).unwrap();
            let g12 = apply_forward(&f1.add(&f2), &cfg).unwrap();
            let diff = (&g12.values - &g1.values - &g2.values)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            let scale = g12.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(
                diff <= 1e-10 * scale.max(1e-300),
                "diff {diff} scale {scale}"
            );
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // |<Af, g> - <f, A* g>| <= 1e-8 ||Af|| ||g|| on random pairs, with
        // nonzero lower-order coefficients to exercise every transpose branch
        let dom = Domain::unit_square();
        let x0 = MultiplierPoint::new(vec![-0.5, 0.5], &dom).unwrap();
        let grid = build_grid(&dom, 8, 2.0, 0.5).unwrap();
        let mut coeffs = CoefficientSet::free_wave(&grid);
        coeffs.b[0] = SpatialField::from_fn(&grid, |x| 0.4 * x[1]);
        coeffs.b[1] = SpatialField::from_fn(&grid, |x| -0.3 * x[0]);
        coeffs.d = SpatialField::from_fn(&grid, |x| 0.5 * (x[0] + x[1]));
        coeffs.c = SpatialField::from_fn(&grid, |x| 1.0 + x[0]);
        coeffs.r = Field::from_fn(&grid, |x, t| 1.0 + 0.3 * t * (1.0 - x[1]));
        let cfg = OperatorConfig::new(&dom, &x0, grid, coeffs, false).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..5 {
            let f = random_smooth(&cfg.grid, &mut rng);
            let mut g = BoundaryTrace::zeros(&cfg.grid, &cfg.layout);
            for v in g.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let af = apply_forward(&f, &cfg).unwrap();
            let astar_g = apply_adjoint(&g, &cfg).unwrap();
            let lhs = trace_dot(&af, &g, &cfg.grid);
            let rhs = omega_dot(&f, &astar_g, &cfg.grid);
            let bound = 1e-8 * trace_norm(&af, &cfg.grid) * trace_norm(&g, &cfg.grid);
            assert!((lhs - rhs).abs() <= bound.max(1e-14), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn adjoint_identity_holds_1d() {
        let dom = Domain::new(vec![0.0], vec![1.0]).unwrap();
        let x0 = MultiplierPoint::new(vec![-1.0], &dom).unwrap();
        // T_min = sqrt(3) in this geometry
        let grid = build_grid(&dom, 8, 2.0, 0.9).unwrap();
        let coeffs = CoefficientSet::free_wave(&grid);
        let cfg = OperatorConfig::new(&dom, &x0, grid, coeffs, false).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        for _ in 0..3 {
            let f = SpatialField::from_fn(&cfg.grid, |x| {
                (PI * x[0]).sin() + 0.3 * (2.0 * PI * x[0]).sin()
            });
            let mut g = BoundaryTrace::zeros(&cfg.grid, &cfg.layout);
            for v in g.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let af = apply_forward(&f, &cfg).unwrap();
            let astar_g = apply_adjoint(&g, &cfg).unwrap();
            let lhs = trace_dot(&af, &g, &cfg.grid);
            let rhs = omega_dot(&f, &astar_g, &cfg.grid);
            let bound = 1e-10 * trace_norm(&af, &cfg.grid) * trace_norm(&g, &cfg.grid);
            assert!((lhs - rhs).abs() <= bound.max(1e-14), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn assembled_matrix_matches_operator() {
        let cfg = desk_config(8, 2.0);
        let op = assemble_operator(&cfg, 1024).unwrap();
        // (nx - 1)^2 interior columns
        assert_eq!(op.matrix.ncols(), 49);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = random_smooth(&cfg.grid, &mut rng);
        let g = apply_forward(&f, &cfg).unwrap();
        let via_matrix = &op.matrix * op.field_to_vec(&f);
        let direct = op.trace_to_weighted_vec(&g, &cfg.grid);
        let scale = direct.amax();
        let diff = (&via_matrix - &direct).amax();
        assert!(diff <= 1e-12 * scale, "diff {diff}, scale {scale}");

        // adjoint through the matrix transpose: A~^T W^{1/2} g = M^{1/2} A* g
        let mut g2 = BoundaryTrace::zeros(&cfg.grid, &cfg.layout);
        for v in g2.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let adj = apply_adjoint(&g2, &cfg).unwrap();
        let via_t = op.matrix.transpose() * op.trace_to_weighted_vec(&g2, &cfg.grid);
        let direct_t = op.field_to_vec(&adj);
        let dmax = (&via_t - &direct_t).amax();
        assert!(dmax <= 1e-10 * direct_t.amax().max(1e-300), "dmax {dmax}");

        // admissible configuration is injective at desk scale
        assert!(op.sigma_min() > 0.0);
    }

    #[test]
    fn inadmissibility_requires_override() {
        let dom = Domain::unit_square();
        let x0 = MultiplierPoint::new(vec![-0.5, 0.5], &dom).unwrap();
        // T = 1.0 < T_min = 1.5
        let grid = build_grid(&dom, 8, 1.0, 0.5).unwrap();
        let coeffs = CoefficientSet::free_wave(&grid);
        assert!(OperatorConfig::new(&dom, &x0, grid.clone(), coeffs.clone(), false).is_err());
        let cfg = OperatorConfig::new(&dom, &x0, grid, coeffs, true).unwrap();
        assert!(!cfg.admissible);

        // vanishing R(., 0) on a quarter
        let grid2 = build_grid(&dom, 8, 2.0, 0.5).unwrap();
        let mut c2 = CoefficientSet::free_wave(&grid2);
        c2.r = Field::from_fn(
            &grid2,
            |x, _| {
                if x[0] < 0.5 && x[1] < 0.5 {
                    0.0
                } else {
                    1.0
                }
            },
        );
        assert!(OperatorConfig::new(&dom, &x0, grid2.clone(), c2.clone(), false).is_err());
        assert!(OperatorConfig::new(&dom, &x0, grid2, c2, true).is_ok());
    }

    #[test]
    fn reconstruct_zero_data_and_validation() {
        let cfg = desk_config(8, 2.0);
        let g = BoundaryTrace::zeros(&cfg.grid, &cfg.layout);
        let res = reconstruct(&g, &cfg, 1e-6, 50).unwrap();
        assert_eq!(res.f_hat.linf(), 0.0);
        assert!(res.converged);
        assert!(reconstruct(&g, &cfg, 0.0, 10).is_err());
    }

    #[test]
    fn objective_history_nonincreasing() {
        let cfg = desk_config(8, 2.0);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let f = random_smooth(&cfg.grid, &mut rng);
        let g = apply_forward(&f, &cfg).unwrap();
        let res = reconstruct(&g, &cfg, 1e-8, 60).unwrap();
        for w in res.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10), "{} -> {}", w[0], w[1]);
        }
        assert!(res.iterations > 0);
    }

    #[test]
    fn noiseless_reconstruction_matches_pinv_oracle() {
        let cfg = desk_config(8, 2.0);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let f_true = random_smooth(&cfg.grid, &mut rng);
        let g = apply_forward(&f_true, &cfg).unwrap();
        let op = assemble_operator(&cfg, 1024).unwrap();
        let f_pinv = op.pinv_solve(&g, &cfg.grid).unwrap();
        let res = reconstruct(&g, &cfg, 1e-10, 400).unwrap();
        let diff = SpatialField {
            data: &res.f_hat.data - &f_pinv.data,
        };
        let rel = omega_norm(&diff, &cfg.grid) / omega_norm(&f_pinv, &cfg.grid);
        assert!(rel <= 1e-3, "rel {rel}");
        // noiseless data: pinv essentially recovers the truth on-grid
        let err = SpatialField {
            data: &f_pinv.data - &f_true.data,
        };
        assert!(omega_norm(&err, &cfg.grid) / omega_norm(&f_true, &cfg.grid) < 1e-6);
    }

    #[test]
    fn noiseless_error_decreases_along_alpha_ladder() {
        let cfg = desk_config(8, 2.0);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let f_true = random_smooth(&cfg.grid, &mut rng);
        let g = apply_forward(&f_true, &cfg).unwrap();
        let mut errors = Vec::new();
        let mut warm: Option<SpatialField> = None;
        for alpha in [1e-2, 1e-4, 1e-6, 1e-8] {
            let res = reconstruct_from(&g, &cfg, alpha, 400, warm.as_ref()).unwrap();
            warm = Some(res.f_hat.clone());
            let err = SpatialField {
                data: &res.f_hat.data - &f_true.data,
            };
            errors.push(omega_norm(&err, &cfg.grid) / omega_norm(&f_true, &cfg.grid));
        }
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{errors:?}");
        }
    }

    #[test]
    fn noise_scaling_is_exact() {
        let cfg = desk_config(8, 2.0);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let f = random_smooth(&cfg.grid, &mut rng);
        let g = apply_forward(&f, &cfg).unwrap();
        let (noisy, noise_norm) = add_relative_noise(&g, &cfg.grid, 0.02, &mut rng);
        let diff = BoundaryTrace {
            values: &noisy.values - &g.values,
            layout: g.layout.clone(),
        };
        let measured = trace_norm(&diff, &cfg.grid);
        assert!((measured - noise_norm).abs() <= 1e-10 * noise_norm);
        assert!((measured - 0.02 * trace_norm(&g, &cfg.grid)).abs() <= 1e-10 * noise_norm);
    }

    #[test]
    fn two_routes_to_the_data_agree() {
        // d_t(trace of u) against trace of the differentiated system
        let errs: Vec<f64> = [8usize, 16]
            .iter()
            .map(|&nx| {
                let cfg = desk_config(nx, 2.0);
                let f = SpatialField::from_fn(&cfg.grid, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
                let g1 = apply_forward(&f, &cfg).unwrap();
                let y = crate::forward::differentiated_system(&cfg.coeffs, &f, &cfg.grid).unwrap();
                let g2 = neumann_trace(&y, &cfg.layout, &cfg.grid).unwrap();
                let diff = BoundaryTrace {
                    values: &g1.values - &g2.values,
                    layout: g1.layout.clone(),
                };
                trace_norm(&diff, &cfg.grid) / trace_norm(&g2, &cfg.grid)
            })
            .collect();
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 1.5, "order {order}, errs {errs:?}");
    }

    #[test]
    fn restriction_subsamples_fine_trace() {
        let cfg_c = desk_config(8, 2.0);
        let cfg_f = desk_config(16, 2.0);
        let f_expr = |x: &[f64]| (PI * x[0]).sin() * (PI * x[1]).sin();
        let g_f = apply_forward(&SpatialField::from_fn(&cfg_f.grid, f_expr), &cfg_f).unwrap();
        let g_r = restrict_trace(&g_f, &cfg_f.grid, &cfg_c.grid, &cfg_c.layout).unwrap();
        let g_c = apply_forward(&SpatialField::from_fn(&cfg_c.grid, f_expr), &cfg_c).unwrap();
        let diff = BoundaryTrace {
            values: &g_r.values - &g_c.values,
            layout: g_c.layout.clone(),
        };
        let rel = trace_norm(&diff, &cfg_c.grid) / trace_norm(&g_c, &cfg_c.grid);
        // the two grids agree to discretization accuracy, not exactly
        assert!(rel < 0.1 && rel > 0.0, "rel {rel}");
    }
}
