//! Uniform space-time lattice, discrete differential operators, and weighted
//! trapezoid quadrature over the interior, the boundary, and the time slices.
//!
//! Interior stencils are second-order central differences; at t = 0, t = T and
//! at the spatial boundary one-sided second-order stencils are used, so the
//! terminal-time quantities are computable without ghost levels. Boundary
//! nodes carry Dirichlet values in the solvers; the one-sided Laplacian at
//! boundary nodes exists only for the energy-identity quadratures.

use crate::error::{LabError, Result};
use crate::geometry::{Domain, Face, ObservationBoundary, Side};
use crate::weights::ExpOffset;
use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Space-time lattice over a rectangular domain: square spatial cells of side
/// `h` and `nt` uniform time steps of size `dt <= cfl * h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub domain: Domain,
    /// Cells per axis; cells[0] is the configured `nx`.
    pub cells: Vec<usize>,
    pub h: f64,
    pub nt: usize,
    pub dt: f64,
    pub t_final: f64,
    pub cfl: f64,
}

/// Build the lattice: `nx` cells along axis 0, per-axis cell counts scaled so
/// the cells stay square, `nt = ceil(T / (cfl h))`.
pub fn build_grid(domain: &Domain, nx: usize, t_final: f64, cfl: f64) -> Result<Grid> {
    let n = domain.dim();
    if nx < 4 {
        return Err(LabError::Validation(format!("nx must be >= 4, got {nx}")));
    }
    if !(t_final > 0.0) {
        return Err(LabError::Validation(format!(
            "T must be > 0, got {t_final}"
        )));
    }
    let cfl_max = 1.0 / (n as f64).sqrt();
    if !(cfl > 0.0 && cfl <= cfl_max + 1e-12) {
        return Err(LabError::Validation(format!(
            "cfl must lie in (0, {cfl_max:.6}] for dimension {n}, got {cfl}"
        )));
    }
    let h = domain.side(0) / nx as f64;
    let mut cells = Vec::with_capacity(n);
    for a in 0..n {
        let k = (domain.side(a) / h).round();
        if k < 4.0 || (k * h - domain.side(a)).abs() > 1e-9 * domain.side(a) {
            return Err(LabError::Validation(format!(
                "axis {a} side {} is not an integer multiple >= 4 of h = {h} (square cells enforced)",
                domain.side(a)
            )));
        }
        cells.push(k as usize);
    }
    let nt = (t_final / (cfl * h)).ceil() as usize;
    let dt = t_final / nt as f64;
    Ok(Grid {
        domain: domain.clone(),
        cells,
        h,
        nt,
        dt,
        t_final,
        cfl,
    })
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Nodes along an axis (cells + 1).
    pub fn nodes(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        (0..self.dim()).map(|a| self.nodes(a)).collect()
    }

    pub fn n_spatial_nodes(&self) -> usize {
        self.spatial_shape().iter().product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.domain.lower()[axis] + i as f64 * self.h
    }

    pub fn position(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.coord(a, i))
            .collect()
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }

    pub fn is_boundary(&self, idx: &[usize]) -> bool {
        idx.iter()
            .enumerate()
            .any(|(a, &i)| i == 0 || i == self.cells[a])
    }

    pub fn is_interior(&self, idx: &[usize]) -> bool {
        !self.is_boundary(idx)
    }

    /// All spatial multi-indices in row-major order.
    pub fn spatial_indices(&self) -> Vec<Vec<usize>> {
        let shape = self.spatial_shape();
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            out.push(idx.clone());
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }

    /// Interior multi-indices in row-major order; this ordering is the
    /// column-ordering contract of the assembled observation operator.
    pub fn interior_indices(&self) -> Vec<Vec<usize>> {
        self.spatial_indices()
            .into_iter()
            .filter(|idx| self.is_interior(idx))
            .collect()
    }

    /// Row-major strides of the spatial shape for flat indexing.
    pub fn spatial_strides(&self) -> Vec<usize> {
        let shape = self.spatial_shape();
        let mut strides = vec![1usize; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        strides
    }

    pub fn flat_of(&self, idx: &[usize]) -> usize {
        self.spatial_strides()
            .iter()
            .zip(idx)
            .map(|(s, i)| s * i)
            .sum()
    }

    /// Flat spatial indices of the interior nodes, in the same row-major
    /// order as [`Grid::interior_indices`].
    pub fn interior_flat(&self) -> Vec<usize> {
        let strides = self.spatial_strides();
        self.interior_indices()
            .iter()
            .map(|idx| strides.iter().zip(idx).map(|(s, i)| s * i).sum())
            .collect()
    }

    /// Trapezoid weight of a spatial node (product over axes of h or h/2).
    pub fn space_weight(&self, idx: &[usize]) -> f64 {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| {
                if i == 0 || i == self.cells[a] {
                    0.5 * self.h
                } else {
                    self.h
                }
            })
            .product()
    }

    /// Trapezoid weight of a time level.
    pub fn time_weight(&self, m: usize) -> f64 {
        if m == 0 || m == self.nt {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    /// Same domain and cfl with `factor`-times finer cells.
    pub fn refine(&self, factor: usize) -> Result<Grid> {
        build_grid(&self.domain, self.cells[0] * factor, self.t_final, self.cfl)
    }
}

/// Scalar function sampled on the space-time lattice, dims `[nt+1, nodes...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub data: ArrayD<f64>,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Field {
        let mut shape = vec![grid.nt + 1];
        shape.extend(grid.spatial_shape());
        Field {
            data: ArrayD::zeros(IxDyn(&shape)),
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64], f64) -> f64) -> Field {
        let mut field = Field::zeros(grid);
        let indices = grid.spatial_indices();
        for m in 0..=grid.nt {
            let t = grid.time(m);
            for idx in &indices {
                let x = grid.position(idx);
                field.set(m, idx, f(&x, t));
            }
        }
        field
    }

    fn full_index(m: usize, idx: &[usize]) -> IxDyn {
        let mut full = Vec::with_capacity(idx.len() + 1);
        full.push(m);
        full.extend_from_slice(idx);
        IxDyn(&full)
    }

    pub fn at(&self, m: usize, idx: &[usize]) -> f64 {
        self.data[Self::full_index(m, idx)]
    }

    pub fn set(&mut self, m: usize, idx: &[usize], v: f64) {
        self.data[Self::full_index(m, idx)] = v;
    }

    pub fn add_assign(&mut self, m: usize, idx: &[usize], v: f64) {
        self.data[Self::full_index(m, idx)] += v;
    }

    pub fn time_levels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        let mut shape = vec![grid.nt + 1];
        shape.extend(grid.spatial_shape());
        self.data.shape() == shape.as_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field {
            data: &self.data * alpha,
        }
    }

    /// Flat binary layout: ndim, then each dim, as u64 little-endian, then the
    /// values as f64 little-endian in row-major order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let shape = self.data.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Field> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let ndim = u64::from_le_bytes(buf8) as usize;
        if ndim == 0 || ndim > 3 {
            return Err(LabError::Shape(format!("unsupported field rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut buf8)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let total: usize = shape.iter().product();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            r.read_exact(&mut buf8)?;
            values.push(f64::from_le_bytes(buf8));
        }
        let data = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| LabError::Shape(e.to_string()))?;
        Ok(Field { data })
    }

    /// Long-format CSV (t, x..., value) for small grids.
    pub fn write_csv(&self, grid: &Grid, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec!["t".to_string()];
        for a in 0..grid.dim() {
            header.push(format!("x{a}"));
        }
        header.push("value".to_string());
        w.write_record(&header).map_err(io_err)?;
        let indices = grid.spatial_indices();
        for m in 0..=grid.nt {
            for idx in &indices {
                let mut rec = vec![fmt_float(grid.time(m))];
                for (a, &i) in idx.iter().enumerate() {
                    rec.push(fmt_float(grid.coord(a, i)));
                }
                rec.push(fmt_float(self.at(m, idx)));
                w.write_record(&rec).map_err(io_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn io_err(e: csv::Error) -> LabError {
    LabError::Validation(format!("csv: {e}"))
}

/// Floats are serialized with 17 significant digits so reruns are
/// byte-reproducible and round-trip exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Purely spatial sample, dims `[nodes...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub data: ArrayD<f64>,
}

impl SpatialField {
    pub fn zeros(grid: &Grid) -> SpatialField {
        SpatialField {
            data: ArrayD::zeros(IxDyn(&grid.spatial_shape())),
        }
    }

    pub fn constant(grid: &Grid, v: f64) -> SpatialField {
        SpatialField {
            data: ArrayD::from_elem(IxDyn(&grid.spatial_shape()), v),
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> SpatialField {
        let mut field = SpatialField::zeros(grid);
        for idx in grid.spatial_indices() {
            let x = grid.position(&idx);
            field.set(&idx, f(&x));
        }
        field
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[IxDyn(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        self.data[IxDyn(idx)] = v;
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.data.shape() == grid.spatial_shape().as_slice()
    }

    pub fn scaled(&self, alpha: f64) -> SpatialField {
        SpatialField {
            data: &self.data * alpha,
        }
    }

    pub fn add(&self, other: &SpatialField) -> SpatialField {
        SpatialField {
            data: &self.data + &other.data,
        }
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        Field {
            data: self.data.clone(),
        }
        .write_binary(path)
    }

    pub fn read_binary(path: &Path) -> Result<SpatialField> {
        Ok(SpatialField {
            data: Field::read_binary(path)?.data,
        })
    }
}

/// Discrete derivative jet of a space-time field.
pub struct FieldJet {
    pub dt: Field,
    pub dtt: Field,
    pub grad: Vec<Field>,
    pub laplacian: Field,
}

/// Second-order stencils everywhere: central in the interior, one-sided at
/// t in {0, T} and at the spatial boundary.
pub fn discrete_derivatives(field: &Field, grid: &Grid) -> Result<FieldJet> {
    if !field.matches(grid) {
        return Err(LabError::Shape("field does not match grid".into()));
    }
    if grid.nt < 3 {
        return Err(LabError::Validation("need at least 3 time steps".into()));
    }
    let indices = grid.spatial_indices();
    let nt = grid.nt;
    let dt = grid.dt;
    let h = grid.h;

    let mut d_t = Field::zeros(grid);
    let mut d_tt = Field::zeros(grid);
    let mut grad: Vec<Field> = (0..grid.dim()).map(|_| Field::zeros(grid)).collect();
    let mut lap = Field::zeros(grid);

    for m in 0..=nt {
        for idx in &indices {
            // time derivatives
            let (ft, ftt) = if m == 0 {
                (
                    (-3.0 * field.at(0, idx) + 4.0 * field.at(1, idx) - field.at(2, idx))
                        / (2.0 * dt),
                    (2.0 * field.at(0, idx) - 5.0 * field.at(1, idx) + 4.0 * field.at(2, idx)
                        - field.at(3, idx))
                        / (dt * dt),
                )
            } else if m == nt {
                (
                    (3.0 * field.at(nt, idx) - 4.0 * field.at(nt - 1, idx) + field.at(nt - 2, idx))
                        / (2.0 * dt),
                    (2.0 * field.at(nt, idx) - 5.0 * field.at(nt - 1, idx)
                        + 4.0 * field.at(nt - 2, idx)
                        - field.at(nt - 3, idx))
                        / (dt * dt),
                )
            } else {
                (
                    (field.at(m + 1, idx) - field.at(m - 1, idx)) / (2.0 * dt),
                    (field.at(m + 1, idx) - 2.0 * field.at(m, idx) + field.at(m - 1, idx))
                        / (dt * dt),
                )
            };
            d_t.set(m, idx, ft);
            d_tt.set(m, idx, ftt);

            // spatial derivatives, axis by axis
            let mut lap_val = 0.0;
            for a in 0..grid.dim() {
                let last = grid.cells[a];
                let i = idx[a];
                let at_off = |off: i64| {
                    let mut j = idx.clone();
                    j[a] = (i as i64 + off) as usize;
                    field.at(m, &j)
                };
                let (g, l) = if i == 0 {
                    (
                        (-3.0 * at_off(0) + 4.0 * at_off(1) - at_off(2)) / (2.0 * h),
                        (2.0 * at_off(0) - 5.0 * at_off(1) + 4.0 * at_off(2) - at_off(3)) / (h * h),
                    )
                } else if i == last {
                    (
                        (3.0 * at_off(0) - 4.0 * at_off(-1) + at_off(-2)) / (2.0 * h),
                        (2.0 * at_off(0) - 5.0 * at_off(-1) + 4.0 * at_off(-2) - at_off(-3))
                            / (h * h),
                    )
                } else {
                    (
                        (at_off(1) - at_off(-1)) / (2.0 * h),
                        (at_off(1) - 2.0 * at_off(0) + at_off(-1)) / (h * h),
                    )
                };
                grad[a].set(m, idx, g);
                lap_val += l;
            }
            lap.set(m, idx, lap_val);
        }
    }

    Ok(FieldJet {
        dt: d_t,
        dtt: d_tt,
        grad,
        laplacian: lap,
    })
}

/// Integration region for [`integrate`].
pub enum Region<'a> {
    SpaceTime,
    Terminal,
    Initial,
    Boundary(&'a BoundaryLayout),
}

/// Trapezoid quadrature of `field` (optionally times `weight`) over a region.
/// The weight must be nonnegative; shapes must match the grid.
pub fn integrate(
    field: &Field,
    weight: Option<&Field>,
    region: Region<'_>,
    grid: &Grid,
) -> Result<f64> {
    if !field.matches(grid) {
        return Err(LabError::Shape("integrand does not match grid".into()));
    }
    if let Some(w) = weight {
        if !w.matches(grid) {
            return Err(LabError::Shape("weight does not match grid".into()));
        }
        if w.data.iter().any(|&v| v < 0.0) {
            return Err(LabError::Validation("weight must be nonnegative".into()));
        }
    }
    let value = |m: usize, idx: &[usize]| field.at(m, idx) * weight.map_or(1.0, |w| w.at(m, idx));
    Ok(match region {
        Region::SpaceTime => integrate_q(grid, value),
        Region::Terminal => integrate_slice(grid, grid.nt, |idx| value(grid.nt, idx)),
        Region::Initial => integrate_slice(grid, 0, |idx| value(0, idx)),
        Region::Boundary(layout) => integrate_sigma(grid, layout, |m, k| {
            let node = &layout.nodes[k];
            value(m, &node.idx)
        }),
    })
}

/// Trapezoid sum over the space-time closure in fixed row-major order.
pub fn integrate_q(grid: &Grid, mut f: impl FnMut(usize, &[usize]) -> f64) -> f64 {
    let indices = grid.spatial_indices();
    let weights: Vec<f64> = indices.iter().map(|idx| grid.space_weight(idx)).collect();
    let mut total = 0.0;
    for m in 0..=grid.nt {
        let wt = grid.time_weight(m);
        let mut slice_sum = 0.0;
        for (idx, wx) in indices.iter().zip(&weights) {
            slice_sum += wx * f(m, idx);
        }
        total += wt * slice_sum;
    }
    total
}

/// Trapezoid sum over one time slice.
pub fn integrate_slice(grid: &Grid, m: usize, mut f: impl FnMut(&[usize]) -> f64) -> f64 {
    let mut total = 0.0;
    for idx in grid.spatial_indices() {
        total += grid.space_weight(&idx) * f(&idx);
    }
    let _ = m;
    total
}

/// Trapezoid sum of a purely spatial integrand.
pub fn integrate_spatial(grid: &Grid, field: &SpatialField) -> f64 {
    let mut total = 0.0;
    for idx in grid.spatial_indices() {
        total += grid.space_weight(&idx) * field.at(&idx);
    }
    total
}

/// One boundary node: which face it belongs to, its spatial index, and its
/// arclength trapezoid weight along that face. Corners appear once per
/// adjacent face, which is the correct splitting for curve integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryNode {
    pub face: Face,
    pub idx: Vec<usize>,
    pub position: Vec<f64>,
    pub arc_weight: f64,
}

impl BoundaryNode {
    /// Index `steps` nodes inward along the face normal.
    pub fn inward(&self, steps: usize) -> Vec<usize> {
        let mut j = self.idx.clone();
        match self.face.side {
            Side::Lower => j[self.face.axis] += steps,
            Side::Upper => j[self.face.axis] -= steps,
        }
        j
    }
}

/// Node set of a collection of faces, with per-face arc weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLayout {
    pub nodes: Vec<BoundaryNode>,
    pub faces: Vec<Face>,
}

impl BoundaryLayout {
    pub fn new(grid: &Grid, faces: &[Face]) -> BoundaryLayout {
        let mut nodes = Vec::new();
        for &face in faces {
            let pinned = if face.side == Side::Lower {
                0
            } else {
                grid.cells[face.axis]
            };
            match grid.dim() {
                1 => {
                    nodes.push(BoundaryNode {
                        face,
                        idx: vec![pinned],
                        position: grid.position(&[pinned]),
                        arc_weight: 1.0,
                    });
                }
                2 => {
                    let t_axis = 1 - face.axis;
                    let last = grid.cells[t_axis];
                    for i in 0..=last {
                        let mut idx = vec![0usize; 2];
                        idx[face.axis] = pinned;
                        idx[t_axis] = i;
                        let w = if i == 0 || i == last {
                            0.5 * grid.h
                        } else {
                            grid.h
                        };
                        nodes.push(BoundaryNode {
                            face,
                            idx: idx.clone(),
                            position: grid.position(&idx),
                            arc_weight: w,
                        });
                    }
                }
                _ => unreachable!(),
            }
        }
        BoundaryLayout {
            nodes,
            faces: faces.to_vec(),
        }
    }

    pub fn full(grid: &Grid) -> BoundaryLayout {
        BoundaryLayout::new(grid, &Face::all(grid.dim()))
    }

    pub fn observed(grid: &Grid, obs: &ObservationBoundary) -> BoundaryLayout {
        let faces: Vec<Face> = obs.observed_faces().collect();
        BoundaryLayout::new(grid, &faces)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Function sampled on `faces x [0, T]`, dims `[nt+1, layout.len()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub values: Array2<f64>,
    pub layout: BoundaryLayout,
}

impl BoundaryTrace {
    pub fn zeros(grid: &Grid, layout: &BoundaryLayout) -> BoundaryTrace {
        BoundaryTrace {
            values: Array2::zeros((grid.nt + 1, layout.len())),
            layout: layout.clone(),
        }
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.values.nrows() == grid.nt + 1 && self.values.ncols() == self.layout.len()
    }

    /// CSV with one row per (t, node): t, face, arclength coordinates, value.
    pub fn write_csv(&self, grid: &Grid, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec!["t".to_string(), "face".to_string()];
        for a in 0..grid.dim() {
            header.push(format!("x{a}"));
        }
        header.push("value".to_string());
        w.write_record(&header).map_err(io_err)?;
        for m in 0..=grid.nt {
            for (k, node) in self.layout.nodes.iter().enumerate() {
                let mut rec = vec![fmt_float(grid.time(m)), node.face.label()];
                for &p in &node.position {
                    rec.push(fmt_float(p));
                }
                rec.push(fmt_float(self.values[(m, k)]));
                w.write_record(&rec).map_err(io_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trapezoid sum over `faces x (0,T)` in fixed order.
pub fn integrate_sigma(
    grid: &Grid,
    layout: &BoundaryLayout,
    mut f: impl FnMut(usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for m in 0..=grid.nt {
        let wt = grid.time_weight(m);
        let mut slice = 0.0;
        for (k, node) in layout.nodes.iter().enumerate() {
            slice += node.arc_weight * f(m, k);
        }
        total += wt * slice;
    }
    total
}

/// Weighted variants: accumulate `f * exp(logw - offset)`.
pub fn integrate_q_weighted(
    grid: &Grid,
    offset: &ExpOffset,
    mut f: impl FnMut(usize, &[usize]) -> f64,
    mut logw: impl FnMut(usize, &[usize]) -> f64,
) -> f64 {
    integrate_q(grid, |m, idx| f(m, idx) * offset.scale(logw(m, idx)))
}

pub fn integrate_slice_weighted(
    grid: &Grid,
    m: usize,
    offset: &ExpOffset,
    mut f: impl FnMut(&[usize]) -> f64,
    mut logw: impl FnMut(&[usize]) -> f64,
) -> f64 {
    integrate_slice(grid, m, |idx| f(idx) * offset.scale(logw(idx)))
}

pub fn integrate_sigma_weighted(
    grid: &Grid,
    layout: &BoundaryLayout,
    offset: &ExpOffset,
    mut f: impl FnMut(usize, usize) -> f64,
    mut logw: impl FnMut(usize, usize) -> f64,
) -> f64 {
    integrate_sigma(grid, layout, |m, k| f(m, k) * offset.scale(logw(m, k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit_grid(nx: usize, t_final: f64) -> Grid {
        build_grid(&Domain::unit_square(), nx, t_final, 0.5).unwrap()
    }

    #[test]
    fn build_grid_example() {
        let g = unit_grid(20, 2.0);
        assert!((g.h - 0.05).abs() < 1e-15);
        assert!(g.dt <= 0.025 + 1e-15);
        assert!(g.nt >= 80);
        assert!((g.dt * g.nt as f64 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn build_grid_rejections() {
        let dom = Domain::unit_square();
        assert!(build_grid(&dom, 3, 1.0, 0.5).is_err());
        assert!(build_grid(&dom, 8, 1.0, 0.8).is_err()); // cfl > 1/sqrt(2)
        assert!(build_grid(&dom, 8, 0.0, 0.5).is_err());
        // non-square cells: sides 1 and 0.55 cannot share h = 1/8
        let skew = Domain::new(vec![0.0, 0.0], vec![1.0, 0.55]).unwrap();
        assert!(build_grid(&skew, 8, 1.0, 0.5).is_err());
        // 2:1 rectangle is fine, cells double along the long axis
        let rect = Domain::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = build_grid(&rect, 8, 1.0, 0.5).unwrap();
        assert_eq!(g.cells, vec![8, 16]);
    }

    #[test]
    fn refinement_halves_h_and_dt() {
        let g = unit_grid(16, 2.0);
        let f = g.refine(2).unwrap();
        assert!((f.h - g.h / 2.0).abs() < 1e-15);
        assert!(f.dt <= g.dt / 2.0 + 1e-15);
        assert_eq!(f.nt, 2 * g.nt);
    }

    #[test]
    fn derivatives_exact_on_low_degree() {
        let g = unit_grid(8, 1.0);
        let constant = Field::from_fn(&g, |_, _| 3.5);
        let jet = discrete_derivatives(&constant, &g).unwrap();
        assert!(jet.dt.linf() < 1e-12);
        assert!(jet.dtt.linf() < 1e-10);
        assert!(jet.grad[0].linf() < 1e-12);
        assert!(jet.laplacian.linf() < 1e-9);

        let linear = Field::from_fn(&g, |x, t| 2.0 * x[0] - 3.0 * x[1] + 0.7 * t);
        let jet = discrete_derivatives(&linear, &g).unwrap();
        for m in [0, g.nt / 2, g.nt] {
            for idx in g.spatial_indices() {
                assert!((jet.grad[0].at(m, &idx) - 2.0).abs() < 1e-10);
                assert!((jet.grad[1].at(m, &idx) + 3.0).abs() < 1e-10);
                assert!((jet.dt.at(m, &idx) - 0.7).abs() < 1e-10);
            }
        }
        assert!(jet.dtt.linf() < 1e-8);
        assert!(jet.laplacian.linf() < 1e-7);
    }

    #[test]
    fn laplacian_second_order_on_smooth_field() {
        let exact = |x: &[f64], t: f64| t * t * (PI * x[0]).sin() * (PI * x[1]).sin();
        let mut errors = Vec::new();
        for nx in [8, 16, 32] {
            let g = unit_grid(nx, 1.0);
            let f = Field::from_fn(&g, exact);
            let jet = discrete_derivatives(&f, &g).unwrap();
            let mut err = 0.0f64;
            for idx in g.spatial_indices() {
                let x = g.position(&idx);
                let analytic = -2.0 * PI * PI * exact(&x, 1.0);
                err = err.max((jet.laplacian.at(g.nt, &idx) - analytic).abs());
            }
            errors.push(err);
        }
        let order1 = (errors[0] / errors[1]).log2();
        let order2 = (errors[1] / errors[2]).log2();
        assert!(order1 > 1.5 && order2 > 1.5, "orders {order1} {order2}");
    }

    #[test]
    fn integrate_examples() {
        let g = unit_grid(16, 2.0);
        let one = Field::from_fn(&g, |_, _| 1.0);
        let q = integrate(&one, None, Region::SpaceTime, &g).unwrap();
        assert!((q - 2.0).abs() < 1e-10);

        let zero = Field::zeros(&g);
        assert_eq!(integrate(&zero, None, Region::SpaceTime, &g).unwrap(), 0.0);

        let sine_sq = Field::from_fn(&g, |x, _| ((PI * x[0]).sin() * (PI * x[1]).sin()).powi(2));
        let term = integrate(&sine_sq, None, Region::Terminal, &g).unwrap();
        assert!((term - 0.25).abs() < 1e-3, "terminal {term}");
    }

    #[test]
    fn quadrature_convergence_order() {
        let mut errors = Vec::new();
        let exact = 2.0 * (2.0 / PI) * (2.0 / PI); // int of sin(pi x) sin(pi y) over Q, T = 2
        for nx in [8, 16, 32] {
            let g = unit_grid(nx, 2.0);
            let f = Field::from_fn(&g, |x, _| (PI * x[0]).sin() * (PI * x[1]).sin());
            let v = integrate(&f, None, Region::SpaceTime, &g).unwrap();
            errors.push((v - exact).abs());
        }
        let order1 = (errors[0] / errors[1]).log2();
        let order2 = (errors[1] / errors[2]).log2();
        assert!((1.8..2.2).contains(&order1), "{order1}");
        assert!((1.8..2.2).contains(&order2), "{order2}");
    }

    #[test]
    fn boundary_layout_and_sigma_integral() {
        let g = unit_grid(8, 1.0);
        let layout = BoundaryLayout::full(&g);
        // |boundary| * T = 4 * 1
        let total = integrate_sigma(&g, &layout, |_, _| 1.0);
        assert!((total - 4.0).abs() < 1e-12);
        // nodes per face = 9, four faces
        assert_eq!(layout.len(), 36);

        let g1 = build_grid(&Domain::new(vec![0.0], vec![1.0]).unwrap(), 8, 1.0, 1.0).unwrap();
        let l1 = BoundaryLayout::full(&g1);
        assert_eq!(l1.len(), 2);
        assert!((integrate_sigma(&g1, &l1, |_, _| 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_ratio_invariant_under_offset() {
        let g = unit_grid(8, 1.0);
        let f1 = Field::from_fn(&g, |x, _| x[0] + 0.3);
        let f2 = Field::from_fn(&g, |x, t| x[1] + t + 0.1);
        let logw = |_: usize, idx: &[usize]| 30.0 * idx[0] as f64;
        let ratio = |off: ExpOffset| {
            let a = integrate_q_weighted(&g, &off, |m, i| f1.at(m, i), logw);
            let b = integrate_q_weighted(&g, &off, |m, i| f2.at(m, i), logw);
            a / b
        };
        let r1 = ratio(ExpOffset::new(240.0));
        let r2 = ratio(ExpOffset::new(100.0));
        assert!((r1 - r2).abs() < 1e-12 * r1.abs());
    }

    #[test]
    fn binary_roundtrip() {
        let g = unit_grid(5, 0.5);
        let f = Field::from_fn(&g, |x, t| x[0] * 2.0 - x[1] + t * t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        f.write_binary(&path).unwrap();
        let back = Field::read_binary(&path).unwrap();
        assert_eq!(f, back);
    }

    proptest! {
        #[test]
        fn integrate_is_linear_and_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = unit_grid(5, 0.5);
            let f1 = Field::from_fn(&g, |x, t| (x[0] - 0.3) * t + x[1]);
            let f2 = Field::from_fn(&g, |x, t| x[0] * x[1] - 0.2 * t);
            let combo = Field { data: &f1.data * a + &f2.data * b };
            let lhs = integrate(&combo, None, Region::SpaceTime, &g).unwrap();
            let rhs = a * integrate(&f1, None, Region::SpaceTime, &g).unwrap()
                + b * integrate(&f2, None, Region::SpaceTime, &g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));

            let nonneg = Field::from_fn(&g, |x, _| x[0] * x[0] + a * a);
            let v = integrate(&nonneg, None, Region::SpaceTime, &g).unwrap();
            prop_assert!(v >= 0.0);
        }
    }
}
