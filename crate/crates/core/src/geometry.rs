//! Spatial domain, multiplier point, observed boundary and admissibility.
//!
//! The domain is an axis-aligned rectangle in dimension 1 or 2. The multiplier
//! point `x0` must lie strictly outside the closed domain; the observed part
//! of the boundary is the set of faces where `(x - x0) . nu(x) >= 0`. For an
//! axis-aligned face that dot product is constant along the face, so faces are
//! observed or excluded as a whole and never need splitting.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle `[lower_0, upper_0] x ... x [lower_{n-1}, upper_{n-1}]`,
/// n in {1, 2}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(LabError::Validation(
                "domain corners must have equal dimension".into(),
            ));
        }
        let n = lower.len();
        if n == 0 || n > 2 {
            return Err(LabError::Validation(format!(
                "domain dimension must be 1 or 2, got {n}"
            )));
        }
        for a in 0..n {
            if !(upper[a] > lower[a]) || !lower[a].is_finite() || !upper[a].is_finite() {
                return Err(LabError::Validation(format!(
                    "domain must satisfy upper > lower componentwise (axis {a}: [{}, {}])",
                    lower[a], upper[a]
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    pub fn unit_square() -> Self {
        Domain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// True if `x` lies in the closed rectangle.
    pub fn contains_closure(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|a| x[a] >= self.lower[a] && x[a] <= self.upper[a])
    }

    /// The 2^n corner points.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..(1usize << n))
            .map(|mask| {
                (0..n)
                    .map(|a| {
                        if mask & (1 << a) != 0 {
                            self.upper[a]
                        } else {
                            self.lower[a]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// The fixed point `x0` outside the closed domain from which the weight and
/// the observed boundary are built. Exterior-ness is checked at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierPoint {
    coords: Vec<f64>,
}

impl MultiplierPoint {
    pub fn new(coords: Vec<f64>, domain: &Domain) -> Result<Self> {
        if coords.len() != domain.dim() {
            return Err(LabError::Validation(format!(
                "multiplier point dimension {} does not match domain dimension {}",
                coords.len(),
                domain.dim()
            )));
        }
        if domain.contains_closure(&coords) {
            return Err(LabError::Validation(format!(
                "multiplier point {coords:?} must lie strictly outside the closed domain"
            )));
        }
        Ok(MultiplierPoint { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Which side of its axis a face sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

/// One axis-aligned boundary face: the set `{ x : x_axis = coord }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    /// All 2n faces of an n-dimensional rectangle, in (axis, Lower/Upper) order.
    pub fn all(dim: usize) -> Vec<Face> {
        let mut v = Vec::with_capacity(2 * dim);
        for axis in 0..dim {
            v.push(Face {
                axis,
                side: Side::Lower,
            });
            v.push(Face {
                axis,
                side: Side::Upper,
            });
        }
        v
    }

    /// Outward unit normal (+-e_axis).
    pub fn normal(&self, dim: usize) -> Vec<f64> {
        let mut nu = vec![0.0; dim];
        nu[self.axis] = match self.side {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        };
        nu
    }

    /// Coordinate value pinned on this face.
    pub fn coord(&self, domain: &Domain) -> f64 {
        match self.side {
            Side::Lower => domain.lower()[self.axis],
            Side::Upper => domain.upper()[self.axis],
        }
    }

    pub fn label(&self) -> String {
        let side = match self.side {
            Side::Lower => "lower",
            Side::Upper => "upper",
        };
        format!("x{}_{}", self.axis, side)
    }
}

/// Per-face observation flag together with the (constant) value of
/// `(x - x0) . nu` on the face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub face: Face,
    pub observed: bool,
    /// Value of (x - x0) . nu, constant along an axis-aligned face.
    pub normal_dot: f64,
}

/// The observed boundary: every face flagged observed/unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBoundary {
    pub faces: Vec<FaceObservation>,
}

impl ObservationBoundary {
    pub fn observed_faces(&self) -> impl Iterator<Item = Face> + '_ {
        self.faces.iter().filter(|f| f.observed).map(|f| f.face)
    }

    /// Restrict to a subset of the observed faces (used for row-subset
    /// monotonicity checks). Faces not currently observed stay unobserved.
    pub fn keep_observed(&self, keep: &[Face]) -> ObservationBoundary {
        ObservationBoundary {
            faces: self
                .faces
                .iter()
                .map(|f| FaceObservation {
                    face: f.face,
                    observed: f.observed && keep.contains(&f.face),
                    normal_dot: f.normal_dot,
                })
                .collect(),
        }
    }
}

/// Extremal distances from `x0` to the closed domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceExtrema {
    pub d0: f64,
    pub d1: f64,
}

/// d0 = dist(x0, rectangle) via per-axis clamping, d1 = max distance over the
/// corners (the max over a rectangle is always attained at a corner).
pub fn distance_extrema(domain: &Domain, x0: &MultiplierPoint) -> Result<DistanceExtrema> {
    let x0 = x0.coords();
    let mut d0_sq = 0.0;
    for a in 0..domain.dim() {
        let below = domain.lower()[a] - x0[a];
        let above = x0[a] - domain.upper()[a];
        let gap = below.max(above).max(0.0);
        d0_sq += gap * gap;
    }
    let d0 = d0_sq.sqrt();
    if d0 <= 0.0 {
        return Err(LabError::Validation(
            "multiplier point lies inside or on the closed domain".into(),
        ));
    }
    let d1 = domain
        .corners()
        .iter()
        .map(|c| dist(c, x0))
        .fold(0.0f64, f64::max);
    Ok(DistanceExtrema { d0, d1 })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Flag each face by the sign of `(x - x0) . nu`, which is constant on an
/// axis-aligned face; the boundary case 0 counts as observed.
pub fn observation_boundary(domain: &Domain, x0: &MultiplierPoint) -> Result<ObservationBoundary> {
    distance_extrema(domain, x0)?; // enforces the exterior precondition
    let x0 = x0.coords();
    let faces = Face::all(domain.dim())
        .into_iter()
        .map(|face| {
            let normal_dot = match face.side {
                Side::Lower => x0[face.axis] - domain.lower()[face.axis],
                Side::Upper => domain.upper()[face.axis] - x0[face.axis],
            };
            FaceObservation {
                face,
                observed: normal_dot >= 0.0,
                normal_dot,
            }
        })
        .collect();
    Ok(ObservationBoundary { faces })
}

/// Smallest admissible observation time `sqrt(d1^2 - d0^2)`; any configured
/// final time must exceed it strictly.
pub fn min_observation_time(extrema: &DistanceExtrema) -> f64 {
    (extrema.d1 * extrema.d1 - extrema.d0 * extrema.d0)
        .max(0.0)
        .sqrt()
}

/// Pick the time-damping fraction `beta` in `(r, 1)` with `r = (d1^2-d0^2)/T^2`,
/// so that `T * sqrt(beta)` strictly exceeds `sqrt(d1^2 - d0^2)`. The midpoint
/// `(r+1)/2` is capped at 0.99 except when the cap itself would fall below `r`
/// (only possible for T barely above the threshold).
pub fn select_beta(domain: &Domain, x0: &MultiplierPoint, t_final: f64) -> Result<f64> {
    let extrema = distance_extrema(domain, x0)?;
    let t_min = min_observation_time(&extrema);
    if !(t_final > t_min) {
        return Err(LabError::Validation(format!(
            "observation time T = {t_final} must strictly exceed sqrt(d1^2 - d0^2) = {t_min}; \
             no admissible beta < 1 exists"
        )));
    }
    let r = (extrema.d1 * extrema.d1 - extrema.d0 * extrema.d0) / (t_final * t_final);
    let midpoint = 0.5 * (r + 1.0);
    let beta = if midpoint <= 0.99 {
        midpoint
    } else if 0.99 > r {
        0.99
    } else {
        midpoint
    };
    debug_assert!(beta > r && beta < 1.0);
    Ok(beta)
}
