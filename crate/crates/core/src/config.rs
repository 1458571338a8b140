//! JSON configuration schema: geometry, lattice, weight parameters,
//! coefficient and source specs, and experiment settings. Unknown keys are
//! rejected; `beta` may be omitted and is then chosen by `select_beta`.

use crate::error::{LabError, Result};
use crate::forward::CoefficientSet;
use crate::geometry::{
    distance_extrema, min_observation_time, select_beta, Domain, MultiplierPoint,
};
use crate::grid::{build_grid, Field, Grid, SpatialField};
use crate::inverse::OperatorConfig;
use crate::weights::CarlemanParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub domain: DomainBlock,
    pub multiplier: MultiplierBlock,
    pub time: TimeBlock,
    pub grid: GridBlock,
    pub carleman: CarlemanBlock,
    pub coefficients: CoefficientBlock,
    pub source: SourceBlock,
    pub experiment: ExperimentBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MultiplierBlock {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub cfl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub nx: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CarlemanBlock {
    pub lambda: f64,
    #[serde(default)]
    pub beta: Option<f64>,
    pub t0: f64,
    pub s_list: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoefficientBlock {
    #[serde(default)]
    pub b: Option<Vec<FieldSpec>>,
    #[serde(default)]
    pub d: Option<FieldSpec>,
    #[serde(default)]
    pub c: Option<FieldSpec>,
    pub r: RSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceBlock {
    pub f: FieldSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Stability,
    CompareAdmissibility,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub kind: ExperimentKind,
    pub trials: usize,
    pub seed: u64,
    pub noise_levels: Vec<f64>,
    #[serde(default)]
    pub t_values: Option<Vec<f64>>,
    #[serde(default)]
    pub override_admissibility: bool,
    #[serde(default = "default_refinement")]
    pub data_refinement: usize,
    #[serde(default)]
    pub dump_operator: bool,
}

fn default_refinement() -> usize {
    2
}

/// Analytic spatial field specification; `random-fourier` draws its
/// coefficients from the given seed, so the same spec and seed describe the
/// same function on every grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant {
        value: f64,
    },
    SineProduct {
        amplitude: f64,
        modes: Vec<usize>,
    },
    Gaussian {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    RandomFourier {
        amplitude: f64,
        max_mode: usize,
    },
    File {
        path: String,
    },
}

impl FieldSpec {
    pub fn sample(&self, grid: &Grid, seed: u64) -> Result<SpatialField> {
        match self {
            FieldSpec::Zero => Ok(SpatialField::zeros(grid)),
            FieldSpec::Constant { value } => Ok(SpatialField::constant(grid, *value)),
            FieldSpec::SineProduct { amplitude, modes } => {
                if modes.len() != grid.dim() {
                    return Err(LabError::Config(
                        "sine-product modes must match the domain dimension".into(),
                    ));
                }
                let modes = modes.clone();
                let amp = *amplitude;
                let lower = grid.domain.lower().to_vec();
                let sides: Vec<f64> = (0..grid.dim()).map(|a| grid.domain.side(a)).collect();
                Ok(SpatialField::from_fn(grid, move |x| {
                    let mut v = amp;
                    for a in 0..x.len() {
                        let xi = (x[a] - lower[a]) / sides[a];
                        v *= (modes[a] as f64 * std::f64::consts::PI * xi).sin();
                    }
                    v
                }))
            }
            FieldSpec::Gaussian {
                amplitude,
                center,
                width,
            } => {
                if center.len() != grid.dim() {
                    return Err(LabError::Config(
                        "gaussian center dimension mismatch".into(),
                    ));
                }
                if !(*width > 0.0) {
                    return Err(LabError::Config("gaussian width must be positive".into()));
                }
                let (amp, c, w) = (*amplitude, center.clone(), *width);
                Ok(SpatialField::from_fn(grid, move |x| {
                    let r2: f64 = x.iter().zip(&c).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum();
                    amp * (-0.5 * r2 / (w * w)).exp()
                }))
            }
            FieldSpec::RandomFourier {
                amplitude,
                max_mode,
            } => Ok(random_fourier_field(grid, *amplitude, *max_mode, seed)),
            FieldSpec::File { path } => {
                let f = SpatialField::read_binary(Path::new(path))?;
                if !f.matches(grid) {
                    return Err(LabError::Shape(format!(
                        "field file {path} does not match the grid"
                    )));
                }
                Ok(f)
            }
        }
    }
}

/// Smooth random source: Dirichlet sine modes up to `max_mode` with
/// seed-determined coefficients decaying like 1/(k+l).
pub fn random_fourier_field(
    grid: &Grid,
    amplitude: f64,
    max_mode: usize,
    seed: u64,
) -> SpatialField {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = grid.dim();
    let mmax = max_mode.max(1);
    let count = mmax.pow(n as u32);
    let coefs: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lower = grid.domain.lower().to_vec();
    let sides: Vec<f64> = (0..n).map(|a| grid.domain.side(a)).collect();
    SpatialField::from_fn(grid, move |x| {
        let mut v = 0.0;
        for (flat, c) in coefs.iter().enumerate() {
            let mut term = *c;
            let mut rest = flat;
            let mut order = 0usize;
            for a in 0..n {
                let k = rest % mmax + 1;
                rest /= mmax;
                order += k;
                let xi = (x[a] - lower[a]) / sides[a];
                term *= (k as f64 * std::f64::consts::PI * xi).sin();
            }
            v += term / order as f64;
        }
        amplitude * v
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TemporalSpec {
    One,
    Ramp { rate: f64 },
    Cosine { omega: f64 },
}

impl TemporalSpec {
    fn eval(&self, t: f64) -> f64 {
        match self {
            TemporalSpec::One => 1.0,
            TemporalSpec::Ramp { rate } => 1.0 + rate * t,
            TemporalSpec::Cosine { omega } => (omega * t).cos(),
        }
    }
}

/// Space-time factor `R(x, t)` of the source. `dead-quarter` zeroes the
/// lower quarter of the domain for all times, violating the positivity of
/// `R(., 0)` as a negative control.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RSpec {
    One,
    Ramp {
        rate: f64,
    },
    Separable {
        spatial: FieldSpec,
        temporal: TemporalSpec,
    },
    DeadQuarter,
    File {
        path: String,
    },
}

impl RSpec {
    pub fn sample(&self, grid: &Grid, seed: u64) -> Result<Field> {
        match self {
            RSpec::One => Ok(Field::from_fn(grid, |_, _| 1.0)),
            RSpec::Ramp { rate } => {
                let r = *rate;
                Ok(Field::from_fn(grid, move |_, t| 1.0 + r * t))
            }
            RSpec::Separable { spatial, temporal } => {
                let sp = spatial.sample(grid, seed)?;
                let temporal = temporal.clone();
                let mut out = Field::zeros(grid);
                for m in 0..=grid.nt {
                    let tv = temporal.eval(grid.time(m));
                    for idx in grid.spatial_indices() {
                        out.set(m, &idx, tv * sp.at(&idx));
                    }
                }
                Ok(out)
            }
            RSpec::DeadQuarter => {
                let lower = grid.domain.lower().to_vec();
                let mids: Vec<f64> = (0..grid.dim())
                    .map(|a| grid.domain.lower()[a] + 0.5 * grid.domain.side(a))
                    .collect();
                Ok(Field::from_fn(grid, move |x, _| {
                    let in_quarter = x
                        .iter()
                        .zip(lower.iter().zip(&mids))
                        .all(|(xi, (lo, mid))| *xi >= *lo && *xi < *mid);
                    if in_quarter {
                        0.0
                    } else {
                        1.0
                    }
                }))
            }
            RSpec::File { path } => {
                let f = Field::read_binary(Path::new(path))?;
                if !f.matches(grid) {
                    return Err(LabError::Shape(format!(
                        "space-time field file {path} does not match the grid"
                    )));
                }
                Ok(f)
            }
        }
    }
}

impl CliConfig {
    pub fn from_path(path: &Path) -> Result<CliConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: CliConfig = serde_json::from_str(&text)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate_scalars()?;
        Ok(cfg)
    }

    /// The shipped desk-scale defaults.
    pub fn default_desk() -> CliConfig {
        CliConfig {
            domain: DomainBlock {
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
            },
            multiplier: MultiplierBlock {
                x0: vec![-0.5, 0.5],
            },
            time: TimeBlock {
                t_final: 2.0,
                cfl: 0.5,
            },
            grid: GridBlock { nx: 16 },
            carleman: CarlemanBlock {
                lambda: 1.0,
                beta: None,
                t0: 0.0,
                s_list: vec![2.0, 4.0, 8.0, 16.0],
            },
            coefficients: CoefficientBlock {
                b: None,
                d: None,
                c: None,
                r: RSpec::One,
            },
            source: SourceBlock {
                f: FieldSpec::SineProduct {
                    amplitude: 1.0,
                    modes: vec![1, 1],
                },
            },
            experiment: ExperimentBlock {
                kind: ExperimentKind::Stability,
                trials: 20,
                seed: 42,
                noise_levels: vec![0.005, 0.01, 0.02, 0.04],
                t_values: None,
                override_admissibility: false,
                data_refinement: 2,
                dump_operator: false,
            },
        }
    }

    fn validate_scalars(&self) -> Result<()> {
        if !(self.carleman.lambda > 0.0) {
            return Err(LabError::Config("carleman.lambda must be positive".into()));
        }
        if let Some(beta) = self.carleman.beta {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(LabError::Config("carleman.beta must lie in (0, 1)".into()));
            }
        }
        if !(self.carleman.t0 >= 0.0 && self.carleman.t0 < self.time.t_final) {
            return Err(LabError::Config("carleman.t0 must lie in [0, T)".into()));
        }
        if self.carleman.s_list.is_empty()
            || !self.carleman.s_list.windows(2).all(|w| w[0] < w[1])
            || self.carleman.s_list[0] <= 0.0
        {
            return Err(LabError::Config(
                "carleman.s_list must be positive and strictly increasing".into(),
            ));
        }
        for d in &self.experiment.noise_levels {
            if !(*d > 0.0 && *d < 1.0) {
                return Err(LabError::Config("noise levels must lie in (0, 1)".into()));
            }
        }
        if self.experiment.data_refinement == 0 {
            return Err(LabError::Config("data_refinement must be >= 1".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.domain.lower.clone(), self.domain.upper.clone())
    }

    pub fn multiplier(&self) -> Result<MultiplierPoint> {
        MultiplierPoint::new(self.multiplier.x0.clone(), &self.domain()?)
    }

    pub fn build_grid(&self) -> Result<Grid> {
        build_grid(
            &self.domain()?,
            self.grid.nx,
            self.time.t_final,
            self.time.cfl,
        )
    }

    pub fn build_grid_at(&self, nx: usize, t_final: f64) -> Result<Grid> {
        build_grid(&self.domain()?, nx, t_final, self.time.cfl)
    }

    pub fn t_min(&self) -> Result<f64> {
        let ex = distance_extrema(&self.domain()?, &self.multiplier()?)?;
        Ok(min_observation_time(&ex))
    }

    /// Configured beta, or the midpoint rule when omitted.
    pub fn resolve_beta(&self) -> Result<f64> {
        match self.carleman.beta {
            Some(beta) => Ok(beta),
            None => select_beta(&self.domain()?, &self.multiplier()?, self.time.t_final),
        }
    }

    pub fn carleman_params(&self, s: f64) -> Result<CarlemanParams> {
        let params = CarlemanParams::new(
            self.multiplier.x0.clone(),
            self.carleman.lambda,
            self.resolve_beta()?,
            self.carleman.t0,
            s,
        )?;
        params.check_against(&self.domain()?)?;
        Ok(params)
    }

    pub fn coefficient_set(&self, grid: &Grid) -> Result<CoefficientSet> {
        let seed = self.experiment.seed;
        let b = match &self.coefficients.b {
            Some(specs) => {
                if specs.len() != grid.dim() {
                    return Err(LabError::Config(
                        "coefficients.b must have one spec per axis".into(),
                    ));
                }
                specs
                    .iter()
                    .enumerate()
                    .map(|(a, s)| s.sample(grid, seed ^ (0xb0 + a as u64)))
                    .collect::<Result<Vec<_>>>()?
            }
            None => (0..grid.dim()).map(|_| SpatialField::zeros(grid)).collect(),
        };
        let d = match &self.coefficients.d {
            Some(s) => s.sample(grid, seed ^ 0xd0)?,
            None => SpatialField::zeros(grid),
        };
        let c = match &self.coefficients.c {
            Some(s) => s.sample(grid, seed ^ 0xc0)?,
            None => SpatialField::zeros(grid),
        };
        let r = self.coefficients.r.sample(grid, seed ^ 0x50)?;
        Ok(CoefficientSet { b, d, c, r })
    }

    pub fn source_field(&self, grid: &Grid) -> Result<SpatialField> {
        self.source.f.sample(grid, self.experiment.seed ^ 0xf0)
    }

    /// Observation-operator configuration on the main grid (or a refinement).
    pub fn operator_config(&self, refinement: usize, t_final: f64) -> Result<OperatorConfig> {
        let domain = self.domain()?;
        let x0 = self.multiplier()?;
        let grid = build_grid(&domain, self.grid.nx * refinement, t_final, self.time.cfl)?;
        let coeffs = self.coefficient_set(&grid)?;
        OperatorConfig::new(
            &domain,
            &x0,
            grid,
            coeffs,
            self.experiment.override_admissibility,
        )
    }

    /// Hex SHA-256 of the canonical serialized config.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic per-(seed, lane) derived seed for independent generators.
pub fn derive_seed(seed: u64, lane: u64) -> u64 {
    // splitmix64 step on seed + golden-ratio stride
    let mut z = seed
        .wrapping_add(lane.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
