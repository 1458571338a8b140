//! Experiment drivers: the stability scan (forward maps, noise ladder,
//! regularized inversions) and the admissibility comparison (spectral
//! diagnostics of the assembled operator across observation times).
//!
//! Reports are bit-reproducible for a fixed (config, seed): trials run in
//! parallel but land in indexed slots, every generator is derived
//! deterministically from the config seed, and float output is 17-digit.

use crate::config::{derive_seed, random_fourier_field, CliConfig, RSpec};
use crate::error::{LabError, Result};
use crate::grid::{fmt_float, SpatialField};
use crate::inverse::{
    add_relative_noise, apply_forward, assemble_operator, omega_norm, reconstruct_discrepancy,
    reconstruct_from, restrict_trace, trace_norm, OperatorConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Discrepancy-principle safety factor.
pub const DISCREPANCY_TAU: f64 = 1.1;
/// Regularization weight used for noiseless reconstructions.
pub const NOISELESS_ALPHA: f64 = 1e-10;
/// Dense-assembly cap on interior unknowns.
pub const ASSEMBLY_CAP: usize = 1024;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    fn new(cfg: &CliConfig) -> Provenance {
        Provenance {
            config_hash: cfg.config_hash(),
            seed: cfg.experiment.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseRecord {
    pub delta: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub residual: f64,
    /// ||f_hat - f*|| / ||f*|| against the sampled ground truth
    pub rel_error: f64,
    /// ||f_hat - f_hat_0|| / ||f*|| against the noiseless reconstruction
    pub rel_error_vs_baseline: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StabilityTrial {
    pub trial: usize,
    pub f_norm: f64,
    pub g_norm: f64,
    /// ||f|| / ||A f||, the per-trial empirical stability quotient
    pub ratio: f64,
    pub noiseless_rel_error: f64,
    pub noiseless_rel_error_vs_pinv: f64,
    pub noise: Vec<NoiseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StabilityReport {
    pub kind: String,
    pub provenance: Provenance,
    pub admissible: bool,
    pub trials: Vec<StabilityTrial>,
    /// max over trials of ||f|| / ||A f||
    pub c_emp: f64,
    /// per noise level: (delta, median rel error, median rel error vs baseline)
    pub median_errors: Vec<(f64, f64, f64)>,
    /// log-log slope of median error vs delta, against the ground truth
    pub slope_vs_truth: Option<f64>,
    /// log-log slope of the noise-induced error (vs the noiseless baseline)
    pub slope_vs_baseline: Option<f64>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Run the full stability scan: N random sources, forward data generated on a
/// `data_refinement`-times finer grid and restricted, noiseless and noisy
/// reconstructions with the discrepancy rule, and summary slopes.
pub fn stability_scan(cfg: &CliConfig) -> Result<StabilityReport> {
    let coarse = cfg.operator_config(1, cfg.time.t_final)?;
    let fine = cfg.operator_config(cfg.experiment.data_refinement, cfg.time.t_final)?;
    let seed = cfg.experiment.seed;
    let n_trials = cfg.experiment.trials;
    let noise_levels = cfg.experiment.noise_levels.clone();

    // shared pinv oracle (assembled once, factorized once)
    let assembled = assemble_operator(&coarse, ASSEMBLY_CAP)?;
    let pinv = assembled.factorize()?;

    let trials: Vec<StabilityTrial> = (0..n_trials)
        .into_par_iter()
        .map(|trial| -> Result<StabilityTrial> {
            let f_seed = derive_seed(seed, 1_000 + trial as u64);
            let f_coarse = random_fourier_field(&coarse.grid, 1.0, 3, f_seed);
            let f_fine = random_fourier_field(&fine.grid, 1.0, 3, f_seed);
            let g_fine = apply_forward(&f_fine, &fine)?;
            let g = restrict_trace(&g_fine, &fine.grid, &coarse.grid, &coarse.layout)?;

            let f_norm = omega_norm(&f_coarse, &coarse.grid);
            let g_norm = trace_norm(&g, &coarse.grid);
            let ratio = if g_norm > 0.0 {
                f_norm / g_norm
            } else {
                f64::INFINITY
            };

            let rel_to_truth = |fh: &SpatialField| -> f64 {
                let diff = SpatialField {
                    data: &fh.data - &f_coarse.data,
                };
                omega_norm(&diff, &coarse.grid) / f_norm.max(1e-300)
            };

            let base = reconstruct_from(&g, &coarse, NOISELESS_ALPHA, 2_000, None)?;
            let f_pinv = pinv.solve(&g, &coarse.grid)?;
            let vs_pinv = {
                let diff = SpatialField {
                    data: &base.f_hat.data - &f_pinv.data,
                };
                omega_norm(&diff, &coarse.grid) / omega_norm(&f_pinv, &coarse.grid).max(1e-300)
            };

            let mut noise = Vec::with_capacity(noise_levels.len());
            for (li, &delta) in noise_levels.iter().enumerate() {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
                    seed,
                    2_000 + (trial as u64) * 64 + li as u64,
                ));
                let (noisy, noise_norm) = add_relative_noise(&g, &coarse.grid, delta, &mut rng);
                let rec =
                    reconstruct_discrepancy(&noisy, &coarse, noise_norm, DISCREPANCY_TAU, 500)?;
                let rel_error = rel_to_truth(&rec.f_hat);
                let diff_base = SpatialField {
                    data: &rec.f_hat.data - &base.f_hat.data,
                };
                let rel_vs_baseline = omega_norm(&diff_base, &coarse.grid) / f_norm.max(1e-300);
                noise.push(NoiseRecord {
                    delta,
                    alpha: rec.alpha,
                    iterations: rec.iterations,
                    residual: rec.residual,
                    rel_error,
                    rel_error_vs_baseline: rel_vs_baseline,
                });
            }

            Ok(StabilityTrial {
                trial,
                f_norm,
                g_norm,
                ratio,
                noiseless_rel_error: rel_to_truth(&base.f_hat),
                noiseless_rel_error_vs_pinv: vs_pinv,
                noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let c_emp = trials.iter().map(|t| t.ratio).fold(0.0f64, f64::max);
    let mut median_errors = Vec::new();
    for (li, &delta) in noise_levels.iter().enumerate() {
        let mut errs: Vec<f64> = trials.iter().map(|t| t.noise[li].rel_error).collect();
        let mut errs_base: Vec<f64> = trials
            .iter()
            .map(|t| t.noise[li].rel_error_vs_baseline)
            .collect();
        median_errors.push((delta, median(&mut errs), median(&mut errs_base)));
    }
    let slope_vs_truth = loglog_slope(
        &median_errors
            .iter()
            .map(|(d, e, _)| (*d, *e))
            .collect::<Vec<_>>(),
    );
    let slope_vs_baseline = loglog_slope(
        &median_errors
            .iter()
            .map(|(d, _, e)| (*d, *e))
            .collect::<Vec<_>>(),
    );

    Ok(StabilityReport {
        kind: "stability".into(),
        provenance: Provenance::new(cfg),
        admissible: coarse.admissible,
        trials,
        c_emp,
        median_errors,
        slope_vs_truth,
        slope_vs_baseline,
    })
}

impl StabilityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per (trial, noise level); the noiseless reconstruction appears
    /// as delta = 0.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        w.write_record([
            "trial",
            "delta",
            "alpha",
            "iterations",
            "residual",
            "rel_error",
            "rel_error_vs_baseline",
            "f_norm",
            "g_norm",
            "ratio",
        ])
        .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        for t in &self.trials {
            let base_row = [
                t.trial.to_string(),
                fmt_float(0.0),
                fmt_float(NOISELESS_ALPHA),
                String::new(),
                String::new(),
                fmt_float(t.noiseless_rel_error),
                fmt_float(0.0),
                fmt_float(t.f_norm),
                fmt_float(t.g_norm),
                fmt_float(t.ratio),
            ];
            w.write_record(&base_row)
                .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
            for n in &t.noise {
                let row = [
                    t.trial.to_string(),
                    fmt_float(n.delta),
                    fmt_float(n.alpha),
                    n.iterations.to_string(),
                    fmt_float(n.residual),
                    fmt_float(n.rel_error),
                    fmt_float(n.rel_error_vs_baseline),
                    fmt_float(t.f_norm),
                    fmt_float(t.g_norm),
                    fmt_float(t.ratio),
                ];
                w.write_record(&row)
                    .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdmissibilityRecord {
    pub t_value: f64,
    pub admissible: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// max over random unit-norm probes of ||f|| / ||A f||
    pub c_emp_probes: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdmissibilityReport {
    pub kind: String,
    pub provenance: Provenance,
    pub t_min: f64,
    pub records: Vec<AdmissibilityRecord>,
    /// sigma_min nondecreasing along increasing observation times
    pub sigma_ordering_ok: bool,
    /// sigma_min of the full observed row set at the configured T
    pub row_subset_full: f64,
    /// sigma_min over the first half of the observed faces
    pub row_subset_half: f64,
    pub row_subset_ok: bool,
    /// sigma_min with the configured R against R vanishing on a quarter
    pub r0_baseline_sigma_min: f64,
    pub r0_degraded_sigma_min: f64,
    pub r0_drop_ok: bool,
}

/// Probe the empirical stability constant with random unit-norm sources.
fn c_emp_probes(cfg: &OperatorConfig, n: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let f = random_fourier_field(&cfg.grid, 1.0, 3, derive_seed(seed, 3_000 + i as u64));
        let fn_norm = omega_norm(&f, &cfg.grid);
        if fn_norm <= 0.0 {
            continue;
        }
        let g = apply_forward(&f, cfg)?;
        let gn = trace_norm(&g, &cfg.grid);
        worst = worst.max(if gn > 0.0 {
            fn_norm / gn
        } else {
            f64::INFINITY
        });
    }
    Ok(worst)
}

/// Spectral diagnostics across observation times plus the row-subset and
/// degraded-R orderings at the configured T.
pub fn admissibility_compare(cfg: &CliConfig, t_values: &[f64]) -> Result<AdmissibilityReport> {
    if t_values.is_empty() {
        return Err(LabError::Validation(
            "compare needs at least one T value".into(),
        ));
    }
    let t_min = cfg.t_min()?;
    if t_values.iter().any(|t| *t <= t_min) && !cfg.experiment.override_admissibility {
        return Err(LabError::Validation(format!(
            "t_values include observation times at or below the threshold {t_min}; \
             set the admissibility override to run them as negative controls"
        )));
    }
    let domain = cfg.domain()?;
    let x0 = cfg.multiplier()?;
    let seed = cfg.experiment.seed;

    let mut records = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let grid = cfg.build_grid_at(cfg.grid.nx, t)?;
        let coeffs = cfg.coefficient_set(&grid)?;
        let op_cfg = OperatorConfig::new(&domain, &x0, grid, coeffs, true)?;
        let assembled = assemble_operator(&op_cfg, ASSEMBLY_CAP)?;
        records.push(AdmissibilityRecord {
            t_value: t,
            admissible: op_cfg.admissible,
            sigma_min: assembled.sigma_min(),
            sigma_max: assembled.sigma_max(),
            c_emp_probes: c_emp_probes(&op_cfg, 20, seed)?,
        });
    }
    let mut sorted: Vec<&AdmissibilityRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.t_value.partial_cmp(&b.t_value).unwrap());
    let sigma_ordering_ok = sorted
        .windows(2)
        .all(|w| w[0].sigma_min <= w[1].sigma_min * (1.0 + 1e-12));

    // row-subset monotonicity at the configured T
    let main_cfg = cfg.operator_config(1, cfg.time.t_final)?;
    let assembled = assemble_operator(&main_cfg, ASSEMBLY_CAP)?;
    let full = assembled.sigma_min();
    let observed: Vec<crate::geometry::Face> = main_cfg.observation.observed_faces().collect();
    let half_faces = &observed[..observed.len().div_ceil(2)];
    let keep_rows: Vec<usize> = {
        let nodes = &main_cfg.layout.nodes;
        let mut rows = Vec::new();
        for m in 0..=main_cfg.grid.nt {
            for (k, node) in nodes.iter().enumerate() {
                if half_faces.contains(&node.face) {
                    rows.push(m * nodes.len() + k);
                }
            }
        }
        rows
    };
    let half = assembled.sigma_min_rows(&keep_rows);
    let row_subset_ok = half <= full * (1.0 + 1e-12);

    // degraded R(., 0): vanishing on the lower quarter
    let mut degraded_cfg = cfg.clone();
    degraded_cfg.coefficients.r = RSpec::DeadQuarter;
    degraded_cfg.experiment.override_admissibility = true;
    let degraded_op = degraded_cfg.operator_config(1, cfg.time.t_final)?;
    let degraded = assemble_operator(&degraded_op, ASSEMBLY_CAP)?.sigma_min();
    let r0_drop_ok = degraded < full;

    Ok(AdmissibilityReport {
        kind: "compare-admissibility".into(),
        provenance: Provenance::new(cfg),
        t_min,
        records,
        sigma_ordering_ok,
        row_subset_full: full,
        row_subset_half: half,
        row_subset_ok,
        r0_baseline_sigma_min: full,
        r0_degraded_sigma_min: degraded,
        r0_drop_ok,
    })
}

impl AdmissibilityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        w.write_record(["T", "admissible", "sigma_min", "sigma_max", "c_emp_probes"])
            .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        for r in &self.records {
            w.write_record([
                fmt_float(r.t_value),
                r.admissible.to_string(),
                fmt_float(r.sigma_min),
                fmt_float(r.sigma_max),
                fmt_float(r.c_emp_probes),
            ])
            .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}
