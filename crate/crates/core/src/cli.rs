//! Command dispatcher behind the binary: geometry inspection, forward solves,
//! identity and estimate verification, inversion, and the experiment suites.
//!
//! Exit statuses: 0 success, 2 validation/config error, 3 numerical failure,
//! 4 assertion failure inside a verification command. Failures also leave a
//! machine-readable `error.json` in the output directory.

use crate::config::{derive_seed, CliConfig};
use crate::error::{LabError, Result};
use crate::experiments::{admissibility_compare, stability_scan, NOISELESS_ALPHA};
use crate::forward::{neumann_trace, solve_wave};
use crate::geometry::{distance_extrema, min_observation_time, Side};
use crate::grid::{fmt_float, Field, SpatialField};
use crate::inverse::{
    add_relative_noise, apply_forward, assemble_operator, omega_norm, reconstruct,
    reconstruct_discrepancy, restrict_trace,
};
use crate::verifier::{constant_sweep, identity_residual, polynomial_identity_family};
use crate::weights::absorption_margin;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Geometry,
    Forward,
    VerifyIdentity,
    VerifyCarleman,
    Invert,
    Stability,
    CompareAdmissibility,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub override_admissibility: bool,
}

pub fn run(
    command: Command,
    config_path: &Path,
    out_dir: &Path,
    overrides: Overrides,
) -> Result<()> {
    let mut cfg = CliConfig::from_path(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.experiment.seed = seed;
    }
    if overrides.override_admissibility {
        cfg.experiment.override_admissibility = true;
    }
    std::fs::create_dir_all(out_dir)?;
    match command {
        Command::Geometry => cmd_geometry(&cfg, out_dir),
        Command::Forward => cmd_forward(&cfg, out_dir),
        Command::VerifyIdentity => cmd_verify_identity(&cfg, out_dir),
        Command::VerifyCarleman => cmd_verify_carleman(&cfg, out_dir),
        Command::Invert => cmd_invert(&cfg, out_dir),
        Command::Stability => cmd_stability(&cfg, out_dir),
        Command::CompareAdmissibility => cmd_compare(&cfg, out_dir),
    }
}

fn write_json<T: Serialize>(value: &T, path: PathBuf) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text)?;
    Ok(())
}

/// Serialize the failure for scripted sweeps.
pub fn write_error_json(err: &LabError, out_dir: &Path) {
    let payload = json!({
        "error": match err {
            LabError::Validation(_) => "validation",
            LabError::Numerical(_) => "numerical",
            LabError::Shape(_) => "shape",
            LabError::Verification(_) => "verification",
            LabError::Config(_) => "config",
            LabError::Io(_) => "io",
            LabError::Json(_) => "json",
        },
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    });
    if std::fs::create_dir_all(out_dir).is_ok() {
        let _ = std::fs::write(
            out_dir.join("error.json"),
            serde_json::to_string_pretty(&payload).unwrap_or_default() + "\n",
        );
    }
}

fn cmd_geometry(cfg: &CliConfig, out: &Path) -> Result<()> {
    let domain = cfg.domain()?;
    let x0 = cfg.multiplier()?;
    let extrema = distance_extrema(&domain, &x0)?;
    let t_min = min_observation_time(&extrema);
    let observation = crate::geometry::observation_boundary(&domain, &x0)?;
    let beta = cfg.resolve_beta().ok();
    let c0 = beta.map(|b| {
        absorption_margin(
            cfg.carleman.lambda,
            b,
            extrema.d0,
            extrema.d1,
            cfg.time.t_final,
        )
    });
    let grid = cfg.build_grid()?;
    let coeffs = cfg.coefficient_set(&grid)?;
    let payload = json!({
        "d0": extrema.d0,
        "d1": extrema.d1,
        "t_min": t_min,
        "T": cfg.time.t_final,
        "admissible_time": cfg.time.t_final > t_min,
        "beta": beta,
        "absorption_margin_c0": c0,
        "r0": coeffs.min_r0(&grid),
        "faces": observation
            .faces
            .iter()
            .map(|f| {
                json!({
                    "axis": f.face.axis,
                    "side": match f.face.side { Side::Lower => "lower", Side::Upper => "upper" },
                    "observed": f.observed,
                    "normal_dot": f.normal_dot,
                })
            })
            .collect::<Vec<_>>(),
    });
    write_json(&payload, out.join("geometry.json"))
}

fn cmd_forward(cfg: &CliConfig, out: &Path) -> Result<()> {
    let grid = cfg.build_grid()?;
    let coeffs = cfg.coefficient_set(&grid)?;
    let f = cfg.source_field(&grid)?;
    let rhs = coeffs.assemble_rhs(&f, &grid);
    let zero = SpatialField::zeros(&grid);
    let u = solve_wave(&coeffs, &rhs, &grid, &zero, &zero)?;
    u.write_binary(&out.join("u.bin"))?;
    if grid.n_spatial_nodes() * (grid.nt + 1) <= 200_000 {
        u.write_csv(&grid, &out.join("u.csv"))?;
    }
    let observation = crate::geometry::observation_boundary(&cfg.domain()?, &cfg.multiplier()?)?;
    let layout = crate::grid::BoundaryLayout::observed(&grid, &observation);
    let trace = neumann_trace(&u, &layout, &grid)?;
    trace.write_csv(&grid, &out.join("trace.csv"))?;
    Ok(())
}

fn cmd_verify_identity(cfg: &CliConfig, out: &Path) -> Result<()> {
    let s = cfg.carleman.s_list[0];
    let params = cfg.carleman_params(s)?;
    let levels = [cfg.grid.nx, 2 * cfg.grid.nx, 4 * cfg.grid.nx];

    let mut w = csv::Writer::from_path(out.join("identity_report.csv"))
        .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
    w.write_record([
        "member",
        "nx",
        "j1",
        "j2",
        "j3",
        "j4",
        "b0",
        "b1",
        "inner_product",
        "residual",
        "normalized_residual",
    ])
    .map_err(|e| LabError::Validation(format!("csv: {e}")))?;

    let n_members = polynomial_identity_family(&cfg.build_grid()?).len();
    let mut residual_tables: Vec<Vec<f64>> = vec![Vec::new(); n_members];
    for &nx in &levels {
        let grid = cfg.build_grid_at(nx, cfg.time.t_final)?;
        for (k, z) in polynomial_identity_family(&grid).iter().enumerate() {
            let ledger = identity_residual(z, &params, &grid)?;
            residual_tables[k].push(ledger.normalized_residual);
            w.write_record([
                k.to_string(),
                nx.to_string(),
                fmt_float(ledger.j1),
                fmt_float(ledger.j2),
                fmt_float(ledger.j3),
                fmt_float(ledger.j4),
                fmt_float(ledger.b0),
                fmt_float(ledger.b1),
                fmt_float(ledger.inner_product),
                fmt_float(ledger.residual),
                fmt_float(ledger.normalized_residual),
            ])
            .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        }
    }
    w.flush()?;

    let mut failures = Vec::new();
    for (k, residuals) in residual_tables.iter().enumerate() {
        let monotone = residuals.windows(2).all(|p| p[1] < p[0]);
        if !monotone {
            failures.push(format!(
                "member {k}: residuals not decreasing {residuals:?}"
            ));
        }
    }
    let summary = json!({
        "config_hash": cfg.config_hash(),
        "s": s,
        "levels": levels,
        "normalized_residuals": residual_tables,
        "monotone_decrease": failures.is_empty(),
    });
    write_json(&summary, out.join("identity_summary.json"))?;
    if !failures.is_empty() {
        return Err(LabError::Verification(failures.join("; ")));
    }
    Ok(())
}

/// Seeded family of smooth test functions with zero boundary and initial
/// values (nonzero initial velocity), with the analytic wave residual.
pub fn estimate_test_family(
    grid: &crate::grid::Grid,
    count: usize,
    seed: u64,
) -> Vec<(Field, Field)> {
    use rand::Rng;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 5_000 + i as u64));
            let mut modes = Vec::new();
            for k in 1..=2usize {
                for l in 1..=2usize {
                    let c: f64 = rng.gen_range(-1.0..1.0);
                    let omega: f64 = rng.gen_range(1.0..3.0);
                    modes.push((k, l, c / (k + l) as f64, omega));
                }
            }
            let lower = grid.domain.lower().to_vec();
            let sides: Vec<f64> = (0..grid.dim()).map(|a| grid.domain.side(a)).collect();
            let modes_v = modes.clone();
            let (lo_v, si_v) = (lower.clone(), sides.clone());
            let v = Field::from_fn(grid, move |x, t| {
                let mut acc = 0.0;
                for &(k, l, c, omega) in &modes_v {
                    let sx = (k as f64 * PI * (x[0] - lo_v[0]) / si_v[0]).sin();
                    let sy = if x.len() > 1 {
                        (l as f64 * PI * (x[1] - lo_v[1]) / si_v[1]).sin()
                    } else {
                        1.0
                    };
                    acc += c * sx * sy * (omega * t).sin();
                }
                acc
            });
            let f_rhs = Field::from_fn(grid, move |x, t| {
                let mut acc = 0.0;
                for &(k, l, c, omega) in &modes {
                    let kap1 = k as f64 * PI / sides[0];
                    let kap2 = if x.len() > 1 {
                        l as f64 * PI / sides[1]
                    } else {
                        0.0
                    };
                    let sx = (kap1 * (x[0] - lower[0])).sin();
                    let sy = if x.len() > 1 {
                        (kap2 * (x[1] - lower[1])).sin()
                    } else {
                        1.0
                    };
                    // (d_tt - Lap) of the separable mode
                    acc += c
                        * sx
                        * sy
                        * (omega * t).sin()
                        * (kap1 * kap1 + kap2 * kap2 - omega * omega);
                }
                acc
            });
            (v, f_rhs)
        })
        .collect()
}

fn cmd_verify_carleman(cfg: &CliConfig, out: &Path) -> Result<()> {
    let grid = cfg.build_grid()?;
    let params = cfg.carleman_params(cfg.carleman.s_list[0])?;
    let observation = crate::geometry::observation_boundary(&cfg.domain()?, &cfg.multiplier()?)?;
    let layout = crate::grid::BoundaryLayout::observed(&grid, &observation);
    let family = estimate_test_family(&grid, cfg.experiment.trials.max(1), cfg.experiment.seed);

    let mut w = csv::Writer::from_path(out.join("carleman_report.csv"))
        .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
    w.write_record([
        "member",
        "s",
        "lhs",
        "rhs_source",
        "rhs_boundary",
        "rhs_terminal",
        "ratio",
    ])
    .map_err(|e| LabError::Validation(format!("csv: {e}")))?;

    let s_list = &cfg.carleman.s_list;
    let median_idx = (s_list.len() - 1) / 2;
    let mut c_hats = Vec::new();
    let mut failures = Vec::new();
    let mut all_entries = Vec::new();
    for (k, (v, f_rhs)) in family.iter().enumerate() {
        let report = constant_sweep(v, f_rhs, &params, s_list, &grid, &layout)?;
        for e in &report.entries {
            w.write_record([
                k.to_string(),
                fmt_float(e.s),
                fmt_float(e.lhs),
                fmt_float(e.rhs_source),
                fmt_float(e.rhs_boundary),
                fmt_float(e.rhs_terminal),
                fmt_float(e.ratio),
            ])
            .map_err(|e| LabError::Validation(format!("csv: {e}")))?;
        }
        if report.entries.iter().any(|e| !e.ratio.is_finite()) {
            failures.push(format!("member {k}: nonfinite ratio"));
        }
        let r_med = report.entries[median_idx].ratio;
        let r_max = report.entries.last().unwrap().ratio;
        if r_max > 2.0 * r_med {
            failures.push(format!(
                "member {k}: ratio({}) = {r_max} exceeds 2 * ratio({}) = {}",
                s_list.last().unwrap(),
                s_list[median_idx],
                2.0 * r_med
            ));
        }
        c_hats.push(report.c_hat);
        all_entries.push(report.entries);
    }
    w.flush()?;

    let summary = json!({
        "config_hash": cfg.config_hash(),
        "s_list": s_list,
        "c_hat_per_member": c_hats,
        "c_hat_max": c_hats.iter().copied().fold(0.0f64, f64::max),
        "bounded_in_s": failures.is_empty(),
        "entries_per_member": all_entries,
    });
    write_json(&summary, out.join("carleman_summary.json"))?;
    if !failures.is_empty() {
        return Err(LabError::Verification(failures.join("; ")));
    }
    Ok(())
}

fn cmd_invert(cfg: &CliConfig, out: &Path) -> Result<()> {
    let coarse = cfg.operator_config(1, cfg.time.t_final)?;
    let fine = cfg.operator_config(cfg.experiment.data_refinement, cfg.time.t_final)?;
    let f_true_coarse = cfg.source_field(&coarse.grid)?;
    let f_true_fine = cfg.source_field(&fine.grid)?;
    let g_fine = apply_forward(&f_true_fine, &fine)?;
    let g = restrict_trace(&g_fine, &fine.grid, &coarse.grid, &coarse.layout)?;

    let result = match cfg.experiment.noise_levels.first() {
        Some(&delta) => {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.experiment.seed, 1));
            let (noisy, noise_norm) = add_relative_noise(&g, &coarse.grid, delta, &mut rng);
            reconstruct_discrepancy(
                &noisy,
                &coarse,
                noise_norm,
                crate::experiments::DISCREPANCY_TAU,
                500,
            )?
        }
        None => reconstruct(&g, &coarse, NOISELESS_ALPHA, 2_000)?,
    };
    let diff = SpatialField {
        data: &result.f_hat.data - &f_true_coarse.data,
    };
    let rel_error =
        omega_norm(&diff, &coarse.grid) / omega_norm(&f_true_coarse, &coarse.grid).max(1e-300);

    result.f_hat.write_binary(&out.join("f_hat.bin"))?;
    let payload = json!({
        "config_hash": cfg.config_hash(),
        "alpha": result.alpha,
        "iterations": result.iterations,
        "residual": result.residual,
        "rel_error": rel_error,
        "converged": result.converged,
        "noise_level": cfg.experiment.noise_levels.first(),
    });
    write_json(&payload, out.join("recon.json"))?;
    if cfg.experiment.dump_operator {
        let assembled = assemble_operator(&coarse, crate::experiments::ASSEMBLY_CAP)?;
        assembled.write_csv(&out.join("operator.csv"))?;
    }
    Ok(())
}

fn cmd_stability(cfg: &CliConfig, out: &Path) -> Result<()> {
    let report = stability_scan(cfg)?;
    std::fs::write(out.join("stability.json"), report.to_json()?)?;
    report.write_csv(&out.join("stability.csv"))?;
    Ok(())
}

fn cmd_compare(cfg: &CliConfig, out: &Path) -> Result<()> {
    let t_min = cfg.t_min()?;
    let t_values = match &cfg.experiment.t_values {
        Some(v) if !v.is_empty() => v.clone(),
        _ => vec![0.5 * t_min, 1.5 * t_min],
    };
    let report = admissibility_compare(cfg, &t_values)?;
    std::fs::write(out.join("admissibility.json"), report.to_json()?)?;
    report.write_csv(&out.join("admissibility.csv"))?;
    Ok(())
}
