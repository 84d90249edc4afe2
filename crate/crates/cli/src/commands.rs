//! One pipeline per command. Each writes its CSV/JSON/plot files through
//! [`Artifacts`] and returns a one-line summary for the terminal.

use homlab_core::coefficients::{
    average_decay, cell_norm_table, DefectProfile, PeriodicCoefficient, PerturbedCoefficient,
};
use homlab_core::corrector::{
    build_m, corrector_diagnostics, mean_bounds, solve_perturbed_corrector, solve_potential,
    solve_with_truncation_estimate, BoxSpec, PeriodicCorrector,
};
use homlab_core::geometry::{certify_assumptions, CertifyOptions, DefectPointSet};
use homlab_core::multiscale::{expected_exponents, flux_average_tensor, remainder_study, MultiscaleProblem};
use homlab_core::numeric::{observed_orders, LineFit};
use homlab_core::oracle1d::{corrector_growth_1d, dyadic_eps, rate_study_1d, Oracle1D};
use homlab_core::pde::{assemble_divform, Bc};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{row, Artifacts};
use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;
use crate::plot::Series;

pub fn run(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    info!("running {} (config {})", cfg.command.name(), cfg.hash());
    match cfg.command {
        Command::GeometryCertify => geometry_certify(cfg, out),
        Command::DefectProfile => defect_profile(cfg, out),
        Command::Corrector => corrector(cfg, out),
        Command::Potential => potential(cfg, out),
        Command::Homogenize => homogenize(cfg, out),
        Command::Rates1d => rates_1d(cfg, out),
        Command::Rates => rates(cfg, out),
    }
}

fn slope(fit: &Option<LineFit>) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.slope)
}

fn geometry_certify(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let g = &cfg.geometry;
    let set = DefectPointSet::dyadic(g.dim, g.c0, g.index_bound)?;
    let cert = certify_assumptions(
        &set,
        CertifyOptions {
            inclusion_samples_per_cell: g.inclusion_samples_per_cell,
            ..CertifyOptions::default()
        },
    )?;
    out.json("certificate.json", &cert)?;
    let annulus: Vec<Vec<String>> = cert
        .annulus_counts
        .iter()
        .enumerate()
        .map(|(n, c)| vec![n.to_string(), c.to_string()])
        .collect();
    out.csv("annulus_counts.csv", &["n", "count"], &annulus)?;
    let cells: Vec<(f64, f64)> = cert
        .cell_count_radii_log2
        .iter()
        .zip(&cert.cell_counts)
        .map(|(k, c)| (*k as f64, *c as f64))
        .collect();
    let rows: Vec<Vec<String>> = cells.iter().map(|(k, c)| row(&[*k, *c])).collect();
    out.csv("cell_counts.csv", &["log2_radius", "cells"], &rows)?;
    out.dat("cell_counts.dat", ("log2_radius", "cells"), &cells)?;
    Ok(format!(
        "h2 ratio in [{:.4}, {:.4}] (bound {:.2}), {} inclusion violations, cell-count slope {:.2} (r2 {:.4})",
        cert.h2_ratio_min,
        cert.h2_ratio_max,
        cert.h2_ratio_bound,
        cert.inclusion_violations,
        cert.cell_count_fit.slope,
        cert.cell_count_fit.r2
    ))
}

fn index_label(p: &[i32]) -> String {
    p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(":")
}

fn defect_profile(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let p = &cfg.defect_profile;
    let coef = cfg.coefficient.build()?;
    let indices = coef.set.indices_up_to(p.max_shell);
    let table = cell_norm_table(&coef, &indices, p.r, p.resolution)?;
    let rows: Vec<Vec<String>> = table
        .entries
        .iter()
        .map(|e| {
            vec![
                index_label(&e.index.0),
                e.r.to_string(),
                e.norm.to_string(),
                e.residual.to_string(),
            ]
        })
        .collect();
    out.csv("cell_norms.csv", &["index", "r", "cell_norm", "residual_norm"], &rows)?;

    let radii: Vec<f64> = (p.radii_log2_min..=p.radii_log2_max).map(|k| 2f64.powi(k)).collect();
    let avg = average_decay(&coef, &vec![0.0; coef.per.dim], &radii)?;
    let rows: Vec<Vec<String>> = (0..radii.len())
        .map(|i| row(&[radii[i], avg.means[i], avg.ratios[i]]))
        .collect();
    out.csv("average_decay.csv", &["R", "mean", "bound_ratio"], &rows)?;
    let points: Vec<(f64, f64)> = radii.iter().copied().zip(avg.means.iter().copied()).collect();
    out.dat("average_decay.dat", ("R", "mean"), &points)?;
    out.svg(
        "average_decay.svg",
        "mean |ã| over B_R",
        ("R", "mean"),
        &[Series {
            label: "mean |ã|".into(),
            points,
        }],
    )?;
    out.json(
        "defect_profile.json",
        &json!({
            "sup_cell_norm": table.sup_norm(),
            "resolution": table.resolution,
            "average_decay_fit": avg.fit,
            "ratio_band": avg.ratio_band(),
            "bound_constant": avg.bound_constant,
        }),
    )?;
    Ok(format!(
        "{} cells, sup cell norm {:.4e}, average decay slope {:.3}",
        table.entries.len(),
        table.sup_norm(),
        slope(&avg.fit)
    ))
}

#[derive(Serialize)]
struct CorrectorManifest {
    direction: usize,
    grid: homlab_core::pde::UniformGrid,
    periodic_coefficient_sha256: String,
    box_coefficient_sha256: String,
    a_star: Vec<Vec<f64>>,
    cell_relative_residual: f64,
    box_relative_residual: f64,
    box_iterations: usize,
    truncation_error: Option<f64>,
    uncovered_defects: usize,
}

fn corrector(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let p = &cfg.corrector;
    let coef = cfg.coefficient.build()?;
    let d = coef.per.dim;
    if p.direction >= d {
        return Err(CliError::Schema(format!(
            "direction {} out of range for d = {d}",
            p.direction
        )));
    }
    let bc = if p.bc == "periodic" {
        Bc::Periodic
    } else {
        Bc::Dirichlet
    };
    let cell = PeriodicCorrector::solve(&coef.per, p.cells_per_unit, &cfg.solver)?;
    let spec = BoxSpec {
        half_width: p.box_l,
        cells_per_unit: p.cells_per_unit,
    };
    let tilde = if p.truncation_estimate {
        solve_with_truncation_estimate(&coef, &cell, p.direction, spec, bc, &cfg.solver)?
    } else {
        solve_perturbed_corrector(&coef, &cell, p.direction, spec, bc, &cfg.solver)?
    };
    let j = p.direction;
    out.field(&format!("w_per_e{j}.bin"), &cell.fields[j])?;
    out.field(&format!("w_tilde_e{j}.bin"), &tilde.field)?;

    let diag = corrector_diagnostics(&cell, &tilde, &coef.set, p.max_shell, p.sublinearity_samples)?;
    let rows: Vec<Vec<String>> = diag
        .growth
        .rows
        .iter()
        .map(|r| row(&[r.half_width, r.sup_abs]))
        .collect();
    out.csv("growth.csv", &["half_width", "sup_abs_w_tilde"], &rows)?;
    let points: Vec<(f64, f64)> = diag.growth.rows.iter().map(|r| (r.half_width, r.sup_abs)).collect();
    out.dat("growth.dat", ("half_width", "sup_abs_w_tilde"), &points)?;
    let rows: Vec<Vec<String>> = diag
        .cells
        .iter()
        .map(|r| vec![index_label(&r.index.0), r.shell.to_string(), r.norm.to_string()])
        .collect();
    out.csv("gradient_cells.csv", &["index", "shell", "grad_norm"], &rows)?;
    let rows: Vec<Vec<String>> = diag
        .sublinearity
        .iter()
        .map(|r| {
            vec![
                r.s.to_string(),
                r.pairs.to_string(),
                r.max_ratio.to_string(),
                r.mean_ratio.to_string(),
            ]
        })
        .collect();
    out.csv("sublinearity.csv", &["s", "pairs", "max_ratio", "mean_ratio"], &rows)?;

    let box_hash = assemble_divform(&coef, tilde.grid())?.meta.coefficient_hash;
    let manifest = CorrectorManifest {
        direction: j,
        grid: tilde.grid().clone(),
        periodic_coefficient_sha256: cell.system.meta.coefficient_hash.clone(),
        box_coefficient_sha256: box_hash,
        a_star: cell.homogenized_tensor().a,
        cell_relative_residual: cell.reports[j].relative_residual,
        box_relative_residual: tilde.report.relative_residual,
        box_iterations: tilde.report.iterations,
        truncation_error: tilde.truncation_error,
        uncovered_defects: tilde.uncovered.len(),
    };
    out.json("corrector.json", &manifest)?;
    Ok(format!(
        "w̃_{j} on [-{L}, {L}]^{d}: sup |w̃| {:.4e}, residual {:.2e}, truncation error {}",
        tilde.field.max_abs(),
        tilde.report.relative_residual,
        tilde
            .truncation_error
            .map_or("not computed".into(), |t| format!("{t:.3e}")),
        L = p.box_l
    ))
}

fn potential(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let per = PeriodicCoefficient::preset(&cfg.coefficient.periodic, cfg.coefficient.dim)?;
    let ns = &cfg.potential.cells_per_unit;
    let mut rows = Vec::new();
    let (mut div, mut curl) = (Vec::new(), Vec::new());
    for &n in ns {
        let cell = PeriodicCorrector::solve(&per, n, &cfg.solver)?;
        let m = build_m(&cell.system, &cell.homogenized_tensor(), &cell.fields);
        let b = solve_potential(&m, &cfg.solver)?;
        let (dm, db, cb) = (m.divergence_residual(), b.divergence_residual(&m), b.curl_residual(&m));
        div.push(db);
        curl.push(cb);
        rows.push(row(&[n as f64, 1.0 / n as f64, dm, db, cb, b.max_abs()]));
    }
    out.csv(
        "potential.csv",
        &["cells_per_unit", "h", "div_m", "divergencepot", "curl", "max_abs_b"],
        &rows,
    )?;
    let h: Vec<f64> = ns.iter().map(|n| 1.0 / *n as f64).collect();
    let div_points: Vec<(f64, f64)> = h.iter().copied().zip(div.iter().copied()).collect();
    let curl_points: Vec<(f64, f64)> = h.iter().copied().zip(curl.iter().copied()).collect();
    out.dat("divergencepot.dat", ("h", "residual"), &div_points)?;
    out.dat("curl.dat", ("h", "residual"), &curl_points)?;
    out.svg(
        "potential.svg",
        "potential residuals",
        ("h", "residual"),
        &[
            Series {
                label: "divergencepot".into(),
                points: div_points,
            },
            Series {
                label: "curl".into(),
                points: curl_points,
            },
        ],
    )?;
    let (od, oc) = (observed_orders(&h, &div), observed_orders(&h, &curl));
    out.json(
        "potential.json",
        &json!({ "divergencepot_orders": od, "curl_orders": oc }),
    )?;
    Ok(format!("divergencepot orders {od:.2?}, curl orders {oc:.2?}"))
}

fn homogenize(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let p = &cfg.homogenize;
    let coef = cfg.coefficient.build()?;
    let d = coef.per.dim;
    let cell = PeriodicCorrector::solve(&coef.per, p.cells_per_unit, &cfg.solver)?;
    let a = cell.homogenized_tensor();
    let energy = cell.energy_tensor();
    let (harmonic, arithmetic) = mean_bounds(&coef.per, p.cells_per_unit);
    let mut rows = Vec::new();
    for i in 0..d {
        for j in 0..d {
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                a.a[i][j].to_string(),
                energy.a[i][j].to_string(),
            ]);
        }
    }
    out.csv("a_star.csv", &["i", "j", "a_star", "energy"], &rows)?;
    let flux = if p.flux_radii.is_empty() {
        None
    } else {
        let report = flux_average_tensor(&coef, &p.flux_radii, p.flux_cells_per_unit, &cfg.solver)?;
        let rows: Vec<Vec<String>> = report.rows.iter().map(|r| row(&[r.radius, r.relative_gap])).collect();
        out.csv("flux_average.csv", &["R", "relative_gap"], &rows)?;
        let points: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.radius, r.relative_gap)).collect();
        out.dat("flux_average.dat", ("R", "relative_gap"), &points)?;
        Some(report)
    };
    out.json(
        "homogenized.json",
        &json!({
            "a_star": a.a,
            "energy_tensor": energy.a,
            "asymmetry": a.asymmetry(),
            "eigenvalues": a.eigenvalues(),
            "harmonic_mean_bound": harmonic,
            "arithmetic_mean_bound": arithmetic,
            "flux_average": flux,
        }),
    )?;
    let gap = flux.as_ref().and_then(|f| f.rows.last()).map_or(String::new(), |r| {
        format!(", flux-average gap {:.3e} at R = {}", r.relative_gap, r.radius)
    });
    Ok(format!("a* eigenvalues {:.6?}{gap}", a.eigenvalues()))
}

fn oracle_1d(cfg: &ExperimentConfig) -> Result<Oracle1D, CliError> {
    let p = &cfg.rates_1d;
    let coef = match p.preset.as_deref() {
        None => {
            if cfg.coefficient.dim != 1 {
                return Err(CliError::Schema("rates-1d needs coefficient.dim = 1".into()));
            }
            cfg.coefficient.build()?
        }
        Some(name) => {
            let (per, profile) = match name {
                "sin-bump" => (
                    PeriodicCoefficient::sin_background(1)?,
                    DefectProfile::bump(1, 0.5, 1.0)?,
                ),
                "sin-periodic" => (
                    PeriodicCoefficient::sin_background(1)?,
                    DefectProfile::bump(1, 0.5, 0.0)?,
                ),
                "algebraic-slow" => (
                    PeriodicCoefficient::constant(1, 1.0)?,
                    DefectProfile::algebraic(1, 0.5, 0.5, 1e6, 1.0)?,
                ),
                "algebraic-fast" => (
                    PeriodicCoefficient::constant(1, 1.0)?,
                    DefectProfile::algebraic(1, 0.5, 2.0, 1e6, 1.0)?,
                ),
                other => return Err(CliError::Schema(format!("unknown rates-1d preset '{other}'"))),
            };
            PerturbedCoefficient::new(per, profile, DefectPointSet::dyadic(1, 2.0, 30)?)?
        }
    };
    Ok(Oracle1D::new(coef, p.source.clone())?)
}

fn rates_1d(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let p = &cfg.rates_1d;
    let oracle = oracle_1d(cfg)?;
    let study = rate_study_1d(&oracle, &dyadic_eps(p.eps_min_exp, p.eps_max_exp))?;
    let rows: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|r| row(&[r.epsilon, r.l2_r, r.h1_r, r.ratio_vs_bound]))
        .collect();
    out.csv("rates_1d.csv", &["epsilon", "l2_R", "h1_R", "ratio_vs_bound"], &rows)?;
    let l2: Vec<(f64, f64)> = study.rows.iter().map(|r| (r.epsilon, r.l2_r)).collect();
    let h1: Vec<(f64, f64)> = study.rows.iter().map(|r| (r.epsilon, r.h1_r)).collect();
    out.dat("l2_R.dat", ("epsilon", "l2_R"), &l2)?;
    out.dat("h1_R.dat", ("epsilon", "h1_R"), &h1)?;
    out.svg(
        "rates_1d.svg",
        "1D remainder",
        ("ε", "norm"),
        &[
            Series {
                label: "‖R‖ L²".into(),
                points: l2,
            },
            Series {
                label: "‖R′‖ L²".into(),
                points: h1,
            },
        ],
    )?;
    let growth = if p.growth_n_max > 0 {
        let g = corrector_growth_1d(&oracle, p.growth_n_max)?;
        let rows: Vec<Vec<String>> = g.rows.iter().map(|r| row(&[r.n as f64, r.sup_abs])).collect();
        out.csv("growth_1d.csv", &["n", "sup_abs_w_tilde"], &rows)?;
        Some(g)
    } else {
        None
    };
    out.json(
        "rates_1d.json",
        &json!({
            "a_star": oracle.a_star()?,
            "l2_fit": study.l2_fit,
            "h1_fit": study.h1_fit,
            "ratio_band": study.ratio_band,
            "expected": expected_exponents(&oracle.coef.profile, 1),
            "growth_fit": growth.as_ref().and_then(|g| g.fit),
        }),
    )?;
    Ok(format!(
        "{} ε rows, L² slope {:.3}, H¹ slope {:.3}, ratio band {:.2}",
        study.rows.len(),
        slope(&study.l2_fit),
        slope(&study.h1_fit),
        study.ratio_band
    ))
}

fn rates_problem(cfg: &ExperimentConfig) -> Result<MultiscaleProblem, CliError> {
    let p = &cfg.rates;
    let coef = match p.preset.as_deref() {
        None => cfg.coefficient.build()?,
        Some(name) => {
            let (dim, amplitude, bound, generations) = match name {
                "periodic-2d" => (2, 0.0, 12, None),
                "bump-2d" => (2, 1.0, 12, None),
                "periodic-3d" => (3, 0.0, 4, None),
                "bump-3d" => (3, 1.0, 4, Some(1)),
                other => return Err(CliError::Schema(format!("unknown rates preset '{other}'"))),
            };
            PerturbedCoefficient::new(
                PeriodicCoefficient::checker(dim)?,
                DefectProfile::bump(dim, 0.5, amplitude)?,
                DefectPointSet::dyadic(dim, 2.0, bound)?,
            )?
            .with_generations(generations)
        }
    };
    let d = coef.per.dim;
    let eps: Vec<f64> = dyadic_eps(p.eps_min_exp, p.eps_max_exp);
    let mut problem = MultiscaleProblem::new(coef, p.source.clone(), eps)?;
    problem.interior = homlab_core::geometry::BoundingBox {
        lo: vec![p.interior_lo; d],
        hi: vec![p.interior_hi; d],
    };
    problem.grid.nodes_per_period = p.nodes_per_period;
    problem.grid.min_nodes_per_period = p.min_nodes_per_period;
    problem.solver = cfg.solver;
    problem.corrector_half_width = p.corrector_half_width;
    problem.with_h_eps = p.with_h_eps;
    problem.refinement_check = p.refinement_check;
    problem.validate()?;
    Ok(problem)
}

fn rates(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<String, CliError> {
    let problem = rates_problem(cfg)?;
    let report = remainder_study(&problem)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.eps.to_string(),
                r.intervals.to_string(),
                r.l2.to_string(),
                r.h1_interior.to_string(),
                r.h1_global.to_string(),
                opt(r.h_eps),
                r.hessian_norm.to_string(),
                opt(r.refinement_change),
                r.admitted.to_string(),
                r.box_covers.to_string(),
            ]
        })
        .collect();
    out.csv(
        "convergence.csv",
        &[
            "epsilon",
            "intervals",
            "l2_R",
            "h1_interior_R",
            "h1_global_R",
            "h_eps",
            "hessian_norm",
            "refinement_change",
            "admitted",
            "box_covers",
        ],
        &rows,
    )?;
    let l2: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.eps, r.l2)).collect();
    let h1: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.eps, r.h1_interior)).collect();
    out.dat("l2_R.dat", ("epsilon", "l2_R"), &l2)?;
    out.dat("h1_interior_R.dat", ("epsilon", "h1_interior_R"), &h1)?;
    out.svg(
        "convergence.svg",
        "remainder R^ε",
        ("ε", "norm"),
        &[
            Series {
                label: "‖R‖ L²(Ω)".into(),
                points: l2,
            },
            Series {
                label: "‖∇R‖ L²(Ω₁)".into(),
                points: h1,
            },
        ],
    )?;
    out.json("convergence.json", &report)?;
    Ok(format!(
        "{} ε rows, L² slope {:.3}, interior H¹ slope {:.3}, global H¹ slope {:.3}",
        report.rows.len(),
        slope(&report.l2_fit),
        slope(&report.h1_interior_fit),
        slope(&report.h1_global_fit)
    ))
}
