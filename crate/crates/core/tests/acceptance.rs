#![allow(clippy::needless_range_loop)]

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs as a plain binary (`harness = false`)
//! so the lines are always visible.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use homlab_core::coefficients::{
    average_decay, Coefficient, DefectProfile, PeriodicCoefficient, PerturbedCoefficient, Symbol, Tensor,
};
use homlab_core::corrector::{
    build_m, gradient_cell_table, shell_maxima, solve_perturbed_corrector, solve_potential, truncation_consistency,
    BoxSpec, PeriodicCorrector,
};
use homlab_core::geometry::{certify_assumptions, dyadic_point, CertifyOptions, DefectPointSet};
use homlab_core::multiscale::{expected_exponents, flux_average_tensor, remainder_study, MultiscaleProblem};
use homlab_core::numeric::{det_dot, fit_line, fit_loglog, observed_orders};
use homlab_core::oracle1d::{corrector_growth_1d, dyadic_eps, harmonic_mean, rate_study_1d, Oracle1D};
use homlab_core::pde::{assemble_divform, poisson_periodic_spectral, solve, Bc, GridField, SolverConfig, UniformGrid};
use homlab_core::quadrature::simpson_fn;
use homlab_core::source::Source;

type Outcome = Result<(bool, String), homlab_core::Error>;
type Criterion = fn() -> Outcome;

fn cfg(rel_tol: f64) -> SolverConfig {
    SolverConfig {
        rel_tol,
        ..SolverConfig::default()
    }
}

fn bumps(per: PeriodicCoefficient, index_bound: u32) -> PerturbedCoefficient {
    let d = per.dim;
    PerturbedCoefficient::new(
        per,
        DefectProfile::bump(d, 0.5, 1.0).unwrap(),
        DefectPointSet::dyadic(d, 2.0, index_bound).unwrap(),
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let set = DefectPointSet::dyadic(2, 2.0, 16)?;
    let opts = CertifyOptions {
        inclusion_samples_per_cell: 8192,
        ..CertifyOptions::default()
    };
    let cert = certify_assumptions(&set, opts)?;
    let bound = (1.0 + 2f64.sqrt()) * 2f64.powi(3);
    // exhaustive count over every enumerated point
    let all = set.indices_up_to(16);
    let mut counts_ok = true;
    let reference = cert.annulus_counts[4];
    for n in 4..=14u32 {
        let direct = all
            .iter()
            .filter(|p| {
                let r = dyadic_point(&p.0).iter().map(|v| v * v).sum::<f64>().sqrt();
                r >= 2f64.powi(n as i32) && r < 2f64.powi(n as i32 + 1)
            })
            .count();
        counts_ok &= cert.annulus_counts[n as usize] == reference && direct == reference;
    }
    let ok = cert.h2_ratio_min >= 1.0
        && cert.h2_ratio_max <= bound
        && counts_ok
        && cert.inclusion_violations == 0
        && cert.inclusion_samples >= 100_000;
    Ok((
        ok,
        format!(
            "h2 ratio in [{:.4}, {:.4}] vs bound {bound:.2}; annulus count {reference} for n = 4..14 (exhaustive match: {counts_ok}); {} inclusion violations over {} samples",
            cert.h2_ratio_min, cert.h2_ratio_max, cert.inclusion_violations, cert.inclusion_samples
        ),
    ))
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [1, 2] {
        let set = DefectPointSet::dyadic(d, 2.0, 24)?;
        let origin = vec![0.0; d];
        let ks: Vec<f64> = (4..=20).map(|k| k as f64).collect();
        let counts = ks
            .iter()
            .map(|k| Ok(set.cells_intersecting_ball(&origin, 2f64.powf(*k))?.len() as f64))
            .collect::<Result<Vec<_>, homlab_core::Error>>()?;
        let fit = fit_line(&ks, &counts).unwrap();
        ok &= fit.r2 >= 0.9;
        parts.push(format!("d={d}: slope {:.2} per doubling, r2 {:.4}", fit.slope, fit.r2));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_3() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, top, bound) in [(1usize, 18, 22u32), (2, 12, 16)] {
        let coef = bumps(PeriodicCoefficient::constant(d, 1.0)?, bound);
        let radii: Vec<f64> = (4..=top).map(|k| 2f64.powi(k)).collect();
        let avg = average_decay(&coef, &vec![0.0; d], &radii)?;
        let slope = avg.fit.map_or(f64::NAN, |f| f.slope);
        let upper = avg
            .means
            .iter()
            .zip(&radii)
            .all(|(m, r)| *m <= avg.bound_constant * (r.ln() / r.powi(d as i32)).sqrt() * (1.0 + 1e-12));
        ok &= (slope + d as f64 / 2.0).abs() <= 0.2 && avg.ratio_band() <= 3.0;
        parts.push(format!(
            "d={d}: slope {slope:.3} (target {:.1} ± 0.2), ratio band {:.1} (target ≤ 3), upper bound holds: {upper}",
            -(d as f64) / 2.0,
            avg.ratio_band()
        ));
    }
    Ok((ok, parts.join("; ")))
}

/// `a = (1 + x_1^2) I`.
struct Quadratic {
    dim: usize,
}

impl Coefficient for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> Tensor {
        let mut t = [[0.0; 3]; 3];
        for (k, row) in t.iter_mut().enumerate().take(self.dim) {
            row[k] = 1.0 + x[0] * x[0];
        }
        t
    }
    fn is_diagonal(&self) -> bool {
        true
    }
}

/// `a = [[2 + x^2, 1/2], [1/2, 1]]`.
struct Tilted;

impl Coefficient for Tilted {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> Tensor {
        [[2.0 + x[0] * x[0], 0.5, 0.0], [0.5, 1.0, 0.0], [0.0; 3]]
    }
}

fn sines(x: &[f64]) -> f64 {
    x.iter().map(|v| (PI * v).sin()).product()
}

/// `-div((1 + x_1^2) ∇u)` for `u = Π sin(π x_k)`.
fn quadratic_rhs(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let a = 1.0 + x[0] * x[0];
    let u1 = PI * (PI * x[0]).cos() * x[1..].iter().map(|v| (PI * v).sin()).product::<f64>();
    a * d * PI * PI * sines(x) - 2.0 * x[0] * u1
}

fn criterion_4() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (dim, ns) in [
        (1, vec![32, 64, 128, 256]),
        (2, vec![16, 32, 64, 128]),
        (3, vec![8, 16, 32]),
    ] {
        let mut errs = Vec::new();
        for &n in &ns {
            let g = UniformGrid::new(dim, n, 0.0, 1.0, Bc::Dirichlet)?;
            let sys = assemble_divform(&Quadratic { dim }, &g)?;
            let rhs = GridField::from_fn(&g, quadratic_rhs).values;
            let (u, _) = solve(&sys, &rhs, &cfg(1e-10))?;
            let exact = GridField::from_fn(&g, sines);
            let diff: Vec<f64> = u.values.iter().zip(&exact.values).map(|(a, b)| a - b).collect();
            errs.push((det_dot(&diff, &diff) * g.h().powi(dim as i32)).sqrt());
        }
        let h: Vec<f64> = ns.iter().map(|n| 1.0 / *n as f64).collect();
        let p = fit_loglog(&h, &errs).unwrap().slope;
        ok &= (p - 2.0).abs() <= 0.1;
        parts.push(format!("order d={dim}: {p:.3}"));
    }

    let g = UniformGrid::new(2, 10, 0.0, 1.0, Bc::Dirichlet)?;
    let sys = assemble_divform(&Tilted, &g)?;
    let u = GridField::from_fn(&g, |x| (3.0 * x[0]).sin() + x[1] * x[1]);
    let v = GridField::from_fn(&g, |x| (x[0] - x[1]).cos());
    let lhs = sys.energy(&u.values, &v.values);
    let via_flux = -det_dot(&sys.rhs_div(&sys.flux(&u.values, None)), &v.values);
    let sbp = (lhs - via_flux).abs() / lhs.abs().max(1.0);
    ok &= sbp <= 1e-12;
    parts.push(format!("summation by parts defect {sbp:.1e}"));

    let tol = 1e-10;
    let g = UniformGrid::new(2, 64, 0.0, 1.0, Bc::Periodic)?;
    let rhs = GridField::from_fn(&g, |x| {
        (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() + (2.0 * PI * x[1]).sin()
    });
    let spectral = poisson_periodic_spectral(&rhs)?;
    let sys = assemble_divform(&PeriodicCoefficient::constant(2, 1.0)?, &g)?;
    let (fd, _) = solve(&sys, &rhs.values, &cfg(tol))?;
    let diff: Vec<f64> = fd.values.iter().zip(&spectral.values).map(|(a, b)| a - b).collect();
    let rel = (det_dot(&diff, &diff) / det_dot(&spectral.values, &spectral.values)).sqrt();
    ok &= rel <= 10.0 * tol;
    parts.push(format!("spectral vs CG {rel:.1e} (≤ {:.0e})", 10.0 * tol));
    Ok((ok, parts.join("; ")))
}

fn criterion_5() -> Outcome {
    let sin = PeriodicCoefficient::sin_background(1)?;
    let c = PeriodicCorrector::solve(&sin, 1024, &cfg(1e-10))?;
    let a1 = c.homogenized_tensor().a[0][0];
    let oracle = harmonic_mean(&sin, 4096);
    let ok1 = (a1 - 3f64.sqrt()).abs() <= 1e-4 && (a1 - oracle).abs() <= 1e-4;

    let lam = PeriodicCoefficient::laminate2d()?;
    let c = PeriodicCorrector::solve(&lam, 64, &cfg(1e-10))?;
    let a = c.homogenized_tensor();
    let harmonic = 1.0 / simpson_fn(|y| 1.0 / lam.entry(0, 0, &[y, 0.0]), 0.0, 1.0, 4096);
    let arithmetic = simpson_fn(|y| lam.entry(1, 1, &[y, 0.0]), 0.0, 1.0, 4096);
    let gap = (a.a[0][0] - harmonic)
        .abs()
        .max((a.a[1][1] - arithmetic).abs())
        .max(a.a[0][1].abs())
        .max(a.a[1][0].abs());
    let ok2 = gap <= 1e-3;
    Ok((
        ok1 && ok2,
        format!(
            "1D a* = {a1:.8} (√3 = {:.8}, harmonic-mean quadrature {oracle:.8}); laminate max entry gap {gap:.1e}",
            3f64.sqrt()
        ),
    ))
}

fn oracle_1d(per: PeriodicCoefficient, profile: DefectProfile) -> Oracle1D {
    let coef = PerturbedCoefficient::new(per, profile, DefectPointSet::dyadic(1, 2.0, 30).unwrap()).unwrap();
    Oracle1D::new(coef, Source::constant(1.0)).unwrap()
}

fn criterion_6() -> Outcome {
    let sin = || PeriodicCoefficient::sin_background(1).unwrap();
    let eps = dyadic_eps(3, 12);
    let with = rate_study_1d(&oracle_1d(sin(), DefectProfile::bump(1, 0.5, 1.0)?), &eps)?;
    let bound_const = with.rows.iter().map(|r| r.ratio_vs_bound).fold(0.0, f64::max);
    let without = rate_study_1d(&oracle_1d(sin(), DefectProfile::bump(1, 0.5, 0.0)?), &eps)?;
    let slope = without.l2_fit.map_or(f64::NAN, |f| f.slope);
    let growth = corrector_growth_1d(&oracle_1d(sin(), DefectProfile::bump(1, 0.5, 1.0)?), 20)?;
    let r2 = growth.fit.map_or(f64::NAN, |f| f.r2);
    let inc = growth.increments();
    let affine = r2 >= 0.999 && inc[2..].iter().all(|v| *v > 0.0);
    let ok = with.ratio_band <= 4.0 && (slope - 1.0).abs() <= 0.1 && affine;
    Ok((
        ok,
        format!(
            "ratio band {:.2} (target ≤ 4; the bound itself holds with C = {bound_const:.3}); periodic L² slope {slope:.3}; growth fit r2 {r2:.5}, increment {:.4} per generation",
            with.ratio_band,
            inc.last().copied().unwrap_or(f64::NAN)
        ),
    ))
}

fn criterion_7() -> Outcome {
    let coef = bumps(PeriodicCoefficient::checker(2)?, 10);
    let radii: Vec<f64> = (3..=7).map(|k| 2f64.powi(k)).collect();
    let report = flux_average_tensor(&coef, &radii, 4, &cfg(1e-10))?;
    let gaps: Vec<String> = report.rows.iter().map(|r| format!("{:.2e}", r.relative_gap)).collect();
    let last = report.rows.last().map_or(f64::NAN, |r| r.relative_gap);
    Ok((
        last <= 0.02 && report.gaps_decrease(),
        format!(
            "relative gaps over R = 2^3..2^7: [{}]; monotone: {}",
            gaps.join(", "),
            report.gaps_decrease()
        ),
    ))
}

fn criterion_8() -> Outcome {
    let m = 4;
    let per = PeriodicCoefficient::checker(2)?;
    let cell = PeriodicCorrector::solve(&per, m, &cfg(1e-10))?;
    let coef = bumps(per, 10);
    let single = coef.clone().with_generations(Some(0));
    let big = BoxSpec {
        half_width: 128.0,
        cells_per_unit: m,
    };
    let reference_box = BoxSpec {
        half_width: 64.0,
        cells_per_unit: m,
    };
    let w = solve_perturbed_corrector(&coef, &cell, 0, big, Bc::Dirichlet, &cfg(1e-10))?;
    let r = solve_perturbed_corrector(&single, &cell, 0, reference_box, Bc::Dirichlet, &cfg(1e-10))?;
    let rows = gradient_cell_table(&w.field, &coef.set, 6, Some(&r.field))?;
    let maxima: Vec<(u32, f64)> = shell_maxima(&rows)
        .into_iter()
        .filter(|(s, _)| (2..=6).contains(s))
        .collect();
    let monotone = maxima.len() == 5 && maxima.windows(2).all(|p| p[1].1 < p[0].1);
    let t = truncation_consistency(
        &coef,
        &cell,
        0,
        BoxSpec {
            half_width: 64.0,
            cells_per_unit: m,
        },
        &cfg(1e-10),
    )?;
    let shown: Vec<String> = maxima.iter().map(|(s, v)| format!("{s}:{v:.3e}")).collect();
    Ok((
        monotone && t.holds(),
        format!(
            "shell maxima of cell deviations [{}] monotone: {monotone}; truncation at L = 64: difference {:.3e} vs T_D + T_P = {:.3e}",
            shown.join(", "),
            t.difference,
            t.dirichlet_error + t.periodic_error
        ),
    ))
}

fn criterion_9() -> Outcome {
    let off = Symbol::cosine(2, 0, 0.3, 0.2, 0.0);
    let per = PeriodicCoefficient::new(
        2,
        vec![
            vec![Symbol::cosine(2, 1, 2.0, 0.8, 0.4), off.clone()],
            vec![off, Symbol::cosine(2, 0, 1.5, 0.5, 0.0)],
        ],
    )?;
    let ns = [16, 32, 64];
    let mut div = Vec::new();
    let mut curl = Vec::new();
    let mut antisymmetric = true;
    for n in ns {
        let c = PeriodicCorrector::solve(&per, n, &cfg(1e-11))?;
        let m = build_m(&c.system, &c.homogenized_tensor(), &c.fields);
        let b = solve_potential(&m, &cfg(1e-11))?;
        for flat in 0..c.grid().len() {
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        antisymmetric &= b.value(k, i, j, flat) == -b.value(k, j, i, flat);
                    }
                }
            }
        }
        div.push(b.divergence_residual(&m));
        curl.push(b.curl_residual(&m));
    }
    let h: Vec<f64> = ns.iter().map(|n| 1.0 / *n as f64).collect();
    let (pd, pc) = (observed_orders(&h, &div), observed_orders(&h, &curl));
    let ok = antisymmetric && pd.iter().chain(&pc).all(|p| *p >= 1.0);
    Ok((
        ok,
        format!("antisymmetry exact: {antisymmetric}; divergencepot orders {pd:.2?}; curl orders {pc:.2?}"),
    ))
}

fn criterion_10() -> Outcome {
    let eps = vec![0.25, 0.125, 0.0625];
    let setup = |amplitude: f64, generations: Option<u32>| -> Result<MultiscaleProblem, homlab_core::Error> {
        let coef = PerturbedCoefficient::new(
            PeriodicCoefficient::checker(3)?,
            DefectProfile::bump(3, 0.5, amplitude)?,
            DefectPointSet::dyadic(3, 2.0, 4)?,
        )?
        .with_generations(generations);
        let mut p = MultiscaleProblem::new(coef, Source::constant(1.0), eps.clone())?;
        // 6 nodes per ε-period keeps Ω at 96³ for ε = 1/16
        p.grid.nodes_per_period = 6;
        p.grid.min_nodes_per_period = 6;
        p.refinement_check = false;
        Ok(p)
    };
    let base = remainder_study(&setup(0.0, None)?)?;
    let slope = base.h1_interior_fit.map_or(f64::NAN, |f| f.slope);
    let defects = remainder_study(&setup(1.0, Some(1))?)?;
    let factors = defects.l2_decrease_factors();
    let ok = (slope - 1.0).abs() <= 0.3 && factors.len() == 2 && factors.iter().all(|f| *f >= 1.3);
    Ok((
        ok,
        format!("baseline interior H¹ slope {slope:.3}; single-generation L² decrease factors {factors:.3?}"),
    ))
}

fn criterion_11() -> Outcome {
    let one = || PeriodicCoefficient::constant(1, 1.0).unwrap();
    let eps = dyadic_eps(3, 12);
    let mut slopes = Vec::new();
    let mut parts = Vec::new();
    for beta in [0.5, 2.0] {
        let profile = DefectProfile::algebraic(1, 0.5, beta, 1e6, 1.0)?;
        let nu = expected_exponents(&profile, 1).nu;
        let study = rate_study_1d(&oracle_1d(one(), profile), &eps)?;
        let slope = study.l2_fit.map_or(f64::NAN, |f| f.slope);
        let h1 = study.h1_fit.map_or(f64::NAN, |f| f.slope);
        slopes.push((nu, slope));
        parts.push(format!(
            "β={beta}: ν_r = {nu:.2}, L² slope {slope:.3}, H¹ slope {h1:.3}"
        ));
    }
    let ok = (slopes[0].1 < slopes[1].1) == (slopes[0].0 < slopes[1].0);
    Ok((ok, parts.join("; ")))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, Criterion); 11] = [
        ("geometry certification", criterion_1),
        ("logarithmic cell-count law", criterion_2),
        ("average decay of the perturbation", criterion_3),
        ("solver order and identities", criterion_4),
        ("homogenized tensor", criterion_5),
        ("1D rate law", criterion_6),
        ("homogenized tensor invariance under defects", criterion_7),
        ("perturbed corrector structure", criterion_8),
        ("potential identities", criterion_9),
        ("3D remainder rates", criterion_10),
        ("algebraic exponent ordering", criterion_11),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
