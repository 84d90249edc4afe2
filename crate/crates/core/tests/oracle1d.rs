use std::f64::consts::PI;

use homlab_core::coefficients::{DefectProfile, PeriodicCoefficient, PerturbedCoefficient, Scaled};
use homlab_core::corrector::PeriodicCorrector;
use homlab_core::geometry::DefectPointSet;
use homlab_core::oracle1d::{corrector_growth_1d, dyadic_eps, exact_fields, rate_study_1d, Oracle1D};
use homlab_core::pde::{assemble_divform, solve, Bc, GridField, SolverConfig, UniformGrid};
use homlab_core::quadrature::simpson_fn;
use homlab_core::source::Source;

fn oracle(per: PeriodicCoefficient, profile: DefectProfile, f: Source) -> Oracle1D {
    let coef = PerturbedCoefficient::new(per, profile, DefectPointSet::dyadic(1, 2.0, 30).unwrap()).unwrap();
    Oracle1D::new(coef, f).unwrap()
}

fn sin_plain() -> Oracle1D {
    oracle(
        PeriodicCoefficient::sin_background(1).unwrap(),
        DefectProfile::bump(1, 0.5, 0.0).unwrap(),
        Source::constant(1.0),
    )
}

fn sin_bumps() -> Oracle1D {
    oracle(
        PeriodicCoefficient::sin_background(1).unwrap(),
        DefectProfile::bump(1, 0.5, 1.0).unwrap(),
        Source::constant(1.0),
    )
}

#[test]
fn flux_identity_and_boundary_values() {
    for o in [sin_plain(), sin_bumps()] {
        for eps in [0.125, 1.0 / 64.0] {
            let s = exact_fields(&o, eps).unwrap();
            assert!(s.flux_identity_defect() < 1e-13);
            assert!(s.boundary_defect() < 1e-10, "{}", s.boundary_defect());
        }
    }
}

#[test]
fn linear_source_cubic_closed_form() {
    // -c u'' = x  =>  u = (x - x^3) / (6c)
    let o = oracle(
        PeriodicCoefficient::constant(1, 2.0).unwrap(),
        DefectProfile::bump(1, 0.5, 0.0).unwrap(),
        Source::Polynomial { coeffs: vec![0.0, 1.0] },
    );
    let s = exact_fields(&o, 0.5).unwrap();
    for i in 0..s.len() {
        let x = s.x(i);
        assert!((s.u_star[i] - (x - x * x * x) / 12.0).abs() < 1e-12);
        assert!((s.u_eps[i] - s.u_star[i]).abs() < 1e-12);
    }
}

#[test]
fn a_star_matches_cell_problem() {
    let o = sin_plain();
    let a = o.a_star().unwrap();
    assert!((a - 3f64.sqrt()).abs() < 1e-9);
    let c = PeriodicCorrector::solve(&o.coef.per, 1024, &SolverConfig::default()).unwrap();
    assert!((c.homogenized_tensor().a[0][0] - a).abs() < 1e-6);
}

/// FD solve of `-(a(x/ε) u')' = f` against the oracle.
fn fd_error(o: &Oracle1D, eps: f64, n: usize) -> f64 {
    let g = UniformGrid::new(1, n, 0.0, 1.0, Bc::Dirichlet).unwrap();
    let coef = Scaled {
        inner: o.coef.clone(),
        eps,
    };
    let sys = assemble_divform(&coef, &g).unwrap();
    let rhs = GridField::from_fn(&g, |x| o.source.eval(x)).values;
    let cfg = SolverConfig {
        rel_tol: 1e-10,
        ..SolverConfig::default()
    };
    let (u, _) = solve(&sys, &rhs, &cfg).unwrap();
    // ρ/128 in the fast variable puts every FD node on an oracle node
    let fine = Oracle1D {
        samples_per_period: 128,
        ..o.clone()
    };
    let s = exact_fields(&fine, eps).unwrap();
    let sq: f64 = (0..=n)
        .map(|i| (u.values[i] - s.interpolate(&s.u_eps, i as f64 / n as f64)).powi(2))
        .sum();
    (sq / n as f64).sqrt()
}

#[test]
fn oracle_matches_fd_solver() {
    for o in [sin_plain(), sin_bumps()] {
        for eps in [0.125, 0.0625, 0.03125] {
            let coarse = fd_error(&o, eps, (64.0 / eps) as usize);
            let fine = fd_error(&o, eps, (128.0 / eps) as usize);
            let h = eps / 128.0;
            // O(h^2) in the fast variable and second order under refinement
            assert!(fine <= 10.0 * (h / eps).powi(2), "ε = {eps}: {fine}");
            assert!(coarse / fine > 3.0, "ε = {eps}: {coarse} -> {fine}");
        }
    }
}

#[test]
fn periodic_l2_remainder_is_first_order() {
    let study = rate_study_1d(&sin_plain(), &dyadic_eps(3, 12)).unwrap();
    let fit = study.l2_fit.unwrap();
    assert!((fit.slope - 1.0).abs() <= 0.1, "slope {}", fit.slope);
    assert_eq!(study.rows.len(), 10);
}

#[test]
fn defect_remainder_obeys_upper_bound() {
    let study = rate_study_1d(&sin_bumps(), &dyadic_eps(3, 10)).unwrap();
    // the derivative bound C ε^{1/2} |log ε|^{1/2} holds with one constant
    let c = study.rows.iter().map(|r| r.ratio_vs_bound).fold(0.0, f64::max);
    assert!(c < 10.0, "{study:?}");
    assert!(study.rows.iter().all(|r| r.h1_r > 0.0));
}

#[test]
fn corrector_drops_per_generation() {
    let o = sin_bumps();
    let eps = 1.0 / 1024.0;
    let s = exact_fields(&o, eps).unwrap();
    let a_star = s.a_star;
    // one full bump between consecutive dyadic points; a_per is 1-periodic
    // and x_p is an integer, so every bump contributes the same integral
    let bump = simpson_fn(
        |z| {
            let ap = 2.0 + (2.0 * PI * z).sin();
            let phi = o.coef.profile.shape(&[z]);
            phi / (ap * (ap + phi))
        },
        -0.5,
        0.5,
        4096,
    );
    for n in 2..9 {
        // midpoints 1.5·2^n and 3·2^n bracket exactly the bump at 2^{n+1}
        let lo = s.interpolate(&s.eps_w_tilde, 1.5 * 2f64.powi(n) * eps) / eps;
        let hi = s.interpolate(&s.eps_w_tilde, 3.0 * 2f64.powi(n) * eps) / eps;
        assert!(((lo - hi) - a_star * bump).abs() < 1e-6, "n = {n}: {}", lo - hi);
    }
}

#[test]
fn growth_is_zero_without_defects() {
    let g = corrector_growth_1d(&sin_plain(), 12).unwrap();
    assert!(g.rows.iter().all(|r| r.sup_abs == 0.0));
}

#[test]
fn unit_bumps_grow_affinely() {
    let o = oracle(
        PeriodicCoefficient::constant(1, 1.0).unwrap(),
        DefectProfile::bump(1, 0.5, 1.0).unwrap(),
        Source::constant(1.0),
    );
    let g = corrector_growth_1d(&o, 20).unwrap();
    let per_bump = simpson_fn(
        |z| {
            let phi = o.coef.profile.shape(&[z]);
            phi / (1.0 + phi)
        },
        -0.5,
        0.5,
        8192,
    );
    for inc in &g.increments()[2..] {
        // both sides are Simpson sums; the oracle runs at ρ/32
        assert!((inc - per_bump).abs() < 1e-5 * per_bump, "{inc} vs {per_bump}");
    }
    let fit = g.fit.unwrap();
    assert!(fit.r2 > 0.999);
}

#[test]
fn algebraic_profile_grows_affinely() {
    let o = oracle(
        PeriodicCoefficient::constant(1, 1.0).unwrap(),
        DefectProfile::algebraic(1, 0.5, 6.0, 0.75, 1.0).unwrap(),
        Source::constant(1.0),
    );
    let g = corrector_growth_1d(&o, 20).unwrap();
    let inc = g.increments();
    let last = inc[inc.len() - 1];
    assert!(last > 0.0);
    for v in &inc[3..] {
        assert!((v - last).abs() < 1e-8 * last.max(1.0));
    }
}
