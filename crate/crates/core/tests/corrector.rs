use std::f64::consts::PI;

use homlab_core::coefficients::{DefectProfile, PeriodicCoefficient, PerturbedCoefficient, Symbol};
use homlab_core::corrector::{
    build_m, cell_grid, centered_difference, gradient_cell_table, mean_bounds, shell_maxima, solve_perturbed_corrector,
    solve_potential, sublinearity_ratios, sup_growth, truncation_consistency, BoxSpec, MatrixField, PeriodicCorrector,
};
use homlab_core::geometry::DefectPointSet;
use homlab_core::numeric::observed_orders;
use homlab_core::pde::{Bc, GridField, SolverConfig};

fn cfg() -> SolverConfig {
    SolverConfig {
        rel_tol: 1e-10,
        ..SolverConfig::default()
    }
}

/// `∫_0^1 dy / (2 + sin 2πy) = 1/√3`.
#[test]
fn sin_background_homogenizes_to_sqrt3() {
    let per = PeriodicCoefficient::sin_background(1).unwrap();
    let c = PeriodicCorrector::solve(&per, 1024, &cfg()).unwrap();
    let a = c.homogenized_tensor();
    assert!((a.a[0][0] - 3f64.sqrt()).abs() < 1e-4, "{:?}", a);
    let hm = 1.0 / homlab_core::quadrature::simpson_fn(|y| 1.0 / (2.0 + (2.0 * PI * y).sin()), 0.0, 1.0, 4096);
    assert!((hm - 3f64.sqrt()).abs() < 1e-10);
}

#[test]
fn one_dimensional_corrector_gradient_is_explicit() {
    let per = PeriodicCoefficient::sin_background(1).unwrap();
    let ns = [32, 64, 128];
    for n in ns {
        let c = PeriodicCorrector::solve(&per, n, &cfg()).unwrap();
        let g = c.grid();
        let h = g.h();
        let w = &c.fields[0].values;
        let mut e: f64 = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            let y = (i as f64 + 0.5) * h;
            let exact = 3f64.sqrt() / (2.0 + (2.0 * PI * y).sin()) - 1.0;
            e = e.max(((w[j] - w[i]) / h - exact).abs());
        }
        // the midpoint harmonic mean is spectrally accurate, so the face
        // gradients sit far below the O(h^2) envelope
        assert!(e <= 10.0 * h * h, "n = {n}: {e}");
        assert!(c.fields[0].mean().abs() < 1e-13);
    }
}

#[test]
fn laminate_closed_form() {
    let per = PeriodicCoefficient::laminate2d().unwrap();
    let c = PeriodicCorrector::solve(&per, 64, &cfg()).unwrap();
    assert!(c.fields[1].max_abs() < 1e-12);
    let g = c.grid();
    let w = &c.fields[0];
    for i in 0..g.len() {
        let cc = g.coords(i);
        let j = g.flat(&[cc[0], 0]);
        assert!((w.values[i] - w.values[j]).abs() < 1e-10);
    }
    let a = c.homogenized_tensor();
    assert!((a.a[0][0] - 3f64.sqrt()).abs() < 1e-3);
    assert!((a.a[1][1] - 3.0).abs() < 1e-3);
    assert!(a.a[0][1].abs() < 1e-10 && a.a[1][0].abs() < 1e-10);
}

fn tilted() -> PeriodicCoefficient {
    let off = Symbol::cosine(2, 0, 0.3, 0.2, 0.0);
    PeriodicCoefficient::new(
        2,
        vec![
            vec![Symbol::cosine(2, 1, 2.0, 0.8, 0.4), off.clone()],
            vec![off, Symbol::cosine(2, 0, 1.5, 0.5, 0.0)],
        ],
    )
    .unwrap()
}

#[test]
fn homogenized_tensor_properties() {
    for per in [PeriodicCoefficient::checker(2).unwrap(), tilted()] {
        let c = PeriodicCorrector::solve(&per, 32, &cfg()).unwrap();
        let a = c.homogenized_tensor();
        let e = c.energy_tensor();
        let scale = a.a[0][0].abs();
        assert!(a.asymmetry() < 1e-8 * scale, "{a:?}");
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.a[i][j] - e.a[i][j]).abs() < 1e-8 * scale);
            }
        }
        let (lo, hi) = mean_bounds(&per, 32);
        let ev = a.eigenvalues();
        assert!(
            ev[0] >= lo * (1.0 - 1e-3) && ev[1] <= hi * (1.0 + 1e-3),
            "{ev:?} not in [{lo}, {hi}]"
        );
        for f in &c.fields {
            assert!(f.mean().abs() < 1e-12);
        }
    }
}

#[test]
fn matrix_of_constant_coefficient_vanishes() {
    let per = PeriodicCoefficient::constant(2, 2.0).unwrap();
    let c = PeriodicCorrector::solve(&per, 8, &cfg()).unwrap();
    let m = build_m(&c.system, &c.homogenized_tensor(), &c.fields);
    assert_eq!(m.max_abs(), 0.0);
    let b = solve_potential(&m, &cfg()).unwrap();
    assert_eq!(b.max_abs(), 0.0);
}

#[test]
fn matrix_has_zero_cell_average() {
    let c = PeriodicCorrector::solve(&tilted(), 32, &cfg()).unwrap();
    let m = build_m(&c.system, &c.homogenized_tensor(), &c.fields);
    let scale = m.max_abs();
    for row in m.averages() {
        for v in row {
            assert!(v.abs() <= 1e-10 * scale, "{v}");
        }
    }
}

#[test]
fn single_mode_potential() {
    let n = 32;
    let g = cell_grid(2, n).unwrap();
    let h = g.h();
    let m00 = GridField::from_fn(&g, |x| (2.0 * PI * x[1]).sin());
    let m01 = GridField::from_fn(&g, |x| (2.0 * PI * x[0]).sin());
    let zero = GridField::zeros(&g);
    let m = MatrixField {
        grid: g.clone(),
        m: vec![vec![m00, m01], vec![zero.clone(), zero]],
    };
    let b = solve_potential(&m, &cfg()).unwrap();
    let s = (2.0 * PI * h).sin() / h;
    let sigma = 4.0 * (PI * h).sin().powi(2) / (h * h);
    for i in 0..g.len() {
        let x = g.node(i);
        let exact = s / sigma * ((2.0 * PI * x[1]).cos() - (2.0 * PI * x[0]).cos());
        assert!((b.value(0, 0, 1, i) - exact).abs() < 1e-10);
        assert_eq!(b.value(0, 1, 0, i), -b.value(0, 0, 1, i));
        assert_eq!(b.value(1, 0, 1, i), 0.0);
    }
}

#[test]
fn periodic_residuals_converge() {
    let per = tilted();
    let ns = [16, 32, 64];
    let mut div_m = Vec::new();
    let mut div_b = Vec::new();
    let mut curl_b = Vec::new();
    for n in ns {
        let c = PeriodicCorrector::solve(&per, n, &cfg()).unwrap();
        let m = build_m(&c.system, &c.homogenized_tensor(), &c.fields);
        let b = solve_potential(&m, &cfg()).unwrap();
        div_m.push(m.divergence_residual());
        div_b.push(b.divergence_residual(&m));
        curl_b.push(b.curl_residual(&m));
    }
    let h: Vec<f64> = ns.iter().map(|n| 1.0 / *n as f64).collect();
    for (name, r) in [("div M", &div_m), ("divergencepot", &div_b), ("curl", &curl_b)] {
        let p = observed_orders(&h, r);
        assert!(p.iter().all(|v| *v >= 1.0), "{name}: {r:?} orders {p:?}");
    }
}

fn bump_coefficient(per: PeriodicCoefficient, bound: u32, gens: Option<u32>) -> PerturbedCoefficient {
    let d = per.dim;
    PerturbedCoefficient::new(
        per,
        DefectProfile::bump(d, 0.5, 1.0).unwrap(),
        DefectPointSet::dyadic(d, 2.0, bound).unwrap(),
    )
    .unwrap()
    .with_generations(gens)
}

#[test]
fn no_defects_gives_zero_perturbed_corrector() {
    let per = PeriodicCoefficient::checker(2).unwrap();
    let c = PeriodicCorrector::solve(&per, 8, &cfg()).unwrap();
    let coef = bump_coefficient(per, 8, None).without_defects();
    let spec = BoxSpec {
        half_width: 4.0,
        cells_per_unit: 8,
    };
    let w = solve_perturbed_corrector(&coef, &c, 0, spec, Bc::Dirichlet, &cfg()).unwrap();
    assert_eq!(w.field.max_abs(), 0.0);
    assert_eq!(w.report.iterations, 0);
}

fn annulus_norm(f: &GridField, r: f64) -> f64 {
    let g = &f.grid;
    let gx = centered_difference(f, 0);
    let gy = centered_difference(f, 1);
    let mut s = 0.0;
    for i in 0..g.len() {
        let x = g.node(i);
        let rr = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rr >= r && rr < 2.0 * r {
            s += gx[i].powi(2) + gy[i].powi(2);
        }
    }
    (s * g.h() * g.h()).sqrt()
}

#[test]
fn single_defect_gradient_decays() {
    let per = PeriodicCoefficient::constant(2, 1.0).unwrap();
    let c = PeriodicCorrector::solve(&per, 8, &cfg()).unwrap();
    let coef = bump_coefficient(per, 8, Some(0));
    let spec = BoxSpec {
        half_width: 16.0,
        cells_per_unit: 8,
    };
    let w = solve_perturbed_corrector(&coef, &c, 0, spec, Bc::Dirichlet, &cfg()).unwrap();
    assert!(w.uncovered.is_empty());
    let norms: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|r| annulus_norm(&w.field, *r)).collect();
    assert!(norms.windows(2).all(|p| p[1] < p[0]), "{norms:?}");
    // odd in x_1 for the e_1 corrector of a radial defect
    let g = w.grid();
    for i in 0..g.len() {
        let cc = g.coords(i);
        let j = g.flat(&[g.n - cc[0], cc[1]]);
        assert!((w.field.values[i] + w.field.values[j]).abs() < 1e-8);
    }
}

#[test]
fn perturbed_corrector_solves_full_cell_equation() {
    // A (w_per + w̃) = div(a e_j) on the box interior
    let per = PeriodicCoefficient::checker(2).unwrap();
    let c = PeriodicCorrector::solve(&per, 8, &cfg()).unwrap();
    let coef = bump_coefficient(per, 8, Some(3));
    let spec = BoxSpec {
        half_width: 8.0,
        cells_per_unit: 8,
    };
    let w = solve_perturbed_corrector(&coef, &c, 1, spec, Bc::Dirichlet, &cfg()).unwrap();
    let sys = homlab_core::pde::assemble_divform(&coef, w.grid()).unwrap();
    let wp = c.tiled(1, w.grid()).unwrap();
    let total: Vec<f64> = wp.values.iter().zip(&w.field.values).map(|(a, b)| a + b).collect();
    let mut lhs = vec![0.0; total.len()];
    sys.apply(&total, &mut lhs);
    let rhs = sys.rhs_div(&sys.flux(&vec![0.0; total.len()], Some(1)));
    let g = w.grid();
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..g.len() {
        let cc = g.coords(i);
        // rows next to the boundary see the zero Dirichlet data of w̃ only
        if (0..2).all(|k| cc[k] >= 2 && cc[k] + 2 <= g.n) {
            assert!((lhs[i] - rhs[i]).abs() <= 1e-6 * scale, "node {i}");
        }
    }
}

#[test]
fn truncations_agree_within_estimate() {
    let per = PeriodicCoefficient::checker(2).unwrap();
    let c = PeriodicCorrector::solve(&per, 4, &cfg()).unwrap();
    let coef = bump_coefficient(per, 10, None);
    let spec = BoxSpec {
        half_width: 8.0,
        cells_per_unit: 4,
    };
    let t = truncation_consistency(&coef, &c, 0, spec, &cfg()).unwrap();
    assert!(t.holds(), "{t:?}");
    assert!(t.dirichlet_error > 0.0 && t.periodic_error > 0.0);
}

#[test]
fn periodic_corrector_sublinearity_bounded_by_oscillation() {
    let per = PeriodicCoefficient::checker(2).unwrap();
    let c = PeriodicCorrector::solve(&per, 16, &cfg()).unwrap();
    let w = &c.fields[0];
    let osc = w.values.iter().cloned().fold(f64::MIN, f64::max) - w.values.iter().cloned().fold(f64::MAX, f64::min);
    let region = homlab_core::geometry::BoundingBox {
        lo: vec![-8.0; 2],
        hi: vec![8.0; 2],
    };
    for row in sublinearity_ratios(|x| w.interpolate(x), &region, 2000) {
        // ratio denominators exceed (log 2)^{1/s} 2^{1-d/s} for |x - y| >= 2
        let floor = 2f64.ln().powf(1.0 / row.s) * 2f64.powf(1.0 - 2.0 / row.s);
        assert!(row.max_ratio <= osc / floor + 1e-12, "{row:?}");
        assert!(row.pairs > 100);
    }
}

#[test]
fn gradient_table_and_growth() {
    let per = PeriodicCoefficient::constant(2, 1.0).unwrap();
    let c = PeriodicCorrector::solve(&per, 4, &cfg()).unwrap();
    let coef = bump_coefficient(per, 12, None);
    let spec = BoxSpec {
        half_width: 32.0,
        cells_per_unit: 4,
    };
    let w = solve_perturbed_corrector(&coef, &c, 0, spec, Bc::Dirichlet, &cfg()).unwrap();
    let rows = gradient_cell_table(&w.field, &coef.set, 4, Some(&w.field)).unwrap();
    // 1 + 8 + 16 + 24 + 24 cells up to shell 4
    assert_eq!(rows.len(), 73);
    assert!(rows.iter().all(|r| r.norm > 0.0));
    let origin = rows.iter().find(|r| r.shell == 0).unwrap();
    // the field is its own reference at the origin
    assert!(origin.deviation.unwrap() < 1e-12);
    assert_eq!(shell_maxima(&rows).len(), 5);
    let growth = sup_growth(&w.field, &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
    assert!(growth.rows.windows(2).all(|p| p[1].sup_abs >= p[0].sup_abs));
    assert!(growth.fit.is_some());
}
