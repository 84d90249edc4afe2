use homlab_core::coefficients::{
    average_decay, average_decay_field, cell_norm, cell_norm_table, tail_uniform, Coefficient, DefectProfile,
    PeriodicCoefficient, PerturbedCoefficient,
};
use homlab_core::geometry::{DefectPointSet, LatticeIndex};
use homlab_core::quadrature::simpson_fn;
use proptest::prelude::*;

fn bump_line(rho: f64) -> PerturbedCoefficient {
    PerturbedCoefficient::new(
        PeriodicCoefficient::constant(1, 1.0).unwrap(),
        DefectProfile::bump(1, rho, 1.0).unwrap(),
        DefectPointSet::dyadic(1, 2.0, 24).unwrap(),
    )
    .unwrap()
}

#[test]
fn cell_norm_of_single_bump() {
    let coef = bump_line(0.5);
    let p = LatticeIndex(vec![3]);
    let got = cell_norm(|y| coef.defect_density(y), &coef.set, &p, 2.0, 1e-4).unwrap();
    let oracle = simpson_fn(|z| coef.profile.radial(z.abs()).powi(2), -0.5, 0.5, 40_000).sqrt();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    let zero = cell_norm(|_| 0.0, &coef.set, &p, 2.0, 1e-3).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn bump_cell_norms_equal_single_profile() {
    let set = DefectPointSet::dyadic(2, 2.0, 9).unwrap();
    let coef = PerturbedCoefficient::new(
        PeriodicCoefficient::checker(2).unwrap(),
        DefectProfile::bump(2, 0.5, 1.0).unwrap(),
        set,
    )
    .unwrap();
    let indices: Vec<LatticeIndex> = [[0, 0], [2, 0], [3, 2], [-5, 4], [6, 6]]
        .iter()
        .map(|p| LatticeIndex(p.to_vec()))
        .collect();
    let table = cell_norm_table(&coef, &indices, 2.0, 1.0 / 128.0).unwrap();
    let single = coef.profile.lr_norm_pow(2.0).sqrt();
    for e in &table.entries {
        assert!((e.norm - single).abs() < 2e-3 * single, "{e:?} vs {single}");
        assert_eq!(e.residual, 0.0);
    }
}

#[test]
fn algebraic_leakage_decreases() {
    let coef = PerturbedCoefficient::new(
        PeriodicCoefficient::constant(1, 1.0).unwrap(),
        DefectProfile::algebraic(1, 1.0, 1.5, 1e4, 1.0).unwrap(),
        DefectPointSet::dyadic(1, 2.0, 20).unwrap(),
    )
    .unwrap();
    let indices: Vec<LatticeIndex> = (2..=12).map(|k| LatticeIndex(vec![k])).collect();
    let table = cell_norm_table(&coef, &indices, 2.0, 1.0 / 16.0).unwrap();
    let res: Vec<f64> = table.entries.iter().map(|e| e.residual).collect();
    for w in res.windows(2) {
        assert!(w[1] < w[0], "{res:?}");
    }
    assert!(res.last().unwrap() < &(0.1 * res[0]), "{res:?}");
}

#[test]
fn zero_field_has_zero_means() {
    let avg = average_decay_field(|_| 0.0, &[0.0, 0.0], &[2.0, 4.0, 8.0], 64);
    assert!(avg.means.iter().all(|m| *m == 0.0));
}

#[test]
fn average_decay_matches_pointwise_quadrature() {
    let coef = bump_line(0.5);
    let radii = [4.0, 16.0, 64.0];
    let fast = average_decay(&coef, &[0.3], &radii).unwrap();
    let slow = average_decay_field(|y| coef.defect_density(y), &[0.3], &radii, 400_000);
    for (a, b) in fast.means.iter().zip(&slow.means) {
        assert!((a - b).abs() < 1e-4 * b, "{a} vs {b}");
    }
}

#[test]
fn average_decay_respects_log_bound() {
    let coef = bump_line(0.5);
    let radii: Vec<f64> = (4..=18).map(|k| 2f64.powi(k)).collect();
    let avg = average_decay(&coef, &[0.0], &radii).unwrap();
    for (m, r) in avg.means.iter().zip(&radii) {
        assert!(*m <= avg.bound_constant * (r.ln() / r).sqrt() * (1.0 + 1e-12));
    }
    // the means decay strictly faster than the bound
    assert!(avg.ratios.last().unwrap() < &avg.ratios[0]);
}

#[test]
fn tail_of_bumps_is_single_profile_tail() {
    let coef = bump_line(0.5);
    for r in [0.1, 0.25, 0.4] {
        let got = tail_uniform(&coef, r, 8, 1e-4).unwrap();
        let oracle = simpson_fn(|z| coef.profile.radial(z).powi(2), r, 0.5, 20_000) * 2.0;
        assert!((got - oracle.sqrt()).abs() < 1e-4, "r={r}: {got} vs {}", oracle.sqrt());
    }
    assert_eq!(tail_uniform(&coef, 1.0, 8, 1e-3).unwrap(), 0.0);
}

#[test]
fn tails_are_nonincreasing() {
    let coef = PerturbedCoefficient::new(
        PeriodicCoefficient::constant(1, 1.0).unwrap(),
        DefectProfile::algebraic(1, 1.0, 1.5, 64.0, 1.0).unwrap(),
        DefectPointSet::dyadic(1, 2.0, 14).unwrap(),
    )
    .unwrap();
    let tails: Vec<f64> = [2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|r| tail_uniform(&coef, *r, 9, 1.0 / 16.0).unwrap())
        .collect();
    for w in tails.windows(2) {
        assert!(w[1] <= w[0], "{tails:?}");
    }
}

proptest! {
    #[test]
    fn periodic_part_has_unit_period(x in -50.0f64..50.0, y in -50.0f64..50.0, k in 0usize..2) {
        let c = PeriodicCoefficient::laminate2d().unwrap();
        let mut z = [x, y];
        z[k] += 1.0;
        let a = c.eval(&[x, y]);
        let b = c.eval(&z);
        prop_assert!((a[0][0] - b[0][0]).abs() < 1e-12);
        prop_assert!((a[1][1] - b[1][1]).abs() < 1e-12);
    }

    #[test]
    fn bump_coefficient_dominates_background(x in -200.0f64..200.0) {
        let coef = bump_line(0.5);
        let a = coef.eval(&[x])[0][0];
        prop_assert!(a >= 1.0);
        prop_assert!(a <= 2.0);
    }
}
