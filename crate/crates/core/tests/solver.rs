mod common;

use common::{brute_force_qp, nnls_residual, random_order2_problem};
use noddish_core::kernels::{noddish_basis, DiffusivitySet, VolumeFractions};
use noddish_core::phantom::{synth_signal, KentParams, PhantomVoxelSpec};
use noddish_core::scheme::hcp_like_scheme;
use noddish_core::sh::{eval_sh, make_hemisphere_grid, normalized_c00, sh_count, sh_expand_on_grid, UnitDirection};
use noddish_core::solver::{fit_fodf, solve_qp, QpConfig, DEFAULT_CONSTRAINT_POINTS};
use noddish_core::AcquisitionScheme;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn qp_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut binding = 0;
    for _ in 0..50 {
        let p = random_order2_problem(&mut rng, 20);
        let oracle = brute_force_qp(&p).expect("enumeration finds the optimum");
        let r = solve_qp(&p, &QpConfig::default()).unwrap();
        assert!(r.converged);
        binding += usize::from(!r.active.is_empty());
        for (a, b) in r.x.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6, "solver {a} vs enumeration {b}");
        }
    }
    // The generator must exercise the constraints, not just the unconstrained optimum.
    assert!(binding >= 25, "only {binding} problems had active constraints");
}

fn crossing_signal(scheme: &AcquisitionScheme, seed: u64, snr: Option<f64>) -> Vec<f64> {
    let a = KentParams::oriented(128.0, 0.0, UnitDirection::unit_z(), 0.0).unwrap();
    let b = KentParams::oriented(128.0, 0.0, UnitDirection::unit_x(), 0.0).unwrap();
    let spec = PhantomVoxelSpec {
        populations: vec![a, b],
        fractions: VolumeFractions::new(0.7, 0.25, 0.05).unwrap(),
        directions: 100,
        snr,
        seed,
    };
    synth_signal(&spec, scheme, &DiffusivitySet::simulation_default()).unwrap().0
}

#[test]
fn fitted_fodf_is_feasible_and_certified() {
    let scheme = hcp_like_scheme();
    let grid = make_hemisphere_grid(DEFAULT_CONSTRAINT_POINTS).unwrap();
    let d = DiffusivitySet::simulation_default();
    let f = VolumeFractions::new(0.7, 0.25, 0.05).unwrap();
    let basis = noddish_basis(&scheme, &d, &f, 8).unwrap();
    let y = eval_sh(8, &grid.directions).unwrap();
    for seed in 0..6 {
        let signal = crossing_signal(&scheme, seed, Some(20.0));
        let sol = fit_fodf(&signal, &basis, &grid, 1e-8).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.coeffs.coeffs[0], normalized_c00::<f64>());
        let vals = sh_expand_on_grid(&sol.coeffs, &grid).unwrap();
        assert!(vals.iter().all(|&v| v >= -1e-8));

        // Independent optimality certificate: gradient of ½‖Mc - E‖² over the
        // free coefficients must be a non-negative combination of the active
        // constraint normals.
        let c = &sol.coeffs.coeffs;
        let pred = basis.values.mul_vec(c);
        let resid: Vec<f64> = pred.iter().zip(&signal).map(|(p, s)| p - s).collect();
        let grad: Vec<f64> = basis.values.tr_mul_vec(&resid)[1..].to_vec();
        let active: Vec<Vec<f64>> = (0..grid.count())
            .filter(|&i| vals[i] < 1e-7)
            .map(|i| y.values.row(i)[1..].to_vec())
            .collect();
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cert = nnls_residual(&active, &grad);
        assert!(cert <= 1e-6 * gnorm.max(1.0), "KKT certificate residual {cert} (gradient norm {gnorm})");

        // The isotropic fODF is feasible, so the optimum cannot be worse.
        let mut iso = vec![0.0; sh_count(8)];
        iso[0] = normalized_c00();
        let iso_pred = basis.values.mul_vec(&iso);
        let iso_res = iso_pred.iter().zip(&signal).map(|(p, s)| (p - s) * (p - s)).sum::<f64>().sqrt();
        assert!(sol.residual_norm <= iso_res);
    }
}

#[test]
fn single_precision_fit_tracks_double() {
    let scheme = hcp_like_scheme();
    let signal = crossing_signal(&scheme, 3, None);
    let d = DiffusivitySet::simulation_default();
    let f = VolumeFractions::new(0.7, 0.25, 0.05).unwrap();
    let grid = make_hemisphere_grid(DEFAULT_CONSTRAINT_POINTS).unwrap();
    let sol = fit_fodf(&signal, &noddish_basis(&scheme, &d, &f, 8).unwrap(), &grid, 1e-8).unwrap();

    let dirs32: Vec<UnitDirection<f32>> = scheme.directions.iter().map(|u| u.cast()).collect();
    let b32: Vec<f32> = scheme.bvalues.iter().map(|&b| b as f32).collect();
    let scheme32 = AcquisitionScheme::new(dirs32, b32, scheme.tau as f32).unwrap();
    let d32 = DiffusivitySet::<f32>::simulation_default();
    let f32s = VolumeFractions::new(0.7f32, 0.25, 0.05).unwrap();
    let grid32 = make_hemisphere_grid::<f32>(DEFAULT_CONSTRAINT_POINTS).unwrap();
    let sig32: Vec<f32> = signal.iter().map(|&v| v as f32).collect();
    let sol32 = fit_fodf(&sig32, &noddish_basis(&scheme32, &d32, &f32s, 8).unwrap(), &grid32, 1e-4).unwrap();
    let diff = sol.coeffs.coeffs.iter().zip(&sol32.coeffs.coeffs).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    let scale = sol.coeffs.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    // High-order coefficients are weakly determined, so compare loosely and
    // check the predicted signals tightly.
    assert!(diff < 3e-2 * scale, "f32 and f64 coefficients differ by {diff} (scale {scale})");
    let c32: Vec<f64> = sol32.coeffs.coeffs.iter().map(|&v| v as f64).collect();
    let p64 = noddish_basis(&scheme, &d, &f, 8).unwrap().values.mul_vec(&sol.coeffs.coeffs);
    let p32 = noddish_basis(&scheme, &d, &f, 8).unwrap().values.mul_vec(&c32);
    let pdiff = p64.iter().zip(&p32).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(pdiff < 1e-3, "predicted signals differ by {pdiff}");
}

#[test]
fn fit_rejects_mismatched_inputs() {
    let scheme = hcp_like_scheme();
    let d = DiffusivitySet::simulation_default();
    let f = VolumeFractions::new(0.7, 0.25, 0.05).unwrap();
    let basis = noddish_basis(&scheme, &d, &f, 8).unwrap();
    let grid = make_hemisphere_grid(DEFAULT_CONSTRAINT_POINTS).unwrap();
    assert!(fit_fodf(&[1.0; 5], &basis, &grid, 1e-8).is_err());
    let mut bad = vec![1.0; scheme.n_samples()];
    bad[3] = f64::NAN;
    assert!(fit_fodf(&bad, &basis, &grid, 1e-8).is_err());
    assert!(fit_fodf(&vec![1.0; scheme.n_samples()], &basis, &grid, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qp_solutions_satisfy_kkt(seed in any::<u64>(), m in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_order2_problem(&mut rng, m);
        let r = solve_qp(&p, &QpConfig::default()).unwrap();
        prop_assert!(r.converged);
        prop_assert!(p.kkt_residual(&r.x, &r.multipliers) <= 1e-8);
        for i in 0..m {
            let v: f64 = p.a.row(i).iter().zip(&r.x).map(|(a, x)| a * x).sum();
            prop_assert!(v - p.b[i] >= -1e-9);
        }
    }
}
