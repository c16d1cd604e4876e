
use noddish_core::kernels::{DiffusivitySet, VolumeFractions};
use noddish_core::phantom::{
    add_rician_noise, crossing_axes, crossing_sweep, electrostatic_directions, fanning_sweep, kent_pdf, sample_kent,
    synth_signal, CrossingSweep, FanningSweep, KentParams, PhantomVoxelSpec,
};
use noddish_core::scheme::hcp_like_scheme;
use noddish_core::sh::{fibonacci_sphere, UnitDirection};
use noddish_core::smt::shell_means;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PI: f64 = std::f64::consts::PI;

fn tilted_axis() -> UnitDirection {
    UnitDirection::normalized(0.3, -0.5, 0.8).unwrap()
}

#[test]
fn kent_density_integrates_to_one() {
    let quad = fibonacci_sphere::<f64>(10_000);
    let w = 4.0 * PI / quad.len() as f64;
    for kappa in [4.0, 32.0, 128.0] {
        for frac in [0.0, 0.25, 0.5] {
            let p = KentParams::oriented(kappa, frac * kappa, tilted_axis(), 0.4).unwrap();
            let total: f64 = quad.iter().map(|u| kent_pdf(&p, u).unwrap()).sum::<f64>() * w;
            assert!((total - 1.0).abs() < 1e-3, "kappa={kappa} beta/kappa={frac}: integral {total}");
        }
    }
}

#[test]
fn fisher_density_is_symmetric_about_its_axis() {
    let mu = tilted_axis();
    let p = KentParams::oriented(32.0, 0.0, mu, 0.0).unwrap();
    let (e1, e2) = mu.tangent_frame();
    let t = 0.2f64;
    let first = kent_pdf(&p, &UnitDirection::normalized(mu.x + t * e1.x, mu.y + t * e1.y, mu.z + t * e1.z).unwrap()).unwrap();
    for k in 1..12 {
        let a = k as f64 * PI / 6.0;
        let (s, c) = a.sin_cos();
        let v = [
            mu.x + t * (c * e1.x + s * e2.x),
            mu.y + t * (c * e1.y + s * e2.y),
            mu.z + t * (c * e1.z + s * e2.z),
        ];
        let d = kent_pdf(&p, &UnitDirection::normalized(v[0], v[1], v[2]).unwrap()).unwrap();
        assert!((d - first).abs() < 1e-12 * first);
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn fisher_samples_match_inverse_cdf() {
    let mu = tilted_axis();
    let n = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for kappa in [4.0, 32.0, 128.0] {
        let p = KentParams::oriented(kappa, 0.0, mu, 0.0).unwrap();
        let t: Vec<f64> = sample_kent(&p, n, 17).unwrap().iter().map(|x| x.dot(&mu)).collect();
        // F⁻¹(u) for the cosine to the mean axis under von Mises–Fisher.
        let oracle: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa
            })
            .collect();
        let d = ks(t, oracle);
        let crit = 1.628 * (2.0 / n as f64).sqrt();
        assert!(d <= crit, "kappa={kappa}: KS statistic {d} > {crit}");
    }
}

#[test]
fn kent_sample_moments_match_quadrature() {
    // Expectations under the unnormalized density by dense quadrature, so the
    // check does not rely on the normalizing constant.
    let quad = fibonacci_sphere::<f64>(200_000);
    let p = KentParams::oriented(32.0, 12.0, tilted_axis(), 1.1).unwrap();
    let weights: Vec<f64> = quad.iter().map(|u| (p.exponent(u) - p.kappa).exp()).collect();
    let z: f64 = weights.iter().sum();
    let moment = |f: &dyn Fn(&UnitDirection) -> f64| quad.iter().zip(&weights).map(|(u, w)| w * f(u)).sum::<f64>() / z;
    let samples = sample_kent(&p, 20_000, 3).unwrap();
    let stats: [(&str, Box<dyn Fn(&UnitDirection) -> f64>); 3] = [
        ("mu", Box::new(|u: &UnitDirection| u.dot(&p.mu))),
        ("g1^2", Box::new(|u: &UnitDirection| u.dot(&p.gamma1).powi(2))),
        ("g2^2", Box::new(|u: &UnitDirection| u.dot(&p.gamma2).powi(2))),
    ];
    for (name, f) in stats.iter() {
        let expected = moment(f.as_ref());
        let vals: Vec<f64> = samples.iter().map(|u| f(u)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let se = (var / vals.len() as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se + 1e-6, "{name}: sample {mean} vs {expected} (se {se})");
    }
    // β spreads the samples along γ₁ more than along γ₂.
    let m1 = samples.iter().map(|u| u.dot(&p.gamma1).powi(2)).sum::<f64>();
    let m2 = samples.iter().map(|u| u.dot(&p.gamma2).powi(2)).sum::<f64>();
    assert!(m1 > m2);
}

#[test]
fn uniform_kent_samples_pass_chi_square() {
    let p = KentParams::oriented(0.0, 0.0, UnitDirection::unit_z(), 0.0).unwrap();
    let n = 20_000;
    let samples = sample_kent(&p, n, 8).unwrap();
    // 10 equal-width z bands × 10 azimuth sectors are equal-area cells.
    let mut counts = [0usize; 100];
    for u in &samples {
        let zb = (((u.z + 1.0) * 5.0) as usize).min(9);
        let pb = (((u.y.atan2(u.x) + PI) / (2.0 * PI) * 10.0) as usize).min(9);
        counts[zb * 10 + pb] += 1;
    }
    let e = n as f64 / 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99 degrees of freedom, p = 0.001.
    assert!(chi2 < 148.23, "chi-square {chi2}");
}

#[test]
fn concentrated_samples_center_on_the_mean_axis() {
    let mu = tilted_axis();
    let p = KentParams::oriented(128.0, 32.0, mu, 0.0).unwrap();
    let s = sample_kent(&p, 2000, 21).unwrap();
    let mut m = [0.0; 3];
    for u in &s {
        let sign = u.dot(&mu).signum();
        m[0] += sign * u.x;
        m[1] += sign * u.y;
        m[2] += sign * u.z;
    }
    let mean = UnitDirection::normalized(m[0], m[1], m[2]).unwrap();
    assert!(mean.axial_angle_deg(&mu) < 2.0);
}

#[test]
fn kent_rejects_invalid_parameters() {
    assert!(KentParams::oriented(-1.0, 0.0, UnitDirection::unit_z(), 0.0).is_err());
    assert!(KentParams::oriented(4.0, 2.5, UnitDirection::unit_z(), 0.0).is_err());
    let z = UnitDirection::unit_z();
    assert!(KentParams::new(4.0, 1.0, z, z, UnitDirection::unit_x()).is_err());
}

#[test]
fn rician_background_has_rayleigh_mean() {
    let n = 200_000;
    let noisy = add_rician_noise(&vec![0.0; n], 20.0, 4).unwrap();
    let mean = noisy.iter().sum::<f64>() / n as f64;
    let expected = 0.05 * (PI / 2.0).sqrt();
    assert!((mean - expected).abs() < 0.01 * expected, "{mean} vs {expected}");
}

/// Asymptotic expansion of e^{-z} I_ν(z) for large z.
fn scaled_bessel_i(nu: f64, z: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..30 {
        let odd = (2 * k - 1) as f64;
        term *= -(mu - odd * odd) / (k as f64 * 8.0 * z);
        sum += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    sum / (2.0 * PI * z).sqrt()
}

#[test]
fn rician_mean_matches_laguerre_formula() {
    let n = 200_000;
    let sigma: f64 = 0.05;
    let noisy = add_rician_noise(&vec![1.0; n], 1.0 / sigma, 6).unwrap();
    let mean = noisy.iter().sum::<f64>() / n as f64;
    // E = σ√(π/2) L_{1/2}(-A²/2σ²), L_{1/2}(x) = e^{x/2}[(1-x) I₀(-x/2) - x I₁(-x/2)].
    let x = -1.0 / (2.0 * sigma * sigma);
    let h = -x / 2.0;
    let laguerre = (1.0 - x) * scaled_bessel_i(0.0, h) - x * scaled_bessel_i(1.0, h);
    let expected = sigma * (PI / 2.0).sqrt() * laguerre;
    assert!((mean - expected).abs() < 0.005 * expected);
    // The sample error is ~1e-4, tight enough to see the bias above 1.
    assert!((mean - expected).abs() < 4e-4, "{mean} vs {expected}");
}

#[test]
fn infinite_snr_is_noiseless() {
    let s = vec![0.3, 0.7, 1.0];
    assert_eq!(add_rician_noise(&s, f64::INFINITY, 1).unwrap(), s);
    assert!(add_rician_noise(&s, 0.0, 1).is_err());
}

fn voxel(populations: Vec<KentParams>, snr: Option<f64>, seed: u64) -> PhantomVoxelSpec {
    PhantomVoxelSpec {
        populations,
        fractions: VolumeFractions::new(0.7, 0.3, 0.0).unwrap(),
        directions: 100,
        snr,
        seed,
    }
}

#[test]
fn crossing_and_single_fiber_share_shell_means() {
    let scheme = hcp_like_scheme();
    let d = DiffusivitySet::simulation_default();
    let single = voxel(vec![KentParams::oriented(128.0, 0.0, tilted_axis(), 0.0).unwrap()], None, 1);
    let (a, b) = crossing_axes(&tilted_axis(), 60.0).unwrap();
    let cross = voxel(
        vec![KentParams::oriented(128.0, 0.0, a, 0.0).unwrap(), KentParams::oriented(128.0, 0.0, b, 0.0).unwrap()],
        None,
        1,
    );
    let (s1, _) = synth_signal(&single, &scheme, &d).unwrap();
    let (s2, truth) = synth_signal(&cross, &scheme, &d).unwrap();
    assert_eq!(s1[0], 1.0);
    assert_eq!(s2[0], 1.0);
    assert_eq!(truth.fiber_directions.len(), 100);
    assert!(truth.fiber_directions.iter().all(|u| u.z >= 0.0));
    let m1 = shell_means(&s1, &scheme).unwrap();
    let m2 = shell_means(&s2, &scheme).unwrap();
    let mut prev = 1.0;
    for (x, y) in m1.nonzero().zip(m2.nonzero()) {
        assert!((x.mean - y.mean).abs() < 0.01 * x.mean, "b={}: {} vs {}", x.nominal_b, x.mean, y.mean);
        assert!(x.mean < prev);
        prev = x.mean;
    }
}

#[test]
fn synthesis_is_reproducible_per_seed() {
    let scheme = hcp_like_scheme();
    let d = DiffusivitySet::simulation_default();
    let p = vec![KentParams::oriented(32.0, 8.0, tilted_axis(), 0.0).unwrap()];
    let a = synth_signal(&voxel(p.clone(), Some(20.0), 5), &scheme, &d).unwrap().0;
    let b = synth_signal(&voxel(p.clone(), Some(20.0), 5), &scheme, &d).unwrap().0;
    let c = synth_signal(&voxel(p, Some(20.0), 6), &scheme, &d).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn sweeps_have_the_documented_sizes() {
    assert_eq!(fanning_sweep(&FanningSweep::default()).unwrap().len(), 26_730);
    let cross = crossing_sweep(&CrossingSweep::default()).unwrap();
    assert_eq!(cross.len(), 2_970);
    for v in cross.iter().step_by(97) {
        let [a, b] = [v.spec.populations[0].mu, v.spec.populations[1].mu];
        assert!((a.axial_angle_deg(&b) - v.condition.angle_deg).abs() < 1e-9);
    }
}

#[test]
fn orientations_are_well_spread() {
    let d = electrostatic_directions(11).unwrap();
    for i in 0..d.len() {
        for j in 0..i {
            assert!(d[i].axial_angle_deg(&d[j]) > 35.0);
        }
    }
    assert_eq!(d, electrostatic_directions(11).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn samples_are_unit_vectors(kappa in 0.0f64..200.0, frac in 0.0f64..0.5, seed in any::<u64>()) {
        let p = KentParams::oriented(kappa, frac * kappa, tilted_axis(), 0.3).unwrap();
        for u in sample_kent(&p, 50, seed).unwrap() {
            prop_assert!(((u.x * u.x + u.y * u.y + u.z * u.z) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rician_output_is_non_negative(seed in any::<u64>(), snr in 1.0f64..100.0) {
        let out = add_rician_noise(&[0.0, 0.1, 0.5, 1.0], snr, seed).unwrap();
        prop_assert!(out.iter().all(|&v| v >= 0.0));
    }
}
