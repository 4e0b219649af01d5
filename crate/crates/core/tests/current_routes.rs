use iwatsuka::bands::{compute_bands, compute_bands_with, BandTable, XiGrid};
use iwatsuka::current::{
    energy_concentration_check, evolve_velocity, theta_band, theta_by_parts, theta_fiber, ChiProfile,
};
use iwatsuka::fields::{MagneticField, Profile};
use iwatsuka::spectral::WindowOptions;
use iwatsuka::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tanh_table(j_max: usize) -> BandTable {
    let field = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
    compute_bands(&field, &XiGrid::default_for(2.0), j_max).unwrap()
}

fn random_profiles(seed: u64, count: usize) -> Vec<ChiProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let center = rng.random_range(-6.0..6.0);
            let width = rng.random_range(0.6..3.0);
            let amplitude = rng.random_range(0.2..2.0);
            if i % 2 == 0 {
                ChiProfile::smooth_bump(center, width, amplitude)
            } else {
                ChiProfile::raised_cosine(center, width, amplitude, Some(0.5 * width))
            }
        })
        .collect()
}

#[test]
fn all_routes_agree_on_random_profiles() {
    let table = tanh_table(1);
    let d = table.xi_grid.spacing();
    let tol = 1e-4f64.max(10.0 * d * d);
    for chi in random_profiles(5, 20) {
        let fiber = theta_fiber(&table, &chi).unwrap().theta;
        let routes = [
            fiber,
            theta_band(&table, &chi).unwrap().theta,
            theta_by_parts(&table, &chi).unwrap().theta,
            evolve_velocity(&table, &chi, &[0.0]).unwrap()[0],
        ];
        for a in &routes {
            for b in &routes {
                assert!((a - b).abs() <= tol * (1.0 + fiber.abs()), "{chi:?}: {routes:?}");
            }
        }
        assert!((routes[3] - fiber).abs() < 1e-10);
    }
}

#[test]
fn routes_tighten_on_a_fine_table() {
    // On δξ = 0.02 the other routes meet the fiber quadrature at the floor
    // set by the raised cosine's jump in χ''.
    let field = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
    let table = compute_bands(&field, &XiGrid::new(-8.0, 8.0, 801).unwrap(), 1).unwrap();
    for chi in random_profiles(9, 6) {
        let fiber = theta_fiber(&table, &chi).unwrap().theta;
        assert!((theta_band(&table, &chi).unwrap().theta - fiber).abs() < 1e-4 * (1.0 + fiber.abs()));
        assert!((theta_by_parts(&table, &chi).unwrap().theta - fiber).abs() < 1e-4 * (1.0 + fiber.abs()));
    }
}

#[test]
fn evolution_is_time_independent() {
    let table = tanh_table(1);
    for chi in random_profiles(3, 5) {
        let v = evolve_velocity(&table, &chi, &[0.0, 0.5, 1.0, 5.0]).unwrap();
        let spread = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x))
            - v.iter().fold(f64::INFINITY, |m, x| m.min(*x));
        assert!(spread <= 1e-12, "{v:?}");
    }
    assert!(evolve_velocity(&table, &random_profiles(1, 1)[0], &[-1.0]).is_err());
}

#[test]
fn wide_profile_carries_the_total_band_rise() {
    let table = tanh_table(1);
    let edge = table.xi_grid.xi_max;
    let chi = ChiProfile::raised_cosine(0.0, edge - 1.0, 1.0, Some(1.0));
    let theta = theta_fiber(&table, &chi).unwrap().theta;
    assert!((theta - 1.0).abs() < 5e-2, "{theta}");
}

#[test]
fn current_is_quadratic_in_the_profile() {
    let table = tanh_table(1);
    let chi = ChiProfile::smooth_bump(0.3, 1.5, 1.0);
    let double = ChiProfile {
        amplitude: 2.0,
        ..chi
    };
    let (one, two) = (
        theta_fiber(&table, &chi).unwrap().theta,
        theta_fiber(&table, &double).unwrap().theta,
    );
    assert!((two - 4.0 * one).abs() <= 1e-10 * two.abs());
}

#[test]
fn constant_field_carries_no_current() {
    let field = MagneticField::constant(1.0).unwrap();
    let table = compute_bands(&field, &XiGrid::new(-10.0, 10.0, 101).unwrap(), 3).unwrap();
    for chi in random_profiles(2, 4) {
        assert!(theta_fiber(&table, &chi).unwrap().theta.abs() < 1e-6);
        assert!(theta_band(&table, &chi).unwrap().theta.abs() < 1e-8);
        assert!(evolve_velocity(&table, &chi, &[0.0, 2.0])
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-6));
    }
    // λ₁ ≡ b sits on the closed band; the default tolerance accepts it.
    let report = energy_concentration_check(&table, &random_profiles(2, 1)[0], 1e-3).unwrap();
    assert!(report.escapes.is_empty());
}

#[test]
fn tanh_states_stay_in_the_first_band() {
    let table = tanh_table(3);
    for chi in random_profiles(8, 5) {
        let report = energy_concentration_check(&table, &chi, 2e-3).unwrap();
        assert!(report.passes(), "{report:?}");
        assert!(report.higher_band_fraction < 1e-16);
    }
}

#[test]
fn gap_violation_is_reported_as_overlap() {
    let field = MagneticField::new(
        1.0,
        3.5,
        Profile::Tanh {
            center: 0.0,
            scale: 1.0,
        },
        true,
    )
    .unwrap();
    let table = compute_bands_with(
        &field,
        &XiGrid::new(-12.0, 12.0, 49).unwrap(),
        3,
        &WindowOptions::default(),
    )
    .unwrap();
    let report = energy_concentration_check(&table, &ChiProfile::smooth_bump(0.0, 10.0, 1.0), 1e-3).unwrap();
    assert!(!report.passes());
    assert!(report.certificate.overlap() > 0.0);
}

#[test]
fn profile_outside_the_table_is_rejected() {
    let table = tanh_table(1);
    let chi = ChiProfile::smooth_bump(11.0, 1.0, 1.0);
    assert!(matches!(
        theta_fiber(&table, &chi),
        Err(Error::SupportOutsideTable { .. })
    ));
}
