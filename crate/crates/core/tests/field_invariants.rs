use iwatsuka::fields::{perturb, MagneticField, PerturbationW};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn families() -> Vec<MagneticField> {
    vec![
        MagneticField::constant(1.3).unwrap(),
        MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap(),
        MagneticField::tanh(0.8, 2.0, -1.5, 0.3).unwrap(),
        MagneticField::smoothed_step(1.0, 2.0, 0.5, 2.0).unwrap(),
        MagneticField::step(1.0, 2.0, 0.0).unwrap(),
        MagneticField::piecewise_linear(1.0, 2.5, vec![(-2.0, 1.0), (0.0, 1.5), (0.0, 2.0), (1.0, 2.5)])
            .unwrap(),
        perturb(
            &MagneticField::step(1.0, 2.0, 0.0).unwrap(),
            PerturbationW::new(0.2, vec![0.05]).unwrap(),
        )
        .unwrap(),
    ]
}

#[test]
fn every_family_is_monotone_and_bracketed_on_dense_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for field in families() {
        let mut xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-30.0..30.0)).collect();
        xs.sort_by(f64::total_cmp);
        let bs: Vec<f64> = xs.iter().map(|&x| field.eval_b(x)).collect();
        for w in bs.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{:?}: b decreases", field.kind());
        }
        for b in &bs {
            assert!(*b >= field.b_minus() - 1e-12 && *b <= field.b_plus() + 1e-12);
        }
    }
}

#[test]
fn potentials_vanish_at_origin_unless_perturbed_there() {
    for field in families() {
        let expected = field.perturbation().map_or(0.0, |w| w.w(0.0));
        assert_eq!(field.eval_a(0.0), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn potential_obeys_mean_value_bounds(x in -40.0f64..40.0, y in -40.0f64..40.0, idx in 0usize..6) {
        let field = &families()[idx];
        let (lo, hi) = (x.min(y), x.max(y));
        let rise = field.eval_a(hi) - field.eval_a(lo);
        let span = hi - lo;
        prop_assert!(rise >= field.b_minus() * span - 1e-9 * (1.0 + span));
        prop_assert!(rise <= field.b_plus() * span + 1e-9 * (1.0 + span));
    }

    #[test]
    fn closed_form_matches_quadrature(x in -15.0f64..15.0, idx in 0usize..7) {
        let field = &families()[idx];
        prop_assert!((field.eval_a(x) - field.eval_a_quadrature(x) - field.eval_a(0.0)).abs() < 1e-9);
    }

    #[test]
    fn perturbation_is_supported_in_its_radius(
        r in 0.05f64..1.0,
        coeffs in prop::collection::vec(-1.0f64..1.0, 1..8),
        x in -3.0f64..3.0,
    ) {
        let w = PerturbationW::new(r, coeffs).unwrap();
        if x.abs() >= r {
            prop_assert_eq!(w.w(x), 0.0);
            prop_assert_eq!(w.w_slope(x), 0.0);
        }
        prop_assert_eq!(w.w(-r), 0.0);
    }

    #[test]
    fn inverse_potential_round_trips(target in -60.0f64..60.0, idx in 0usize..7) {
        let field = &families()[idx];
        let x = field.inverse_a(target);
        prop_assert!((field.eval_a(x) - target).abs() < 1e-10 * (1.0 + target.abs()));
    }
}
