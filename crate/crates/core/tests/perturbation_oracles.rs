use iwatsuka::fields::{perturb, MagneticField, PerturbationW};
use iwatsuka::perturbation::{
    a2_contour, a2_sum, epsilon_star_uniform, f_xi, fit_series, kappa_window, projection_contour,
    ContourSpec, FiberPerturbation,
};
use iwatsuka::spectral::{assemble, choose_window, l2_inner, lowest_eigenpairs};
use iwatsuka::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn step() -> MagneticField {
    MagneticField::step(1.0, 2.0, 0.0).unwrap()
}

fn hat(r: f64, height: f64) -> PerturbationW {
    PerturbationW::new(r, vec![height]).unwrap()
}

fn spec() -> ContourSpec {
    ContourSpec::default_for(1.0, 2.0).unwrap()
}

/// Enough eigenpairs that the truncated A₂ sum is converged below 1e-6
/// relative; the hat's kinks make the coefficients decay only algebraically.
const J_CONVERGED: usize = 800;

#[test]
fn contour_projection_matches_rank_one_projection() {
    for field in [step(), MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap()] {
        for xi in [-1.0, 0.3, 2.0] {
            let op = assemble(&field, xi, choose_window(&field, xi, 2).unwrap());
            let pairs = lowest_eigenpairs(&op, 2).unwrap();
            let h = op.grid.h;
            let p = projection_contour(&op, pairs[0].lambda, &spec()).unwrap();
            let err = |got: &[f64], want: &[f64]| {
                got.iter()
                    .zip(want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            };
            assert!(err(&p.apply(&pairs[0].phi), &pairs[0].phi) < 1e-8);
            assert!(err(&p.apply(&pairs[1].phi), &vec![0.0; op.grid.n]) < 1e-8);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..10 {
                let u: Vec<f64> = (0..op.grid.n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = l2_inner(h, &pairs[0].phi, &u);
                let want: Vec<f64> = pairs[0].phi.iter().map(|p| c * p).collect();
                assert!(err(&p.apply(&u), &want) < 1e-8);
            }
        }
    }
}

#[test]
fn contour_enclosing_two_eigenvalues_is_rejected() {
    let field = step();
    let op = assemble(&field, 0.0, choose_window(&field, 0.0, 2).unwrap());
    let l = lowest_eigenpairs(&op, 1).unwrap()[0].lambda;
    let wide = ContourSpec { rho: 3.0, nodes: 64 };
    assert!(matches!(
        projection_contour(&op, l, &wide),
        Err(Error::Contour(_))
    ));
}

#[test]
fn zero_perturbation_gives_zero_series() {
    let w = PerturbationW::zero(0.2, 2);
    let v = f_xi(&step(), &w, 0.4, 1e-2, &spec()).unwrap();
    assert_eq!(v.value, 0.0);
    assert_eq!(a2_sum(&step(), &w, 0.4, 8).unwrap().value, 0.0);
}

#[test]
fn eigenvalue_shift_obeys_the_sup_norm_bound() {
    let field = step();
    let w = hat(0.2, 0.05);
    for xi in [-0.5, 0.0, 0.5, 2.0] {
        let setup = FiberPerturbation::new(&field, &w, xi, &spec()).unwrap();
        for eps in [1e-3, 1e-2, 1e-1] {
            let v = setup.evaluate(eps).unwrap();
            assert!(v.ell_sup <= eps * v.c_bound * (1.0 + 1e-12));
            assert!((v.lambda_eps - v.lambda1).abs() <= eps * v.c_bound);
        }
    }
}

#[test]
fn epsilon_above_threshold_is_rejected() {
    let field = step();
    let w = hat(0.2, 0.05);
    let setup = FiberPerturbation::new(&field, &w, 0.0, &spec()).unwrap();
    let too_big = setup.epsilon_star * 1.5;
    assert!(matches!(
        setup.evaluate(too_big),
        Err(Error::EpsilonOutOfRange { .. })
    ));
    let eps = epsilon_star_uniform(&field, &w, &[-1.0, 0.0, 1.0], &spec());
    assert!(eps > 0.0 && eps <= 1.0);
}

#[test]
fn first_coefficient_matches_direct_quadrature() {
    let field = step();
    let w = hat(0.2, 0.05);
    let setup = FiberPerturbation::new(&field, &w, 0.3, &spec()).unwrap();
    // ∫ ω φ₁² with ω = −2(ξ − a)w.
    let nodes = setup.op.grid.nodes();
    let direct: f64 = setup.op.grid.h
        * nodes
            .iter()
            .zip(&setup.phi1)
            .map(|(&x, p)| -2.0 * (0.3 - field.eval_a(x)) * w.w(x) * p * p)
            .sum::<f64>();
    assert!((setup.first_coefficient() - direct).abs() < 1e-14);
    let eps = 1e-5;
    let ratio = setup.evaluate(eps).unwrap().value / eps;
    assert!((ratio - direct).abs() < 1e-3 * direct.abs() + 1e-9);
}

#[test]
fn second_coefficient_agrees_across_three_routes() {
    let field = step();
    let w = hat(0.2, 0.05);
    let epsilons: Vec<f64> = (1..=10).map(|k| k as f64 * 1e-3).collect();
    for xi in [-0.2, 0.1, 0.6] {
        let setup = FiberPerturbation::new(&field, &w, xi, &spec()).unwrap();
        let values: Vec<f64> = epsilons
            .iter()
            .map(|&e| setup.evaluate(e).unwrap().value)
            .collect();
        let fit = fit_series(&epsilons, &values, 4).unwrap();
        let sum = a2_sum(&field, &w, xi, J_CONVERGED).unwrap();
        let contour = setup.a2_contour().unwrap();
        assert!((fit[0] - sum.first_coefficient).abs() < 1e-8 * (1.0 + fit[0].abs()));
        assert!(
            ((fit[1] - sum.value) / sum.value).abs() < 1e-4,
            "ξ={xi}: fit {} sum {}",
            fit[1],
            sum.value
        );
        assert!(
            ((contour - sum.value) / sum.value).abs() < 1e-6,
            "ξ={xi}: contour {contour} sum {}",
            sum.value
        );
        // The omitted terms are positive and bounded by the tail estimate.
        assert!(contour <= sum.value && contour >= sum.value - sum.tail_bound);
        assert!((a2_contour(&field, &w, xi, &spec()).unwrap() - contour).abs() < 1e-14);
    }
}

#[test]
fn a2_is_coercive_on_the_kappa_window() {
    let field = step();
    let kappa = 0.75;
    let w = hat(0.1, 0.05);
    assert!(perturb(&field, w.clone()).is_ok());
    let (lo, hi) = kappa_window(1.0, 2.0, 0.1, kappa).unwrap();
    assert!((hi - 0.05).abs() < 1e-12 && lo == -hi);
    for k in 0..=10 {
        let xi = lo + (hi - lo) * (0.02 + 0.96 * k as f64 / 10.0);
        let s = a2_sum(&field, &w, xi, 40).unwrap();
        assert!(s.value >= kappa * s.w_phi_norm_sq - s.tail_bound, "ξ={xi}: {s:?}");
    }
}
