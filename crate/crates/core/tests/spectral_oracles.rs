use iwatsuka::fields::{MagneticField, VectorPotential};
use iwatsuka::spectral::{
    assemble, choose_window, choose_window_with, l2_inner, lowest_eigenpairs, solve_fiber, WindowOptions,
};

/// λ₁(0) of the tanh field (1, 2, centre 0, scale 1), extrapolated from
/// n ∈ {1000, 2000, 4000} on [−12, 12] with an independent dense tridiagonal
/// solver and an `h², h⁴` fit.
const TANH_GROUND_AT_ZERO: f64 = 1.4644595203679611;

fn tanh() -> MagneticField {
    MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap()
}

#[test]
fn landau_levels_for_several_fields_and_momenta() {
    for b in [0.5, 1.0, 2.0] {
        let field = MagneticField::constant(b).unwrap();
        for xi in [-3.0, 0.0, 1.7] {
            let fiber = solve_fiber(&field, xi, 3, &WindowOptions::default()).unwrap();
            for (j, l) in fiber.lambdas().iter().enumerate() {
                let exact = (2 * j + 1) as f64 * b;
                assert!(
                    ((l - exact) / exact).abs() < 1e-4,
                    "b={b} ξ={xi} j={}: {l}",
                    j + 1
                );
            }
        }
    }
}

#[test]
fn tanh_ground_energy_matches_extrapolated_oracle() {
    let field = tanh();
    let mut samples = Vec::new();
    for n in [1000, 2000, 4000] {
        let opts = WindowOptions::with_n(n);
        let grid = choose_window_with(&field, 0.0, 1, &opts).unwrap();
        let l = lowest_eigenpairs(&assemble(&field, 0.0, grid), 1).unwrap()[0].lambda;
        assert!((1.0..=2.0).contains(&l));
        samples.push((grid.h, l));
    }
    // Solve λ(h) = λ* + c₂h² + c₄h⁴ through the three samples.
    let m = nalgebra::Matrix3::from_fn(|i, j| samples[i].0.powi(2 * j as i32));
    let rhs = nalgebra::Vector3::new(samples[0].1, samples[1].1, samples[2].1);
    let extrapolated = m.lu().solve(&rhs).unwrap()[0];
    assert!(
        (extrapolated - TANH_GROUND_AT_ZERO).abs() < 1e-9,
        "{extrapolated}"
    );
    // The default mesh sits within its O(h²) error of the limit.
    assert!((samples[1].1 - TANH_GROUND_AT_ZERO).abs() < 5e-5);
}

#[test]
fn eigenvectors_are_orthonormal() {
    for field in [tanh(), MagneticField::step(1.0, 2.0, 0.0).unwrap()] {
        let fiber = solve_fiber(&field, 0.8, 8, &WindowOptions::default()).unwrap();
        let h = fiber.grid().h;
        for (i, p) in fiber.pairs.iter().enumerate() {
            for (j, q) in fiber.pairs.iter().enumerate() {
                let g = l2_inner(h, &p.phi, &q.phi);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-8, "Gram[{i},{j}] = {g}");
            }
        }
        assert!(fiber.ground().phi.iter().all(|&v| v >= -1e-12));
    }
}

#[test]
fn ground_energy_converges_at_second_order() {
    // Halving h should cut the error by about four.
    let field = tanh();
    let errs: Vec<f64> = [500, 1001, 2003]
        .iter()
        .map(|&n| {
            let grid = choose_window_with(&field, 0.0, 1, &WindowOptions::with_n(n)).unwrap();
            lowest_eigenpairs(&assemble(&field, 0.0, grid), 1).unwrap()[0].lambda - TANH_GROUND_AT_ZERO
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn mirrored_diagonals_for_odd_potential() {
    let field = MagneticField::constant(1.0).unwrap();
    for xi in [0.6, 2.5] {
        let plus = assemble(&field, xi, choose_window(&field, xi, 2).unwrap());
        let minus = assemble(&field, -xi, choose_window(&field, -xi, 2).unwrap());
        assert_eq!(plus.grid.n, minus.grid.n);
        for (a, b) in plus.diag.iter().zip(minus.diag.iter().rev()) {
            assert!((a - b).abs() < 1e-9 * a.abs());
        }
    }
}

#[test]
fn constant_field_ground_energy_is_translation_invariant() {
    let field = MagneticField::constant(2.0).unwrap();
    let l = solve_fiber(&field, 1.7, 1, &WindowOptions::default())
        .unwrap()
        .lambdas()[0];
    assert!(((l - 2.0) / 2.0).abs() < 1e-4);
}

#[test]
fn window_margin_holds_at_both_ends() {
    let field = tanh();
    let (_, b_plus) = field.field_bounds();
    for xi in [-20.0, -3.0, 0.0, 4.0, 25.0] {
        for k in [1, 3, 12] {
            let g = choose_window(&field, xi, k).unwrap();
            let need = ((2 * k + 1) as f64 + 25.0) * b_plus;
            assert!((xi - field.eval_a(g.x_left)).powi(2) >= need);
            assert!((xi - field.eval_a(g.x_right)).powi(2) >= need);
        }
    }
}
