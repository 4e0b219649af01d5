//! Quadrature rules shared by the field primitives and the current functionals.

/// Abscissae of the 15-point Kronrod rule on [-1, 1] (non-negative half).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
/// Weights of the embedded 7-point Gauss rule (nodes XGK[1], XGK[3], XGK[5], XGK[7]).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error_estimate: f64,
}

fn gauss_kronrod_15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod (G7/K15) quadrature of `f` over `[a, b]`.
///
/// Intervals are bisected until each local error estimate falls below its
/// share of `abs_tol` (proportional to its length). `breakpoints` inside
/// `(a, b)` are honoured as initial panel boundaries, which is how callers
/// hand over known jump locations.
pub fn adaptive_gauss_kronrod<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    abs_tol: f64,
) -> QuadResult {
    if a == b {
        return QuadResult {
            value: 0.0,
            error_estimate: 0.0,
        };
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut edges = vec![lo];
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&p| p > lo && p < hi)
        .collect();
    inner.sort_by(f64::total_cmp);
    edges.extend(inner);
    edges.push(hi);

    let total = hi - lo;
    let mut value = 0.0;
    let mut error = 0.0;
    let mut stack: Vec<(f64, f64, u32)> = edges.windows(2).map(|w| (w[0], w[1], 0)).collect();
    stack.reverse();
    while let Some((l, r, depth)) = stack.pop() {
        if r <= l {
            continue;
        }
        let (v, e) = gauss_kronrod_15(&f, l, r);
        let share = abs_tol * (r - l) / total;
        if e <= share || depth >= 60 || r - l <= 4.0 * f64::EPSILON * l.abs().max(r.abs()) {
            value += v;
            error += e;
        } else {
            let m = 0.5 * (l + r);
            stack.push((m, r, depth + 1));
            stack.push((l, m, depth + 1));
        }
    }
    QuadResult {
        value: sign * value,
        error_estimate: error,
    }
}

/// Composite Simpson rule on uniformly spaced samples.
///
/// An odd number of intervals is handled with Simpson's 3/8 rule on the last
/// three. Needs at least two samples; two samples fall back to the trapezoid.
pub fn simpson_uniform(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * dx * (values[0] + values[1]),
        3 => dx / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        _ => {
            let intervals = n - 1;
            if intervals.is_multiple_of(2) {
                simpson_even(values, dx)
            } else {
                let head = &values[..n - 3];
                let tail = &values[n - 4..];
                let three_eighths = 3.0 * dx / 8.0 * (tail[0] + 3.0 * tail[1] + 3.0 * tail[2] + tail[3]);
                let head_value = if head.len() >= 3 {
                    simpson_even(head, dx)
                } else {
                    0.0
                };
                head_value + three_eighths
            }
        }
    }
}

fn simpson_even(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    debug_assert!(n % 2 == 1);
    let mut odd = 0.0;
    let mut even = 0.0;
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        if i % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    dx / 3.0 * (values[0] + values[n - 1] + 4.0 * odd + 2.0 * even)
}

/// Simpson value together with a step-halving error estimate `|S_h - S_2h| / 15`.
///
/// The coarse rule uses every other sample; when the sample count does not
/// allow it the estimate falls back to the Simpson–trapezoid difference.
pub fn simpson_with_estimate(values: &[f64], dx: f64) -> QuadResult {
    let fine = simpson_uniform(values, dx);
    let n = values.len();
    let error_estimate = if n >= 5 && (n - 1).is_multiple_of(2) {
        let coarse: Vec<f64> = values.iter().step_by(2).copied().collect();
        (fine - simpson_uniform(&coarse, 2.0 * dx)).abs() / 15.0
    } else {
        (fine - trapezoid_uniform(values, dx)).abs()
    };
    QuadResult {
        value: fine,
        error_estimate,
    }
}

/// Weights `w` with `Σ wᵢ fᵢ = simpson_uniform(f, dx)` for `n` samples.
pub fn simpson_weights(n: usize, dx: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            simpson_uniform(&e, dx)
        })
        .collect()
}

pub fn trapezoid_uniform(values: &[f64], dx: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dx * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Running trapezoid integral of `y` over the (possibly non-uniform) nodes `x`,
/// starting from zero at `x[0]`.
pub fn cumulative_trapezoid(x: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len());
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    if !x.is_empty() {
        out.push(0.0);
    }
    for i in 1..x.len() {
        acc += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kronrod_integrates_polynomials_exactly() {
        let r = adaptive_gauss_kronrod(|x| x.powi(7) - 3.0 * x * x, -1.0, 2.0, &[], 1e-14);
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0);
        assert_abs_diff_eq!(r.value, exact, epsilon = 1e-13);
    }

    #[test]
    fn kronrod_handles_jump_with_breakpoint() {
        let step = |x: f64| if x < 0.3 { 1.0 } else { 2.0 };
        let r = adaptive_gauss_kronrod(step, 0.0, 1.0, &[0.3], 1e-13);
        assert_abs_diff_eq!(r.value, 0.3 + 1.4, epsilon = 1e-13);
        let r = adaptive_gauss_kronrod(step, 0.0, 1.0, &[], 1e-12);
        assert_abs_diff_eq!(r.value, 1.7, epsilon = 1e-11);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let r = adaptive_gauss_kronrod(f64::exp, 1.0, 0.0, &[], 1e-13);
        assert_abs_diff_eq!(r.value, 1.0 - std::f64::consts::E, epsilon = 1e-13);
    }

    #[test]
    fn simpson_exact_for_cubics_even_and_odd_counts() {
        for n in [3usize, 4, 5, 8, 11] {
            let dx = 2.0 / (n - 1) as f64;
            let v: Vec<f64> = (0..n)
                .map(|i| {
                    let x = -1.0 + dx * i as f64;
                    x * x * x + 2.0 * x * x
                })
                .collect();
            assert_abs_diff_eq!(simpson_uniform(&v, dx), 4.0 / 3.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn simpson_weights_reproduce_rule() {
        for n in [2usize, 3, 4, 7, 10] {
            let v: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).sin()).collect();
            let w = simpson_weights(n, 0.3);
            let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(dot, simpson_uniform(&v, 0.3), epsilon = 1e-15);
        }
    }

    #[test]
    fn cumulative_trapezoid_of_linear_is_exact() {
        let x = [0.0, 0.5, 1.5, 2.0];
        let y: Vec<f64> = x.iter().map(|t| 3.0 * t + 1.0).collect();
        let c = cumulative_trapezoid(&x, &y);
        for (xi, ci) in x.iter().zip(&c) {
            assert_abs_diff_eq!(*ci, 1.5 * xi * xi + xi, epsilon = 1e-14);
        }
    }
}
