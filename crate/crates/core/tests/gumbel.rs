use rand::Rng;
use underq_core::gumbel::*;
use underq_core::rng;

/// Naive `beta * ln(sum w exp(q / beta))`, fine for moderate inputs.
fn naive_lse(q: &[f64], w: &[f64], beta: f64) -> f64 {
    beta * q.iter().zip(w).map(|(q, w)| w * (q / beta).exp()).sum::<f64>().ln()
}

fn random_weights(n: usize, r: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[test]
fn soft_max_reference_values() {
    let v = soft_max_uniform(&[0.0, 1.0], 1e-4).unwrap();
    assert!((v - 1.0).abs() < 1e-3, "{v}");
    let v = soft_max_uniform(&[0.0, 1.0], 1.0).unwrap();
    assert!((v - ((1.0 + 1f64.exp()) / 2.0).ln()).abs() < 1e-12);
    assert!((v - 0.62011).abs() < 1e-5);
}

#[test]
fn soft_max_matches_naive_summation() {
    let mut r = rng::stream(1, &[]);
    for _ in 0..200 {
        let n = r.random_range(1..8);
        let q: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let w = random_weights(n, &mut r);
        let beta = r.random_range(0.2..3.0);
        let got = soft_max_operator(&q, &w, beta).unwrap();
        assert!((got - naive_lse(&q, &w, beta)).abs() < 1e-10);
    }
}

#[test]
fn soft_max_shift_monotone_and_sandwiched() {
    let mut r = rng::stream(2, &[]);
    for _ in 0..100 {
        let n = r.random_range(2..6);
        let q: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let w = random_weights(n, &mut r);
        let beta = r.random_range(0.01..5.0);
        let base = soft_max_operator(&q, &w, beta).unwrap();

        let c = r.random_range(-50.0..50.0);
        let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
        assert!((soft_max_operator(&shifted, &w, beta).unwrap() - base - c).abs() < 1e-9);

        let i = r.random_range(0..n);
        let mut up = q.clone();
        up[i] += r.random_range(0.0..1.0);
        assert!(soft_max_operator(&up, &w, beta).unwrap() >= base - 1e-12);

        let mean: f64 = q.iter().zip(&w).map(|(q, w)| q * w).sum();
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let wmin = w.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(mean <= base + 1e-12);
        assert!(base <= max + beta * (1.0 / wmin).ln() + 1e-12);
    }
}

/// With normalised weights the operator moves from the max (small beta) to the
/// weighted mean (large beta).
#[test]
fn soft_max_non_increasing_in_temperature() {
    let mut r = rng::stream(3, &[]);
    for _ in 0..100 {
        let q: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let b1 = r.random_range(0.05..2.0);
        let b2 = b1 + r.random_range(0.0..2.0);
        assert!(soft_max_uniform(&q, b1).unwrap() >= soft_max_uniform(&q, b2).unwrap() - 1e-12);
    }
}

#[test]
fn closed_form_reference_values() {
    assert!((theorem1_bound(7, 7, 0.3, 1.0).unwrap() - 0.57722).abs() < 1e-5);
    assert!((theorem1_bound(5, 3, 0.9, 1.0).unwrap() - 1.40263).abs() < 1e-5);
    assert!((theorem1_bound(10, 1, 1.0, 2.0).unwrap() - 11.5443).abs() < 1e-4);
    assert!((theorem2_bound(4, 4, 0.9, 1.0).unwrap() - 1.15443).abs() < 1e-5);
    assert!((theorem2_bound(5, 3, 0.9, 1.0).unwrap() - 1.87018).abs() < 1e-5);
    assert!(theorem1_bound(5, 6, 0.9, 1.0).is_err());
    assert!(theorem1_bound(5, 0, 0.9, 1.0).is_err());
}

#[test]
fn small_grid_agrees_with_closed_forms() {
    for horizon in 1..=4 {
        for gamma in [0.5, 0.9] {
            for beta in [0.5, 2.0] {
                let spec = NestedChainSpec::new(horizon, beta, gamma).with_samples(100_000).with_seed(4);
                let est = simulate_nested_chain(&spec).unwrap();
                for l in &est.levels {
                    let t = l.t;
                    let q1 = theorem1_bound(horizon, t, gamma, beta).unwrap();
                    let q2 = theorem2_bound(horizon, t, gamma, beta).unwrap();
                    assert!((l.q_bias - q1).abs() <= 3.0 * l.q_se, "T={horizon} t={t} {} vs {q1}", l.q_bias);
                    assert!((l.v_bias - q2).abs() <= 3.0 * l.v_se, "T={horizon} t={t} {} vs {q2}", l.v_bias);
                    let (res, se) = theorem3_mc(&spec, &est, t).unwrap();
                    assert!(res.abs() <= 3.0 * se);
                }
            }
        }
    }
}

#[test]
fn fitted_mean_mode_agrees_with_closed_forms() {
    let spec =
        NestedChainSpec::new(5, 1.0, 0.9).with_samples(200_000).with_seed(8).with_mode(EstimatorMode::FittedMean);
    let est = simulate_nested_chain(&spec).unwrap();
    for l in &est.levels {
        assert!((l.q_bias - l.closed_form_q).abs() <= 3.0 * l.q_se, "t={} {} vs {}", l.t, l.q_bias, l.closed_form_q);
        assert!((l.v_bias - l.closed_form_v).abs() <= 3.0 * l.v_se);
    }
}

#[test]
fn theorem3_identity_is_exact() {
    let mut r = rng::stream(5, &[]);
    for _ in 0..200 {
        let horizon = r.random_range(1..12);
        let gamma = if r.random::<f64>() < 0.1 { 1.0 } else { r.random_range(0.1..1.0) };
        let beta = r.random_range(0.1..3.0);
        let rewards = (0..horizon).map(|_| r.random_range(0.0..1.0)).collect();
        let spec = NestedChainSpec::new(horizon, beta, gamma).with_rewards(rewards);
        let t = r.random_range(1..=horizon);
        assert!(theorem3_consistency(&spec, t).unwrap() < 1e-9);
    }
}

/// Root of `f'(x) ∝ 1 + x ln(gamma)` by bisection.
fn argmax_by_bisection(gamma: f64) -> f64 {
    let deriv = |x: f64| 1.0 + x * gamma.ln();
    let (mut lo, mut hi) = (0.0, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn error_curve_argmax_and_shape() {
    let x = error_curve_argmax(0.99).unwrap();
    assert!((x - 99.4992).abs() < 1e-4);
    for gamma in [0.5, 0.9, 0.95, 0.99] {
        assert!((error_curve_argmax(gamma).unwrap() - argmax_by_bisection(gamma)).abs() < 1e-8);
    }
    assert!(error_curve_argmax(1.0).is_err());

    let p = ErrorCurveParams::new(2.5, 0.95, 1, 0.0).unwrap();
    assert_eq!(error_curve(&p), 0.0);
    let f: Vec<f64> = (0..=500).map(|x| error_curve(&p.at(x as f64))).collect();
    let peak = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    // 20 * 0.95 = 19, so f(19) = f(20) up to rounding
    assert!(f[..=peak].windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
    assert!(f[peak..].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    assert!((peak as f64 - 19.4957).abs() <= 1.0);
    assert!(f[500] < 1e-6 * 2.5);
}

#[test]
fn error_curve_concave_below_twice_the_argmax() {
    for gamma in [0.9, 0.95, 0.99] {
        let x_star = error_curve_argmax(gamma).unwrap();
        let p = ErrorCurveParams::new(1.0, gamma, 2, 0.0).unwrap();
        let h = 1e-3;
        let n = 50;
        for i in 1..n {
            let x = 2.0 * x_star * i as f64 / n as f64;
            let d2 = (error_curve(&p.at(x + h)) - 2.0 * error_curve(&p.at(x)) + error_curve(&p.at(x - h))) / (h * h);
            assert!(d2 < 0.0, "gamma {gamma} x {x}: {d2}");
        }
        let beyond = 2.5 * x_star;
        let d2 = error_curve(&p.at(beyond + 1.0)) - 2.0 * error_curve(&p.at(beyond)) + error_curve(&p.at(beyond - 1.0));
        assert!(d2 > 0.0);
    }
}
