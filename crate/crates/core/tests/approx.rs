use rand::Rng;
use underq_core::approx::*;
use underq_core::rng;

fn random_batch(rows: usize, cols: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[]);
    Batch::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `0.5 * sum_r ||y_r - t_r||^2`, so `dL/dy = y - t`.
fn half_sq_loss(params: &ParamSet, spec: &MlpSpec, x: &Batch, t: &Batch) -> f64 {
    let y = forward(params, spec, x).unwrap();
    0.5 * y.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

fn fd_check(activation: Activation, seed: u64) {
    let spec = MlpSpec::new(4, 2, vec![6, 5, 4], activation).unwrap();
    let params = ParamSet::init(&spec, seed);
    let x = random_batch(5, 4, seed + 100);
    let t = random_batch(5, 2, seed + 200);
    let y = forward(&params, &spec, &x).unwrap();
    let up = Batch::from_vec(5, 2, y.data().iter().zip(t.data()).map(|(a, b)| a - b).collect()).unwrap();
    let g = backward(&params, &spec, &x, &up).unwrap();

    let mut r = rng::stream(seed, &[9]);
    let h = 1e-6;
    let mut probed = 0;
    while probed < 20 {
        let i = r.random_range(0..params.len());
        let (mut plus, mut minus) = (params.clone(), params.clone());
        plus.values_mut()[i] += h;
        minus.values_mut()[i] -= h;
        let fd = (half_sq_loss(&plus, &spec, &x, &t) - half_sq_loss(&minus, &spec, &x, &t)) / (2.0 * h);
        // ReLU kinks make tiny gradients meaningless to compare
        if g.params[i].abs() < 1e-6 {
            continue;
        }
        let rel = (fd - g.params[i]).abs() / g.params[i].abs();
        assert!(rel < 1e-4, "{activation} param {i}: fd {fd} vs {}", g.params[i]);
        probed += 1;
    }

    for c in 0..4 {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.set(2, c, x.get(2, c) + h);
        xm.set(2, c, x.get(2, c) - h);
        let fd = (half_sq_loss(&params, &spec, &xp, &t) - half_sq_loss(&params, &spec, &xm, &t)) / (2.0 * h);
        let an = g.input.get(2, c);
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "input {c}: {fd} vs {an}");
    }
}

#[test]
fn mish_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        fd_check(Activation::Mish, seed);
    }
}

#[test]
fn relu_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        fd_check(Activation::Relu, seed);
    }
}

#[test]
fn clipped_norm_never_exceeds_limit() {
    let mut r = rng::stream(5, &[]);
    for _ in 0..200 {
        let n = r.random_range(1..50);
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let mut g: Vec<f64> = (0..n).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let max = r.random_range(0.01..5.0);
        clip_gradients(&mut g, GradClip::MaxNorm(max));
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= max + 1e-9);
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let spec = MlpSpec::desk(3, 1);
        let mut p = ParamSet::init(&spec, 21);
        let mut st = OptimState::new(p.len(), AdamConfig::with_lr(1e-3)).unwrap();
        let x = random_batch(16, 3, 1);
        for _ in 0..20 {
            let y = forward(&p, &spec, &x).unwrap();
            let g = backward(&p, &spec, &x, &y).unwrap();
            let mut grads = g.params;
            opt_step(&mut p, &mut grads, &mut st, GradClip::MaxNorm(1.0)).unwrap();
        }
        p
    };
    let (a, b) = (run(), run());
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let spec = MlpSpec::full_scale(5, 3);
    let p = ParamSet::init(&spec, 77);
    let mut ck = Checkpoint::new(77, 1234);
    ck.push("net", &spec, &p);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    ck.write_to(&path).unwrap();
    let back = Checkpoint::read_from(&path).unwrap();
    assert_eq!(back.seed, 77);
    assert_eq!(back.step, 1234);
    let q = &back.network("net").unwrap().params;
    assert!(q.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), back.to_text());
}
