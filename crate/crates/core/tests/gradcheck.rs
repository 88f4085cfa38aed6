use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ttl_core::gradcheck::{GradCheckSetup, LossContext, Schedule, Tolerances};
use ttl_core::{Activation, DenseLayer, Layer, LossKind, Matrix, NetworkModel, TuckerLayer};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// One to three layers, the first always Tucker, smooth activations so that
/// central differences are meaningful everywhere.
fn random_context(seed: u64, loss: LossKind) -> LossContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = rng.random_range(1..=3);
    let shape: Vec<usize> = (0..order).map(|_| rng.random_range(2..=4)).collect();
    let hidden = rng.random_range(2..=4);
    let mut ranks: Vec<usize> = shape.iter().map(|&i| rng.random_range(1..=i)).collect();
    ranks.push(rng.random_range(1..=hidden));
    let extra = rng.random_range(0..=2);
    let acts = [Activation::Sigmoid, Activation::Identity];
    let mut layers = vec![Layer::Tucker(
        TuckerLayer::random(&shape, hidden, &ranks, acts[rng.random_range(0..2)], &mut rng).unwrap(),
    )];
    let mut width = hidden;
    for k in 0..extra {
        let next = if k + 1 == extra { 3 } else { rng.random_range(2..=4) };
        let w = gaussian(next, width, &mut rng) / (width as f64).sqrt();
        let b = DVector::from_fn(next, |_, _| { let v: f64 = StandardNormal.sample(&mut rng); 0.1 * v });
        layers.push(Layer::Dense(DenseLayer::new(w, b, acts[rng.random_range(0..2)]).unwrap()));
        width = next;
    }
    // Random bias on the Tucker layer too, so its gradient is generic.
    if let Layer::Tucker(l) = &mut layers[0] {
        *l.bias_mut() = DVector::from_fn(hidden, |_, _| { let v: f64 = StandardNormal.sample(&mut rng); 0.1 * v });
    }
    let model = NetworkModel::new(layers).unwrap();
    let dim: usize = shape.iter().product();
    let samples = rng.random_range(1..=3);
    let input = gaussian(dim, samples, &mut rng);
    let out = model.output_dim();
    let (real_targets, class_targets) = match loss {
        LossKind::Mse => (Some(gaussian(out, samples, &mut rng)), Vec::new()),
        LossKind::SoftmaxCrossEntropy => (None, (0..samples).map(|_| rng.random_range(0..out)).collect()),
    };
    LossContext { model, input, loss, real_targets, class_targets }
}

#[test]
fn default_setup_passes_every_parameter() {
    let ctx = GradCheckSetup::default().build().unwrap();
    let reports = ctx.check_all(1, &Schedule::default(), Tolerances::default(), false).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.parameter.as_str()).collect();
    assert_eq!(names, ["U1", "U2", "U3", "U4", "G", "b", "X"]);
    for r in &reports {
        assert!(r.passed, "{r:?}");
        assert!((r.slope - 1.0).abs() < 0.1, "{}: slope {}", r.parameter, r.slope);
    }
}

#[test]
fn corrupted_default_setup_fails() {
    let ctx = GradCheckSetup::default().build().unwrap();
    let reports = ctx.check_all(1, &Schedule::default(), Tolerances::default(), true).unwrap();
    assert!(reports.iter().all(|r| !r.passed));
}

#[test]
fn random_networks_pass_fd_and_remainder() {
    // Sigmoid and softmax losses are not quadratic, so each curve starts
    // where the ratio has begun to halve with the scale. Eleven points would
    // put the ideal decay, 2^-10, right at the tolerance.
    let scales = Schedule::Asymptotic { points: 14 };
    let (mut strict, mut total) = (0, 0);
    for seed in 0..20 {
        for loss in [LossKind::Mse, LossKind::SoftmaxCrossEntropy] {
            let ctx = random_context(seed, loss);
            let reports = ctx.check_all(seed, &scales, Tolerances::default(), false).unwrap();
            for r in &reports {
                let tag = format!("seed {seed} {loss:?} {}", r.parameter);
                total += 1;
                assert!(r.fd_max_rel_error <= 1e-5, "{tag}: fd {}", r.fd_max_rel_error);
                assert!(r.monotone, "{tag}: {r:?}");
                if r.passed {
                    strict += 1;
                } else {
                    // Nearly linear losses hit the rounding floor before the
                    // full decay is visible; require first-order decay over
                    // every point double precision resolves.
                    assert!(r.floor_limited && r.resolved >= 8, "{tag}: {r:?}");
                    assert!((r.slope - 1.0).abs() < 0.1, "{tag}: slope {}", r.slope);
                }
            }
            let corrupted = ctx.check_all(seed, &scales, Tolerances::default(), true).unwrap();
            assert!(corrupted.iter().all(|r| !r.passed), "seed {seed} {loss:?}: a corrupted gradient passed");
        }
    }
    eprintln!("{strict}/{total} remainder curves pass the strict verdict; the rest are floor-limited");
    assert!(strict * 10 >= total * 9);
}
