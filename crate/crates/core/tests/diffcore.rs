use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinr_core::diff::{GradCheck, Tensor, L2_NORM_EPS};
use tinr_core::{Graph, Result, Var};

const SHAPES_PER_PRIMITIVE: u64 = 12;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

// Keeps every entry at least 0.05 away from zero so kinks stay outside the
// finite-difference stencil.
fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6))
}

// Reduces `out` to a scalar through a fixed random weighting so that every
// output element contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(randn(g.shape(out), &mut rng));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(name: &str, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>),
{
    for seed in 0..SHAPES_PER_PRIMITIVE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (point, f) = build(&mut rng);
        let shapes: Vec<Vec<usize>> = point.iter().map(|t| t.shape().to_vec()).collect();
        let report = GradCheck::with_tol(1e-5)
            .run(&point, |g, v| {
                let out = f(g, v)?;
                weighted_sum(g, out, seed)
            })
            .unwrap();
        assert!(
            report.passed(),
            "{name} failed at shapes {shapes:?}: max rel err {:.3e}, worst {:?}, {:?}",
            report.max(),
            report.worst,
            report.failure
        );
    }
}

#[test]
fn matmul_gradients() {
    check("matmul", |rng| {
        let (n, k) = dims(rng);
        let m = rng.random_range(1..6);
        (vec![randn(&[n, k], rng), randn(&[k, m], rng)], Box::new(|g, v| g.matmul(v[0], v[1])))
    });
}

#[test]
fn elementwise_binary_gradients() {
    check("add", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng), randn(&[n, m], rng)], Box::new(|g, v| g.add(v[0], v[1])))
    });
    check("sub", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng), randn(&[n, m], rng)], Box::new(|g, v| g.sub(v[0], v[1])))
    });
    check("mul", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng), randn(&[n, m], rng)], Box::new(|g, v| g.mul(v[0], v[1])))
    });
    check("add_row", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng), randn(&[m], rng)], Box::new(|g, v| g.add_row(v[0], v[1])))
    });
}

#[test]
fn elementwise_unary_gradients() {
    check("relu", |rng| {
        let (n, m) = dims(rng);
        (vec![away_from_zero(randn(&[n, m], rng))], Box::new(|g, v| g.relu(v[0])))
    });
    check("sin", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng).map(|x| 3.0 * x)], Box::new(|g, v| g.sin(v[0])))
    });
    check("exp", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(|g, v| g.exp(v[0])))
    });
    check("sigmoid", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(|g, v| g.sigmoid(v[0])))
    });
    check("scale", |rng| {
        let (n, m) = dims(rng);
        let c = rng.random_range(-2.0..2.0);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.scale(v[0], c)))
    });
    check("shift", |rng| {
        let (n, m) = dims(rng);
        let c = rng.random_range(-2.0..2.0);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.shift(v[0], c)))
    });
}

#[test]
fn softmax_gradients() {
    check("softmax", |rng| {
        let (n, m) = dims(rng);
        let axis = rng.random_range(0..2);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.softmax(v[0], axis)))
    });
}

#[test]
fn layer_norm_gradients() {
    check("layer_norm", |rng| {
        let n = rng.random_range(1..5);
        let m = rng.random_range(2..7);
        (
            vec![randn(&[n, m], rng), randn(&[m], rng), randn(&[m], rng)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        )
    });
}

#[test]
fn l2_normalize_gradients() {
    check("l2_normalize", |rng| {
        let (n, m) = dims(rng);
        let axis = rng.random_range(0..2);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.l2_normalize(v[0], axis)))
    });
}

#[test]
fn structural_gradients() {
    check("concat", |rng| {
        let (n, m) = dims(rng);
        let extra = rng.random_range(1..4);
        let axis = rng.random_range(0..2);
        let other = if axis == 0 { [extra, m] } else { [n, extra] };
        (
            vec![randn(&[n, m], rng), randn(&other, rng)],
            Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)),
        )
    });
    check("slice", |rng| {
        let n = rng.random_range(2..7);
        let m = rng.random_range(1..5);
        let start = rng.random_range(0..n - 1);
        let end = rng.random_range(start + 1..=n);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.slice(v[0], 0, start, end)))
    });
    check("reshape", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.reshape(v[0], &[m, n])))
    });
    check("transpose", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(|g, v| g.transpose(v[0])))
    });
}

#[test]
fn reduction_gradients() {
    check("sum", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(|g, v| g.sum(v[0])))
    });
    check("mean", |rng| {
        let (n, m) = dims(rng);
        (vec![randn(&[n, m], rng)], Box::new(|g, v| g.mean(v[0])))
    });
    check("sum_axis", |rng| {
        let (n, m) = dims(rng);
        let axis = rng.random_range(0..2);
        (vec![randn(&[n, m], rng)], Box::new(move |g, v| g.sum_axis(v[0], axis)))
    });
    check("squared_error", |rng| {
        let (n, m) = dims(rng);
        (
            vec![randn(&[n, m], rng), randn(&[n, m], rng)],
            Box::new(|g, v| g.squared_error(v[0], v[1])),
        )
    });
}

// Random three-primitive chains over a square matrix.
#[test]
fn composed_chains() {
    fn apply(g: &mut Graph<f64>, op: usize, x: Var, y: Var) -> Result<Var> {
        match op {
            0 => g.matmul(x, y),
            1 => g.mul(x, y),
            2 => g.sin(x),
            3 => g.exp(x),
            4 => g.softmax(x, 1),
            5 => g.l2_normalize(x, 0),
            6 => g.sigmoid(x),
            _ => g.transpose(x),
        }
    }
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..5);
        let ops: Vec<usize> = (0..3).map(|_| rng.random_range(0..8)).collect();
        let point = vec![randn(&[n, n], &mut rng).map(|x| 0.5 * x), randn(&[n, n], &mut rng)];
        let report = GradCheck::with_tol(1e-5)
            .run(&point, |g, v| {
                let mut x = v[0];
                for &op in &ops {
                    x = apply(g, op, x, v[1])?;
                }
                weighted_sum(g, x, seed)
            })
            .unwrap();
        assert!(report.passed(), "chain {ops:?} at n={n}: {:.3e}", report.max());
    }
}

#[test]
fn documented_forward_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_f64([2, 1], &[1.0, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    let x = g.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    let n = g.l2_normalize(x, 0).unwrap();
    for (got, want) in g.value(n).data().iter().zip([0.6, 0.8]) {
        assert!((got - want).abs() < 1e-8);
    }

    let z = g.constant(Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn documented_backward_values() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(-5.0));
    let r = g.relu(x).unwrap();
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.get_or_zeros(x, &[]).data(), &[0.0]);
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let point = vec![
        randn(&[4, 3], &mut rng),
        randn(&[3, 6], &mut rng),
        randn(&[6, 5], &mut rng),
        randn(&[5, 1], &mut rng),
    ];
    let report = GradCheck::with_tol(1e-5)
        .run(&point, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.sin(h)?;
            let h = g.matmul(h, v[2])?;
            let h = g.sigmoid(h)?;
            let y = g.matmul(h, v[3])?;
            g.sum(y)
        })
        .unwrap();
    assert!(report.passed(), "{:.3e}", report.max());
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros([3, 2]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros([2, 2]));
    assert!(g.backward(a).is_err());
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(n, m)| (Just(n), Just(m), prop::collection::vec(-30.0f64..30.0, n * m)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((n, m, data) in matrix(), axis in 0usize..2) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![n, m], data).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let v = g.value(s);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        let sums: Vec<f64> = if axis == 1 {
            (0..n).map(|i| v.row(i).iter().sum()).collect()
        } else {
            (0..m).map(|j| (0..n).map(|i| v.at2(i, j)).sum()).collect()
        };
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_norm((n, m, data) in matrix()) {
        let mut g = Graph::<f64>::new();
        let norms: Vec<f64> = (0..n).map(|i| data[i * m..(i + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let x = g.constant(Tensor::new(vec![n, m], data).unwrap());
        let y = g.l2_normalize(x, 1).unwrap();
        let v = g.value(y);
        for (i, norm) in norms.into_iter().enumerate() {
            // the epsilon sits inside the square root
            let expect = norm / (norm * norm + L2_NORM_EPS).sqrt();
            let out: f64 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((out - expect).abs() < 1e-12, "{} vs {}", out, expect);
            if norm > 0.1 {
                prop_assert!((out - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn leaf_gradients_accumulate_over_reuse(x in -5.0f64..5.0, k in 1usize..6) {
        // x + x + ... (k times) has derivative k.
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::scalar(x));
        let mut acc = v;
        for _ in 1..k {
            acc = g.add(acc, v).unwrap();
        }
        let grads = g.backward(acc).unwrap();
        prop_assert_eq!(grads.get(v).unwrap().data()[0], k as f64);
    }
}
