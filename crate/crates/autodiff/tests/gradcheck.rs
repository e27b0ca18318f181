use fsgan_autodiff::gradcheck::{check_composition, finite_difference, relative_error, RandomComposition};
use fsgan_autodiff::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_compositions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let mut worst: f64 = 0.0;
    for trial in 0..150 {
        let depth = rng.gen_range(1..=3);
        let comp = RandomComposition::sample(&mut rng, depth, 16);
        let report = check_composition(&comp, 1e-5).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "trial {trial}: {:?} rel err {}",
            comp.description,
            report.max_relative_error
        );
        worst = worst.max(report.max_relative_error);
    }
    eprintln!("worst relative error over 150 compositions: {worst:.3e}");
}

fn two_layer<'t>(tape: &'t Tape, leaves: &[Tensor], params: bool) -> (Vec<Var<'t>>, Var<'t>) {
    let vars: Vec<_> = leaves
        .iter()
        .map(|t| if params { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let h = vars[0].matmul(vars[1]).unwrap().add(vars[2]).unwrap().leaky_relu(0.1);
    let out = h.matmul(vars[3]).unwrap().square().reduce_mean();
    (vars, out)
}

#[test]
fn two_layer_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = vec![
        Tensor::randn(vec![5, 7], 1.0, &mut rng),
        Tensor::randn(vec![7, 6], 0.5, &mut rng),
        Tensor::randn(vec![6], 0.5, &mut rng),
        Tensor::randn(vec![6, 2], 0.5, &mut rng),
    ];
    let tape = Tape::new();
    let (vars, loss) = two_layer(&tape, &leaves, true);
    let grads = tape.backward(loss).unwrap();
    let numeric = finite_difference(
        |l| {
            let t = Tape::new();
            let v = two_layer(&t, l, false).1.value().item();
            v
        },
        &leaves,
        1e-5,
    );
    for (v, n) in vars.iter().zip(&numeric) {
        for (a, b) in grads.get_or_zeros(*v).data().iter().zip(n.data()) {
            assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }
}

/// Penalty (||grad_x D|| - 1)^2 for D(x) = ||x W^T||^2 with the input
/// gradient written out explicitly as 2 (x W^T) W.
fn squared_norm_penalty<'t>(tape: &'t Tape, w: Var<'t>, x: &Tensor) -> Var<'t> {
    let xv = tape.constant(x.clone());
    let y = xv.matmul(w.transpose().unwrap()).unwrap();
    let grad = y.matmul(w).unwrap().scale(2.0);
    grad.euclidean_norm().add_scalar(-1.0).square().sum()
}

#[test]
fn penalty_of_squared_norm_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 5;
    let x = Tensor::randn(vec![1, d], 1.0, &mut rng);

    let mut eye = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    let tape = Tape::new();
    let p = squared_norm_penalty(&tape, tape.param(eye), &x);
    let norm2x = 2.0 * x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((p.value().item() - (norm2x - 1.0).powi(2)).abs() < 1e-12);

    let w0 = Tensor::randn(vec![d, d], 0.5, &mut rng);
    let tape = Tape::new();
    let w = tape.param(w0.clone());
    let grads = tape.backward(squared_norm_penalty(&tape, w, &x)).unwrap();
    let numeric = finite_difference(
        |l| {
            let t = Tape::new();
            let v = squared_norm_penalty(&t, t.constant(l[0].clone()), &x).value().item();
            v
        },
        &[w0],
        1e-5,
    );
    for (a, b) in grads.get(w).unwrap().data().iter().zip(numeric[0].data()) {
        assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let comp = RandomComposition::sample(&mut rng, 3, 16);
        let tape = Tape::new();
        let vars: Vec<_> = comp.leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = comp.eval(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut bits = vec![loss.value().item().to_bits()];
        for v in &vars {
            bits.extend(grads.get_or_zeros(*v).data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn l2_normalize_gives_unit_rows(rows in proptest::collection::vec(
        proptest::collection::vec(-100.0f64..100.0, 4), 1..8)) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = x.l2_normalize().value();
        for row in y.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn add_then_sub_is_identity(a in proptest::collection::vec(-1e3f64..1e3, 6),
                                b in proptest::collection::vec(-1e3f64..1e3, 3)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], a.clone()).unwrap());
        let bias = tape.constant(Tensor::vector(b));
        let y = x.add(bias).unwrap().sub(bias).unwrap().value();
        for (u, v) in y.data().iter().zip(&a) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}
