//! Every tape primitive against 64-bit central finite differences.

use dadee_core::tensor::gradcheck::{finite_difference, max_relative_error, FD_STEP};
use dadee_core::tensor::{SeededRng, Tape, Tensor, Var};
use dadee_core::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-5;

fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero, for functions with a kink there.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.05, 1.5);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects the primitive's output onto fixed random weights so every
/// output element contributes to the scalar being differentiated.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    let m = tape.mean(prod)?;
    tape.scale(m, shape.iter().product::<usize>() as f64)
}

fn worst_error(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) -> f64 {
    let run = |params: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.owned_param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out, seed)?;
        let value = tape.value(loss).item();
        let grads = if want_grad {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.wrt(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };
    let (_, analytic) = run(inputs, true).unwrap();
    let numeric = finite_difference(inputs, FD_STEP, |p| run(p, false).map(|r| r.0)).unwrap();
    max_relative_error(&analytic, &numeric)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let inputs = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[4, 2], -1.0, 1.0)];
        prop_assert!(worst_error(&inputs, seed, |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn add_sub_mul(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let inputs = [random(&mut r, &[2, 3], -1.0, 1.0), random(&mut r, &[2, 3], -1.0, 1.0)];
        prop_assert!(worst_error(&inputs, seed, |t, v| t.add(v[0], v[1])) < TOL);
        prop_assert!(worst_error(&inputs, seed, |t, v| t.sub(v[0], v[1])) < TOL);
        prop_assert!(worst_error(&inputs, seed, |t, v| t.mul(v[0], v[1])) < TOL);
    }

    #[test]
    fn bias_and_affine(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let inputs = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[4], -1.0, 1.0)];
        prop_assert!(worst_error(&inputs, seed, |t, v| t.add_bias(v[0], v[1])) < TOL);
        prop_assert!(worst_error(&inputs[..1], seed, |t, v| t.affine(v[0], -1.7, 0.3)) < TOL);
    }

    #[test]
    fn activations(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let x = [away_from_zero(&mut r, &[4, 3])];
        prop_assert!(worst_error(&x, seed, |t, v| t.relu(v[0])) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.leaky_relu(v[0], 0.01)) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.gelu(v[0])) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.tanh(v[0])) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.sigmoid(v[0])) < TOL);
    }

    #[test]
    fn log_and_clamp(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let pos = [random(&mut r, &[2, 3], 0.2, 2.0)];
        prop_assert!(worst_error(&pos, seed, |t, v| t.log(v[0])) < TOL);
        // Elements sit well inside or well outside the clamp interval.
        let x = [away_from_zero(&mut r, &[3, 3])];
        prop_assert!(worst_error(&x, seed, |t, v| t.clamp(v[0], -0.02, 0.02)) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.clamp(v[0], -10.0, 10.0)) < TOL);
    }

    #[test]
    fn softmax_family(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let x = [random(&mut r, &[3, 4], -2.0, 2.0)];
        prop_assert!(worst_error(&x, seed, |t, v| t.softmax(v[0])) < TOL);
        prop_assert!(worst_error(&x, seed, |t, v| t.log_softmax(v[0])) < TOL);
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let x = [random(&mut r, &[2, 3, 2], -1.0, 1.0)];
        for axis in 0..3 {
            prop_assert!(worst_error(&x, seed, |t, v| t.mean_axis(v[0], axis)) < TOL);
            prop_assert!(worst_error(&x, seed, |t, v| t.sum_axis(v[0], axis)) < TOL);
        }
        prop_assert!(worst_error(&x, seed, |t, v| t.mean(v[0])) < TOL);
    }

    #[test]
    fn indexing(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let table = [random(&mut r, &[5, 3], -1.0, 1.0)];
        let ids: Vec<usize> = (0..7).map(|_| r.below(5)).collect();
        prop_assert!(worst_error(&table, seed, |t, v| t.gather_rows(v[0], &ids)) < TOL);
        let cls: Vec<usize> = (0..5).map(|_| r.below(3)).collect();
        prop_assert!(worst_error(&table, seed, |t, v| t.pick(v[0], &cls)) < TOL);
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let inputs = [
            random(&mut r, &[4, 5], -2.0, 2.0),
            random(&mut r, &[5], 0.5, 1.5),
            random(&mut r, &[5], -0.5, 0.5),
        ];
        prop_assert!(worst_error(&inputs, seed, |t, v| t.layer_norm(v[0], v[1], v[2])) < TOL);
    }

    #[test]
    fn concat(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let inputs = [random(&mut r, &[2, 3], -1.0, 1.0), random(&mut r, &[2, 1], -1.0, 1.0)];
        prop_assert!(worst_error(&inputs, seed, |t, v| t.concat(&[v[0], v[1]], 1)) < TOL);
        let rows = [random(&mut r, &[2, 3], -1.0, 1.0), random(&mut r, &[1, 3], -1.0, 1.0)];
        prop_assert!(worst_error(&rows, seed, |t, v| t.concat(&[v[0], v[1]], 0)) < TOL);
    }

    #[test]
    fn segment_mean(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let x = [random(&mut r, &[6, 3], -1.0, 1.0)];
        prop_assert!(worst_error(&x, seed, |t, v| t.segment_mean(v[0], &[2, 1, 3])) < TOL);
    }

    #[test]
    fn attention(seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let qkv = [
            random(&mut r, &[5, 4], -1.0, 1.0),
            random(&mut r, &[5, 4], -1.0, 1.0),
            random(&mut r, &[5, 4], -1.0, 1.0),
        ];
        prop_assert!(worst_error(&qkv, seed, |t, v| t.attention(v[0], v[1], v[2], &[3, 2], 2)) < TOL);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = SeededRng::new(5);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(random(&mut r, &[50, 7], -20.0, 20.0).cast());
    let y = tape.softmax(x).unwrap();
    for row in 0..50 {
        let p = tape.value(y).row(row);
        let total: f32 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut r = SeededRng::new(9);
        let a = random(&mut r, &[4, 8], -1.0, 1.0).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(a);
        let y = tape.attention(x, x, x, &[4], 2).unwrap();
        let z = tape.gelu(y).unwrap();
        tape.value(z).clone()
    };
    assert_eq!(run(), run());
}
