//! Operator gradients against five-point central differences, plus the
//! value invariants of the normalizing operators.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlalign::nn::{
    finite_diff_check, AttentionLayout, CoordSampling, Graph, NnError, ParamId, ParamStore, Tensor,
    Var,
};

const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Checks `build` on fresh random inputs of the given shapes. The output is
/// contracted with a fixed random weight so every entry matters.
fn check_op(
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            store
                .add(&format!("x{i}"), random(&mut rng, s), false)
                .unwrap()
        })
        .collect();
    let weight_seed: u64 = rng.random();
    let report = finite_diff_check(
        &mut store,
        |p| {
            let mut g = Graph::new();
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
            let out = build(&mut g, &xs)?;
            let shape = g.value(out).shape().to_vec();
            let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
            let w = g.constant(Tensor::from_fn(&shape, |_| wr.random_range(-1.0..1.0)));
            let prod = g.mul(out, w)?;
            let loss = g.sum(prod);
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, p);
            Ok(g.scalar(loss))
        },
        1e-4,
        CoordSampling {
            per_param: 64,
            seed: 1,
        },
    )
    .unwrap();
    report.max_rel_error
}

macro_rules! op_grad {
    ($name:ident, $shapes:expr, |$g:ident, $x:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check_op($shapes, |$g, $x| $body);
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

op_grad!(matmul, &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
op_grad!(matmul_nt, &[&[3, 4], &[2, 4]], |g, x| g
    .matmul_nt(x[0], x[1]));
op_grad!(transpose, &[&[3, 4]], |g, x| g.transpose(x[0]));
op_grad!(add, &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]));
op_grad!(sub, &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1]));
op_grad!(mul, &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1]));
op_grad!(add_bias, &[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1]));
op_grad!(scale, &[&[3, 4]], |g, x| Ok(g.scale(x[0], -1.7)));
op_grad!(add_scalar, &[&[3, 4]], |g, x| Ok(g.add_scalar(x[0], 0.3)));
op_grad!(div_scalar, &[&[3, 4], &[1]], |g, x| {
    let s = g.add_scalar(x[1], 3.0);
    g.div_scalar(x[0], s)
});
op_grad!(embedding, &[&[5, 4]], |g, x| g.embedding(x[0], &[4, 1, 1]));
op_grad!(layer_norm, &[&[3, 4], &[4], &[4]], |g, x| g
    .layer_norm(x[0], x[1], x[2]));
op_grad!(gelu, &[&[3, 4]], |g, x| Ok(g.gelu(x[0])));
op_grad!(relu, &[&[3, 4]], |g, x| Ok(g.relu(x[0])));
op_grad!(tanh, &[&[3, 4]], |g, x| Ok(g.tanh(x[0])));
op_grad!(softmax, &[&[3, 4]], |g, x| Ok(g.softmax(x[0])));
op_grad!(l2_normalize, &[&[3, 4]], |g, x| Ok(g.l2_normalize(x[0])));
op_grad!(cross_entropy, &[&[3, 4]], |g, x| g
    .cross_entropy(x[0], &[0, 3, 2]));
op_grad!(sum, &[&[3, 4]], |g, x| Ok(g.sum(x[0])));
op_grad!(mean, &[&[3, 4]], |g, x| Ok(g.mean(x[0])));
op_grad!(row_max, &[&[3, 4]], |g, x| g.row_max(x[0], None));
op_grad!(row_max_masked, &[&[3, 4]], |g, x| g
    .row_max(x[0], Some(&[true, false, true, true])));
op_grad!(concat_rows, &[&[3, 4], &[2, 4]], |g, x| g
    .concat_rows(&[x[0], x[1]]));
op_grad!(gather_rows, &[&[3, 4]], |g, x| g
    .gather_rows(x[0], &[2, 0, 2]));
op_grad!(attention, &[&[3, 4], &[3, 4], &[3, 4]], |g, x| {
    g.attention(x[0], x[1], x[2], AttentionLayout::new(vec![(0, 3)], 2))
});
op_grad!(
    attention_segments_and_mask,
    &[&[5, 4], &[5, 4], &[5, 4]],
    |g, x| {
        let layout = AttentionLayout::new(vec![(0, 2), (2, 3)], 2)
            .with_key_mask(vec![true, true, true, false, true]);
        g.attention(x[0], x[1], x[2], layout)
    }
);

#[test]
fn sum_of_squares_is_checked_to_high_precision() {
    let err = check_op(&[&[3, 4]], |g, x| g.mul(x[0], x[0]));
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn zero_epsilon_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    store.add("x", Tensor::scalar(1.0), false).unwrap();
    let r = finite_diff_check(&mut store, |_| Ok(0.0), 0.0, CoordSampling::default());
    assert!(matches!(r, Err(NnError::InvalidArgument(_))));
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..9)
        .prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, c), r))
}

fn value_of(x: &[Vec<f64>], f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_rows(x).unwrap());
    let out = f(&mut g, v);
    g.value(out).to_rows()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix()) {
        for row in value_of(&x, |g, v| g.softmax(v)) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in matrix()) {
        for (row, orig) in value_of(&x, |g, v| g.l2_normalize(v)).iter().zip(&x) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if orig.iter().any(|&v| v != 0.0) {
                prop_assert!((n - 1.0).abs() <= 1e-9);
            } else {
                prop_assert_eq!(n, 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix()) {
        let w = x[0].len();
        prop_assume!(w >= 2);
        prop_assume!(x.iter().all(|r| {
            let m = r.iter().sum::<f64>() / w as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / w as f64 > 1e-6
        }));
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&x).unwrap());
        let gamma = g.constant(Tensor::full(&[w], 1.0));
        let beta = g.constant(Tensor::zeros(&[w]));
        let out = g.layer_norm(v, gamma, beta).unwrap();
        for row in g.value(out).to_rows() {
            let m = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / w as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
