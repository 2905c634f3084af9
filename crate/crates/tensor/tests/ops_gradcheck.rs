use gsf_tensor::gradcheck::{check_ops, gradient_check, RELATIVE_ERROR_FLOOR};
use gsf_tensor::{Graph, Mlp, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_registered_op_passes_gradient_check() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r = rng.random_range(1..6);
        let c = rng.random_range(1..6) * 2;
        for check in check_ops(&mut rng, r, c, H, TOL).unwrap() {
            assert!(check.report.passed, "{} seed {seed}: {:?}", check.op, check.report);
        }
    }
}

#[test]
fn two_layer_mlp_matches_central_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[5, 7, 3], &mut rng);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let params: Vec<Tensor> = store.tensors().to_vec();
        let f = |g: &mut Graph, v: &[Var]| {
            let x = g.constant(x.clone());
            // Rebuild the forward with explicit variables so the checker owns them.
            let mut h = x;
            for (i, layer) in mlp.layers.iter().enumerate() {
                h = g.matmul(h, v[layer.weight.0])?;
                h = g.add(h, v[layer.bias.unwrap().0])?;
                if i + 1 < mlp.layers.len() {
                    h = g.relu(h)?;
                }
            }
            let s = g.square(h)?;
            g.mean(s)
        };
        let report = gradient_check(f, &params, H, TOL).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
        assert!(report.worst() < TOL);
    }
    assert!(RELATIVE_ERROR_FLOOR > 0.0);
}

proptest! {
    #[test]
    fn log_softmax_is_a_log_distribution(data in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(data));
        let y = g.log_softmax(x, 0).unwrap();
        let v = g.value(y).data();
        prop_assert!(v.iter().all(|&e| e <= 0.0));
        let s: f64 = v.iter().map(|e| e.exp()).sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn logsumexp_between_max_and_max_plus_log_len(data in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let n = data.len() as f64;
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(data));
        let y = g.logsumexp(x, 0).unwrap();
        let v = g.value(y).item();
        prop_assert!(v >= max);
        prop_assert!(v <= max + n.ln() + 1e-12);
    }
}
