mod common;

use gsf_core::agent::{
    build_q_batch, cql_loss, fitted_q_loss, nce_loss, pairwise_infonce_loss, stratified_batch, train_agent, AgentConfig,
    AgentError, AgentParams, ContrastiveLoss, LabelMode, Method, QBatch,
};
use gsf_core::augment::augment;
use gsf_core::datagen::OfflineDataset;
use gsf_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> AgentConfig {
    AgentConfig {
        steps: 12,
        epochs: 3,
        batch_size: 32,
        levels_per_batch: 2,
        bins: 4,
        latent_dim: 8,
        encoder_hidden: vec![16],
        projection_hidden: vec![8],
        ..AgentConfig::default()
    }
}

fn cell_values(data: &OfflineDataset) -> Vec<f64> {
    (0..data.observations.len() as u32).map(|i| data.cell(i) as f64).collect()
}

fn no_eval(_: &AgentParams) -> (f64, f64) {
    (0.0, 0.0)
}

#[test]
fn zero_lambda_cql_gradients_match_fitted_q() {
    let (_, data) = common::small_family(3, 1, 600);
    let config = tiny_config();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AgentParams::new(data.obs_len(), data.header.action_count, &config, &mut rng);
        let batch = stratified_batch(&data, &data.levels(), &config, &mut rng);
        let shape = data.header.obs_shape;
        let mut obs = Vec::new();
        let mut next = Vec::new();
        for &i in &batch.rows {
            let t = &data.transitions[i];
            obs.extend(augment(data.obs(t.obs), shape, 2, &mut rng).0);
            next.extend(augment(data.obs(t.next_obs), shape, 2, &mut rng).0);
        }
        let n = batch.rows.len();
        let obs = Tensor::matrix(n, data.obs_len(), obs).unwrap();
        let qb = build_q_batch(&params, &data, &batch.rows, Tensor::matrix(n, data.obs_len(), next).unwrap()).unwrap();
        let grads = |cql: bool| {
            let mut g = Graph::new();
            let p = params.store.bind(&mut g);
            let x = g.constant(obs.clone());
            let z = params.latent(&mut g, &p, x).unwrap();
            let q = params.q_from_latent(&mut g, &p, z).unwrap();
            let loss = if cql {
                cql_loss(&mut g, q, &qb, 0.0).unwrap().total
            } else {
                fitted_q_loss(&mut g, q, &qb.actions, &qb.targets).unwrap()
            };
            let mut gr = g.backward(loss).unwrap();
            p.collect(&mut gr)
        };
        let (a, b) = (grads(true), grads(false));
        let mut compared = 0;
        for (ga, gb) in a.iter().zip(&b) {
            match (ga, gb) {
                (Some(x), Some(y)) => {
                    assert!(x.max_abs_diff(y) <= 1e-12);
                    compared += 1;
                }
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
        // encoder weights and biases plus the action head
        assert_eq!(compared, 5);
    }
}

#[test]
fn target_gap_shrinks_geometrically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = AgentParams::new(12, 4, &tiny_config(), &mut rng);
    for t in params.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let d0 = params.target.distance(&params.store);
    let rate = 0.005;
    for _ in 0..200 {
        params.target.ema_from(&params.store, rate).unwrap();
    }
    let expect = d0 * (1.0 - rate).powi(200);
    let got = params.target.distance(&params.store);
    assert!((got - expect).abs() <= 1e-10 * d0, "{got} vs {expect}");
}

#[test]
fn pairwise_loss_at_huge_temperature_is_a_count_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = [1, 1, 2, 2, 2, 3, 1, 2];
    let mut g = Graph::new();
    let h = g.leaf(Tensor::randn(&[8, 5], 1.0, &mut rng));
    let out = pairwise_infonce_loss(&mut g, h, &labels, 1e6).unwrap();
    // class 1: |P| = 3, |N| = 5; class 2: |P| = 4, |N| = 4; class 3 skipped
    let expect = ((5.0f64 / 2.0).ln() + (4.0f64 / 3.0).ln()) / 2.0;
    assert!((g.value(out.loss.unwrap()).item() - expect).abs() < 1e-5);
    assert_eq!(out.skipped, 1);
}

#[test]
fn ablation_without_contrastive_weight_reproduces_cql() {
    let (_, data) = common::small_family(2, 1, 400);
    let values = cell_values(&data);
    let config = AgentConfig {
        nce_weight: 0.0,
        ..tiny_config()
    };
    let gsf = train_agent(Method::Gsf, &data, Some(&values), &config, 9, &mut no_eval).unwrap();
    let cql = train_agent(Method::Cql, &data, None, &config, 9, &mut no_eval).unwrap();
    assert_eq!(gsf.params.store, cql.params.store);
    assert_eq!(gsf.metrics, cql.metrics);
}

#[test]
fn training_is_deterministic_for_every_variant() {
    let (_, data) = common::small_family(2, 1, 400);
    let values = cell_values(&data);
    for (loss, labels) in [
        (ContrastiveLoss::Cce, LabelMode::Minibatch),
        (ContrastiveLoss::Pairwise, LabelMode::Global),
    ] {
        let config = AgentConfig {
            loss,
            labels,
            ..tiny_config()
        };
        let a = train_agent(Method::Gsf, &data, Some(&values), &config, 3, &mut no_eval).unwrap();
        let b = train_agent(Method::Gsf, &data, Some(&values), &config, 3, &mut no_eval).unwrap();
        assert_eq!(a.params.store, b.params.store);
        assert_eq!(a.params.target, b.params.target);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().all(|m| m.nce_loss > 0.0 && m.cql_loss.is_finite()));
        if labels == LabelMode::Global {
            assert!(a.metrics.iter().all(|m| m.label_churn == 0.0));
        }
    }
}

#[test]
fn held_out_levels_are_rejected() {
    let (_, mut data) = common::small_family(2, 1, 200);
    let leaked = data.levels()[0];
    data.header.test_ids.push(leaked);
    let err = train_agent(Method::Cql, &data, None, &tiny_config(), 0, &mut no_eval).unwrap_err();
    assert!(matches!(err, AgentError::TestLeak(l) if l == leaked));
}

#[test]
fn contrastive_training_needs_gvf_values() {
    let (_, data) = common::small_family(2, 1, 200);
    let err = train_agent(Method::Gsf, &data, Some(&[1.0]), &tiny_config(), 0, &mut no_eval).unwrap_err();
    assert!(matches!(err, AgentError::MissingGvf { got: 1, .. }));
}

#[test]
fn non_finite_loss_aborts_with_last_good_params() {
    let (_, data) = common::small_family(2, 1, 200);
    let config = AgentConfig {
        learning_rate: 1e200,
        steps: 50,
        epochs: 1,
        ..tiny_config()
    };
    match train_agent(Method::Cql, &data, None, &config, 0, &mut no_eval) {
        Err(AgentError::NonFinite { params, .. }) => {
            assert!(params.store.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn behavior_cloning_fits_a_greedy_logger() {
    use gsf_core::datagen::{collect, train_behavior_policy, BehaviorConfig, CollectConfig};
    use gsf_core::env::{generate_family, FamilyConfig};
    let family = generate_family(&FamilyConfig::default(), 2, 2, 1).unwrap();
    let q = train_behavior_policy(&family.mdp, &BehaviorConfig::default(), 1).unwrap();
    let greedy = CollectConfig {
        total_steps: 300,
        eps_start: 0.0,
        eps_end: 0.0,
    };
    let data = collect(&family, &q, &greedy, 2).unwrap();
    let config = AgentConfig {
        steps: 400,
        epochs: 1,
        pad: 0,
        learning_rate: 3e-3,
        ..tiny_config()
    };
    let out = train_agent(Method::Bc, &data, None, &config, 0, &mut no_eval).unwrap();
    let obs: Vec<f64> = data.transitions.iter().flat_map(|t| data.obs(t.obs).to_vec()).collect();
    let x = Tensor::matrix(data.len(), data.obs_len(), obs).unwrap();
    let chosen = out.params.greedy(x).unwrap();
    let hits = chosen
        .iter()
        .zip(&data.transitions)
        .filter(|(a, t)| **a == t.action as usize)
        .count();
    let accuracy = hits as f64 / data.len() as f64;
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nce_is_equivariant_under_class_relabeling(
        h in matrix_strategy(6, 3),
        w in matrix_strategy(3, 4),
        labels in prop::collection::vec(1usize..=4, 6),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        tau in 0.1f64..2.0,
    ) {
        let loss = |w: Tensor, labels: &[usize]| {
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let wv = g.constant(w);
            let l = nce_loss(&mut g, hv, wv, labels, tau).unwrap();
            g.value(l).item()
        };
        let mut permuted = Tensor::zeros(&[3, 4]);
        for r in 0..3 {
            for k in 0..4 {
                permuted.data_mut()[r * 4 + perm[k]] = w.at2(r, k);
            }
        }
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l - 1] + 1).collect();
        let a = loss(w.clone(), &labels);
        let b = loss(permuted, &relabeled);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn cql_regularizer_is_non_negative(
        q in matrix_strategy(5, 4),
        mu_raw in prop::collection::vec(0.0f64..1.0, 20),
        actions in prop::collection::vec(0usize..4, 5),
    ) {
        let mut mu = mu_raw.clone();
        for row in mu.chunks_mut(4) {
            let s: f64 = row.iter().sum::<f64>() + 1e-9;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let batch = QBatch {
            actions,
            targets: vec![0.0; 5],
            behavior: Tensor::matrix(5, 4, mu).unwrap(),
        };
        let mut g = Graph::new();
        let qv = g.constant(q);
        let terms = cql_loss(&mut g, qv, &batch, 1.0).unwrap();
        prop_assert!(g.value(terms.regularizer).item() >= 0.0);
        prop_assert!(g.value(terms.td).item() >= 0.0);
    }
}
