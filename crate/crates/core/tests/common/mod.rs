//! Tabular fixtures and dynamic-programming oracles shared by the
//! integration tests.
#![allow(dead_code)]

use gsf_core::datagen::{tabular_dataset, LatentTransition, OfflineDataset};
use gsf_core::env::{generate_family, FamilyConfig, LatentMdp};
use gsf_core::gvf::{Cumulant, CumulantKind, GvfConfig, GvfMode, SfProjection};
use gsf_tensor::OptimizerConfig;

pub const GAMMA: f64 = 0.99;

/// Two states visited alternately forever with reward 1 on every step.
pub fn cycle() -> OfflineDataset {
    let ep = (0..400)
        .map(|t| LatentTransition {
            cell: t % 2,
            action: 0,
            reward: 1.0,
            next: (t + 1) % 2,
            done: false,
        })
        .collect();
    tabular_dataset(2, 2, GAMMA, &[ep])
}

/// Five states walked left to right; entering the last pays 1 and ends.
pub fn chain() -> OfflineDataset {
    let ep: Vec<LatentTransition> = (0..4)
        .map(|s| LatentTransition {
            cell: s,
            action: 1,
            reward: if s == 3 { 1.0 } else { 0.0 },
            next: s + 1,
            done: s == 3,
        })
        .collect();
    tabular_dataset(5, 2, GAMMA, &vec![ep; 30])
}

pub fn grid_mdp() -> LatentMdp {
    generate_family(&FamilyConfig::default(), 3, 1, 1).unwrap().mdp
}

/// Every (state, action, next action) combination of a uniform-random
/// behavior policy on the 9x9 grid, logged as two-step episodes.
pub fn grid() -> OfflineDataset {
    let mdp = grid_mdp();
    let mut episodes = Vec::new();
    for s in mdp.free_cells().into_iter().filter(|&c| c != mdp.goal) {
        for a in 0..mdp.action_count {
            let first = mdp.step(s, a).unwrap();
            let t1 = LatentTransition {
                cell: s,
                action: a,
                reward: first.reward,
                next: first.next,
                done: first.done,
            };
            for a2 in 0..mdp.action_count {
                if first.done {
                    episodes.push(vec![t1]);
                    continue;
                }
                let second = mdp.step(first.next, a2).unwrap();
                episodes.push(vec![
                    t1,
                    LatentTransition {
                        cell: first.next,
                        action: a2,
                        reward: second.reward,
                        next: second.next,
                        done: second.done,
                    },
                ]);
            }
        }
    }
    tabular_dataset(mdp.cell_count(), mdp.action_count, GAMMA, &episodes)
}

pub fn cumulants(data: &OfflineDataset) -> Vec<Cumulant> {
    let n = data.obs_len();
    let a = data.header.action_count;
    [
        CumulantKind::Reward,
        CumulantKind::SuccessorFeatures {
            dim: n,
            projection: SfProjection::Identity,
        },
        CumulantKind::ActionIndicator,
    ]
    .into_iter()
    .map(|k| {
        let mut c = Cumulant::new(k, n, a, 0).unwrap();
        c.estimate_c_max(data);
        c
    })
    .collect()
}

/// Fixed point of `G(s) = mean over logged (s -> s', a') of gamma * (c' + G(s'))`
/// with terminal transitions contributing 0. Rows for states that never
/// start a usable transition are `None`.
pub fn dp_oracle(data: &OfflineDataset, cumulant: &Cumulant) -> Vec<Option<Vec<f64>>> {
    let n = data.observations.len();
    let d = cumulant.dim();
    let gamma = data.header.discount;
    let mut edges: Vec<Vec<Option<(Vec<f64>, usize)>>> = vec![Vec::new(); n];
    for (i, t) in data.transitions.iter().enumerate() {
        if t.done {
            edges[t.obs as usize].push(None);
        } else if let Some(j) = data.successor(i) {
            let nx = &data.transitions[j];
            let c = cumulant.eval(data.obs(nx.obs), nx.action as usize, nx.reward);
            edges[t.obs as usize].push(Some((c, nx.obs as usize)));
        }
    }
    let mut g = vec![vec![0.0; d]; n];
    for _ in 0..200_000 {
        let mut next = vec![vec![0.0; d]; n];
        for s in 0..n {
            if edges[s].is_empty() {
                continue;
            }
            for e in &edges[s] {
                if let Some((c, sp)) = e {
                    for k in 0..d {
                        next[s][k] += gamma * (c[k] + g[*sp][k]);
                    }
                }
            }
            let m = edges[s].len() as f64;
            next[s].iter_mut().for_each(|v| *v /= m);
        }
        let diff = next
            .iter()
            .flatten()
            .zip(g.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        g = next;
        if diff < 1e-13 {
            break;
        }
    }
    g.into_iter()
        .zip(&edges)
        .map(|(v, e)| (!e.is_empty()).then_some(v))
        .collect()
}

/// Linear table over one-hot observations trained by synchronous TD with a
/// step that moves the most visited state 90% of the way to its target.
pub fn tabular_config(data: &OfflineDataset, cumulant: &Cumulant, iterations: usize) -> GvfConfig {
    let mut counts = vec![0usize; data.observations.len()];
    let mut usable = 0;
    for (i, t) in data.transitions.iter().enumerate() {
        if t.done || data.successor(i).is_some() {
            counts[t.obs as usize] += 1;
            usable += 1;
        }
    }
    let n_max = *counts.iter().max().unwrap() as f64;
    let lr = 0.9 * usable as f64 * cumulant.dim() as f64 / (2.0 * n_max);
    GvfConfig {
        iterations,
        batch_size: usize::MAX,
        optimizer: OptimizerConfig::Sgd { lr },
        ema_rate: 1.0,
        popart: false,
        popart_rate: 0.01,
        pad: 0,
        encoder: Vec::new(),
        trunk_bias: false,
        mode: GvfMode::Joint,
    }
}

/// Largest absolute error between learned and oracle values over states
/// that start a usable transition.
pub fn max_error(learned: &[Vec<f64>], oracle: &[Option<Vec<f64>>]) -> f64 {
    learned
        .iter()
        .zip(oracle)
        .filter_map(|(l, o)| o.as_ref().map(|o| (l, o)))
        .flat_map(|(l, o)| l.iter().zip(o).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

pub fn one_hot_rows(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|s| {
            let mut v = vec![0.0; n];
            v[s] = 1.0;
            v
        })
        .collect()
}

/// A small procedurally generated family with an offline dataset over its
/// training levels.
pub fn small_family(m_train: usize, m_test: usize, steps: usize) -> (gsf_core::env::Family, OfflineDataset) {
    use gsf_core::datagen::{collect, train_behavior_policy, BehaviorConfig, CollectConfig};
    let family = generate_family(&FamilyConfig::default(), 11, m_train, m_test).unwrap();
    let q = train_behavior_policy(&family.mdp, &BehaviorConfig::default(), 5).unwrap();
    let config = CollectConfig {
        total_steps: steps,
        ..CollectConfig::default()
    };
    let data = collect(&family, &q, &config, 6).unwrap();
    (family, data)
}
