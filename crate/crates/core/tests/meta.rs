mod common;

use std::collections::BTreeMap;

use metakgr::env::EnvConfig;
use metakgr::kg::{Graph, RelationId, Triple};
use metakgr::meta::{Episode, Frozen, MetaConfig, MetaLearner, Sampled};
use metakgr::policy::{PolicyConfig, PolicyNet, Trajectory};
use metakgr::reinforce::{BaselineState, Reinforce, TrainConfig};
use metakgr::synthetic::{compositional_kg, SyntheticConfig, SyntheticKg};
use metakgr::tensor::{sgd_step, Optimizer, OptimizerKind, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (SyntheticKg, PolicyNet) {
    let kg = compositional_kg(&SyntheticConfig {
        entities: 40,
        normal_relations: 6,
        fewshot_relations: 2,
        fewshot_train: 5,
        fewshot_test: 5,
        add_inverses: false,
        ..Default::default()
    })
    .unwrap();
    let net = PolicyNet::for_graph(PolicyConfig { dim: 4, hidden: 4, mlp_hidden: 8 }, &kg.dataset.graph).unwrap();
    (kg, net)
}

fn config(inner_lr: f64, outer_lr: f64, optimizer: OptimizerKind) -> MetaConfig {
    MetaConfig {
        inner_lr,
        outer_lr,
        task_batch: 2,
        support_size: 4,
        query_size: 4,
        outer_steps: 3,
        outer_optimizer: optimizer,
        train: TrainConfig {
            env: EnvConfig { horizon: 2, ..Default::default() },
            rollouts_per_triple: 3,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    }
}

fn episodes(learner: &MetaLearner<'_>, kg: &SyntheticKg, seed: u64) -> Vec<Episode> {
    learner
        .sample_episodes(&kg.normal_tasks(), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

fn sample_trajs(trainer: &Reinforce<'_>, params: &ParamSet, triples: &[Triple], seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trainer
        .gradient(params, triples, &mut BaselineState::default(), 0.0, &mut rng)
        .unwrap()
        .2
}

fn trainer<'a>(net: &'a PolicyNet, g: &'a Graph, cfg: &MetaConfig) -> Reinforce<'a> {
    Reinforce::new(net, g, None, TrainConfig { lr: cfg.inner_lr, ..cfg.train }).unwrap()
}

#[test]
fn zero_inner_rate_leaves_parameters_bit_exact() {
    let (kg, net) = setup();
    let cfg = config(0.0, 1e-3, OptimizerKind::Adam);
    let learner = MetaLearner::new(&net, &kg.dataset.graph, None, cfg).unwrap();
    let theta = net.init(1);
    let support = &kg.normal_tasks()[&kg.normal[0]][..4];
    let adapted = learner
        .inner_adapt(&theta, support, 0.0, 3, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(adapted, theta);
    assert_eq!(adapted.max_abs_diff(&theta).unwrap(), 0.0);
}

#[test]
fn zero_outer_rate_leaves_parameters_unchanged() {
    let (kg, net) = setup();
    for opt in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = config(0.1, 0.0, opt);
        let learner = MetaLearner::new(&net, &kg.dataset.graph, None, cfg).unwrap();
        let theta = net.init(2);
        let eps = episodes(&learner, &kg, 2);
        let (next, _) = learner
            .meta_step(&Sampled, &theta, &eps, &mut Optimizer::new(opt), 0.01, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(next, theta);
    }
}

#[test]
fn zero_inner_rate_meta_step_is_a_reinforce_step_on_the_query_set() {
    let (kg, net) = setup();
    let g = &kg.dataset.graph;
    let cfg = MetaConfig { task_batch: 1, ..config(0.0, 0.05, OptimizerKind::Sgd) };
    let learner = MetaLearner::new(&net, g, None, cfg).unwrap();
    let theta = net.init(3);
    let eps = episodes(&learner, &kg, 3);
    let tr = trainer(&net, g, &cfg);
    let frozen = Frozen {
        support: vec![sample_trajs(&tr, &theta, &eps[0].support, 10)],
        query: vec![sample_trajs(&tr, &theta, &eps[0].query, 11)],
    };
    let (meta, _) = learner
        .meta_step(&frozen, &theta, &eps, &mut Optimizer::new(OptimizerKind::Sgd), 0.01, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let (g_q, _) = tr
        .gradient_from_trajectories(&theta, &frozen.query[0], &mut BaselineState::default(), 0.01)
        .unwrap();
    let plain = sgd_step(&theta, &g_q, 0.05).unwrap();
    assert!(meta.max_abs_diff(&plain).unwrap() < 1e-12);
    assert!(meta.max_abs_diff(&theta).unwrap() > 0.0);
}

#[test]
fn frozen_meta_gradient_is_query_gradient_at_adapted_parameters() {
    let (kg, net) = setup();
    let g = &kg.dataset.graph;
    let cfg = config(0.2, 1e-3, OptimizerKind::Adam);
    let learner = MetaLearner::new(&net, g, None, cfg).unwrap();
    let theta = net.init(4);
    let eps = episodes(&learner, &kg, 4);
    let tr = trainer(&net, g, &cfg);
    let frozen = Frozen {
        support: eps.iter().enumerate().map(|(i, e)| sample_trajs(&tr, &theta, &e.support, i as u64)).collect(),
        query: eps.iter().enumerate().map(|(i, e)| sample_trajs(&tr, &theta, &e.query, 50 + i as u64)).collect(),
    };
    let (total, _) = learner
        .meta_gradient(&frozen, &theta, &eps, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let mut expected = metakgr::tensor::Grads::zeros_like(&theta);
    for i in 0..eps.len() {
        let (g_s, _) = tr
            .gradient_from_trajectories(&theta, &frozen.support[i], &mut BaselineState::default(), 0.0)
            .unwrap();
        let adapted = sgd_step(&theta, &g_s, 0.2).unwrap();
        let (g_q, _) = tr
            .gradient_from_trajectories(&adapted, &frozen.query[i], &mut BaselineState::default(), 0.0)
            .unwrap();
        expected.accumulate(&g_q).unwrap();
    }
    for (name, t) in total.iter() {
        for (a, b) in t.data().iter().zip(expected.get(name).unwrap().data()) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn meta_gradient_is_additive_over_tasks() {
    let (kg, net) = setup();
    let g = &kg.dataset.graph;
    let cfg = config(0.1, 1e-3, OptimizerKind::Adam);
    let learner = MetaLearner::new(&net, g, None, cfg).unwrap();
    let theta = net.init(6);
    let eps = episodes(&learner, &kg, 6);
    let tr = trainer(&net, g, &cfg);
    let s: Vec<_> = eps.iter().enumerate().map(|(i, e)| sample_trajs(&tr, &theta, &e.support, i as u64)).collect();
    let q: Vec<_> = eps.iter().enumerate().map(|(i, e)| sample_trajs(&tr, &theta, &e.query, 9 + i as u64)).collect();
    let both = Frozen { support: s.clone(), query: q.clone() };
    let (sum, _) = learner.meta_gradient(&both, &theta, &eps, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut parts = metakgr::tensor::Grads::zeros_like(&theta);
    for i in 0..eps.len() {
        let one = Frozen { support: vec![s[i].clone()], query: vec![q[i].clone()] };
        let (g_i, _) = learner
            .meta_gradient(&one, &theta, &eps[i..=i], 0.01, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        parts.accumulate(&g_i).unwrap();
    }
    for (name, t) in sum.iter() {
        for (a, b) in t.data().iter().zip(parts.get(name).unwrap().data()) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn meta_training_is_seeded_and_pure() {
    let (kg, net) = setup();
    let cfg = config(0.1, 1e-2, OptimizerKind::Adam);
    let learner = MetaLearner::new(&net, &kg.dataset.graph, None, cfg).unwrap();
    let init = net.init(7);
    let fp = init.fingerprint();
    let tasks = kg.normal_tasks();
    let a = learner.meta_train(&tasks, init.clone(), None, |_| {}).unwrap();
    let b = learner.meta_train(&tasks, init.clone(), None, |_| {}).unwrap();
    assert_eq!(init.fingerprint(), fp);
    assert_eq!(a.params, b.params);
    assert_eq!(a.steps_run, 3);
    assert_eq!(a.log.len(), 3);
    assert_ne!(a.params, init);
}

#[test]
fn zero_adaptation_steps_return_the_initialization() {
    let (kg, net) = setup();
    let learner = MetaLearner::new(&net, &kg.dataset.graph, None, config(0.1, 1e-3, OptimizerKind::Adam)).unwrap();
    let theta = net.init(8);
    let rare: BTreeMap<RelationId, Vec<Triple>> = kg.fewshot.iter().map(|&r| (r, kg.fewshot_train(r))).collect();
    for ts in rare.values() {
        let out = learner.adapt_fewshot(&theta, ts, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, theta);
        let moved = learner.adapt_fewshot(&theta, ts, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(moved, theta);
    }
}
