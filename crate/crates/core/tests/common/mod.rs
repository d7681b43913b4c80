#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use metakgr::env::{AnswerMask, Env, EnvConfig, Query, State};
use metakgr::eval::{Candidate, RankedAnswer};
use metakgr::kg::{parse_triples_str, EntityId, Graph, RelationId, Triple, Vocab};
use metakgr::policy::{History, Mode, PolicyConfig, PolicyNet, Trajectory};
use metakgr::reinforce::{Baseline, BaselineState, Reinforce, TrainConfig};
use metakgr::tensor::{ParamSet, ParamVars, Segments, Tape, Tensor, Var};
use metakgr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn graph_from(text: &str, inverses: bool) -> Graph {
    let (mut e, mut r) = (Vocab::new(), Vocab::new());
    let t = parse_triples_str(text, &mut e, &mut r).unwrap();
    Graph::build(e, r, &t, inverses).unwrap()
}

/// Random multigraph over `n` entities; some entities may be isolated.
pub fn random_graph(seed: u64, n: usize, relations: usize, edges: usize, inverses: bool) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = Vocab::from_names((0..n).map(|i| format!("n{i}"))).unwrap();
    let rels = Vocab::from_names((0..relations).map(|i| format!("p{i}"))).unwrap();
    let triples: Vec<Triple> = (0..edges)
        .map(|_| {
            Triple::new(
                EntityId(rng.random_range(0..n as u32)),
                RelationId(rng.random_range(0..relations as u32)),
                EntityId(rng.random_range(0..n as u32)),
            )
        })
        .collect();
    Graph::build(ents, rels, &triples, inverses).unwrap()
}

/// Policy parameters with every tensor multiplied by `scale`, giving peaked
/// but non-degenerate distributions.
pub fn scaled_params(net: &PolicyNet, seed: u64, scale: f64) -> ParamSet {
    let base = net.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut out = ParamSet::new();
    for (name, t) in base.iter() {
        let data = t
            .data()
            .iter()
            .map(|v| v * scale + rng.random_range(-0.05..0.05))
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap())
            .unwrap();
    }
    out
}

/// Ranking by enumerating every length-T path with the single-state API.
/// An entity's score is its best path log-probability, or with `sum` the
/// log of the total probability of the paths ending there.
pub fn exhaustive_ranking(
    net: &PolicyNet,
    params: &ParamSet,
    env: &Env<'_>,
    query: &Query,
    sum: bool,
) -> Vec<(EntityId, f64)> {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        net: &PolicyNet,
        params: &ParamSet,
        env: &Env<'_>,
        query: &Query,
        state: State,
        hist: History,
        log_prob: f64,
        ends: &mut BTreeMap<EntityId, Vec<f64>>,
    ) {
        let actions = env.action_space(&state, query.answer);
        let probs = net.action_distribution(params, &state, &hist, &actions).unwrap();
        for (a, p) in actions.iter().zip(probs) {
            let next = env.step(&state, a).unwrap();
            let lp = log_prob + p.ln();
            if next.step == env.horizon() {
                ends.entry(next.current).or_default().push(lp);
            } else {
                let emb = net.action_embedding(params, a).unwrap();
                let h = net.encode_step(params, &hist, &emb).unwrap();
                walk(net, params, env, query, next, h, lp, ends);
            }
        }
    }
    let mut ends = BTreeMap::new();
    let s0 = env.reset(query).unwrap();
    let h0 = net.initial_history(params).unwrap();
    walk(net, params, env, query, s0, h0, 0.0, &mut ends);
    let mut v: Vec<(EntityId, f64)> = ends
        .into_iter()
        .map(|(e, lps)| {
            let score = if sum {
                lps.iter().map(|l| l.exp()).sum::<f64>().ln()
            } else {
                lps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            (e, score)
        })
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Compares a beam ranking against the oracle. Positions may differ only
/// between entities whose scores agree within `tol`.
pub fn same_ranking(beam: &RankedAnswer, oracle: &[(EntityId, f64)], tol: f64) -> std::result::Result<(), String> {
    if beam.candidates.len() != oracle.len() {
        return Err(format!("{} candidates vs {} in the oracle", beam.candidates.len(), oracle.len()));
    }
    let by_entity: BTreeMap<EntityId, f64> = oracle.iter().copied().collect();
    for (i, (c, (oe, os))) in beam.candidates.iter().zip(oracle).enumerate() {
        let Some(&expected) = by_entity.get(&c.entity) else {
            return Err(format!("entity {:?} is not reachable", c.entity));
        };
        if (expected - c.score).abs() > tol {
            return Err(format!("score of {:?}: {} vs {}", c.entity, c.score, expected));
        }
        if c.entity != *oe && (c.score - os).abs() > tol {
            return Err(format!("position {i}: {:?} vs {:?}", c.entity, oe));
        }
    }
    Ok(())
}

/// Three answers whose gold entities rank 1, 4 and nowhere.
pub fn metric_fixture() -> Vec<RankedAnswer> {
    let cands = |ids: &[u32]| -> Vec<Candidate> {
        ids.iter()
            .enumerate()
            .map(|(i, &e)| Candidate {
                entity: EntityId(e),
                score: -(i as f64),
                path: Vec::new(),
            })
            .collect()
    };
    vec![
        RankedAnswer {
            query: Query::new(EntityId(0), RelationId(0), Some(EntityId(1))),
            candidates: cands(&[1, 2, 3]),
        },
        RankedAnswer {
            query: Query::new(EntityId(0), RelationId(1), Some(EntityId(4))),
            candidates: cands(&[1, 2, 3, 4, 5]),
        },
        RankedAnswer {
            query: Query::new(EntityId(0), RelationId(2), Some(EntityId(9))),
            candidates: cands(&[1, 2]),
        },
    ]
}

/// One-step MDP at `s`: the self-loop (reward 0) or `go` to `t` (reward 1).
pub fn bandit_graph() -> Graph {
    graph_from("s\tgo\tt\n", false)
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "matmul",
    "transpose",
    "concat",
    "slice_cols",
    "reshape",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "sum",
    "mean",
    "sum_last",
    "gather_rows",
    "gather_cols",
    "segment_log_softmax",
    "segment_sum",
    "bce_with_logits",
];

pub type Objective = Box<dyn Fn(&mut Tape, &ParamVars) -> Result<Var>>;

/// Scalar objective exercising one primitive, with random parameters. The
/// primitive's output is contracted against fixed random weights so every
/// output coordinate matters.
pub fn primitive_case(name: &str, seed: u64) -> (ParamSet, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    };
    let mut p = ParamSet::new();
    p.insert("a", u(&[3, 4], -1.0, 1.0)).unwrap();
    p.insert("b", u(&[3, 4], -1.0, 1.0)).unwrap();
    p.insert("m", u(&[4, 5], -1.0, 1.0)).unwrap();
    p.insert("row", u(&[4], -1.0, 1.0)).unwrap();
    p.insert("pos", u(&[3, 4], 0.5, 2.0)).unwrap();
    p.insert("v", u(&[7], -2.0, 2.0)).unwrap();
    let w34 = u(&[3, 4], -1.0, 1.0);
    let w35 = u(&[3, 5], -1.0, 1.0);
    let w43 = u(&[4, 3], -1.0, 1.0);
    let w38 = u(&[3, 8], -1.0, 1.0);
    let w32 = u(&[3, 2], -1.0, 1.0);
    let w26 = u(&[2, 6], -1.0, 1.0);
    let w7 = u(&[7], -1.0, 1.0);
    let w3 = u(&[3], -1.0, 1.0);
    let w3s = u(&[3], -1.0, 1.0);
    let targets = u(&[3, 4], 0.0, 1.0);
    let seg = Arc::new(Segments::from_lengths([2, 1, 4]));

    fn dot(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
        let c = tape.constant(w.clone());
        let m = tape.mul(x, c)?;
        Ok(tape.sum(m))
    }

    let name = name.to_string();
    let f: Objective = Box::new(move |tape: &mut Tape, v: &ParamVars| -> Result<Var> {
        let a = v.get("a")?;
        let b = v.get("b")?;
        match name.as_str() {
            "add" => {
                let y = tape.add(a, b)?;
                dot(tape, y, &w34)
            }
            "sub" => {
                let y = tape.sub(a, b)?;
                dot(tape, y, &w34)
            }
            "mul" => {
                let y = tape.mul(a, b)?;
                dot(tape, y, &w34)
            }
            "scale" => {
                let y = tape.scale(a, -1.7);
                dot(tape, y, &w34)
            }
            "add_row" => {
                let y = tape.add_row(a, v.get("row")?)?;
                dot(tape, y, &w34)
            }
            "matmul" => {
                let y = tape.matmul(a, v.get("m")?)?;
                dot(tape, y, &w35)
            }
            "transpose" => {
                let y = tape.transpose(a)?;
                dot(tape, y, &w43)
            }
            "concat" => {
                let y = tape.concat(&[a, b])?;
                dot(tape, y, &w38)
            }
            "slice_cols" => {
                let y = tape.slice_cols(a, 1, 2)?;
                dot(tape, y, &w32)
            }
            "reshape" => {
                let y = tape.reshape(a, vec![2, 6])?;
                dot(tape, y, &w26)
            }
            "relu" => {
                let y = tape.relu(a);
                dot(tape, y, &w34)
            }
            "sigmoid" => {
                let y = tape.sigmoid(a);
                dot(tape, y, &w34)
            }
            "tanh" => {
                let y = tape.tanh(a);
                dot(tape, y, &w34)
            }
            "exp" => {
                let y = tape.exp(a);
                dot(tape, y, &w34)
            }
            "log" => {
                let y = tape.log(v.get("pos")?);
                dot(tape, y, &w34)
            }
            "softmax" => {
                let y = tape.softmax(a);
                dot(tape, y, &w34)
            }
            "sum" => {
                let y = tape.mul(a, a)?;
                Ok(tape.sum(y))
            }
            "mean" => {
                let y = tape.mul(a, b)?;
                tape.mean(y)
            }
            "sum_last" => {
                let y = tape.sum_last(a)?;
                dot(tape, y, &w3)
            }
            "gather_rows" => {
                let y = tape.gather_rows(v.get("m")?, &[3, 0, 3])?;
                dot(tape, y, &w35)
            }
            "gather_cols" => {
                let y = tape.gather_cols(v.get("m")?, &[4, 1, 1])?;
                dot(tape, y, &w43)
            }
            "segment_log_softmax" => {
                let y = tape.segment_log_softmax(v.get("v")?, &seg)?;
                dot(tape, y, &w7)
            }
            "segment_sum" => {
                let y = tape.segment_sum(v.get("v")?, &seg)?;
                dot(tape, y, &w3s)
            }
            "bce_with_logits" => tape.bce_with_logits(a, targets.clone()),
            other => panic!("unknown primitive {other}"),
        }
    });
    (p, f)
}

/// Writes a small synthetic dataset as TSV files into `dir`.
pub fn write_toy_tsv(dir: &std::path::Path) {
    use metakgr::synthetic::{compositional_kg, SyntheticConfig};
    let kg = compositional_kg(&SyntheticConfig {
        entities: 30,
        normal_relations: 4,
        fewshot_relations: 2,
        fewshot_train: 4,
        fewshot_test: 4,
        ..Default::default()
    })
    .unwrap();
    let g = &kg.dataset.graph;
    let render = |ts: &[Triple]| -> String {
        ts.iter()
            .map(|t| {
                format!(
                    "{}\t{}\t{}\n",
                    g.entity_name(t.head),
                    g.relation_name(t.relation),
                    g.entity_name(t.tail)
                )
            })
            .collect()
    };
    std::fs::write(dir.join("train.tsv"), render(&kg.dataset.train)).unwrap();
    std::fs::write(dir.join("test.tsv"), render(&kg.dataset.test)).unwrap();
}

pub const PIPELINE_SETTINGS: &[&str] = &[
    "dim=4",
    "hidden=4",
    "mlp_hidden=8",
    "embed_kind=distmult",
    "embed_dim=4",
    "embed_epochs=2",
    "rollouts=2",
    "outer_steps=3",
    "support_size=4",
    "query_size=4",
    "adapt_steps=1",
    "horizon=2",
];

/// Runs every CLI command in `dir` and returns each command's stdout plus
/// the files it wrote, keyed by name.
pub fn cli_pipeline(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    write_toy_tsv(dir);
    let steps: &[(&str, &[&str], Option<&str>)] = &[
        ("ingest", &["ingest", "--train", "train.tsv", "--test", "test.tsv", "--out", "graph.json"], Some("graph.json")),
        ("split", &["split", "--graph", "graph.json", "--K", "20", "--out", "split.txt"], Some("split.txt")),
        ("pretrain", &["pretrain", "--graph", "graph.json", "--split", "split.txt", "--out", "reward.ckpt"], Some("reward.ckpt")),
        (
            "meta-train",
            &[
                "meta-train", "--graph", "graph.json", "--split", "split.txt", "--reward-model", "reward.ckpt",
                "--out", "theta.ckpt", "--log", "meta.log",
            ],
            Some("theta.ckpt"),
        ),
        (
            "adapt",
            &[
                "adapt", "--graph", "graph.json", "--split", "split.txt", "--reward-model", "reward.ckpt",
                "--checkpoint", "theta.ckpt", "--relation", "rare0", "--out", "adapted.ckpt",
            ],
            Some("adapted.ckpt"),
        ),
        (
            "eval",
            &[
                "eval", "--graph", "graph.json", "--split", "split.txt", "--reward-model", "reward.ckpt",
                "--checkpoint", "theta.ckpt", "--answers", "answers.jsonl",
            ],
            Some("answers.jsonl"),
        ),
        (
            "sweep",
            &[
                "sweep", "--graph", "graph.json", "--split", "split.txt", "--reward-model", "reward.ckpt",
                "--checkpoint", "theta.ckpt", "--k-list", "1,2,max",
            ],
            None,
        ),
        (
            "explain",
            &[
                "explain", "--graph", "graph.json", "--checkpoint", "adapted.ckpt", "--source", "e000",
                "--relation", "rare0",
            ],
            None,
        ),
    ];
    let mut out = Vec::new();
    for (name, args, file) in steps {
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_metakgr"));
        cmd.current_dir(dir).args(*args).args(["--seed", "7"]);
        for s in PIPELINE_SETTINGS {
            cmd.args(["--set", s]);
        }
        let res = cmd.output().unwrap();
        assert!(
            res.status.success(),
            "{name} failed: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        out.push((format!("{name} stdout"), res.stdout));
        if let Some(f) = file {
            out.push((f.to_string(), std::fs::read(dir.join(f)).unwrap()));
        }
    }
    out.push(("meta.log".to_string(), std::fs::read(dir.join("meta.log")).unwrap()));
    out
}

/// Sampled trajectories for random queries without answers.
pub fn sampled_trajectories(
    net: &PolicyNet,
    params: &ParamSet,
    env: &Env<'_>,
    seed: u64,
    n: usize,
) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = env.graph();
    (0..n)
        .map(|_| {
            let q = Query::new(
                EntityId(rng.random_range(0..g.num_entities() as u32)),
                RelationId(rng.random_range(0..g.num_forward_relations() as u32)),
                None,
            );
            net.sample_rollout(params, env, &q, Mode::Sample { dropout: 0.0 }, &mut rng)
                .unwrap()
        })
        .collect()
}

pub struct BanditCheck {
    pub hit_fraction: f64,
    pub pi_go: f64,
    pub worst_sigma_ratio: f64,
}

/// Empirical REINFORCE gradient over `n` rollouts against the closed form
/// `E[∇ loss] = -π_go ∇ log π_go`. Every coordinate of the estimate is
/// `-(hits/n) ∇ log π_go`, so the per-coordinate standard deviation is
/// `|∇ log π_go| sqrt(π_go (1 - π_go) / n)`.
pub fn bandit_check(n: usize, seed: u64) -> BanditCheck {
    let g = graph_from("s\tgo\tt\nx\tq\ty\n", false);
    let net = PolicyNet::for_graph(PolicyConfig { dim: 4, hidden: 4, mlp_hidden: 8 }, &g).unwrap();
    let params = net.init(seed);
    let s = g.entity_id("s").unwrap();
    let t = g.entity_id("t").unwrap();
    let q = g.relation_id("q").unwrap();
    let cfg = TrainConfig {
        env: EnvConfig { horizon: 1, action_cap: 256, answer_mask: AnswerMask::Off },
        rollouts_per_triple: n,
        baseline: Baseline::None,
        entropy_weight: 0.0,
        ..Default::default()
    };
    let trainer = Reinforce::new(&net, &g, None, cfg).unwrap();
    let env = trainer.env().unwrap();
    let query = Query::new(s, q, Some(t));
    let state = env.reset(&query).unwrap();
    let space = env.action_space(&state, query.answer);
    assert_eq!(space.len(), 2);
    let probs = net
        .action_distribution(&params, &state, &net.initial_history(&params).unwrap(), &space)
        .unwrap();
    let go = space.iter().position(|a| a.target == t).unwrap();
    let pi_go = probs[go];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (emp, _, trajs) = trainer
        .gradient(&params, &[Triple::new(s, q, t)], &mut BaselineState::default(), 0.0, &mut rng)
        .unwrap();
    let hits = trajs.iter().filter(|tr| tr.final_entity == t).count();

    let go_traj = trajs.iter().find(|tr| tr.final_entity == t).unwrap().clone();
    let (unit, _) = trainer
        .gradient_from_trajectories(&params, &[go_traj], &mut BaselineState::default(), 0.0)
        .unwrap();
    let sd = (pi_go * (1.0 - pi_go) / n as f64).sqrt();
    let mut worst: f64 = 0.0;
    for (name, u) in unit.iter() {
        let e = emp.get(name).unwrap();
        for (ui, ei) in u.data().iter().zip(e.data()) {
            let closed = pi_go * ui;
            let sigma = ui.abs() * sd;
            if sigma > 0.0 {
                worst = worst.max((ei - closed).abs() / sigma);
            } else {
                assert!((ei - closed).abs() < 1e-15);
            }
        }
    }
    BanditCheck {
        hit_fraction: hits as f64 / n as f64,
        pi_go,
        worst_sigma_ratio: worst,
    }
}
