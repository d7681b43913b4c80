//! The walking agent: an LSTM over the path so far and a two-layer scorer
//! that ranks the candidate actions of the current state.
//!
//! For a state with current entity `e_t`, history `h_t` and query relation
//! `r_q`, the policy is
//!
//! ```text
//! π(· | s_t) = softmax(A_t · W2 · relu(W1 · [e_t; h_t; r_q]))
//! ```
//!
//! where each row of `A_t` is `[relation; target]` for one action. The
//! history advances as `h_{t+1} = LSTM(h_t, [r_{t+1}; e_{t+1}])`; the first
//! history comes from learned initial states fed a learned START action.
//!
//! Rollouts run a batch of queries in lockstep on one tape, since every
//! episode has exactly `horizon` steps.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, Query, State};
use crate::error::{Error, Result};
use crate::kg::{EntityId, Graph};
use crate::reinforce::action_dropout;
use crate::tensor::{Checkpoint, ParamSet, ParamVars, Segments, Tape, Tensor, Var};

pub const ENTITY_EMB: &str = "entity_emb";
pub const RELATION_EMB: &str = "relation_emb";
pub const LSTM_WX: &str = "lstm_wx";
pub const LSTM_WH: &str = "lstm_wh";
pub const LSTM_BIAS: &str = "lstm_bias";
pub const LSTM_H0: &str = "lstm_h0";
pub const LSTM_C0: &str = "lstm_c0";
pub const START_ACTION: &str = "start_action";
pub const W1: &str = "w1";
pub const W2: &str = "w2";

pub const POLICY_KIND: &str = "policy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Entity and relation embedding size.
    pub dim: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Width of the scorer's hidden layer.
    pub mlp_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hidden: 64,
            mlp_hidden: 64,
        }
    }
}

/// Architecture of the policy; parameters live in a separate [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub num_entities: usize,
    pub num_relations: usize,
}

/// LSTM hidden and cell state for one or more walkers.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy)]
pub(crate) struct TapeHistory {
    pub(crate) h: Var,
    pub(crate) c: Var,
}

/// How actions are chosen during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Sample from the policy; `dropout` masks non-self-loop actions at
    /// sampling time only.
    Sample { dropout: f64 },
    /// Highest probability, ties to the lowest action index.
    Greedy,
    /// Re-take the actions recorded in existing trajectories.
    Replay(&'a [Trajectory]),
}

/// One rolled-out episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: Query,
    pub actions: Vec<Action>,
    /// `log π(a_t | s_t)` under the unmasked policy, one per step.
    pub log_probs: Vec<f64>,
    pub final_entity: EntityId,
    pub reward: f64,
}

impl Trajectory {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// `(e₁) -r₁-> (e₂) -r₂-> (e₃)`.
    pub fn render(&self, graph: &Graph) -> String {
        render_path(graph, self.query.source, &self.actions)
    }
}

pub fn render_path(graph: &Graph, source: EntityId, actions: &[Action]) -> String {
    let mut s = format!("({})", graph.entity_name(source));
    for a in actions {
        s.push_str(&format!(
            " -{}-> ({})",
            graph.relation_name(a.relation),
            graph.entity_name(a.target)
        ));
    }
    s
}

/// Trajectories plus their tape nodes.
pub struct Rollouts {
    pub trajectories: Vec<Trajectory>,
    /// `Σ_t log π(a_t | s_t)` per trajectory, shape `[B]`.
    pub log_prob_sum: Var,
    /// `Σ_t H(π(· | s_t))` per trajectory, shape `[B]`.
    pub entropy_sum: Var,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, num_entities: usize, num_relations: usize) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.mlp_hidden == 0 {
            return Err(Error::invalid("policy sizes must be positive"));
        }
        Ok(Self {
            config,
            num_entities,
            num_relations,
        })
    }

    pub fn for_graph(config: PolicyConfig, graph: &Graph) -> Result<Self> {
        Self::new(config, graph.num_entities(), graph.num_relations())
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let PolicyConfig {
            dim: d,
            hidden: h,
            mlp_hidden: h1,
        } = self.config;
        vec![
            (ENTITY_EMB, vec![self.num_entities, d], d),
            (RELATION_EMB, vec![self.num_relations, d], d),
            (LSTM_WX, vec![2 * d, 4 * h], 2 * d),
            (LSTM_WH, vec![h, 4 * h], h),
            (LSTM_BIAS, vec![4 * h], 0),
            (LSTM_H0, vec![1, h], 0),
            (LSTM_C0, vec![1, h], 0),
            (START_ACTION, vec![1, 2 * d], 2 * d),
            (W1, vec![2 * d + h, h1], 2 * d + h),
            (W2, vec![h1, 2 * d], h1),
        ]
    }

    /// Uniform(±1/sqrt(fan_in)) weights, zero initial states and a forget-gate
    /// bias of +1.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.config.hidden;
        let mut p = ParamSet::new();
        for (name, shape, fan_in) in self.shapes() {
            let t = if name == LSTM_BIAS {
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[h..2 * h].fill(1.0);
                b
            } else if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            };
            p.insert(name, t).expect("unique names");
        }
        p
    }

    /// Checks that `params` has exactly this architecture's tensors.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let shapes = self.shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid("policy parameter set has unexpected tensors"));
        }
        for (name, shape, _) in shapes {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "policy parameters",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }

    pub(crate) fn lstm(&self, tape: &mut Tape, vars: &ParamVars, hist: TapeHistory, x: Var) -> Result<TapeHistory> {
        let h = self.config.hidden;
        let xw = tape.matmul(x, vars.get(LSTM_WX)?)?;
        let hw = tape.matmul(hist.h, vars.get(LSTM_WH)?)?;
        let pre = tape.add(xw, hw)?;
        let gates = tape.add_row(pre, vars.get(LSTM_BIAS)?)?;
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, h)?;
        let g = tape.slice_cols(gates, 2 * h, h)?;
        let o = tape.slice_cols(gates, 3 * h, h)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(f, hist.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(TapeHistory { h, c })
    }

    /// History after the START action, replicated for `batch` walkers.
    pub(crate) fn start(&self, tape: &mut Tape, vars: &ParamVars, batch: usize) -> Result<TapeHistory> {
        let rows = vec![0; batch];
        let h = tape.gather_rows(vars.get(LSTM_H0)?, &rows)?;
        let c = tape.gather_rows(vars.get(LSTM_C0)?, &rows)?;
        let a = tape.gather_rows(vars.get(START_ACTION)?, &rows)?;
        self.lstm(tape, vars, TapeHistory { h, c }, a)
    }

    /// `[relation; target]` rows, shape `M × 2d`.
    pub(crate) fn action_rows(&self, tape: &mut Tape, vars: &ParamVars, actions: &[Action]) -> Result<Var> {
        let rels: Vec<usize> = actions.iter().map(|a| a.relation.index()).collect();
        let ents: Vec<usize> = actions.iter().map(|a| a.target.index()).collect();
        let r = tape.gather_rows(vars.get(RELATION_EMB)?, &rels)?;
        let e = tape.gather_rows(vars.get(ENTITY_EMB)?, &ents)?;
        tape.concat(&[r, e])
    }

    /// Per-segment log-probabilities over flattened action rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn action_log_probs(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        states: &[State],
        h: Var,
        action_rows: Var,
        segments: &Arc<Segments>,
    ) -> Result<Var> {
        let cur: Vec<usize> = states.iter().map(|s| s.current.index()).collect();
        let rq: Vec<usize> = states.iter().map(|s| s.query_relation.index()).collect();
        let e = tape.gather_rows(vars.get(ENTITY_EMB)?, &cur)?;
        let r = tape.gather_rows(vars.get(RELATION_EMB)?, &rq)?;
        let x = tape.concat(&[e, h, r])?;
        let z = tape.matmul(x, vars.get(W1)?)?;
        let z = tape.relu(z);
        let q = tape.matmul(z, vars.get(W2)?)?;
        let qrep = tape.gather_rows(q, &segments.owners())?;
        let prod = tape.mul(action_rows, qrep)?;
        let logits = tape.sum_last(prod)?;
        tape.segment_log_softmax(logits, segments)
    }

    fn check_actions(&self, actions: &[Action]) -> Result<()> {
        for a in actions {
            if a.relation.index() >= self.num_relations || a.target.index() >= self.num_entities {
                return Err(Error::invalid(format!("action {a:?} is outside the vocabularies")));
            }
        }
        Ok(())
    }

    /// Learned starting history (after the START action) for one walker.
    pub fn initial_history(&self, params: &ParamSet) -> Result<History> {
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let hist = self.start(&mut tape, &vars, 1)?;
        Ok(History {
            h: tape.value(hist.h).clone(),
            c: tape.value(hist.c).clone(),
        })
    }

    /// One LSTM update with an explicit `[relation; entity]` input of length `2d`.
    pub fn encode_step(&self, params: &ParamSet, hist: &History, action_embedding: &[f64]) -> Result<History> {
        let d2 = 2 * self.config.dim;
        let hdim = self.config.hidden;
        if action_embedding.len() != d2 {
            return Err(Error::invalid(format!(
                "action embedding has length {}, expected {d2}",
                action_embedding.len()
            )));
        }
        if hist.h.len() != hdim || hist.c.len() != hdim {
            return Err(Error::invalid("history size does not match the LSTM"));
        }
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let h = tape.constant(hist.h.clone().reshaped(vec![1, hdim])?);
        let c = tape.constant(hist.c.clone().reshaped(vec![1, hdim])?);
        let x = tape.constant(Tensor::matrix(1, d2, action_embedding.to_vec())?);
        let next = self.lstm(&mut tape, &vars, TapeHistory { h, c }, x)?;
        Ok(History {
            h: tape.value(next.h).clone(),
            c: tape.value(next.c).clone(),
        })
    }

    /// `[r; e]` embedding of an action under `params`.
    pub fn action_embedding(&self, params: &ParamSet, action: &Action) -> Result<Vec<f64>> {
        self.check_actions(std::slice::from_ref(action))?;
        let mut out = params.require(RELATION_EMB)?.row(action.relation.index()).to_vec();
        out.extend_from_slice(params.require(ENTITY_EMB)?.row(action.target.index()));
        Ok(out)
    }

    /// Probabilities over `actions` for one state and history.
    pub fn action_distribution(
        &self,
        params: &ParamSet,
        state: &State,
        history: &History,
        actions: &[Action],
    ) -> Result<Vec<f64>> {
        if actions.is_empty() {
            return Err(Error::contract("empty action space"));
        }
        self.check_actions(actions)?;
        let hdim = self.config.hidden;
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let h = tape.constant(history.h.clone().reshaped(vec![1, hdim])?);
        let rows = self.action_rows(&mut tape, &vars, actions)?;
        let seg = Arc::new(Segments::from_lengths([actions.len()]));
        let lp = self.action_log_probs(&mut tape, &vars, std::slice::from_ref(state), h, rows, &seg)?;
        Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Rolls out every query for the full horizon on one tape.
    ///
    /// Log-probabilities always come from the unmasked policy, whatever the
    /// mode. Rewards are left at zero.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        env: &Env<'_>,
        queries: &[Query],
        mode: Mode<'_>,
        rng: &mut R,
    ) -> Result<Rollouts> {
        if queries.is_empty() {
            return Err(Error::invalid("rollout over zero queries"));
        }
        if let Mode::Replay(trajs) = mode {
            if trajs.len() != queries.len() {
                return Err(Error::invalid("replay needs one trajectory per query"));
            }
            if trajs.iter().any(|t| t.actions.len() != env.horizon()) {
                return Err(Error::invalid("replayed trajectory length differs from the horizon"));
            }
        }
        let b = queries.len();
        let mut states: Vec<State> = queries.iter().map(|q| env.reset(q)).collect::<Result<_>>()?;
        let mut hist = self.start(tape, vars, b)?;
        let mut actions_taken: Vec<Vec<Action>> = vec![Vec::with_capacity(env.horizon()); b];
        let mut step_lps: Vec<Vec<f64>> = vec![Vec::with_capacity(env.horizon()); b];
        let mut lp_sum: Option<Var> = None;
        let mut ent_sum: Option<Var> = None;

        for t in 0..env.horizon() {
            let spaces: Vec<Vec<Action>> = states
                .iter()
                .zip(queries)
                .map(|(s, q)| env.action_space(s, q.answer))
                .collect();
            let flat: Vec<Action> = spaces.iter().flatten().copied().collect();
            let seg = Arc::new(Segments::from_lengths(spaces.iter().map(Vec::len)));
            let rows = self.action_rows(tape, vars, &flat)?;
            let lp = self.action_log_probs(tape, vars, &states, hist.h, rows, &seg)?;

            let lp_vals = tape.value(lp).data().to_vec();
            let mut chosen = Vec::with_capacity(b);
            for i in 0..b {
                let range = seg.range(i);
                let local = &lp_vals[range.clone()];
                let k = match mode {
                    Mode::Greedy => argmax(local),
                    Mode::Sample { dropout } => {
                        let probs: Vec<f64> = local.iter().map(|v| v.exp()).collect();
                        let dist = action_dropout(&probs, dropout, rng);
                        sample_index(&dist, rng)
                    }
                    Mode::Replay(trajs) => {
                        let want = trajs[i].actions[t];
                        spaces[i].iter().position(|a| *a == want).ok_or_else(|| {
                            Error::contract(format!("replayed action {want:?} not in the action space"))
                        })?
                    }
                };
                chosen.push(range.start + k);
                let a = spaces[i][k];
                actions_taken[i].push(a);
                step_lps[i].push(local[k]);
                states[i] = env.step(&states[i], &a)?;
            }

            let picked = tape.gather_rows(lp, &chosen)?;
            let probs = tape.exp(lp);
            let plogp = tape.mul(probs, lp)?;
            let neg_ent = tape.segment_sum(plogp, &seg)?;
            let ent = tape.scale(neg_ent, -1.0);
            lp_sum = Some(match lp_sum {
                Some(acc) => tape.add(acc, picked)?,
                None => picked,
            });
            ent_sum = Some(match ent_sum {
                Some(acc) => tape.add(acc, ent)?,
                None => ent,
            });

            if t + 1 < env.horizon() {
                let next_in = tape.gather_rows(rows, &chosen)?;
                hist = self.lstm(tape, vars, hist, next_in)?;
            }
        }

        let (log_prob_sum, entropy_sum) = match (lp_sum, ent_sum) {
            (Some(l), Some(e)) => (l, e),
            _ => {
                let z = tape.constant(Tensor::zeros(&[b]));
                (z, z)
            }
        };
        let trajectories = queries
            .iter()
            .zip(actions_taken)
            .zip(step_lps)
            .zip(&states)
            .map(|(((q, actions), log_probs), s)| Trajectory {
                query: *q,
                actions,
                log_probs,
                final_entity: s.current,
                reward: 0.0,
            })
            .collect();
        Ok(Rollouts {
            trajectories,
            log_prob_sum,
            entropy_sum,
        })
    }

    /// Single-query rollout outside any training tape.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        env: &Env<'_>,
        query: &Query,
        mode: Mode<'_>,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let r = self.rollout(&mut tape, &vars, env, std::slice::from_ref(query), mode, rng)?;
        Ok(r.trajectories.into_iter().next().unwrap())
    }

    pub fn to_checkpoint(&self, params: &ParamSet) -> Checkpoint {
        Checkpoint::new(POLICY_KIND, params.clone())
            .with_meta("dim", self.config.dim)
            .with_meta("hidden", self.config.hidden)
            .with_meta("mlp_hidden", self.config.mlp_hidden)
            .with_meta("num_entities", self.num_entities)
            .with_meta("num_relations", self.num_relations)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamSet)> {
        ck.expect_kind(POLICY_KIND)?;
        let net = Self::new(
            PolicyConfig {
                dim: ck.meta_parse("dim")?,
                hidden: ck.meta_parse("hidden")?,
                mlp_hidden: ck.meta_parse("mlp_hidden")?,
            },
            ck.meta_parse("num_entities")?,
            ck.meta_parse("num_relations")?,
        )?;
        net.check(&ck.params)
            .map_err(|e| Error::Checkpoint(format!("policy tensors: {e}")))?;
        Ok((net, ck.params.clone()))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index proportionally to `weights` (which need not be normalized).
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::kg::{parse_triples_str, RelationId, Vocab};

    fn graph(text: &str) -> Graph {
        let (mut e, mut r) = (Vocab::new(), Vocab::new());
        let t = parse_triples_str(text, &mut e, &mut r).unwrap();
        Graph::build(e, r, &t, true).unwrap()
    }

    fn small() -> PolicyConfig {
        PolicyConfig {
            dim: 3,
            hidden: 4,
            mlp_hidden: 5,
        }
    }

    #[test]
    fn singleton_space_is_certain() {
        let g = graph("a\tr\tb\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(1);
        let env = Env::new(&g, EnvConfig::default()).unwrap();
        let s = env.reset(&Query::new(EntityId(1), RelationId(0), None)).unwrap();
        let hist = net.initial_history(&p).unwrap();
        let acts = vec![Action { relation: g.self_loop(), target: s.current }];
        assert_eq!(net.action_distribution(&p, &s, &hist, &acts).unwrap(), vec![1.0]);
        assert!(net.action_distribution(&p, &s, &hist, &[]).is_err());
    }

    #[test]
    fn duplicate_actions_get_equal_probability() {
        let g = graph("a\tr\tb\na\ts\tc\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(2);
        let env = Env::new(&g, EnvConfig::default()).unwrap();
        let s = env.reset(&Query::new(EntityId(0), RelationId(0), None)).unwrap();
        let hist = net.initial_history(&p).unwrap();
        let mut acts = env.action_space(&s, None);
        acts.push(acts[1]);
        let probs = net.action_distribution(&p, &s, &hist, &acts).unwrap();
        assert_eq!(probs[1], probs[3]);
    }

    #[test]
    fn zero_weights_give_hand_computed_history() {
        let g = graph("a\tr\tb\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let mut p = net.init(0);
        for name in [LSTM_WX, LSTM_WH, LSTM_BIAS, LSTM_H0, LSTM_C0] {
            let shape = p.get(name).unwrap().shape().to_vec();
            p.set(name, Tensor::zeros(&shape)).unwrap();
        }
        // All gates are sigmoid(0) = 0.5 and the candidate is tanh(0) = 0, so
        // c stays 0 and h = 0.5 * tanh(0) = 0.
        let hist = net.initial_history(&p).unwrap();
        assert!(hist.h.data().iter().all(|&v| v == 0.0));
        // With a unit candidate bias: c = 0.5 * tanh(1), h = 0.5 * tanh(c).
        let mut bias = Tensor::zeros(&[16]);
        bias.data_mut()[8..12].fill(1.0);
        p.set(LSTM_BIAS, bias).unwrap();
        let hist = net.initial_history(&p).unwrap();
        let c = 0.5 * 1f64.tanh();
        let h = 0.5 * c.tanh();
        assert!(hist.c.data().iter().all(|&v| (v - c).abs() < 1e-15));
        assert!(hist.h.data().iter().all(|&v| (v - h).abs() < 1e-15));
    }

    #[test]
    fn encode_step_checks_width() {
        let g = graph("a\tr\tb\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(0);
        let hist = net.initial_history(&p).unwrap();
        assert!(net.encode_step(&p, &hist, &[0.0; 5]).is_err());
        let a = net.encode_step(&p, &hist, &[0.1; 6]).unwrap();
        let b = net.encode_step(&p, &hist, &[0.1; 6]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_loop_only_source_stays_put() {
        let (mut e, mut r) = (Vocab::new(), Vocab::new());
        let t = parse_triples_str("a\tr\tb\n", &mut e, &mut r).unwrap();
        let g = Graph::build(e, r, &t, false).unwrap();
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(3);
        let env = Env::new(&g, EnvConfig::default()).unwrap();
        let q = Query::new(g.entity_id("b").unwrap(), RelationId(0), None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = net
            .sample_rollout(&p, &env, &q, Mode::Sample { dropout: 0.0 }, &mut rng)
            .unwrap();
        assert_eq!(tr.final_entity, q.source);
        assert!(tr.actions.iter().all(|a| a.relation == g.self_loop()));
        assert_eq!(tr.log_probs, vec![0.0; 3]);
    }

    #[test]
    fn greedy_is_repeatable() {
        let g = graph("a\tr\tb\nb\ts\tc\na\ts\tc\nc\tr\ta\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(5);
        let env = Env::new(&g, EnvConfig::default()).unwrap();
        let q = Query::new(EntityId(0), RelationId(0), Some(EntityId(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = net.sample_rollout(&p, &env, &q, Mode::Greedy, &mut rng).unwrap();
        let b = net.sample_rollout(&p, &env, &q, Mode::Greedy, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = graph("a\tr\tb\n");
        let net = PolicyNet::for_graph(small(), &g).unwrap();
        let p = net.init(9);
        let ck = Checkpoint::from_bytes(&net.to_checkpoint(&p).to_bytes()).unwrap();
        let (net2, p2) = PolicyNet::from_checkpoint(&ck).unwrap();
        assert_eq!(net2, net);
        assert_eq!(p2.fingerprint(), p.fingerprint());
    }
}
