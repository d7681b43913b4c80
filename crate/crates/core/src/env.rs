//! Walk environment: states, action spaces with a self-loop, the transition
//! function and the terminal reward.

use serde::{Deserialize, Serialize};

use crate::embed::EmbedModel;
use crate::error::{Error, Result};
use crate::kg::{EntityId, Graph, RelationId, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of actions in every episode.
    pub horizon: usize,
    /// Maximum action-space size, self-loop included.
    pub action_cap: usize,
    pub answer_mask: AnswerMask,
}

/// When the query's own answer edge is hidden from the walker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMask {
    Off,
    /// Only in the first action space.
    FirstStep,
    /// In every action space taken at the source entity, so a self-loop or a
    /// round trip cannot reach the answer edge later.
    #[default]
    AtSource,
}

impl std::str::FromStr for AnswerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "first_step" => Ok(Self::FirstStep),
            "at_source" => Ok(Self::AtSource),
            other => Err(Error::invalid(format!("unknown answer mask `{other}`"))),
        }
    }
}

impl std::fmt::Display for AnswerMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::FirstStep => "first_step",
            Self::AtSource => "at_source",
        })
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            action_cap: 256,
            answer_mask: AnswerMask::AtSource,
        }
    }
}

/// `(source, relation, ?)` with the answer known during training/evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub source: EntityId,
    pub relation: RelationId,
    pub answer: Option<EntityId>,
}

impl Query {
    pub fn new(source: EntityId, relation: RelationId, answer: Option<EntityId>) -> Self {
        Self {
            source,
            relation,
            answer,
        }
    }
}

impl From<Triple> for Query {
    fn from(t: Triple) -> Self {
        Self::new(t.head, t.relation, Some(t.tail))
    }
}

impl From<&Triple> for Query {
    fn from(t: &Triple) -> Self {
        Self::from(*t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct State {
    pub query_relation: RelationId,
    pub source: EntityId,
    pub current: EntityId,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub relation: RelationId,
    pub target: EntityId,
}

pub struct Env<'g> {
    graph: &'g Graph,
    config: EnvConfig,
}

impl<'g> Env<'g> {
    pub fn new(graph: &'g Graph, config: EnvConfig) -> Result<Self> {
        if config.action_cap == 0 {
            return Err(Error::invalid("action cap must leave room for the self-loop"));
        }
        Ok(Self { graph, config })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn validate_query(&self, q: &Query) -> Result<()> {
        self.graph.check_entity(q.source)?;
        self.graph.check_relation(q.relation)?;
        if let Some(a) = q.answer {
            self.graph.check_entity(a)?;
        }
        Ok(())
    }

    pub fn reset(&self, q: &Query) -> Result<State> {
        self.validate_query(q)?;
        Ok(State {
            query_relation: q.relation,
            source: q.source,
            current: q.source,
            step: 0,
        })
    }

    /// Self-loop first, then outgoing edges in `(relation, target)` order,
    /// truncated to the first `cap - 1` edges. With a known answer, the edges
    /// `(r_q, answer)` and `(r_q⁻¹, answer)` are left out where the
    /// [`AnswerMask`] applies.
    pub fn action_space(&self, state: &State, answer: Option<EntityId>) -> Vec<Action> {
        let active = match self.config.answer_mask {
            AnswerMask::Off => false,
            AnswerMask::FirstStep => state.step == 0,
            AnswerMask::AtSource => state.current == state.source,
        };
        let mask = if active {
            answer.map(|a| (a, state.query_relation, self.graph.inverse(state.query_relation)))
        } else {
            None
        };
        let mut out = Vec::with_capacity(self.graph.neighbors(state.current).len() + 1);
        out.push(Action {
            relation: self.graph.self_loop(),
            target: state.current,
        });
        let edges = self.graph.neighbors(state.current);
        let kept = edges.len().min(self.config.action_cap - 1);
        for &(r, t) in &edges[..kept] {
            if let Some((a, rq, inv)) = mask {
                if t == a && (r == rq || Some(r) == inv) {
                    continue;
                }
            }
            out.push(Action {
                relation: r,
                target: t,
            });
        }
        out
    }

    /// Whether `action` is the self-loop or a graph edge inside the cap.
    pub fn is_available(&self, state: &State, action: &Action) -> bool {
        if action.relation == self.graph.self_loop() {
            return action.target == state.current;
        }
        match self
            .graph
            .neighbors(state.current)
            .binary_search(&(action.relation, action.target))
        {
            Ok(pos) => pos + 1 < self.config.action_cap,
            Err(_) => false,
        }
    }

    pub fn step(&self, state: &State, action: &Action) -> Result<State> {
        if state.step >= self.config.horizon {
            return Err(Error::contract(format!(
                "step at t = {} with horizon {}",
                state.step, self.config.horizon
            )));
        }
        if !self.is_available(state, action) {
            return Err(Error::contract(format!(
                "action ({}, {}) is not available at entity {}",
                self.graph.relation_name(action.relation),
                self.graph.entity_name(action.target),
                self.graph.entity_name(state.current)
            )));
        }
        Ok(State {
            current: action.target,
            step: state.step + 1,
            ..*state
        })
    }

    /// 1 on a hit; otherwise the reward model's score, or 0 without one.
    pub fn terminal_reward(
        &self,
        state: &State,
        query: &Query,
        reward_model: Option<&EmbedModel>,
    ) -> Result<f64> {
        if state.step != self.config.horizon {
            return Err(Error::contract(format!(
                "reward requested at t = {} before horizon {}",
                state.step, self.config.horizon
            )));
        }
        let answer = query
            .answer
            .ok_or_else(|| Error::invalid("reward needs a query with a known answer"))?;
        if state.current == answer {
            return Ok(1.0);
        }
        match reward_model {
            Some(m) => m.score(query.source, query.relation, state.current),
            None => Ok(0.0),
        }
    }

    /// Terminal rewards for many `(query, final entity)` pairs in one batch.
    pub fn terminal_rewards(
        &self,
        queries: &[Query],
        finals: &[EntityId],
        reward_model: Option<&EmbedModel>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; queries.len()];
        let mut misses = Vec::new();
        let mut miss_idx = Vec::new();
        for (i, (q, &e)) in queries.iter().zip(finals).enumerate() {
            let answer = q
                .answer
                .ok_or_else(|| Error::invalid("reward needs a query with a known answer"))?;
            if e == answer {
                out[i] = 1.0;
            } else if reward_model.is_some() {
                misses.push(Triple::new(q.source, q.relation, e));
                miss_idx.push(i);
            }
        }
        if let Some(m) = reward_model {
            for (i, s) in miss_idx.into_iter().zip(m.score_triples(&misses)?) {
                out[i] = s;
            }
        }
        Ok(out)
    }

    /// Replays a path from the query's source; fails on any unavailable step.
    pub fn replay(&self, query: &Query, actions: &[Action]) -> Result<State> {
        let mut s = self.reset(query)?;
        for a in actions {
            s = self.step(&s, a)?;
        }
        Ok(s)
    }
}
