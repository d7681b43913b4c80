//! Meta-learning of a shared policy initialization across normal relations.
//!
//! Each outer step samples a batch of relation tasks, adapts the shared
//! parameters to each task's support set with plain SGD, measures the
//! surrogate loss on the query set at the adapted parameters, and applies the
//! sum of those query gradients to the shared parameters (first-order update).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbedModel;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate, BeamConfig};
use crate::kg::{sample_support_query, Graph, RelationId, Triple};
use crate::policy::{PolicyNet, Trajectory};
use crate::reinforce::{BaselineState, Reinforce, StepStats, TrainConfig};
use crate::tensor::{sgd_step, Grads, Optimizer, OptimizerKind, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDistribution {
    Uniform,
    Frequency,
}

impl FromStr for TaskDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "frequency" => Ok(Self::Frequency),
            other => Err(Error::invalid(format!("unknown task distribution `{other}`"))),
        }
    }
}

impl fmt::Display for TaskDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Frequency => "frequency",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner SGD rate α.
    pub inner_lr: f64,
    /// Outer rate β.
    pub outer_lr: f64,
    pub task_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub first_order: bool,
    pub task_distribution: TaskDistribution,
    pub outer_optimizer: OptimizerKind,
    /// Rollout, reward-shaping and environment settings shared by both loops.
    /// Its `lr` and `steps` are ignored here.
    pub train: TrainConfig,
    /// Outer steps between meta-validation runs; 0 disables validation.
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            task_batch: 4,
            support_size: 32,
            query_size: 32,
            inner_steps: 1,
            outer_steps: 1000,
            first_order: true,
            task_distribution: TaskDistribution::Uniform,
            outer_optimizer: OptimizerKind::Adam,
            train: TrainConfig::default(),
            eval_every: 0,
            patience: 0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::invalid("inner rate must be non-negative"));
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::invalid("outer rate must be non-negative"));
        }
        if self.task_batch == 0 {
            return Err(Error::invalid("task batch size must be at least 1"));
        }
        if self.support_size == 0 || self.query_size == 0 {
            return Err(Error::invalid("support and query sizes must be positive"));
        }
        if !self.first_order {
            return Err(Error::invalid(
                "second-order meta-gradients are not supported; use the first-order update",
            ));
        }
        self.train.validate()
    }

    fn inner_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.inner_lr,
            steps: self.inner_steps,
            ..self.train
        }
    }
}

/// Support and query triples drawn from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub relation: RelationId,
    pub support: Vec<Triple>,
    pub query: Vec<Triple>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Support,
    Query,
}

/// Produces surrogate-loss gradients for one task and phase.
pub trait GradientSource: Sync {
    #[allow(clippy::too_many_arguments)]
    fn gradient(
        &self,
        trainer: &Reinforce<'_>,
        phase: Phase,
        task: usize,
        params: &ParamSet,
        triples: &[Triple],
        baseline: &mut BaselineState,
        entropy_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Grads, StepStats)>;
}

/// Fresh rollouts under the current parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sampled;

impl GradientSource for Sampled {
    fn gradient(
        &self,
        trainer: &Reinforce<'_>,
        _phase: Phase,
        _task: usize,
        params: &ParamSet,
        triples: &[Triple],
        baseline: &mut BaselineState,
        entropy_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Grads, StepStats)> {
        let (g, s, _) = trainer.gradient(params, triples, baseline, entropy_weight, rng)?;
        Ok((g, s))
    }
}

/// Fixed trajectories per task, replayed under the current parameters.
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    pub support: Vec<Vec<Trajectory>>,
    pub query: Vec<Vec<Trajectory>>,
}

impl GradientSource for Frozen {
    fn gradient(
        &self,
        trainer: &Reinforce<'_>,
        phase: Phase,
        task: usize,
        params: &ParamSet,
        _triples: &[Triple],
        baseline: &mut BaselineState,
        entropy_weight: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Grads, StepStats)> {
        let set = match phase {
            Phase::Support => &self.support,
            Phase::Query => &self.query,
        };
        let trajs = set
            .get(task)
            .ok_or_else(|| Error::invalid(format!("no frozen trajectories for task {task}")))?;
        trainer.gradient_from_trajectories(params, trajs, baseline, entropy_weight)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaStepStats {
    pub relations: Vec<RelationId>,
    pub query_loss: Vec<f64>,
    pub query_reward: Vec<f64>,
}

/// One line of the meta-training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLogLine {
    pub step: usize,
    pub stats: MetaStepStats,
    pub val_mrr: Option<f64>,
}

impl MetaLogLine {
    pub const HEADER: &'static str = "step\tmean_query_loss\tmean_query_reward\tval_mrr\ttask_losses";

    pub fn render(&self, graph: &Graph) -> String {
        let n = self.stats.query_loss.len().max(1) as f64;
        let loss = self.stats.query_loss.iter().sum::<f64>() / n;
        let reward = self.stats.query_reward.iter().sum::<f64>() / n;
        let val = self.val_mrr.map_or("-".to_string(), |v| format!("{v:.6}"));
        let tasks: Vec<String> = self
            .stats
            .relations
            .iter()
            .zip(&self.stats.query_loss)
            .map(|(r, l)| format!("{}={l:.6}", graph.relation_name(*r)))
            .collect();
        format!("{}\t{loss:.6}\t{reward:.6}\t{val}\t{}", self.step, tasks.join(","))
    }
}

/// Few-shot tasks used to pick the best initialization: adapt on `support`,
/// evaluate on `eval`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Validation {
    pub tasks: Vec<(RelationId, Vec<Triple>, Vec<Triple>)>,
    pub adapt_steps: usize,
    pub beam: BeamConfig,
    /// Known triples for filtered ranking.
    pub known: HashSet<Triple>,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    /// Best parameters by validation MRR, or the final ones without validation.
    pub params: ParamSet,
    pub best_step: usize,
    pub best_val_mrr: Option<f64>,
    pub steps_run: usize,
    pub log: Vec<MetaLogLine>,
}

pub struct MetaLearner<'a> {
    pub net: &'a PolicyNet,
    pub graph: &'a Graph,
    pub reward_model: Option<&'a EmbedModel>,
    pub config: MetaConfig,
}

impl<'a> MetaLearner<'a> {
    pub fn new(
        net: &'a PolicyNet,
        graph: &'a Graph,
        reward_model: Option<&'a EmbedModel>,
        config: MetaConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net,
            graph,
            reward_model,
            config,
        })
    }

    fn trainer(&self) -> Result<Reinforce<'a>> {
        Reinforce::new(self.net, self.graph, self.reward_model, self.config.inner_train())
    }

    #[allow(clippy::too_many_arguments)]
    fn adapt_with<S: GradientSource>(
        &self,
        source: &S,
        trainer: &Reinforce<'_>,
        task: usize,
        params: &ParamSet,
        support: &[Triple],
        lr: f64,
        steps: usize,
        entropy_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamSet> {
        let mut theta = params.clone();
        let mut baseline = BaselineState::default();
        for _ in 0..steps {
            let (g, _) = source.gradient(
                trainer,
                Phase::Support,
                task,
                &theta,
                support,
                &mut baseline,
                entropy_weight,
                rng,
            )?;
            theta = sgd_step(&theta, &g, lr)?;
        }
        Ok(theta)
    }

    /// `θ' = θ − α ∇θ L(θ)` on the support triples, repeated `steps` times.
    pub fn inner_adapt(
        &self,
        params: &ParamSet,
        support: &[Triple],
        lr: f64,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamSet> {
        if support.is_empty() {
            return Err(Error::invalid("cannot adapt on an empty support set"));
        }
        let trainer = self.trainer()?;
        let w = self.config.train.entropy_weight;
        self.adapt_with(&Sampled, &trainer, 0, params, support, lr, steps, w, rng)
    }

    /// Adapts a meta-learned initialization to a few-shot relation's
    /// training triples with the inner rate.
    pub fn adapt_fewshot(
        &self,
        params: &ParamSet,
        triples: &[Triple],
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamSet> {
        if steps == 0 {
            return Ok(params.clone());
        }
        self.inner_adapt(params, triples, self.config.inner_lr, steps, rng)
    }

    /// Draws `task_batch` tasks from `p(R)` and splits each into support and query sets.
    pub fn sample_episodes<R: Rng + ?Sized>(
        &self,
        tasks: &BTreeMap<RelationId, Vec<Triple>>,
        rng: &mut R,
    ) -> Result<Vec<Episode>> {
        let pool: Vec<(&RelationId, &Vec<Triple>)> =
            tasks.iter().filter(|(_, ts)| !ts.is_empty()).collect();
        if pool.is_empty() {
            return Err(Error::invalid("meta-training needs at least one non-empty task"));
        }
        let n = self.config.task_batch;
        let picks: Vec<(&RelationId, &Vec<Triple>)> = match self.config.task_distribution {
            TaskDistribution::Uniform if n <= pool.len() => pool.choose_multiple(rng, n).copied().collect(),
            TaskDistribution::Uniform => (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect(),
            TaskDistribution::Frequency => (0..n)
                .map(|_| *pool.choose_weighted(rng, |(_, ts)| ts.len()).expect("non-empty pool"))
                .collect(),
        };
        picks
            .into_iter()
            .map(|(r, ts)| {
                let (support, query) =
                    sample_support_query(ts, self.config.support_size, self.config.query_size, rng)?;
                Ok(Episode {
                    relation: *r,
                    support,
                    query,
                })
            })
            .collect()
    }

    /// Sum over tasks of the query-set gradient at the adapted parameters.
    pub fn meta_gradient<S: GradientSource>(
        &self,
        source: &S,
        params: &ParamSet,
        episodes: &[Episode],
        entropy_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Grads, MetaStepStats)> {
        if episodes.is_empty() {
            return Err(Error::invalid("empty task batch"));
        }
        let trainer = self.trainer()?;
        let seeds: Vec<u64> = episodes.iter().map(|_| rng.random()).collect();
        let per_task: Vec<Result<(Grads, StepStats)>> = episodes
            .par_iter()
            .zip(seeds)
            .enumerate()
            .map(|(i, (ep, seed))| {
                let mut task_rng = ChaCha8Rng::seed_from_u64(seed);
                let adapted = self.adapt_with(
                    source,
                    &trainer,
                    i,
                    params,
                    &ep.support,
                    self.config.inner_lr,
                    self.config.inner_steps,
                    entropy_weight,
                    &mut task_rng,
                )?;
                let mut baseline = BaselineState::default();
                source.gradient(
                    &trainer,
                    Phase::Query,
                    i,
                    &adapted,
                    &ep.query,
                    &mut baseline,
                    entropy_weight,
                    &mut task_rng,
                )
            })
            .collect();
        let mut total = Grads::zeros_like(params);
        let mut stats = MetaStepStats::default();
        for (ep, r) in episodes.iter().zip(per_task) {
            let (g, s) = r?;
            total.accumulate(&g)?;
            stats.relations.push(ep.relation);
            stats.query_loss.push(s.loss);
            stats.query_reward.push(s.mean_reward);
        }
        Ok((total, stats))
    }

    /// One outer update of `params` with the summed query gradients.
    pub fn meta_step<S: GradientSource>(
        &self,
        source: &S,
        params: &ParamSet,
        episodes: &[Episode],
        optimizer: &mut Optimizer,
        entropy_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ParamSet, MetaStepStats)> {
        let (g, stats) = self.meta_gradient(source, params, episodes, entropy_weight, rng)?;
        let next = optimizer.step(params, &g, self.config.outer_lr)?;
        Ok((next, stats))
    }

    /// Mean MRR over validation tasks after adapting `params` to each.
    pub fn validate(&self, params: &ParamSet, validation: &Validation, seed: u64) -> Result<f64> {
        if validation.tasks.is_empty() {
            return Err(Error::invalid("empty validation set"));
        }
        let env_cfg = self.config.train.env;
        let mut answers = Vec::new();
        for (k, (_, support, eval_triples)) in validation.tasks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let adapted = if support.is_empty() {
                params.clone()
            } else {
                self.adapt_fewshot(params, support, validation.adapt_steps, &mut rng)?
            };
            answers.extend(evaluate(self.net, &adapted, self.graph, env_cfg, eval_triples, &validation.beam)?);
        }
        Ok(compute_metrics(&answers, &validation.known, true)?.mrr)
    }

    /// Runs the outer loop from `init` over `tasks`.
    pub fn meta_train(
        &self,
        tasks: &BTreeMap<RelationId, Vec<Triple>>,
        init: ParamSet,
        validation: Option<&Validation>,
        mut on_log: impl FnMut(&MetaLogLine),
    ) -> Result<MetaOutcome> {
        self.net.check(&init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut optimizer = Optimizer::new(self.config.outer_optimizer);
        let validation = validation.filter(|v| !v.tasks.is_empty() && self.config.eval_every > 0);
        let mut theta = init;
        let mut best = theta.clone();
        let mut best_step = 0;
        let mut best_val = None;
        let mut stale = 0;
        let mut log = Vec::new();
        let mut steps_run = 0;
        if let Some(v) = validation {
            best_val = Some(self.validate(&theta, v, self.config.seed)?);
        }
        for step in 0..self.config.outer_steps {
            let episodes = self.sample_episodes(tasks, &mut rng)?;
            let w = self.config.train.entropy_at(step);
            let (next, stats) = self.meta_step(&Sampled, &theta, &episodes, &mut optimizer, w, &mut rng)?;
            theta = next;
            steps_run = step + 1;
            let mut val_mrr = None;
            if let Some(v) = validation {
                if steps_run % self.config.eval_every == 0 {
                    let mrr = self.validate(&theta, v, self.config.seed)?;
                    val_mrr = Some(mrr);
                    if best_val.is_none_or(|b| mrr > b) {
                        best_val = Some(mrr);
                        best = theta.clone();
                        best_step = steps_run;
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
            }
            let line = MetaLogLine {
                step: steps_run,
                stats,
                val_mrr,
            };
            on_log(&line);
            log.push(line);
            if self.config.patience > 0 && stale >= self.config.patience {
                break;
            }
        }
        let params = if validation.is_some() { best } else { theta };
        if validation.is_none() {
            best_step = steps_run;
        }
        Ok(MetaOutcome {
            params,
            best_step,
            best_val_mrr: best_val,
            steps_run,
            log,
        })
    }
}
