//! Relation-specific policy learning with REINFORCE.
//!
//! The surrogate loss for a batch of `N` trajectories is
//!
//! ```text
//! loss = -(1/N) Σ_i (R_i - b) Σ_t log π(a_t^i | s_t^i)  -  λ (1/N) Σ_i Σ_t H(π(· | s_t^i))
//! ```
//!
//! whose gradient is the REINFORCE estimate of the gradient of the negative
//! expected terminal reward (plus an optional entropy bonus).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbedModel;
use crate::env::{Env, EnvConfig, Query};
use crate::error::{Error, Result};
use crate::kg::{Graph, Triple};
use crate::policy::{Mode, PolicyNet, Rollouts, Trajectory};
use crate::tensor::{sgd_step, Grads, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    None,
    MovingAverage { decay: f64 },
}

/// Running value of a [`Baseline`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaselineState {
    value: Option<f64>,
}

impl BaselineState {
    /// Baseline to subtract from this batch's rewards, then folds the batch
    /// mean into the running average. An uninitialized average uses the
    /// batch mean.
    pub fn advance(&mut self, baseline: Baseline, batch_mean: f64) -> f64 {
        match baseline {
            Baseline::None => 0.0,
            Baseline::MovingAverage { decay } => {
                let b = self.value.unwrap_or(batch_mean);
                self.value = Some(decay * b + (1.0 - decay) * batch_mean);
                b
            }
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub rollouts_per_triple: usize,
    pub lr: f64,
    pub steps: usize,
    pub baseline: Baseline,
    pub entropy_weight: f64,
    /// Steps over which the entropy weight decays linearly to zero; 0 keeps it fixed.
    pub entropy_anneal_steps: usize,
    pub action_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            rollouts_per_triple: 20,
            lr: 1e-2,
            steps: 1,
            baseline: Baseline::MovingAverage { decay: 0.95 },
            entropy_weight: 0.01,
            entropy_anneal_steps: 0,
            action_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.action_dropout) {
            return Err(Error::invalid("action dropout must be in [0, 1)"));
        }
        if let Baseline::MovingAverage { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::invalid("baseline decay must be in [0, 1)"));
            }
        }
        if self.rollouts_per_triple == 0 {
            return Err(Error::invalid("need at least one rollout per triple"));
        }
        if self.entropy_weight < 0.0 {
            return Err(Error::invalid("entropy weight must be non-negative"));
        }
        Ok(())
    }

    /// Entropy weight after `step` updates under the linear schedule.
    pub fn entropy_at(&self, step: usize) -> f64 {
        if self.entropy_anneal_steps == 0 {
            return self.entropy_weight;
        }
        let frac = 1.0 - step as f64 / self.entropy_anneal_steps as f64;
        self.entropy_weight * frac.max(0.0)
    }
}

/// Summary of one gradient evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub hit_rate: f64,
}

impl StepStats {
    pub const HEADER: &'static str = "step\tmean_reward\tloss\thit_rate";
}

impl fmt::Display for StepStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.mean_reward, self.loss, self.hit_rate
        )
    }
}

/// Perturbs a sampling distribution by dropping each non-self-loop action
/// (index 0 is the self-loop) with probability `rate`, then renormalizing.
/// If every non-self-loop action is dropped the input is returned unchanged.
pub fn action_dropout<R: Rng + ?Sized>(probs: &[f64], rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 || probs.len() <= 1 {
        return probs.to_vec();
    }
    let keep: Vec<bool> = (0..probs.len())
        .map(|i| i == 0 || rng.random::<f64>() >= rate)
        .collect();
    if !keep[1..].iter().any(|&k| k) {
        return probs.to_vec();
    }
    let total: f64 = probs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p).sum();
    probs
        .iter()
        .zip(&keep)
        .map(|(&p, &k)| if k { p / total } else { 0.0 })
        .collect()
}

/// Builds the surrogate loss node from rollouts whose rewards are filled in.
pub fn batch_loss(
    tape: &mut Tape,
    rollouts: &Rollouts,
    baseline: f64,
    entropy_weight: f64,
) -> Result<Var> {
    let n = rollouts.trajectories.len();
    if n == 0 {
        return Err(Error::invalid("empty trajectory batch"));
    }
    let adv: Vec<f64> = rollouts
        .trajectories
        .iter()
        .map(|t| t.reward - baseline)
        .collect();
    let adv = tape.constant(Tensor::vector(adv));
    let weighted = tape.mul(adv, rollouts.log_prob_sum)?;
    let total = tape.sum(weighted);
    let pg = tape.scale(total, -1.0 / n as f64);
    if entropy_weight == 0.0 {
        return Ok(pg);
    }
    let ent = tape.sum(rollouts.entropy_sum);
    let bonus = tape.scale(ent, -entropy_weight / n as f64);
    tape.add(pg, bonus)
}

/// REINFORCE over one relation's triples.
pub struct Reinforce<'a> {
    pub net: &'a PolicyNet,
    pub graph: &'a Graph,
    pub reward_model: Option<&'a EmbedModel>,
    pub config: TrainConfig,
}

impl<'a> Reinforce<'a> {
    pub fn new(
        net: &'a PolicyNet,
        graph: &'a Graph,
        reward_model: Option<&'a EmbedModel>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net,
            graph,
            reward_model,
            config,
        })
    }

    pub fn env(&self) -> Result<Env<'a>> {
        Env::new(self.graph, self.config.env)
    }

    fn queries(&self, triples: &[Triple]) -> Vec<Query> {
        triples
            .iter()
            .flat_map(|t| std::iter::repeat_n(Query::from(t), self.config.rollouts_per_triple))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        tape: &mut Tape,
        env: &Env<'_>,
        mut rollouts: Rollouts,
        vars: &crate::tensor::ParamVars,
        baseline: &mut BaselineState,
        entropy_weight: f64,
        reuse_rewards: bool,
    ) -> Result<(Grads, StepStats, Vec<Trajectory>)> {
        if !reuse_rewards {
            let queries: Vec<Query> = rollouts.trajectories.iter().map(|t| t.query).collect();
            let finals: Vec<_> = rollouts.trajectories.iter().map(|t| t.final_entity).collect();
            let rewards = env.terminal_rewards(&queries, &finals, self.reward_model)?;
            for (t, r) in rollouts.trajectories.iter_mut().zip(rewards) {
                t.reward = r;
            }
        }
        let n = rollouts.trajectories.len() as f64;
        let mean_reward = rollouts.trajectories.iter().map(|t| t.reward).sum::<f64>() / n;
        let hit_rate = rollouts
            .trajectories
            .iter()
            .filter(|t| Some(t.final_entity) == t.query.answer)
            .count() as f64
            / n;
        let b = baseline.advance(self.config.baseline, mean_reward);
        let loss = batch_loss(tape, &rollouts, b, entropy_weight)?;
        let loss_value = tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        let grads = vars.collect(tape, &mut g);
        let stats = StepStats {
            step: 0,
            mean_reward,
            loss: loss_value,
            hit_rate,
        };
        Ok((grads, stats, rollouts.trajectories))
    }

    /// Samples `rollouts_per_triple` walks per triple under `params` and
    /// returns the surrogate-loss gradient.
    pub fn gradient<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        triples: &[Triple],
        baseline: &mut BaselineState,
        entropy_weight: f64,
        rng: &mut R,
    ) -> Result<(Grads, StepStats, Vec<Trajectory>)> {
        if triples.is_empty() {
            return Err(Error::invalid("empty trajectory batch"));
        }
        let env = self.env()?;
        let queries = self.queries(triples);
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let mode = Mode::Sample {
            dropout: self.config.action_dropout,
        };
        let rollouts = self.net.rollout(&mut tape, &vars, &env, &queries, mode, rng)?;
        self.finish(&mut tape, &env, rollouts, &vars, baseline, entropy_weight, false)
    }

    /// Surrogate-loss gradient of fixed trajectories (with their stored
    /// rewards), re-evaluated under `params`.
    pub fn gradient_from_trajectories(
        &self,
        params: &ParamSet,
        trajectories: &[Trajectory],
        baseline: &mut BaselineState,
        entropy_weight: f64,
    ) -> Result<(Grads, StepStats)> {
        if trajectories.is_empty() {
            return Err(Error::invalid("empty trajectory batch"));
        }
        let env = self.env()?;
        let queries: Vec<Query> = trajectories.iter().map(|t| t.query).collect();
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut rollouts = self.net.rollout(
            &mut tape,
            &vars,
            &env,
            &queries,
            Mode::Replay(trajectories),
            &mut unused,
        )?;
        for (r, t) in rollouts.trajectories.iter_mut().zip(trajectories) {
            r.reward = t.reward;
        }
        let (g, s, _) = self.finish(&mut tape, &env, rollouts, &vars, baseline, entropy_weight, true)?;
        Ok((g, s))
    }

    /// Runs `config.steps` SGD updates at `config.lr` on fresh rollouts and
    /// returns the adapted parameters. `params` is left untouched.
    pub fn train_relation<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        triples: &[Triple],
        rng: &mut R,
    ) -> Result<(ParamSet, Vec<StepStats>)> {
        if triples.is_empty() {
            return Err(Error::invalid("cannot train on an empty triple set"));
        }
        let mut theta = params.clone();
        let mut baseline = BaselineState::default();
        let mut log = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let (grads, mut stats, _) =
                self.gradient(&theta, triples, &mut baseline, self.config.entropy_at(step), rng)?;
            theta = sgd_step(&theta, &grads, self.config.lr)?;
            stats.step = step;
            log.push(stats);
        }
        Ok((theta, log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_rate_zero_is_identity() {
        let p = vec![0.2, 0.3, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(action_dropout(&p, 0.0, &mut rng), p);
    }

    #[test]
    fn dropout_renormalizes() {
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = action_dropout(&p, 0.5, &mut rng);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(q[0] > 0.0);
        }
    }

    #[test]
    fn dropout_near_one_keeps_self_loop_or_falls_back() {
        let p = vec![0.25, 0.25, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = action_dropout(&p, 0.999_999, &mut rng);
            assert!(q == p || q[0] == 1.0 || q.iter().filter(|&&x| x > 0.0).count() == 2);
        }
    }

    #[test]
    fn baseline_moving_average() {
        let mut s = BaselineState::default();
        let ma = Baseline::MovingAverage { decay: 0.5 };
        assert_eq!(s.advance(ma, 1.0), 1.0);
        assert_eq!(s.advance(ma, 0.0), 1.0);
        assert_eq!(s.value(), Some(0.5));
        assert_eq!(BaselineState::default().advance(Baseline::None, 3.0), 0.0);
    }

    #[test]
    fn entropy_schedule() {
        let cfg = TrainConfig {
            entropy_weight: 0.1,
            entropy_anneal_steps: 10,
            ..Default::default()
        };
        assert_eq!(cfg.entropy_at(0), 0.1);
        assert!((cfg.entropy_at(5) - 0.05).abs() < 1e-15);
        assert_eq!(cfg.entropy_at(20), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { action_dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { rollouts_per_triple: 0, ..Default::default() }.validate().is_err());
    }
}
