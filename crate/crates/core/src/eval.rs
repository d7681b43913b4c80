//! Beam-search decoding, link-prediction metrics and the K-robustness sweep.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbedModel;
use crate::env::{Action, Env, EnvConfig, Query, State};
use crate::error::{Error, Result};
use crate::kg::{Dataset, EntityId, Graph, RelationId, TaskSplit, Triple, Vocab};
use crate::meta::{MetaConfig, MetaLearner};
use crate::policy::{PolicyNet, TapeHistory};
use crate::tensor::{ParamSet, Segments, Tape};

/// How beams ending at the same entity are combined into its score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Max,
    Sum,
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "sum" => Ok(Self::Sum),
            other => Err(Error::invalid(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub mode: ScoreMode,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 128,
            mode: ScoreMode::Max,
        }
    }
}

/// A ranked entity with its score (a log-probability) and best path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: EntityId,
    pub score: f64,
    pub path: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedAnswer {
    pub query: Query,
    /// Distinct entities, score non-increasing, ties by entity id.
    pub candidates: Vec<Candidate>,
}

impl RankedAnswer {
    /// 1-based rank of the gold answer, or `None` if it was never reached.
    /// With `filtered`, other known answers of `(source, relation)` above
    /// the gold are skipped.
    pub fn rank(&self, known: &HashSet<Triple>, filtered: bool) -> Option<usize> {
        let gold = self.query.answer?;
        let mut rank = 1;
        for c in &self.candidates {
            if c.entity == gold {
                return Some(rank);
            }
            let t = Triple::new(self.query.source, self.query.relation, c.entity);
            if !(filtered && known.contains(&t)) {
                rank += 1;
            }
        }
        None
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

struct Beam {
    state: State,
    actions: Vec<Action>,
    log_prob: f64,
}

/// Keeps the `width` most probable partial paths at every step and ranks the
/// entities they end at after the horizon.
pub fn beam_search(
    net: &PolicyNet,
    params: &ParamSet,
    env: &Env<'_>,
    query: &Query,
    config: &BeamConfig,
) -> Result<RankedAnswer> {
    if config.width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let mut hist = net.start(&mut tape, &vars, 1)?;
    let mut beams = vec![Beam {
        state: env.reset(query)?,
        actions: Vec::new(),
        log_prob: 0.0,
    }];
    for t in 0..env.horizon() {
        let spaces: Vec<Vec<Action>> = beams
            .iter()
            .map(|b| env.action_space(&b.state, query.answer))
            .collect();
        let flat: Vec<Action> = spaces.iter().flatten().copied().collect();
        let seg = Arc::new(Segments::from_lengths(spaces.iter().map(Vec::len)));
        let states: Vec<State> = beams.iter().map(|b| b.state).collect();
        let rows = net.action_rows(&mut tape, &vars, &flat)?;
        let lp = net.action_log_probs(&mut tape, &vars, &states, hist.h, rows, &seg)?;
        let lp_vals = tape.value(lp).data();

        // (total, beam, local action, flat row), generated in (beam, action) order
        let mut cands: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(flat.len());
        for (i, b) in beams.iter().enumerate() {
            for (k, flat_idx) in seg.range(i).enumerate() {
                cands.push((b.log_prob + lp_vals[flat_idx], i, k, flat_idx));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(config.width);

        let next: Vec<Beam> = cands
            .iter()
            .map(|&(total, i, k, _)| {
                let a = spaces[i][k];
                let mut actions = beams[i].actions.clone();
                actions.push(a);
                Ok(Beam {
                    state: env.step(&beams[i].state, &a)?,
                    actions,
                    log_prob: total,
                })
            })
            .collect::<Result<_>>()?;
        if t + 1 < env.horizon() {
            let parents: Vec<usize> = cands.iter().map(|c| c.1).collect();
            let chosen: Vec<usize> = cands.iter().map(|c| c.3).collect();
            let h = tape.gather_rows(hist.h, &parents)?;
            let c = tape.gather_rows(hist.c, &parents)?;
            let x = tape.gather_rows(rows, &chosen)?;
            hist = net.lstm(&mut tape, &vars, TapeHistory { h, c }, x)?;
        }
        beams = next;
    }

    let mut order: Vec<EntityId> = Vec::new();
    let mut groups: HashMap<EntityId, (usize, Vec<f64>)> = HashMap::new();
    for (i, b) in beams.iter().enumerate() {
        let e = b.state.current;
        groups
            .entry(e)
            .or_insert_with(|| {
                order.push(e);
                (i, Vec::new())
            })
            .1
            .push(b.log_prob);
    }
    let mut candidates: Vec<Candidate> = order
        .into_iter()
        .map(|e| {
            let (best, lps) = &groups[&e];
            let score = match config.mode {
                ScoreMode::Max => beams[*best].log_prob,
                ScoreMode::Sum => log_sum_exp(lps),
            };
            Candidate {
                entity: e,
                score,
                path: beams[*best].actions.clone(),
            }
        })
        .collect();
    candidates.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.entity.cmp(&b.entity),
        o => o,
    });
    Ok(RankedAnswer {
        query: *query,
        candidates,
    })
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Beam-searches every triple's `(head, relation, ?)` query in parallel.
pub fn evaluate(
    net: &PolicyNet,
    params: &ParamSet,
    graph: &Graph,
    env_config: EnvConfig,
    triples: &[Triple],
    beam: &BeamConfig,
) -> Result<Vec<RankedAnswer>> {
    let env = Env::new(graph, env_config)?;
    triples
        .par_iter()
        .map(|t| beam_search(net, params, &env, &Query::from(t), beam))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
    pub per_relation: BTreeMap<RelationId, RelationMetrics>,
}

impl MetricReport {
    pub const HEADER: &'static str = "MRR\tHits@1\tHits@10";

    /// MRR, Hits@1 and Hits@10 multiplied by 100, tab-separated.
    pub fn row(&self) -> String {
        format!(
            "{:.2}\t{:.2}\t{:.2}",
            self.mrr * 100.0,
            self.hits1 * 100.0,
            self.hits10 * 100.0
        )
    }
}

#[derive(Default)]
struct Acc {
    rr: f64,
    h1: usize,
    h10: usize,
    n: usize,
}

impl Acc {
    fn add(&mut self, rank: Option<usize>) {
        self.n += 1;
        if let Some(r) = rank {
            self.rr += 1.0 / r as f64;
            self.h1 += usize::from(r <= 1);
            self.h10 += usize::from(r <= 10);
        }
    }

    fn finish(&self) -> RelationMetrics {
        let n = self.n as f64;
        RelationMetrics {
            mrr: self.rr / n,
            hits1: self.h1 as f64 / n,
            hits10: self.h10 as f64 / n,
            count: self.n,
        }
    }
}

/// MRR and Hits@N over answers with known gold entities. A gold entity
/// missing from the candidates counts as reciprocal rank 0.
pub fn compute_metrics(
    answers: &[RankedAnswer],
    known: &HashSet<Triple>,
    filtered: bool,
) -> Result<MetricReport> {
    if answers.is_empty() {
        return Err(Error::invalid("no answers to score"));
    }
    let mut all = Acc::default();
    let mut per: BTreeMap<RelationId, Acc> = BTreeMap::new();
    for a in answers {
        if a.query.answer.is_none() {
            return Err(Error::invalid("answer has no gold entity to rank"));
        }
        let rank = a.rank(known, filtered);
        all.add(rank);
        per.entry(a.query.relation).or_default().add(rank);
    }
    let m = all.finish();
    Ok(MetricReport {
        mrr: m.mrr,
        hits1: m.hits1,
        hits10: m.hits10,
        count: m.count,
        per_relation: per.into_iter().map(|(r, a)| (r, a.finish())).collect(),
    })
}

/// Expected MRR of a uniformly random ranking of `n` entities.
pub fn random_ranking_mrr(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}

/// One answer-dump record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub source: String,
    pub relation: String,
    pub answer: Option<String>,
    pub rank: Option<usize>,
    pub top: Vec<(String, f64)>,
    /// Alternating entity and relation names, starting and ending with an entity.
    pub path: Vec<String>,
}

impl AnswerRecord {
    pub fn new(graph: &Graph, a: &RankedAnswer, rank: Option<usize>, top_k: usize) -> Self {
        let q = &a.query;
        let mut path = vec![graph.entity_name(q.source).to_string()];
        if let Some(best) = a.top() {
            for step in &best.path {
                path.push(graph.relation_name(step.relation).to_string());
                path.push(graph.entity_name(step.target).to_string());
            }
        }
        Self {
            source: graph.entity_name(q.source).to_string(),
            relation: graph.relation_name(q.relation).to_string(),
            answer: q.answer.map(|e| graph.entity_name(e).to_string()),
            rank,
            top: a
                .candidates
                .iter()
                .take(top_k)
                .map(|c| (graph.entity_name(c.entity).to_string(), c.score))
                .collect(),
            path,
        }
    }
}

/// Number of training triples kept per few-shot relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KSetting {
    Count(usize),
    Max,
}

impl FromStr for KSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(Self::Max);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::invalid(format!("K must be a positive integer or `max`, got `{s}`"))),
            Ok(k) => Ok(Self::Count(k)),
        }
    }
}

impl fmt::Display for KSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(k) => write!(f, "{k}"),
            Self::Max => f.write_str("max"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub ks: Vec<KSetting>,
    pub adapt_steps: usize,
    pub beam: BeamConfig,
    pub filtered: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![
                KSetting::Count(1),
                KSetting::Count(5),
                KSetting::Count(10),
                KSetting::Max,
            ],
            adapt_steps: 1,
            beam: BeamConfig::default(),
            filtered: true,
            seed: 0,
        }
    }
}

fn relation_seed(seed: u64, r: RelationId) -> u64 {
    seed ^ (u64::from(r.0) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Few-shot training triples kept under `k`: a seeded shuffle per relation,
/// truncated, so smaller K keeps a subset of larger K.
pub fn truncate_fewshot(split: &TaskSplit, k: KSetting, seed: u64) -> BTreeMap<RelationId, Vec<Triple>> {
    split
        .fewshot
        .iter()
        .map(|(&r, ts)| {
            let kept = match k {
                KSetting::Max => ts.clone(),
                KSetting::Count(k) => {
                    let mut v = ts.clone();
                    v.shuffle(&mut ChaCha8Rng::seed_from_u64(relation_seed(seed, r)));
                    v.truncate(k);
                    v
                }
            };
            (r, kept)
        })
        .collect()
}

/// Dataset graph with the dropped few-shot training triples removed.
fn truncated_graph(
    dataset: &Dataset,
    split: &TaskSplit,
    kept: &BTreeMap<RelationId, Vec<Triple>>,
) -> Result<Graph> {
    let keep: HashSet<Triple> = kept.values().flatten().copied().collect();
    let train: Vec<Triple> = dataset
        .train
        .iter()
        .filter(|t| !split.is_fewshot(t.relation) || keep.contains(t))
        .copied()
        .collect();
    let g = &dataset.graph;
    let forward = Vocab::from_names(g.relations().names()[..g.num_forward_relations()].to_vec())?;
    Graph::build(g.entities().clone(), forward, &train, g.has_inverses())
}

/// Adapts `params` to every few-shot relation (using its first `K` training
/// triples) and evaluates on its test triples, once per K.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    dataset: &Dataset,
    split: &TaskSplit,
    net: &PolicyNet,
    params: &ParamSet,
    reward_model: Option<&EmbedModel>,
    meta: &MetaConfig,
    sweep: &SweepConfig,
) -> Result<Vec<(KSetting, MetricReport)>> {
    if sweep.ks.is_empty() {
        return Err(Error::invalid("empty K list"));
    }
    let known = dataset.known_triples();
    let mut tests: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
    for t in &dataset.test {
        if split.is_fewshot(t.relation) {
            tests.entry(t.relation).or_default().push(*t);
        }
    }
    if tests.is_empty() {
        return Err(Error::invalid("no test triples for few-shot relations"));
    }
    let mut rows = Vec::with_capacity(sweep.ks.len());
    for &k in &sweep.ks {
        let kept = truncate_fewshot(split, k, sweep.seed);
        let truncated;
        let graph = if k == KSetting::Max {
            &dataset.graph
        } else {
            truncated = truncated_graph(dataset, split, &kept)?;
            &truncated
        };
        let answers = adapt_and_evaluate(net, params, graph, reward_model, meta, &kept, &tests, sweep)?;
        rows.push((k, compute_metrics(&answers, &known, sweep.filtered)?));
    }
    Ok(rows)
}

/// Adapts to each relation's support triples and beam-searches its test triples.
#[allow(clippy::too_many_arguments)]
pub fn adapt_and_evaluate(
    net: &PolicyNet,
    params: &ParamSet,
    graph: &Graph,
    reward_model: Option<&EmbedModel>,
    meta: &MetaConfig,
    support: &BTreeMap<RelationId, Vec<Triple>>,
    tests: &BTreeMap<RelationId, Vec<Triple>>,
    sweep: &SweepConfig,
) -> Result<Vec<RankedAnswer>> {
    let learner = MetaLearner::new(net, graph, reward_model, *meta)?;
    let mut answers = Vec::new();
    for (&r, test) in tests {
        let sup = support.get(&r).map(Vec::as_slice).unwrap_or(&[]);
        let adapted = if sup.is_empty() {
            params.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(relation_seed(sweep.seed, r));
            learner.adapt_fewshot(params, sup, sweep.adapt_steps, &mut rng)?
        };
        answers.extend(evaluate(net, &adapted, graph, meta.train.env, test, &sweep.beam)?);
    }
    Ok(answers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(gold: u32, order: &[u32]) -> RankedAnswer {
        RankedAnswer {
            query: Query::new(EntityId(0), RelationId(0), Some(EntityId(gold))),
            candidates: order
                .iter()
                .enumerate()
                .map(|(i, &e)| Candidate {
                    entity: EntityId(e),
                    score: -(i as f64),
                    path: Vec::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn gold_first_is_reciprocal_one() {
        let m = compute_metrics(&[answer(5, &[5, 1, 2])], &HashSet::new(), true).unwrap();
        assert_eq!((m.mrr, m.hits1, m.hits10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn gold_fourth() {
        let m = compute_metrics(&[answer(5, &[1, 2, 3, 5])], &HashSet::new(), true).unwrap();
        assert_eq!((m.mrr, m.hits1, m.hits10), (0.25, 0.0, 1.0));
    }

    #[test]
    fn filtering_skips_other_known_answers() {
        let a = answer(5, &[1, 2, 3, 5]);
        let known: HashSet<Triple> = [Triple::new(EntityId(0), RelationId(0), EntityId(2))].into();
        assert_eq!(a.rank(&known, true), Some(3));
        assert_eq!(a.rank(&known, false), Some(4));
    }

    #[test]
    fn empty_answers_are_rejected() {
        assert!(compute_metrics(&[], &HashSet::new(), true).is_err());
    }

    #[test]
    fn k_settings_parse() {
        assert_eq!("max".parse::<KSetting>().unwrap(), KSetting::Max);
        assert_eq!("5".parse::<KSetting>().unwrap(), KSetting::Count(5));
        assert!("0".parse::<KSetting>().is_err());
        assert!("x".parse::<KSetting>().is_err());
    }

    #[test]
    fn random_ranking_of_one_is_one() {
        assert_eq!(random_ranking_mrr(1), 1.0);
        assert!((random_ranking_mrr(2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_of_equal_values() {
        let v = log_sum_exp(&[-1.0, -1.0]);
        assert!((v - (-1.0 + 2f64.ln())).abs() < 1e-15);
    }
}
