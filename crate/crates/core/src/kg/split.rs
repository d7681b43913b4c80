use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RelationId, Triple};
use crate::error::{Error, Result};

/// Forward relations partitioned by training-triple count against a threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub threshold: usize,
    pub normal: BTreeMap<RelationId, Vec<Triple>>,
    pub fewshot: BTreeMap<RelationId, Vec<Triple>>,
}

impl TaskSplit {
    pub fn is_fewshot(&self, r: RelationId) -> bool {
        self.fewshot.contains_key(&r)
    }

    pub fn fewshot_triple_count(&self) -> usize {
        self.fewshot.values().map(Vec::len).sum()
    }

    pub fn normal_triple_count(&self) -> usize {
        self.normal.values().map(Vec::len).sum()
    }

    pub fn normal_triples(&self) -> impl Iterator<Item = &Triple> {
        self.normal.values().flatten()
    }
}

/// A relation is few-shot iff it has strictly fewer than `threshold` triples.
pub fn split_by_frequency(triples: &[Triple], threshold: usize) -> Result<TaskSplit> {
    if threshold == 0 {
        return Err(Error::invalid("few-shot threshold K must be at least 1"));
    }
    let mut groups: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
    for t in triples {
        groups.entry(t.relation).or_default().push(*t);
    }
    let (mut normal, mut fewshot) = (BTreeMap::new(), BTreeMap::new());
    for (r, list) in groups {
        if list.len() < threshold {
            fewshot.insert(r, list);
        } else {
            normal.insert(r, list);
        }
    }
    Ok(TaskSplit {
        threshold,
        normal,
        fewshot,
    })
}

pub fn relation_frequency_report(triples: &[Triple]) -> BTreeMap<RelationId, usize> {
    let mut counts = BTreeMap::new();
    for t in triples {
        *counts.entry(t.relation).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

/// All queries sharing one relation, with their partition labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub relation: RelationId,
    pub triples: Vec<(Triple, Partition)>,
}

impl Task {
    pub fn new(relation: RelationId, triples: Vec<(Triple, Partition)>) -> Result<Self> {
        if let Some((t, _)) = triples.iter().find(|(t, _)| t.relation != relation) {
            return Err(Error::invalid(format!(
                "triple {t:?} does not belong to task {relation}"
            )));
        }
        Ok(Self { relation, triples })
    }

    pub fn partition(&self, p: Partition) -> Vec<Triple> {
        self.triples
            .iter()
            .filter(|(_, q)| *q == p)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn train(&self) -> Vec<Triple> {
        self.partition(Partition::Train)
    }

    pub fn test(&self) -> Vec<Triple> {
        self.partition(Partition::Test)
    }

    pub fn sample_support_query<R: Rng + ?Sized>(
        &self,
        support: usize,
        query: usize,
        rng: &mut R,
    ) -> Result<(Vec<Triple>, Vec<Triple>)> {
        sample_support_query(&self.train(), support, query, rng)
    }
}

/// Draws a support set and a query set from a task's training triples.
///
/// When the task holds at least `support + query` triples the two sets are
/// disjoint samples without replacement. Smaller tasks draw the support set
/// with replacement and use every triple not drawn as the query set; if
/// nothing is left over, the query set is the distinct support triples.
pub fn sample_support_query<R: Rng + ?Sized>(
    triples: &[Triple],
    support: usize,
    query: usize,
    rng: &mut R,
) -> Result<(Vec<Triple>, Vec<Triple>)> {
    if triples.is_empty() {
        return Err(Error::invalid("cannot sample from an empty task"));
    }
    if support == 0 || query == 0 {
        return Err(Error::invalid("support and query sizes must be positive"));
    }
    let n = triples.len();
    if n >= support + query {
        let mut idx: Vec<usize> = (0..n).collect();
        let (chosen, _) = idx.partial_shuffle(rng, support + query);
        let s = chosen[..support].iter().map(|&i| triples[i]).collect();
        let q = chosen[support..].iter().map(|&i| triples[i]).collect();
        return Ok((s, q));
    }
    let picks: Vec<usize> = (0..support).map(|_| rng.random_range(0..n)).collect();
    let drawn: BTreeSet<usize> = picks.iter().copied().collect();
    let s: Vec<Triple> = picks.iter().map(|&i| triples[i]).collect();
    let mut q: Vec<Triple> = (0..n)
        .filter(|i| !drawn.contains(i))
        .map(|i| triples[i])
        .collect();
    if q.is_empty() {
        q = drawn.iter().map(|&i| triples[i]).collect();
    }
    Ok((s, q))
}

/// Seeded random train/valid/test partition of a triple list.
pub fn random_partition<R: Rng + ?Sized>(
    triples: &[Triple],
    valid_fraction: f64,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<Triple>, Vec<Triple>, Vec<Triple>)> {
    if !(0.0..1.0).contains(&valid_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || valid_fraction + test_fraction >= 1.0
    {
        return Err(Error::invalid("holdout fractions must be in [0, 1) and sum below 1"));
    }
    let mut shuffled = triples.to_vec();
    shuffled.shuffle(rng);
    let n = shuffled.len();
    let n_valid = (n as f64 * valid_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = shuffled.split_off(n - n_test);
    let valid = shuffled.split_off(n - n_test - n_valid);
    Ok((shuffled, valid, test))
}
