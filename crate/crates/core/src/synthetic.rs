//! Seeded compositional knowledge graphs for desk-scale experiments.
//!
//! A handful of base relations are random permutations of the entities.
//! Every other relation is the composition of two base relations
//! (`r(x, z) ⇔ ∃y. a(x, y) ∧ b(y, z)`), so each is answerable by a two-hop
//! walk. Most compositions are dense normal relations; a few are held out as
//! rare relations with only a handful of training triples.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{Dataset, EntityId, RelationId, Triple, Vocab};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub base_relations: usize,
    pub normal_relations: usize,
    pub fewshot_relations: usize,
    /// Training triples per rare relation.
    pub fewshot_train: usize,
    /// Test triples per rare relation.
    pub fewshot_test: usize,
    /// Fraction of each normal relation's triples held out for testing.
    pub normal_test_fraction: f64,
    pub add_inverses: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            base_relations: 4,
            normal_relations: 12,
            fewshot_relations: 3,
            fewshot_train: 12,
            fewshot_test: 30,
            normal_test_fraction: 0.1,
            add_inverses: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub dataset: Dataset,
    /// Frequency threshold separating normal from rare relations.
    pub threshold: usize,
    pub base: Vec<RelationId>,
    pub normal: Vec<RelationId>,
    pub fewshot: Vec<RelationId>,
    /// Composed relation → (first hop, second hop).
    pub rules: BTreeMap<RelationId, (RelationId, RelationId)>,
}

impl SyntheticKg {
    /// Training triples of the composed normal relations, keyed by relation.
    pub fn normal_tasks(&self) -> BTreeMap<RelationId, Vec<Triple>> {
        let mut out: BTreeMap<RelationId, Vec<Triple>> =
            self.normal.iter().map(|&r| (r, Vec::new())).collect();
        for t in &self.dataset.train {
            if let Some(v) = out.get_mut(&t.relation) {
                v.push(*t);
            }
        }
        out
    }

    fn partition_of(&self, r: RelationId, triples: &[Triple]) -> Vec<Triple> {
        triples.iter().filter(|t| t.relation == r).copied().collect()
    }

    pub fn fewshot_train(&self, r: RelationId) -> Vec<Triple> {
        self.partition_of(r, &self.dataset.train)
    }

    pub fn fewshot_test(&self, r: RelationId) -> Vec<Triple> {
        self.partition_of(r, &self.dataset.test)
    }
}

/// Builds the graph; equal configs give identical datasets.
pub fn compositional_kg(config: &SyntheticConfig) -> Result<SyntheticKg> {
    let n = config.entities;
    let nb = config.base_relations;
    let composed = config.normal_relations + config.fewshot_relations;
    if n < 2 || nb == 0 {
        return Err(Error::invalid("need at least two entities and one base relation"));
    }
    if composed > nb * nb {
        return Err(Error::invalid(format!(
            "{composed} composed relations need more than {nb} base relations"
        )));
    }
    if config.fewshot_train + config.fewshot_test > n {
        return Err(Error::invalid("rare relation sizes exceed the entity count"));
    }
    if !(0.0..1.0).contains(&config.normal_test_fraction) {
        return Err(Error::invalid("normal test fraction must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let entities = Vocab::from_names((0..n).map(|i| format!("e{i:03}")))?;
    let mut names: Vec<String> = (0..nb).map(|i| format!("base{i}")).collect();
    names.extend((0..config.normal_relations).map(|i| format!("rule{i:02}")));
    names.extend((0..config.fewshot_relations).map(|i| format!("rare{i}")));
    let relations = Vocab::from_names(names)?;

    let perms: Vec<Vec<usize>> = (0..nb)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..nb).flat_map(|a| (0..nb).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(composed);

    let ent = |i: usize| EntityId(i as u32);
    let rel = |i: usize| RelationId(i as u32);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (b, p) in perms.iter().enumerate() {
        train.extend((0..n).map(|x| Triple::new(ent(x), rel(b), ent(p[x]))));
    }
    let mut rules = BTreeMap::new();
    let mut normal = Vec::new();
    let mut fewshot = Vec::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let r = rel(nb + k);
        rules.insert(r, (rel(a), rel(b)));
        let mut heads: Vec<usize> = (0..n).collect();
        heads.shuffle(&mut rng);
        let triple = |x: usize| Triple::new(ent(x), r, ent(perms[b][perms[a][x]]));
        if k < config.normal_relations {
            normal.push(r);
            let n_test = (n as f64 * config.normal_test_fraction).round() as usize;
            test.extend(heads[..n_test].iter().map(|&x| triple(x)));
            train.extend(heads[n_test..].iter().map(|&x| triple(x)));
        } else {
            fewshot.push(r);
            train.extend(heads[..config.fewshot_train].iter().map(|&x| triple(x)));
            test.extend(
                heads[config.fewshot_train..config.fewshot_train + config.fewshot_test]
                    .iter()
                    .map(|&x| triple(x)),
            );
        }
    }
    let dataset = Dataset::new(entities, relations, train, Vec::new(), test, config.add_inverses)?;
    let normal_train = n - (n as f64 * config.normal_test_fraction).round() as usize;
    let threshold = (config.fewshot_train + 1).max(normal_train.min(n) / 2);
    Ok(SyntheticKg {
        dataset,
        threshold,
        base: (0..nb).map(rel).collect(),
        normal,
        fewshot,
        rules,
    })
}
