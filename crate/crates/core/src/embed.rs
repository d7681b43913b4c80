//! Knowledge-graph embedding scorers used as a soft terminal reward.
//!
//! Two families are supported:
//!
//! * DistMult: `raw(s, r, o) = Σ_k s_k r_k o_k`.
//! * ConvE: the head and relation vectors are reshaped to `rows × cols`
//!   images, stacked vertically, correlated with a bank of `k × k` filters
//!   (valid padding), passed through ReLU, flattened, projected back to `d`
//!   and dotted with the tail embedding; a per-tail bias is added.
//!
//! Both map raw scores through a sigmoid, so scores lie in `(0, 1)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, Graph, RelationId, TaskSplit, Triple};
use crate::tensor::{Adam, AdamConfig, Checkpoint, ParamSet, ParamVars, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    DistMult,
    ConvE,
}

impl EmbedKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedKind::DistMult => "distmult",
            EmbedKind::ConvE => "conve",
        }
    }
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distmult" => Ok(Self::DistMult),
            "conve" => Ok(Self::ConvE),
            other => Err(Error::invalid(format!("unknown embedding kind `{other}`"))),
        }
    }
}

/// Geometry of the ConvE feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    /// Rows of each reshaped vector; `dim` must be divisible by it.
    pub rows: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn cols(&self, dim: usize) -> usize {
        dim / self.rows
    }

    fn out_hw(&self, dim: usize) -> (usize, usize) {
        (2 * self.rows + 1 - self.kernel, self.cols(dim) + 1 - self.kernel)
    }

    fn patches(&self, dim: usize) -> usize {
        let (h, w) = self.out_hw(dim);
        h * w
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.rows == 0 || !dim.is_multiple_of(self.rows) {
            return Err(Error::invalid(format!(
                "embedding dim {dim} is not divisible into {} rows",
                self.rows
            )));
        }
        if self.kernel == 0 || self.kernel > 2 * self.rows || self.kernel > self.cols(dim) {
            return Err(Error::invalid(format!(
                "kernel {} does not fit a {}x{} image",
                self.kernel,
                2 * self.rows,
                self.cols(dim)
            )));
        }
        if self.filters == 0 {
            return Err(Error::invalid("ConvE needs at least one filter"));
        }
        Ok(())
    }

    /// Column indices into `[head; relation]` for every patch, patch-major.
    fn im2col(&self, dim: usize) -> Vec<usize> {
        let cols = self.cols(dim);
        let (oh, ow) = self.out_hw(dim);
        let mut idx = Vec::with_capacity(oh * ow * self.kernel * self.kernel);
        for i in 0..oh {
            for j in 0..ow {
                for a in 0..self.kernel {
                    for b in 0..self.kernel {
                        idx.push((i + a) * cols + (j + b));
                    }
                }
            }
        }
        idx
    }
}

impl Default for ConvShape {
    fn default() -> Self {
        Self {
            rows: 4,
            filters: 8,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedModel {
    pub kind: EmbedKind,
    pub dim: usize,
    pub conv: Option<ConvShape>,
    pub params: ParamSet,
    num_entities: usize,
    num_relations: usize,
}

const ENTITY: &str = "entity";
const RELATION: &str = "relation";
const FILTERS: &str = "filters";
const FILTER_BIAS: &str = "filter_bias";
const PROJECTION: &str = "projection";
const TAIL_BIAS: &str = "tail_bias";

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl EmbedModel {
    fn build(
        kind: EmbedKind,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        conv: Option<ConvShape>,
        mut fill: impl FnMut(&[usize], usize) -> Tensor,
    ) -> Result<Self> {
        if dim == 0 || num_entities == 0 || num_relations == 0 {
            return Err(Error::invalid("embedding model needs non-empty vocabularies and dim > 0"));
        }
        let mut params = ParamSet::new();
        params.insert(ENTITY, fill(&[num_entities, dim], dim))?;
        params.insert(RELATION, fill(&[num_relations, dim], dim))?;
        let conv = match kind {
            EmbedKind::DistMult => None,
            EmbedKind::ConvE => {
                let c = conv.unwrap_or_default();
                c.validate(dim)?;
                let k2 = c.kernel * c.kernel;
                let flat = c.patches(dim) * c.filters;
                params.insert(FILTERS, fill(&[k2, c.filters], k2))?;
                params.insert(FILTER_BIAS, Tensor::zeros(&[c.filters]))?;
                params.insert(PROJECTION, fill(&[flat, dim], flat))?;
                params.insert(TAIL_BIAS, Tensor::zeros(&[num_entities]))?;
                Some(c)
            }
        };
        Ok(Self {
            kind,
            dim,
            conv,
            params,
            num_entities,
            num_relations,
        })
    }

    /// Weights drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn random(
        kind: EmbedKind,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        conv: Option<ConvShape>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(kind, num_entities, num_relations, dim, conv, |shape, fan_in| {
            Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
        })
    }

    pub fn zeros(
        kind: EmbedKind,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        conv: Option<ConvShape>,
    ) -> Result<Self> {
        Self::build(kind, num_entities, num_relations, dim, conv, |shape, _| {
            Tensor::zeros(shape)
        })
    }

    pub fn for_graph(graph: &Graph, kind: EmbedKind, dim: usize, seed: u64) -> Result<Self> {
        Self::random(kind, graph.num_entities(), graph.num_relations(), dim, None, seed)
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    fn check_ids(&self, heads: &[usize], rels: &[usize]) -> Result<()> {
        if let Some(h) = heads.iter().find(|&&h| h >= self.num_entities) {
            return Err(Error::invalid(format!("unknown entity id {h}")));
        }
        if let Some(r) = rels.iter().find(|&&r| r >= self.num_relations) {
            return Err(Error::invalid(format!("unknown relation id {r}")));
        }
        Ok(())
    }

    /// `B × d` query representations for `(head, relation)` pairs.
    fn query_vectors(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        heads: &[usize],
        rels: &[usize],
    ) -> Result<Var> {
        let e = tape.gather_rows(vars.get(ENTITY)?, heads)?;
        let r = tape.gather_rows(vars.get(RELATION)?, rels)?;
        match self.kind {
            EmbedKind::DistMult => tape.mul(e, r),
            EmbedKind::ConvE => {
                let c = self.conv.expect("ConvE model carries its shape");
                let b = heads.len();
                let k2 = c.kernel * c.kernel;
                let p = c.patches(self.dim);
                let image = tape.concat(&[e, r])?;
                let cols = tape.gather_cols(image, &c.im2col(self.dim))?;
                let patches = tape.reshape(cols, vec![b * p, k2])?;
                let conv = tape.matmul(patches, vars.get(FILTERS)?)?;
                let conv = tape.add_row(conv, vars.get(FILTER_BIAS)?)?;
                let act = tape.relu(conv);
                let flat = tape.reshape(act, vec![b, p * c.filters])?;
                tape.matmul(flat, vars.get(PROJECTION)?)
            }
        }
    }

    /// Raw (pre-sigmoid) scores of every entity as tail: `B × |E|`.
    pub fn raw_all_tails(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        heads: &[usize],
        rels: &[usize],
    ) -> Result<Var> {
        self.check_ids(heads, rels)?;
        let q = self.query_vectors(tape, vars, heads, rels)?;
        let et = tape.transpose(vars.get(ENTITY)?)?;
        let logits = tape.matmul(q, et)?;
        match self.kind {
            EmbedKind::DistMult => Ok(logits),
            EmbedKind::ConvE => tape.add_row(logits, vars.get(TAIL_BIAS)?),
        }
    }

    /// Raw scores for explicit `(head, relation, tail)` triples: length `B`.
    pub fn raw_pairs(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        heads: &[usize],
        rels: &[usize],
        tails: &[usize],
    ) -> Result<Var> {
        self.check_ids(heads, rels)?;
        self.check_ids(tails, &[])?;
        let q = self.query_vectors(tape, vars, heads, rels)?;
        let t = tape.gather_rows(vars.get(ENTITY)?, tails)?;
        let prod = tape.mul(q, t)?;
        let raw = tape.sum_last(prod)?;
        match self.kind {
            EmbedKind::DistMult => Ok(raw),
            EmbedKind::ConvE => {
                let bias = tape.gather_rows(vars.get(TAIL_BIAS)?, tails)?;
                tape.add(raw, bias)
            }
        }
    }

    pub fn raw_score(&self, head: EntityId, r: RelationId, tail: EntityId) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let v = self.raw_pairs(&mut tape, &vars, &[head.index()], &[r.index()], &[tail.index()])?;
        Ok(tape.value(v).item())
    }

    /// Plausibility of a triple in `(0, 1)`.
    pub fn score(&self, head: EntityId, r: RelationId, tail: EntityId) -> Result<f64> {
        Ok(sigmoid(self.raw_score(head, r, tail)?))
    }

    /// Scores of a batch of triples.
    pub fn score_triples(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        if triples.is_empty() {
            return Ok(Vec::new());
        }
        let h: Vec<usize> = triples.iter().map(|t| t.head.index()).collect();
        let r: Vec<usize> = triples.iter().map(|t| t.relation.index()).collect();
        let t: Vec<usize> = triples.iter().map(|t| t.tail.index()).collect();
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let v = self.raw_pairs(&mut tape, &vars, &h, &r, &t)?;
        Ok(tape.value(v).data().iter().map(|&x| sigmoid(x)).collect())
    }

    /// Scores of every entity as the tail of `(head, r, ?)`.
    pub fn score_all_tails(&self, head: EntityId, r: RelationId) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let v = self.raw_all_tails(&mut tape, &vars, &[head.index()], &[r.index()])?;
        Ok(tape.value(v).data().iter().map(|&x| sigmoid(x)).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(format!("embed-{}", self.kind.as_str()), self.params.clone())
            .with_meta("dim", self.dim)
            .with_meta("num_entities", self.num_entities)
            .with_meta("num_relations", self.num_relations);
        if let Some(c) = self.conv {
            ck = ck
                .with_meta("conv_rows", c.rows)
                .with_meta("conv_filters", c.filters)
                .with_meta("conv_kernel", c.kernel);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: EmbedKind = ck
            .kind
            .strip_prefix("embed-")
            .ok_or_else(|| Error::Checkpoint(format!("`{}` is not an embedding checkpoint", ck.kind)))?
            .parse()?;
        let dim = ck.meta_parse("dim")?;
        let num_entities = ck.meta_parse("num_entities")?;
        let num_relations = ck.meta_parse("num_relations")?;
        let conv = match kind {
            EmbedKind::DistMult => None,
            EmbedKind::ConvE => Some(ConvShape {
                rows: ck.meta_parse("conv_rows")?,
                filters: ck.meta_parse("conv_filters")?,
                kernel: ck.meta_parse("conv_kernel")?,
            }),
        };
        let template = Self::zeros(kind, num_entities, num_relations, dim, conv)?;
        for (name, t) in template.params.iter() {
            let got = ck.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong shape")));
            }
        }
        Ok(Self {
            params: ck.params.clone(),
            ..template
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: EmbedKind,
    pub dim: usize,
    pub conv: ConvShape,
    pub epochs: usize,
    pub lr: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            kind: EmbedKind::DistMult,
            dim: 32,
            conv: ConvShape::default(),
            epochs: 100,
            lr: 0.01,
            label_smoothing: 0.1,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: EmbedModel,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a scorer on the normal-relation triples of `split` with 1-to-all
/// binary cross-entropy and label smoothing, optimized by Adam.
pub fn pretrain(graph: &Graph, split: &TaskSplit, config: &PretrainConfig) -> Result<Pretrained> {
    let triples: Vec<Triple> = split.normal_triples().copied().collect();
    pretrain_on(graph, &triples, config)
}

/// As [`pretrain`], over an explicit triple list.
pub fn pretrain_on(graph: &Graph, triples: &[Triple], config: &PretrainConfig) -> Result<Pretrained> {
    if triples.is_empty() {
        return Err(Error::invalid("no training triples for the embedding model"));
    }
    if !(0.0..1.0).contains(&config.label_smoothing) || config.batch_size == 0 {
        return Err(Error::invalid("label smoothing must be in [0, 1) and batch size positive"));
    }
    let n = graph.num_entities();
    let mut model = EmbedModel::random(
        config.kind,
        n,
        graph.num_relations(),
        config.dim,
        Some(config.conv),
        config.seed,
    )?;
    let mut tails: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for t in triples {
        tails
            .entry((t.head.index(), t.relation.index()))
            .or_default()
            .insert(t.tail.index());
    }
    let mut pairs: Vec<(usize, usize)> = tails.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(AdamConfig::default());
    let eps = config.label_smoothing;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let heads: Vec<usize> = batch.iter().map(|p| p.0).collect();
            let rels: Vec<usize> = batch.iter().map(|p| p.1).collect();
            let mut targets = Tensor::full(&[batch.len(), n], eps / n as f64);
            for (i, p) in batch.iter().enumerate() {
                for &t in &tails[p] {
                    targets.data_mut()[i * n + t] += 1.0 - eps;
                }
            }
            let mut tape = Tape::new();
            let vars = model.params.attach(&mut tape);
            let logits = model.raw_all_tails(&mut tape, &vars, &heads, &rels)?;
            let loss = tape.bce_with_logits(logits, targets)?;
            total += tape.value(loss).item() * batch.len() as f64;
            let mut g = tape.backward(loss)?;
            let grads = vars.collect(&tape, &mut g);
            model.params = adam.step(&model.params, &grads, config.lr)?;
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    Ok(Pretrained {
        model,
        epoch_losses,
    })
}

/// Filtered mean reciprocal rank of the true tail among all entities.
pub fn tail_ranking_mrr(model: &EmbedModel, triples: &[Triple], known: &HashSet<Triple>) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("no triples to rank"));
    }
    let mut total = 0.0;
    for t in triples {
        let scores = model.score_all_tails(t.head, t.relation)?;
        let gold = scores[t.tail.index()];
        let above = scores
            .iter()
            .enumerate()
            .filter(|&(e, &s)| {
                e != t.tail.index()
                    && s > gold
                    && !known.contains(&Triple::new(t.head, t.relation, EntityId(e as u32)))
            })
            .count();
        total += 1.0 / (above + 1) as f64;
    }
    Ok(total / triples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_scores_half() {
        for kind in [EmbedKind::DistMult, EmbedKind::ConvE] {
            let m = EmbedModel::zeros(kind, 3, 2, 16, None).unwrap();
            let s = m.score(EntityId(0), RelationId(1), EntityId(2)).unwrap();
            assert_eq!(s, 0.5);
            assert!(m
                .score_all_tails(EntityId(1), RelationId(0))
                .unwrap()
                .iter()
                .all(|&v| v == 0.5));
        }
    }

    #[test]
    fn distmult_basis_vectors() {
        let mut m = EmbedModel::zeros(EmbedKind::DistMult, 1, 1, 4, None).unwrap();
        let basis = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        m.params.set(ENTITY, basis.clone()).unwrap();
        m.params.set(RELATION, basis).unwrap();
        let s = m.score(EntityId(0), RelationId(0), EntityId(0)).unwrap();
        assert!((s - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let m = EmbedModel::random(EmbedKind::DistMult, 3, 2, 4, None, 0).unwrap();
        assert!(m.score(EntityId(3), RelationId(0), EntityId(0)).is_err());
        assert!(m.score(EntityId(0), RelationId(2), EntityId(0)).is_err());
        assert!(m.score(EntityId(0), RelationId(0), EntityId(9)).is_err());
    }

    #[test]
    fn conve_shape_must_divide() {
        let bad = ConvShape {
            rows: 3,
            filters: 2,
            kernel: 3,
        };
        assert!(EmbedModel::random(EmbedKind::ConvE, 4, 2, 16, Some(bad), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = EmbedModel::random(EmbedKind::ConvE, 5, 3, 16, None, 4).unwrap();
        let back = EmbedModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        use crate::kg::Vocab;
        let mut e = Vocab::new();
        e.intern("a");
        let mut r = Vocab::new();
        r.intern("p");
        let g = Graph::build(e, r, &[], true).unwrap();
        assert!(pretrain_on(&g, &[], &PretrainConfig::default()).is_err());
    }
}
