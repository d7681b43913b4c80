use std::collections::{BTreeMap, BTreeSet};

use super::{EntityId, RelationId, Triple, Vocab};
use crate::error::{Error, Result};

/// Suffix appended to a relation name to name its synthesized inverse.
pub const INVERSE_SUFFIX: &str = "_inv";
/// Name of the reserved self-loop (STOP) relation.
pub const SELF_LOOP_NAME: &str = "SELF_LOOP";

/// Outgoing edge: `(relation, neighbor)`.
pub type Edge = (RelationId, EntityId);

/// Immutable directed multigraph used for reasoning.
///
/// Relation ids are laid out as `[forward..., inverses..., SELF_LOOP]`; the
/// inverse of forward relation `r` is `r + num_forward`. The self-loop is
/// never stored as an edge; the environment adds it to every action space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    entities: Vocab,
    relations: Vocab,
    num_forward: usize,
    has_inverses: bool,
    adjacency: Vec<Vec<Edge>>,
    by_relation: BTreeMap<RelationId, Vec<Triple>>,
}

impl Graph {
    /// Builds the graph from forward triples. `relations` must hold only
    /// forward relations; inverse and self-loop relations are appended here.
    pub fn build(
        entities: Vocab,
        forward_relations: Vocab,
        triples: &[Triple],
        add_inverses: bool,
    ) -> Result<Self> {
        let num_forward = forward_relations.len();
        for t in triples {
            if t.head.index() >= entities.len() || t.tail.index() >= entities.len() {
                return Err(Error::invalid(format!("triple {t:?} names an unknown entity")));
            }
            if t.relation.index() >= num_forward {
                return Err(Error::invalid(format!("triple {t:?} names an unknown relation")));
            }
        }
        let mut relations = forward_relations;
        if add_inverses {
            for i in 0..num_forward {
                let name = format!("{}{INVERSE_SUFFIX}", relations.names()[i]);
                if relations.id(&name).is_some() {
                    return Err(Error::invalid(format!(
                        "relation `{name}` collides with a synthesized inverse name"
                    )));
                }
                relations.intern(&name);
            }
        }
        if relations.id(SELF_LOOP_NAME).is_some() {
            return Err(Error::invalid(format!("`{SELF_LOOP_NAME}` is a reserved relation name")));
        }
        relations.intern(SELF_LOOP_NAME);

        let unique: BTreeSet<Triple> = triples.iter().copied().collect();
        let mut adjacency: Vec<BTreeSet<Edge>> = vec![BTreeSet::new(); entities.len()];
        let mut by_relation: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
        for t in &unique {
            adjacency[t.head.index()].insert((t.relation, t.tail));
            if add_inverses {
                let inv = RelationId(t.relation.0 + num_forward as u32);
                adjacency[t.tail.index()].insert((inv, t.head));
            }
            by_relation.entry(t.relation).or_default().push(*t);
        }
        Ok(Self {
            entities,
            relations,
            num_forward,
            has_inverses: add_inverses,
            adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
            by_relation,
        })
    }

    /// Reassembles a graph from stored parts, validating every edge.
    pub(crate) fn from_parts(
        entities: Vocab,
        relations: Vocab,
        num_forward: usize,
        has_inverses: bool,
        edges: &[Triple],
    ) -> Result<Self> {
        let expected = num_forward * if has_inverses { 2 } else { 1 } + 1;
        if relations.len() != expected || relations.name(expected as u32 - 1) != Some(SELF_LOOP_NAME)
        {
            return Err(Error::Checkpoint("relation vocabulary layout is inconsistent".into()));
        }
        let mut adjacency: Vec<Vec<Edge>> = vec![Vec::new(); entities.len()];
        let mut by_relation: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
        for t in edges {
            if t.head.index() >= entities.len()
                || t.tail.index() >= entities.len()
                || t.relation.index() >= expected - 1
            {
                return Err(Error::Checkpoint(format!("edge {t:?} out of range")));
            }
            adjacency[t.head.index()].push((t.relation, t.tail));
            if t.relation.index() < num_forward {
                by_relation.entry(t.relation).or_default().push(*t);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        for list in by_relation.values_mut() {
            list.sort_unstable();
        }
        Ok(Self {
            entities,
            relations,
            num_forward,
            has_inverses,
            adjacency,
            by_relation,
        })
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// All relation ids, including inverses and the self-loop.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_forward_relations(&self) -> usize {
        self.num_forward
    }

    pub fn has_inverses(&self) -> bool {
        self.has_inverses
    }

    pub fn self_loop(&self) -> RelationId {
        RelationId(self.relations.len() as u32 - 1)
    }

    pub fn is_forward(&self, r: RelationId) -> bool {
        r.index() < self.num_forward
    }

    /// Inverse partner of a forward or inverse relation.
    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        if !self.has_inverses || r == self.self_loop() {
            return None;
        }
        let f = self.num_forward as u32;
        Some(if r.0 < f { RelationId(r.0 + f) } else { RelationId(r.0 - f) })
    }

    /// Outgoing edges sorted by `(relation, neighbor)`.
    pub fn neighbors(&self, e: EntityId) -> &[Edge] {
        &self.adjacency[e.index()]
    }

    pub fn has_edge(&self, head: EntityId, r: RelationId, tail: EntityId) -> bool {
        self.adjacency
            .get(head.index())
            .is_some_and(|adj| adj.binary_search(&(r, tail)).is_ok())
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Every stored edge as a triple, ordered by head then `(relation, tail)`.
    pub fn edges(&self) -> impl Iterator<Item = Triple> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(h, adj)| {
            adj.iter()
                .map(move |&(r, t)| Triple::new(EntityId(h as u32), r, t))
        })
    }

    /// Deduplicated forward triples grouped by relation.
    pub fn by_relation(&self) -> &BTreeMap<RelationId, Vec<Triple>> {
        &self.by_relation
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities
            .id(name)
            .map(EntityId)
            .ok_or_else(|| Error::UnknownName {
                kind: "entity",
                name: name.to_string(),
            })
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId> {
        self.relations
            .id(name)
            .map(RelationId)
            .ok_or_else(|| Error::UnknownName {
                kind: "relation",
                name: name.to_string(),
            })
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0).unwrap_or("<unknown>")
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r.0).unwrap_or("<unknown>")
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::invalid(format!("entity id {} out of range", e.0)))
        }
    }

    pub fn check_relation(&self, r: RelationId) -> Result<()> {
        if r.index() < self.num_relations() {
            Ok(())
        } else {
            Err(Error::invalid(format!("relation id {} out of range", r.0)))
        }
    }
}
