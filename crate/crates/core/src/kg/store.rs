//! Dataset container and its on-disk formats.
//!
//! The graph checkpoint is a JSON document:
//!
//! ```text
//! {"format": "metakgr-graph", "version": 1, "add_inverses": bool,
//!  "num_forward_relations": n, "entities": [names], "relations": [names],
//!  "edges": [[h, r, t], ...], "train": [...], "valid": [...], "test": [...]}
//! ```
//!
//! `relations` lists forward relations, then synthesized inverses, then the
//! self-loop. `edges` is the full adjacency (inverses included); the three
//! partitions hold forward triples as id triples.
//!
//! The split manifest is tab-separated text: a `# metakgr-split v1` line, a
//! `K<TAB>n` line, a column header, then one `relation<TAB>count<TAB>kind`
//! row per forward relation in id order.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_triples, split_by_frequency, EntityId, Graph, Partition, RelationId, Task, TaskSplit,
    Triple, Vocab,
};
use crate::error::{Error, Result};

pub const GRAPH_FORMAT: &str = "metakgr-graph";
pub const GRAPH_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "# metakgr-split v1";

/// Reasoning graph plus the forward triples of each partition.
///
/// The graph is built from training triples only, so evaluation answers are
/// never edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub graph: Graph,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u32,
    add_inverses: bool,
    num_forward_relations: usize,
    entities: Vec<String>,
    relations: Vec<String>,
    edges: Vec<[u32; 3]>,
    train: Vec<[u32; 3]>,
    valid: Vec<[u32; 3]>,
    test: Vec<[u32; 3]>,
}

fn pack(ts: &[Triple]) -> Vec<[u32; 3]> {
    ts.iter().map(|t| [t.head.0, t.relation.0, t.tail.0]).collect()
}

fn unpack(ts: &[[u32; 3]]) -> Vec<Triple> {
    ts.iter()
        .map(|&[h, r, t]| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
        .collect()
}

impl Dataset {
    /// Builds a dataset from parsed partitions. Vocabularies hold forward
    /// relations only.
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        add_inverses: bool,
    ) -> Result<Self> {
        let graph = Graph::build(entities, relations, &train, add_inverses)?;
        for t in valid.iter().chain(&test) {
            graph.check_entity(t.head)?;
            graph.check_entity(t.tail)?;
            if !graph.is_forward(t.relation) {
                return Err(Error::invalid(format!("{t:?} uses a non-forward relation")));
            }
        }
        Ok(Self {
            graph,
            train,
            valid,
            test,
        })
    }

    /// Parses triple files; ids are assigned in first-seen order over train,
    /// then valid, then test.
    pub fn from_files(
        train: &Path,
        valid: Option<&Path>,
        test: Option<&Path>,
        add_inverses: bool,
    ) -> Result<Self> {
        let (mut ents, mut rels) = (Vocab::new(), Vocab::new());
        let mut read = |p: &Path| -> Result<Vec<Triple>> {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            parse_triples(std::io::BufReader::new(f), &mut ents, &mut rels).map_err(|e| match e {
                Error::Parse { line, message } => Error::Parse {
                    line,
                    message: format!("{}: {message}", p.display()),
                },
                other => other,
            })
        };
        let tr = read(train)?;
        let va = valid.map(&mut read).transpose()?.unwrap_or_default();
        let te = test.map(&mut read).transpose()?.unwrap_or_default();
        Self::new(ents, rels, tr, va, te, add_inverses)
    }

    /// Frequency split over training triples. Forward relations without any
    /// training triple count as few-shot with an empty list.
    pub fn split(&self, threshold: usize) -> Result<TaskSplit> {
        let mut s = split_by_frequency(&self.train, threshold)?;
        for r in 0..self.graph.num_forward_relations() as u32 {
            let r = RelationId(r);
            if !s.normal.contains_key(&r) && !s.fewshot.contains_key(&r) {
                s.fewshot.insert(r, Vec::new());
            }
        }
        Ok(s)
    }

    pub fn task(&self, relation: RelationId) -> Result<Task> {
        let labelled = [
            (&self.train, Partition::Train),
            (&self.valid, Partition::Valid),
            (&self.test, Partition::Test),
        ];
        let triples = labelled
            .iter()
            .flat_map(|(ts, p)| {
                ts.iter()
                    .filter(|t| t.relation == relation)
                    .map(move |t| (*t, *p))
            })
            .collect();
        Task::new(relation, triples)
    }

    /// Every known-true forward triple, for filtered ranking.
    pub fn known_triples(&self) -> HashSet<Triple> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .copied()
            .collect()
    }

    pub fn to_json(&self) -> String {
        let g = &self.graph;
        let file = GraphFile {
            format: GRAPH_FORMAT.into(),
            version: GRAPH_VERSION,
            add_inverses: g.has_inverses(),
            num_forward_relations: g.num_forward_relations(),
            entities: g.entities().names().to_vec(),
            relations: g.relations().names().to_vec(),
            edges: pack(&g.edges().collect::<Vec<_>>()),
            train: pack(&self.train),
            valid: pack(&self.valid),
            test: pack(&self.test),
        };
        let mut s = serde_json::to_string(&file).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format: String,
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("bad graph file: {e}")))?;
        if probe.format != GRAPH_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", probe.format)));
        }
        if probe.version != GRAPH_VERSION {
            return Err(Error::VersionMismatch {
                expected: GRAPH_VERSION,
                found: probe.version,
            });
        }
        let f: GraphFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("bad graph file: {e}")))?;
        let graph = Graph::from_parts(
            Vocab::from_names(f.entities)?,
            Vocab::from_names(f.relations)?,
            f.num_forward_relations,
            f.add_inverses,
            &unpack(&f.edges),
        )?;
        let ds = Self {
            graph,
            train: unpack(&f.train),
            valid: unpack(&f.valid),
            test: unpack(&f.test),
        };
        for t in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            if t.head.index() >= ds.graph.num_entities()
                || t.tail.index() >= ds.graph.num_entities()
                || !ds.graph.is_forward(t.relation)
            {
                return Err(Error::Checkpoint(format!("triple {t:?} out of range")));
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn manifest(&self, split: &TaskSplit) -> String {
        let mut out = String::new();
        writeln!(out, "{MANIFEST_MAGIC}").unwrap();
        writeln!(out, "K\t{}", split.threshold).unwrap();
        writeln!(out, "relation\tcount\tkind").unwrap();
        for r in 0..self.graph.num_forward_relations() as u32 {
            let r = RelationId(r);
            let (count, kind) = match (split.normal.get(&r), split.fewshot.get(&r)) {
                (Some(l), _) => (l.len(), "normal"),
                (_, Some(l)) => (l.len(), "fewshot"),
                _ => continue,
            };
            writeln!(out, "{}\t{count}\t{kind}", self.graph.relation_name(r)).unwrap();
        }
        out
    }

    /// Reads a manifest and regroups this dataset's training triples by it.
    pub fn split_from_manifest(&self, text: &str) -> Result<TaskSplit> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(Error::Checkpoint("not a split manifest".into()));
        }
        let threshold: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("K\t"))
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| Error::Checkpoint("manifest is missing its K line".into()))?;
        lines.next();
        let mut groups: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
        for t in &self.train {
            groups.entry(t.relation).or_default().push(*t);
        }
        let (mut normal, mut fewshot) = (BTreeMap::new(), BTreeMap::new());
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    line: i + 4,
                    message: "expected relation, count, kind".into(),
                });
            }
            let r = self.graph.relation_id(cols[0])?;
            let list = groups.remove(&r).unwrap_or_default();
            if cols[1].parse::<usize>().ok() != Some(list.len()) {
                return Err(Error::Checkpoint(format!(
                    "manifest count for `{}` does not match the graph",
                    cols[0]
                )));
            }
            match cols[2] {
                "normal" => normal.insert(r, list),
                "fewshot" => fewshot.insert(r, list),
                other => {
                    return Err(Error::Checkpoint(format!("unknown task kind `{other}`")));
                }
            };
        }
        Ok(TaskSplit {
            threshold,
            normal,
            fewshot,
        })
    }
}
