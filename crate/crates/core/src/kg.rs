//! Knowledge graph storage with per-edge identifiers and the inverse /
//! self-loop augmentation that defines the walker's action space.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label of the self-loop relation.
pub const STOP_RELATION: &str = "<stop>";
const INVERSE_SUFFIX: &str = "^-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub usize);

/// Identifier of an individual triple, including augmented ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeUid(pub usize);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub label: String,
    pub external_key: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Forward,
    Inverse,
    SelfLoop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub label: String,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub uid: EdgeUid,
}

/// One outgoing edge as seen from its source entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionEdge {
    pub relation: RelationId,
    pub uid: EdgeUid,
    pub target: EntityId,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    /// Indexed by `EdgeUid`.
    triples: Vec<Triple>,
    /// Triple indices per head entity, ascending by uid.
    adjacency: Vec<Vec<usize>>,
    forward_count: usize,
    augmented: bool,
    stop_relation: Option<RelationId>,
    #[serde(skip)]
    entity_index: HashMap<String, EntityId>,
    #[serde(skip)]
    relation_index: HashMap<String, RelationId>,
}

impl KnowledgeGraph {
    /// Builds a graph from labelled triples. Labels are interned to dense ids
    /// in first-appearance order; repeated triples keep their first uid.
    pub fn from_labeled<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<Self> {
        let mut g = KnowledgeGraph::default();
        let mut seen = HashSet::new();
        for (h, r, t) in triples {
            let head = g.intern_entity(h);
            let relation = g.intern_relation(r)?;
            let tail = g.intern_entity(t);
            if seen.insert((head, relation, tail)) {
                let uid = EdgeUid(g.triples.len());
                g.triples.push(Triple {
                    head,
                    relation,
                    tail,
                    uid,
                });
            }
        }
        if g.triples.is_empty() {
            return Err(Error::EmptyInput("knowledge graph has no triples".into()));
        }
        g.forward_count = g.triples.len();
        g.rebuild_adjacency();
        Ok(g)
    }

    /// Declares an entity that may have no triples (isolated node).
    pub fn add_isolated_entity(&mut self, label: &str) -> Result<EntityId> {
        if self.augmented {
            return Err(Error::contract("cannot add entities after augmentation"));
        }
        let id = self.intern_entity(label);
        self.adjacency.resize(self.entities.len(), Vec::new());
        Ok(id)
    }

    fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(label) {
            return id;
        }
        let id = EntityId(self.entities.len());
        self.entities.push(Entity {
            id,
            label: label.to_string(),
            external_key: label.to_string(),
        });
        self.entity_index.insert(label.to_string(), id);
        id
    }

    fn intern_relation(&mut self, label: &str) -> Result<RelationId> {
        if label == STOP_RELATION || label.ends_with(INVERSE_SUFFIX) {
            return Err(Error::contract(format!("relation label `{label}` is reserved")));
        }
        if let Some(&id) = self.relation_index.get(label) {
            return Ok(id);
        }
        let id = RelationId(self.relations.len());
        self.relations.push(Relation {
            id,
            label: label.to_string(),
            kind: EdgeKind::Forward,
        });
        self.relation_index.insert(label.to_string(), id);
        Ok(id)
    }

    fn rebuild_adjacency(&mut self) {
        self.adjacency = vec![Vec::new(); self.entities.len()];
        for (i, t) in self.triples.iter().enumerate() {
            self.adjacency[t.head.0].push(i);
        }
    }

    fn rebuild_indexes(&mut self) {
        self.entity_index = self.entities.iter().map(|e| (e.external_key.clone(), e.id)).collect();
        self.relation_index = self.relations.iter().map(|r| (r.label.clone(), r.id)).collect();
    }

    /// Adds one inverse triple per original triple and one self-loop per
    /// entity; afterwards the triple count is `2 * |L| + |V|`.
    pub fn augment(mut self) -> Result<Self> {
        if self.augmented {
            return Err(Error::contract("graph is already augmented"));
        }
        let forward_relations = self.relations.len();
        for r in 0..forward_relations {
            let label = format!("{}{INVERSE_SUFFIX}", self.relations[r].label);
            let id = RelationId(self.relations.len());
            self.relations.push(Relation {
                id,
                label: label.clone(),
                kind: EdgeKind::Inverse,
            });
            self.relation_index.insert(label, id);
        }
        let stop = RelationId(self.relations.len());
        self.relations.push(Relation {
            id: stop,
            label: STOP_RELATION.to_string(),
            kind: EdgeKind::SelfLoop,
        });
        self.relation_index.insert(STOP_RELATION.to_string(), stop);

        for i in 0..self.forward_count {
            let t = self.triples[i];
            let uid = EdgeUid(self.triples.len());
            self.triples.push(Triple {
                head: t.tail,
                relation: RelationId(t.relation.0 + forward_relations),
                tail: t.head,
                uid,
            });
        }
        for e in 0..self.entities.len() {
            let uid = EdgeUid(self.triples.len());
            self.triples.push(Triple {
                head: EntityId(e),
                relation: stop,
                tail: EntityId(e),
                uid,
            });
        }
        self.stop_relation = Some(stop);
        self.augmented = true;
        self.rebuild_adjacency();
        Ok(self)
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relations present before augmentation.
    pub fn num_forward_relations(&self) -> usize {
        self.relations.iter().filter(|r| r.kind == EdgeKind::Forward).count()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Triples present before augmentation.
    pub fn forward_triples(&self) -> &[Triple] {
        &self.triples[..self.forward_count]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities
            .get(id.0)
            .ok_or_else(|| Error::Lookup(format!("entity {} not in graph", id.0)))
    }

    pub fn relation(&self, id: RelationId) -> Result<&Relation> {
        self.relations
            .get(id.0)
            .ok_or_else(|| Error::Lookup(format!("relation {} not in graph", id.0)))
    }

    pub fn contains_entity(&self, id: EntityId) -> bool {
        id.0 < self.entities.len()
    }

    pub fn entity_by_key(&self, key: &str) -> Option<EntityId> {
        self.entity_index.get(key).copied()
    }

    pub fn relation_by_label(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label).copied()
    }

    pub fn stop_relation(&self) -> Option<RelationId> {
        self.stop_relation
    }

    fn kind_of(&self, t: &Triple) -> EdgeKind {
        self.relations[t.relation.0].kind
    }

    /// Outgoing edges of `entity` in ascending uid order, including inverse
    /// and self-loop edges.
    pub fn out_edges(&self, entity: EntityId) -> Result<Vec<ActionEdge>> {
        if !self.augmented {
            return Err(Error::contract("out_edges requires an augmented graph"));
        }
        let list = self
            .adjacency
            .get(entity.0)
            .ok_or_else(|| Error::Lookup(format!("entity {} not in graph", entity.0)))?;
        Ok(list
            .iter()
            .map(|&i| {
                let t = &self.triples[i];
                ActionEdge {
                    relation: t.relation,
                    uid: t.uid,
                    target: t.tail,
                    kind: self.kind_of(t),
                }
            })
            .collect())
    }

    /// Forward (original) edges leaving `entity`.
    pub fn forward_out(&self, entity: EntityId) -> impl Iterator<Item = &Triple> + '_ {
        self.adjacency
            .get(entity.0)
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i])
            .filter(move |t| self.relations[t.relation.0].kind == EdgeKind::Forward)
    }

    /// Entities reachable from `start` within `hops` steps along any
    /// outgoing edge (forward or inverse), including `start`.
    pub fn within_hops(&self, start: EntityId, hops: usize) -> HashSet<EntityId> {
        let mut seen = HashSet::from([start]);
        let mut frontier = vec![start];
        for _ in 0..hops {
            let mut next = Vec::new();
            for e in frontier {
                for &i in self.adjacency.get(e.0).into_iter().flatten() {
                    let t = self.triples[i].tail;
                    if seen.insert(t) {
                        next.push(t);
                    }
                }
                if !self.augmented {
                    for t in &self.triples {
                        if t.tail == e && seen.insert(t.head) {
                            next.push(t.head);
                        }
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    /// Up to `limit` entity keys closest to `key` by normalised edit distance.
    pub fn nearest_keys(&self, key: &str, limit: usize) -> Vec<String> {
        let needle = key.to_lowercase();
        let mut scored: Vec<(f64, &str)> = self
            .entities
            .iter()
            .map(|e| {
                (
                    strsim::normalized_levenshtein(&needle, &e.external_key.to_lowercase()),
                    e.external_key.as_str(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(limit).map(|(_, k)| k.to_string()).collect()
    }

    /// Reads a UTF-8 `head \t relation \t tail` file; `#` starts a comment.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn parse_tsv(text: &str, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = trimmed.split('\t').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: n + 1,
                    message: format!("expected `head<TAB>relation<TAB>tail`, got {} fields", parts.len()),
                });
            }
            rows.push((n + 1, parts[0].trim(), parts[1].trim(), parts[2].trim()));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput(format!("{source}: no triples")));
        }
        let mut g = KnowledgeGraph::default();
        let mut seen = HashSet::new();
        for (line_no, h, r, t) in rows {
            let head = g.intern_entity(h);
            let relation = g.intern_relation(r).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            let tail = g.intern_entity(t);
            if seen.insert((head, relation, tail)) {
                let uid = EdgeUid(g.triples.len());
                g.triples.push(Triple {
                    head,
                    relation,
                    tail,
                    uid,
                });
            }
        }
        g.forward_count = g.triples.len();
        g.rebuild_adjacency();
        Ok(g)
    }

    /// Original triples as TSV, in uid order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in self.forward_triples() {
            out.push_str(&self.entities[t.head.0].external_key);
            out.push('\t');
            out.push_str(&self.relations[t.relation.0].label);
            out.push('\t');
            out.push_str(&self.entities[t.tail.0].external_key);
            out.push('\n');
        }
        out
    }

    /// Writes the TSV preceded by a `#` header line.
    pub fn save_snapshot(&self, path: &Path, header: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        writeln!(f, "# {header}")?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.rebuild_indexes();
    }
}
