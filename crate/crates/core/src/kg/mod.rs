//! Knowledge-graph data model.
//!
//! All computation uses dense ids; URIs live only in [`IdMap`]s. The two
//! graphs of a [`DatasetBundle`] have independent entity id spaces and share
//! one relation id space.

mod openea;
mod synthetic;

use std::collections::{HashMap, HashSet};

pub use openea::{load_openea, write_openea, FOLD_DIR, LINK_FILES};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Directional adjacency over some set of triples.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Adjacency {
    /// `out_adj[h]` holds `(tail, relation)` for every triple leaving `h`.
    pub out_adj: Vec<Vec<(usize, usize)>>,
    /// `in_adj[t]` holds `(head, relation)` for every triple entering `t`.
    pub in_adj: Vec<Vec<(usize, usize)>>,
    pub degree: Vec<usize>,
}

impl Adjacency {
    pub fn entity_count(&self) -> usize {
        self.degree.len()
    }

    pub fn triple_count(&self) -> usize {
        self.out_adj.iter().map(Vec::len).sum()
    }
}

/// Builds out/in adjacency lists and degrees over `triples`.
pub fn build_adjacency<'a>(
    entity_count: usize,
    triples: impl IntoIterator<Item = &'a Triple>,
) -> Adjacency {
    let mut adj = Adjacency {
        out_adj: vec![Vec::new(); entity_count],
        in_adj: vec![Vec::new(); entity_count],
        degree: vec![0; entity_count],
    };
    for t in triples {
        adj.out_adj[t.head].push((t.tail, t.relation));
        adj.in_adj[t.tail].push((t.head, t.relation));
    }
    for e in 0..entity_count {
        adj.degree[e] = adj.out_adj[e].len() + adj.in_adj[e].len();
    }
    adj
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entity_count: usize,
    relation_count: usize,
    triples: Vec<Triple>,
    adjacency: Adjacency,
}

impl KnowledgeGraph {
    /// Validates ids and rejects self-loops and duplicate triples.
    pub fn new(entity_count: usize, relation_count: usize, triples: Vec<Triple>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.head >= entity_count || t.tail >= entity_count {
                return Err(Error::Config(format!(
                    "triple {t:?} references an entity outside 0..{entity_count}"
                )));
            }
            if t.relation >= relation_count {
                return Err(Error::Config(format!(
                    "triple {t:?} references a relation outside 0..{relation_count}"
                )));
            }
            if t.head == t.tail {
                return Err(Error::Config(format!("self-loop triple {t:?}")));
            }
            if !seen.insert(*t) {
                return Err(Error::Config(format!("duplicate triple {t:?}")));
            }
        }
        let adjacency = build_adjacency(entity_count, &triples);
        Ok(KnowledgeGraph {
            entity_count,
            relation_count,
            triples,
            adjacency,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn degree(&self, entity: usize) -> usize {
        self.adjacency.degree[entity]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.adjacency.degree
    }
}

pub type Pair = (usize, usize);

/// Pre-aligned (source, target) entity pairs split for training.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AlignmentSeedSet {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl AlignmentSeedSet {
    pub fn validate(&self, source_entities: usize, target_entities: usize) -> Result<()> {
        let mut seen: HashMap<Pair, &str> = HashMap::new();
        for (name, split) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for &(s, t) in split {
                if s >= source_entities || t >= target_entities {
                    return Err(Error::Config(format!(
                        "{name} pair ({s}, {t}) outside entity ranges"
                    )));
                }
                if let Some(other) = seen.insert((s, t), name) {
                    if other != name {
                        return Err(Error::Config(format!(
                            "pair ({s}, {t}) appears in both {other} and {name}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bidirectional URI ↔ dense id dictionary, ids in first-insertion order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IdMap {
    uris: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, uri: &str) -> usize {
        if let Some(&id) = self.index.get(uri) {
            return id;
        }
        let id = self.uris.len();
        self.uris.push(uri.to_string());
        self.index.insert(uri.to_string(), id);
        id
    }

    pub fn get(&self, uri: &str) -> Option<usize> {
        self.index.get(uri).copied()
    }

    pub fn uri(&self, id: usize) -> &str {
        &self.uris[id]
    }

    pub fn len(&self) -> usize {
        self.uris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uris.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IdMaps {
    pub source_entities: IdMap,
    pub target_entities: IdMap,
    /// Shared by both graphs.
    pub relations: IdMap,
}

/// Lines discarded while loading one triple file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DropCounts {
    pub self_loops: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetBundle {
    pub source: KnowledgeGraph,
    pub target: KnowledgeGraph,
    pub seeds: AlignmentSeedSet,
    /// Full reference alignment in file order (`ent_links`).
    pub links: Vec<Pair>,
    pub id_maps: IdMaps,
    pub source_drops: DropCounts,
    pub target_drops: DropCounts,
}

impl DatasetBundle {
    pub fn relation_count(&self) -> usize {
        self.source.relation_count()
    }
}
