use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{AlignmentSeedSet, DatasetBundle, DropCounts, IdMap, IdMaps, KnowledgeGraph, Pair, Triple};
use crate::error::{Error, Result};

/// Parameters of a synthetic alignment task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub avg_degree: f64,
    /// Fraction of triples removed from the target copy.
    pub perturb_ratio: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_entities: 200,
            n_relations: 20,
            avg_degree: 5.0,
            perturb_ratio: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn triple_count(&self) -> usize {
        (self.avg_degree * self.n_entities as f64 / 2.0).round() as usize
    }
}

/// Generates a connected random source graph and a relabeled, optionally
/// thinned copy as target. The relabeling is the ground-truth alignment,
/// split 20/10/70 into train/valid/test.
pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<DatasetBundle> {
    let n = spec.n_entities;
    let m = spec.triple_count();
    if n < 2 || spec.n_relations == 0 {
        return Err(Error::Config(
            "synthetic graphs need at least 2 entities and 1 relation".into(),
        ));
    }
    if m + 1 < n {
        return Err(Error::Config(format!(
            "average degree {} gives {m} triples, fewer than the {} needed to connect {n} entities",
            spec.avg_degree,
            n - 1
        )));
    }
    let capacity = n as u128 * (n as u128 - 1) * spec.n_relations as u128;
    if m as u128 > capacity {
        return Err(Error::Config(format!("{m} distinct triples do not fit in {n} entities")));
    }
    if !(0.0..=1.0).contains(&spec.perturb_ratio) {
        return Err(Error::Config(format!(
            "perturb ratio {} outside [0, 1]",
            spec.perturb_ratio
        )));
    }

    let mut seen = HashSet::with_capacity(m);
    let mut source = Vec::with_capacity(m);
    // random spanning tree first so the graph is connected
    for i in 1..n {
        let j = rng.gen_range(0..i);
        let r = rng.gen_range(0..spec.n_relations);
        let t = if rng.gen_bool(0.5) {
            Triple::new(i, r, j)
        } else {
            Triple::new(j, r, i)
        };
        seen.insert(t);
        source.push(t);
    }
    while source.len() < m {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        if h == t {
            continue;
        }
        let tr = Triple::new(h, rng.gen_range(0..spec.n_relations), t);
        if seen.insert(tr) {
            source.push(tr);
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut target: Vec<Triple> = source
        .iter()
        .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
        .collect();
    target.shuffle(rng);
    let keep = ((1.0 - spec.perturb_ratio) * m as f64).round() as usize;
    target.truncate(keep);

    let links: Vec<Pair> = (0..n).map(|i| (i, perm[i])).collect();
    let mut shuffled = links.clone();
    shuffled.shuffle(rng);
    let n_train = (0.2 * n as f64).round() as usize;
    let n_valid = (0.1 * n as f64).round() as usize;
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    let seeds = AlignmentSeedSet {
        train: shuffled,
        valid,
        test,
    };

    let mut id_maps = IdMaps::default();
    for i in 0..n {
        id_maps.source_entities.get_or_insert(&format!("src:e{i}"));
        id_maps.target_entities.get_or_insert(&format!("tgt:e{i}"));
    }
    let mut relations = IdMap::new();
    for r in 0..spec.n_relations {
        relations.get_or_insert(&format!("rel:r{r}"));
    }
    id_maps.relations = relations;

    Ok(DatasetBundle {
        source: KnowledgeGraph::new(n, spec.n_relations, source)?,
        target: KnowledgeGraph::new(n, spec.n_relations, target)?,
        seeds,
        links,
        id_maps,
        source_drops: DropCounts::default(),
        target_drops: DropCounts::default(),
    })
}
