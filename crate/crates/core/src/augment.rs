//! Edge-dropped views of a knowledge graph.
//!
//! A triple may be dropped only if both of its endpoints have base-graph
//! degree of at least 2, so long-tail entities keep all their facts.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{build_adjacency, Adjacency, KnowledgeGraph, Triple};

/// A subset of a graph's triples with rebuilt adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView<'a> {
    base: &'a KnowledgeGraph,
    kept: Vec<usize>,
    drawn_ratio: f64,
    adjacency: Adjacency,
}

impl<'a> AugmentedView<'a> {
    /// The view that keeps every triple.
    pub fn identity(base: &'a KnowledgeGraph) -> Self {
        AugmentedView {
            base,
            kept: (0..base.triples().len()).collect(),
            drawn_ratio: 0.0,
            adjacency: base.adjacency().clone(),
        }
    }

    pub fn base(&self) -> &'a KnowledgeGraph {
        self.base
    }

    /// Indices into the base triple list, ascending.
    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn kept_triples(&self) -> impl Iterator<Item = &'a Triple> + '_ {
        let triples = self.base.triples();
        self.kept.iter().map(move |&i| &triples[i])
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        let mut keep = vec![false; self.base.triples().len()];
        for &i in &self.kept {
            keep[i] = true;
        }
        (0..keep.len()).filter(|&i| !keep[i]).collect()
    }

    pub fn drawn_ratio(&self) -> f64 {
        self.drawn_ratio
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn triple_count(&self) -> usize {
        self.kept.len()
    }

    /// Describes every broken view property: subset, drop-count bound
    /// against the drawn ratio and `pr`, degree protection, and adjacency
    /// consistency. Empty when the view is sound.
    pub fn invariant_violations(&self, pr: f64) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.base.triples().len();
        if self.kept.windows(2).any(|w| w[0] >= w[1]) || self.kept.last().is_some_and(|&i| i >= n) {
            out.push("kept indices are not an ascending subset of the base triples".into());
        }
        let dropped = self.dropped_indices();
        if dropped.len() as f64 > self.drawn_ratio * n as f64 + 1.0 {
            out.push(format!(
                "dropped {} of {n} triples at ratio {}",
                dropped.len(),
                self.drawn_ratio
            ));
        }
        if (self.kept.len() as f64) < (1.0 - pr) * n as f64 - 1.0 {
            out.push(format!("kept {} of {n} triples under bound {pr}", self.kept.len()));
        }
        let degree = self.base.degrees();
        for &i in &dropped {
            let t = self.base.triples()[i];
            if degree[t.head] < 2 || degree[t.tail] < 2 {
                out.push(format!("dropped protected triple {t:?}"));
            }
        }
        if self.adjacency != build_adjacency(self.base.entity_count(), self.kept_triples()) {
            out.push("adjacency does not match the kept triples".into());
        }
        out
    }
}

/// Draws a deletion ratio uniformly from `[0, pr]`.
pub fn sample_ratio<R: Rng + ?Sized>(pr: f64, rng: &mut R) -> Result<f64> {
    if !(0.0..1.0).contains(&pr) {
        return Err(Error::Config(format!(
            "deletion ratio bound {pr} outside [0, 1)"
        )));
    }
    Ok(rng.gen_range(0.0..=pr))
}

/// Removes `floor(ratio·|T|)` triples, sampled uniformly without replacement
/// among the droppable ones (capped at how many there are).
pub fn drop_edges<'a, R: Rng + ?Sized>(
    kg: &'a KnowledgeGraph,
    ratio: f64,
    rng: &mut R,
) -> AugmentedView<'a> {
    let triples = kg.triples();
    let degree = kg.degrees();
    let candidates: Vec<usize> = triples
        .iter()
        .enumerate()
        .filter(|(_, t)| degree[t.head] >= 2 && degree[t.tail] >= 2)
        .map(|(i, _)| i)
        .collect();
    let wanted = (ratio * triples.len() as f64).floor().max(0.0) as usize;
    let count = wanted.min(candidates.len());
    if count == 0 {
        return AugmentedView {
            drawn_ratio: ratio,
            ..AugmentedView::identity(kg)
        };
    }
    let mut drop = vec![false; triples.len()];
    for pick in index::sample(rng, candidates.len(), count) {
        drop[candidates[pick]] = true;
    }
    let kept: Vec<usize> = (0..triples.len()).filter(|&i| !drop[i]).collect();
    let adjacency = build_adjacency(kg.entity_count(), kept.iter().map(|&i| &triples[i]));
    AugmentedView {
        base: kg,
        kept,
        drawn_ratio: ratio,
        adjacency,
    }
}

/// Fresh augmented views of both graphs, each with its own drawn ratio.
pub fn refresh_views<'a, R: Rng + ?Sized>(
    source: &'a KnowledgeGraph,
    target: &'a KnowledgeGraph,
    pr: f64,
    rng: &mut R,
) -> Result<(AugmentedView<'a>, AugmentedView<'a>)> {
    let rs = sample_ratio(pr, rng)?;
    let source_view = drop_edges(source, rs, rng);
    let rt = sample_ratio(pr, rng)?;
    let target_view = drop_edges(target, rt, rng);
    Ok((source_view, target_view))
}
