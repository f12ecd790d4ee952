use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{objective, original_graph, NegativeSampleSet, ObjectiveInputs, TrainingConfig, UnionLayout};
use crate::augment::drop_edges;
use crate::diffmath::gradcheck::{check_store_gradients, GradReport, FD_STEP};
use crate::diffmath::Fault;
use crate::encoder::EncoderGraph;
use crate::error::Result;
use crate::kg::{AlignmentSeedSet, DatasetBundle, DropCounts, IdMaps, KnowledgeGraph, Triple};

/// Two 6-entity graphs over 3 shared relations; the target is a relabeled
/// copy with one triple missing.
pub fn toy_bundle() -> Result<DatasetBundle> {
    let source = vec![
        Triple::new(0, 0, 1),
        Triple::new(1, 1, 2),
        Triple::new(2, 2, 0),
        Triple::new(3, 0, 1),
        Triple::new(4, 1, 3),
        Triple::new(5, 2, 4),
        Triple::new(0, 1, 4),
        Triple::new(3, 2, 5),
    ];
    let perm = [2, 0, 5, 1, 4, 3];
    let target: Vec<Triple> = source[..7]
        .iter()
        .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
        .collect();
    let links: Vec<(usize, usize)> = (0..6).map(|i| (i, perm[i])).collect();
    Ok(DatasetBundle {
        source: KnowledgeGraph::new(6, 3, source)?,
        target: KnowledgeGraph::new(6, 3, target)?,
        seeds: AlignmentSeedSet {
            train: links[..3].to_vec(),
            valid: links[3..4].to_vec(),
            test: links[4..].to_vec(),
        },
        links,
        id_maps: IdMaps::default(),
        source_drops: DropCounts::default(),
        target_drops: DropCounts::default(),
    })
}

/// Finite-difference check of the full objective `L_a + λ·L_c` on the toy
/// bundle, with dropout active (masks replayed from a fixed seed).
pub fn composite_loss_check(fault: Option<Fault>) -> Result<GradReport> {
    let bundle = toy_bundle()?;
    let cfg = TrainingConfig {
        d_ent: 4,
        d_rel: 2,
        d_proj: 3,
        negatives_per_entity: 1,
        seed: 3,
        ..TrainingConfig::default()
    };
    let params = cfg.init_params::<f64>(&bundle)?;
    let layout = UnionLayout::of(&bundle);
    let original = original_graph(&bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sv = drop_edges(&bundle.source, 0.25, &mut rng);
    let tv = drop_edges(&bundle.target, 0.25, &mut rng);
    let augmented = EncoderGraph::new(&[(sv.adjacency(), 0), (tv.adjacency(), layout.n_source)])?;
    let negatives = NegativeSampleSet {
        k: 1,
        source: vec![3, 4, 5],
        target: vec![4, 3, 0],
    };
    let seeds = bundle.seeds.train.clone();
    check_store_gradients(&params.store, fault, FD_STEP, |tape, store| {
        let view = crate::encoder::EncoderParams {
            store: store.clone(),
            ..params.clone()
        };
        let inputs = ObjectiveInputs {
            layout: &layout,
            original: &original,
            augmented: Some(&augmented),
            seeds: &seeds,
            negatives: &negatives,
        };
        let mut dropout = ChaCha8Rng::seed_from_u64(11);
        Ok(objective(tape, &view, &cfg, inputs, true, &mut dropout)?.total)
    })
}
