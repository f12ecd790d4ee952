//! Entity-relation graph encoder.
//!
//! Each entity's representation concatenates two channels:
//!
//! * **neighborhood**: `L` attention layers that mix untransformed neighbor
//!   embeddings (the learned `W_g`, `a` only shape the attention logits),
//!   followed by a scaled dot-product attention over the `L` per-layer
//!   outputs, averaged into one vector;
//! * **relation**: the mean embedding of outgoing relations concatenated with
//!   the mean embedding of incoming relations.
//!
//! Neighborhoods are undirected multisets plus a virtual self-loop, so
//! isolated entities still receive their own embedding.

use std::rc::Rc;

use rand::Rng;

use crate::diffmath::{xavier_init, ParamId, ParamStore, Real, SegmentIndex, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::Adjacency;
use crate::train::ProjectionHead;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_ent: usize,
    pub d_rel: usize,
    pub layers: usize,
    pub dropout: f64,
    pub use_relation_channel: bool,
}

impl EncoderConfig {
    pub fn output_width(&self) -> usize {
        if self.use_relation_channel {
            self.d_ent + 2 * self.d_rel
        } else {
            self.d_ent
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatLayerParams {
    pub w: ParamId,
    pub a: ParamId,
}

/// All trainable state, plus the ids locating each tensor in `store`.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    pub entities: ParamId,
    pub relations: Option<ParamId>,
    pub gat: Vec<GatLayerParams>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub projection: Option<ProjectionHead>,
}

impl<T: Real> EncoderParams<T> {
    /// Xavier-initializes every tensor. The projection head is only created
    /// when `d_proj` is given.
    pub fn init<R: Rng + ?Sized>(
        config: EncoderConfig,
        n_entities: usize,
        n_relations: usize,
        d_proj: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("the encoder needs at least one layer".into()));
        }
        if config.d_ent == 0 || (config.use_relation_channel && config.d_rel == 0) {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        let d = config.d_ent;
        let mut store = ParamStore::new();
        let entities = store.register("entity_embeddings", xavier_init(&[n_entities, d], rng)?)?;
        let relations = if config.use_relation_channel {
            Some(store.register(
                "relation_embeddings",
                xavier_init(&[n_relations, config.d_rel], rng)?,
            )?)
        } else {
            None
        };
        let mut gat = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let w = store.register(&format!("gat{l}.w"), xavier_init(&[d, d], rng)?)?;
            let a = store.register(&format!("gat{l}.a"), xavier_init(&[2 * d], rng)?)?;
            gat.push(GatLayerParams { w, a });
        }
        let w_q = store.register("fusion.w_q", xavier_init(&[d, d], rng)?)?;
        let w_k = store.register("fusion.w_k", xavier_init(&[d, d], rng)?)?;
        let projection = match d_proj {
            Some(p) => Some(ProjectionHead::register(
                &mut store,
                config.output_width(),
                p,
                rng,
            )?),
            None => None,
        };
        Ok(EncoderParams {
            config,
            store,
            entities,
            relations,
            gat,
            w_q,
            w_k,
            projection,
        })
    }

    pub fn entity_rows(&self) -> usize {
        self.store.value(self.entities).rows()
    }
}

/// Edge lists for one or more graphs laid out side by side.
///
/// Local entity `i` reads embedding row `row_ids[i]` of the shared table.
#[derive(Clone, Debug)]
pub struct EncoderGraph {
    n_entities: usize,
    row_ids: Rc<Vec<usize>>,
    neighbors: Rc<SegmentIndex>,
    edge_dst: Rc<Vec<usize>>,
    edge_src: Rc<Vec<usize>>,
    out_relations: Rc<SegmentIndex>,
    out_weights: Vec<f64>,
    in_relations: Rc<SegmentIndex>,
    in_weights: Vec<f64>,
}

impl EncoderGraph {
    /// Lays out each `(adjacency, row_offset)` part after the previous ones.
    pub fn new(parts: &[(&Adjacency, usize)]) -> Result<Self> {
        let n_entities: usize = parts.iter().map(|(a, _)| a.entity_count()).sum();
        let mut row_ids = Vec::with_capacity(n_entities);
        let (mut dst, mut src) = (Vec::new(), Vec::new());
        let (mut out_ent, mut out_rel, mut out_w) = (Vec::new(), Vec::new(), Vec::new());
        let (mut in_ent, mut in_rel, mut in_w) = (Vec::new(), Vec::new(), Vec::new());
        let mut base = 0;
        for &(adj, offset) in parts {
            for e in 0..adj.entity_count() {
                let local = base + e;
                row_ids.push(offset + e);
                dst.push(local);
                src.push(local);
                for &(nb, _) in adj.out_adj[e].iter().chain(&adj.in_adj[e]) {
                    dst.push(local);
                    src.push(base + nb);
                }
                let outs = &adj.out_adj[e];
                for &(_, r) in outs {
                    out_ent.push(local);
                    out_rel.push(r);
                    out_w.push(1.0 / outs.len() as f64);
                }
                let ins = &adj.in_adj[e];
                for &(_, r) in ins {
                    in_ent.push(local);
                    in_rel.push(r);
                    in_w.push(1.0 / ins.len() as f64);
                }
            }
            base += adj.entity_count();
        }
        Ok(EncoderGraph {
            n_entities,
            row_ids: Rc::new(row_ids),
            neighbors: Rc::new(SegmentIndex::gathered(src.clone(), dst.clone(), n_entities)?),
            edge_dst: Rc::new(dst),
            edge_src: Rc::new(src),
            out_relations: Rc::new(SegmentIndex::gathered(out_rel, out_ent, n_entities)?),
            out_weights: out_w,
            in_relations: Rc::new(SegmentIndex::gathered(in_rel, in_ent, n_entities)?),
            in_weights: in_w,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    /// Number of attention edges, self-loops included.
    pub fn edge_count(&self) -> usize {
        self.edge_dst.len()
    }

    pub fn edge_dst(&self) -> &[usize] {
        &self.edge_dst
    }

    pub fn edge_src(&self) -> &[usize] {
        &self.edge_src
    }
}

/// One attention aggregation step. Returns the new embeddings and the
/// attention coefficients (one per edge, before dropout).
#[allow(clippy::too_many_arguments)]
pub fn gat_layer<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    h_prev: Var,
    graph: &EncoderGraph,
    w_g: Var,
    a: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let n = tape.shape(h_prev)[0];
    if n != graph.n_entities {
        return Err(Error::shape(
            "gat_layer",
            format!("{n} embedding rows for a graph of {} entities", graph.n_entities),
        ));
    }
    let d = tape.shape(h_prev)[1];
    let transformed = tape.matmul(h_prev, w_g)?;
    let a_pair = tape.reshape(a, &[2, d])?;
    let a_cols = tape.transpose(a_pair)?;
    let scores = tape.matmul(transformed, a_cols)?;
    let own = tape.select_column(scores, 0)?;
    let other = tape.select_column(scores, 1)?;
    let own_e = tape.lookup_rows(own, graph.edge_dst.clone())?;
    let other_e = tape.lookup_rows(other, graph.edge_src.clone())?;
    let logits = tape.add(own_e, other_e)?;
    let logits = tape.leaky_relu(logits);
    let alpha = tape.segment_softmax(logits, graph.neighbors.clone())?;
    let weights = tape.dropout(alpha, dropout, training, rng)?;
    let out = tape.segment_weighted_sum(h_prev, weights, graph.neighbors.clone())?;
    Ok((out, alpha))
}

/// Attention over each entity's stack of per-layer outputs, averaged.
pub fn fuse_ranges<T: Real>(tape: &mut Tape<T>, layers: &[Var], w_q: Var, w_k: Var) -> Result<Var> {
    let first = *layers
        .first()
        .ok_or_else(|| Error::shape("fuse_ranges", "no layers"))?;
    let d = tape.shape(first)[1];
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let queries = layers
        .iter()
        .map(|&h| tape.matmul(h, w_q))
        .collect::<Result<Vec<_>>>()?;
    let keys = layers
        .iter()
        .map(|&h| tape.matmul(h, w_k))
        .collect::<Result<Vec<_>>>()?;
    let mut fused: Option<Var> = None;
    for &q in &queries {
        let mut cols = Vec::with_capacity(layers.len());
        for &k in &keys {
            let prod = tape.mul(q, k)?;
            cols.push(tape.sum_axis(prod, 1)?);
        }
        let logits = tape.concat(&cols, 1)?;
        let logits = tape.scalar_mul(logits, scale);
        let attn = tape.softmax(logits, 1)?;
        for (m, &h) in layers.iter().enumerate() {
            let weight = tape.select_column(attn, m)?;
            let term = tape.scale_rows(h, weight)?;
            fused = Some(match fused {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = fused.expect("at least one layer");
    Ok(tape.scalar_mul(total, T::lit(1.0 / layers.len() as f64)))
}

/// Mean outgoing relation embedding ⊕ mean incoming relation embedding;
/// an empty side is a zero half.
pub fn relation_aggregate<T: Real>(tape: &mut Tape<T>, graph: &EncoderGraph, h_rel: Var) -> Result<Var> {
    let weights = |w: &[f64]| Tensor::<T>::new(vec![w.len(), 1], w.iter().map(|&x| T::lit(x)).collect());
    let w_out = tape.constant(weights(&graph.out_weights)?);
    let w_in = tape.constant(weights(&graph.in_weights)?);
    let out = tape.segment_weighted_sum(h_rel, w_out, graph.out_relations.clone())?;
    let inn = tape.segment_weighted_sum(h_rel, w_in, graph.in_relations.clone())?;
    tape.concat(&[out, inn], 1)
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `neighborhood ⊕ relation`, one row per graph entity.
    pub final_repr: Var,
    pub per_layer: Vec<Var>,
    pub neighborhood: Var,
    pub relation: Option<Var>,
    /// Attention coefficients of each layer, one per edge.
    pub attention: Vec<Var>,
}

/// Runs the encoder over `graph` with the shared parameters.
pub fn encode<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &EncoderParams<T>,
    graph: &EncoderGraph,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let cfg = &params.config;
    let table = tape.param(&params.store, params.entities);
    let full_table = graph.n_entities == params.entity_rows()
        && graph.row_ids.iter().enumerate().all(|(i, &r)| i == r);
    let h0 = if full_table {
        table
    } else {
        tape.lookup_rows(table, graph.row_ids.clone())?
    };

    let mut h = h0;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for layer in &params.gat {
        let w = tape.param(&params.store, layer.w);
        let a = tape.param(&params.store, layer.a);
        let (next, alpha) = gat_layer(tape, h, graph, w, a, cfg.dropout, training, rng)?;
        per_layer.push(next);
        attention.push(alpha);
        h = next;
    }
    let w_q = tape.param(&params.store, params.w_q);
    let w_k = tape.param(&params.store, params.w_k);
    let fused = fuse_ranges(tape, &per_layer, w_q, w_k)?;
    let neighborhood = tape.dropout(fused, cfg.dropout, training, rng)?;

    let (final_repr, relation) = match params.relations {
        Some(rel_id) => {
            let h_rel = tape.param(&params.store, rel_id);
            let rel = relation_aggregate(tape, graph, h_rel)?;
            (tape.concat(&[neighborhood, rel], 1)?, Some(rel))
        }
        None => (neighborhood, None),
    };
    Ok(EncoderOutput {
        final_repr,
        per_layer,
        neighborhood,
        relation,
        attention,
    })
}

/// Inference-mode forward pass returning plain final embeddings.
pub fn embed<T: Real>(params: &EncoderParams<T>, graph: &EncoderGraph) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    // dropout is off, so the rng is never drawn from
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = encode(&mut tape, params, graph, false, &mut rng)?;
    Ok(tape.value(out.final_repr).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_adjacency, Triple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d_ent: usize, d_rel: usize) -> EncoderConfig {
        EncoderConfig {
            d_ent,
            d_rel,
            layers: 2,
            dropout: 0.2,
            use_relation_channel: true,
        }
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn lone_entity_keeps_its_embedding() {
        let adj = build_adjacency(1, &[]);
        let g = EncoderGraph::new(&[(&adj, 0)]).unwrap();
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let w = tape.constant(Tensor::identity(3));
        let a = tape.constant(t(&[6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, alpha) = gat_layer(&mut tape, h, &g, w, a, 0.2, false, &mut rng).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        assert_eq!(tape.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn zero_attention_vector_averages_neighbors() {
        let adj = build_adjacency(2, &[Triple::new(0, 0, 1)]);
        let g = EncoderGraph::new(&[(&adj, 0)]).unwrap();
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 3.0]));
        let w = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::zeros(&[4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = gat_layer(&mut tape, h, &g, w, a, 0.0, false, &mut rng).unwrap();
        // each entity averages itself and its one neighbor
        assert_eq!(tape.value(out).data(), &[0.5, 1.5, 0.5, 1.5]);
    }

    #[test]
    fn single_layer_fusion_is_identity() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
        let wq = tape.constant(t(&[2, 2], &[0.3, 1.0, -0.4, 2.0]));
        let wk = tape.constant(t(&[2, 2], &[1.5, 0.1, 0.2, -0.7]));
        let out = fuse_ranges(&mut tape, &[h], wq, wk).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn identical_layers_fuse_to_themselves() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 0.0, 1.0]);
        let h1 = tape.constant(x.clone());
        let h2 = tape.constant(x.clone());
        let wq = tape.constant(t(&[2, 2], &[0.3, 1.0, -0.4, 2.0]));
        let wk = tape.constant(t(&[2, 2], &[1.5, 0.1, 0.2, -0.7]));
        let out = fuse_ranges(&mut tape, &[h1, h2], wq, wk).unwrap();
        assert!(tape.value(out).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn relation_means() {
        // entity 0: out {r1, r2}; entity 1: in {r1}, out {r0, r0}; entity 2: in {r2, r0, r0}
        let triples = [
            Triple::new(0, 1, 1),
            Triple::new(0, 2, 2),
            Triple::new(1, 0, 2),
            Triple::new(1, 0, 3),
        ];
        let adj = build_adjacency(4, &triples);
        let g = EncoderGraph::new(&[(&adj, 0)]).unwrap();
        let mut tape = Tape::<f64>::new();
        let rel = tape.constant(t(&[3, 2], &[1.0, 2.0, 10.0, 20.0, 100.0, 200.0]));
        let out = relation_aggregate(&mut tape, &g, rel).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[4, 4]);
        assert_eq!(v.row(0), &[55.0, 110.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[1.0, 2.0, 10.0, 20.0]);
        assert_eq!(v.row(2), &[0.0, 0.0, 50.5, 101.0]);
        assert_eq!(v.row(3), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn default_width_is_512() {
        let c = cfg(256, 128);
        assert_eq!(c.output_width(), 512);
        let c = EncoderConfig {
            use_relation_channel: false,
            ..c
        };
        assert_eq!(c.output_width(), 256);
    }

    #[test]
    fn isolated_entity_output() {
        let adj = build_adjacency(3, &[Triple::new(0, 0, 1)]);
        let g = EncoderGraph::new(&[(&adj, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = EncoderParams::<f64>::init(cfg(4, 3), 3, 1, None, &mut rng).unwrap();
        let out = embed(&params, &g).unwrap();
        let own = params.store.value(params.entities).row(2).to_vec();
        assert_eq!(out.row(2)[..4], own[..]);
        assert_eq!(out.row(2)[4..], [0.0; 6]);
    }

    #[test]
    fn inference_is_pure() {
        let adj = build_adjacency(4, &[Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(3, 0, 1)]);
        let g = EncoderGraph::new(&[(&adj, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::<f64>::init(cfg(4, 2), 4, 2, Some(3), &mut rng).unwrap();
        assert_eq!(embed(&params, &g).unwrap(), embed(&params, &g).unwrap());
    }

    #[test]
    fn zero_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = EncoderConfig { layers: 0, ..cfg(4, 2) };
        assert!(EncoderParams::<f64>::init(c, 4, 2, None, &mut rng).is_err());
    }
}
