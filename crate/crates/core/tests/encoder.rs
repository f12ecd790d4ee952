use kgalign::diffmath::{Tape, Tensor};
use kgalign::encoder::{embed, encode, fuse_ranges, gat_layer, EncoderConfig, EncoderGraph, EncoderParams};
use kgalign::kg::{build_adjacency, Adjacency, Triple};
use kgalign::train::{objective, original_graph, toy_bundle, NegativeSampleSet, ObjectiveInputs, TrainingConfig, UnionLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn tensor(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn matvec_rows(h: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    h.iter()
        .map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(x, wr)| x * wr[j]).sum()).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_triples(n: usize, m: usize, rels: usize, rng: &mut ChaCha8Rng) -> Vec<Triple> {
    let mut out: Vec<Triple> = Vec::new();
    while out.len() < m {
        let (h, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let tr = Triple::new(h, rng.gen_range(0..rels), t);
        if h != t && !out.contains(&tr) {
            out.push(tr);
        }
    }
    out
}

/// Dense attention layer: neighbors are self, then out-neighbors, then
/// in-neighbors; returns outputs and per-entity weights.
fn dense_gat(h: &[Vec<f64>], adj: &Adjacency, w: &[Vec<f64>], a: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = h[0].len();
    let g = matvec_rows(h, w);
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for i in 0..h.len() {
        let nbrs: Vec<usize> = std::iter::once(i)
            .chain(adj.out_adj[i].iter().map(|&(t, _)| t))
            .chain(adj.in_adj[i].iter().map(|&(s, _)| s))
            .collect();
        let logits: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let z = dot(&a[..d], &g[i]) + dot(&a[d..], &g[j]);
                if z > 0.0 {
                    z
                } else {
                    0.2 * z
                }
            })
            .collect();
        let alpha = softmax(&logits);
        let mut o = vec![0.0; d];
        for (&j, &al) in nbrs.iter().zip(&alpha) {
            for c in 0..d {
                o[c] += al * h[j][c];
            }
        }
        outs.push(o);
        weights.push(alpha);
    }
    (outs, weights)
}

#[test]
fn attention_layer_outputs_are_convex_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (n, d) = (6, 3);
    let adj = build_adjacency(n, &random_triples(n, 8, 2, &mut rng));
    let graph = EncoderGraph::new(&[(&adj, 0)]).unwrap();
    let h = random_matrix(n, d, &mut rng);
    let w = random_matrix(d, d, &mut rng);
    let a: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut tape = Tape::<f64>::new();
    let hv = tape.constant(tensor(&h));
    let wv = tape.constant(tensor(&w));
    let av = tape.constant(Tensor::new(vec![2 * d], a.clone()).unwrap());
    let (out, _) = gat_layer(&mut tape, hv, &graph, wv, av, 0.0, false, &mut rng).unwrap();
    let out = tape.value(out);

    let (expected, weights) = dense_gat(&h, &adj, &w, &a);
    for i in 0..n {
        // the oracle's weights certify hull membership
        assert!(weights[i].iter().all(|&x| x >= 0.0));
        assert!((weights[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..d {
            assert!((out.at(i, c) - expected[i][c]).abs() < 1e-12, "row {i}");
        }
    }
}

#[test]
fn range_fusion_matches_dense_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (n, d) = (5, 4);
    let layers = [random_matrix(n, d, &mut rng), random_matrix(n, d, &mut rng)];
    let wq = random_matrix(d, d, &mut rng);
    let wk = random_matrix(d, d, &mut rng);

    let mut tape = Tape::<f64>::new();
    let hs: Vec<_> = layers.iter().map(|m| tape.constant(tensor(m))).collect();
    let q = tape.constant(tensor(&wq));
    let k = tape.constant(tensor(&wk));
    let out = fuse_ranges(&mut tape, &hs, q, k).unwrap();
    let out = tape.value(out);

    for i in 0..n {
        let stack: Vec<Vec<f64>> = layers.iter().map(|m| m[i].clone()).collect();
        let qs = matvec_rows(&stack, &wq);
        let ks = matvec_rows(&stack, &wk);
        let mut fused = vec![0.0; d];
        for ql in &qs {
            let scores: Vec<f64> = ks.iter().map(|km| dot(ql, km) / (d as f64).sqrt()).collect();
            let attn = softmax(&scores);
            for (m, &w) in attn.iter().enumerate() {
                for c in 0..d {
                    fused[c] += w * stack[m][c] / layers.len() as f64;
                }
            }
        }
        for c in 0..d {
            assert!((out.at(i, c) - fused[c]).abs() < 1e-12);
            let lo = stack.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = stack.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(out.at(i, c) >= lo - 1e-12 && out.at(i, c) <= hi + 1e-12);
        }
    }
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d_ent: 5,
        d_rel: 3,
        layers: 2,
        dropout: 0.2,
        use_relation_channel: true,
    }
}

#[test]
fn attention_sums_to_one_per_entity() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 30;
    let adj = build_adjacency(n, &random_triples(n, 70, 4, &mut rng));
    let graph = EncoderGraph::new(&[(&adj, 0)]).unwrap();
    let params = EncoderParams::<f64>::init(small_config(), n, 4, None, &mut rng).unwrap();
    let mut tape = Tape::new();
    let out = encode(&mut tape, &params, &graph, false, &mut rng).unwrap();
    for alpha in out.attention {
        let mut sums = vec![0.0; n];
        for (e, &i) in graph.edge_dst().iter().enumerate() {
            sums[i] += tape.value(alpha).data()[e];
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6), "{sums:?}");
    }
}

#[test]
fn relabeling_permutes_outputs_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let n = 25;
    let triples = random_triples(n, 60, 3, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let relabeled: Vec<Triple> = triples
        .iter()
        .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
        .collect();
    let adj = build_adjacency(n, &triples);
    let adj_p = build_adjacency(n, &relabeled);

    let params = EncoderParams::<f64>::init(small_config(), n, 3, None, &mut rng).unwrap();
    let mut moved = params.clone();
    let table = params.store.value(params.entities);
    let target = moved.store.value_mut(moved.entities);
    for i in 0..n {
        target.row_mut(perm[i]).copy_from_slice(table.row(i));
    }

    let out = embed(&params, &EncoderGraph::new(&[(&adj, 0)]).unwrap()).unwrap();
    let out_p = embed(&moved, &EncoderGraph::new(&[(&adj_p, 0)]).unwrap()).unwrap();
    for i in 0..n {
        assert_eq!(out.row(i), out_p.row(perm[i]), "entity {i}");
    }
}

#[test]
fn joint_encoding_equals_separate_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (na, nb) = (12, 9);
    let a = build_adjacency(na, &random_triples(na, 20, 3, &mut rng));
    let b = build_adjacency(nb, &random_triples(nb, 15, 3, &mut rng));
    let params = EncoderParams::<f64>::init(small_config(), na + nb, 3, None, &mut rng).unwrap();
    let joint = embed(&params, &EncoderGraph::new(&[(&a, 0), (&b, na)]).unwrap()).unwrap();
    let only_a = embed(&params, &EncoderGraph::new(&[(&a, 0)]).unwrap()).unwrap();
    let only_b = embed(&params, &EncoderGraph::new(&[(&b, na)]).unwrap()).unwrap();
    for i in 0..na {
        assert_eq!(joint.row(i), only_a.row(i));
    }
    for i in 0..nb {
        assert_eq!(joint.row(na + i), only_b.row(i));
    }
}

#[test]
fn relation_embeddings_receive_gradient() {
    let bundle = toy_bundle().unwrap();
    let cfg = TrainingConfig {
        d_ent: 4,
        d_rel: 2,
        lambda: 0.0,
        negatives_per_entity: 1,
        ..Default::default()
    };
    let params = cfg.init_params::<f64>(&bundle).unwrap();
    let layout = UnionLayout::of(&bundle);
    let graph = original_graph(&bundle).unwrap();
    let negatives = NegativeSampleSet {
        k: 1,
        source: vec![3, 4, 5],
        target: vec![4, 3, 0],
    };
    let mut tape = Tape::new();
    let rel = tape.param(&params.store, params.relations.unwrap());
    let inputs = ObjectiveInputs {
        layout: &layout,
        original: &graph,
        augmented: None,
        seeds: &bundle.seeds.train,
        negatives: &negatives,
    };
    let vars = objective(&mut tape, &params, &cfg, inputs, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grads = tape.backward(vars.total).unwrap();
    let g = grads.get(rel).expect("relation gradient");
    assert!(g.data().iter().any(|&x| x != 0.0));
}
