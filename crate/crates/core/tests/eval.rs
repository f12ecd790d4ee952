use kgalign::diffmath::Tensor;
use kgalign::eval::{infer_alignment, metrics, rank_all};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn nearest_neighbor_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets = random(500, 8, &mut rng);
    let queries = random(100, 8, &mut rng);
    for q in 0..100 {
        let query = queries.row(q);
        let mut best = 0;
        for j in 1..500 {
            if dist(query, targets.row(j)) < dist(query, targets.row(best)) {
                best = j;
            }
        }
        assert_eq!(infer_alignment(query, &targets).unwrap(), best);
    }
}

#[test]
fn ranks_match_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = random(60, 5, &mut rng);
    let target = random(80, 5, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..60).map(|i| (i, rng.gen_range(0..80))).collect();
    let ranks = rank_all(&pairs, &source, &target, 5).unwrap();
    for (r, &(s, t)) in ranks.iter().zip(&pairs) {
        let mut order: Vec<usize> = (0..80).collect();
        order.sort_by(|&a, &b| {
            dist(source.row(s), target.row(a))
                .partial_cmp(&dist(source.row(s), target.row(b)))
                .unwrap()
                .then(a.cmp(&b))
        });
        assert_eq!(r.rank, order.iter().position(|&j| j == t).unwrap() + 1);
        assert_eq!(r.top, order[..5]);
        assert_eq!(r.top[0], infer_alignment(source.row(s), &target).unwrap());
    }
}

#[test]
fn metrics_match_independent_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ranks: Vec<usize> = (0..1000).map(|_| rng.gen_range(1..50)).collect();
    let m = metrics(&ranks, &[1, 5, 10]).unwrap();
    let mut h = [0usize; 3];
    let mut rr = 0.0;
    for &r in &ranks {
        for (slot, k) in [1, 5, 10].iter().enumerate() {
            if r <= *k {
                h[slot] += 1;
            }
        }
        rr += 1.0 / r as f64;
    }
    assert_eq!(m.hits_at(1), Some(h[0] as f64 / 1000.0));
    assert_eq!(m.hits_at(5), Some(h[1] as f64 / 1000.0));
    assert_eq!(m.hits_at(10), Some(h[2] as f64 / 1000.0));
    assert!((m.mrr - rr / 1000.0).abs() < 1e-12);
    assert!(m.hits_at(1) <= m.hits_at(5) && m.hits_at(5) <= m.hits_at(10));
    assert!(m.hits_at(1).unwrap() <= m.mrr);
}

#[test]
fn ranks_survive_rotation_and_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let source = random(40, 2, &mut rng);
    let target = random(50, 2, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..40).map(|i| (i, i)).collect();
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let moved = |m: &Tensor<f64>| {
        let rows: Vec<Vec<f64>> = (0..m.rows())
            .map(|i| {
                let (x, y) = (m.at(i, 0), m.at(i, 1));
                vec![c * x - s * y + 3.0, s * x + c * y - 1.5]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let before: Vec<usize> = rank_all(&pairs, &source, &target, 1).unwrap().iter().map(|r| r.rank).collect();
    let after: Vec<usize> = rank_all(&pairs, &moved(&source), &moved(&target), 1)
        .unwrap()
        .iter()
        .map(|r| r.rank)
        .collect();
    assert_eq!(before, after);
    assert_eq!(metrics(&before, &[1, 5]).unwrap(), metrics(&after, &[1, 5]).unwrap());
}

#[test]
fn worked_example() {
    let m = metrics(&[1, 2, 5], &[1, 5]).unwrap();
    assert!((m.mrr - 0.5666666666666667).abs() < 1e-15);
}
