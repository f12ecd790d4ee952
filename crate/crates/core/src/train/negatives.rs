use rand::seq::index;
use rand::Rng;

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kg::Pair;

/// `k` corrupted pairs per side for every seed, flattened seed-major.
///
/// For seed `i = (s, t)`, `source[i*k..(i+1)*k]` replace `s` (pairs
/// `(s', t)`) and `target[i*k..(i+1)*k]` replace `t` (pairs `(s, t')`).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct NegativeSampleSet {
    pub k: usize,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl NegativeSampleSet {
    pub fn seed_count(&self) -> usize {
        self.source.len().checked_div(self.k).unwrap_or(0)
    }

    /// All corrupted pairs of seed `i`, source-side replacements first.
    pub fn corrupted_pairs(&self, i: usize, seed: Pair) -> impl Iterator<Item = Pair> + '_ {
        let r = i * self.k..(i + 1) * self.k;
        let (s, t) = seed;
        self.source[r.clone()]
            .iter()
            .map(move |&s2| (s2, t))
            .chain(self.target[r].iter().map(move |&t2| (s, t2)))
    }
}

/// Number of nearest candidates kept out of `n` entities: `⌈(1−ε)·n⌉`,
/// never more than the `n − 1` other entities.
pub fn truncation_window(n: usize, epsilon: f64) -> usize {
    let raw = ((1.0 - epsilon) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(n.saturating_sub(1))
}

/// The `window` entities nearest to `anchor` by Euclidean distance,
/// excluding `anchor`; ties go to the smaller id.
fn nearest<T: Real>(emb: &Tensor<T>, anchor: usize, window: usize) -> Vec<usize> {
    let q = emb.row(anchor);
    let mut cand: Vec<(f64, usize)> = (0..emb.rows())
        .filter(|&e| e != anchor)
        .map(|e| {
            let d: f64 = emb
                .row(e)
                .iter()
                .zip(q)
                .map(|(&a, &b)| {
                    let x = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
                    x * x
                })
                .sum();
            (d, e)
        })
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if window < cand.len() {
        cand.select_nth_unstable_by(window, by);
        cand.truncate(window);
    }
    cand.sort_unstable_by(by);
    cand.into_iter().map(|(_, e)| e).collect()
}

fn draw<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= k {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// ε-truncated uniform negative sampling.
///
/// Each replacement is drawn uniformly from the truncation window of
/// nearest same-graph entities to the entity it replaces. Draws within one
/// side of one seed are without replacement unless the window is smaller
/// than `k`.
pub fn sample_negatives<T: Real, R: Rng + ?Sized>(
    seeds: &[Pair],
    source_emb: &Tensor<T>,
    target_emb: &Tensor<T>,
    epsilon: f64,
    k: usize,
    rng: &mut R,
) -> Result<NegativeSampleSet> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let (ns, nt) = (source_emb.rows(), target_emb.rows());
    if ns < 2 || nt < 2 {
        return Err(Error::Config(
            "negative sampling needs at least two entities per graph".into(),
        ));
    }
    let ws = truncation_window(ns, epsilon).max(1);
    let wt = truncation_window(nt, epsilon).max(1);
    for (side, w) in [("source", ws), ("target", wt)] {
        if w < k {
            log::warn!("{side} truncation window {w} is smaller than k = {k}; sampling with replacement");
        }
    }
    let mut out = NegativeSampleSet {
        k,
        source: Vec::with_capacity(seeds.len() * k),
        target: Vec::with_capacity(seeds.len() * k),
    };
    for &(s, t) in seeds {
        if s >= ns || t >= nt {
            return Err(Error::OutOfRange {
                op: "sample_negatives",
                index: s.max(t),
                bound: ns.min(nt),
            });
        }
        let pool = nearest(source_emb, s, ws);
        out.source.extend(draw(&pool, k, rng));
        let pool = nearest(target_emb, t, wt);
        out.target.extend(draw(&pool, k, rng));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Tensor<f64> {
        Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn window_sizes() {
        assert_eq!(truncation_window(100, 0.9), 10);
        assert_eq!(truncation_window(100, 0.0), 99);
        assert_eq!(truncation_window(15_000, 0.9), 1_500);
        assert_eq!(truncation_window(7, 0.9), 1);
    }

    #[test]
    fn nearest_breaks_ties_by_id() {
        // 5 is equidistant from 4 and 6
        assert_eq!(nearest(&line(10), 5, 3), vec![4, 6, 3]);
    }

    #[test]
    fn window_restricts_candidates() {
        let emb = line(100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = sample_negatives(&[(50, 50)], &emb, &emb, 0.9, 5, &mut rng).unwrap();
        for &e in set.source.iter().chain(&set.target) {
            assert!(e != 50 && (45..=55).contains(&e), "{e}");
        }
        let mut distinct = set.source.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn tiny_window_samples_with_replacement() {
        let emb = line(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = sample_negatives(&[(0, 0)], &emb, &emb, 0.9, 5, &mut rng).unwrap();
        assert_eq!(set.source, vec![1; 5]);
    }

    #[test]
    fn corrupted_pairs_layout() {
        let set = NegativeSampleSet {
            k: 2,
            source: vec![1, 2, 3, 4],
            target: vec![5, 6, 7, 8],
        };
        let pairs: Vec<Pair> = set.corrupted_pairs(1, (9, 9)).collect();
        assert_eq!(pairs, vec![(3, 9), (4, 9), (9, 7), (9, 8)]);
    }
}
