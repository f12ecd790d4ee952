//! Nearest-neighbor alignment inference and ranking metrics.
//!
//! Distances are squared Euclidean, accumulated in f64 whatever the
//! embedding precision. Equal distances rank the smaller target id first.

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kg::Pair;

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub source: usize,
    pub truth: usize,
    /// 1-based rank of `truth` among all target entities.
    pub rank: usize,
    /// The nearest targets, best first.
    pub top: Vec<usize>,
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum()
}

fn check_widths<T: Real>(query: &[T], targets: &Tensor<T>) -> Result<()> {
    if targets.shape().len() != 2 || targets.cols() != query.len() {
        return Err(Error::Shape {
            op: "infer_alignment",
            detail: format!("query width {} against targets {:?}", query.len(), targets.shape()),
        });
    }
    if targets.rows() == 0 {
        return Err(Error::Config("no target entities to align to".into()));
    }
    Ok(())
}

/// The target row nearest to `query`.
pub fn infer_alignment<T: Real>(query: &[T], targets: &Tensor<T>) -> Result<usize> {
    check_widths(query, targets)?;
    let mut best = (f64::INFINITY, 0);
    for j in 0..targets.rows() {
        let d = sq_dist(query, targets.row(j));
        if d < best.0 {
            best = (d, j);
        }
    }
    Ok(best.1)
}

/// Ranks the true counterpart of every pair against all targets.
pub fn rank_all<T: Real>(
    pairs: &[Pair],
    source: &Tensor<T>,
    target: &Tensor<T>,
    top_k: usize,
) -> Result<Vec<RankResult>> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut dist = vec![0.0; target.rows()];
    for &(s, t) in pairs {
        if s >= source.rows() || t >= target.rows() {
            return Err(Error::OutOfRange {
                op: "rank_all",
                index: if s >= source.rows() { s } else { t },
                bound: if s >= source.rows() { source.rows() } else { target.rows() },
            });
        }
        let q = source.row(s);
        check_widths(q, target)?;
        for (j, d) in dist.iter_mut().enumerate() {
            *d = sq_dist(q, target.row(j));
        }
        if dist.iter().any(|d| d.is_nan()) {
            return Err(Error::Numeric(format!("non-finite distance while ranking source {s}")));
        }
        let truth = dist[t];
        let ahead = dist
            .iter()
            .enumerate()
            .filter(|&(j, &d)| d < truth || (d == truth && j < t))
            .count();
        let mut order: Vec<usize> = (0..dist.len()).collect();
        let by = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
        let k = top_k.min(order.len());
        if k > 0 && k < order.len() {
            order.select_nth_unstable_by(k - 1, by);
        }
        order.truncate(k);
        order.sort_unstable_by(by);
        out.push(RankResult {
            source: s,
            truth: t,
            rank: ahead + 1,
            top: order,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `(k, Hits@k)` in the order requested.
    pub hits: Vec<(usize, f64)>,
    pub mrr: f64,
    pub count: usize,
}

impl Metrics {
    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|&&(kk, _)| kk == k).map(|&(_, h)| h)
    }
}

pub fn metrics(ranks: &[usize], ks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Config("no ranks to score".into()));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::OutOfRange {
            op: "metrics",
            index: r,
            bound: 1,
        });
    }
    let n = ranks.len() as f64;
    let hits = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(Metrics {
        hits,
        mrr,
        count: ranks.len(),
    })
}

/// Hits@1, Hits@5 and MRR of `pairs` in one call.
pub fn evaluate<T: Real>(pairs: &[Pair], source: &Tensor<T>, target: &Tensor<T>) -> Result<(Metrics, Vec<RankResult>)> {
    let ranks = rank_all(pairs, source, target, 1)?;
    let flat: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok((metrics(&flat, &[1, 5])?, ranks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn exact_copy_wins() {
        let targets = t(&[3, 2], &[5.0, 5.0, 0.3, -0.2, 1.0, 1.0]);
        assert_eq!(infer_alignment(&[0.3, -0.2], &targets).unwrap(), 1);
    }

    #[test]
    fn toy_2d() {
        let targets = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(infer_alignment(&[0.0, 0.0], &targets).unwrap(), 0);
    }

    #[test]
    fn empty_targets_rejected() {
        let targets = Tensor::<f64>::zeros(&[0, 2]);
        assert!(infer_alignment(&[0.0, 0.0], &targets).is_err());
    }

    #[test]
    fn tie_with_smaller_id_ranks_ahead() {
        let source = t(&[1, 1], &[0.0]);
        let target = t(&[3, 1], &[1.0, -1.0, 3.0]);
        let r = rank_all(&[(0, 1)], &source, &target, 2).unwrap();
        assert_eq!(r[0].rank, 2);
        assert_eq!(r[0].top, vec![0, 1]);
        let r = rank_all(&[(0, 0)], &source, &target, 1).unwrap();
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&[1, 1, 1], &[1, 5]).unwrap();
        assert_eq!((m.hits_at(1), m.mrr), (Some(1.0), 1.0));
        let m = metrics(&[1, 2, 5], &[1, 5]).unwrap();
        assert_eq!(m.hits_at(1), Some(1.0 / 3.0));
        assert_eq!(m.hits_at(5), Some(1.0));
        assert_eq!(m.mrr, (1.0 + 0.5 + 0.2) / 3.0);
        assert!(metrics(&[], &[1]).is_err());
    }
}
