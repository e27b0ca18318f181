//! Online semi-hard triplet mining on embeddings.

use fsgan_autodiff::{Tensor, Var};

use crate::data::ClassId;
use crate::error::Result;

/// `(anchor, positive, negative)` row indices.
pub type Triplet = (usize, usize, usize);

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mines triplets with anchors from `anchors` and positives and negatives
/// from `pool`, using squared Euclidean distances.
///
/// For each anchor-positive pair the negative is the closest one with
/// `d(a,p) < d(a,n) < d(a,p) + alpha`; if there is none, the closest negative
/// overall. Ties go to the lowest index. Pairs without any negative are
/// skipped. With `same_set`, the anchor itself is never its own positive.
pub fn mine(
    anchors: &Tensor,
    anchor_labels: &[ClassId],
    pool: &Tensor,
    pool_labels: &[ClassId],
    alpha: f64,
    same_set: bool,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, la) in anchor_labels.iter().enumerate() {
        let ea = anchors.row(a);
        let dist: Vec<f64> = (0..pool_labels.len()).map(|j| sq_dist(ea, pool.row(j))).collect();
        let negatives: Vec<usize> = (0..pool_labels.len()).filter(|&j| pool_labels[j] != *la).collect();
        if negatives.is_empty() {
            continue;
        }
        for p in 0..pool_labels.len() {
            if pool_labels[p] != *la || (same_set && p == a) {
                continue;
            }
            let dap = dist[p];
            let mut semi: Option<usize> = None;
            let mut hard = negatives[0];
            for &n in &negatives {
                let dan = dist[n];
                if dan < dist[hard] {
                    hard = n;
                }
                if dan > dap && dan < dap + alpha && semi.map_or(true, |s| dan < dist[s]) {
                    semi = Some(n);
                }
            }
            out.push((a, p, semi.unwrap_or(hard)));
        }
    }
    out
}

/// Semi-hard triplets within one labeled batch; empty when fewer than two
/// classes are present.
pub fn semi_hard_triplets(embeddings: &Tensor, labels: &[ClassId], alpha: f64) -> Vec<Triplet> {
    let mut distinct = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Vec::new();
    }
    mine(embeddings, labels, embeddings, labels, alpha, true)
}

/// `mean(max(|a-p|^2 - |a-n|^2 + alpha, 0))` over aligned rows.
pub fn triplet_loss_aligned<'t>(a: Var<'t>, p: Var<'t>, n: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let dap = a.sub(p)?.square().sum_last_axis();
    let dan = a.sub(n)?.square().sum_last_axis();
    Ok(dap.sub(dan)?.add_scalar(alpha).relu().reduce_mean())
}

/// Triplet loss over mined index triplets; zero when `triplets` is empty.
pub fn triplet_loss<'t>(anchors: Var<'t>, pool: Var<'t>, triplets: &[Triplet], alpha: f64) -> Result<Var<'t>> {
    if triplets.is_empty() {
        return Ok(anchors.tape().constant(Tensor::scalar(0.0)));
    }
    let ai: Vec<usize> = triplets.iter().map(|t| t.0).collect();
    let pi: Vec<usize> = triplets.iter().map(|t| t.1).collect();
    let ni: Vec<usize> = triplets.iter().map(|t| t.2).collect();
    triplet_loss_aligned(anchors.select_rows(&ai)?, pool.select_rows(&pi)?, pool.select_rows(&ni)?, alpha)
}

/// Plain-number version of [`triplet_loss`].
pub fn triplet_loss_value(anchors: &Tensor, pool: &Tensor, triplets: &[Triplet], alpha: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let total: f64 = triplets
        .iter()
        .map(|&(a, p, n)| {
            (sq_dist(anchors.row(a), pool.row(p)) - sq_dist(anchors.row(a), pool.row(n)) + alpha).max(0.0)
        })
        .sum();
    total / triplets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsgan_autodiff::Tape;

    fn emb(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn separated_pairs_mine_every_anchor_positive_pair() {
        // positives at distance 0.01, negatives at 0.1: every negative is semi-hard
        let e = emb(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.3], [0.1, 0.3]]);
        let labels = [ClassId(1), ClassId(1), ClassId(2), ClassId(2)];
        let t = semi_hard_triplets(&e, &labels, 0.2);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], (0, 1, 2));
        assert_eq!(t[1], (1, 0, 3));
    }

    #[test]
    fn one_class_is_degenerate() {
        let e = emb(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(semi_hard_triplets(&e, &[ClassId(1), ClassId(1)], 0.2).is_empty());
    }

    #[test]
    fn falls_back_to_hardest_negative() {
        // negative closer than the positive: no semi-hard candidate
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [0.2, 0.0], [0.5, 0.0]]);
        let labels = [ClassId(1), ClassId(1), ClassId(2), ClassId(2)];
        let t = semi_hard_triplets(&e, &labels, 0.1);
        assert_eq!(t[0], (0, 1, 2));
    }

    #[test]
    fn triplet_loss_arithmetic() {
        let tape = Tape::new();
        // unit vectors with |a-p|^2 = 0.1 and |a-n|^2 = 0.2
        let angle = |d2: f64| (1.0 - d2 / 2.0f64).acos();
        let a = tape.constant(emb(&[[1.0, 0.0]]));
        let p = tape.constant(emb(&[[angle(0.1).cos(), angle(0.1).sin()]]));
        let n = tape.constant(emb(&[[angle(0.2).cos(), -angle(0.2).sin()]]));
        let l = triplet_loss_aligned(a, p, n, 0.2).unwrap();
        assert!((l.value().item() - 0.1).abs() < 1e-12);
        let l = triplet_loss_aligned(a, a, n, 0.1).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }
}
