//! k-reciprocal re-ranking.

use serde::{Deserialize, Serialize};

use super::metrics::DistanceMatrix;
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the blend.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, gallery_size: usize) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(input_err!("re-ranking needs k1 > k2 ≥ 1, got k1={}, k2={}", self.k1, self.k2));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(input_err!("re-ranking weight must lie in [0, 1], got {}", self.lambda));
        }
        if self.k1 >= gallery_size {
            return Err(input_err!("k1={} needs a gallery larger than {gallery_size}", self.k1));
        }
        Ok(())
    }

    /// Shrinks k1 to at most half the gallery (and k2 below k1) so tiny
    /// galleries stay valid.
    pub fn capped(self, gallery_size: usize) -> Self {
        let k1 = self.k1.min(gallery_size / 2).max(2);
        Self {
            k1,
            k2: self.k2.min(k1 - 1).max(1),
            lambda: self.lambda,
        }
    }
}

/// Neighbours of every point sorted by distance, ties by index.
fn ranking(d: &[Vec<f64>]) -> Vec<Vec<usize>> {
    d.iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Members `j` of the `k+1` nearest of `i` that also have `i` among their `k+1` nearest.
fn k_reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&j| rank[j][..=k].contains(&i))
        .collect()
}

/// Re-ranks query-to-gallery distances.
///
/// `full` holds distances among all `num_query + gallery` points, queries
/// first. The result is `λ·d + (1−λ)·d_J` over the query×gallery block, where
/// `d` is the original distance and `d_J` the Jaccard distance between
/// expanded k-reciprocal neighbour sets. Neighbour weights are computed on
/// distances scaled by each row's maximum.
pub fn k_reciprocal_rerank(full: &DistanceMatrix, num_query: usize, params: RerankParams) -> Result<DistanceMatrix> {
    let n = full.rows;
    if full.cols != n || num_query > n {
        return Err(input_err!(
            "re-ranking needs a square distance matrix over queries and gallery, got {}×{}",
            full.rows,
            full.cols
        ));
    }
    let ng = n - num_query;
    params.validate(ng)?;
    let (k1, k2) = (params.k1, params.k2);
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;

    let scaled: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = full.row(i);
            let max = row.iter().copied().fold(0.0, f64::max);
            row.iter().map(|&x| if max > 0.0 { x / max } else { 0.0 }).collect()
        })
        .collect();
    let rank = ranking(&scaled);

    // Sparse weight vectors over all points.
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let core = k_reciprocal(&rank, i, k1);
        let mut expansion = core.clone();
        for &c in &core {
            let cand = k_reciprocal(&rank, c, half);
            let shared = cand.iter().filter(|x| core.contains(x)).count();
            if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expansion.extend(cand);
            }
        }
        expansion.sort_unstable();
        expansion.dedup();
        let weights: Vec<f64> = expansion.iter().map(|&j| (-scaled[i][j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expansion.iter().zip(weights) {
            v[i][j] = w / total;
        }
    }
    if k2 > 1 {
        v = (0..n)
            .map(|i| {
                let mut acc = vec![0.0; n];
                for &j in &rank[i][..k2] {
                    acc.iter_mut().zip(&v[j]).for_each(|(a, b)| *a += b);
                }
                acc.iter_mut().for_each(|a| *a /= k2 as f64);
                acc
            })
            .collect();
    }

    let mut out = Vec::with_capacity(num_query * ng);
    for i in 0..num_query {
        for j in num_query..n {
            let shared: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a.min(*b)).sum();
            let jaccard = 1.0 - shared / (2.0 - shared);
            out.push(params.lambda * full.get(i, j) + (1.0 - params.lambda) * jaccard);
        }
    }
    DistanceMatrix::new(num_query, ng, out)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;
    use proptest::prelude::*;

    fn full_matrix(points: &[Vec<f64>]) -> DistanceMatrix {
        let n = points.len();
        let mut data = Vec::with_capacity(n * n);
        for a in points {
            for b in points {
                data.push(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum());
            }
        }
        DistanceMatrix::new(n, n, data).unwrap()
    }

    /// Set-based reading of the definitions: N(p, k) is the k+1 nearest
    /// including p, R(p, k) the mutual members, R* the expansion, weights
    /// `exp(−d)` normalised, local query expansion over the k2 nearest, and
    /// Jaccard distance `1 − Σmin / Σmax`.
    fn oracle(full: &DistanceMatrix, nq: usize, p: RerankParams) -> Vec<f64> {
        let n = full.rows;
        let d: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let m = full.row(i).iter().cloned().fold(0.0, f64::max);
                full.row(i).iter().map(|x| x / m).collect()
            })
            .collect();
        let nearest = |i: usize, k: usize| -> BTreeSet<usize> {
            let mut all: Vec<(f64, usize)> = (0..n).map(|j| (d[i][j], j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k + 1).map(|(_, j)| j).collect()
        };
        let recip = |i: usize, k: usize| -> BTreeSet<usize> {
            nearest(i, k).into_iter().filter(|&j| nearest(j, k).contains(&i)).collect()
        };
        let half = (p.k1 as f64 / 2.0).round_ties_even() as usize;
        let weights: Vec<BTreeMap<usize, f64>> = (0..n)
            .map(|i| {
                let r = recip(i, p.k1);
                let mut star = r.clone();
                for &c in &r {
                    let rc = recip(c, half);
                    if rc.intersection(&r).count() as f64 > 2.0 / 3.0 * rc.len() as f64 {
                        star.extend(rc);
                    }
                }
                let z: f64 = star.iter().map(|&j| (-d[i][j]).exp()).sum();
                star.iter().map(|&j| (j, (-d[i][j]).exp() / z)).collect()
            })
            .collect();
        let expanded: Vec<BTreeMap<usize, f64>> = (0..n)
            .map(|i| {
                if p.k2 == 1 {
                    return weights[i].clone();
                }
                let mut sorted: Vec<usize> = (0..n).collect();
                sorted.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
                let mut acc = BTreeMap::new();
                for &j in &sorted[..p.k2] {
                    for (&t, &w) in &weights[j] {
                        *acc.entry(t).or_insert(0.0) += w / p.k2 as f64;
                    }
                }
                acc
            })
            .collect();
        let mut out = Vec::new();
        for i in 0..nq {
            for j in nq..n {
                let keys: BTreeSet<usize> = expanded[i].keys().chain(expanded[j].keys()).copied().collect();
                let (mut lo, mut hi) = (0.0, 0.0);
                for t in keys {
                    let a = expanded[i].get(&t).copied().unwrap_or(0.0);
                    let b = expanded[j].get(&t).copied().unwrap_or(0.0);
                    lo += a.min(b);
                    hi += a.max(b);
                }
                out.push(p.lambda * full.get(i, j) + (1.0 - p.lambda) * (1.0 - lo / hi));
            }
        }
        out
    }

    #[test]
    fn lambda_one_returns_original() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.3, (i * i) as f64 * 0.1]).collect();
        let full = full_matrix(&pts);
        let p = RerankParams { k1: 3, k2: 2, lambda: 1.0 };
        let out = k_reciprocal_rerank(&full, 3, p).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(out.get(i, j), full.get(i, 3 + j));
            }
        }
    }

    #[test]
    fn duplicate_gallery_points_tie() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![1.0, 0.2],
            vec![3.0, 1.0],
            vec![0.5, 2.0],
            vec![2.0, 2.0],
        ];
        let full = full_matrix(&pts);
        let out = k_reciprocal_rerank(&full, 1, RerankParams { k1: 3, k2: 2, lambda: 0.3 }).unwrap();
        assert_eq!(out.get(0, 0), out.get(0, 1));
    }

    #[test]
    fn parameter_errors() {
        let full = full_matrix(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let err = |k1, k2, lambda| k_reciprocal_rerank(&full, 1, RerankParams { k1, k2, lambda }).is_err();
        assert!(err(3, 1, 0.3), "k1 equal to gallery size");
        assert!(err(2, 2, 0.3));
        assert!(err(2, 0, 0.3));
        assert!(err(2, 1, 1.5));
        assert!(!err(2, 1, 0.3));
    }

    #[test]
    fn capping_keeps_parameters_valid() {
        let p = RerankParams::default().capped(10);
        assert_eq!((p.k1, p.k2), (5, 4));
        assert!(p.validate(10).is_ok());
        assert_eq!(RerankParams::default().capped(1000), RerankParams::default());
    }

    #[test]
    fn five_point_instance_matches_oracle() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.3], vec![1.0, 0.0], vec![0.9, 0.4], vec![0.2, 1.2]];
        let full = full_matrix(&pts);
        let p = RerankParams { k1: 2, k2: 1, lambda: 0.3 };
        let got = k_reciprocal_rerank(&full, 1, p).unwrap();
        let want = oracle(&full, 1, p);
        for (g, w) in got.data.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn matches_direct_definition(
            pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 4..=8),
            nq_frac in 0.0f64..1.0,
            k1_frac in 0.0f64..1.0,
            k2_frac in 0.0f64..1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let n = pts.len();
            let nq = 1 + ((n - 3) as f64 * nq_frac) as usize;
            let ng = n - nq;
            let k1 = 2 + ((ng - 2) as f64 * k1_frac) as usize;
            let k2 = 1 + ((k1 - 1) as f64 * k2_frac) as usize;
            let p = RerankParams { k1: k1.min(ng - 1), k2: k2.min(k1.min(ng - 1) - 1), lambda };
            prop_assume!(p.validate(ng).is_ok());
            let full = full_matrix(&pts);
            let got = k_reciprocal_rerank(&full, nq, p).unwrap();
            let want = oracle(&full, nq, p);
            for (g, w) in got.data.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-6, "{} vs {}", g, w);
            }
        }

        #[test]
        fn lambda_one_is_identity_on_rankings(
            pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..=8),
        ) {
            let full = full_matrix(&pts);
            let out = k_reciprocal_rerank(&full, 2, RerankParams { k1: 3, k2: 2, lambda: 1.0 }).unwrap();
            for i in 0..2 {
                prop_assert_eq!(out.row(i), &full.row(i)[2..]);
            }
        }
    }
}
