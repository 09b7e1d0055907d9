//! Distance matrices and single-query CMC / mAP.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};

/// Dense row-major `rows × cols` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(input_err!("{} distances for a {rows}×{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Squared Euclidean distances between the rows of two `n × dim` matrices.
pub fn squared_distances(a: &[f32], b: &[f32], dim: usize) -> Result<DistanceMatrix> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(config_err!(
            "feature matrices of {} and {} values do not split into rows of {dim}",
            a.len(),
            b.len()
        ));
    }
    let (n, m) = (a.len() / dim, b.len() / dim);
    let mut data = Vec::with_capacity(n * m);
    for x in a.chunks_exact(dim) {
        for y in b.chunks_exact(dim) {
            data.push(x.iter().zip(y).map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2)).sum());
        }
    }
    DistanceMatrix::new(n, m, data)
}

/// CMC curve and mAP over the queries that had a valid match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    /// `cmc[k-1]` is the rank-k accuracy, for k up to the gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    /// Queries left out because no cross-camera match exists.
    pub skipped_queries: usize,
}

impl RetrievalScores {
    /// Rank-k accuracy, 0 for k = 0 and the last value beyond the gallery.
    pub fn rank(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            _ => self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0),
        }
    }
}

/// Single-query CMC and mAP.
///
/// For each query, gallery entries sharing both its identity and camera are
/// dropped, the rest are ranked by ascending distance with ties going to the
/// lower gallery index, and the same-identity entries count as hits. AP is
/// the mean of the precision at each hit.
pub fn cmc_map(
    dist: &DistanceMatrix,
    query_ids: &[usize],
    query_cams: &[usize],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
) -> Result<RetrievalScores> {
    if query_ids.len() != dist.rows || query_cams.len() != dist.rows {
        return Err(input_err!("{} query rows but {} query labels", dist.rows, query_ids.len()));
    }
    if gallery_ids.len() != dist.cols || gallery_cams.len() != dist.cols {
        return Err(input_err!("{} gallery columns but {} gallery labels", dist.cols, gallery_ids.len()));
    }
    let mut cmc = vec![0.0; dist.cols];
    let mut ap_sum = 0.0;
    let mut used = 0;
    let mut order: Vec<usize> = Vec::with_capacity(dist.cols);
    for q in 0..dist.rows {
        let row = dist.row(q);
        order.clear();
        order.extend(
            (0..dist.cols).filter(|&j| !(gallery_ids[j] == query_ids[q] && gallery_cams[j] == query_cams[q])),
        );
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        let Some(first) = first else { continue };
        used += 1;
        ap_sum += precision_sum / hits as f64;
        for c in &mut cmc[first..] {
            *c += 1.0;
        }
    }
    if used > 0 {
        cmc.iter_mut().for_each(|c| *c /= used as f64);
    }
    Ok(RetrievalScores {
        cmc,
        map: if used > 0 { ap_sum / used as f64 } else { 0.0 },
        num_queries: used,
        skipped_queries: dist.rows - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Straight from the definitions: the rank of a gallery entry is the
    /// number of kept entries strictly before it.
    fn oracle(
        dist: &DistanceMatrix,
        qi: &[usize],
        qc: &[usize],
        gi: &[usize],
        gc: &[usize],
    ) -> (Vec<f64>, f64, usize) {
        let mut cmc = vec![0.0; dist.cols];
        let mut aps = Vec::new();
        for q in 0..dist.rows {
            let kept = |j: usize| !(gi[j] == qi[q] && gc[j] == qc[q]);
            let before = |a: usize, b: usize| {
                let (da, db) = (dist.get(q, a), dist.get(q, b));
                da < db || (da == db && a < b)
            };
            let rank_of = |j: usize| (0..dist.cols).filter(|&o| kept(o) && before(o, j)).count();
            let hits: Vec<usize> = (0..dist.cols).filter(|&j| kept(j) && gi[j] == qi[q]).collect();
            if hits.is_empty() {
                continue;
            }
            let ranks: Vec<usize> = hits.iter().map(|&j| rank_of(j)).collect();
            let best = *ranks.iter().min().unwrap();
            for (k, c) in cmc.iter_mut().enumerate() {
                if best <= k {
                    *c += 1.0;
                }
            }
            let ap = ranks
                .iter()
                .map(|&r| {
                    let hits_upto = ranks.iter().filter(|&&o| o <= r).count();
                    hits_upto as f64 / (r + 1) as f64
                })
                .sum::<f64>()
                / ranks.len() as f64;
            aps.push(ap);
        }
        let n = aps.len();
        if n > 0 {
            cmc.iter_mut().for_each(|c| *c /= n as f64);
        }
        let map = if n > 0 { aps.iter().sum::<f64>() / n as f64 } else { 0.0 };
        (cmc, map, n)
    }

    #[test]
    fn worked_ranking_example() {
        let d = DistanceMatrix::new(1, 3, vec![0.2, 0.1, 0.3]).unwrap();
        let s = cmc_map(&d, &[0], &[0], &[0, 1, 0], &[1, 2, 3]).unwrap();
        assert_eq!(s.cmc, vec![0.0, 1.0, 1.0]);
        assert_abs_diff_eq!(s.map, (0.5 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_single_match() {
        let d = DistanceMatrix::new(1, 3, vec![0.1, 0.5, 0.9]).unwrap();
        let s = cmc_map(&d, &[4], &[0], &[4, 1, 2], &[1, 1, 1]).unwrap();
        assert_eq!(s.rank(1), 1.0);
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn same_camera_match_is_junk() {
        let d = DistanceMatrix::new(1, 3, vec![0.0, 0.1, 0.2]).unwrap();
        let s = cmc_map(&d, &[0], &[0], &[0, 1, 0], &[0, 1, 1]).unwrap();
        assert_eq!(s.cmc, vec![0.0, 1.0, 1.0]);
        assert_abs_diff_eq!(s.map, 0.5);
    }

    #[test]
    fn queries_without_matches_are_counted() {
        let d = DistanceMatrix::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s = cmc_map(&d, &[0, 7], &[0, 0], &[0, 1], &[1, 1]).unwrap();
        assert_eq!((s.num_queries, s.skipped_queries), (1, 1));
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn distance_examples() {
        let d = squared_distances(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(d.data, vec![0.0, 2.0, 2.0, 0.0]);
        assert!(squared_distances(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2).is_err());
    }

    fn instance() -> impl Strategy<Value = (DistanceMatrix, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
        (1usize..=10, 1usize..=20).prop_flat_map(|(nq, ng)| {
            (
                // Coarse values so ties are common.
                prop::collection::vec(0u8..6, nq * ng),
                prop::collection::vec(0usize..4, nq),
                prop::collection::vec(0usize..3, nq),
                prop::collection::vec(0usize..4, ng),
                prop::collection::vec(0usize..3, ng),
            )
                .prop_map(move |(d, qi, qc, gi, gc)| {
                    let d = d.into_iter().map(|x| f64::from(x) * 0.25).collect();
                    (DistanceMatrix::new(nq, ng, d).unwrap(), qi, qc, gi, gc)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force((d, qi, qc, gi, gc) in instance()) {
            let s = cmc_map(&d, &qi, &qc, &gi, &gc).unwrap();
            let (cmc, map, n) = oracle(&d, &qi, &qc, &gi, &gc);
            prop_assert_eq!(s.num_queries, n);
            prop_assert_eq!(&s.cmc, &cmc);
            prop_assert!((s.map - map).abs() < 1e-12);
        }

        #[test]
        fn cmc_is_a_monotone_fraction((d, qi, qc, gi, gc) in instance()) {
            let s = cmc_map(&d, &qi, &qc, &gi, &gc).unwrap();
            prop_assert!(s.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!((0.0..=1.0).contains(&s.map));
            if s.num_queries > 0 {
                prop_assert_eq!(*s.cmc.last().unwrap(), 1.0);
            }
        }

        #[test]
        fn invariant_under_increasing_maps((d, qi, qc, gi, gc) in instance()) {
            let s = cmc_map(&d, &qi, &qc, &gi, &gc).unwrap();
            let warped = DistanceMatrix::new(d.rows, d.cols, d.data.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).unwrap();
            let t = cmc_map(&warped, &qi, &qc, &gi, &gc).unwrap();
            prop_assert_eq!(s, t);
        }
    }
}
