//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles are written straight from the definitions, independently of
//! the library code they are compared against.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use apdr::dataset::{generate_attrgrid, AttrGridConfig, Dataset};
use apdr::evaluation::{DistanceMatrix, RerankParams};
use apdr::numerics::Triplet;
use apdr::training::TrainConfig;

/// CMC curve, mAP and number of scored queries by brute force.
///
/// A gallery item is dropped for a query when it shares both identity and
/// camera. The rank of a kept item is the number of kept items strictly ahead
/// of it (smaller distance, or equal distance and lower index). AP sums the
/// precision at every hit, taken in rank order.
pub fn cmc_map_oracle(
    dist: &DistanceMatrix,
    qi: &[usize],
    qc: &[usize],
    gi: &[usize],
    gc: &[usize],
) -> (Vec<f64>, f64, usize) {
    let mut cmc = vec![0.0; dist.cols];
    let mut ap_sum = 0.0;
    let mut used = 0usize;
    for q in 0..dist.rows {
        let kept = |j: usize| gi[j] != qi[q] || gc[j] != qc[q];
        let ahead = |a: usize, b: usize| {
            let (da, db) = (dist.get(q, a), dist.get(q, b));
            da < db || (da == db && a < b)
        };
        let mut ranks: Vec<usize> = (0..dist.cols)
            .filter(|&j| kept(j) && gi[j] == qi[q])
            .map(|j| (0..dist.cols).filter(|&o| kept(o) && ahead(o, j)).count())
            .collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        let mut precision_sum = 0.0;
        for (n, &r) in ranks.iter().enumerate() {
            precision_sum += (n + 1) as f64 / (r + 1) as f64;
        }
        ap_sum += precision_sum / ranks.len() as f64;
        used += 1;
        for c in &mut cmc[ranks[0]..] {
            *c += 1.0;
        }
    }
    if used > 0 {
        cmc.iter_mut().for_each(|c| *c /= used as f64);
    }
    let map = if used > 0 { ap_sum / used as f64 } else { 0.0 };
    (cmc, map, used)
}

/// Hardest positive and negative per anchor by scanning every pair.
///
/// The pair with the largest `d(a,p) − d(a,n)` wins, the first one met
/// (positives outer, negatives inner) on ties. Callers keep embeddings on a
/// coarse dyadic grid so that every distance and difference is exact.
pub fn triplet_oracle(emb: &[f64], dim: usize, ids: &[usize]) -> Vec<Triplet> {
    let n = ids.len();
    let d = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..dim {
            let t = emb[i * dim + c] - emb[j * dim + c];
            s += t * t;
        }
        s
    };
    let mut out = Vec::new();
    for a in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in (0..n).filter(|&p| p != a && ids[p] == ids[a]) {
            for q in (0..n).filter(|&q| ids[q] != ids[a]) {
                let score = d(a, p) - d(a, q);
                if best.map_or(true, |(s, _, _)| score > s) {
                    best = Some((score, p, q));
                }
            }
        }
        if let Some((_, p, q)) = best {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: q,
            });
        }
    }
    out
}

/// k-reciprocal re-ranking read off its definition, with explicit sets.
pub fn rerank_oracle(full: &DistanceMatrix, nq: usize, p: RerankParams) -> Vec<f64> {
    let n = full.rows;
    let scaled: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let m = (0..n).map(|j| full.get(i, j)).fold(0.0, f64::max);
            (0..n).map(|j| if m > 0.0 { full.get(i, j) / m } else { 0.0 }).collect()
        })
        .collect();
    let sorted = |i: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scaled[i][a].partial_cmp(&scaled[i][b]).unwrap().then(a.cmp(&b)));
        idx
    };
    let neighbours = |i: usize, k: usize| -> BTreeSet<usize> { sorted(i).into_iter().take(k + 1).collect() };
    let reciprocal = |i: usize, k: usize| -> BTreeSet<usize> {
        neighbours(i, k)
            .into_iter()
            .filter(|&j| neighbours(j, k).contains(&i))
            .collect()
    };
    let half = (p.k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let r = reciprocal(i, p.k1);
        let mut star = r.clone();
        for &c in &r {
            let rc = reciprocal(c, half);
            let overlap = rc.iter().filter(|x| r.contains(x)).count();
            if 3 * overlap > 2 * rc.len() {
                star.extend(rc);
            }
        }
        let z: f64 = star.iter().map(|&j| (-scaled[i][j]).exp()).sum();
        v.push(star.iter().map(|&j| (j, (-scaled[i][j]).exp() / z)).collect());
    }
    if p.k2 > 1 {
        v = (0..n)
            .map(|i| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for j in sorted(i).into_iter().take(p.k2) {
                    for (&t, &w) in &v[j] {
                        *acc.entry(t).or_default() += w / p.k2 as f64;
                    }
                }
                acc
            })
            .collect();
    }
    let mut out = Vec::with_capacity(nq * (n - nq));
    for i in 0..nq {
        for j in nq..n {
            let keys: BTreeSet<usize> = v[i].keys().chain(v[j].keys()).copied().collect();
            let (mut lo, mut hi) = (0.0, 0.0);
            for t in keys {
                let a = v[i].get(&t).copied().unwrap_or(0.0);
                let b = v[j].get(&t).copied().unwrap_or(0.0);
                lo += a.min(b);
                hi += a.max(b);
            }
            out.push(p.lambda * full.get(i, j) + (1.0 - p.lambda) * (1.0 - lo / hi));
        }
    }
    out
}

/// Squared Euclidean distances among points.
pub fn full_matrix(points: &[Vec<f64>]) -> DistanceMatrix {
    let mut data = Vec::with_capacity(points.len() * points.len());
    for a in points {
        for b in points {
            data.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    DistanceMatrix::new(points.len(), points.len(), data).unwrap()
}

/// A dataset small enough to train for a couple of epochs in seconds.
pub fn small_generator() -> AttrGridConfig {
    AttrGridConfig {
        train_identities: 6,
        test_identities: 4,
        samples_per_identity: 4,
        ..Default::default()
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    let mut ds = generate_attrgrid(&small_generator(), seed).unwrap();
    ds.preload().unwrap();
    ds
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 2,
        p: 4,
        k: 4,
        seed,
        ..Default::default()
    }
}

/// Relative paths and contents of every file under `dir`.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
