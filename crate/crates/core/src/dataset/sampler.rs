use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{Batch, Dataset};
use crate::error::{input_err, Result};

/// Draws `p` distinct train identities and `k` samples of each.
///
/// Samples are taken without replacement when an identity has at least `k`
/// of them and with replacement otherwise. The batch order is shuffled.
pub fn pk_sample<R: Rng + ?Sized>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    let ids = dataset.train_ids();
    if p == 0 || k == 0 {
        return Err(input_err!("P and K must be positive, got P={p}, K={k}"));
    }
    if p > ids.len() {
        return Err(input_err!(
            "P={p} exceeds the {} available train identities",
            ids.len()
        ));
    }
    let mut picks = Vec::with_capacity(p * k);
    for i in index::sample(rng, ids.len(), p) {
        let pool = dataset.train_samples_of(ids[i]);
        if pool.len() >= k {
            picks.extend(index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
        } else {
            picks.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    picks.shuffle(rng);
    dataset.batch(&picks)
}
