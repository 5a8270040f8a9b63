use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{FrameSource, Tracklet};
use crate::error::{Result, StaError};

/// `n` frame indices out of `len`, non-decreasing.
///
/// Without replacement when the tracklet is long enough, otherwise with
/// replacement.
pub fn sample_indices(len: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(StaError::arg("cannot sample frames from an empty tracklet"));
    }
    if n == 0 {
        return Err(StaError::arg("clip length must be at least 1"));
    }
    let mut idx = if len >= n {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

/// Deterministic evenly spaced indices `⌊i·len/n⌋`.
pub fn evenly_spaced(len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 || n == 0 {
        return Err(StaError::arg("evenly spaced sampling needs len >= 1 and n >= 1"));
    }
    Ok((0..n).map(|i| i * len / n).collect())
}

/// Random `n`-frame clip of a tracklet, temporal order preserved.
pub fn sample_frames(t: &Tracklet, n: usize, rng: &mut impl Rng) -> Result<FrameSource> {
    let idx = sample_indices(t.len(), n, rng)?;
    t.frames.select(&idx)
}

/// Tracklet indices for one identity-balanced batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    /// Index into the dataset slice, one per batch row.
    pub items: Vec<usize>,
    /// Identity of each row.
    pub identities: Vec<u32>,
    pub p: usize,
    pub k_per_id: usize,
}

impl PkBatch {
    /// Whether the batch supports a triplet loss (two identities, two rows each).
    pub fn triplet_valid(&self) -> bool {
        self.p >= 2 && self.k_per_id >= 2
    }
}

/// Draws `p` identities and `k_per_id` tracklets of each, then shuffles the rows.
///
/// Identities with fewer than `k_per_id` tracklets contribute all of them and
/// are topped up by sampling with replacement.
pub fn pk_batch(dataset: &[Tracklet], p: usize, k_per_id: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    if p == 0 || k_per_id == 0 {
        return Err(StaError::arg("p and k_per_id must be at least 1"));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.iter().enumerate() {
        by_id.entry(t.identity).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(StaError::arg(format!(
            "batch needs {p} identities but the dataset has {}",
            by_id.len()
        )));
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let chosen = index::sample(rng, ids.len(), p).into_vec();
    let mut rows = Vec::with_capacity(p * k_per_id);
    for ci in chosen {
        let id = ids[ci];
        let pool = &by_id[&id];
        let picks: Vec<usize> = if pool.len() >= k_per_id {
            index::sample(rng, pool.len(), k_per_id).into_iter().map(|i| pool[i]).collect()
        } else {
            let mut all = pool.clone();
            all.shuffle(rng);
            while all.len() < k_per_id {
                all.push(pool[rng.random_range(0..pool.len())]);
            }
            all
        };
        rows.extend(picks.into_iter().map(|i| (i, id)));
    }
    rows.shuffle(rng);
    let (items, identities) = rows.into_iter().unzip();
    Ok(PkBatch {
        items,
        identities,
        p,
        k_per_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tracklet(identity: u32, len: usize, id: u32) -> Tracklet {
        let frames = (0..len).map(|i| Tensor::full(&[1, 1, 3], i as f64)).collect();
        Tracklet::new(FrameSource::Images(frames), identity, 0, id).unwrap()
    }

    #[test]
    fn exact_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_indices(4, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn short_tracklet_uses_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_indices(2, 4, &mut rng).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(idx.iter().all(|&i| i < 2));
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fixed_seed_is_repeatable() {
        let a = sample_indices(59, 4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_indices(59, 4, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_indices(0, 4, &mut rng).is_err());
    }

    #[test]
    fn sample_frames_keeps_order() {
        let t = tracklet(0, 10, 0);
        let clip = sample_frames(&t, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let FrameSource::Images(v) = clip else { panic!() };
        let vals: Vec<f64> = v.iter().map(|f| f.data()[0]).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn evenly_spaced_cases() {
        assert_eq!(evenly_spaced(8, 4).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(evenly_spaced(2, 4).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(evenly_spaced(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn default_batch_size() {
        let data: Vec<Tracklet> = (0..20).flat_map(|id| (0..5).map(move |t| tracklet(id, 3, id * 10 + t))).collect();
        let b = pk_batch(&data, 16, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(b.items.len(), 64);
        assert!(b.triplet_valid());
    }

    #[test]
    fn single_identity_is_flagged() {
        let data = vec![tracklet(3, 2, 0), tracklet(3, 2, 1)];
        let b = pk_batch(&data, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!b.triplet_valid());
    }

    #[test]
    fn exact_dataset_is_permuted() {
        let data: Vec<Tracklet> = (0..3).flat_map(|id| (0..2).map(move |t| tracklet(id, 1, id * 2 + t))).collect();
        let b = pk_batch(&data, 3, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut items = b.items.clone();
        items.sort_unstable();
        assert_eq!(items, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_identities() {
        let data = vec![tracklet(0, 1, 0)];
        assert!(pk_batch(&data, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn indices_sorted_and_in_range(len in 1usize..80, n in 1usize..12, seed in any::<u64>()) {
            let idx = sample_indices(len, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(idx.len(), n);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < len));
            if len >= n {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn pk_counts(ids in 2u32..8, per in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
            let data: Vec<Tracklet> = (0..ids)
                .flat_map(|id| (0..per).map(move |t| tracklet(id, 1, id * 100 + t as u32)))
                .collect();
            let p = ids as usize;
            let b = pk_batch(&data, p, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(b.items.len(), p * k);
            let mut counts = BTreeMap::new();
            for (&item, &id) in b.items.iter().zip(&b.identities) {
                prop_assert_eq!(data[item].identity, id);
                *counts.entry(id).or_insert(0usize) += 1;
            }
            prop_assert_eq!(counts.len(), p);
            prop_assert!(counts.values().all(|&c| c == k));
        }
    }
}
