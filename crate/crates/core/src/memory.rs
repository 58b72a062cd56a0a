//! Per-block feature memory and the strategies that pick a reference
//! feature map out of it.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    /// Oldest stored entry.
    #[default]
    Earliest,
    /// Entry with the largest whole-map L2 norm; ties go to the oldest.
    TemporalNms,
    /// Each spatial quadrant copied from an entry drawn from its own
    /// temporal group.
    PatchShuffle,
    /// Each channel copied from an independently drawn entry.
    ChannelShuffle,
}

impl SamplingKind {
    pub const ALL: [SamplingKind; 4] = [
        SamplingKind::Earliest,
        SamplingKind::TemporalNms,
        SamplingKind::PatchShuffle,
        SamplingKind::ChannelShuffle,
    ];

    pub fn is_random(self) -> bool {
        matches!(self, SamplingKind::PatchShuffle | SamplingKind::ChannelShuffle)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    /// Seed for the shuffle kinds; ignored otherwise.
    #[serde(default)]
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn new(kind: SamplingKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Bounded, timestamp-ordered store of feature maps. Pushing past capacity
/// evicts the oldest entry.
#[derive(Clone, Debug)]
pub struct FeatureMemory {
    capacity: usize,
    block: usize,
    entries: VecDeque<(i64, Arc<Tensor>)>,
}

impl FeatureMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        Self::for_block(capacity, 0)
    }

    /// Memory owned by block `block`; the id is reported on cold-start errors.
    pub fn for_block(capacity: usize, block: usize) -> Result<Self> {
        if capacity == 0 {
            return config_err("memory capacity must be at least 1");
        }
        Ok(Self {
            capacity,
            block,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (i64, &Tensor)> {
        self.entries.iter().map(|(t, f)| (*t, f.as_ref()))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn update(&mut self, feature: Tensor, t: i64) -> Result<()> {
        self.update_shared(Arc::new(feature), t)
    }

    pub fn update_shared(&mut self, feature: Arc<Tensor>, t: i64) -> Result<()> {
        if let Some((last, f)) = self.entries.back() {
            if t <= *last {
                return usage_err(format!("timestamp {t} is not after {last}"));
            }
            if f.shape() != feature.shape() {
                return usage_err(format!(
                    "feature shape {:?} does not match memory shape {:?}",
                    feature.shape(),
                    f.shape()
                ));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, feature));
        Ok(())
    }

    /// Fill an empty memory to capacity with copies of `feature`, the newest
    /// copy at timestamp `last_t`.
    pub fn fill(&mut self, feature: Arc<Tensor>, last_t: i64) -> Result<()> {
        if !self.is_empty() {
            return usage_err("memory can only be filled while empty");
        }
        let cap = self.capacity as i64;
        for t in last_t - cap + 1..=last_t {
            self.entries.push_back((t, feature.clone()));
        }
        Ok(())
    }

    fn nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::ColdStart { block: self.block })
        } else {
            Ok(())
        }
    }

    pub fn sample_earliest(&self) -> Result<Arc<Tensor>> {
        self.nonempty()?;
        Ok(self.entries[0].1.clone())
    }

    pub fn sample_temporal_nms(&self) -> Result<Arc<Tensor>> {
        self.nonempty()?;
        let mut best = 0;
        let mut best_norm = self.entries[0].1.norm_l2();
        for (i, (_, f)) in self.entries.iter().enumerate().skip(1) {
            let n = f.norm_l2();
            if n > best_norm {
                best = i;
                best_norm = n;
            }
        }
        Ok(self.entries[best].1.clone())
    }

    /// Index range of temporal group `q` (of four) over `n` entries. Groups
    /// are contiguous and never empty; for `n < 4` they overlap.
    pub fn temporal_group(n: usize, q: usize) -> std::ops::Range<usize> {
        let lo = q * n / 4;
        let hi = ((q + 1) * n / 4).max(lo + 1);
        lo..hi
    }

    pub fn sample_patch_shuffle(&self, rng: &mut impl Rng) -> Result<Arc<Tensor>> {
        self.nonempty()?;
        let picks: Vec<usize> = (0..4)
            .map(|q| rng.gen_range(Self::temporal_group(self.len(), q)))
            .collect();
        let first = &self.entries[0].1;
        let [h, w, c] = *first.shape() else {
            return config_err(format!("patch shuffle needs an H x W x C map, got {:?}", first.shape()));
        };
        let (hm, wm) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Tensor::zeros(&[h, w, c]);
        for y in 0..h {
            for x in 0..w {
                let q = usize::from(y >= hm) * 2 + usize::from(x >= wm);
                let src = &self.entries[picks[q]].1;
                let o = (y * w + x) * c;
                out.data_mut()[o..o + c].copy_from_slice(&src.data()[o..o + c]);
            }
        }
        Ok(Arc::new(out))
    }

    pub fn sample_channel_shuffle(&self, rng: &mut impl Rng) -> Result<Arc<Tensor>> {
        self.nonempty()?;
        let c = self.entries[0].1.cols();
        let picks: Vec<usize> = (0..c).map(|_| rng.gen_range(0..self.len())).collect();
        let mut out = Tensor::zeros(self.entries[0].1.shape());
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.entries[picks[i % c]].1.data()[i];
        }
        Ok(Arc::new(out))
    }

    pub fn sample(&self, kind: SamplingKind, rng: &mut impl Rng) -> Result<Arc<Tensor>> {
        match kind {
            SamplingKind::Earliest => self.sample_earliest(),
            SamplingKind::TemporalNms => self.sample_temporal_nms(),
            SamplingKind::PatchShuffle => self.sample_patch_shuffle(rng),
            SamplingKind::ChannelShuffle => self.sample_channel_shuffle(rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f64) -> Tensor {
        Tensor::full(&[4, 4, 3], v)
    }

    fn filled(cap: usize, n: i64) -> FeatureMemory {
        let mut m = FeatureMemory::new(cap).unwrap();
        for t in 1..=n {
            m.update(constant(t as f64), t).unwrap();
        }
        m
    }

    #[test]
    fn ring_semantics() {
        assert_eq!(filled(4, 10).timestamps(), vec![7, 8, 9, 10]);
        assert_eq!(filled(3, 1).len(), 1);
        assert_eq!(filled(3, 4).timestamps(), vec![2, 3, 4]);
        assert!(FeatureMemory::new(0).is_err());
    }

    #[test]
    fn update_errors() {
        let mut m = filled(3, 2);
        assert!(matches!(m.update(constant(0.0), 2), Err(Error::Usage(_))));
        assert!(matches!(m.update(Tensor::zeros(&[2, 2, 3]), 3), Err(Error::Usage(_))));
    }

    #[test]
    fn earliest() {
        assert_eq!(filled(4, 10).sample_earliest().unwrap().data()[0], 7.0);
        assert_eq!(filled(4, 1).sample_earliest().unwrap().data()[0], 1.0);
        assert_eq!(filled(8, 5).sample_earliest().unwrap().data()[0], 1.0);
        let empty = FeatureMemory::for_block(2, 5).unwrap();
        assert!(matches!(empty.sample_earliest(), Err(Error::ColdStart { block: 5 })));
    }

    #[test]
    fn temporal_nms() {
        // whole-map norms 1, 5, 2
        let mut m = FeatureMemory::new(3).unwrap();
        for (t, norm) in [(1, 1.0), (2, 5.0), (3, 2.0)] {
            let mut f = Tensor::zeros(&[2, 2, 1]);
            f.data_mut()[3] = norm;
            m.update(f, t).unwrap();
        }
        assert_eq!(m.sample_temporal_nms().unwrap().norm_l2(), 5.0);

        let mut same = FeatureMemory::new(3).unwrap();
        let shared = Arc::new(constant(2.0));
        same.fill(shared.clone(), 0).unwrap();
        let picked = same.sample_temporal_nms().unwrap();
        assert!(Arc::ptr_eq(&picked, &same.entries[0].1));
    }

    #[test]
    fn fill_back_dates_timestamps() {
        let mut m = FeatureMemory::new(4).unwrap();
        m.fill(Arc::new(constant(1.0)), 0).unwrap();
        assert_eq!(m.timestamps(), vec![-3, -2, -1, 0]);
        assert_eq!(*m.sample_earliest().unwrap(), constant(1.0));
        assert_eq!(*m.sample_temporal_nms().unwrap(), constant(1.0));
        assert!(m.fill(Arc::new(constant(1.0)), 0).is_err());
    }

    #[test]
    fn temporal_groups() {
        assert_eq!(
            (0..4).map(|q| FeatureMemory::temporal_group(8, q)).collect::<Vec<_>>(),
            vec![0..2, 2..4, 4..6, 6..8]
        );
        assert_eq!(
            (0..4).map(|q| FeatureMemory::temporal_group(4, q)).collect::<Vec<_>>(),
            vec![0..1, 1..2, 2..3, 3..4]
        );
        for q in 0..4 {
            assert_eq!(FeatureMemory::temporal_group(1, q), 0..1);
        }
    }

    #[test]
    fn patch_shuffle_quadrants_come_from_distinct_groups() {
        let m = filled(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = m.sample_patch_shuffle(&mut rng).unwrap();
        // one entry per group, so quadrant q is entry q exactly
        for y in 0..4 {
            for x in 0..4 {
                let q = (y / 2) * 2 + x / 2;
                for c in 0..3 {
                    assert_eq!(out.at3(y, x, c), (q + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn single_entry_shuffles_are_identity() {
        let mut m = FeatureMemory::new(1).unwrap();
        let f = Tensor::from_fn(&[3, 5, 2], |i| i as f64 * 0.5);
        m.update(f.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(*m.sample_patch_shuffle(&mut rng).unwrap(), f);
        assert_eq!(*m.sample_channel_shuffle(&mut rng).unwrap(), f);
    }

    #[test]
    fn patch_shuffle_on_degenerate_maps() {
        let mut m = FeatureMemory::new(4).unwrap();
        for t in 1..=4 {
            m.update(Tensor::full(&[1, 1, 2], t as f64), t).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // a 1x1 map only has the top-left quadrant: group 0 = entry 1
        assert_eq!(m.sample_patch_shuffle(&mut rng).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn channel_shuffle_labeled_constants() {
        let mut m = FeatureMemory::new(3).unwrap();
        for t in 1..=3 {
            m.update(Tensor::full(&[3, 3, 16], t as f64), t).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = m.sample_channel_shuffle(&mut rng).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for c in 0..16 {
            let v = out.at3(0, 0, c);
            assert!([1.0, 2.0, 3.0].contains(&v));
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(out.at3(y, x, c), v);
                }
            }
            seen.insert(v as i64);
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn shuffles_are_seeded() {
        let mut m = FeatureMemory::new(8).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=8 {
            m.update(crate::numerics::trunc_normal(&[4, 4, 6], 1.0, &mut data_rng), t)
                .unwrap();
        }
        for kind in [SamplingKind::PatchShuffle, SamplingKind::ChannelShuffle] {
            let a = m.sample(kind, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
            let b = m.sample(kind, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn keeps_last_capacity_entries(cap in 1usize..9, n in 1i64..30) {
            let m = filled(cap, n);
            let lo = (n - cap as i64 + 1).max(1);
            prop_assert_eq!(m.timestamps(), (lo..=n).collect::<Vec<_>>());
            for (t, f) in m.entries() {
                prop_assert_eq!(f.data()[0], t as f64);
            }
            if n >= cap as i64 {
                prop_assert_eq!(m.sample_earliest().unwrap().data()[0], (n - cap as i64 + 1) as f64);
            }
        }

        #[test]
        fn samplers_only_copy_stored_values(
            n in 1usize..7, h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in 0u64..500
        ) {
            let mut m = FeatureMemory::new(n).unwrap();
            let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
            for t in 1..=n as i64 {
                m.update(crate::numerics::trunc_normal(&[h, w, c], 1.0, &mut data_rng), t).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for kind in SamplingKind::ALL {
                let out = m.sample(kind, &mut rng).unwrap();
                prop_assert_eq!(out.shape(), &[h, w, c][..]);
                for (i, v) in out.data().iter().enumerate() {
                    prop_assert!(m.entries().any(|(_, f)| f.data()[i] == *v));
                }
            }
        }
    }
}
