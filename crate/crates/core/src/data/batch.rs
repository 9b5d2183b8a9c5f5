use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Label;
use crate::dsp::{FeatureSequence, Waveform};

/// Splits a trial into consecutive, non-overlapping chunks of at most
/// `max_dur_s` seconds. Only the final chunk may be shorter.
pub fn slice_segments(wave: &Waveform, max_dur_s: f64) -> Vec<Waveform> {
    let chunk = ((max_dur_s * wave.sample_rate_hz as f64).round() as usize).max(1);
    wave.samples
        .chunks(chunk)
        .map(|c| Waveform { samples: c.to_vec(), sample_rate_hz: wave.sample_rate_hz })
        .collect()
}

/// Item indices grouped into batches after a shuffle keyed on `(seed, epoch)`.
pub fn batch_order(n_items: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Feature segments zero-padded to the longest member.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    /// `[B, n_max, dim]`, row-major.
    pub features: Vec<f32>,
    pub n_max: usize,
    pub dim: usize,
    pub valid_len: Vec<usize>,
    /// 0 = bona fide, 1 = spoof.
    pub labels: Vec<u8>,
    /// Indices into the item list the batch was drawn from.
    pub members: Vec<usize>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn make_batches(items: &[(FeatureSequence, Label)], batch_size: usize, seed: u64, epoch: u64) -> Vec<SegmentBatch> {
    batch_order(items.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|members| {
            let n_max = members.iter().map(|&i| items[i].0.n_frames()).max().unwrap_or(0);
            let dim = items[members[0]].0.dim();
            let mut features = vec![0.0f32; members.len() * n_max * dim];
            for (slot, &i) in members.iter().enumerate() {
                let src = items[i].0.data();
                features[slot * n_max * dim..slot * n_max * dim + src.len()].copy_from_slice(src);
            }
            SegmentBatch {
                features,
                n_max,
                dim,
                valid_len: members.iter().map(|&i| items[i].0.n_frames()).collect(),
                labels: members.iter().map(|&i| items[i].1.index() as u8).collect(),
                members,
            }
        })
        .collect()
}
