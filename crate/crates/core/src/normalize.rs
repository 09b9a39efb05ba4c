//! Fixed-shape spike tensors: adaptive temporal binning followed by uniform
//! grouping of channels into areas of equal width.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::spike_io::SpikeRecording;

/// Counts summed into `t_norm` equal segments of the raw time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Binned {
    pub t_norm: usize,
    pub c_raw: usize,
    /// `t_norm × c_raw`, time-major.
    pub counts: Vec<u32>,
    /// `t_norm + 1` raw-time boundaries; bin `t` covers `[edges[t], edges[t+1])`.
    pub bin_edges: Vec<usize>,
}

/// Bin edges `floor(t·t_raw/t_norm)` for `t = 0..=t_norm`.
pub fn bin_edges(t_raw: usize, t_norm: usize) -> Result<Vec<usize>> {
    if t_norm == 0 || t_raw < t_norm {
        return Err(Error::Resolution { t_raw, t_norm });
    }
    Ok((0..=t_norm).map(|t| t * t_raw / t_norm).collect())
}

pub fn bin_temporal(rec: &SpikeRecording, t_norm: usize) -> Result<Binned> {
    let edges = bin_edges(rec.t_raw, t_norm)?;
    let c = rec.c_raw;
    let mut counts = vec![0u32; t_norm * c];
    for t in 0..t_norm {
        let dst = &mut counts[t * c..(t + 1) * c];
        for tau in edges[t]..edges[t + 1] {
            for (d, &s) in dst.iter_mut().zip(&rec.counts[tau * c..(tau + 1) * c]) {
                *d += s;
            }
        }
    }
    Ok(Binned { t_norm, c_raw: c, counts, bin_edges: edges })
}

/// Averages a `[t_raw × dims]` target sequence over the same bins.
pub fn bin_sequence(values: &[f64], dims: usize, edges: &[usize]) -> Vec<f64> {
    let t_norm = edges.len() - 1;
    let mut out = vec![0.0; t_norm * dims];
    for t in 0..t_norm {
        let (lo, hi) = (edges[t], edges[t + 1]);
        for tau in lo..hi {
            for k in 0..dims {
                out[t * dims + k] += values[tau * dims + k];
            }
        }
        for k in 0..dims {
            out[t * dims + k] /= (hi - lo) as f64;
        }
    }
    out
}

/// How raw channel indices are ordered before contiguous grouping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelOrder {
    #[default]
    Contiguous,
    /// Seeded permutation of channel indices, then contiguous grouping.
    Shuffled { seed: u64 },
}

/// Sizes of `areas` contiguous groups over `c_raw` channels; the first
/// `c_raw % areas` groups take one extra channel.
pub fn group_sizes(c_raw: usize, areas: usize) -> Vec<usize> {
    let (base, extra) = (c_raw / areas, c_raw % areas);
    (0..areas).map(|g| base + usize::from(g < extra)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSpikes {
    pub t_norm: usize,
    pub areas: usize,
    pub c_norm: usize,
    /// `t_norm × areas × c_norm`, row-major.
    pub counts: Vec<u32>,
    /// Source channel of each `(area, slot)`; `None` marks padding.
    pub channel_map: Vec<Option<usize>>,
    pub bin_edges: Vec<usize>,
}

impl NormalizedSpikes {
    /// Counts as a `[t_norm, areas, c_norm]` array.
    pub fn values(&self) -> DenseArray {
        DenseArray::new(&[self.t_norm, self.areas, self.c_norm], self.counts.iter().map(|&c| c as f64).collect())
            .expect("consistent shape")
    }

    pub fn source(&self, area: usize, slot: usize) -> Option<usize> {
        self.channel_map[area * self.c_norm + slot]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Raw channels that survived truncation.
    pub fn mapped_channels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.channel_map.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

pub fn group_areas(binned: &Binned, areas: usize, c_norm: usize, order: ChannelOrder) -> Result<NormalizedSpikes> {
    if areas == 0 || c_norm == 0 {
        return Err(Error::Validation(format!("areas ({areas}) and area size ({c_norm}) must be positive")));
    }
    let mut channels: Vec<usize> = (0..binned.c_raw).collect();
    if let ChannelOrder::Shuffled { seed } = order {
        channels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut channel_map = vec![None; areas * c_norm];
    let mut start = 0;
    for (a, size) in group_sizes(binned.c_raw, areas).into_iter().enumerate() {
        for slot in 0..size.min(c_norm) {
            channel_map[a * c_norm + slot] = Some(channels[start + slot]);
        }
        start += size;
    }
    let t_norm = binned.t_norm;
    let mut counts = vec![0u32; t_norm * areas * c_norm];
    for t in 0..t_norm {
        let row = &binned.counts[t * binned.c_raw..(t + 1) * binned.c_raw];
        let dst = &mut counts[t * areas * c_norm..(t + 1) * areas * c_norm];
        for (d, src) in dst.iter_mut().zip(&channel_map) {
            if let Some(c) = src {
                *d = row[*c];
            }
        }
    }
    Ok(NormalizedSpikes { t_norm, areas, c_norm, counts, channel_map, bin_edges: binned.bin_edges.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormConfig {
    pub t_norm: usize,
    pub areas: usize,
    pub c_norm: usize,
    pub order: ChannelOrder,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { t_norm: 100, areas: 8, c_norm: 32, order: ChannelOrder::Contiguous }
    }
}

pub fn normalize(rec: &SpikeRecording, cfg: &NormConfig) -> Result<NormalizedSpikes> {
    group_areas(&bin_temporal(rec, cfg.t_norm)?, cfg.areas, cfg.c_norm, cfg.order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_io::MetadataRecord;

    fn rec(t_raw: usize, c_raw: usize, counts: Vec<u32>) -> SpikeRecording {
        SpikeRecording::new(t_raw, c_raw, counts, 100.0, MetadataRecord::new("a", "b", "c", "d", "e", "f"), None)
            .unwrap()
    }

    #[test]
    fn binning_sums_segments() {
        let b = bin_temporal(&rec(6, 1, vec![1, 0, 2, 0, 1, 1]), 2).unwrap();
        assert_eq!(b.counts, vec![3, 2]);
        assert_eq!(bin_edges(7, 2).unwrap(), vec![0, 3, 7]);
        let z = bin_temporal(&rec(10, 3, vec![0; 30]), 5).unwrap();
        assert!(z.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn too_few_raw_steps() {
        assert!(matches!(bin_temporal(&rec(3, 1, vec![0; 3]), 4), Err(Error::Resolution { .. })));
    }

    #[test]
    fn group_size_arithmetic() {
        assert_eq!(group_sizes(70, 8), vec![9, 9, 9, 9, 9, 9, 8, 8]);
        assert_eq!(group_sizes(256, 8), vec![32; 8]);
        assert_eq!(group_sizes(300, 8), vec![38, 38, 38, 38, 37, 37, 37, 37]);
    }

    #[test]
    fn padding_and_exact_fill() {
        let b = Binned { t_norm: 1, c_raw: 70, counts: vec![1; 70], bin_edges: vec![0, 1] };
        let n = group_areas(&b, 8, 32, ChannelOrder::Contiguous).unwrap();
        assert_eq!(n.source(0, 8), Some(8));
        assert_eq!(n.source(0, 9), None);
        assert_eq!(n.source(1, 0), Some(9));
        assert_eq!(n.source(7, 0), Some(62));
        assert_eq!(n.total(), 70);
        let b = Binned { t_norm: 1, c_raw: 256, counts: vec![1; 256], bin_edges: vec![0, 1] };
        let n = group_areas(&b, 8, 32, ChannelOrder::Contiguous).unwrap();
        assert!(n.channel_map.iter().all(Option::is_some));
    }

    #[test]
    fn truncation_keeps_lowest_channels() {
        let b = Binned { t_norm: 1, c_raw: 300, counts: (0..300).collect(), bin_edges: vec![0, 1] };
        let n = group_areas(&b, 8, 32, ChannelOrder::Contiguous).unwrap();
        assert_eq!(n.source(0, 31), Some(31));
        assert_eq!(n.source(1, 0), Some(38));
        let kept: u64 = n.mapped_channels().iter().map(|&c| c as u64).sum();
        assert_eq!(n.total(), kept);
    }

    #[test]
    fn sequences_average_per_bin() {
        let v = bin_sequence(&[1.0, 10.0, 3.0, 20.0, 5.0, 30.0], 2, &[0, 1, 3]);
        assert_eq!(v, vec![1.0, 10.0, 4.0, 25.0]);
    }
}
