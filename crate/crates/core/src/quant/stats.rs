//! Activation statistics gathered from calibration forward passes.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::tensor::{seeded_rng, Matrix};
use crate::wordpiece::{TokenSequence, Vocab};
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 2048;

/// Events per forward pass during calibration; partial statistics are
/// accumulated per chunk and merged in chunk order.
const CALIB_CHUNK: usize = 16;

/// Unlabeled, preprocessed events from one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub system_id: String,
    pub events: Vec<String>,
}

impl CalibrationSet {
    pub fn new(system_id: impl Into<String>, events: Vec<String>) -> Self {
        Self {
            system_id: system_id.into(),
            events,
        }
    }

    /// `size` events drawn without replacement (all of them when fewer).
    pub fn sample(system_id: impl Into<String>, texts: &[&str], size: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut picked = index::sample(&mut rng, texts.len(), size.min(texts.len())).into_vec();
        picked.sort_unstable();
        Self::new(system_id, picked.into_iter().map(|i| texts[i].to_string()).collect())
    }

    pub fn size(&self) -> usize {
        self.events.len()
    }
}

/// Streaming moments and range of one layer's input activations, plus a
/// histogram over a fixed `[hist_lo, hist_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub count: u64,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    pub hist_lo: f32,
    pub hist_hi: f32,
    pub histogram: Vec<u64>,
}

impl Default for ActivationStats {
    fn default() -> Self {
        Self {
            count: 0,
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            mean: 0.0,
            m2: 0.0,
            hist_lo: 0.0,
            hist_hi: 0.0,
            histogram: Vec::new(),
        }
    }
}

impl ActivationStats {
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    /// Adds a batch of values to the moments and range (not the histogram).
    pub fn observe_moments(&mut self, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        let n = values.len() as f64;
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v as f64;
        }
        let mean = sum / n;
        let m2 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        self.merge_moments(values.len() as u64, lo, hi, mean, m2);
    }

    fn merge_moments(&mut self, count: u64, lo: f32, hi: f32, mean: f64, m2: f64) {
        if count == 0 {
            return;
        }
        self.min = self.min.min(lo);
        self.max = self.max.max(hi);
        if self.count == 0 {
            self.count = count;
            self.mean = mean;
            self.m2 = m2;
            return;
        }
        let (na, nb) = (self.count as f64, count as f64);
        let n = na + nb;
        let delta = mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += m2 + delta * delta * na * nb / n;
        self.count += count;
    }

    /// Starts a histogram over the current `[min, max]`.
    pub fn reset_histogram(&mut self) {
        self.hist_lo = self.min;
        self.hist_hi = self.max;
        self.histogram = vec![0; HISTOGRAM_BINS];
    }

    pub fn observe_histogram(&mut self, values: &[f32]) {
        debug_assert_eq!(self.histogram.len(), HISTOGRAM_BINS);
        let width = (self.hist_hi - self.hist_lo) as f64;
        for &v in values {
            let bin = if width > 0.0 {
                (((v - self.hist_lo) as f64 / width) * HISTOGRAM_BINS as f64) as isize
            } else {
                0
            };
            self.histogram[bin.clamp(0, HISTOGRAM_BINS as isize - 1) as usize] += 1;
        }
    }

    /// Associative merge. Histograms must share their range.
    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if !other.histogram.is_empty() {
            if self.histogram.is_empty() {
                self.hist_lo = other.hist_lo;
                self.hist_hi = other.hist_hi;
                self.histogram = vec![0; other.histogram.len()];
            } else if self.hist_lo != other.hist_lo || self.hist_hi != other.hist_hi {
                return Err(Error::Calibration("cannot merge histograms with different ranges".into()));
            }
            for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
                *a += b;
            }
        }
        self.merge_moments(other.count, other.min, other.max, other.mean, other.m2);
        Ok(())
    }

    /// Histogram-estimated value below which `pct` percent of the mass lies,
    /// linearly interpolated inside the bin. `pct = 0` and `pct = 100`
    /// return the exact extrema.
    pub fn percentile(&self, pct: f64) -> f32 {
        if pct <= 0.0 {
            return self.min;
        }
        if pct >= 100.0 {
            return self.max;
        }
        let total: u64 = self.histogram.iter().sum();
        if total == 0 || self.hist_hi <= self.hist_lo {
            return if pct < 50.0 { self.min } else { self.max };
        }
        let target = pct / 100.0 * total as f64;
        let width = (self.hist_hi - self.hist_lo) as f64 / self.histogram.len() as f64;
        let mut cum = 0.0;
        for (b, &c) in self.histogram.iter().enumerate() {
            let next = cum + c as f64;
            if next >= target && c > 0 {
                let frac = (target - cum) / c as f64;
                let v = self.hist_lo as f64 + (b as f64 + frac) * width;
                return (v as f32).clamp(self.min, self.max);
            }
            cum = next;
        }
        self.max
    }
}

/// Per-layer statistics keyed by linear-layer name.
pub type LayerStats = BTreeMap<String, ActivationStats>;

fn merge_into(acc: &mut LayerStats, part: LayerStats) -> Result<()> {
    for (name, s) in part {
        acc.entry(name).or_default().merge(&s)?;
    }
    Ok(())
}

/// Runs the encoder over every calibration event and records the input
/// activations of every linear layer: one pass for moments and range, a
/// second for histograms over the final range.
pub fn collect_stats(encoder: &Encoder, vocab: &Vocab, calib: &CalibrationSet) -> Result<LayerStats> {
    if calib.events.is_empty() {
        return Err(Error::Calibration(format!(
            "calibration set for {:?} is empty",
            calib.system_id
        )));
    }
    let max_len = encoder.config.max_seq_len;
    let chunks: Vec<Vec<TokenSequence>> = calib
        .events
        .chunks(CALIB_CHUNK)
        .map(|c| c.iter().map(|t| vocab.tokenize(t, max_len)).collect())
        .collect();

    let partials = chunks
        .par_iter()
        .map(|seqs| {
            let mut part = LayerStats::new();
            encoder.forward_observed(seqs, &mut |name: &str, x: &Matrix| {
                part.entry(name.to_string()).or_default().observe_moments(&x.data);
            })?;
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = LayerStats::new();
    for p in partials {
        merge_into(&mut stats, p)?;
    }
    for s in stats.values_mut() {
        s.reset_histogram();
    }

    let template = &stats;
    let partials = chunks
        .par_iter()
        .map(|seqs| {
            let mut part: LayerStats = template
                .iter()
                .map(|(k, s)| {
                    let mut h = ActivationStats::default();
                    h.hist_lo = s.hist_lo;
                    h.hist_hi = s.hist_hi;
                    h.histogram = vec![0; HISTOGRAM_BINS];
                    (k.clone(), h)
                })
                .collect();
            encoder.forward_observed(seqs, &mut |name: &str, x: &Matrix| {
                if let Some(s) = part.get_mut(name) {
                    s.observe_histogram(&x.data);
                }
            })?;
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in partials {
        for (name, h) in p {
            let s = stats.get_mut(&name).expect("layer seen in first pass");
            for (a, b) in s.histogram.iter_mut().zip(&h.histogram) {
                *a += b;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normal_vec;
    use proptest::prelude::*;

    fn two_pass(values: &[f32]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = values.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn constant_activations() {
        let mut s = ActivationStats::default();
        s.observe_moments(&[2.5; 100]);
        s.observe_moments(&[2.5; 7]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.variance(), 0.0);
        assert_eq!((s.min, s.max), (2.5, 2.5));
    }

    #[test]
    fn merged_partitions_match_union() {
        let mut rng = seeded_rng(4);
        let a = normal_vec(&mut rng, 1000, 3.0);
        let b: Vec<f32> = normal_vec(&mut rng, 337, 0.5).iter().map(|v| v + 10.0).collect();
        let mut sa = ActivationStats::default();
        sa.observe_moments(&a);
        let mut sb = ActivationStats::default();
        sb.observe_moments(&b);
        sa.merge(&sb).unwrap();
        let union: Vec<f32> = a.iter().chain(&b).copied().collect();
        let (mean, var) = two_pass(&union);
        assert!(rel(sa.mean, mean) < 1e-6);
        assert!(rel(sa.variance(), var) < 1e-6);
        assert_eq!(sa.count, union.len() as u64);
    }

    #[test]
    fn histogram_mass_and_percentiles() {
        let values: Vec<f32> = (0..10_000).map(|i| i as f32 / 1000.0).collect();
        let mut s = ActivationStats::default();
        s.observe_moments(&values);
        s.reset_histogram();
        s.observe_histogram(&values);
        assert_eq!(s.histogram.iter().sum::<u64>(), s.count);
        assert_eq!(s.percentile(0.0), 0.0);
        assert_eq!(s.percentile(100.0), 9.999);
        assert!((s.percentile(50.0) - 5.0).abs() < 0.01);
        assert!((s.percentile(99.9) - 9.99).abs() < 0.01);
        assert!((s.percentile(0.1) - 0.01).abs() < 0.01);
    }

    #[test]
    fn histogram_merge_requires_same_range() {
        let mut a = ActivationStats::default();
        a.observe_moments(&[0.0, 1.0]);
        a.reset_histogram();
        let mut b = ActivationStats::default();
        b.observe_moments(&[0.0, 2.0]);
        b.reset_histogram();
        assert!(a.merge(&b).is_err());
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass(values in proptest::collection::vec(-1e3f32..1e3, 1..400), split in 0usize..400) {
            let split = split.min(values.len());
            let mut s = ActivationStats::default();
            s.observe_moments(&values[..split]);
            s.observe_moments(&values[split..]);
            let (mean, var) = two_pass(&values);
            prop_assert!((s.mean - mean).abs() <= 1e-4 * mean.abs().max(1.0));
            prop_assert!((s.variance() - var).abs() <= 1e-4 * var.max(1.0));
            prop_assert!(s.min as f64 <= s.mean + 1e-9 && s.mean <= s.max as f64 + 1e-9);
        }
    }
}
