//! Detection metrics, timing harnesses and embedding-space similarity.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::detector::{predict_events, EventPrediction, RnnParams, Window};
use crate::tensor::seeded_rng;
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts over predictions that carry a label.
    pub fn from_predictions(preds: &[EventPrediction]) -> Self {
        let mut c = Self::default();
        for p in preds {
            if let Some(y) = p.label {
                c.add(p.decision, y);
            }
        }
        c
    }
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionMetrics {
    /// F1 from precision and recall; 0 when both are 0.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision_recall_f1(c: &ConfusionCounts) -> DetectionMetrics {
    DetectionMetrics::from_precision_recall(ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub method: String,
    pub system: String,
    /// Median over the timed runs.
    pub total_seconds: f64,
    pub avg_ms_per_event: f64,
    pub event_count: usize,
    pub cpu_core_budget: usize,
    pub warmup_runs: usize,
    pub runs_seconds: Vec<f64>,
    /// Set when there was nothing to time.
    pub degenerate: bool,
}

impl TimingReport {
    pub fn new(method: &str, system: &str, total_seconds: f64, event_count: usize, settings: &TimingSettings) -> Self {
        Self {
            method: method.to_string(),
            system: system.to_string(),
            total_seconds,
            avg_ms_per_event: if event_count == 0 {
                0.0
            } else {
                1000.0 * total_seconds / event_count as f64
            },
            event_count,
            cpu_core_budget: settings.cores,
            warmup_runs: settings.warmup,
            runs_seconds: Vec::new(),
            degenerate: event_count == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingSettings {
    pub cores: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Warmup runs use at most this many leading items.
    pub warmup_items: usize,
}

impl Default for TimingSettings {
    fn default() -> Self {
        Self {
            cores: 1,
            warmup: 2,
            repeats: 3,
            warmup_items: 256,
        }
    }
}

impl TimingSettings {
    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 || self.repeats == 0 {
            return Err(Error::Config("timing cores and repeats must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `run(len)` `warmup` times on a prefix and `repeats` times on the full
/// input inside a pool of `cores` workers; returns per-run wall-clock seconds.
fn timed_runs<F>(settings: &TimingSettings, len: usize, run: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<()> + Sync,
{
    settings.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.cores)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {}-worker pool: {e}", settings.cores)))?;
    pool.install(|| {
        for _ in 0..settings.warmup {
            run(len.min(settings.warmup_items.max(1)))?;
        }
        let mut secs = Vec::with_capacity(settings.repeats);
        for _ in 0..settings.repeats {
            let t0 = Instant::now();
            run(len)?;
            secs.push(t0.elapsed().as_secs_f64());
        }
        Ok(secs)
    })
}

/// Times embedding generation for `events` with `method`.
pub fn time_embedding_generation<F>(
    method_name: &str,
    system: &str,
    method: F,
    events: &[&str],
    settings: &TimingSettings,
) -> Result<TimingReport>
where
    F: Fn(&[&str]) -> Result<Vec<Embedding>> + Sync,
{
    if events.is_empty() {
        return Err(Error::Contract("cannot time embedding generation on zero events".into()));
    }
    let runs = timed_runs(settings, events.len(), |n| {
        let out = method(&events[..n])?;
        std::hint::black_box(out);
        Ok(())
    })?;
    let mut report = TimingReport::new(method_name, system, median(&runs), events.len(), settings);
    report.runs_seconds = runs;
    Ok(report)
}

/// Times per-event prediction over `windows`.
pub fn time_detection(
    method_name: &str,
    system: &str,
    params: &RnnParams,
    windows: &[Window],
    settings: &TimingSettings,
) -> Result<TimingReport> {
    let events: usize = windows.iter().map(Window::real_events).sum();
    if windows.is_empty() {
        settings.validate()?;
        return Ok(TimingReport::new(method_name, system, 0.0, 0, settings));
    }
    let runs = timed_runs(settings, windows.len(), |n| {
        std::hint::black_box(predict_events(params, &windows[..n], 0.5)?);
        Ok(())
    })?;
    let mut report = TimingReport::new(method_name, system, median(&runs), events, settings);
    report.runs_seconds = runs;
    Ok(report)
}

/// Cosine similarity; 0 if either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Mean cosine similarity of paired embeddings.
pub fn cosine_mean(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} vs {} embeddings", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("cosine mean of zero pairs".into()));
    }
    if let Some((x, y)) = a.iter().zip(b).find(|(x, y)| x.len() != y.len()) {
        return Err(Error::Contract(format!("dimension {} vs {}", x.len(), y.len())));
    }
    let sims: Vec<f64> = a.par_iter().zip(b).map(|(x, y)| cosine(x, y)).collect();
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub t_statistic: f64,
    /// Two-sided, from a standard normal approximation of `t`.
    pub approx_p_value: f64,
    pub n: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} vs {} observations", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Contract(format!("Spearman correlation needs n ≥ 3, got {n}")));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::UndefinedCorrelation("an input has constant ranks".into()))?;
    let t = if rho.abs() >= 1.0 {
        rho.signum() * f64::INFINITY
    } else {
        rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt()
    };
    let normal = Normal::standard();
    let p = if t.is_infinite() {
        0.0
    } else {
        (2.0 * (1.0 - normal.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Spearman {
        rho,
        t_statistic: t,
        approx_p_value: p,
        n,
    })
}

/// How the rank correlation of two embedding sets is constructed.
pub const PAIRWISE_CONSTRUCTION: &str = "spearman over pairwise cosine similarities of sampled event pairs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Absent when the two sets have different dimensions.
    pub cosine_mean: Option<f64>,
    pub spearman_rho: f64,
    pub t_statistic: f64,
    pub approx_p_value: f64,
    pub sampled_pairs: usize,
    pub construction: String,
    pub p_value_method: String,
}

/// Sampled distinct index pairs `(i, j)`, `i < j`; every pair when there are
/// at most `max_pairs`.
fn sample_pairs(n: usize, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= max_pairs {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut rng = seeded_rng(seed);
    (0..max_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

/// Compares two embeddings of the same events: mean paired cosine and the
/// rank correlation between their pairwise-similarity structures.
pub fn similarity_report(a: &[Embedding], b: &[Embedding], max_pairs: usize, seed: u64) -> Result<SimilarityReport> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} vs {} embeddings", a.len(), b.len())));
    }
    let same_dim = a.iter().zip(b).all(|(x, y)| x.len() == y.len());
    let cos = if same_dim { Some(cosine_mean(a, b)?) } else { None };
    let pairs = sample_pairs(a.len(), max_pairs, seed);
    let (sa, sb): (Vec<f64>, Vec<f64>) = pairs
        .par_iter()
        .map(|(i, j)| (cosine(&a[*i], &a[*j]), cosine(&b[*i], &b[*j])))
        .unzip();
    let s = spearman_rho(&sa, &sb)?;
    Ok(SimilarityReport {
        cosine_mean: cos,
        spearman_rho: s.rho,
        t_statistic: s.t_statistic,
        approx_p_value: s.approx_p_value,
        sampled_pairs: pairs.len(),
        construction: PAIRWISE_CONSTRUCTION.into(),
        p_value_method: "normal approximation of the t statistic".into(),
    })
}

/// One detector/representation effectiveness row, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub representation: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsRow {
    pub fn new(model: &str, representation: &str, m: &DetectionMetrics) -> Self {
        let pct = |v: f64| (v * 10_000.0).round() / 100.0;
        Self {
            model: model.into(),
            representation: representation.into(),
            precision: pct(m.precision),
            recall: pct(m.recall),
            f1: pct(m.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub system: String,
    pub cores: usize,
    pub total_s: f64,
    pub avg_ms: f64,
}

impl From<&TimingReport> for TimingRow {
    fn from(r: &TimingReport) -> Self {
        Self {
            method: r.method.clone(),
            system: r.system.clone(),
            cores: r.cpu_core_budget,
            total_s: r.total_seconds,
            avg_ms: r.avg_ms_per_event,
        }
    }
}

/// Header row plus one serialized record per row.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
