//! Post-training static quantization of selected encoder linear layers.
//!
//! Calibration runs the FP32 encoder over a small per-system set of events
//! and records input-activation statistics for every linear layer. A fixed
//! fraction of the linear layers (feed-forward layers first) then gets
//! symmetric INT8 weights and asymmetric UINT8 input-activation parameters
//! clipped at a histogram percentile. Everything else, embeddings and
//! layer norms included, stays FP32; activations are quantized only
//! transiently at the input of a selected matmul.
//!
//! All rounding is round-half-to-even.

mod kernel;
pub mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use kernel::QuantizedLinear;
pub use stats::{collect_stats, ActivationStats, CalibrationSet, LayerStats};

use crate::container::{self, Container};
use crate::encoder::{linear_name, Encoder, EncoderConfig, LinearRole, LinearWeights};
use crate::wordpiece::TokenSequence;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    SymmetricInt8Weights,
    AsymmetricUint8Activations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub scheme: QuantScheme,
}

impl QuantParams {
    pub fn quantize(&self, x: f32) -> i32 {
        match self.scheme {
            QuantScheme::SymmetricInt8Weights => quantize_weight(x, self.scale) as i32,
            QuantScheme::AsymmetricUint8Activations => quantize_activation(x, self.scale, self.zero_point) as i32,
        }
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }
}

/// `x / scale` rounded half to even, decided on the exact quotient. The f32
/// quotient can only mislead when it lands exactly on a half-integer that
/// the true quotient merely approaches; that case is settled in f64, where
/// `y · scale` is exact.
#[inline]
fn round_quotient(x: f32, scale: f32) -> f32 {
    debug_assert!(scale > 0.0);
    let y = x / scale;
    if (y - y.trunc()).abs() != 0.5 {
        return y.round_ties_even();
    }
    let residual = x as f64 - y as f64 * scale as f64;
    if residual > 0.0 {
        y + 0.5
    } else if residual < 0.0 {
        y - 0.5
    } else {
        y.round_ties_even()
    }
}

#[inline]
pub fn quantize_weight(w: f32, scale: f32) -> i8 {
    round_quotient(w, scale).clamp(-127.0, 127.0) as i8
}

#[inline]
pub fn quantize_activation(x: f32, scale: f32, zero_point: i32) -> u8 {
    (round_quotient(x, scale) + zero_point as f32).clamp(0.0, 255.0) as u8
}

/// Per-layer parameters carried in the quantization manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub w_scale: f32,
    pub a_scale: f32,
    pub a_zp: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    /// Fraction of encoder linear layers to quantize.
    pub fraction: f64,
    /// Activation ranges are clipped to the `[p, 100 − p]` percentiles.
    pub clip_percentile: f64,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            clip_percentile: 0.1,
        }
    }
}

/// Symmetric weight parameters: `scale = max|w| / 127`.
pub fn weight_params(weights: &[f32]) -> QuantParams {
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    QuantParams {
        scale: if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 },
        zero_point: 0,
        scheme: QuantScheme::SymmetricInt8Weights,
    }
}

/// Asymmetric UINT8 parameters from a clipped range that is widened to
/// contain zero.
pub fn activation_params_from_range(layer: &str, lo: f32, hi: f32) -> Result<QuantParams> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateRange {
            layer: layer.to_string(),
            lo,
            hi,
        });
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let scale = (hi - lo) / 255.0;
    let zero_point = (-lo / scale).round_ties_even().clamp(0.0, 255.0) as i32;
    Ok(QuantParams {
        scale,
        zero_point,
        scheme: QuantScheme::AsymmetricUint8Activations,
    })
}

pub fn compute_quant_params(layer: &str, stats: &ActivationStats, policy: &QuantPolicy) -> Result<QuantParams> {
    if stats.count == 0 {
        return Err(Error::Calibration(format!("no observations for {layer}")));
    }
    let lo = stats.percentile(policy.clip_percentile);
    let hi = stats.percentile(100.0 - policy.clip_percentile);
    activation_params_from_range(layer, lo, hi)
}

/// `⌈fraction · linear_count⌉` layer names: feed-forward layers ranked by
/// parameter count then depth (deepest first), attention projections after
/// those run out.
pub fn select_layers(cfg: &EncoderConfig, fraction: f64) -> Vec<String> {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must lie in (0, 1)");
    let total = cfg.linear_layer_count();
    let want = ((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut candidates: Vec<(bool, usize, usize, LinearRole)> = Vec::with_capacity(total);
    for block in 0..cfg.num_layers {
        for role in LinearRole::ALL {
            let (o, i) = role.shape(cfg);
            candidates.push((role.is_ffn(), o * i + o, block, role));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.cmp(&a.1))
            .then(b.2.cmp(&a.2))
            .then(a.3.cmp(&b.3))
    });
    candidates
        .into_iter()
        .take(want.min(total))
        .map(|(_, _, block, role)| linear_name(block, role))
        .collect()
}

/// A student encoder whose selected linear layers run in INT8.
#[derive(Debug, Clone)]
pub struct QuantizedEncoder {
    pub encoder: Encoder,
    pub selection: Vec<String>,
    /// Selected layers left in FP32 because their calibrated range was degenerate.
    pub excluded: Vec<String>,
    pub per_layer: BTreeMap<String, LayerQuant>,
    pub clip_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub selection: Vec<String>,
    pub per_layer: BTreeMap<String, LayerQuant>,
    pub clip_percentile: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

pub fn quantize_encoder(
    encoder: &Encoder,
    stats: &LayerStats,
    selection: &[String],
    policy: &QuantPolicy,
) -> Result<QuantizedEncoder> {
    let mut out = encoder.clone();
    let mut per_layer = BTreeMap::new();
    let mut applied = Vec::new();
    let mut excluded = Vec::new();
    for name in selection {
        let s = stats
            .get(name)
            .ok_or_else(|| Error::Calibration(format!("no activation statistics for selected layer {name}")))?;
        let lin = out
            .linear_mut(name)
            .ok_or_else(|| Error::Model(format!("encoder has no linear layer {name}")))?;
        let act = match compute_quant_params(name, s, policy) {
            Ok(p) => p,
            Err(e @ Error::DegenerateRange { .. }) => {
                log::warn!("{e}; layer stays FP32");
                excluded.push(name.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let LinearWeights::F32(w) = &lin.weights else {
            return Err(Error::Model(format!("layer {name} is already quantized")));
        };
        let wp = weight_params(w);
        let qw: Vec<i8> = w.iter().map(|x| quantize_weight(*x, wp.scale)).collect();
        let lq = LayerQuant {
            w_scale: wp.scale,
            a_scale: act.scale,
            a_zp: act.zero_point,
        };
        lin.weights = LinearWeights::Int8(QuantizedLinear::new(qw, lin.out_dim, lin.in_dim, lq)?);
        per_layer.insert(name.clone(), lq);
        applied.push(name.clone());
    }
    Ok(QuantizedEncoder {
        encoder: out,
        selection: applied,
        excluded,
        per_layer,
        clip_percentile: policy.clip_percentile,
    })
}

/// Quantization manifest path: `sysbe.lrep` -> `sysbe.quant.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("quant.json")
}

impl QuantizedEncoder {
    /// An encoder with no quantized layers; behaves exactly like the FP32 one.
    pub fn unquantized(encoder: Encoder) -> Self {
        Self {
            encoder,
            selection: Vec::new(),
            excluded: Vec::new(),
            per_layer: BTreeMap::new(),
            clip_percentile: 0.0,
        }
    }

    pub fn manifest(&self) -> QuantManifest {
        QuantManifest {
            selection: self.selection.clone(),
            per_layer: self.per_layer.clone(),
            clip_percentile: self.clip_percentile,
            excluded: self.excluded.clone(),
        }
    }

    pub fn forward(&self, seqs: &[TokenSequence]) -> Result<Vec<Matrix>> {
        self.encoder.forward(seqs)
    }

    /// Container with INT8 tensors, config sidecar, and quantization manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.encoder.save(path)?;
        container::write_json(manifest_path(path), &self.manifest())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: EncoderConfig = container::read_json(container::sidecar_path(path))?;
        let manifest: QuantManifest = container::read_json(manifest_path(path))?;
        let encoder = Encoder::from_container(config, &Container::load(path)?, &manifest.per_layer)?;
        for name in &manifest.selection {
            let quantized = encoder.linears().any(|l| &l.name == name && l.is_quantized());
            if !quantized {
                return Err(Error::Format(format!("manifest selects {name} but its weights are not INT8")));
            }
        }
        Ok(Self {
            encoder,
            selection: manifest.selection,
            excluded: manifest.excluded,
            per_layer: manifest.per_layer,
            clip_percentile: manifest.clip_percentile,
        })
    }
}
