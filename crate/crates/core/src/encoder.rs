//! BERT-style transformer encoder: embeddings, post-layer-norm encoder
//! blocks, and mean pooling of the final hidden layer.
//!
//! The same code serves the large FP32 teacher and the small student; a
//! student whose selected linear layers were quantized (see [`crate::quant`])
//! is still an [`Encoder`], only some of its [`Linear`]s carry INT8 weights.
//!
//! Sequences of a batch are packed row-wise into one matrix so every linear
//! layer is a single GEMM over all tokens of the batch; attention runs per
//! sequence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Container, Tensor, TensorData};
use crate::quant::{LayerQuant, QuantizedLinear};
use crate::tensor::{self, Matrix};
use crate::wordpiece::{TokenSequence, Vocab};
use crate::{Embedding, Error, Result};

fn default_ln_eps() -> f32 {
    1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f32,
}

impl EncoderConfig {
    /// BERT-base shape: 12 layers, 768 hidden, 12 heads.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            max_seq_len: 128,
            vocab_size,
            layer_norm_eps: 1e-12,
        }
    }

    /// TinyBERT (4-layer) shape: 4 layers, 312 hidden, 12 heads.
    pub fn tiny_bert(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 312,
            num_heads: 12,
            intermediate_size: 1200,
            max_seq_len: 128,
            vocab_size,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden_size == 0 || self.intermediate_size == 0 || self.vocab_size == 0 {
            return fail(format!("encoder dimensions must be positive: {self:?}"));
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len must be ≥ 2, got {}", self.max_seq_len));
        }
        Ok(())
    }

    /// Number of linear layers in the encoder blocks (6 per block).
    pub fn linear_layer_count(&self) -> usize {
        6 * self.num_layers
    }
}

/// The six linear layers of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinearRole {
    Query,
    Key,
    Value,
    AttentionOutput,
    FfnIn,
    FfnOut,
}

impl LinearRole {
    pub const ALL: [LinearRole; 6] = [
        LinearRole::Query,
        LinearRole::Key,
        LinearRole::Value,
        LinearRole::AttentionOutput,
        LinearRole::FfnIn,
        LinearRole::FfnOut,
    ];

    pub fn is_ffn(self) -> bool {
        matches!(self, LinearRole::FfnIn | LinearRole::FfnOut)
    }

    fn suffix(self) -> &'static str {
        match self {
            LinearRole::Query => "attention.self.query",
            LinearRole::Key => "attention.self.key",
            LinearRole::Value => "attention.self.value",
            LinearRole::AttentionOutput => "attention.output.dense",
            LinearRole::FfnIn => "intermediate.dense",
            LinearRole::FfnOut => "output.dense",
        }
    }

    /// `(out_dim, in_dim)` of the weight.
    pub fn shape(self, cfg: &EncoderConfig) -> (usize, usize) {
        let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
        match self {
            LinearRole::FfnIn => (i, h),
            LinearRole::FfnOut => (h, i),
            _ => (h, h),
        }
    }
}

/// Container name prefix of a block's linear layer.
pub fn linear_name(block: usize, role: LinearRole) -> String {
    format!("encoder.layer.{block}.{}", role.suffix())
}

const WORD_EMB: &str = "embeddings.word_embeddings.weight";
const POS_EMB: &str = "embeddings.position_embeddings.weight";
const EMB_LN: &str = "embeddings.LayerNorm";

fn attn_ln_name(block: usize) -> String {
    format!("encoder.layer.{block}.attention.output.LayerNorm")
}

fn out_ln_name(block: usize) -> String {
    format!("encoder.layer.{block}.output.LayerNorm")
}

#[derive(Debug, Clone)]
pub enum LinearWeights {
    /// `[out_dim, in_dim]` row-major.
    F32(Vec<f32>),
    Int8(QuantizedLinear),
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: LinearWeights,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        match &self.weights {
            LinearWeights::F32(w) => tensor::linear(x, w, &self.bias, self.out_dim),
            LinearWeights::Int8(q) => q.forward(x, &self.bias),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weights, LinearWeights::Int8(_))
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn f32_weights(&self) -> Option<&[f32]> {
        match &self.weights {
            LinearWeights::F32(w) => Some(w),
            LinearWeights::Int8(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub linears: [Linear; 6],
    pub attn_ln: LayerNorm,
    pub out_ln: LayerNorm,
}

impl Block {
    pub fn linear(&self, role: LinearRole) -> &Linear {
        &self.linears[role as usize]
    }
}

/// Sees the input of every linear layer during a forward pass.
pub trait ActivationObserver {
    fn observe(&mut self, layer: &str, input: &Matrix);
}

impl<F: FnMut(&str, &Matrix)> ActivationObserver for F {
    fn observe(&mut self, layer: &str, input: &Matrix) {
        self(layer, input)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub word_embeddings: Vec<f32>,
    pub position_embeddings: Vec<f32>,
    pub embedding_ln: LayerNorm,
    pub blocks: Vec<Block>,
}

impl Encoder {
    /// Weights from N(0, 0.02²); biases zero, layer-norm scales one.
    pub fn random_init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        const STD: f32 = 0.02;
        let mut rng = tensor::seeded_rng(seed);
        let h = config.hidden_size;
        let ln = || LayerNorm {
            gamma: vec![1.0; h],
            beta: vec![0.0; h],
        };
        let word_embeddings = tensor::normal_vec(&mut rng, config.vocab_size * h, STD);
        let position_embeddings = tensor::normal_vec(&mut rng, config.max_seq_len * h, STD);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for b in 0..config.num_layers {
            let linears = LinearRole::ALL.map(|role| {
                let (out_dim, in_dim) = role.shape(&config);
                Linear {
                    name: linear_name(b, role),
                    in_dim,
                    out_dim,
                    weights: LinearWeights::F32(tensor::normal_vec(&mut rng, out_dim * in_dim, STD)),
                    bias: vec![0.0; out_dim],
                }
            });
            blocks.push(Block {
                linears,
                attn_ln: ln(),
                out_ln: ln(),
            });
        }
        Ok(Self {
            config,
            word_embeddings,
            position_embeddings,
            embedding_ln: ln(),
            blocks,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.blocks.iter().flat_map(|b| b.linears.iter())
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.linears.iter_mut())
            .find(|l| l.name == name)
    }

    /// Named tensors; quantized linears are stored with INT8 weights.
    pub fn to_container(&self) -> Container {
        let cfg = &self.config;
        let h = cfg.hidden_size;
        let mut c = Container::new();
        c.insert(WORD_EMB, Tensor::f32(vec![cfg.vocab_size, h], self.word_embeddings.clone()));
        c.insert(POS_EMB, Tensor::f32(vec![cfg.max_seq_len, h], self.position_embeddings.clone()));
        insert_ln(&mut c, EMB_LN, &self.embedding_ln);
        for (b, block) in self.blocks.iter().enumerate() {
            for lin in &block.linears {
                let dims = vec![lin.out_dim, lin.in_dim];
                let w = match &lin.weights {
                    LinearWeights::F32(w) => Tensor::f32(dims, w.clone()),
                    LinearWeights::Int8(q) => Tensor::i8(dims, q.weights_i8()),
                };
                c.insert(format!("{}.weight", lin.name), w);
                c.insert(format!("{}.bias", lin.name), Tensor::f32(vec![lin.out_dim], lin.bias.clone()));
            }
            insert_ln(&mut c, &attn_ln_name(b), &block.attn_ln);
            insert_ln(&mut c, &out_ln_name(b), &block.out_ln);
        }
        c
    }

    /// Rebuilds an encoder. INT8 weight tensors need an entry in `quant`.
    pub fn from_container(
        config: EncoderConfig,
        c: &Container,
        quant: &BTreeMap<String, LayerQuant>,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let get = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
            let v = c.f32_tensor(name, dims).map_err(|e| match e {
                Error::Contract(m) => Error::Model(m),
                other => other,
            })?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("tensor {name:?} has non-finite values")));
            }
            Ok(v.to_vec())
        };
        let get_ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: get(&format!("{prefix}.weight"), &[h])?,
                beta: get(&format!("{prefix}.bias"), &[h])?,
            })
        };
        let word_embeddings = get(WORD_EMB, &[config.vocab_size, h])?;
        let position_embeddings = get(POS_EMB, &[config.max_seq_len, h])?;
        let embedding_ln = get_ln(EMB_LN)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for b in 0..config.num_layers {
            let mut linears = Vec::with_capacity(6);
            for role in LinearRole::ALL {
                let name = linear_name(b, role);
                let (out_dim, in_dim) = role.shape(&config);
                let wname = format!("{name}.weight");
                let t = c
                    .get(&wname)
                    .ok_or_else(|| Error::Format(format!("missing tensor {wname:?}")))?;
                if t.dims != [out_dim, in_dim] {
                    return Err(Error::Model(format!(
                        "tensor {wname:?} has shape {:?}, expected {:?}",
                        t.dims,
                        [out_dim, in_dim]
                    )));
                }
                let weights = match &t.data {
                    TensorData::F32(_) => LinearWeights::F32(get(&wname, &[out_dim, in_dim])?),
                    TensorData::I8(w) => {
                        let q = quant.get(&name).ok_or_else(|| {
                            Error::Format(format!("INT8 tensor {wname:?} has no quantization parameters"))
                        })?;
                        LinearWeights::Int8(QuantizedLinear::new(w.clone(), out_dim, in_dim, *q)?)
                    }
                };
                linears.push(Linear {
                    bias: get(&format!("{name}.bias"), &[out_dim])?,
                    name,
                    in_dim,
                    out_dim,
                    weights,
                });
            }
            blocks.push(Block {
                linears: linears.try_into().expect("six linears per block"),
                attn_ln: get_ln(&attn_ln_name(b))?,
                out_ln: get_ln(&out_ln_name(b))?,
            });
        }
        Ok(Self {
            config,
            word_embeddings,
            position_embeddings,
            embedding_ln,
            blocks,
        })
    }

    /// Writes `path` (container) and its JSON sidecar with the config.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container().save(path)?;
        container::write_json(container::sidecar_path(path), &self.config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: EncoderConfig = container::read_json(container::sidecar_path(path))?;
        Self::from_container(config, &Container::load(path)?, &BTreeMap::new())
    }

    /// Final hidden states, one `len × H` matrix per sequence.
    pub fn forward(&self, seqs: &[TokenSequence]) -> Result<Vec<Matrix>> {
        self.forward_observed(seqs, &mut |_: &str, _: &Matrix| {})
    }

    pub fn forward_observed(
        &self,
        seqs: &[TokenSequence],
        observer: &mut dyn ActivationObserver,
    ) -> Result<Vec<Matrix>> {
        let cfg = &self.config;
        let h = cfg.hidden_size;
        let total: usize = seqs.iter().map(TokenSequence::len).sum();
        for s in seqs {
            if s.len() > cfg.max_seq_len {
                return Err(Error::Model(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    s.len(),
                    cfg.max_seq_len
                )));
            }
            if s.mask.len() != s.ids.len() {
                return Err(Error::Model("attention mask length differs from ids".into()));
            }
            if let Some(bad) = s.ids.iter().find(|id| **id as usize >= cfg.vocab_size) {
                return Err(Error::Model(format!("token id {bad} ≥ vocab_size {}", cfg.vocab_size)));
            }
        }

        let mut x = Matrix::zeros(total, h);
        let mut r = 0;
        for s in seqs {
            for (p, id) in s.ids.iter().enumerate() {
                let w = &self.word_embeddings[*id as usize * h..(*id as usize + 1) * h];
                let pe = &self.position_embeddings[p * h..(p + 1) * h];
                for ((o, a), b) in x.row_mut(r).iter_mut().zip(w).zip(pe) {
                    *o = a + b;
                }
                r += 1;
            }
        }
        let eps = cfg.layer_norm_eps;
        tensor::layer_norm(&mut x, &self.embedding_ln.gamma, &self.embedding_ln.beta, eps);

        for block in &self.blocks {
            let proj = |role: LinearRole, input: &Matrix, obs: &mut dyn ActivationObserver| {
                let lin = block.linear(role);
                obs.observe(&lin.name, input);
                lin.forward(input)
            };
            let q = proj(LinearRole::Query, &x, observer);
            let k = proj(LinearRole::Key, &x, observer);
            let v = proj(LinearRole::Value, &x, observer);
            let mut ctx = Matrix::zeros(total, h);
            let mut off = 0;
            for s in seqs {
                self_attention(&q, &k, &v, off, &s.mask, cfg.num_heads, &mut ctx, None);
                off += s.len();
            }
            let mut a = proj(LinearRole::AttentionOutput, &ctx, observer);
            a.add_assign(&x);
            tensor::layer_norm(&mut a, &block.attn_ln.gamma, &block.attn_ln.beta, eps);
            x = a;

            let mut inter = proj(LinearRole::FfnIn, &x, observer);
            tensor::gelu_inplace(&mut inter);
            let mut o = proj(LinearRole::FfnOut, &inter, observer);
            o.add_assign(&x);
            tensor::layer_norm(&mut o, &block.out_ln.gamma, &block.out_ln.beta, eps);
            x = o;
        }

        let mut out = Vec::with_capacity(seqs.len());
        let mut off = 0;
        for s in seqs {
            out.push(x.slice_rows(off, off + s.len()));
            off += s.len();
        }
        Ok(out)
    }

    /// Tokenizes, encodes and mean-pools a batch of preprocessed texts.
    pub fn embed_batch(&self, vocab: &Vocab, texts: &[&str]) -> Result<Vec<Embedding>> {
        let seqs: Vec<TokenSequence> = texts
            .iter()
            .map(|t| vocab.tokenize(t, self.config.max_seq_len))
            .collect();
        let hidden = self.forward(&seqs)?;
        Ok(hidden
            .iter()
            .zip(&seqs)
            .map(|(hs, s)| mean_pool(hs, s, vocab))
            .collect())
    }
}

fn insert_ln(c: &mut Container, prefix: &str, ln: &LayerNorm) {
    c.insert(format!("{prefix}.weight"), Tensor::f32(vec![ln.gamma.len()], ln.gamma.clone()));
    c.insert(format!("{prefix}.bias"), Tensor::f32(vec![ln.beta.len()], ln.beta.clone()));
}

/// Multi-head scaled dot-product attention for the sequence occupying rows
/// `offset..offset + mask.len()`; writes context rows into `ctx`. Keys whose
/// mask is `false` get probability exactly zero. When `probs` is given, the
/// per-head probability matrices (`len × len`) are appended to it.
pub fn self_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    offset: usize,
    mask: &[bool],
    num_heads: usize,
    ctx: &mut Matrix,
    mut probs: Option<&mut Vec<Matrix>>,
) {
    let n = mask.len();
    let h = q.cols;
    let dh = h / num_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let valid: Vec<usize> = (0..n).filter(|j| mask[*j]).collect();
    let mut scores = vec![0.0f32; valid.len()];
    for head in 0..num_heads {
        let cols = head * dh..(head + 1) * dh;
        let mut pm = probs.as_ref().map(|_| Matrix::zeros(n, n));
        for i in 0..n {
            let qi = &q.row(offset + i)[cols.clone()];
            for (s, &j) in scores.iter_mut().zip(&valid) {
                *s = tensor::dot(qi, &k.row(offset + j)[cols.clone()]) * scale;
            }
            if scores.is_empty() {
                continue;
            }
            tensor::softmax_inplace(&mut scores);
            let out = &mut ctx.row_mut(offset + i)[cols.clone()];
            for (&p, &j) in scores.iter().zip(&valid) {
                let vj = &v.row(offset + j)[cols.clone()];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            if let Some(pm) = pm.as_mut() {
                for (&p, &j) in scores.iter().zip(&valid) {
                    pm.row_mut(i)[j] = p;
                }
            }
        }
        if let (Some(all), Some(pm)) = (probs.as_deref_mut(), pm) {
            all.push(pm);
        }
    }
}

/// Mean of the final hidden states over non-special, non-padding positions;
/// falls back to the `[CLS]` state when there are none.
pub fn mean_pool(hidden: &Matrix, seq: &TokenSequence, vocab: &Vocab) -> Embedding {
    let mut acc = vec![0.0f32; hidden.cols];
    let mut count = 0usize;
    for (p, (&id, &m)) in seq.ids.iter().zip(&seq.mask).enumerate() {
        if !m || vocab.is_special(id) {
            continue;
        }
        for (a, x) in acc.iter_mut().zip(hidden.row(p)) {
            *a += x;
        }
        count += 1;
    }
    if count == 0 {
        let cls = seq.ids.iter().position(|id| *id == vocab.cls_id).unwrap_or(0);
        return hidden.row(cls).to_vec();
    }
    let inv = 1.0 / count as f32;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}
