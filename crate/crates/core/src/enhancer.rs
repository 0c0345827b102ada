//! Residual low-rank enhancer mapping student embeddings into the teacher's
//! embedding space: `h' = pad(h_S) + B·(A·h_S)`.
//!
//! `pad` zero-extends `h_S` from `d_S` to `d_T`. Training minimizes the mean
//! squared L2 distance to frozen teacher embeddings by plain gradient
//! descent; the student and teacher are never modified.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Container, Tensor};
use crate::tensor::{self, normal_vec, seeded_rng, Matrix};
use crate::{Embedding, Error, Result};

pub const TENSOR_A: &str = "crosys.A";
pub const TENSOR_B: &str = "crosys.B";

/// Rows per GEMM and per parallel task; fixed so results never depend on
/// the worker count.
const ROW_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams {
    /// `r × d_S`, row-major.
    pub a: Vec<f32>,
    /// `d_T × r`, row-major.
    pub b: Vec<f32>,
    pub r: usize,
    pub d_s: usize,
    pub d_t: usize,
}

/// Gradients with the same layout as [`EnhancerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// One (student, teacher) embedding pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub student: Embedding,
    pub teacher: Embedding,
}

/// Cross-system training data: per-system samples encoded by both models.
#[derive(Debug, Clone, Default)]
pub struct CrossSystemSet {
    pub systems: Vec<String>,
    pub samples_per_system: usize,
    pub pairs: Vec<Pair>,
}

impl CrossSystemSet {
    /// Encodes every system's events with both models.
    pub fn build<S, T>(
        systems: &[(String, Vec<String>)],
        mut student: S,
        mut teacher: T,
    ) -> Result<Self>
    where
        S: FnMut(&[&str]) -> Result<Vec<Embedding>>,
        T: FnMut(&[&str]) -> Result<Vec<Embedding>>,
    {
        let mut pairs = Vec::new();
        let mut samples = 0;
        for (_, events) in systems {
            let refs: Vec<&str> = events.iter().map(String::as_str).collect();
            let hs = student(&refs)?;
            let ht = teacher(&refs)?;
            if hs.len() != refs.len() || ht.len() != refs.len() {
                return Err(Error::Contract("encoder returned a different number of embeddings".into()));
            }
            samples = samples.max(refs.len());
            pairs.extend(hs.into_iter().zip(ht).map(|(student, teacher)| Pair { student, teacher }));
        }
        Ok(Self {
            systems: systems.iter().map(|(s, _)| s.clone()).collect(),
            samples_per_system: samples,
            pairs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum UpdateGranularity {
    /// One update per epoch from the loss over the whole set.
    FullBatch,
    /// Sequential shuffled mini-batches, one update each.
    MiniBatch { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub granularity: UpdateGranularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            learning_rate: 1e-3,
            epochs: 80,
            seed: 42,
            granularity: UpdateGranularity::FullBatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("enhancer learning_rate {} must be ≥ 0", self.learning_rate)));
        }
        if self.rank == 0 {
            return Err(Error::Config("enhancer rank must be ≥ 1".into()));
        }
        if let UpdateGranularity::MiniBatch { size: 0 } = self.granularity {
            return Err(Error::Config("enhancer mini-batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// JSON manifest stored beside the weight container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancerManifest {
    pub r: usize,
    #[serde(rename = "d_S")]
    pub d_s: usize,
    #[serde(rename = "d_T")]
    pub d_t: usize,
    pub trained_on: Vec<String>,
}

impl EnhancerParams {
    pub fn zeros(r: usize, d_s: usize, d_t: usize) -> Self {
        Self {
            a: vec![0.0; r * d_s],
            b: vec![0.0; d_t * r],
            r,
            d_s,
            d_t,
        }
    }

    /// Both matrices drawn from N(0, 1/d_S).
    pub fn random_init(r: usize, d_s: usize, d_t: usize, seed: u64) -> Result<Self> {
        if d_s > d_t {
            return Err(Error::Contract(format!("student dimension {d_s} exceeds teacher dimension {d_t}")));
        }
        let mut rng = seeded_rng(seed);
        let std = 1.0 / (d_s as f32).sqrt();
        Ok(Self {
            a: normal_vec(&mut rng, r * d_s, std),
            b: normal_vec(&mut rng, d_t * r, std),
            r,
            d_s,
            d_t,
        })
    }

    fn check_input(&self, h: &[f32]) -> Result<()> {
        if h.len() != self.d_s {
            return Err(Error::Contract(format!(
                "enhancer expects dimension {}, got {}",
                self.d_s,
                h.len()
            )));
        }
        Ok(())
    }

    /// `(A·h, pad(h) + B·A·h)` for each row, as two GEMMs. Each row's result
    /// does not depend on the other rows in the batch.
    fn forward_rows<'a>(&self, hs: impl ExactSizeIterator<Item = &'a [f32]>) -> (Matrix, Matrix) {
        let n = hs.len();
        let mut x = Matrix::zeros(n, self.d_s);
        for (i, h) in hs.enumerate() {
            x.row_mut(i).copy_from_slice(h);
        }
        let z = tensor::linear(&x, &self.a, &vec![0.0; self.r], self.r);
        let mut out = tensor::linear(&z, &self.b, &vec![0.0; self.d_t], self.d_t);
        for i in 0..n {
            for (o, h) in out.row_mut(i).iter_mut().zip(x.row(i)) {
                *o += h;
            }
        }
        (z, out)
    }

    pub fn enhance(&self, h: &[f32]) -> Result<Embedding> {
        self.check_input(h)?;
        Ok(self.forward_rows(std::iter::once(h)).1.data)
    }

    pub fn enhance_batch(&self, hs: &[Embedding]) -> Result<Vec<Embedding>> {
        hs.iter().try_for_each(|h| self.check_input(h))?;
        let parts: Vec<Vec<Embedding>> = hs
            .par_chunks(ROW_BATCH)
            .map(|chunk| {
                let (_, out) = self.forward_rows(chunk.iter().map(Vec::as_slice));
                (0..out.rows).map(|i| out.row(i).to_vec()).collect()
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }

    fn check_pairs(&self, pairs: &[Pair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Contract("enhancer loss needs at least one pair".into()));
        }
        for p in pairs {
            self.check_input(&p.student)?;
            if p.teacher.len() != self.d_t {
                return Err(Error::Contract(format!(
                    "teacher embedding has dimension {}, expected {}",
                    p.teacher.len(),
                    self.d_t
                )));
            }
        }
        Ok(())
    }

    /// `(1/n) Σ ‖enhance(h_S) − h_T‖²`.
    pub fn mse_loss(&self, pairs: &[Pair]) -> Result<f64> {
        Ok(self.loss_and_grad(pairs)?.0)
    }

    /// Loss and analytic gradients:
    /// `dL/dB = (2/n) Σ e (A h)ᵀ`, `dL/dA = (2/n) Σ (Bᵀ e) hᵀ`.
    pub fn loss_and_grad(&self, pairs: &[Pair]) -> Result<(f64, EnhancerGrad)> {
        self.check_pairs(pairs)?;
        let (r, ds, dt) = (self.r, self.d_s, self.d_t);
        let zero = || (0.0f64, vec![0.0f64; r * ds], vec![0.0f64; dt * r]);
        let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = pairs
            .par_chunks(ROW_BATCH)
            .map(|chunk| {
                let (mut loss, mut ga, mut gb) = zero();
                let (zs, outs) = self.forward_rows(chunk.iter().map(|p| p.student.as_slice()));
                for (n, p) in chunk.iter().enumerate() {
                    let z = zs.row(n);
                    let e: Vec<f64> = outs.row(n).iter().zip(&p.teacher).map(|(o, t)| (*o - *t) as f64).collect();
                    loss += e.iter().map(|v| v * v).sum::<f64>();
                    let mut bte = vec![0.0f64; r];
                    for i in 0..dt {
                        let row = &self.b[i * r..(i + 1) * r];
                        for k in 0..r {
                            gb[i * r + k] += e[i] * z[k] as f64;
                            bte[k] += row[k] as f64 * e[i];
                        }
                    }
                    for k in 0..r {
                        for j in 0..ds {
                            ga[k * ds + j] += bte[k] * p.student[j] as f64;
                        }
                    }
                }
                (loss, ga, gb)
            })
            .collect();
        let (mut loss, mut ga, mut gb) = zero();
        for (l, a, b) in parts {
            loss += l;
            ga.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            gb.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let n = pairs.len() as f64;
        ga.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= 2.0 / n);
        Ok((loss / n, EnhancerGrad { a: ga, b: gb }))
    }

    pub fn grad(&self, pairs: &[Pair]) -> Result<EnhancerGrad> {
        Ok(self.loss_and_grad(pairs)?.1)
    }

    fn step(&mut self, g: &EnhancerGrad, lr: f64) {
        for (w, d) in self.a.iter_mut().zip(&g.a) {
            *w = (*w as f64 - lr * d) as f32;
        }
        for (w, d) in self.b.iter_mut().zip(&g.b) {
            *w = (*w as f64 - lr * d) as f32;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.a.iter().chain(&self.b).all(|v| v.is_finite())
    }

    pub fn manifest(&self, trained_on: Vec<String>) -> EnhancerManifest {
        EnhancerManifest {
            r: self.r,
            d_s: self.d_s,
            d_t: self.d_t,
            trained_on,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(TENSOR_A, Tensor::f32(vec![self.r, self.d_s], self.a.clone()));
        c.insert(TENSOR_B, Tensor::f32(vec![self.d_t, self.r], self.b.clone()));
        c
    }

    /// Container plus `{r, d_S, d_T, trained_on}` manifest.
    pub fn save(&self, path: impl AsRef<Path>, trained_on: &[String]) -> Result<()> {
        let path = path.as_ref();
        self.to_container().save(path)?;
        container::write_json(container::sidecar_path(path), &self.manifest(trained_on.to_vec()))
    }

    /// Loads and checks the stored shapes against the expected `d_S`, `d_T`.
    pub fn load(path: impl AsRef<Path>, d_s: usize, d_t: usize) -> Result<(Self, EnhancerManifest)> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        let manifest: EnhancerManifest = container::read_json(container::sidecar_path(path))?;
        let params = Self::from_container(&c)?;
        if params.d_s != d_s || params.d_t != d_t {
            return Err(Error::Contract(format!(
                "enhancer maps {}→{}, configured {}→{}",
                params.d_s, params.d_t, d_s, d_t
            )));
        }
        if (manifest.r, manifest.d_s, manifest.d_t) != (params.r, params.d_s, params.d_t) {
            return Err(Error::Format("enhancer manifest disagrees with stored tensors".into()));
        }
        Ok((params, manifest))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let get = |name: &str| {
            let t = c
                .get(name)
                .ok_or_else(|| Error::Format(format!("enhancer container lacks tensor {name}")))?;
            match (&t.data, t.dims.as_slice()) {
                (container::TensorData::F32(v), [rows, cols]) => Ok((*rows, *cols, v.clone())),
                _ => Err(Error::Format(format!("tensor {name} must be a 2-D FP32 matrix"))),
            }
        };
        let (r, d_s, a) = get(TENSOR_A)?;
        let (d_t, r_b, b) = get(TENSOR_B)?;
        if r != r_b {
            return Err(Error::Format(format!("enhancer ranks disagree: A has {r}, B has {r_b}")));
        }
        if d_s > d_t {
            return Err(Error::Format(format!("enhancer maps {d_s}→{d_t}, which cannot be padded")));
        }
        let p = Self { a, b, r, d_s, d_t };
        if !p.all_finite() {
            return Err(Error::Format("enhancer weights contain non-finite values".into()));
        }
        Ok(p)
    }
}

/// Result of [`train`]: the trained map and the loss before each epoch's update.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EnhancerParams,
    pub loss_trace: Vec<f64>,
}

/// Gradient descent from a seeded random initialization. With full-batch
/// granularity each epoch computes the mean loss over all pairs and applies
/// exactly one update.
pub fn train(pairs: &[Pair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::Contract("enhancer training set is empty".into()))?;
    let params = EnhancerParams::random_init(cfg.rank, first.student.len(), first.teacher.len(), cfg.seed)?;
    train_from(params, pairs, cfg)
}

pub fn train_from(mut params: EnhancerParams, pairs: &[Pair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.check_pairs(pairs)?;
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let loss = match cfg.granularity {
            UpdateGranularity::FullBatch => {
                let (loss, g) = params.loss_and_grad(pairs)?;
                check_finite(epoch, loss)?;
                params.step(&g, cfg.learning_rate);
                loss
            }
            UpdateGranularity::MiniBatch { size } => {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(size) {
                    let batch: Vec<Pair> = chunk.iter().map(|i| pairs[*i].clone()).collect();
                    let (loss, g) = params.loss_and_grad(&batch)?;
                    check_finite(epoch, loss)?;
                    total += loss * batch.len() as f64;
                    params.step(&g, cfg.learning_rate);
                }
                total / pairs.len() as f64
            }
        };
        loss_trace.push(loss);
        if !params.all_finite() {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }
    Ok(TrainOutcome { params, loss_trace })
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_pairs(n: usize, d_s: usize, d_t: usize, seed: u64) -> Vec<Pair> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| Pair {
                student: normal_vec(&mut rng, d_s, 1.0),
                teacher: normal_vec(&mut rng, d_t, 1.0),
            })
            .collect()
    }

    #[test]
    fn hand_example() {
        let p = EnhancerParams {
            a: vec![1.0, 0.0],
            b: vec![1.0, 0.0],
            r: 1,
            d_s: 2,
            d_t: 2,
        };
        assert_eq!(p.enhance(&[3.0, 5.0]).unwrap(), vec![6.0, 5.0]);
    }

    #[test]
    fn zero_factor_is_padded_identity() {
        let mut p = EnhancerParams::random_init(2, 3, 5, 1).unwrap();
        p.a.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(p.enhance(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25, 0.0, 0.0]);
        let mut p = EnhancerParams::random_init(2, 3, 5, 1).unwrap();
        p.b.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(p.enhance(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25, 0.0, 0.0]);
        assert!(matches!(p.enhance(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_arithmetic() {
        let p = EnhancerParams::zeros(1, 3, 3);
        let pairs = vec![Pair { student: vec![3.0, 4.0, 0.0], teacher: vec![0.0; 3] }];
        assert_eq!(p.mse_loss(&pairs).unwrap(), 25.0);
        assert!(matches!(p.mse_loss(&[]), Err(Error::Contract(_))));
        let pairs = random_pairs(7, 3, 3, 2);
        let doubled: Vec<Pair> = pairs.iter().chain(&pairs).cloned().collect();
        let p = EnhancerParams::random_init(2, 3, 3, 3).unwrap();
        assert!((p.mse_loss(&pairs).unwrap() - p.mse_loss(&doubled).unwrap()).abs() < 1e-9);
        let (g1, g2) = (p.grad(&pairs).unwrap(), p.grad(&doubled).unwrap());
        for (x, y) in g1.a.iter().chain(&g1.b).zip(g2.a.iter().chain(&g2.b)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn enhance_is_linear() {
        let p = EnhancerParams::random_init(3, 4, 6, 9).unwrap();
        let mut rng = seeded_rng(5);
        let u = normal_vec(&mut rng, 4, 1.0);
        let v = normal_vec(&mut rng, 4, 1.0);
        let (alpha, beta) = (rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0));
        let mix: Vec<f32> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = p.enhance(&mix).unwrap();
        let (eu, ev) = (p.enhance(&u).unwrap(), p.enhance(&v).unwrap());
        for i in 0..6 {
            assert!((lhs[i] - (alpha * eu[i] + beta * ev[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_lr_keeps_init() {
        let pairs = random_pairs(5, 3, 4, 1);
        let cfg = TrainConfig { rank: 2, learning_rate: 0.0, epochs: 4, ..Default::default() };
        let out = train(&pairs, &cfg).unwrap();
        assert_eq!(out.params, EnhancerParams::random_init(2, 3, 4, cfg.seed).unwrap());
        assert!(out.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn divergence_names_epoch() {
        let pairs = random_pairs(5, 3, 4, 1);
        let cfg = TrainConfig { rank: 2, learning_rate: 1e30, epochs: 10, ..Default::default() };
        assert!(matches!(train(&pairs, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn save_load_roundtrip() {
        let p = EnhancerParams::random_init(4, 6, 8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crosys.lrep");
        p.save(&path, &["a".into(), "b".into()]).unwrap();
        let (back, manifest) = EnhancerParams::load(&path, 6, 8).unwrap();
        assert_eq!(back, p);
        assert_eq!(manifest.trained_on, ["a", "b"]);
        let json = std::fs::read_to_string(container::sidecar_path(&path)).unwrap();
        assert!(json.contains("\"d_S\"") && json.contains("\"d_T\""));
        assert!(matches!(EnhancerParams::load(&path, 5, 8), Err(Error::Contract(_))));

        let mut only_a = Container::new();
        only_a.insert(TENSOR_A, Tensor::f32(vec![4, 6], p.a.clone()));
        only_a.save(&path).unwrap();
        assert!(matches!(EnhancerParams::load(&path, 6, 8), Err(Error::Format(_))));
    }

    #[test]
    fn mini_batch_reduces_loss() {
        let mut rng = seeded_rng(11);
        let m: Vec<f32> = normal_vec(&mut rng, 6 * 4, 0.3);
        let pairs: Vec<Pair> = (0..64)
            .map(|_| {
                let h = normal_vec(&mut rng, 4, 1.0);
                let mut t = vec![0.0f32; 6];
                t[..4].copy_from_slice(&h);
                for i in 0..6 {
                    t[i] += (0..4).map(|j| m[i * 4 + j] * h[j]).sum::<f32>();
                }
                Pair { student: h, teacher: t }
            })
            .collect();
        let cfg = TrainConfig {
            rank: 4,
            learning_rate: 0.02,
            epochs: 60,
            granularity: UpdateGranularity::MiniBatch { size: 8 },
            ..Default::default()
        };
        let out = train(&pairs, &cfg).unwrap();
        assert!(out.loss_trace.last().unwrap() < &(out.loss_trace[0] * 0.05));
    }
}
