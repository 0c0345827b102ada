//! Event-level anomaly detection with a vanilla recurrent network.
//!
//! Embedding sequences are cut into non-overlapping windows of `m` events;
//! the last window is zero-padded and masked. Every time step emits its own
//! logit, so each event gets a probability. Training minimizes mean binary
//! cross-entropy over unmasked, labeled events with exact gradients from
//! backpropagation through time.
//!
//! Parameters are stored in FP32; forward and backward passes run in f64.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Container, Tensor, TensorData};
use crate::tensor::{normal_vec, seeded_rng, Matrix};
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_size: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { window_size: 64 }
    }
}

/// `m` consecutive events. Padded rows are zero, masked out and unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Index of the first event in the original sequence.
    pub start: usize,
    pub embeddings: Matrix,
    pub labels: Vec<Option<bool>>,
    pub mask: Vec<bool>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn real_events(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Appends `extra` masked zero rows.
    pub fn padded(&self, extra: usize) -> Window {
        let d = self.embeddings.cols;
        let mut data = self.embeddings.data.clone();
        data.resize(data.len() + extra * d, 0.0);
        let mut w = self.clone();
        w.embeddings = Matrix::from_vec(self.len() + extra, d, data);
        w.labels.resize(self.len() + extra, None);
        w.mask.resize(self.len() + extra, false);
        w
    }
}

/// `⌈N/m⌉` windows covering every event once, in order.
pub fn partition_windows(embeddings: &[Embedding], labels: &[Option<bool>], spec: &WindowSpec) -> Result<Vec<Window>> {
    if spec.window_size == 0 {
        return Err(Error::Config("window size must be ≥ 1".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let Some(first) = embeddings.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::Contract(format!("embedding dimensions differ: {d} and {}", bad.len())));
    }
    let m = spec.window_size;
    Ok(embeddings
        .chunks(m)
        .zip(labels.chunks(m))
        .enumerate()
        .map(|(w, (embs, labs))| {
            let mut data = Vec::with_capacity(m * d);
            for e in embs {
                data.extend_from_slice(e);
            }
            data.resize(m * d, 0.0);
            let mut labels = labs.to_vec();
            labels.resize(m, None);
            let mut mask = vec![true; embs.len()];
            mask.resize(m, false);
            Window {
                start: w * m,
                embeddings: Matrix::from_vec(m, d, data),
                labels,
                mask,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `h × d`.
    pub w_xh: Vec<f32>,
    /// `h × h`.
    pub w_hh: Vec<f32>,
    pub b_h: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: f32,
}

/// Gradients with the layout of [`RnnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RnnGrad {
    pub w_xh: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl RnnGrad {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w_xh: vec![0.0; h * d],
            w_hh: vec![0.0; h * h],
            b_h: vec![0.0; h],
            w_out: vec![0.0; h],
            b_out: 0.0,
        }
    }

    fn add(&mut self, o: &RnnGrad) {
        let pairs = [
            (&mut self.w_xh, &o.w_xh),
            (&mut self.w_hh, &o.w_hh),
            (&mut self.b_h, &o.b_h),
            (&mut self.w_out, &o.w_out),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.b_out += o.b_out;
    }

    fn scale(&mut self, s: f64) {
        for v in self.w_xh.iter_mut().chain(&mut self.w_hh).chain(&mut self.b_h).chain(&mut self.w_out) {
            *v *= s;
        }
        self.b_out *= s;
    }
}

const T_W_XH: &str = "rnn.w_xh";
const T_W_HH: &str = "rnn.w_hh";
const T_B_H: &str = "rnn.b_h";
const T_W_OUT: &str = "rnn.w_out";
const T_B_OUT: &str = "rnn.b_out";

impl RnnParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_xh: vec![0.0; hidden_dim * input_dim],
            w_hh: vec![0.0; hidden_dim * hidden_dim],
            b_h: vec![0.0; hidden_dim],
            w_out: vec![0.0; hidden_dim],
            b_out: 0.0,
        }
    }

    /// Normal weights with std `1/√fan_in`; biases zero.
    pub fn random_init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            input_dim,
            hidden_dim,
            w_xh: normal_vec(&mut rng, hidden_dim * input_dim, 1.0 / (input_dim.max(1) as f32).sqrt()),
            w_hh: normal_vec(&mut rng, hidden_dim * hidden_dim, 1.0 / (hidden_dim as f32).sqrt()),
            b_h: vec![0.0; hidden_dim],
            w_out: normal_vec(&mut rng, hidden_dim, 1.0 / (hidden_dim as f32).sqrt()),
            b_out: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.w_xh
            .iter()
            .chain(&self.w_hh)
            .chain(&self.b_h)
            .chain(&self.w_out)
            .chain(std::iter::once(&self.b_out))
            .all(|v| v.is_finite())
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        if w.embeddings.cols != self.input_dim {
            return Err(Error::Contract(format!(
                "detector expects {}-dimensional embeddings, window has {}",
                self.input_dim, w.embeddings.cols
            )));
        }
        if w.embeddings.rows != w.mask.len() || w.labels.len() != w.mask.len() {
            return Err(Error::Contract("window rows, labels and mask differ in length".into()));
        }
        Ok(())
    }

    /// Hidden states `h_1..h_m` and logits for one window.
    fn run(&self, w: &Window) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut states = Vec::with_capacity(w.len());
        let mut logits = Vec::with_capacity(w.len());
        let mut prev = vec![0.0f64; h];
        for t in 0..w.len() {
            let x = w.embeddings.row(t);
            let mut cur = vec![0.0f64; h];
            for i in 0..h {
                let mut a = self.b_h[i] as f64;
                let wx = &self.w_xh[i * d..(i + 1) * d];
                a += wx.iter().zip(x).map(|(w, x)| *w as f64 * *x as f64).sum::<f64>();
                let wh = &self.w_hh[i * h..(i + 1) * h];
                a += wh.iter().zip(&prev).map(|(w, p)| *w as f64 * p).sum::<f64>();
                cur[i] = a.tanh();
            }
            let z = self.b_out as f64 + self.w_out.iter().zip(&cur).map(|(w, v)| *w as f64 * v).sum::<f64>();
            logits.push(z);
            states.push(cur.clone());
            prev = cur;
        }
        (states, logits)
    }

    /// Per-position logits; masked positions are computed too.
    pub fn logits(&self, w: &Window) -> Result<Vec<f64>> {
        self.check_window(w)?;
        Ok(self.run(w).1)
    }

    pub fn to_container(&self) -> Container {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut c = Container::new();
        c.insert(T_W_XH, Tensor::f32(vec![h, d], self.w_xh.clone()));
        c.insert(T_W_HH, Tensor::f32(vec![h, h], self.w_hh.clone()));
        c.insert(T_B_H, Tensor::f32(vec![h], self.b_h.clone()));
        c.insert(T_W_OUT, Tensor::f32(vec![1, h], self.w_out.clone()));
        c.insert(T_B_OUT, Tensor::f32(vec![1], vec![self.b_out]));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let t = c
            .get(T_W_XH)
            .ok_or_else(|| Error::Format(format!("detector container lacks {T_W_XH}")))?;
        let (h, d) = match (&t.data, t.dims.as_slice()) {
            (TensorData::F32(_), [h, d]) => (*h, *d),
            _ => return Err(Error::Format(format!("{T_W_XH} must be a 2-D FP32 matrix"))),
        };
        let p = Self {
            input_dim: d,
            hidden_dim: h,
            w_xh: c.f32_tensor(T_W_XH, &[h, d])?.to_vec(),
            w_hh: c.f32_tensor(T_W_HH, &[h, h])?.to_vec(),
            b_h: c.f32_tensor(T_B_H, &[h])?.to_vec(),
            w_out: c.f32_tensor(T_W_OUT, &[1, h])?.to_vec(),
            b_out: c.f32_tensor(T_B_OUT, &[1])?[0],
        };
        if !p.all_finite() {
            return Err(Error::Format("detector weights contain non-finite values".into()));
        }
        Ok(p)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted BCE on a logit and its derivative with respect to the logit.
fn bce(z: f64, y: bool, pos_weight: f64) -> (f64, f64) {
    if y {
        (pos_weight * softplus(-z), pos_weight * (sigmoid(z) - 1.0))
    } else {
        (softplus(z), sigmoid(z))
    }
}

/// Summed loss, summed gradient and contributing event count for one window.
fn window_loss_grad(p: &RnnParams, w: &Window, pos_weight: f64) -> (f64, RnnGrad, usize) {
    let (d, h) = (p.input_dim, p.hidden_dim);
    let (states, logits) = p.run(w);
    let mut g = RnnGrad::zeros(d, h);
    let mut loss = 0.0;
    let mut count = 0;
    let mut dz = vec![0.0f64; w.len()];
    for t in 0..w.len() {
        if let (true, Some(y)) = (w.mask[t], w.labels[t]) {
            let (l, dl) = bce(logits[t], y, pos_weight);
            loss += l;
            dz[t] = dl;
            count += 1;
        }
    }
    let zero = vec![0.0f64; h];
    let mut dh_next = vec![0.0f64; h];
    for t in (0..w.len()).rev() {
        let ht = &states[t];
        let prev = if t > 0 { &states[t - 1] } else { &zero };
        g.b_out += dz[t];
        let mut da = vec![0.0f64; h];
        for i in 0..h {
            g.w_out[i] += dz[t] * ht[i];
            let dh = p.w_out[i] as f64 * dz[t] + dh_next[i];
            da[i] = dh * (1.0 - ht[i] * ht[i]);
        }
        let x = w.embeddings.row(t);
        let mut carry = vec![0.0f64; h];
        for i in 0..h {
            if da[i] == 0.0 {
                continue;
            }
            g.b_h[i] += da[i];
            for (j, xv) in x.iter().enumerate() {
                g.w_xh[i * d + j] += da[i] * *xv as f64;
            }
            for j in 0..h {
                g.w_hh[i * h + j] += da[i] * prev[j];
                carry[j] += p.w_hh[i * h + j] as f64 * da[i];
            }
        }
        dh_next = carry;
    }
    (loss, g, count)
}

/// Mean BCE over all unmasked labeled events and its exact gradient.
pub fn loss_and_grad(p: &RnnParams, windows: &[Window], pos_weight: f64) -> Result<(f64, RnnGrad)> {
    windows.iter().try_for_each(|w| p.check_window(w))?;
    let parts: Vec<(f64, RnnGrad, usize)> = windows.par_iter().map(|w| window_loss_grad(p, w, pos_weight)).collect();
    let mut loss = 0.0;
    let mut count = 0;
    let mut g = RnnGrad::zeros(p.input_dim, p.hidden_dim);
    for (l, wg, c) in &parts {
        loss += l;
        count += c;
        g.add(wg);
    }
    if count == 0 {
        return Err(Error::Contract("no unmasked labeled events to train on".into()));
    }
    g.scale(1.0 / count as f64);
    Ok((loss / count as f64, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub window_size: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Windows per update; `0` means one full-batch update per epoch.
    pub batch_windows: usize,
    /// Multiplier on the positive-class loss term.
    pub pos_weight: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_size: 64,
            hidden_dim: 128,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 42,
            threshold: 0.5,
            batch_windows: 1,
            pos_weight: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("detector window_size and hidden_dim must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("detector learning_rate {} must be ≥ 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("detector threshold {} outside [0, 1]", self.threshold)));
        }
        if self.pos_weight.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config("detector pos_weight must be > 0".into()));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            window_size: self.window_size,
        }
    }
}

fn step(p: &mut RnnParams, g: &RnnGrad, lr: f64) {
    let upd = |w: &mut [f32], d: &[f64]| w.iter_mut().zip(d).for_each(|(w, d)| *w = (*w as f64 - lr * d) as f32);
    upd(&mut p.w_xh, &g.w_xh);
    upd(&mut p.w_hh, &g.w_hh);
    upd(&mut p.b_h, &g.b_h);
    upd(&mut p.w_out, &g.w_out);
    p.b_out = (p.b_out as f64 - lr * g.b_out) as f32;
}

/// Trained parameters and the mean training loss of each epoch.
#[derive(Debug, Clone)]
pub struct DetectorOutcome {
    pub params: RnnParams,
    pub loss_trace: Vec<f64>,
}

/// Plain gradient descent. Mini-batches visit the windows in a seeded
/// shuffled order each epoch; batches without labeled events are skipped.
pub fn train_detector(windows: &[Window], cfg: &DetectorConfig) -> Result<DetectorOutcome> {
    cfg.validate()?;
    let first = windows
        .first()
        .ok_or_else(|| Error::Contract("no windows to train on".into()))?;
    let labeled = windows
        .iter()
        .any(|w| w.mask.iter().zip(&w.labels).any(|(m, l)| *m && l.is_some()));
    if !labeled {
        return Err(Error::Contract("no unmasked labeled events to train on".into()));
    }
    let mut params = RnnParams::random_init(first.embeddings.cols, cfg.hidden_dim, cfg.seed);
    windows.iter().try_for_each(|w| params.check_window(w))?;
    let pos_weight = cfg.pos_weight.unwrap_or(1.0);
    let mut rng = seeded_rng(cfg.seed ^ 0xd37ec7);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut events = 0usize;
        if cfg.batch_windows == 0 {
            let (loss, g) = loss_and_grad(&params, windows, pos_weight)?;
            check_loss(epoch, loss)?;
            step(&mut params, &g, cfg.learning_rate);
            total = loss;
            events = 1;
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_windows) {
                let batch: Vec<&Window> = chunk.iter().map(|i| &windows[*i]).collect();
                let parts: Vec<(f64, RnnGrad, usize)> =
                    batch.par_iter().map(|w| window_loss_grad(&params, w, pos_weight)).collect();
                let mut g = RnnGrad::zeros(params.input_dim, params.hidden_dim);
                let (mut loss, mut count) = (0.0, 0);
                for (l, wg, c) in &parts {
                    loss += l;
                    count += c;
                    g.add(wg);
                }
                if count == 0 {
                    continue;
                }
                check_loss(epoch, loss)?;
                g.scale(1.0 / count as f64);
                step(&mut params, &g, cfg.learning_rate);
                total += loss;
                events += count;
            }
        }
        loss_trace.push(total / events.max(1) as f64);
        if !params.all_finite() {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }
    Ok(DetectorOutcome { params, loss_trace })
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub index: usize,
    pub probability: f64,
    pub decision: bool,
    pub label: Option<bool>,
}

/// Probability `≥ threshold`, decided on the logit so that threshold 0 flags
/// everything and threshold 1 flags nothing.
fn decide(z: f64, threshold: f64) -> bool {
    if threshold <= 0.0 {
        true
    } else if threshold >= 1.0 {
        false
    } else {
        z >= (threshold / (1.0 - threshold)).ln()
    }
}

/// One prediction per real event, in original order.
pub fn predict_events(p: &RnnParams, windows: &[Window], threshold: f64) -> Result<Vec<EventPrediction>> {
    windows.iter().try_for_each(|w| p.check_window(w))?;
    let per_window: Vec<Vec<EventPrediction>> = windows
        .par_iter()
        .map(|w| {
            let (_, logits) = p.run(w);
            (0..w.len())
                .filter(|t| w.mask[*t])
                .map(|t| EventPrediction {
                    index: w.start + t,
                    probability: sigmoid(logits[t]),
                    decision: decide(logits[t], threshold),
                    label: w.labels[t],
                })
                .collect()
        })
        .collect();
    Ok(per_window.into_iter().flatten().collect())
}

/// `index,probability,decision,label`; unknown labels are left empty.
pub fn write_predictions_csv(path: impl AsRef<Path>, preds: &[EventPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["index", "probability", "decision", "label"])
        .map_err(|e| csv_err(path, e))?;
    for p in preds {
        let label = p.label.map(|l| (l as u8).to_string()).unwrap_or_default();
        w.write_record([
            p.index.to_string(),
            format!("{:.6}", p.probability),
            (p.decision as u8).to_string(),
            label,
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Settings stored beside the detector weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorManifest {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub window_size: usize,
    pub threshold: f64,
}

pub fn save_detector(path: impl AsRef<Path>, p: &RnnParams, cfg: &DetectorConfig) -> Result<()> {
    let path = path.as_ref();
    p.to_container().save(path)?;
    container::write_json(
        container::sidecar_path(path),
        &DetectorManifest {
            input_dim: p.input_dim,
            hidden_dim: p.hidden_dim,
            window_size: cfg.window_size,
            threshold: cfg.threshold,
        },
    )
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<(RnnParams, DetectorManifest)> {
    let path = path.as_ref();
    let p = RnnParams::from_container(&Container::load(path)?)?;
    let m: DetectorManifest = container::read_json(container::sidecar_path(path))?;
    if (m.input_dim, m.hidden_dim) != (p.input_dim, p.hidden_dim) {
        return Err(Error::Format("detector manifest disagrees with stored tensors".into()));
    }
    Ok((p, m))
}
