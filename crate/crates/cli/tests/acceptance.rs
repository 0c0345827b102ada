//! Acceptance suite. Every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use logsem::detector::{
    loss_and_grad, partition_windows, predict_events, train_detector, DetectorConfig, RnnParams, Window, WindowSpec,
};
use logsem::encoder::{linear_name, Encoder, EncoderConfig, LinearRole};
use logsem::enhancer::{self, EnhancerParams, Pair, TrainConfig, UpdateGranularity};
use logsem::eval::{
    cosine, cosine_mean, precision_recall_f1, spearman_rho, time_detection, time_embedding_generation,
    ConfusionCounts, TimingSettings,
};
use logsem::ingest::{compile_masks, events_from_lines};
use logsem::quant::{
    activation_params_from_range, collect_stats, quantize_encoder, select_layers, CalibrationSet, QuantPolicy,
    QuantizedEncoder,
};
use logsem::representation::{encode_in_batches, Representation};
use logsem::synth;
use logsem::tensor::{normal_vec, seeded_rng};
use logsem::wordpiece::{Vocab, CLS, PAD, SEP, UNK};
use logsem::Embedding;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within_budget(start: Instant, limit_s: f64) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    check(s < limit_s, || format!("took {s:.1} s, budget {limit_s} s"))?;
    Ok(s)
}

// ---------------------------------------------------------------- 1

/// F1 straight from the counts, written out independently.
fn f1_oracle(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    2.0 * tp / (2.0 * tp + fp + fn_)
}

fn metric_fidelity() -> Outcome {
    let start = Instant::now();
    // P = 9365 / 10000 and R = 8642 / 10000 exactly
    let c = ConfusionCounts {
        tp: 9365 * 8642,
        fp: 635 * 8642,
        fn_: 1358 * 9365,
        tn: 1_000_000,
    };
    let m = precision_recall_f1(&c);
    check((m.precision - 0.9365).abs() < 1e-12 && (m.recall - 0.8642).abs() < 1e-12, || {
        format!("constructed counts give P={} R={}", m.precision, m.recall)
    })?;
    let f1 = 100.0 * m.f1;
    check((f1 - 89.89).abs() <= 0.01, || format!("F1 {f1:.4} vs 89.89"))?;

    let mut rng = seeded_rng(2024);
    for k in 0..20 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..500),
            fp: rng.random_range(0..500),
            fn_: rng.random_range(0..500),
            tn: rng.random_range(0..5000),
        };
        let got = precision_recall_f1(&c).f1;
        let want = f1_oracle(c.tp, c.fp, c.fn_);
        check((got - want).abs() <= 1e-15 * want.max(1.0), || {
            format!("table {k} {c:?}: F1 {got} vs oracle {want}")
        })?;
    }
    let s = within_budget(start, 1.0)?;
    Ok(format!("F1 = {f1:.4}; 20 random tables match the oracle ({s:.3} s)"))
}

// ---------------------------------------------------------------- 2

fn quant_roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(7);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let lo: f32 = rng.random_range(-40.0..0.5);
        let hi: f32 = lo + rng.random_range(0.01..60.0);
        let p = activation_params_from_range("t", lo, hi).map_err(err)?;
        // the calibrated range always contains zero
        let (rlo, rhi) = (lo.min(0.0), hi.max(0.0));
        let n = rng.random_range(1..256);
        let mut xs: Vec<f32> = (0..n).map(|_| rng.random_range(rlo..=rhi)).collect();
        for &x in &xs {
            let q = p.quantize(x);
            // the grid value (q − zp)·scale is exact in f64
            let grid = (q - p.zero_point) as f64 * p.scale as f64;
            let back = p.dequantize(q);
            check(back == grid as f32, || format!("tensor {t}: dequantized {back} is not the grid value {grid}"))?;
            let e = (grid - x as f64).abs();
            let half = p.scale as f64 / 2.0;
            worst = worst.max(e / half);
            check(e <= half, || format!("tensor {t}: |{grid} - {x}| = {e:e} > scale/2 = {half:e}"))?;
        }
        xs.sort_by(f32::total_cmp);
        let qs: Vec<i32> = xs.iter().map(|x| p.quantize(*x)).collect();
        check(qs.windows(2).all(|w| w[0] <= w[1]), || format!("tensor {t}: codes not monotone"))?;
    }
    let s = within_budget(start, 5.0)?;
    Ok(format!("1000 tensors, worst error {worst:.4} × scale/2, monotone ({s:.2} s)"))
}

// ---------------------------------------------------------------- 3

/// `n` random texts over one word list.
fn regime_texts(words: &[String], n: usize, seed: u64) -> Vec<String> {
    synth::random_texts(words, n, 6, 14, seed)
}

fn embedding_mse(a: &[Embedding], b: &[Embedding]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            total += (*u as f64 - *v as f64).powi(2);
            count += 1;
        }
    }
    total / count as f64
}

fn calibration_specificity() -> Outcome {
    let start = Instant::now();
    let regime_a: Vec<String> = (0..120).map(|i| format!("alpha{i}")).collect();
    let regime_b: Vec<String> = (0..120).map(|i| format!("beta{i}")).collect();
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend(regime_a.iter().cloned());
    tokens.extend(regime_b.iter().cloned());
    let vocab = Vocab::new(tokens).map_err(err)?;
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_size: 64,
        num_heads: 4,
        intermediate_size: 256,
        max_seq_len: 32,
        vocab_size: vocab.len(),
        layer_norm_eps: 1e-12,
    };
    let policy = QuantPolicy::default();
    let selection = select_layers(&cfg, policy.fraction);
    let mut wins = 0;
    let mut ratios = Vec::new();
    for trial in 0..100u64 {
        let mut enc = Encoder::random_init(cfg.clone(), 1000 + trial).map_err(err)?;
        // regime B tokens carry outlier features on a few hidden dimensions
        let mut rng = seeded_rng(5000 + trial);
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(0..cfg.hidden_size)).collect();
        for w in &regime_b {
            let id = vocab.id(w).expect("in vocab") as usize;
            for &d in &dims {
                enc.word_embeddings[id * cfg.hidden_size + d] += 25.0;
            }
        }
        let calib_a = CalibrationSet::new("A", regime_texts(&regime_a, 70, 3 * trial));
        let calib_b = CalibrationSet::new("B", regime_texts(&regime_b, 70, 3 * trial + 1));
        let eval = regime_texts(&regime_a, 64, 3 * trial + 2);
        let eval: Vec<&str> = eval.iter().map(String::as_str).collect();
        let fp32 = encode_in_batches(&enc, &vocab, &eval).map_err(err)?;
        let mse_for = |calib: &CalibrationSet| -> Result<f64, String> {
            let stats = collect_stats(&enc, &vocab, calib).map_err(err)?;
            let q = quantize_encoder(&enc, &stats, &selection, &policy).map_err(err)?;
            Ok(embedding_mse(&encode_in_batches(&q.encoder, &vocab, &eval).map_err(err)?, &fp32))
        };
        let matched = mse_for(&calib_a)?;
        let mismatched = mse_for(&calib_b)?;
        if matched < mismatched {
            wins += 1;
        }
        ratios.push(mismatched / matched);
    }
    ratios.sort_by(f64::total_cmp);
    let s = within_budget(start, 30.0)?;
    check(wins >= 95, || format!("matched calibration won only {wins}/100 trials"))?;
    Ok(format!(
        "matched calibration lower MSE in {wins}/100 trials, median mismatch/match ratio {:.1} ({s:.1} s)",
        ratios[50]
    ))
}

// ---------------------------------------------------------------- 4

fn layer_selection() -> Outcome {
    let mut parts = Vec::new();
    for (cfg, want) in [(EncoderConfig::tiny_bert(100), 5usize), (EncoderConfig::bert_base(100), 15)] {
        let total = 6 * cfg.num_layers;
        // independent oracle: ceil(0.2 · count)
        let oracle = (total as f64 * 0.2).ceil() as usize;
        check(oracle == want, || format!("oracle {oracle} vs stated {want}"))?;
        let sel = select_layers(&cfg, 0.2);
        check(sel.len() == want, || format!("{}-layer encoder: {} of {total} selected", cfg.num_layers, sel.len()))?;
        let ffn: Vec<String> = (0..cfg.num_layers)
            .flat_map(|b| [linear_name(b, LinearRole::FfnIn), linear_name(b, LinearRole::FfnOut)])
            .collect();
        check(sel.iter().all(|n| ffn.contains(n)), || format!("non-FFN layer selected: {sel:?}"))?;
        parts.push(format!("{} of {total}", sel.len()));
    }
    Ok(format!("student {}, teacher {}", parts[0], parts[1]))
}

// ---------------------------------------------------------------- 5

/// `(1/n) Σ ‖pad(h) + B A h − t‖²` in f64.
fn enhancer_loss_oracle(a: &[f64], b: &[f64], r: usize, pairs: &[Pair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let (ds, dt) = (p.student.len(), p.teacher.len());
        let z: Vec<f64> = (0..r)
            .map(|k| (0..ds).map(|j| a[k * ds + j] * p.student[j] as f64).sum())
            .collect();
        for i in 0..dt {
            let pad = if i < ds { p.student[i] as f64 } else { 0.0 };
            let out = pad + (0..r).map(|k| b[i * r + k] * z[k]).sum::<f64>();
            total += (out - p.teacher[i] as f64).powi(2);
        }
    }
    total / pairs.len() as f64
}

fn random_pairs(n: usize, ds: usize, dt: usize, seed: u64) -> Vec<Pair> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| Pair {
            student: normal_vec(&mut rng, ds, 1.0),
            teacher: normal_vec(&mut rng, dt, 1.0),
        })
        .collect()
}

fn enhancer_correctness() -> Outcome {
    let start = Instant::now();
    // (a) zero factors give the zero-padded identity
    let mut rng = seeded_rng(3);
    for (r, ds, dt) in [(2, 3, 4), (8, 16, 16), (4, 5, 12)] {
        let p = EnhancerParams::random_init(r, ds, dt, 9).map_err(err)?;
        for zero_a in [true, false] {
            let mut q = p.clone();
            if zero_a {
                q.a.iter_mut().for_each(|v| *v = 0.0);
            } else {
                q.b.iter_mut().for_each(|v| *v = 0.0);
            }
            let h = normal_vec(&mut rng, ds, 2.0);
            let mut want = h.clone();
            want.resize(dt, 0.0);
            let got = q.enhance(&h).map_err(err)?;
            check(got == want, || format!("zero factors (r={r}, {ds}->{dt}): {got:?} vs {want:?}"))?;
        }
    }

    // (b) analytic gradient against central differences of an f64 oracle
    let (r, ds, dt) = (2, 3, 4);
    let p = EnhancerParams::random_init(r, ds, dt, 11).map_err(err)?;
    let pairs = random_pairs(5, ds, dt, 12);
    let (_, g) = p.loss_and_grad(&pairs).map_err(err)?;
    let a: Vec<f64> = p.a.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = p.b.iter().map(|v| *v as f64).collect();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..a.len() + b.len() {
        let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
        let analytic = if k < a.len() {
            ap[k] += eps;
            am[k] -= eps;
            g.a[k]
        } else {
            bp[k - a.len()] += eps;
            bm[k - a.len()] -= eps;
            g.b[k - a.len()]
        };
        let fd = (enhancer_loss_oracle(&ap, &bp, r, &pairs) - enhancer_loss_oracle(&am, &bm, r, &pairs)) / (2.0 * eps);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("parameter {k}: analytic {analytic} vs fd {fd} (rel {rel:e})"))?;
    }

    // (c) a linear teacher within reach of the rank-r map
    let (r, ds, dt, n) = (4, 16, 24, 256);
    let mut rng = seeded_rng(21);
    let u = normal_vec(&mut rng, dt * r, 0.5);
    let v = normal_vec(&mut rng, r * ds, 0.5);
    let pairs: Vec<Pair> = (0..n)
        .map(|_| {
            let h = normal_vec(&mut rng, ds, 1.0);
            let vh: Vec<f32> = (0..r).map(|k| (0..ds).map(|j| v[k * ds + j] * h[j]).sum()).collect();
            let mut t = vec![0.0f32; dt];
            t[..ds].copy_from_slice(&h);
            for i in 0..dt {
                t[i] += (0..r).map(|k| u[i * r + k] * vh[k]).sum::<f32>();
            }
            Pair { student: h, teacher: t }
        })
        .collect();
    let cfg = TrainConfig {
        rank: r,
        learning_rate: 0.02,
        epochs: 1500,
        seed: 5,
        granularity: UpdateGranularity::FullBatch,
    };
    let out = enhancer::train(&pairs, &cfg).map_err(err)?;
    let first = out.loss_trace[0];
    let last = out.params.mse_loss(&pairs).map_err(err)?;
    check(last <= 0.01 * first, || format!("final MSE {last} vs epoch-0 {first}"))?;
    let s = within_budget(start, 60.0)?;
    Ok(format!(
        "zero-factor identity exact; gradient rel. error ≤ {worst:.1e}; MSE {first:.3} -> {last:.2e} ({:.3}%) ({s:.1} s)",
        100.0 * last / first
    ))
}

// ---------------------------------------------------------------- 6

fn rnn_flat(p: &RnnParams) -> Vec<f32> {
    let mut v = [&p.w_xh[..], &p.w_hh, &p.b_h, &p.w_out].concat();
    v.push(p.b_out);
    v
}

fn rnn_unflat(like: &RnnParams, v: &[f32]) -> RnnParams {
    let (d, h) = (like.input_dim, like.hidden_dim);
    let (w_xh, rest) = v.split_at(h * d);
    let (w_hh, rest) = rest.split_at(h * h);
    let (b_h, rest) = rest.split_at(h);
    let (w_out, rest) = rest.split_at(h);
    RnnParams {
        input_dim: d,
        hidden_dim: h,
        w_xh: w_xh.to_vec(),
        w_hh: w_hh.to_vec(),
        b_h: b_h.to_vec(),
        w_out: w_out.to_vec(),
        b_out: rest[0],
    }
}

fn separable_events(n: usize, d: usize, seed: u64) -> (Vec<Embedding>, Vec<Option<bool>>) {
    let mut rng = seeded_rng(seed);
    let w = normal_vec(&mut rng, d, 1.0);
    let mut embs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while embs.len() < n {
        let x = normal_vec(&mut rng, d, 1.0);
        let s: f32 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        // keep a margin and roughly one anomaly in five
        if s.abs() < 0.5 || (s > 0.0 && !rng.random_bool(0.25)) {
            continue;
        }
        embs.push(x);
        labels.push(Some(s > 0.0));
    }
    (embs, labels)
}

fn detector_correctness() -> Outcome {
    let start = Instant::now();
    // BPTT against central differences, d = 3, h = 4, m = 5
    let mut rng = seeded_rng(31);
    let embs: Vec<Embedding> = (0..13).map(|_| normal_vec(&mut rng, 3, 1.0)).collect();
    let labels: Vec<Option<bool>> = (0..13).map(|i| Some(i % 3 == 0)).collect();
    let windows = partition_windows(&embs, &labels, &WindowSpec { window_size: 5 }).map_err(err)?;
    let p = RnnParams::random_init(3, 4, 32);
    let (_, g) = loss_and_grad(&p, &windows, 1.0).map_err(err)?;
    let analytic: Vec<f64> = [&g.w_xh[..], &g.w_hh, &g.b_h, &g.w_out, &[g.b_out]].concat();
    let base = rnn_flat(&p);
    let mut worst = 0.0f64;
    for (k, an) in analytic.iter().enumerate() {
        let (mut hi, mut lo) = (base.clone(), base.clone());
        hi[k] += 1e-3;
        lo[k] -= 1e-3;
        // the stored parameters are f32, so divide by the step actually taken
        let step = hi[k] as f64 - lo[k] as f64;
        let (lp, _) = loss_and_grad(&rnn_unflat(&p, &hi), &windows, 1.0).map_err(err)?;
        let (lm, _) = loss_and_grad(&rnn_unflat(&p, &lo), &windows, 1.0).map_err(err)?;
        let fd = (lp - lm) / step;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("parameter {k}: analytic {an} vs fd {fd} (rel {rel:e})"))?;
    }

    // padding leaves loss, gradients and predictions unchanged
    let padded: Vec<Window> = windows.iter().map(|w| w.padded(7)).collect();
    let (l1, g1) = loss_and_grad(&p, &windows, 1.0).map_err(err)?;
    let (l2, g2) = loss_and_grad(&p, &padded, 1.0).map_err(err)?;
    check(l1 == l2 && g1 == g2, || "padding changed loss or gradients".into())?;
    let pr1 = predict_events(&p, &windows, 0.5).map_err(err)?;
    let pr2 = predict_events(&p, &padded, 0.5).map_err(err)?;
    check(pr1 == pr2, || "padding changed predictions".into())?;

    // linearly separable embeddings
    let (embs, labels) = separable_events(3000, 8, 41);
    let (train_n, spec) = (2000, WindowSpec { window_size: 32 });
    let train = partition_windows(&embs[..train_n], &labels[..train_n], &spec).map_err(err)?;
    let test = partition_windows(&embs[train_n..], &labels[train_n..], &spec).map_err(err)?;
    let cfg = DetectorConfig {
        window_size: 32,
        hidden_dim: 16,
        learning_rate: 0.05,
        epochs: 20,
        ..DetectorConfig::default()
    };
    let out = train_detector(&train, &cfg).map_err(err)?;
    let preds = predict_events(&out.params, &test, cfg.threshold).map_err(err)?;
    let f1 = precision_recall_f1(&ConfusionCounts::from_predictions(&preds)).f1;
    check(f1 >= 0.99, || format!("separable F1 {f1:.4} after 20 epochs"))?;
    let s = within_budget(start, 60.0)?;
    Ok(format!(
        "BPTT rel. error ≤ {worst:.1e}; padding invariant; separable F1 {f1:.4} in 20 epochs ({s:.1} s)"
    ))
}

// ---------------------------------------------------------------- 7 and 8

struct Workload {
    vocab: Vocab,
    texts: Vec<String>,
}

fn workload(n: usize) -> Result<Workload, String> {
    let lines = synth::generate_corpus(n, 99, 0.1);
    let cfg = synth::corpus_ingest_config();
    let masks = compile_masks(&cfg.mask_rules()).map_err(err)?;
    let ds = events_from_lines(lines.iter().map(String::as_str), &cfg.layout().map_err(err)?, &masks);
    let texts: Vec<String> = ds.events.into_iter().map(|e| e.text).collect();
    Ok(Workload {
        vocab: synth::build_vocab(&texts, 2000),
        texts,
    })
}

/// Student quantized with calibration on the workload itself, plus an
/// untrained enhancer of the default rank.
fn qtybert(w: &Workload, teacher_dim: usize) -> Result<(QuantizedEncoder, EnhancerParams), String> {
    let student = Encoder::random_init(EncoderConfig::tiny_bert(w.vocab.len()), 2).map_err(err)?;
    let texts: Vec<&str> = w.texts.iter().map(String::as_str).collect();
    let calib = CalibrationSet::sample("synthetic", &texts, 70, 3);
    let stats = collect_stats(&student, &w.vocab, &calib).map_err(err)?;
    let policy = QuantPolicy::default();
    let sel = select_layers(&student.config, policy.fraction);
    let q = quantize_encoder(&student, &stats, &sel, &policy).map_err(err)?;
    let e = EnhancerParams::random_init(TrainConfig::default().rank, student.hidden_size(), teacher_dim, 4)
        .map_err(err)?;
    Ok((q, e))
}

fn efficiency() -> Outcome {
    let start = Instant::now();
    let w = workload(5000)?;
    let texts: Vec<&str> = w.texts.iter().map(String::as_str).collect();
    let teacher = Encoder::random_init(EncoderConfig::bert_base(w.vocab.len()), 1).map_err(err)?;
    let (q, e) = qtybert(&w, teacher.hidden_size())?;
    check(q.selection.len() == 5, || format!("{} layers quantized", q.selection.len()))?;
    let settings = TimingSettings::default();

    let teacher_rep = Representation::Contextual {
        encoder: teacher,
        vocab: w.vocab.clone(),
    };
    let t = time_embedding_generation("BERT", "synthetic", |x| teacher_rep.embed(x), &texts, &settings)
        .map_err(err)?;
    drop(teacher_rep);
    let full = Representation::Qtybert {
        student: q.clone(),
        vocab: w.vocab.clone(),
        enhancer: Some(e.clone()),
    };
    let qt = time_embedding_generation("QTyBERT", "synthetic", |x| full.embed(x), &texts, &settings).map_err(err)?;
    let speedup = t.total_seconds / qt.total_seconds;

    // enhancer overhead relative to the quantized student alone
    let bare = Representation::Qtybert {
        student: q,
        vocab: w.vocab.clone(),
        enhancer: None,
    };
    let st = time_embedding_generation("SysBE", "synthetic", |x| bare.embed(x), &texts, &settings).map_err(err)?;
    let hs = bare.embed(&texts).map_err(err)?;
    let et = time_embedding_generation("CroSysEh", "synthetic", |x| e.enhance_batch(&hs[..x.len()]), &texts, &settings)
        .map_err(err)?;
    let overhead = et.total_seconds / st.total_seconds;

    let s = within_budget(start, 600.0)?;
    let detail = format!(
        "teacher {:.1} s, QTyBERT {:.2} s over {} events: {speedup:.1}× faster; enhancer adds {:.3}% ({s:.0} s)",
        t.total_seconds,
        qt.total_seconds,
        texts.len(),
        100.0 * overhead
    );
    check(speedup >= 3.0, || format!("only {speedup:.2}× faster: {detail}"))?;
    check(overhead <= 0.02, || format!("enhancer overhead {:.2}%: {detail}", 100.0 * overhead))?;
    Ok(detail)
}

fn dimensional_contract() -> Outcome {
    let start = Instant::now();
    let w = workload(1000)?;
    let texts: Vec<&str> = w.texts.iter().map(String::as_str).collect();
    let teacher = Encoder::random_init(EncoderConfig::bert_base(w.vocab.len()), 1).map_err(err)?;
    let d_t = teacher.hidden_size();
    let (q, e) = qtybert(&w, d_t)?;
    let qty = Representation::Qtybert {
        student: q,
        vocab: w.vocab.clone(),
        enhancer: Some(e),
    };
    check(qty.dimension() == d_t, || format!("declared dimension {} vs {d_t}", qty.dimension()))?;
    let q_embs = qty.embed(&texts).map_err(err)?;
    check(q_embs.iter().all(|v| v.len() == d_t), || "QTyBERT embedding of the wrong dimension".into())?;
    let t_embs = encode_in_batches(&teacher, &w.vocab, &texts).map_err(err)?;

    // repeat the event stream so each timed run lasts long enough to measure
    let labels: Vec<Option<bool>> = vec![None; 20 * texts.len()];
    let tile = |e: &[Embedding]| -> Vec<Embedding> { e.iter().cycle().take(labels.len()).cloned().collect() };
    let spec = WindowSpec { window_size: 64 };
    let rnn = RnnParams::random_init(d_t, 128, 8);
    let settings = TimingSettings::default();
    let qw = partition_windows(&tile(&q_embs), &labels, &spec).map_err(err)?;
    let tw = partition_windows(&tile(&t_embs), &labels, &spec).map_err(err)?;
    let qt = time_detection("RNN [QTyBERT]", "synthetic", &rnn, &qw, &settings).map_err(err)?;
    let tt = time_detection("RNN [BERT]", "synthetic", &rnn, &tw, &settings).map_err(err)?;
    let diff = (qt.total_seconds - tt.total_seconds).abs() / tt.total_seconds;
    let s = within_budget(start, 120.0)?;
    let detail = format!(
        "dimension {d_t}; detection {:.3} s vs {:.3} s over {} events, difference {:.1}% ({s:.0} s)",
        qt.total_seconds,
        tt.total_seconds,
        labels.len(),
        100.0 * diff
    );
    check(diff <= 0.10, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn windowing() -> Outcome {
    let mut rng = seeded_rng(9);
    for trial in 0..200 {
        let n = rng.random_range(0..400usize);
        let m = rng.random_range(1..80usize);
        let embs: Vec<Embedding> = (0..n).map(|i| vec![i as f32, -(i as f32)]).collect();
        let labels: Vec<Option<bool>> = (0..n).map(|i| Some(i % 2 == 0)).collect();
        let ws = partition_windows(&embs, &labels, &WindowSpec { window_size: m }).map_err(err)?;
        check(ws.len() == n.div_ceil(m), || format!("trial {trial}: {} windows for N={n} m={m}", ws.len()))?;
        let mut seen = Vec::new();
        for w in &ws {
            check(w.len() == m, || format!("trial {trial}: window of length {}", w.len()))?;
            for t in 0..m {
                if w.mask[t] {
                    seen.push(w.embeddings.row(t)[0] as usize);
                }
            }
        }
        check(seen == (0..n).collect::<Vec<_>>(), || format!("trial {trial}: events not covered once in order"))?;
    }
    Ok("200 random (N, m): each event exactly once, in order, ⌈N/m⌉ windows".into())
}

// ---------------------------------------------------------------- 10

/// Average ranks by counting, then Pearson on the ranks.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn similarity_metrics() -> Outcome {
    let mut rng = seeded_rng(10);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(3..=50);
        // small integer values force ties in about half the trials
        let levels = if trial % 2 == 0 { 5 } else { 1_000_000 };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let want = spearman_oracle(&x, &y);
        if !want.is_finite() {
            continue;
        }
        let got = spearman_rho(&x, &y).map_err(err)?.rho;
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-10, || format!("trial {trial}: rho {got} vs oracle {want}"))?;
    }
    let v = vec![vec![1.0f32, 2.0, -3.0], vec![0.5, 0.0, 4.0]];
    let neg: Vec<Embedding> = v.iter().map(|e| e.iter().map(|x| -x).collect()).collect();
    check(cosine_mean(&v, &v).map_err(err)? == 1.0, || "cosine of identical sets is not 1".into())?;
    check(cosine_mean(&v, &neg).map_err(err)? == -1.0, || "cosine of negated sets is not -1".into())?;
    check(cosine(&[1.0, 0.0], &[0.0, 3.0]) == 0.0, || "orthogonal cosine is not 0".into())?;
    Ok(format!("200 samples n ≤ 50 within {worst:.1e} of the rank oracle; cosine ±1, 0 exact"))
}

// ---------------------------------------------------------------- 11 and 12

const PIPELINE: [&[&str]; 12] = [
    &["ingest"],
    &["mine-templates"],
    &["calibrate"],
    &["quantize"],
    &["train-enhancer"],
    &["embed"],
    &["embed", "--representation", "teacher"],
    &["train-detector"],
    &["detect"],
    &["bench-embed"],
    &["bench-detect"],
    &["compare-embeddings"],
];

fn run_cli(out: &Path, args: &[&str]) -> Result<String, String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic/pipeline.json");
    let o = Command::new(env!("CARGO_BIN_EXE_logsem"))
        .env_remove("LOGSEM_OUT_DIR")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .map_err(err)?;
    if !o.status.success() {
        return Err(format!(
            "`{}` exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let entry = entry.map_err(err)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(entry.path()).map_err(err)?);
    }
    Ok(files)
}

fn is_timing(name: &str) -> bool {
    name.starts_with("timing_") && !name.ends_with(".manifest.json")
}

fn end_to_end(out: &Path) -> Outcome {
    let start = Instant::now();
    for args in PIPELINE {
        run_cli(out, args)?;
    }
    let first = snapshot(out)?;
    let metrics = String::from_utf8_lossy(&first["metrics.qtybert.csv"]).into_owned();
    let header = metrics.lines().next().unwrap_or_default();
    check(header == "model,representation,precision,recall,f1", || format!("metrics header {header:?}"))?;
    check(metrics.lines().nth(1).is_some_and(|l| l.starts_with("RNN,QTyBERT,")), || {
        format!("metrics rows {metrics:?}")
    })?;
    let timing = String::from_utf8_lossy(&first["timing_embed.csv"]).into_owned();
    check(timing.lines().next() == Some("method,system,cores,total_s,avg_ms"), || {
        format!("timing header {:?}", timing.lines().next())
    })?;
    check(timing.lines().count() == 3, || format!("timing rows {timing:?}"))?;

    for args in PIPELINE {
        run_cli(out, args)?;
    }
    let second = snapshot(out)?;
    check(first.keys().eq(second.keys()), || "rerun produced a different set of files".into())?;
    let compared: Vec<&String> = first.keys().filter(|n| !is_timing(n)).collect();
    for name in &compared {
        check(first[*name] == second[*name], || format!("{name} differs on rerun"))?;
    }
    let s = within_budget(start, 300.0)?;
    let f1 = metrics.lines().nth(1).and_then(|l| l.rsplit(',').next()).unwrap_or("?").to_string();
    Ok(format!(
        "{} subcommands twice, exit 0; {} artifacts byte-identical on rerun; F1 {f1} ({s:.0} s)",
        PIPELINE.len(),
        compared.len()
    ))
}

fn ablation_parity(out: &Path) -> Outcome {
    run_cli(out, &["ingest"])?;
    run_cli(out, &["ablate"])?;
    let csv = std::fs::read_to_string(out.join("ablation.csv")).map_err(err)?;
    let variants: Vec<&str> = csv.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    for want in [
        "QTyBERT",
        "w/o CroSysEh",
        "w/o SysBE",
        "w/o calibration",
        "calibration N=30",
        "calibration N=50",
        "calibration N=70",
        "calibration N=100",
    ] {
        check(variants.contains(&want), || format!("row {want:?} missing from {variants:?}"))?;
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).map_err(err)?).map_err(err)?;
    check(report["no_quant_bitwise_fp32"] == serde_json::Value::Bool(true), || {
        format!("no-quant parity flag {}", report["no_quant_bitwise_fp32"])
    })?;
    Ok(format!("{} rows present; unquantized variant bitwise equal to FP32 path", variants.len()))
}

fn main() {
    let out = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("metric fidelity", Box::new(metric_fidelity)),
        ("quantization roundtrip", Box::new(quant_roundtrip)),
        ("calibration specificity", Box::new(calibration_specificity)),
        ("layer-selection arithmetic", Box::new(layer_selection)),
        ("enhancer correctness", Box::new(enhancer_correctness)),
        ("detector correctness", Box::new(detector_correctness)),
        ("efficiency", Box::new(efficiency)),
        ("dimensional contract", Box::new(dimensional_contract)),
        ("windowing", Box::new(windowing)),
        ("similarity metrics", Box::new(similarity_metrics)),
        ("end-to-end smoke", Box::new(|| end_to_end(out.path()))),
        ("ablation harness parity", Box::new(|| ablation_parity(out.path()))),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
