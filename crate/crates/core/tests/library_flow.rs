//! End-to-end use of the public library API on a small synthetic corpus.

use logsem::detector::{partition_windows, predict_events, train_detector, DetectorConfig};
use logsem::drain::{DrainConfig, ParseTree};
use logsem::encoder::{Encoder, EncoderConfig};
use logsem::enhancer::{self, CrossSystemSet, EnhancerParams, TrainConfig, UpdateGranularity};
use logsem::eval::{precision_recall_f1, ConfusionCounts};
use logsem::ingest::{compile_masks, events_from_lines, Dataset};
use logsem::quant::{collect_stats, quantize_encoder, select_layers, CalibrationSet, QuantPolicy, QuantizedEncoder};
use logsem::representation::Representation;
use logsem::static_embed::{fit_idf, EmbeddingTable};
use logsem::synth;
use logsem::wordpiece::Vocab;

fn corpus(n: usize) -> Dataset {
    let lines = synth::generate_corpus(n, 11, 0.1);
    let cfg = synth::corpus_ingest_config();
    let masks = compile_masks(&cfg.mask_rules()).unwrap();
    events_from_lines(lines.iter().map(String::as_str), &cfg.layout().unwrap(), &masks)
}

fn small(vocab: &Vocab, layers: usize, hidden: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_size: hidden,
        num_heads: 2,
        intermediate_size: 4 * hidden,
        max_seq_len: 32,
        vocab_size: vocab.len(),
        layer_norm_eps: 1e-12,
    }
}

#[test]
fn ingest_is_chronological_and_labels_survive() {
    let ds = corpus(300);
    assert_eq!(ds.skipped, 0);
    assert_eq!(ds.events.len(), 300);
    let ts: Vec<f64> = ds.events.iter().filter_map(|e| e.timestamp).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    assert!(ds.events.iter().any(|e| e.label.is_anomalous()));
    assert!(ds.events.iter().enumerate().all(|(i, e)| e.index == i));
}

#[test]
fn templates_feed_static_embeddings() {
    let ds = corpus(300);
    let mut tree = ParseTree::new(DrainConfig::default()).unwrap();
    for e in &ds.events {
        tree.mine_template(&e.tokens());
    }
    let templates = tree.templates();
    // Component and severity lead each event, so message kinds split by them.
    assert!(templates.len() < ds.events.len() / 2, "{} templates", templates.len());
    let support: usize = templates.iter().map(|t| t.support_count).sum();
    assert_eq!(support, ds.events.len());
    assert!(templates.iter().flat_map(|t| t.words()).all(|w| !w.chars().any(|c| c.is_ascii_digit())));

    let texts: Vec<&str> = ds.events.iter().map(|e| e.text.as_str()).collect();
    let words: Vec<String> = synth::word_counts(&texts).into_iter().map(|(w, _)| w).collect();
    let table = EmbeddingTable::parse("vectors", &synth::random_word_vectors(&words, 16, 3)).unwrap();
    let rep = Representation::Static {
        table,
        idf: fit_idf(templates),
    };
    let emb = rep.embed(&texts).unwrap();
    assert_eq!(emb.len(), texts.len());
    assert!(emb.iter().all(|v| v.len() == 16 && v.iter().all(|x| x.is_finite())));
}

#[test]
fn quantized_student_round_trips_through_disk() {
    let ds = corpus(200);
    let texts: Vec<&str> = ds.events.iter().map(|e| e.text.as_str()).collect();
    let vocab = synth::build_vocab(&texts, 500);
    let cfg = small(&vocab, 2, 32);
    let student = Encoder::random_init(cfg.clone(), 5).unwrap();
    let calib = CalibrationSet::sample("synthetic", &texts, 50, 1);
    let stats = collect_stats(&student, &vocab, &calib).unwrap();
    let policy = QuantPolicy::default();
    let q = quantize_encoder(&student, &stats, &select_layers(&cfg, policy.fraction), &policy).unwrap();
    assert!(!q.selection.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.lrep");
    q.save(&path).unwrap();
    let back = QuantizedEncoder::load(&path).unwrap();
    assert_eq!(back.manifest(), q.manifest());

    let a = q.encoder.embed_batch(&vocab, &texts[..20]).unwrap();
    let b = back.encoder.embed_batch(&vocab, &texts[..20]).unwrap();
    assert_eq!(a, b, "reloaded encoder must reproduce embeddings bit for bit");
    let fp = student.embed_batch(&vocab, &texts[..20]).unwrap();
    for (x, y) in a.iter().zip(&fp) {
        let cos = logsem::eval::cosine(x, y);
        assert!(cos > 0.95, "quantized embedding drifted: cosine {cos}");
    }
}

#[test]
fn enhancer_moves_student_towards_teacher() {
    let ds = corpus(200);
    let texts: Vec<&str> = ds.events.iter().map(|e| e.text.as_str()).collect();
    let vocab = synth::build_vocab(&texts, 500);
    let teacher = Encoder::random_init(small(&vocab, 2, 48), 1).unwrap();
    let student = Encoder::random_init(small(&vocab, 1, 32), 2).unwrap();
    let sample: Vec<String> = texts[..120].iter().map(|t| t.to_string()).collect();
    let set = CrossSystemSet::build(
        &[("synthetic".to_string(), sample)],
        |t| student.embed_batch(&vocab, t),
        |t| teacher.embed_batch(&vocab, t),
    )
    .unwrap();
    let cfg = TrainConfig {
        rank: 8,
        learning_rate: 0.05,
        epochs: 60,
        granularity: UpdateGranularity::FullBatch,
        ..TrainConfig::default()
    };
    let before = EnhancerParams::zeros(8, 32, 48).mse_loss(&set.pairs).unwrap();
    let out = enhancer::train(&set.pairs, &cfg).unwrap();
    let after = out.params.mse_loss(&set.pairs).unwrap();
    assert!(after < 0.8 * before, "loss {before} -> {after}");
}

#[test]
fn detector_separates_distinct_event_kinds() {
    // Anomalies get their own direction in embedding space.
    let ds = corpus(600);
    let emb: Vec<Vec<f32>> = ds
        .events
        .iter()
        .map(|e| if e.label.is_anomalous() { vec![1.0, 0.0, 0.2] } else { vec![0.0, 1.0, 0.2] })
        .collect();
    let labels: Vec<Option<bool>> = ds.events.iter().map(|e| Some(e.label.is_anomalous())).collect();
    let cfg = DetectorConfig {
        window_size: 16,
        hidden_dim: 8,
        learning_rate: 0.1,
        epochs: 40,
        ..DetectorConfig::default()
    };
    let windows = partition_windows(&emb, &labels, &cfg.window_spec()).unwrap();
    let trained = train_detector(&windows, &cfg).unwrap();
    assert!(trained.loss_trace.last() < trained.loss_trace.first());
    let preds = predict_events(&trained.params, &windows, cfg.threshold).unwrap();
    assert_eq!(preds.len(), ds.events.len());
    let m = precision_recall_f1(&ConfusionCounts::from_predictions(&preds));
    assert!(m.f1 > 0.95, "{m:?}");
}
