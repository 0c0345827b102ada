//! Self-contained demo inputs: a synthetic labeled corpus, a vocabulary and
//! word-vector tables covering it, and a small pipeline configuration.
//!
//! The word vectors are seeded random stand-ins for pretrained tables; they
//! exercise the static path without shipping third-party data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use logsem::detector::DetectorConfig;
use logsem::drain::DrainConfig;
use logsem::enhancer::UpdateGranularity;
use logsem::eval::TimingSettings;
use logsem::ingest::{compile_masks, events_from_lines};
use logsem::synth;

use crate::config::{
    CompareSettings, EncoderSpec, EnhancerSettings, PipelineConfig, QuantizationSettings, RepresentationChoice,
    STATIC_TABLES,
};
use crate::error::CliError;

pub const CORPUS: &str = "corpus.log";
pub const VOCAB: &str = "vocab.txt";
pub const CONFIG: &str = "pipeline.json";
const VOCAB_WORDS: usize = 2000;
const VECTOR_DIM: usize = 50;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(logsem::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| io_err(&p, e))
}

pub fn demo_config() -> PipelineConfig {
    let encoder = |layers, hidden, heads| EncoderSpec {
        weights: None,
        num_layers: layers,
        hidden_size: hidden,
        num_heads: heads,
        intermediate_size: 4 * hidden,
        max_seq_len: 64,
    };
    PipelineConfig {
        system: "synthetic".into(),
        dataset: CORPUS.into(),
        ingest: synth::corpus_ingest_config(),
        vocab: VOCAB.into(),
        static_tables: STATIC_TABLES
            .iter()
            .map(|t| (t.to_string(), PathBuf::from(format!("{t}.txt"))))
            .collect::<BTreeMap<_, _>>(),
        representation: RepresentationChoice::Qtybert,
        teacher: encoder(4, 128, 4),
        student: encoder(2, 64, 2),
        drain: DrainConfig::default(),
        quantization: QuantizationSettings::default(),
        enhancer: EnhancerSettings {
            rank: 32,
            learning_rate: 0.05,
            epochs: 80,
            granularity: UpdateGranularity::FullBatch,
            samples_per_system: 500,
            extra_systems: Vec::new(),
        },
        train_fraction: 0.7,
        detector: DetectorConfig {
            window_size: 32,
            hidden_dim: 32,
            learning_rate: 0.03,
            epochs: 60,
            pos_weight: Some(3.0),
            ..DetectorConfig::default()
        },
        bench: TimingSettings::default(),
        compare: CompareSettings::default(),
        output_dir: "out".into(),
        seed: 42,
    }
}

/// Writes every demo input into `dir` and returns a summary line.
pub fn write_demo(dir: &Path, events: usize, seed: u64, anomaly_rate: f64) -> Result<String, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let lines = synth::generate_corpus(events, seed, anomaly_rate);
    let mut corpus = lines.join("\n");
    corpus.push('\n');
    write(dir, CORPUS, &corpus)?;

    let cfg = demo_config();
    let masks = compile_masks(&cfg.ingest.mask_rules())?;
    let ds = events_from_lines(lines.iter().map(String::as_str), &cfg.ingest.layout()?, &masks);
    let texts: Vec<&str> = ds.events.iter().map(|e| e.text.as_str()).collect();
    synth::build_vocab(&texts, VOCAB_WORDS).save(dir.join(VOCAB))?;

    let words: Vec<String> = synth::word_counts(&texts).into_iter().map(|(w, _)| w).collect();
    for (i, table) in STATIC_TABLES.iter().enumerate() {
        let text = synth::random_word_vectors(&words, VECTOR_DIM, seed.wrapping_add(100 + i as u64));
        write(dir, &format!("{table}.txt"), &text)?;
    }
    let mut json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    json.push('\n');
    write(dir, CONFIG, &json)?;
    let anomalous = ds.events.iter().filter(|e| e.label.is_anomalous()).count();
    Ok(format!(
        "gen-corpus: {} events ({} anomalous), {} word vectors -> {}",
        ds.events.len(),
        anomalous,
        words.len(),
        dir.display()
    ))
}
