//! Deterministic synthetic data: a labeled supercomputer-style log corpus,
//! a WordPiece vocabulary and word-vector table covering it, and random
//! event texts for benchmarks.
//!
//! Corpus lines look like `<label> <epoch> <component> <severity> <message>`
//! where label `-` marks a normal event and any other token an alert.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ingest::{FieldRule, FieldSpec, IngestConfig, COMPONENT, LABEL, MESSAGE, SEVERITY, TIMESTAMP};
use crate::tensor::{normal_vec, seeded_rng};
use crate::wordpiece::{Vocab, CLS, CONTINUATION, PAD, SEP, UNK};

const COMPONENTS: [&str; 6] = ["KERNEL", "APP", "RAS", "MMCS", "LINKCARD", "HARDWARE"];

const NORMAL: [&str; 14] = [
    "generating core.{n}",
    "total of {n} ddr error(s) detected and corrected",
    "instruction cache parity error corrected",
    "CE sym {n}, at {hex}, mask {hex}",
    "idoproxydb has been started: Name: DRV{n} Input parameters: -enableflush",
    "node card {node} status ok",
    "connection from {ip} accepted on port {n}",
    "session opened for user {user} by uid {n}",
    "fan speed at {n} rpm within range",
    "temperature reading {n} celsius nominal",
    "job {n} started on partition {node}",
    "job {n} completed successfully in {n} seconds",
    "mounted filesystem {path} read write",
    "ciod: generated {n} core files for program {path}",
];

const ANOMALOUS: [(&str, &str); 7] = [
    ("KERNDTLB", "data TLB error interrupt"),
    ("KERNSTOR", "data storage interrupt"),
    ("KERNPAN", "kernel panic: machine check at {hex}"),
    ("APPREAD", "ciod: failed to read message prefix on control stream {ip}"),
    ("KERNTERM", "rts: kernel terminated for reason {n}"),
    ("LINKFAIL", "link card failure detected on port {n}"),
    ("MCECC", "uncorrectable torus ecc fatal error at address {hex} on node {node}"),
];

const USERS: [&str; 5] = ["root", "alice", "sched", "operator", "backup"];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("balanced placeholder");
        match &rest[open + 1..close] {
            "n" => out.push_str(&rng.random_range(0..100_000).to_string()),
            "hex" => out.push_str(&format!("0x{:08x}", rng.random::<u32>())),
            "ip" => {
                let o: [u8; 4] = rng.random();
                out.push_str(&format!("{}.{}.{}.{}", o[0], o[1], o[2], o[3]))
            }
            "node" => out.push_str(&format!(
                "R{:02}-M{}-N{}",
                rng.random_range(0..64),
                rng.random_range(0..2),
                rng.random_range(0..16)
            )),
            "path" => out.push_str(&format!("/p/gb{}/home/run{}/out", rng.random_range(1..4), rng.random_range(0..500))),
            "user" => out.push_str(USERS.choose(rng).expect("non-empty")),
            other => panic!("unknown placeholder {other}"),
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

/// `n` corpus lines with roughly `anomaly_rate` alerts arriving in short
/// bursts. Same `(n, seed, anomaly_rate)` gives the same lines.
pub fn generate_corpus(n: usize, seed: u64, anomaly_rate: f64) -> Vec<String> {
    let mut rng = seeded_rng(seed);
    let mut epoch: u64 = 1_117_838_570;
    let mut burst = 0usize;
    let mut burst_kind = 0usize;
    let burst_len = 4.0;
    (0..n)
        .map(|_| {
            epoch += rng.random_range(0..3);
            if burst == 0 && rng.random_bool((anomaly_rate / burst_len).clamp(0.0, 1.0)) {
                burst = rng.random_range(2..=6);
                burst_kind = rng.random_range(0..ANOMALOUS.len());
            }
            let component = *COMPONENTS.choose(&mut rng).expect("non-empty");
            if burst > 0 {
                burst -= 1;
                // bursts mostly repeat one alert type
                let kind = if rng.random_bool(0.8) {
                    burst_kind
                } else {
                    rng.random_range(0..ANOMALOUS.len())
                };
                let (label, tpl) = ANOMALOUS[kind];
                let severity = if rng.random_bool(0.5) { "FATAL" } else { "FAILURE" };
                format!("{label} {epoch} {component} {severity} {}", fill(tpl, &mut rng))
            } else {
                let tpl = NORMAL.choose(&mut rng).expect("non-empty");
                let severity = if rng.random_bool(0.85) { "INFO" } else { "WARNING" };
                format!("- {epoch} {component} {severity} {}", fill(tpl, &mut rng))
            }
        })
        .collect()
}

/// Field layout for [`generate_corpus`] lines.
pub fn corpus_ingest_config() -> IngestConfig {
    let spec = |name: &str, rule| FieldSpec { name: name.into(), rule };
    IngestConfig {
        fields: vec![
            spec(LABEL, FieldRule::Column { column: 0 }),
            spec(TIMESTAMP, FieldRule::Column { column: 1 }),
            spec(COMPONENT, FieldRule::Column { column: 2 }),
            spec(SEVERITY, FieldRule::Column { column: 3 }),
            spec(MESSAGE, FieldRule::RestFrom { rest_from: 4 }),
        ],
        required: vec![TIMESTAMP.into(), MESSAGE.into()],
        masks: None,
    }
}

/// Word frequencies over preprocessed texts, most frequent first, ties by word.
pub fn word_counts<S: AsRef<str>>(texts: &[S]) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Specials, single letters with their continuation pieces, a few common
/// suffixes, then up to `max_words` corpus words. Words that did not make the
/// cut still tokenize through the letter pieces.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_words: usize) -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    for c in 'a'..='z' {
        tokens.push(c.to_string());
    }
    for c in 'a'..='z' {
        tokens.push(format!("{CONTINUATION}{c}"));
    }
    for suffix in ["ing", "ed", "er", "ion", "ly"] {
        tokens.push(format!("{CONTINUATION}{suffix}"));
    }
    for (w, _) in word_counts(texts).into_iter().take(max_words) {
        if w.chars().count() > 1 {
            tokens.push(w);
        }
    }
    Vocab::new(tokens).expect("generated vocabulary is valid")
}

/// A word2vec-format text table (`count dim` header) with N(0, 1/dim)
/// vectors for `words`, in the given order.
pub fn random_word_vectors<S: AsRef<str>>(words: &[S], dim: usize, seed: u64) -> String {
    let mut rng = seeded_rng(seed);
    let std = 1.0 / (dim as f32).sqrt();
    let mut out = format!("{} {dim}\n", words.len());
    for w in words {
        out.push_str(w.as_ref());
        for v in normal_vec(&mut rng, dim, std) {
            out.push_str(&format!(" {v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// `n` texts of `min_len..=max_len` words drawn uniformly from `words`.
pub fn random_texts<S: AsRef<str>>(words: &[S], n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<String> {
    assert!(!words.is_empty() && min_len <= max_len);
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len)
                .map(|_| words[rng.random_range(0..words.len())].as_ref())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Non-special vocabulary entries without continuation pieces.
pub fn vocab_words(vocab: &Vocab) -> Vec<String> {
    (0..vocab.len() as u32)
        .filter_map(|i| vocab.token(i))
        .filter(|t| !t.starts_with('[') && !t.starts_with(CONTINUATION))
        .map(str::to_string)
        .collect()
}
