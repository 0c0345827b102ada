//! Subcommand implementations. Each reads its inputs from the output
//! directory, writes its artifact plus a `<artifact>.manifest.json` of the
//! effective settings, and returns a one-line summary.
//!
//! Artifacts depend only on inputs and the seed, so reruns are
//! byte-identical; timing reports are the exception.

use std::path::{Path, PathBuf};

use logsem::container::{self, load_embeddings, save_embeddings};
use logsem::detector::{load_detector, partition_windows, predict_events, save_detector, train_detector, Window};
use logsem::drain::{LogTemplate, ParseTree};
use logsem::encoder::Encoder;
use logsem::enhancer::{self, CrossSystemSet, EnhancerParams, Pair};
use logsem::eval::{
    precision_recall_f1, similarity_report, time_detection, time_embedding_generation, write_csv, ConfusionCounts,
    DetectionMetrics, MetricsRow, TimingRow,
};
use logsem::ingest::{load_dataset, Label, LogEvent};
use logsem::quant::{collect_stats, quantize_encoder, select_layers, CalibrationSet, LayerStats, QuantizedEncoder};
use logsem::representation::{encode_in_batches, Representation};
use logsem::static_embed::{fit_idf, load_embedding_table};
use logsem::synth;
use logsem::wordpiece::Vocab;
use logsem::Embedding;
use serde::Serialize;

use crate::config::{PipelineConfig, RepresentationChoice};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const EVENTS: &str = "events.json";
pub const TEMPLATES: &str = "templates.json";
pub const ASSIGNMENTS: &str = "template_assignments.json";
pub const CALIBRATION: &str = "calibration.json";
pub const CALIBRATION_STATS: &str = "calibration_stats.json";
pub const SYSBE: &str = "sysbe.lrep";
pub const CROSYS: &str = "crosys.lrep";
pub const ENHANCER_LOSS: &str = "enhancer_loss.csv";
pub const TIMING_EMBED: &str = "timing_embed.csv";
pub const TIMING_DETECT: &str = "timing_detect.csv";
pub const ABLATION: &str = "ablation.csv";

pub fn embeddings_file(rep: &RepresentationChoice) -> String {
    format!("embeddings.{}.lrep", rep.slug())
}

pub fn detector_file(rep: &RepresentationChoice) -> String {
    format!("detector.{}.lrep", rep.slug())
}

pub fn predictions_file(rep: &RepresentationChoice) -> String {
    format!("predictions.{}.csv", rep.slug())
}

pub fn metrics_file(rep: &RepresentationChoice) -> String {
    format!("metrics.{}.csv", rep.slug())
}

pub fn similarity_file(rep: &RepresentationChoice) -> String {
    format!("similarity.{}.json", rep.slug())
}

// Offsets deriving per-component seeds from the global seed.
const TEACHER_SEED: u64 = 1;
const STUDENT_SEED: u64 = 2;
const CALIBRATION_SEED: u64 = 3;
const CROSS_SYSTEM_SEED: u64 = 4;
const ENHANCER_SEED: u64 = 5;
const COMPARE_SEED: u64 = 6;
const MISMATCHED_SEED: u64 = 7;

/// Ablation switches; each adds its rows next to the full-method row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    NoEnhancer,
    NoQuant,
    NoCalibration,
    CalibSize,
}

/// Calibration sample sizes of the sweep.
pub const CALIBRATION_SWEEP: [usize; 4] = [30, 50, 70, 100];

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    artifact: String,
    system: &'a str,
    seed: u64,
    representation: String,
    config: &'a PipelineConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub calibration_events: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub delta_f1: f64,
}

#[derive(Serialize)]
struct AblationReport<'a> {
    rows: &'a [AblationRow],
    /// Embeddings of the unquantized variant equal the FP32 student plus
    /// enhancer path bit for bit.
    no_quant_bitwise_fp32: Option<bool>,
}

#[derive(Serialize)]
struct DetectionReport {
    representation: String,
    test_events: usize,
    counts: ConfusionCounts,
    metrics: DetectionMetrics,
}

#[derive(Serialize)]
struct SimilarityRow {
    representation: String,
    reference: String,
    cosine_mean: Option<f64>,
    spearman_rho: f64,
    t_statistic: f64,
    approx_p_value: f64,
    sampled_pairs: usize,
}

fn label_value(l: Label) -> Option<bool> {
    match l {
        Label::Normal => Some(false),
        Label::Anomalous => Some(true),
        Label::Unknown => None,
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)
            .map_err(|e| CliError::Runtime(logsem::Error::Io { path: cfg.output_dir.clone(), source: e }))?;
        Ok(Self { cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                path: p,
                producer: producer.to_string(),
            })
        }
    }

    fn seed(&self, offset: u64) -> u64 {
        self.cfg.seed.wrapping_add(offset)
    }

    fn manifest(&self, subcommand: &str, artifact: &Path) -> Result<()> {
        let name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let m = Manifest {
            subcommand,
            artifact: name.clone(),
            system: &self.cfg.system,
            seed: self.cfg.seed,
            representation: self.cfg.representation.to_string(),
            config: &self.cfg,
        };
        container::write_json(self.path(&format!("{name}.manifest.json")), &m)?;
        Ok(())
    }

    fn events(&self) -> Result<Vec<LogEvent>> {
        let p = self.require(EVENTS, "ingest")?;
        Ok(container::read_json(p)?)
    }

    fn train_len(&self, n: usize) -> usize {
        if n < 2 {
            return n;
        }
        ((n as f64 * self.cfg.train_fraction).round() as usize).clamp(1, n - 1)
    }

    fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::load(&self.cfg.vocab)?)
    }

    fn encoder(&self, spec: &crate::config::EncoderSpec, vocab: &Vocab, seed: u64) -> Result<Encoder> {
        let enc = match &spec.weights {
            Some(w) => Encoder::load(w)?,
            None => Encoder::random_init(spec.encoder_config(vocab.len()), seed)?,
        };
        if enc.config.vocab_size != vocab.len() {
            return Err(CliError::Config(format!(
                "encoder vocabulary has {} entries but {} has {}",
                enc.config.vocab_size,
                self.cfg.vocab.display(),
                vocab.len()
            )));
        }
        Ok(enc)
    }

    fn teacher(&self, vocab: &Vocab) -> Result<Encoder> {
        self.encoder(&self.cfg.teacher, vocab, self.seed(TEACHER_SEED))
    }

    fn student(&self, vocab: &Vocab) -> Result<Encoder> {
        self.encoder(&self.cfg.student, vocab, self.seed(STUDENT_SEED))
    }

    fn representation(&self, rep: &RepresentationChoice) -> Result<Representation> {
        Ok(match rep {
            RepresentationChoice::Static(name) => {
                let templates: Vec<LogTemplate> = container::read_json(self.require(TEMPLATES, "mine-templates")?)?;
                let table_path = self
                    .cfg
                    .static_tables
                    .get(name)
                    .ok_or_else(|| CliError::Config(format!("config field `static_tables.{name}` is not set")))?;
                Representation::Static {
                    table: load_embedding_table(table_path)?,
                    idf: fit_idf(&templates),
                }
            }
            RepresentationChoice::Teacher => {
                let vocab = self.vocab()?;
                Representation::Contextual {
                    encoder: self.teacher(&vocab)?,
                    vocab,
                }
            }
            RepresentationChoice::Student => {
                let vocab = self.vocab()?;
                Representation::Contextual {
                    encoder: self.student(&vocab)?,
                    vocab,
                }
            }
            RepresentationChoice::Qtybert => {
                let sysbe = self.require(SYSBE, "quantize")?;
                let crosys = self.require(CROSYS, "train-enhancer")?;
                let student = QuantizedEncoder::load(sysbe)?;
                let d_s = student.encoder.hidden_size();
                let d_t = self.cfg.teacher.hidden_size;
                let (enhancer, _) = EnhancerParams::load(crosys, d_s, d_t)?;
                Representation::Qtybert {
                    student,
                    vocab: self.vocab()?,
                    enhancer: Some(enhancer),
                }
            }
        })
    }

    pub fn ingest(&self) -> Result<String> {
        let layout = self.cfg.ingest.layout()?;
        let ds = load_dataset(&self.cfg.dataset, &layout, &self.cfg.ingest.mask_rules())?;
        let path = self.path(EVENTS);
        container::write_json(&path, &ds.events)?;
        self.manifest("ingest", &path)?;
        let anomalous = ds.events.iter().filter(|e| e.label.is_anomalous()).count();
        Ok(format!(
            "ingest: {} events ({} anomalous, {} lines skipped) -> {}",
            ds.events.len(),
            anomalous,
            ds.skipped,
            path.display()
        ))
    }

    pub fn mine_templates(&self) -> Result<String> {
        let events = self.events()?;
        let mut tree = ParseTree::new(self.cfg.drain)?;
        let assignments: Vec<usize> = events.iter().map(|e| tree.mine_template(&e.tokens())).collect();
        let path = self.path(TEMPLATES);
        container::write_json(&path, &tree.templates())?;
        container::write_json(self.path(ASSIGNMENTS), &assignments)?;
        self.manifest("mine-templates", &path)?;
        Ok(format!(
            "mine-templates: {} templates from {} events -> {}",
            tree.templates().len(),
            events.len(),
            path.display()
        ))
    }

    pub fn embed(&self) -> Result<String> {
        let rep = &self.cfg.representation;
        let events = self.events()?;
        let texts: Vec<&str> = events.iter().map(|e| e.text.as_str()).collect();
        let embs = self.representation(rep)?.embed(&texts)?;
        let path = self.path(&embeddings_file(rep));
        save_embeddings(&path, &embs)?;
        self.manifest("embed", &path)?;
        Ok(format!(
            "embed: {} {}-dimensional {} embeddings -> {}",
            embs.len(),
            embs.first().map_or(0, Vec::len),
            rep,
            path.display()
        ))
    }

    fn train_texts<'a>(&self, events: &'a [LogEvent]) -> Vec<&'a str> {
        let n = self.train_len(events.len());
        events[..n].iter().map(|e| e.text.as_str()).collect()
    }

    fn calibration_set(&self, events: &[LogEvent], size: usize) -> CalibrationSet {
        CalibrationSet::sample(&self.cfg.system, &self.train_texts(events), size, self.seed(CALIBRATION_SEED))
    }

    pub fn calibrate(&self) -> Result<String> {
        let events = self.events()?;
        let vocab = self.vocab()?;
        let student = self.student(&vocab)?;
        let calib = self.calibration_set(&events, self.cfg.quantization.calibration_size);
        let stats = collect_stats(&student, &vocab, &calib)?;
        container::write_json(self.path(CALIBRATION), &calib)?;
        let path = self.path(CALIBRATION_STATS);
        container::write_json(&path, &stats)?;
        self.manifest("calibrate", &path)?;
        Ok(format!(
            "calibrate: statistics for {} layers from {} {} events -> {}",
            stats.len(),
            calib.size(),
            calib.system_id,
            path.display()
        ))
    }

    pub fn quantize(&self) -> Result<String> {
        let stats: LayerStats = container::read_json(self.require(CALIBRATION_STATS, "calibrate")?)?;
        let vocab = self.vocab()?;
        let student = self.student(&vocab)?;
        let policy = self.cfg.quantization.policy();
        let selection = select_layers(&student.config, policy.fraction);
        let q = quantize_encoder(&student, &stats, &selection, &policy)?;
        let path = self.path(SYSBE);
        q.save(&path)?;
        self.manifest("quantize", &path)?;
        let excluded = if q.excluded.is_empty() {
            String::new()
        } else {
            format!(", {} left FP32 for degenerate ranges", q.excluded.len())
        };
        Ok(format!(
            "quantize: {} of {} linear layers INT8{} -> {}",
            q.selection.len(),
            student.config.linear_layer_count(),
            excluded,
            path.display()
        ))
    }

    /// Per-system unlabeled samples: this system's training events plus any
    /// extra systems' events.
    fn cross_system_samples(&self, events: &[LogEvent]) -> Result<Vec<(String, Vec<String>)>> {
        let n = self.cfg.enhancer.samples_per_system;
        let mut systems = vec![(
            self.cfg.system.clone(),
            CalibrationSet::sample(&self.cfg.system, &self.train_texts(events), n, self.seed(CROSS_SYSTEM_SEED)).events,
        )];
        let layout = self.cfg.ingest.layout()?;
        for (i, s) in self.cfg.enhancer.extra_systems.iter().enumerate() {
            let ds = load_dataset(&s.dataset, &layout, &self.cfg.ingest.mask_rules())?;
            let texts: Vec<&str> = ds.events.iter().map(|e| e.text.as_str()).collect();
            let seed = self.seed(CROSS_SYSTEM_SEED).wrapping_add(1 + i as u64);
            systems.push((s.id.clone(), CalibrationSet::sample(&s.id, &texts, n, seed).events));
        }
        Ok(systems)
    }

    pub fn train_enhancer(&self) -> Result<String> {
        let student = QuantizedEncoder::load(self.require(SYSBE, "quantize")?)?;
        let events = self.events()?;
        let vocab = self.vocab()?;
        let teacher = self.teacher(&vocab)?;
        let systems = self.cross_system_samples(&events)?;
        let set = CrossSystemSet::build(
            &systems,
            |t| encode_in_batches(&student.encoder, &vocab, t),
            |t| encode_in_batches(&teacher, &vocab, t),
        )?;
        let out = enhancer::train(&set.pairs, &self.cfg.enhancer.train_config(self.seed(ENHANCER_SEED)))?;
        let path = self.path(CROSYS);
        out.params.save(&path, &set.systems)?;
        let trace: Vec<LossRow> = out
            .loss_trace
            .iter()
            .enumerate()
            .map(|(epoch, loss)| LossRow { epoch, loss: *loss })
            .collect();
        write_csv(self.path(ENHANCER_LOSS), &trace)?;
        self.manifest("train-enhancer", &path)?;
        Ok(format!(
            "train-enhancer: r={} {}->{} on {} pairs from {} systems, loss {:.4} -> {:.4} -> {}",
            out.params.r,
            out.params.d_s,
            out.params.d_t,
            set.pairs.len(),
            set.systems.len(),
            out.loss_trace.first().copied().unwrap_or(f64::NAN),
            out.loss_trace.last().copied().unwrap_or(f64::NAN),
            path.display()
        ))
    }

    /// Embeddings of the configured representation and per-event labels.
    fn labeled_embeddings(&self) -> Result<(Vec<Embedding>, Vec<Option<bool>>)> {
        let rep = &self.cfg.representation;
        let embs = load_embeddings(self.require(&embeddings_file(rep), &format!("embed --representation {rep}"))?)?;
        let events = self.events()?;
        if embs.len() != events.len() {
            return Err(CliError::MissingArtifact {
                path: self.path(&embeddings_file(rep)),
                producer: format!("embed --representation {rep}` (the stored embeddings are stale"),
            });
        }
        Ok((embs, events.iter().map(|e| label_value(e.label)).collect()))
    }

    fn split_windows(&self, embs: &[Embedding], labels: &[Option<bool>]) -> Result<(Vec<Window>, Vec<Window>, usize)> {
        let n = self.train_len(embs.len());
        let spec = self.cfg.detector.window_spec();
        let train = partition_windows(&embs[..n], &labels[..n], &spec)?;
        let test = partition_windows(&embs[n..], &labels[n..], &spec)?;
        Ok((train, test, n))
    }

    pub fn train_detector(&self) -> Result<String> {
        let rep = &self.cfg.representation;
        let (embs, labels) = self.labeled_embeddings()?;
        let (train, _, n) = self.split_windows(&embs, &labels)?;
        let out = train_detector(&train, &self.cfg.detector)?;
        let path = self.path(&detector_file(rep));
        save_detector(&path, &out.params, &self.cfg.detector)?;
        let trace: Vec<LossRow> = out
            .loss_trace
            .iter()
            .enumerate()
            .map(|(epoch, loss)| LossRow { epoch, loss: *loss })
            .collect();
        write_csv(self.path(&format!("detector_loss.{}.csv", rep.slug())), &trace)?;
        self.manifest("train-detector", &path)?;
        Ok(format!(
            "train-detector: RNN on {} events in {} windows, final loss {:.4} -> {}",
            n,
            train.len(),
            out.loss_trace.last().copied().unwrap_or(f64::NAN),
            path.display()
        ))
    }

    pub fn detect(&self) -> Result<String> {
        let rep = &self.cfg.representation;
        let (params, manifest) = load_detector(self.require(&detector_file(rep), "train-detector")?)?;
        let (embs, labels) = self.labeled_embeddings()?;
        let (_, test, offset) = self.split_windows(&embs, &labels)?;
        let mut preds = predict_events(&params, &test, manifest.threshold)?;
        for p in &mut preds {
            p.index += offset;
        }
        logsem::detector::write_predictions_csv(self.path(&predictions_file(rep)), &preds)?;
        let counts = ConfusionCounts::from_predictions(&preds);
        let metrics = precision_recall_f1(&counts);
        let path = self.path(&metrics_file(rep));
        write_csv(&path, &[MetricsRow::new("RNN", rep.display_name(), &metrics)])?;
        container::write_json(
            path.with_extension("json"),
            &DetectionReport {
                representation: rep.to_string(),
                test_events: preds.len(),
                counts,
                metrics,
            },
        )?;
        self.manifest("detect", &path)?;
        Ok(format!(
            "detect: {} test events, P={:.2} R={:.2} F1={:.2} -> {}",
            preds.len(),
            100.0 * metrics.precision,
            100.0 * metrics.recall,
            100.0 * metrics.f1,
            path.display()
        ))
    }

    pub fn bench_embed(&self) -> Result<String> {
        let events = self.events()?;
        let texts: Vec<&str> = events.iter().map(|e| e.text.as_str()).collect();
        let mut methods = vec![RepresentationChoice::Teacher];
        if self.cfg.representation != RepresentationChoice::Teacher {
            methods.push(self.cfg.representation.clone());
        }
        let mut reports = Vec::new();
        for m in &methods {
            let repr = self.representation(m)?;
            reports.push(time_embedding_generation(
                m.display_name(),
                &self.cfg.system,
                |t| repr.embed(t),
                &texts,
                &self.cfg.bench,
            )?);
        }
        let rows: Vec<TimingRow> = reports.iter().map(TimingRow::from).collect();
        let path = self.path(TIMING_EMBED);
        write_csv(&path, &rows)?;
        container::write_json(path.with_extension("json"), &reports)?;
        self.manifest("bench-embed", &path)?;
        let parts: Vec<String> = reports
            .iter()
            .map(|r| format!("{} {:.3} ms/event", r.method, r.avg_ms_per_event))
            .collect();
        Ok(format!(
            "bench-embed: {} on {} cores -> {}",
            parts.join(", "),
            self.cfg.bench.cores,
            path.display()
        ))
    }

    pub fn bench_detect(&self) -> Result<String> {
        let rep = &self.cfg.representation;
        let (params, _) = load_detector(self.require(&detector_file(rep), "train-detector")?)?;
        let (embs, labels) = self.labeled_embeddings()?;
        let (_, test, _) = self.split_windows(&embs, &labels)?;
        let r = time_detection(&format!("RNN [{}]", rep.display_name()), &self.cfg.system, &params, &test, &self.cfg.bench)?;
        let path = self.path(TIMING_DETECT);
        write_csv(&path, &[TimingRow::from(&r)])?;
        container::write_json(path.with_extension("json"), &[&r])?;
        self.manifest("bench-detect", &path)?;
        Ok(format!(
            "bench-detect: {} events in {:.4} s ({:.4} ms/event) -> {}",
            r.event_count,
            r.total_seconds,
            r.avg_ms_per_event,
            path.display()
        ))
    }

    pub fn compare_embeddings(&self) -> Result<String> {
        let rep = &self.cfg.representation;
        let teacher = RepresentationChoice::Teacher;
        let reference = load_embeddings(self.require(&embeddings_file(&teacher), "embed --representation teacher")?)?;
        let own = load_embeddings(self.require(&embeddings_file(rep), &format!("embed --representation {rep}"))?)?;
        let report = similarity_report(&own, &reference, self.cfg.compare.max_pairs, self.seed(COMPARE_SEED))?;
        let path = self.path(&similarity_file(rep));
        container::write_json(&path, &report)?;
        write_csv(
            path.with_extension("csv"),
            &[SimilarityRow {
                representation: rep.display_name().into(),
                reference: teacher.display_name().into(),
                cosine_mean: report.cosine_mean,
                spearman_rho: report.spearman_rho,
                t_statistic: report.t_statistic,
                approx_p_value: report.approx_p_value,
                sampled_pairs: report.sampled_pairs,
            }],
        )?;
        self.manifest("compare-embeddings", &path)?;
        let cos = report.cosine_mean.map_or("n/a".to_string(), |c| format!("{c:.4}"));
        Ok(format!(
            "compare-embeddings: {} vs BERT cosine {} spearman {:.4} over {} pairs -> {}",
            rep.display_name(),
            cos,
            report.spearman_rho,
            report.sampled_pairs,
            path.display()
        ))
    }

    /// Trains the detector on the training split and scores the test split.
    fn score(&self, embs: &[Embedding], labels: &[Option<bool>]) -> Result<DetectionMetrics> {
        let (train, test, _) = self.split_windows(embs, labels)?;
        let out = train_detector(&train, &self.cfg.detector)?;
        let preds = predict_events(&out.params, &test, self.cfg.detector.threshold)?;
        Ok(precision_recall_f1(&ConfusionCounts::from_predictions(&preds)))
    }

    pub fn ablate(&self, switches: &[Switch]) -> Result<String> {
        let switches: Vec<Switch> = if switches.is_empty() {
            vec![Switch::NoEnhancer, Switch::NoQuant, Switch::NoCalibration, Switch::CalibSize]
        } else {
            switches.to_vec()
        };
        let events = self.events()?;
        let texts: Vec<&str> = events.iter().map(|e| e.text.as_str()).collect();
        let labels: Vec<Option<bool>> = events.iter().map(|e| label_value(e.label)).collect();
        let vocab = self.vocab()?;
        let student = self.student(&vocab)?;
        let teacher = self.teacher(&vocab)?;
        let policy = self.cfg.quantization.policy();
        let selection = select_layers(&student.config, policy.fraction);

        let systems = self.cross_system_samples(&events)?;
        let samples: Vec<String> = systems.iter().flat_map(|(_, e)| e.iter().cloned()).collect();
        let sample_refs: Vec<&str> = samples.iter().map(String::as_str).collect();
        let teacher_embs = encode_in_batches(&teacher, &vocab, &sample_refs)?;
        let train_cfg = self.cfg.enhancer.train_config(self.seed(ENHANCER_SEED));

        let quantized = |calib: &CalibrationSet| -> Result<QuantizedEncoder> {
            let stats = collect_stats(&student, &vocab, calib)?;
            Ok(quantize_encoder(&student, &stats, &selection, &policy)?)
        };
        let enhancer_for = |q: &QuantizedEncoder| -> Result<EnhancerParams> {
            let hs = encode_in_batches(&q.encoder, &vocab, &sample_refs)?;
            let pairs: Vec<Pair> = hs
                .into_iter()
                .zip(&teacher_embs)
                .map(|(s, t)| Pair { student: s, teacher: t.clone() })
                .collect();
            Ok(enhancer::train(&pairs, &train_cfg)?.params)
        };
        let evaluate = |q: QuantizedEncoder, e: Option<EnhancerParams>| -> Result<(DetectionMetrics, Vec<Embedding>)> {
            let repr = Representation::Qtybert {
                student: q,
                vocab: vocab.clone(),
                enhancer: e,
            };
            let embs = repr.embed(&texts)?;
            Ok((self.score(&embs, &labels)?, embs))
        };

        let mut rows: Vec<(String, Option<usize>, DetectionMetrics)> = Vec::new();
        let size = self.cfg.quantization.calibration_size;
        let full_q = quantized(&self.calibration_set(&events, size))?;
        let full_e = enhancer_for(&full_q)?;
        let (full, _) = evaluate(full_q.clone(), Some(full_e))?;
        rows.push(("QTyBERT".into(), Some(size), full));
        let mut parity = None;

        for s in &switches {
            match s {
                Switch::NoEnhancer => {
                    let (m, _) = evaluate(full_q.clone(), None)?;
                    rows.push(("w/o CroSysEh".into(), Some(size), m));
                }
                Switch::NoQuant => {
                    let q = QuantizedEncoder::unquantized(student.clone());
                    let e = enhancer_for(&q)?;
                    let fp32 = e.enhance_batch(&encode_in_batches(&student, &vocab, &texts)?)?;
                    let (m, embs) = evaluate(q, Some(e))?;
                    parity = Some(embs == fp32);
                    rows.push(("w/o SysBE".into(), None, m));
                }
                Switch::NoCalibration => {
                    // calibrated on random vocabulary sequences instead of this system's events
                    let words = synth::vocab_words(&vocab);
                    let random = synth::random_texts(&words, size, 4, 16, self.seed(MISMATCHED_SEED));
                    let q = quantized(&CalibrationSet::new("random-vocabulary", random))?;
                    let e = enhancer_for(&q)?;
                    let (m, _) = evaluate(q, Some(e))?;
                    rows.push(("w/o calibration".into(), Some(size), m));
                }
                Switch::CalibSize => {
                    for n in CALIBRATION_SWEEP {
                        let q = quantized(&self.calibration_set(&events, n))?;
                        let e = enhancer_for(&q)?;
                        let (m, _) = evaluate(q, Some(e))?;
                        rows.push((format!("calibration N={n}"), Some(n), m));
                    }
                }
            }
        }

        let pct = |v: f64| (v * 10_000.0).round() / 100.0;
        let base_f1 = pct(full.f1);
        let table: Vec<AblationRow> = rows
            .into_iter()
            .map(|(variant, calibration_events, m)| AblationRow {
                variant,
                calibration_events,
                precision: pct(m.precision),
                recall: pct(m.recall),
                f1: pct(m.f1),
                delta_f1: ((pct(m.f1) - base_f1) * 100.0).round() / 100.0,
            })
            .collect();
        let path = self.path(ABLATION);
        write_csv(&path, &table)?;
        container::write_json(
            path.with_extension("json"),
            &AblationReport {
                rows: &table,
                no_quant_bitwise_fp32: parity,
            },
        )?;
        self.manifest("ablate", &path)?;
        if parity == Some(false) {
            return Err(CliError::Runtime(logsem::Error::Contract(
                "unquantized variant differs from the FP32 path".into(),
            )));
        }
        Ok(format!("ablate: {} rows (QTyBERT F1 {:.2}) -> {}", table.len(), base_f1, path.display()))
    }
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}
