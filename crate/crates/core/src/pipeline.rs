//! The three-stage lifecycle: `setup` instantiates and persists the
//! training actors (vocabulary, model, dataset fingerprints), `train`
//! runs the seeded loop with checkpointing and periodic validation, and
//! `generate` decodes a split, scores it and dumps predictions.
//!
//! An artifacts directory is self-contained: given it and the data files,
//! training and generation need nothing else.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{apply_overrides, load_config, ConfigError, RunConfig};
use crate::metadata::{
    parse_metadata_tsv_for_split, validate_records, MetadataError, Split, SplitTable, Violation,
};
use crate::metaproc::{
    parse_mixed_tsv_for_split, process_mixed, validate_mixed_records, MetaprocError, MixedTable,
};
use crate::metrics::{self, EvalResult, MetricsError};
use crate::modality::{Modality, SignalExtensions};
use crate::model::{
    load_checkpoint, save_checkpoint, AdamState, Model, ModelError, ModelSpec, RunMode,
};
use crate::processors::{
    collate, collate_streams, Batch, ProcessError, SampleProcessor, VocabError, Vocabulary,
};
use crate::signal::{probe_num_frames, SignalError};

pub const SNAPSHOT_FILE: &str = "config.snapshot.yaml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INIT_CHECKPOINT: &str = "checkpoint-init.ckpt";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint-best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Metaproc(#[from] MetaprocError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{split} split failed validation:\n{}", format_violations(.violations))]
    ValidationFailed {
        split: Split,
        violations: Vec<Violation>,
    },
    #[error("cannot probe signal shape: {0}")]
    SignalProbeFailed(String),
    #[error("config key `{0}` must point to a metadata file for this command")]
    MissingDataFile(&'static str),
    #[error("unknown metric {0:?} (supported: bleu, chrf, perplexity)")]
    UnknownMetric(String),
    #[error("unsupported model configuration: {0}")]
    UnsupportedModel(String),
    #[error("task {task:?} does not match the artifacts modality {modality}")]
    TaskMismatch { task: String, modality: Modality },
    #[error("artifacts directory {0:?} is missing {1}")]
    MissingArtifact(PathBuf, String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl From<SignalError> for PipelineError {
    fn from(e: SignalError) -> Self {
        PipelineError::SignalProbeFailed(e.to_string())
    }
}

/// The training task selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Seq2Seq,
    MixedSeq2Seq,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Seq2Seq => "seq2seq",
            Task::MixedSeq2Seq => "mixed-seq2seq",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq2seq" => Ok(Task::Seq2Seq),
            "mixed-seq2seq" => Ok(Task::MixedSeq2Seq),
            other => Err(format!(
                "unknown task {other:?} (known: seq2seq, mixed-seq2seq)"
            )),
        }
    }
}

/// Identity of one dataset file at setup time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub split: Split,
    pub path: String,
    pub rows: usize,
    pub sha256: String,
}

/// What `setup` persists alongside the config snapshot and vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactsManifest {
    pub modality: Modality,
    pub input_dim: Option<usize>,
    pub vocab_file: String,
    pub vocab_hash: String,
    pub spec: ModelSpec,
    pub fingerprints: Vec<DatasetFingerprint>,
    pub init_checkpoint: String,
}

/// A populated artifacts directory.
#[derive(Debug, Clone)]
pub struct SetupArtifacts {
    pub dir: PathBuf,
    pub manifest: ArtifactsManifest,
}

enum Dataset {
    Plain(SplitTable),
    Mixed(MixedTable),
}

impl Dataset {
    fn len(&self) -> usize {
        match self {
            Dataset::Plain(t) => t.records.len(),
            Dataset::Mixed(t) => t.records.len(),
        }
    }

    fn output_text(&self, row: usize) -> &str {
        match self {
            Dataset::Plain(t) => &t.records[row].output,
            Dataset::Mixed(t) => &t.records[row].label,
        }
    }

    fn field_text(&self, row: usize, field: &str) -> Option<&str> {
        match self {
            Dataset::Plain(t) => {
                let r = &t.records[row];
                match field {
                    "signal" => Some(&r.signal),
                    "encoder_prompt" => Some(&r.encoder_prompt),
                    "decoder_prompt" => Some(&r.decoder_prompt),
                    "output" => Some(&r.output),
                    _ => None,
                }
            }
            Dataset::Mixed(t) => {
                let r = &t.records[row];
                match field {
                    "encoder_input" => Some(&r.encoder_input),
                    "decoder_input" => Some(&r.decoder_input),
                    "label" => Some(&r.label),
                    _ => None,
                }
            }
        }
    }

    /// Paths of signal files referenced by one record.
    fn signal_paths(
        &self,
        row: usize,
        extensions: &SignalExtensions,
    ) -> Result<Vec<String>, PipelineError> {
        match self {
            Dataset::Plain(t) => {
                let r = &t.records[row];
                if r.signal.is_empty() || extensions.modality_of(&r.signal).is_none() {
                    Ok(Vec::new())
                } else {
                    Ok(vec![r.signal.clone()])
                }
            }
            Dataset::Mixed(t) => {
                let segments =
                    crate::metaproc::detect_signals(&t.records[row].encoder_input, extensions)?;
                Ok(segments
                    .into_iter()
                    .filter_map(|s| match s {
                        crate::metaproc::Segment::Signal { path, .. } => Some(path),
                        _ => None,
                    })
                    .collect())
            }
        }
    }

    fn batch(
        &self,
        rows: &[usize],
        modality: Modality,
        processor: &SampleProcessor<'_>,
        extensions: &SignalExtensions,
        vocab: &Vocabulary,
    ) -> Result<Batch, PipelineError> {
        match self {
            Dataset::Plain(t) => {
                let inputs = rows
                    .iter()
                    .map(|&row| processor.process_sample(&t.records[row], row, modality))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(collate(&inputs, vocab)?)
            }
            Dataset::Mixed(t) => {
                let mixed = rows
                    .iter()
                    .map(|&row| process_mixed(&t.records[row], row, processor, extensions))
                    .collect::<Result<Vec<_>, _>>()?;
                let streams = mixed.iter().map(|m| m.stream.clone()).collect();
                let prompts: Vec<_> = mixed.iter().map(|m| m.decoder_prompt_tokens.clone()).collect();
                let labels: Vec<_> = mixed.iter().map(|m| m.label_tokens.clone()).collect();
                let sources = mixed.iter().map(|m| m.source_index).collect();
                Ok(collate_streams(streams, &prompts, &labels, sources, vocab)?)
            }
        }
    }
}

fn load_dataset(path: &Path, split: Split, modality: Modality) -> Result<Dataset, PipelineError> {
    match modality {
        Modality::Mixed => Ok(Dataset::Mixed(parse_mixed_tsv_for_split(path, split)?)),
        _ => Ok(Dataset::Plain(parse_metadata_tsv_for_split(path, split)?)),
    }
}

fn validate_dataset(
    dataset: &Dataset,
    modality: Modality,
    extensions: &SignalExtensions,
) -> Vec<Violation> {
    match dataset {
        Dataset::Plain(t) => validate_records(t, modality, extensions).violations,
        Dataset::Mixed(t) => validate_mixed_records(t, extensions),
    }
}

/// Instantiates every training actor and persists them.
///
/// Builds (or loads) the vocabulary, applies the control-token extension,
/// probes the signal feature width from the first training sample,
/// initializes the model from `training.seed` and writes the artifacts
/// directory (config snapshot, vocabulary, manifest, initial checkpoint).
pub fn setup(modality: Modality, config: &RunConfig) -> Result<SetupArtifacts, PipelineError> {
    if config.model.backbone_type != "tiny-transformer" {
        return Err(PipelineError::UnsupportedModel(format!(
            "backbone_type {:?} is not available in this build (available: tiny-transformer)",
            config.model.backbone_type
        )));
    }
    if let Some(t) = &config.model.model_type {
        if t != "default_multimodal_encoder_decoder" {
            return Err(PipelineError::UnsupportedModel(format!(
                "model type {t:?} is not available (available: default_multimodal_encoder_decoder)"
            )));
        }
    }

    let extensions = config.signal_extensions();
    let train_path = config
        .data
        .train_metadata_file
        .as_ref()
        .ok_or(PipelineError::MissingDataFile("data.train_metadata_file"))?;
    let train = load_dataset(train_path, Split::Train, modality)?;

    let mut tables = vec![(Split::Train, &train, train_path.clone())];
    let validation = match &config.data.validation_metadata_file {
        Some(path) => Some((load_dataset(path, Split::Validation, modality)?, path.clone())),
        None => None,
    };
    if let Some((ds, path)) = &validation {
        tables.push((Split::Validation, ds, path.clone()));
    }
    let test = match &config.data.test_metadata_file {
        Some(path) => Some((load_dataset(path, Split::Test, modality)?, path.clone())),
        None => None,
    };
    if let Some((ds, path)) = &test {
        tables.push((Split::Test, ds, path.clone()));
    }

    for (split, dataset, _) in &tables {
        let violations = validate_dataset(dataset, modality, &extensions);
        if !violations.is_empty() {
            return Err(PipelineError::ValidationFailed {
                split: *split,
                violations,
            });
        }
    }

    // Vocabulary: load, or build from the training split's text fields.
    let vocab = match &config.processor.text_tokenizer_path {
        Some(path) => Vocabulary::load(path)?,
        None => {
            let corpus = training_corpus(&train, modality, &extensions)?;
            crate::processors::build_vocabulary(corpus, config.processor.vocab_min_count)?
        }
    };
    let vocab = if config.processor.new_vocabulary.is_empty() {
        vocab
    } else {
        vocab.extended(&config.processor.new_vocabulary)
    };

    let input_dim = probe_input_dim(&train, modality, config, &vocab, &extensions)?;

    let spec = ModelSpec {
        extractor_type: config.model.extractor_type,
        mapper_type: config.model.multimodal_mapper_type,
        backbone_type: crate::model::BackboneType::TinyTransformer,
        d_model: config.model.d_model,
        n_layers: config.model.n_layers,
        n_heads: config.model.n_heads,
        d_ff: config.model.d_ff,
        input_dim,
        vocab_size: vocab.size(),
        dropout: config.model.dropout,
        max_positions: config.model.max_positions,
    };
    let vocab_hash = vocab.content_hash();

    let model = match &config.model.pretrained_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.ensure_matches(&spec, &vocab_hash)?;
            Model {
                spec: ckpt.spec,
                params: ckpt.params,
            }
        }
        None => Model::init(spec.clone(), config.training.seed)?,
    };

    let dir = config.training.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
        path: dir.clone(),
        source,
    })?;
    vocab.save(dir.join(VOCAB_FILE))?;
    config.save_snapshot(dir.join(SNAPSHOT_FILE))?;
    save_checkpoint(
        dir.join(INIT_CHECKPOINT),
        &model.params,
        None,
        0,
        0,
        &spec,
        &vocab_hash,
    )?;

    let mut fingerprints = Vec::new();
    for (split, dataset, path) in &tables {
        fingerprints.push(DatasetFingerprint {
            split: *split,
            path: path.to_string_lossy().into_owned(),
            rows: dataset.len(),
            sha256: sha256_file(path)?,
        });
    }

    let manifest = ArtifactsManifest {
        modality,
        input_dim,
        vocab_file: VOCAB_FILE.to_string(),
        vocab_hash: hex(&vocab_hash),
        spec,
        fingerprints,
        init_checkpoint: INIT_CHECKPOINT.to_string(),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json).map_err(|source| PipelineError::Io {
        path: dir.join(MANIFEST_FILE),
        source,
    })?;

    Ok(SetupArtifacts { dir, manifest })
}

fn training_corpus(
    train: &Dataset,
    modality: Modality,
    extensions: &SignalExtensions,
) -> Result<Vec<String>, PipelineError> {
    let mut corpus = Vec::new();
    match train {
        Dataset::Plain(t) => {
            for r in &t.records {
                corpus.push(r.encoder_prompt.clone());
                corpus.push(r.decoder_prompt.clone());
                corpus.push(r.output.clone());
                if modality == Modality::Text2Text && !r.signal.is_empty() {
                    corpus.push(r.signal.clone());
                }
            }
        }
        Dataset::Mixed(t) => {
            for r in &t.records {
                for segment in crate::metaproc::detect_signals(&r.encoder_input, extensions)? {
                    if let crate::metaproc::Segment::Text { content } = segment {
                        corpus.push(content);
                    }
                }
                corpus.push(r.decoder_input.clone());
                corpus.push(r.label.clone());
            }
        }
    }
    Ok(corpus)
}

fn probe_input_dim(
    train: &Dataset,
    modality: Modality,
    config: &RunConfig,
    vocab: &Vocabulary,
    extensions: &SignalExtensions,
) -> Result<Option<usize>, PipelineError> {
    match modality {
        Modality::Text2Text => Ok(None),
        Modality::Image2Text => {
            Ok(Some(config.processor.image_height * config.processor.image_width))
        }
        Modality::Pose2Text | Modality::Features2Text | Modality::Video2Text => {
            let processor = SampleProcessor::new(vocab, config.processor_config())?;
            let Dataset::Plain(table) = train else {
                unreachable!("plain modalities load plain tables")
            };
            for (row, record) in table.records.iter().enumerate() {
                if record.signal.is_empty() {
                    continue;
                }
                let features = processor
                    .load_signal_features(&record.signal, record, row, modality)
                    .map_err(|e| PipelineError::SignalProbeFailed(e.to_string()))?;
                return Ok(Some(features.ncols()));
            }
            Err(PipelineError::SignalProbeFailed(format!(
                "no record in the training split carries a signal for {modality}"
            )))
        }
        Modality::Mixed => {
            let processor = SampleProcessor::new(vocab, config.processor_config())?;
            let Dataset::Mixed(table) = train else {
                unreachable!("mixed modality loads mixed tables")
            };
            for (row, record) in table.records.iter().enumerate() {
                let mixed = process_mixed(record, row, &processor, extensions)
                    .map_err(|e| PipelineError::SignalProbeFailed(e.to_string()))?;
                for block in &mixed.stream.blocks {
                    if let crate::processors::StreamBlock::Features(f) = block {
                        return Ok(Some(f.ncols()));
                    }
                }
            }
            Ok(None) // pure-text mixed dataset
        }
    }
}

/// Loads the persisted actors back from an artifacts directory.
pub fn load_artifacts(dir: &Path) -> Result<(ArtifactsManifest, RunConfig, Vocabulary), PipelineError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(PipelineError::MissingArtifact(
            dir.to_path_buf(),
            MANIFEST_FILE.to_string(),
        ));
    }
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|source| PipelineError::Io {
            path: manifest_path.clone(),
            source,
        })?;
    let manifest: ArtifactsManifest =
        serde_json::from_str(&manifest_text).map_err(|e| PipelineError::MissingArtifact(
            dir.to_path_buf(),
            format!("a readable manifest ({e})"),
        ))?;
    let config = load_config(dir.join(SNAPSHOT_FILE))?;
    let vocab = Vocabulary::load(dir.join(&manifest.vocab_file))?;
    if hex(&vocab.content_hash()) != manifest.vocab_hash {
        return Err(PipelineError::MissingArtifact(
            dir.to_path_buf(),
            "a vocabulary matching the manifest hash".to_string(),
        ));
    }
    Ok((manifest, config, vocab))
}

/// One structured log record per step or evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ppl: Option<f64>,
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_loss: f64,
    pub steps_run: u64,
}

/// Runs the training loop inside an artifacts directory.
///
/// Epochs iterate the filtered training split in a seeded shuffle
/// (`seed + epoch`); the step counter, optimizer moments and dropout RNG
/// position all live in checkpoints, so resuming from one reproduces the
/// uninterrupted run exactly.
pub fn train(
    artifacts_dir: &Path,
    task: Task,
    overrides: &[(String, String)],
) -> Result<TrainOutcome, PipelineError> {
    let (manifest, mut config, vocab) = load_artifacts(artifacts_dir)?;
    apply_overrides(&mut config, overrides)?;
    let modality = manifest.modality;
    let expects_mixed = modality == Modality::Mixed;
    if expects_mixed != (task == Task::MixedSeq2Seq) {
        return Err(PipelineError::TaskMismatch {
            task: task.as_str().to_string(),
            modality,
        });
    }

    let extensions = config.signal_extensions();
    let mut processor_config = config.processor_config();
    processor_config.input_dim = manifest.input_dim;
    let processor = SampleProcessor::new(&vocab, processor_config)?;

    let train_path = config
        .data
        .train_metadata_file
        .as_ref()
        .ok_or(PipelineError::MissingDataFile("data.train_metadata_file"))?;
    let train_data = load_dataset(train_path, Split::Train, modality)?;
    let kept = apply_filters(&train_data, &config, &vocab, &extensions)?;
    if kept.is_empty() {
        return Err(PipelineError::ValidationFailed {
            split: Split::Train,
            violations: vec![Violation {
                row: 0,
                message: "all training records were filtered out".to_string(),
            }],
        });
    }

    let validation = if config.training.eval_every > 0 {
        let path = config
            .data
            .validation_metadata_file
            .as_ref()
            .ok_or(PipelineError::MissingDataFile("data.validation_metadata_file"))?;
        Some(load_dataset(path, Split::Validation, modality)?)
    } else {
        None
    };

    let vocab_hash = vocab.content_hash();
    let seed = config.training.seed;
    let (mut model, mut opt, start_step, rng_pos) = match &config.training.resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.ensure_matches(&manifest.spec, &vocab_hash)?;
            let opt = ckpt.optimizer.unwrap_or_default();
            (
                Model {
                    spec: ckpt.spec,
                    params: ckpt.params,
                },
                opt,
                ckpt.step,
                ckpt.rng_word_pos,
            )
        }
        None => {
            let init_path = artifacts_dir.join(&manifest.init_checkpoint);
            let ckpt = load_checkpoint(&init_path)?;
            ckpt.ensure_matches(&manifest.spec, &vocab_hash)?;
            (
                Model {
                    spec: ckpt.spec,
                    params: ckpt.params,
                },
                AdamState::new(),
                0,
                0,
            )
        }
    };
    model.set_freeze_policy(config.training.freeze_policy);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_word_pos(rng_pos);

    let hyper = config.train_hyper();
    let batch_size = config.training.batch_size;
    let max_steps = config.training.max_steps as u64;
    let n = kept.len();
    let batches_per_epoch = n.div_ceil(batch_size) as u64;

    let log_path = artifacts_dir.join(TRAIN_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|source| PipelineError::Io {
            path: log_path.clone(),
            source,
        })?;

    let mut cached_epoch: Option<(u64, Vec<usize>)> = None;
    let mut best_val = f64::INFINITY;
    let mut last_loss = f64::NAN;
    let final_path = artifacts_dir.join(FINAL_CHECKPOINT);
    let best_path = artifacts_dir.join(BEST_CHECKPOINT);

    for step in (start_step + 1)..=max_steps {
        let global_batch = step - 1;
        let epoch = global_batch / batches_per_epoch;
        let pos = (global_batch % batches_per_epoch) as usize;
        let perm = match &cached_epoch {
            Some((e, perm)) if *e == epoch => perm,
            _ => {
                let mut perm: Vec<usize> = kept.clone();
                let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(epoch));
                perm.shuffle(&mut shuffle_rng);
                cached_epoch = Some((epoch, perm));
                &cached_epoch.as_ref().unwrap().1
            }
        };
        let lo = pos * batch_size;
        let hi = (lo + batch_size).min(n);
        let rows = &perm[lo..hi];

        let batch = train_data.batch(rows, modality, &processor, &extensions, &vocab)?;
        let loss = model.train_step(&batch, &mut opt, &hyper, &mut rng)?;
        last_loss = loss;
        write_log(
            &mut log,
            &log_path,
            &LogLine {
                step,
                loss: Some(loss),
                lr: Some(hyper.lr),
                val_loss: None,
                val_ppl: None,
            },
        )?;

        if config.training.eval_every > 0 && step % config.training.eval_every as u64 == 0 {
            let val = validation.as_ref().expect("checked above");
            let val_loss =
                mean_eval_loss(&model, val, modality, &processor, &extensions, &vocab, batch_size)?;
            let ppl = metrics::perplexity(val_loss)?;
            write_log(
                &mut log,
                &log_path,
                &LogLine {
                    step,
                    loss: None,
                    lr: None,
                    val_loss: Some(val_loss),
                    val_ppl: Some(ppl),
                },
            )?;
            if val_loss < best_val {
                best_val = val_loss;
                save_checkpoint(
                    &best_path,
                    &model.params,
                    Some(&opt),
                    step,
                    rng.get_word_pos(),
                    &model.spec,
                    &vocab_hash,
                )?;
            }
        }

        if config.training.checkpoint_every > 0
            && step % config.training.checkpoint_every as u64 == 0
        {
            let path = artifacts_dir.join(format!("checkpoint-step-{step:08}.ckpt"));
            save_checkpoint(
                &path,
                &model.params,
                Some(&opt),
                step,
                rng.get_word_pos(),
                &model.spec,
                &vocab_hash,
            )?;
        }
    }

    save_checkpoint(
        &final_path,
        &model.params,
        Some(&opt),
        max_steps,
        rng.get_word_pos(),
        &model.spec,
        &vocab_hash,
    )?;
    if best_val.is_infinite() {
        // No evaluation ran; the final state is the best known state.
        save_checkpoint(
            &best_path,
            &model.params,
            Some(&opt),
            max_steps,
            rng.get_word_pos(),
            &model.spec,
            &vocab_hash,
        )?;
    }

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
        final_loss: last_loss,
        steps_run: max_steps.saturating_sub(start_step),
    })
}

fn write_log(
    file: &mut std::fs::File,
    path: &Path,
    line: &LogLine,
) -> Result<(), PipelineError> {
    let json = serde_json::to_string(line).expect("log line serializes");
    writeln!(file, "{json}").map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn apply_filters(
    data: &Dataset,
    config: &RunConfig,
    vocab: &Vocabulary,
    extensions: &SignalExtensions,
) -> Result<Vec<usize>, PipelineError> {
    let filters = &config.data.filters;
    let mut kept = Vec::with_capacity(data.len());
    'rows: for row in 0..data.len() {
        for field in &filters.required_nonempty_fields {
            if let Some(value) = data.field_text(row, field) {
                if value.is_empty() {
                    continue 'rows;
                }
            }
        }
        if let Some(max_tokens) = filters.max_output_tokens {
            if vocab.tokenize(data.output_text(row)).len() > max_tokens {
                continue 'rows;
            }
        }
        if let Some(max_frames) = filters.max_signal_frames {
            for path in data.signal_paths(row, extensions)? {
                if Path::new(&path).exists() && probe_num_frames(&path)? > max_frames {
                    continue 'rows;
                }
            }
        }
        kept.push(row);
    }
    Ok(kept)
}

fn mean_eval_loss(
    model: &Model,
    data: &Dataset,
    modality: Modality,
    processor: &SampleProcessor<'_>,
    extensions: &SignalExtensions,
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<f64, PipelineError> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch_size) {
        let batch = data.batch(chunk, modality, processor, extensions, vocab)?;
        let out = model.forward(&batch, RunMode::Eval)?;
        total_nll += out.loss * out.scored_tokens as f64;
        total_tokens += out.scored_tokens;
    }
    if total_tokens == 0 {
        return Err(PipelineError::Model(ModelError::DegenerateBatch));
    }
    Ok(total_nll / total_tokens as f64)
}

/// Decodes a split, writes the prediction dump, and scores it.
///
/// Records are decoded one by one in file order with the configured beam
/// and length budget; `perplexity` scores the references under the model
/// instead of comparing strings.
pub fn generate(
    artifacts_dir: &Path,
    task: Task,
    checkpoint: Option<&Path>,
    metric_name: &str,
    split: Split,
    overrides: &[(String, String)],
) -> Result<(EvalResult, PathBuf), PipelineError> {
    let (manifest, mut config, vocab) = load_artifacts(artifacts_dir)?;
    apply_overrides(&mut config, overrides)?;
    if !["bleu", "chrf", "perplexity"].contains(&metric_name) {
        return Err(PipelineError::UnknownMetric(metric_name.to_string()));
    }
    let modality = manifest.modality;
    if (modality == Modality::Mixed) != (task == Task::MixedSeq2Seq) {
        return Err(PipelineError::TaskMismatch {
            task: task.as_str().to_string(),
            modality,
        });
    }
    let extensions = config.signal_extensions();
    let mut processor_config = config.processor_config();
    processor_config.input_dim = manifest.input_dim;
    let processor = SampleProcessor::new(&vocab, processor_config)?;

    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(artifacts_dir, &manifest)?,
    };
    let ckpt = load_checkpoint(&ckpt_path)?;
    ckpt.ensure_matches(&manifest.spec, &vocab.content_hash())?;
    let model = Model {
        spec: ckpt.spec,
        params: ckpt.params,
    };

    let (key, path) = match split {
        Split::Validation => (
            "data.validation_metadata_file",
            config.data.validation_metadata_file.as_ref(),
        ),
        Split::Test => ("data.test_metadata_file", config.data.test_metadata_file.as_ref()),
        Split::Train => ("data.train_metadata_file", config.data.train_metadata_file.as_ref()),
    };
    let data_path = path.ok_or(PipelineError::MissingDataFile(key))?;
    let data = load_dataset(data_path, split, modality)?;

    let mut references = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for row in 0..data.len() {
        let (stream, prompt) = match &data {
            Dataset::Plain(t) => {
                let input = processor.process_sample(&t.records[row], row, modality)?;
                (Model::stream_of(&input), input.decoder_prompt_tokens)
            }
            Dataset::Mixed(t) => {
                let mixed = process_mixed(&t.records[row], row, &processor, &extensions)?;
                (mixed.stream, mixed.decoder_prompt_tokens)
            }
        };
        let ids = model.generate_beam(
            &stream,
            &prompt,
            config.training.beam,
            config.training.max_len,
            vocab.eos_id(),
            vocab.pad_id(),
        )?;
        predictions.push(vocab.detokenize(&ids));
        references.push(data.output_text(row).to_string());
    }

    let dump_path = artifacts_dir.join(format!("predictions_{split}.txt"));
    metrics::write_predictions(&references, &predictions, &dump_path)?;

    let result = match metric_name {
        "bleu" => metrics::corpus_bleu(&predictions, &references)?,
        "chrf" => metrics::chrf(&predictions, &references, 6, 2.0)?,
        "perplexity" => {
            let scored: Vec<usize> = (0..data.len())
                .filter(|&row| !data.output_text(row).is_empty())
                .collect();
            if scored.is_empty() {
                return Err(PipelineError::Model(ModelError::DegenerateBatch));
            }
            let mean_nll = {
                let mut total_nll = 0.0;
                let mut total_tokens = 0usize;
                for chunk in scored.chunks(config.training.batch_size) {
                    let batch = data.batch(chunk, modality, &processor, &extensions, &vocab)?;
                    let out = model.forward(&batch, RunMode::Eval)?;
                    total_nll += out.loss * out.scored_tokens as f64;
                    total_tokens += out.scored_tokens;
                }
                total_nll / total_tokens as f64
            };
            EvalResult {
                metric_name: "perplexity".to_string(),
                score: metrics::perplexity(mean_nll)?,
                n_samples: scored.len(),
                details: vec![("mean_nll".to_string(), mean_nll)],
            }
        }
        _ => unreachable!("metric validated above"),
    };
    Ok((result, dump_path))
}

fn default_checkpoint(
    artifacts_dir: &Path,
    manifest: &ArtifactsManifest,
) -> Result<PathBuf, PipelineError> {
    for name in [BEST_CHECKPOINT, FINAL_CHECKPOINT, manifest.init_checkpoint.as_str()] {
        let path = artifacts_dir.join(name);
        if path.exists() {
            return Ok(path);
        }
    }
    Err(PipelineError::MissingArtifact(
        artifacts_dir.to_path_buf(),
        "a checkpoint".to_string(),
    ))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex(&Sha256::digest(&bytes).into()))
}

fn hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
