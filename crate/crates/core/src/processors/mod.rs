//! Modality-aware processors: turn a [`SampleRecord`] into model-ready
//! tensors and token ids, and collate lists of them into batches.

mod batch;
pub mod render;
pub mod vocab;

pub use batch::{
    collate, collate_streams, Batch, EncoderBatch, EncoderKind, EncoderStream, ModelInput,
    StreamBlock,
};
pub use render::{GlyphTable, RenderError, WordRenderer};
pub use vocab::{build_vocabulary, pretokenize, Vocabulary, VocabError};

use ndarray::Array2;
use thiserror::Error;

use crate::metadata::SampleRecord;
use crate::modality::Modality;
use crate::signal::{
    clip_temporal, load_features_opts, load_frames_opts, load_pose_opts, skip_frames, SignalError,
    Temporal, DEFAULT_FPS,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error("heterogeneous batch: {0}")]
    HeterogeneousBatch(String),
    #[error("sample {index} has an empty encoder stream")]
    EmptyEncoder { index: usize },
    #[error("row {row}: {source}")]
    Signal {
        row: usize,
        #[source]
        source: SignalError,
    },
    #[error("row {row}: record has an empty signal but the batch feature width is unknown (set processor input_dim)")]
    MissingInputDim { row: usize },
    #[error("row {row}: modality {modality} cannot process this record: {detail}")]
    BadRecord {
        row: usize,
        modality: Modality,
        detail: String,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Knobs for sample processing; defaults match the documented config.
#[derive(Debug, Clone)]
pub struct ProcessorConfig {
    /// Keep every n-th signal frame.
    pub skip_frames_stride: usize,
    /// fps assumed for JSON signal files that omit it.
    pub fps_default: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Per-channel standardization of pose values before flattening.
    pub normalize_pose: bool,
    /// Feature width used for empty-signal rows in feature modalities
    /// (multitask datasets); probed from the data at setup time.
    pub input_dim: Option<usize>,
    /// Optional JSON glyph table merged over the embedded font.
    pub glyph_table_path: Option<std::path::PathBuf>,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        ProcessorConfig {
            skip_frames_stride: 1,
            fps_default: DEFAULT_FPS,
            image_height: 24,
            image_width: 96,
            normalize_pose: false,
            input_dim: None,
            glyph_table_path: None,
        }
    }
}

/// Stateless sample processor bound to a vocabulary and config.
pub struct SampleProcessor<'v> {
    vocab: &'v Vocabulary,
    config: ProcessorConfig,
    renderer: WordRenderer,
}

impl<'v> SampleProcessor<'v> {
    pub fn new(vocab: &'v Vocabulary, config: ProcessorConfig) -> Result<Self, ProcessError> {
        let table = match &config.glyph_table_path {
            Some(path) => GlyphTable::from_json_file(path)?,
            None => GlyphTable::embedded(),
        };
        let renderer = WordRenderer::new(table, config.image_height, config.image_width);
        Ok(SampleProcessor {
            vocab,
            config,
            renderer,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn config(&self) -> &ProcessorConfig {
        &self.config
    }

    pub fn renderer(&self) -> &WordRenderer {
        &self.renderer
    }

    /// Transforms one record into a [`ModelInput`].
    ///
    /// Text-only records (empty signal) stay token-only under `text2text`
    /// and become zero-frame feature rows under feature modalities, so
    /// multitask datasets collate into homogeneous batches. Labels are the
    /// tokenized output plus `<eos>`; an empty output (inference record)
    /// yields no labels. An empty decoder prompt becomes `[pad]`.
    pub fn process_sample(
        &self,
        record: &SampleRecord,
        row: usize,
        modality: Modality,
    ) -> Result<ModelInput, ProcessError> {
        let prompt_tokens = self.vocab.tokenize(&record.encoder_prompt);
        let (encoder_kind, encoder_tokens, encoder_features) = match modality {
            Modality::Text2Text => {
                let mut tokens = prompt_tokens;
                if !record.signal.is_empty() {
                    tokens.extend(self.vocab.tokenize(&record.signal));
                }
                (EncoderKind::Tokens, tokens, None)
            }
            Modality::Pose2Text | Modality::Features2Text | Modality::Video2Text => {
                let features = if record.signal.is_empty() {
                    let d = self
                        .config
                        .input_dim
                        .ok_or(ProcessError::MissingInputDim { row })?;
                    Array2::zeros((0, d))
                } else {
                    self.load_signal_features(&record.signal, record, row, modality)?
                };
                (EncoderKind::Features, prompt_tokens, Some(features))
            }
            Modality::Image2Text => {
                let seq = self.renderer.render_word_images(&record.signal);
                let (n, h, w) = seq.images.dim();
                let flat = seq.images.mapv(|v| v as f64 / 255.0);
                let features = flat
                    .into_shape_with_order((n, h * w))
                    .expect("contiguous image tensor");
                (EncoderKind::Features, prompt_tokens, Some(features))
            }
            Modality::Mixed => {
                return Err(ProcessError::BadRecord {
                    row,
                    modality,
                    detail: "mixed records go through the meta processor".to_string(),
                })
            }
        };

        let label_tokens = if record.output.is_empty() {
            Vec::new()
        } else {
            let mut ids = self.vocab.tokenize(&record.output);
            ids.push(self.vocab.eos_id());
            ids
        };
        let decoder_prompt_tokens = self.decoder_prompt(&record.decoder_prompt);

        Ok(ModelInput {
            encoder_kind,
            encoder_tokens,
            encoder_features,
            decoder_prompt_tokens,
            label_tokens,
            source_index: row,
        })
    }

    pub fn decoder_prompt(&self, text: &str) -> Vec<TokenId> {
        let ids = self.vocab.tokenize(text);
        if ids.is_empty() {
            vec![self.vocab.pad_id()]
        } else {
            ids
        }
    }

    /// load -> clip -> skip -> flatten for one signal file.
    pub fn load_signal_features(
        &self,
        path: &str,
        record: &SampleRecord,
        row: usize,
        modality: Modality,
    ) -> Result<Array2<f64>, ProcessError> {
        let wrap = |source: SignalError| ProcessError::Signal { row, source };
        let stride = self.config.skip_frames_stride;
        match modality {
            Modality::Pose2Text => {
                let seq = load_pose_opts(path, self.config.fps_default).map_err(wrap)?;
                let seq = clip_temporal(&seq, record.signal_start, record.signal_end).map_err(wrap)?;
                let seq = skip_frames(&seq, stride);
                let (t, k, c) = seq.frames.dim();
                let mut flat = seq
                    .frames
                    .into_shape_with_order((t, k * c))
                    .expect("contiguous pose tensor");
                if self.config.normalize_pose {
                    standardize_columns(&mut flat, c);
                }
                Ok(flat)
            }
            Modality::Features2Text => {
                let seq = load_features_opts(path, self.config.fps_default).map_err(wrap)?;
                let seq = clip_temporal(&seq, record.signal_start, record.signal_end).map_err(wrap)?;
                let seq = skip_frames(&seq, stride);
                Ok(seq.features)
            }
            Modality::Video2Text => {
                let seq = load_frames_opts(path, self.config.fps_default).map_err(wrap)?;
                let seq = clip_temporal(&seq, record.signal_start, record.signal_end).map_err(wrap)?;
                let seq = skip_frames(&seq, stride);
                let t = seq.num_frames();
                let (_, h, w, ch) = seq.frames.dim();
                let scaled = seq.frames.mapv(|v| v as f64 / 255.0);
                Ok(scaled
                    .into_shape_with_order((t, h * w * ch))
                    .expect("contiguous frame tensor"))
            }
            other => Err(ProcessError::BadRecord {
                row,
                modality: other,
                detail: "modality has no file-backed signal loader".to_string(),
            }),
        }
    }
}

/// Standardizes each original channel (column modulo `channels`) to zero
/// mean and unit variance across all frames and keypoints.
fn standardize_columns(flat: &mut Array2<f64>, channels: usize) {
    let (t, kc) = flat.dim();
    if t == 0 {
        return;
    }
    for ch in 0..channels {
        let mut sum = 0.0;
        let mut count = 0usize;
        for col in (ch..kc).step_by(channels) {
            for row in 0..t {
                sum += flat[[row, col]];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let mut var = 0.0;
        for col in (ch..kc).step_by(channels) {
            for row in 0..t {
                let d = flat[[row, col]] - mean;
                var += d * d;
            }
        }
        let std = (var / count as f64).sqrt().max(1e-8);
        for col in (ch..kc).step_by(channels) {
            for row in 0..t {
                flat[[row, col]] = (flat[[row, col]] - mean) / std;
            }
        }
    }
}
