//! Model inputs and batch collation.
//!
//! A sample's encoder side is an ordered stream of blocks: token runs and
//! feature tensors. Plain modalities produce `[prompt tokens, features]`;
//! the mixed-modality path may interleave any number of blocks. Collation
//! right-pads everything to rectangular tensors and builds the masks the
//! model relies on.

use ndarray::{Array2, Array3};

use super::vocab::Vocabulary;
use super::ProcessError;
use crate::TokenId;

/// What the encoder consumes for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Tokens,
    Features,
}

/// One processed sample, ready for collation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub encoder_kind: EncoderKind,
    /// Prompt tokens; they precede mapped features in the encoder stream.
    pub encoder_tokens: Vec<TokenId>,
    /// `[T, D]` signal features; `None` for token-only samples. A
    /// zero-frame tensor is legal (text rows inside multitask feature
    /// datasets) and keeps the feature width for collation.
    pub encoder_features: Option<Array2<f64>>,
    /// Decoder start tokens; defaults to `[pad]` when the record had none.
    pub decoder_prompt_tokens: Vec<TokenId>,
    /// Target ids ending in `<eos>`; empty only for inference records.
    pub label_tokens: Vec<TokenId>,
    /// Row index of the source record in its split table.
    pub source_index: usize,
}

impl ModelInput {
    /// Total encoder length (prompt tokens + feature frames).
    pub fn encoder_len(&self) -> usize {
        self.encoder_tokens.len() + self.encoder_features.as_ref().map_or(0, |f| f.nrows())
    }
}

/// One block of a sample's encoder stream.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamBlock {
    Tokens(Vec<TokenId>),
    Features(Array2<f64>),
}

impl StreamBlock {
    pub fn len(&self) -> usize {
        match self {
            StreamBlock::Tokens(ids) => ids.len(),
            StreamBlock::Features(f) => f.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered encoder blocks for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderStream {
    pub blocks: Vec<StreamBlock>,
}

impl EncoderStream {
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(StreamBlock::len).sum()
    }
}

/// Per-sample encoder data inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderBatch {
    /// Homogeneous prompt+signal samples with rectangular views.
    Uniform {
        /// `[B, P_max]`, right-padded with `pad`.
        tokens: Array2<TokenId>,
        prompt_lengths: Vec<usize>,
        /// `[B, T_max, D]`, zero-padded; `None` for token-only batches.
        features: Option<Array3<f64>>,
        feature_lengths: Vec<usize>,
    },
    /// Arbitrary block interleavings (mixed-modality records).
    Mixed { rows: Vec<EncoderStream> },
}

/// A rectangular batch with masks.
///
/// Invariants: each row of `encoder_mask` sums to that sample's unpadded
/// encoder length, and `label_mask` is 1 exactly on real target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub encoder: EncoderBatch,
    /// `[B, L_enc_max]`; 1 = real position, 0 = padding.
    pub encoder_mask: Array2<f64>,
    pub encoder_lengths: Vec<usize>,
    /// `[B, L_dec_max]` teacher-forcing inputs: prompt ++ labels shifted right.
    pub decoder_input: Array2<TokenId>,
    /// `[B, L_dec_max]` target ids; positions with `label_mask == 0` are ignored.
    pub labels: Array2<TokenId>,
    pub label_mask: Array2<f64>,
    pub decoder_lengths: Vec<usize>,
    pub source_indices: Vec<usize>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.encoder_lengths.len()
    }

    /// Per-sample encoder streams; reconstructs block structure from the
    /// rectangular views for uniform batches so padded cells are never read.
    pub fn encoder_streams(&self) -> Vec<EncoderStream> {
        match &self.encoder {
            EncoderBatch::Mixed { rows } => rows.clone(),
            EncoderBatch::Uniform {
                tokens,
                prompt_lengths,
                features,
                feature_lengths,
            } => {
                let b = prompt_lengths.len();
                let mut rows = Vec::with_capacity(b);
                for i in 0..b {
                    let mut blocks = Vec::new();
                    let p = prompt_lengths[i];
                    if p > 0 {
                        blocks.push(StreamBlock::Tokens(
                            tokens.row(i).iter().take(p).copied().collect(),
                        ));
                    }
                    if let Some(f) = features {
                        let t = feature_lengths[i];
                        if t > 0 {
                            blocks.push(StreamBlock::Features(
                                f.index_axis(ndarray::Axis(0), i)
                                    .slice(ndarray::s![..t, ..])
                                    .to_owned(),
                            ));
                        }
                    }
                    rows.push(EncoderStream { blocks });
                }
                rows
            }
        }
    }
}

/// Pads a list of processed samples into one batch.
///
/// All inputs must share the encoder kind and, for feature batches, the
/// feature width. Decoder inputs are the prompt followed by the labels
/// shifted right (teacher forcing); label positions covering the prompt
/// prefix are masked out.
pub fn collate(inputs: &[ModelInput], vocab: &Vocabulary) -> Result<Batch, ProcessError> {
    if inputs.is_empty() {
        return Err(ProcessError::EmptyBatch);
    }
    let kind = inputs[0].encoder_kind;
    for (i, input) in inputs.iter().enumerate() {
        if input.encoder_kind != kind {
            return Err(ProcessError::HeterogeneousBatch(format!(
                "sample 0 is {:?} but sample {i} is {:?}",
                kind, input.encoder_kind
            )));
        }
        if input.encoder_tokens.is_empty() && input.encoder_len() == 0 {
            return Err(ProcessError::EmptyEncoder { index: i });
        }
    }

    let b = inputs.len();
    let pad = vocab.pad_id();

    let p_max = inputs.iter().map(|x| x.encoder_tokens.len()).max().unwrap_or(0);
    let mut tokens = Array2::<TokenId>::from_elem((b, p_max), pad);
    let mut prompt_lengths = Vec::with_capacity(b);
    for (i, input) in inputs.iter().enumerate() {
        for (j, &id) in input.encoder_tokens.iter().enumerate() {
            tokens[[i, j]] = id;
        }
        prompt_lengths.push(input.encoder_tokens.len());
    }

    let features = match kind {
        EncoderKind::Tokens => {
            if let Some(i) = inputs.iter().position(|x| x.encoder_features.is_some()) {
                return Err(ProcessError::HeterogeneousBatch(format!(
                    "token-kind sample {i} carries features"
                )));
            }
            None
        }
        EncoderKind::Features => {
            let mut width: Option<usize> = None;
            for (i, input) in inputs.iter().enumerate() {
                let f = input.encoder_features.as_ref().ok_or_else(|| {
                    ProcessError::HeterogeneousBatch(format!(
                        "feature-kind sample {i} has no feature tensor"
                    ))
                })?;
                match width {
                    None => width = Some(f.ncols()),
                    Some(w) if w != f.ncols() => {
                        return Err(ProcessError::HeterogeneousBatch(format!(
                            "feature width mismatch: {w} vs {} (sample {i})",
                            f.ncols()
                        )))
                    }
                    _ => {}
                }
            }
            let d = width.unwrap_or(0);
            let t_max = inputs
                .iter()
                .map(|x| x.encoder_features.as_ref().unwrap().nrows())
                .max()
                .unwrap_or(0);
            let mut padded = Array3::<f64>::zeros((b, t_max, d));
            for (i, input) in inputs.iter().enumerate() {
                let f = input.encoder_features.as_ref().unwrap();
                padded
                    .slice_mut(ndarray::s![i, ..f.nrows(), ..])
                    .assign(f);
            }
            Some(padded)
        }
    };
    let feature_lengths: Vec<usize> = inputs
        .iter()
        .map(|x| x.encoder_features.as_ref().map_or(0, |f| f.nrows()))
        .collect();

    let encoder_lengths: Vec<usize> = inputs.iter().map(ModelInput::encoder_len).collect();
    let l_enc = encoder_lengths.iter().copied().max().unwrap_or(0);
    let mut encoder_mask = Array2::<f64>::zeros((b, l_enc));
    for (i, &len) in encoder_lengths.iter().enumerate() {
        encoder_mask.slice_mut(ndarray::s![i, ..len]).fill(1.0);
    }

    let prompts: Vec<Vec<TokenId>> = inputs
        .iter()
        .map(|x| {
            if x.decoder_prompt_tokens.is_empty() {
                vec![pad]
            } else {
                x.decoder_prompt_tokens.clone()
            }
        })
        .collect();
    let label_rows: Vec<&[TokenId]> = inputs.iter().map(|x| x.label_tokens.as_slice()).collect();
    let (decoder_input, labels, label_mask, decoder_lengths) =
        build_decoder_side(&prompts, &label_rows, pad);

    Ok(Batch {
        encoder: EncoderBatch::Uniform {
            tokens,
            prompt_lengths,
            features,
            feature_lengths,
        },
        encoder_mask,
        encoder_lengths,
        decoder_input,
        labels,
        label_mask,
        decoder_lengths,
        source_indices: inputs.iter().map(|x| x.source_index).collect(),
    })
}

/// Builds a batch from pre-assembled encoder streams (mixed-modality path).
pub fn collate_streams(
    rows: Vec<EncoderStream>,
    decoder_prompts: &[Vec<TokenId>],
    label_rows: &[Vec<TokenId>],
    source_indices: Vec<usize>,
    vocab: &Vocabulary,
) -> Result<Batch, ProcessError> {
    if rows.is_empty() {
        return Err(ProcessError::EmptyBatch);
    }
    assert_eq!(rows.len(), decoder_prompts.len());
    assert_eq!(rows.len(), label_rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.total_len() == 0 {
            return Err(ProcessError::EmptyEncoder { index: i });
        }
    }
    let pad = vocab.pad_id();
    let encoder_lengths: Vec<usize> = rows.iter().map(EncoderStream::total_len).collect();
    let b = rows.len();
    let l_enc = encoder_lengths.iter().copied().max().unwrap_or(0);
    let mut encoder_mask = Array2::<f64>::zeros((b, l_enc));
    for (i, &len) in encoder_lengths.iter().enumerate() {
        encoder_mask.slice_mut(ndarray::s![i, ..len]).fill(1.0);
    }
    let prompts: Vec<Vec<TokenId>> = decoder_prompts
        .iter()
        .map(|p| if p.is_empty() { vec![pad] } else { p.clone() })
        .collect();
    let label_slices: Vec<&[TokenId]> = label_rows.iter().map(|l| l.as_slice()).collect();
    let (decoder_input, labels, label_mask, decoder_lengths) =
        build_decoder_side(&prompts, &label_slices, pad);

    Ok(Batch {
        encoder: EncoderBatch::Mixed { rows },
        encoder_mask,
        encoder_lengths,
        decoder_input,
        labels,
        label_mask,
        decoder_lengths,
        source_indices,
    })
}

/// Teacher forcing: input `prompt ++ labels[..n-1]`, target
/// `pad^(k-1) ++ labels`, so position `j` predicts target `j` and prompt
/// positions (except the last) are ignored by the loss.
fn build_decoder_side(
    prompts: &[Vec<TokenId>],
    labels: &[&[TokenId]],
    pad: TokenId,
) -> (Array2<TokenId>, Array2<TokenId>, Array2<f64>, Vec<usize>) {
    let b = prompts.len();
    let mut rows_in: Vec<Vec<TokenId>> = Vec::with_capacity(b);
    let mut rows_tgt: Vec<Vec<TokenId>> = Vec::with_capacity(b);
    for (prompt, label) in prompts.iter().zip(labels) {
        let k = prompt.len();
        let n = label.len();
        let mut input = Vec::with_capacity(k + n.saturating_sub(1));
        input.extend_from_slice(prompt);
        if n > 1 {
            input.extend_from_slice(&label[..n - 1]);
        }
        let mut target = vec![pad; k.saturating_sub(1)];
        target.extend_from_slice(label);
        if n == 0 {
            // Inference rows: keep lengths aligned, nothing to score.
            target.push(pad);
        }
        debug_assert_eq!(input.len(), target.len());
        rows_in.push(input);
        rows_tgt.push(target);
    }
    let lengths: Vec<usize> = rows_in.iter().map(Vec::len).collect();
    let l_max = lengths.iter().copied().max().unwrap_or(0);
    let mut decoder_input = Array2::<TokenId>::from_elem((b, l_max), pad);
    let mut targets = Array2::<TokenId>::from_elem((b, l_max), pad);
    let mut mask = Array2::<f64>::zeros((b, l_max));
    for i in 0..b {
        let k = prompts[i].len();
        let n = labels[i].len();
        for (j, &t) in rows_in[i].iter().enumerate() {
            decoder_input[[i, j]] = t;
        }
        for (j, &t) in rows_tgt[i].iter().enumerate() {
            targets[[i, j]] = t;
        }
        // Real targets start after the ignored prompt prefix.
        for j in (k - 1)..(k - 1 + n) {
            mask[[i, j]] = 1.0;
        }
    }
    (decoder_input, targets, mask, lengths)
}
