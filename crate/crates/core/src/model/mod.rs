//! The default three-stage model: Feature Extractor -> Multimodal Mapper ->
//! tiny transformer Backbone, with freezing policies, an adaptive-moment
//! optimizer, greedy/beam decoding and binary checkpoints.
//!
//! All math runs in `f64`; single-threaded execution is bit-deterministic
//! for a fixed seed, which the training pipeline relies on for resume.

mod autograd;
mod checkpoint;
mod optimizer;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optimizer::{AdamState, TrainHyper};

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::processors::{Batch, EncoderStream, StreamBlock};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorType {
    Identity,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperType {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneType {
    #[serde(rename = "tiny-transformer")]
    TinyTransformer,
}

/// Architectural hyperparameters. `n_layers` counts encoder and decoder
/// layers each; `input_dim` is `None` for token-only models (no extractor
/// or mapper tensors exist then).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub extractor_type: ExtractorType,
    pub mapper_type: MapperType,
    pub backbone_type: BackboneType,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub input_dim: Option<usize>,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            problems.push("all dimensions must be >= 1".to_string());
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 3 {
            problems.push("vocab_size must cover the specials".to_string());
        }
        if self.input_dim == Some(0) {
            problems.push("input_dim must be >= 1 when present".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_positions == 0 {
            problems.push("max_positions must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec(problems.join("; ")))
        }
    }

    /// Width of the extractor output, i.e. what the mapper consumes.
    pub fn extracted_dim(&self) -> Option<usize> {
        self.input_dim.map(|d| match self.extractor_type {
            ExtractorType::Identity => d,
            ExtractorType::Linear => self.d_model,
        })
    }
}

/// One named tensor with its trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Named parameter tree in a stable insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: IndexMap<String, ParamTensor>,
}

impl Parameters {
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(
            name.into(),
            ParamTensor {
                value,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub(crate) fn insert_tensor(&mut self, name: String, tensor: ParamTensor) {
        self.tensors.insert(name, tensor);
    }
}

/// Which parameters the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trainable.
    None,
    /// Backbone frozen; the shared embedding, extractor and mapper train.
    FreezeBackboneExceptEmbedding,
    /// Only the multimodal mapper trains.
    FreezeAllExceptMapper,
}

impl std::str::FromStr for FreezePolicy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FreezePolicy::None),
            "freeze_backbone_except_embedding" => Ok(FreezePolicy::FreezeBackboneExceptEmbedding),
            "freeze_all_except_mapper" | "freeze_all_except(mapper)" => {
                Ok(FreezePolicy::FreezeAllExceptMapper)
            }
            other => Err(ModelError::UnknownPolicy(other.to_string())),
        }
    }
}

pub const SHARED_EMBEDDING: &str = "embedding.shared";

/// Forward results; `loss` is the mean token cross-entropy over scored
/// label positions.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array3<f64>,
    pub loss: f64,
    pub scored_tokens: usize,
}

/// Dropout behaviour for a forward pass.
pub enum RunMode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha20Rng },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch has no scored label positions")]
    DegenerateBatch,
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("no trainable parameters under the active freeze policy")]
    NoTrainableParameters,
    #[error("unknown freeze policy {0:?} (known: none, freeze_backbone_except_embedding, freeze_all_except_mapper)")]
    UnknownPolicy(String),
    #[error("checkpoint is incompatible: {0}")]
    IncompatibleSpec(String),
    #[error("malformed checkpoint {path:?}: {detail}")]
    BadCheckpoint {
        path: std::path::PathBuf,
        detail: String,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The architecture spec plus its parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Parameters,
}

impl Model {
    /// Deterministically initializes all tensors from `seed`.
    ///
    /// Weights are Xavier-uniform, biases zero, layer-norm gains one. The
    /// shared embedding gets an extra `d_model^-1/2` factor so a fresh
    /// model's logits start near uniform.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Parameters::default();
        let d = spec.d_model;

        let emb_scale = xavier(spec.vocab_size, d) / (d as f64).sqrt();
        params.insert(
            SHARED_EMBEDDING,
            uniform(&mut rng, &[spec.vocab_size, d], emb_scale),
        );

        if let Some(input_dim) = spec.input_dim {
            if spec.extractor_type == ExtractorType::Linear {
                params.insert(
                    "extractor.weight",
                    uniform(&mut rng, &[input_dim, d], xavier(input_dim, d)),
                );
                params.insert("extractor.bias", zeros(&[d]));
            }
            let d_f = spec.extracted_dim().expect("input_dim present");
            match spec.mapper_type {
                MapperType::Linear => {
                    params.insert(
                        "mapper.weight",
                        uniform(&mut rng, &[d_f, d], xavier(d_f, d)),
                    );
                    params.insert("mapper.bias", zeros(&[d]));
                }
                MapperType::Mlp => {
                    params.insert("mapper.w1", uniform(&mut rng, &[d_f, d], xavier(d_f, d)));
                    params.insert("mapper.b1", zeros(&[d]));
                    params.insert("mapper.w2", uniform(&mut rng, &[d, d], xavier(d, d)));
                    params.insert("mapper.b2", zeros(&[d]));
                }
            }
        }

        for stack in ["encoder", "decoder"] {
            for layer in 0..spec.n_layers {
                let attn_blocks: &[&str] = if stack == "encoder" {
                    &["attn"]
                } else {
                    &["self_attn", "cross_attn"]
                };
                let mut ln_index = 1;
                for block in attn_blocks {
                    insert_layer_norm(&mut params, &format!("{stack}.{layer}.ln{ln_index}"), d);
                    ln_index += 1;
                    for mat in ["wq", "wk", "wv", "wo"] {
                        params.insert(
                            format!("{stack}.{layer}.{block}.{mat}"),
                            uniform(&mut rng, &[d, d], xavier(d, d)),
                        );
                        params.insert(format!("{stack}.{layer}.{block}.{mat}_bias"), zeros(&[d]));
                    }
                }
                insert_layer_norm(&mut params, &format!("{stack}.{layer}.ln{ln_index}"), d);
                params.insert(
                    format!("{stack}.{layer}.ffn.w1"),
                    uniform(&mut rng, &[d, spec.d_ff], xavier(d, spec.d_ff)),
                );
                params.insert(format!("{stack}.{layer}.ffn.b1"), zeros(&[spec.d_ff]));
                params.insert(
                    format!("{stack}.{layer}.ffn.w2"),
                    uniform(&mut rng, &[spec.d_ff, d], xavier(spec.d_ff, d)),
                );
                params.insert(format!("{stack}.{layer}.ffn.b2"), zeros(&[d]));
            }
            insert_layer_norm(&mut params, &format!("{stack}.final_ln"), d);
        }

        Ok(Model { spec, params })
    }

    /// Applies a freeze policy by flipping trainable flags.
    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        for (name, tensor) in self.params.tensors.iter_mut() {
            tensor.trainable = match policy {
                FreezePolicy::None => true,
                FreezePolicy::FreezeBackboneExceptEmbedding => {
                    name == SHARED_EMBEDDING
                        || name.starts_with("extractor.")
                        || name.starts_with("mapper.")
                }
                FreezePolicy::FreezeAllExceptMapper => name.starts_with("mapper."),
            };
        }
    }

    /// Runs the extractor on one signal tensor (identity or linear).
    pub fn extract_features(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let input_dim = self.signal_input_dim()?;
        if x.ncols() != input_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "extractor expects width {input_dim}, got {}",
                x.ncols()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::ShapeMismatch("non-finite extractor input".to_string()));
        }
        match self.spec.extractor_type {
            ExtractorType::Identity => Ok(x.clone()),
            ExtractorType::Linear => {
                let w = self.tensor_2d("extractor.weight");
                let b = self.tensor_1d("extractor.bias");
                Ok(x.dot(&w) + &b)
            }
        }
    }

    /// Runs the mapper on extracted features.
    pub fn map_features(&self, f: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let d_f = self
            .spec
            .extracted_dim()
            .ok_or_else(|| ModelError::ShapeMismatch("model has no signal pathway".to_string()))?;
        if f.ncols() != d_f {
            return Err(ModelError::ShapeMismatch(format!(
                "mapper expects width {d_f}, got {}",
                f.ncols()
            )));
        }
        match self.spec.mapper_type {
            MapperType::Linear => {
                let w = self.tensor_2d("mapper.weight");
                let b = self.tensor_1d("mapper.bias");
                Ok(f.dot(&w) + &b)
            }
            MapperType::Mlp => {
                let w1 = self.tensor_2d("mapper.w1");
                let b1 = self.tensor_1d("mapper.b1");
                let w2 = self.tensor_2d("mapper.w2");
                let b2 = self.tensor_1d("mapper.b2");
                let hidden = (f.dot(&w1) + &b1).mapv(transformer::gelu_scalar);
                Ok(hidden.dot(&w2) + &b2)
            }
        }
    }

    fn signal_input_dim(&self) -> Result<usize, ModelError> {
        self.spec
            .input_dim
            .ok_or_else(|| ModelError::ShapeMismatch("model has no signal pathway".to_string()))
    }

    fn tensor_2d(&self, name: &str) -> Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    fn tensor_1d(&self, name: &str) -> ndarray::Array1<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    /// Full teacher-forced forward pass over a batch.
    pub fn forward(&self, batch: &Batch, mode: RunMode<'_>) -> Result<ForwardOutput, ModelError> {
        let graph = transformer::build_graph(self, batch, mode)?;
        let logits = graph
            .tape
            .value(graph.logits)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let loss = graph.tape.value(graph.loss)[[0]];
        if !loss.is_finite() || logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok(ForwardOutput {
            logits,
            loss,
            scored_tokens: graph.scored_tokens,
        })
    }

    /// One optimizer step; frozen tensors are bit-unchanged.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        opt: &mut AdamState,
        hyper: &TrainHyper,
        rng: &mut ChaCha20Rng,
    ) -> Result<f64, ModelError> {
        let trainable = self.params.trainable_names();
        if trainable.is_empty() {
            return Err(ModelError::NoTrainableParameters);
        }
        let mut graph = transformer::build_graph(self, batch, RunMode::Train { rng })?;
        let loss = graph.tape.value(graph.loss)[[0]];
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        graph.tape.backward(graph.loss);
        let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        for name in &trainable {
            let var = graph.param_vars[name];
            let shape = self.params.get(name).unwrap().value.raw_dim();
            let grad = graph
                .tape
                .take_grad(var)
                .unwrap_or_else(|| ArrayD::zeros(shape));
            grads.insert(name.clone(), grad);
        }
        optimizer::clip_global_norm(&mut grads, hyper.clip_norm);
        opt.step(&mut self.params, &grads, hyper);
        Ok(loss)
    }

    /// Greedy decoding from a decoder prompt; returns generated tokens
    /// without the prompt or the final `<eos>`.
    pub fn generate_greedy(
        &self,
        stream: &EncoderStream,
        decoder_prompt: &[TokenId],
        max_len: usize,
        eos_id: TokenId,
        pad_id: TokenId,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.generate_beam(stream, decoder_prompt, 1, max_len, eos_id, pad_id)
    }

    /// Beam search with sum-of-logprob scoring; `beam == 1` is exactly
    /// greedy. Ties break toward the lowest token id.
    pub fn generate_beam(
        &self,
        stream: &EncoderStream,
        decoder_prompt: &[TokenId],
        beam: usize,
        max_len: usize,
        eos_id: TokenId,
        pad_id: TokenId,
    ) -> Result<Vec<TokenId>, ModelError> {
        assert!(beam >= 1, "beam width must be >= 1");
        let prompt: Vec<TokenId> = if decoder_prompt.is_empty() {
            vec![pad_id]
        } else {
            decoder_prompt.to_vec()
        };
        // Leave room for the prompt inside the positional table.
        let budget = self.spec.max_positions.saturating_sub(prompt.len());
        let max_new = max_len.min(budget);
        if max_new == 0 {
            return Ok(Vec::new());
        }

        let encoded = transformer::encode_once(self, stream)?;

        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<TokenId>,
            score: f64,
            finished: bool,
        }
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        }];

        for _ in 0..max_new {
            if beams.iter().all(|h| h.finished) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in &beams {
                if hyp.finished {
                    candidates.push(hyp.clone());
                    continue;
                }
                let mut ids = prompt.clone();
                ids.extend_from_slice(&hyp.tokens);
                let logprobs = transformer::next_token_logprobs(self, &encoded, &ids)?;
                let mut indexed: Vec<(usize, f64)> =
                    logprobs.iter().copied().enumerate().collect();
                indexed.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.0.cmp(&b.0))
                });
                for &(tok, lp) in indexed.iter().take(beam) {
                    let mut tokens = hyp.tokens.clone();
                    let mut finished = false;
                    if tok as TokenId == eos_id {
                        finished = true;
                    } else {
                        tokens.push(tok as TokenId);
                    }
                    candidates.push(Hyp {
                        tokens,
                        score: hyp.score + lp,
                        finished,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(beam);
            beams = candidates;
        }

        let best = beams
            .iter()
            .max_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.tokens.cmp(&a.tokens))
            })
            .expect("at least one beam");
        Ok(best.tokens.clone())
    }

    /// Encoder stream for a single processed sample.
    pub fn stream_of(input: &crate::processors::ModelInput) -> EncoderStream {
        let mut blocks = Vec::new();
        if !input.encoder_tokens.is_empty() {
            blocks.push(StreamBlock::Tokens(input.encoder_tokens.clone()));
        }
        if let Some(f) = &input.encoder_features {
            if f.nrows() > 0 {
                blocks.push(StreamBlock::Features(f.clone()));
            }
        }
        EncoderStream { blocks }
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform(rng: &mut ChaCha20Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

fn insert_layer_norm(params: &mut Parameters, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gain"), ArrayD::ones(IxDyn(&[d])));
    params.insert(format!("{prefix}.bias"), zeros(&[d]));
}

#[cfg(test)]
mod tests;
