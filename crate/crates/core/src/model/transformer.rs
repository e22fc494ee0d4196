//! Graph construction for the tiny pre-norm encoder-decoder backbone.
//!
//! The encoder consumes an interleaved stream of embedded prompt tokens
//! and mapped signal features per sample; sinusoidal positions run over
//! the concatenated stream. The decoder uses causal self-attention plus
//! cross-attention, and projects hidden states through the transposed
//! shared embedding.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use super::autograd::{Tape, Var};
use super::{ExtractorType, MapperType, Model, ModelError, RunMode, SHARED_EMBEDDING};
use crate::processors::{Batch, EncoderStream, StreamBlock};
use crate::TokenId;

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) struct Graph {
    pub tape: Tape,
    pub loss: Var,
    pub logits: Var,
    pub param_vars: HashMap<String, Var>,
    pub scored_tokens: usize,
}

/// Encoder output of a single sample, reused across decode steps.
pub(crate) struct EncodedSample {
    pub enc_out: Array3<f64>,
}

struct Builder<'m, 'r> {
    tape: Tape,
    vars: HashMap<String, Var>,
    model: &'m Model,
    rng: Option<&'r mut ChaCha20Rng>,
}

impl<'m, 'r> Builder<'m, 'r> {
    fn new(model: &'m Model, mode: RunMode<'r>) -> Self {
        let mut tape = Tape::new();
        let mut vars = HashMap::new();
        for (name, tensor) in model.params.iter() {
            vars.insert(name.clone(), tape.leaf(tensor.value.clone()));
        }
        let rng = match mode {
            RunMode::Eval => None,
            RunMode::Train { rng } => Some(rng),
        };
        Builder {
            tape,
            vars,
            model,
            rng,
        }
    }

    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.spec.dropout;
        match (&mut self.rng, p > 0.0) {
            (Some(rng), true) => self.tape.dropout(x, p, rng),
            _ => x,
        }
    }

    fn linear_wb(&mut self, x: Var, w: &str, b: &str) -> Var {
        let wv = self.var(w);
        let bv = self.var(b);
        self.tape.linear(x, wv, Some(bv))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gain = self.var(&format!("{prefix}.gain"));
        let bias = self.var(&format!("{prefix}.bias"));
        self.tape.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Pre-norm attention sublayer with residual connection.
    /// `memory` switches between self- and cross-attention.
    fn attn_sublayer(
        &mut self,
        x: Var,
        memory: Option<Var>,
        ln_prefix: &str,
        block_prefix: &str,
        bias: &ArrayD<f64>,
    ) -> Var {
        let heads = self.model.spec.n_heads;
        let dh = self.model.spec.d_model / heads;
        let normed = self.layer_norm(x, ln_prefix);
        let kv_src = memory.unwrap_or(normed);
        let q = self.linear_wb(normed, &format!("{block_prefix}.wq"), &format!("{block_prefix}.wq_bias"));
        let k = self.linear_wb(kv_src, &format!("{block_prefix}.wk"), &format!("{block_prefix}.wk_bias"));
        let v = self.linear_wb(kv_src, &format!("{block_prefix}.wv"), &format!("{block_prefix}.wv_bias"));
        let qh = self.tape.split_heads(q, heads);
        let kh = self.tape.split_heads(k, heads);
        let vh = self.tape.split_heads(v, heads);
        let scores = self.tape.bmm_nt(qh, kh);
        let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = self.tape.masked_softmax(scaled, bias);
        let ctx = self.tape.bmm_nn(attn, vh);
        let merged = self.tape.merge_heads(ctx);
        let out = self.linear_wb(merged, &format!("{block_prefix}.wo"), &format!("{block_prefix}.wo_bias"));
        let out = self.dropout(out);
        self.tape.add(x, out)
    }

    fn ffn_sublayer(&mut self, x: Var, ln_prefix: &str, ffn_prefix: &str) -> Var {
        let normed = self.layer_norm(x, ln_prefix);
        let hidden = self.linear_wb(normed, &format!("{ffn_prefix}.w1"), &format!("{ffn_prefix}.b1"));
        let act = self.tape.gelu(hidden);
        let out = self.linear_wb(act, &format!("{ffn_prefix}.w2"), &format!("{ffn_prefix}.b2"));
        let out = self.dropout(out);
        self.tape.add(x, out)
    }

    /// Token embedding scaled by sqrt(d_model).
    fn embed_tokens(&mut self, ids: &[TokenId]) -> Var {
        let table = self.var(SHARED_EMBEDDING);
        let emb = self.tape.gather(table, ids);
        self.tape.scale(emb, (self.model.spec.d_model as f64).sqrt())
    }

    /// Signal features through extractor and mapper.
    fn map_signal(&mut self, features: &Array2<f64>) -> Result<Var, ModelError> {
        let spec = &self.model.spec;
        let input_dim = spec.input_dim.ok_or_else(|| {
            ModelError::ShapeMismatch(
                "batch carries features but the model has no signal pathway".to_string(),
            )
        })?;
        if features.ncols() != input_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "feature width {} does not match model input_dim {input_dim}",
                features.ncols()
            )));
        }
        let mut x = self.tape.leaf(features.clone().into_dyn());
        if spec.extractor_type == ExtractorType::Linear {
            x = self.linear_wb(x, "extractor.weight", "extractor.bias");
        }
        match spec.mapper_type {
            MapperType::Linear => Ok(self.linear_wb(x, "mapper.weight", "mapper.bias")),
            MapperType::Mlp => {
                let h = self.linear_wb(x, "mapper.w1", "mapper.b1");
                let a = self.tape.gelu(h);
                Ok(self.linear_wb(a, "mapper.w2", "mapper.b2"))
            }
        }
    }

    /// Encodes per-sample streams into `[B, L_max, d]` plus the key-padding
    /// bias derived from real lengths.
    fn encode(&mut self, streams: &[EncoderStream]) -> Result<(Var, ArrayD<f64>), ModelError> {
        let spec = &self.model.spec;
        let d = spec.d_model;
        let mut rows: Vec<Vec<Var>> = Vec::with_capacity(streams.len());
        for stream in streams {
            let mut blocks = Vec::new();
            for block in &stream.blocks {
                match block {
                    StreamBlock::Tokens(ids) => {
                        if !ids.is_empty() {
                            blocks.push(self.embed_tokens(ids));
                        }
                    }
                    StreamBlock::Features(f) => {
                        if f.nrows() > 0 {
                            blocks.push(self.map_signal(f)?);
                        }
                    }
                }
            }
            rows.push(blocks);
        }
        let (assembled, l_max) = self.tape.assemble_rows(&rows, d);
        if l_max > spec.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: l_max,
                max: spec.max_positions,
            });
        }
        let pe = positional_encoding(l_max, d);
        let x = self.tape.add_const(assembled, &pe);
        let mut x = self.dropout(x);

        let bias = key_padding_bias(streams, l_max);
        for layer in 0..spec.n_layers {
            x = self.attn_sublayer(
                x,
                None,
                &format!("encoder.{layer}.ln1"),
                &format!("encoder.{layer}.attn"),
                &bias,
            );
            x = self.ffn_sublayer(x, &format!("encoder.{layer}.ln2"), &format!("encoder.{layer}.ffn"));
        }
        let out = self.layer_norm(x, "encoder.final_ln");
        Ok((out, bias))
    }

    /// Decodes teacher-forcing inputs against encoder memory into logits.
    fn decode(
        &mut self,
        enc_out: Var,
        enc_bias: &ArrayD<f64>,
        ids: &Array2<TokenId>,
    ) -> Result<Var, ModelError> {
        let spec = &self.model.spec;
        let (b, l) = ids.dim();
        if l > spec.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: l,
                max: spec.max_positions,
            });
        }
        let flat: Vec<TokenId> = ids.iter().copied().collect();
        let emb = self.embed_tokens(&flat);
        let emb3 = self.tape.reshape(emb, &[b, l, spec.d_model]);
        let pe = positional_encoding(l, spec.d_model);
        let x = self.tape.add_const(emb3, &pe);
        let mut x = self.dropout(x);

        let causal = causal_bias(l);
        for layer in 0..spec.n_layers {
            x = self.attn_sublayer(
                x,
                None,
                &format!("decoder.{layer}.ln1"),
                &format!("decoder.{layer}.self_attn"),
                &causal,
            );
            x = self.attn_sublayer(
                x,
                Some(enc_out),
                &format!("decoder.{layer}.ln2"),
                &format!("decoder.{layer}.cross_attn"),
                enc_bias,
            );
            x = self.ffn_sublayer(x, &format!("decoder.{layer}.ln3"), &format!("decoder.{layer}.ffn"));
        }
        let normed = self.layer_norm(x, "decoder.final_ln");
        let embedding = self.var(SHARED_EMBEDDING);
        let logits_flat = self.tape.matmul_bt(normed, embedding);
        Ok(self.tape.reshape(logits_flat, &[b, l, spec.vocab_size]))
    }
}

/// Teacher-forced graph over a whole batch.
pub(crate) fn build_graph(
    model: &Model,
    batch: &Batch,
    mode: RunMode<'_>,
) -> Result<Graph, ModelError> {
    let scored_tokens = batch.label_mask.iter().filter(|&&m| m != 0.0).count();
    if scored_tokens == 0 {
        return Err(ModelError::DegenerateBatch);
    }
    let streams = batch.encoder_streams();
    let mut builder = Builder::new(model, mode);
    let (enc_out, enc_bias) = builder.encode(&streams)?;
    let logits = builder.decode(enc_out, &enc_bias, &batch.decoder_input)?;
    let (loss, _) = builder
        .tape
        .cross_entropy(logits, &batch.labels, &batch.label_mask);
    Ok(Graph {
        tape: builder.tape,
        loss,
        logits,
        param_vars: builder.vars,
        scored_tokens,
    })
}

/// Runs the encoder once for a single sample (generation path).
pub(crate) fn encode_once(
    model: &Model,
    stream: &EncoderStream,
) -> Result<EncodedSample, ModelError> {
    if stream.total_len() == 0 {
        return Err(ModelError::ShapeMismatch(
            "cannot encode an empty stream".to_string(),
        ));
    }
    let mut builder = Builder::new(model, RunMode::Eval);
    let (enc_out, _) = builder.encode(std::slice::from_ref(stream))?;
    let value = builder
        .tape
        .value(enc_out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    Ok(EncodedSample { enc_out: value })
}

/// Log-probabilities of the next token after `decoder_ids`.
pub(crate) fn next_token_logprobs(
    model: &Model,
    encoded: &EncodedSample,
    decoder_ids: &[TokenId],
) -> Result<Array1<f64>, ModelError> {
    let mut builder = Builder::new(model, RunMode::Eval);
    let enc_var = builder.tape.leaf(encoded.enc_out.clone().into_dyn());
    let l_enc = encoded.enc_out.dim().1;
    let enc_bias = ArrayD::zeros(IxDyn(&[1, 1, 1, l_enc]));
    let ids = Array2::from_shape_vec((1, decoder_ids.len()), decoder_ids.to_vec())
        .expect("row vector");
    let logits = builder.decode(enc_var, &enc_bias, &ids)?;
    let value = builder.tape.value(logits);
    let last = value
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), decoder_ids.len() - 1)
        .to_owned();
    let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + last.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(last.mapv(|z| z - lse))
}

/// Classic sinusoidal table, shaped `[1, len, d]` for broadcasting.
fn positional_encoding(len: usize, d: usize) -> ArrayD<f64> {
    let mut pe = Array3::<f64>::zeros((1, len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[0, pos, 2 * i]] = rate.sin();
            pe[[0, pos, 2 * i + 1]] = rate.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[0, pos, d - 1]] = rate.sin();
        }
    }
    pe.into_dyn()
}

/// `[B, 1, 1, L]` additive bias masking padded keys.
fn key_padding_bias(streams: &[EncoderStream], l_max: usize) -> ArrayD<f64> {
    let b = streams.len();
    let mut bias = ndarray::Array4::<f64>::zeros((b, 1, 1, l_max));
    for (i, stream) in streams.iter().enumerate() {
        for k in stream.total_len()..l_max {
            bias[[i, 0, 0, k]] = MASK_NEG;
        }
    }
    bias.into_dyn()
}

/// `[1, 1, L, L]` additive bias hiding future positions.
fn causal_bias(l: usize) -> ArrayD<f64> {
    let mut bias = ndarray::Array4::<f64>::zeros((1, 1, l, l));
    for i in 0..l {
        for j in (i + 1)..l {
            bias[[0, 0, i, j]] = MASK_NEG;
        }
    }
    bias.into_dyn()
}
