use super::autograd::Tape;
use super::*;
use crate::processors::{build_vocabulary, collate, EncoderKind, ModelInput, Vocabulary};
use ndarray::{ArrayD, IxDyn};

fn tiny_spec(input_dim: Option<usize>, vocab_size: usize) -> ModelSpec {
    ModelSpec {
        extractor_type: ExtractorType::Identity,
        mapper_type: MapperType::Linear,
        backbone_type: BackboneType::TinyTransformer,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        input_dim,
        vocab_size,
        dropout: 0.0,
        max_positions: 64,
    }
}

fn copy_vocab() -> Vocabulary {
    build_vocabulary(["aa bb cc dd ee ff gg hh"], 1).unwrap()
}

fn token_input(vocab: &Vocabulary, text: &str, out: &str, index: usize) -> ModelInput {
    let mut labels = vocab.tokenize(out);
    labels.push(vocab.eos_id());
    ModelInput {
        encoder_kind: EncoderKind::Tokens,
        encoder_tokens: vocab.tokenize(text),
        encoder_features: None,
        decoder_prompt_tokens: vec![vocab.pad_id()],
        label_tokens: labels,
        source_index: index,
    }
}

fn feature_input(vocab: &Vocabulary, t: usize, d: usize, out: &str, index: usize) -> ModelInput {
    let mut labels = vocab.tokenize(out);
    labels.push(vocab.eos_id());
    let features =
        ndarray::Array2::from_shape_fn((t, d), |(i, j)| ((i * d + j + index) as f64).sin());
    ModelInput {
        encoder_kind: EncoderKind::Features,
        encoder_tokens: vocab.tokenize("aa"),
        encoder_features: Some(features),
        decoder_prompt_tokens: vec![vocab.pad_id()],
        label_tokens: labels,
        source_index: index,
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let spec = tiny_spec(Some(6), 20);
    let a = Model::init(spec.clone(), 7).unwrap();
    let b = Model::init(spec.clone(), 7).unwrap();
    assert_eq!(a.params, b.params);
    let c = Model::init(spec, 8).unwrap();
    assert!(a.params.iter().any(|(name, t)| c.params.get(name).unwrap().value != t.value));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = tiny_spec(None, 20);
    spec.d_model = 65;
    spec.n_heads = 4;
    assert!(matches!(Model::init(spec, 0), Err(ModelError::InvalidSpec(_))));

    let mut spec = tiny_spec(None, 20);
    spec.dropout = 1.0;
    assert!(matches!(Model::init(spec, 0), Err(ModelError::InvalidSpec(_))));
}

#[test]
fn biases_start_at_zero() {
    let model = Model::init(tiny_spec(Some(6), 20), 3).unwrap();
    let bias = &model.params.get("mapper.bias").unwrap().value;
    assert!(bias.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_extractor_passes_through() {
    let model = Model::init(tiny_spec(Some(99), 20), 0).unwrap();
    let x = ndarray::Array2::from_shape_fn((3, 99), |(i, j)| (i + j) as f64);
    assert_eq!(model.extract_features(&x).unwrap(), x);
    let narrow = ndarray::Array2::<f64>::zeros((3, 98));
    assert!(matches!(
        model.extract_features(&narrow),
        Err(ModelError::ShapeMismatch(_))
    ));
}

#[test]
fn linear_extractor_with_identity_weights_is_identity() {
    let mut spec = tiny_spec(Some(16), 20);
    spec.extractor_type = ExtractorType::Linear;
    let mut model = Model::init(spec, 0).unwrap();
    let eye = ndarray::Array2::<f64>::eye(16);
    model.params.get_mut("extractor.weight").unwrap().value = eye.into_dyn();
    let x = ndarray::Array2::from_shape_fn((4, 16), |(i, j)| (i * 16 + j) as f64);
    let out = model.extract_features(&x).unwrap();
    assert!(out.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn zero_input_through_linear_mapper_broadcasts_bias() {
    let mut model = Model::init(tiny_spec(Some(8), 20), 1).unwrap();
    model
        .params
        .get_mut("mapper.bias")
        .unwrap()
        .value
        .fill(0.25);
    let out = model
        .map_features(&ndarray::Array2::zeros((5, 8)))
        .unwrap();
    assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn mlp_mapper_with_zero_second_layer_is_constant() {
    let mut spec = tiny_spec(Some(8), 20);
    spec.mapper_type = MapperType::Mlp;
    let mut model = Model::init(spec, 1).unwrap();
    model.params.get_mut("mapper.w2").unwrap().value.fill(0.0);
    model.params.get_mut("mapper.b2").unwrap().value.fill(0.5);
    let f = ndarray::Array2::from_shape_fn((4, 8), |(i, j)| (i as f64) - (j as f64));
    let out = model.map_features(&f).unwrap();
    assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn linear_mapper_gradients_match_finite_differences() {
    // Scalar objective: sum over the mapped features.
    let d_f = 8;
    let d_out = 5;
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(99);
    let x0 = ArrayD::from_shape_fn(IxDyn(&[4, d_f]), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);
    let w0 = ArrayD::from_shape_fn(IxDyn(&[d_f, d_out]), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);
    let b0 = ArrayD::from_shape_fn(IxDyn(&[d_out]), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5);

    let run = |w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.linear(x, wv, Some(bv));
        let s = tape.sum(y);
        tape.value(s)[[0]]
    };

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let wv = tape.leaf(w0.clone());
    let bv = tape.leaf(b0.clone());
    let y = tape.linear(x, wv, Some(bv));
    let s = tape.sum(y);
    tape.backward(s);
    let gw = tape.take_grad(wv).unwrap();
    let gb = tape.take_grad(bv).unwrap();

    let eps = 1e-4;
    let mut max_err = 0.0f64;
    for idx in 0..w0.len() {
        let mut plus = w0.clone();
        let mut minus = w0.clone();
        plus.as_slice_mut().unwrap()[idx] += eps;
        minus.as_slice_mut().unwrap()[idx] -= eps;
        let fd = (run(&plus, &b0) - run(&minus, &b0)) / (2.0 * eps);
        let an = gw.as_slice().unwrap()[idx];
        max_err = max_err.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    for idx in 0..b0.len() {
        let mut plus = b0.clone();
        let mut minus = b0.clone();
        plus.as_slice_mut().unwrap()[idx] += eps;
        minus.as_slice_mut().unwrap()[idx] -= eps;
        let fd = (run(&w0, &plus) - run(&w0, &minus)) / (2.0 * eps);
        let an = gb.as_slice().unwrap()[idx];
        max_err = max_err.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    assert!(max_err < 1e-4, "max relative error {max_err}");
}

#[test]
fn fresh_model_loss_is_near_ln_vocab() {
    let vocab_size = 101;
    let mut spec = tiny_spec(None, vocab_size);
    spec.d_model = 64;
    spec.n_layers = 2;
    spec.n_heads = 4;
    spec.d_ff = 128;
    let model = Model::init(spec, 42).unwrap();
    let vocab = copy_vocab();
    let inputs: Vec<ModelInput> = (0..4)
        .map(|i| token_input(&vocab, "aa bb cc", "dd ee ff gg", i))
        .collect();
    let batch = collate(&inputs, &vocab).unwrap();
    let out = model.forward(&batch, RunMode::Eval).unwrap();
    let expected = (vocab_size as f64).ln();
    let rel = (out.loss - expected).abs() / expected;
    assert!(
        rel < 0.05,
        "initial loss {} vs ln({vocab_size}) = {expected} (rel {rel})",
        out.loss
    );
}

#[test]
fn padded_feature_cells_do_not_influence_logits() {
    let vocab = copy_vocab();
    let spec = tiny_spec(Some(4), vocab.size());
    let model = Model::init(spec, 5).unwrap();
    let inputs = vec![
        feature_input(&vocab, 3, 4, "aa bb", 0),
        feature_input(&vocab, 5, 4, "cc", 1),
    ];
    let mut batch = collate(&inputs, &vocab).unwrap();
    let baseline = model.forward(&batch, RunMode::Eval).unwrap();

    if let crate::processors::EncoderBatch::Uniform {
        features: Some(f), ..
    } = &mut batch.encoder
    {
        // Rows 3 and 4 of sample 0 are padding.
        f.slice_mut(ndarray::s![0, 3.., ..]).fill(1234.5);
    } else {
        panic!("expected uniform feature batch");
    }
    let perturbed = model.forward(&batch, RunMode::Eval).unwrap();
    assert_eq!(baseline.logits, perturbed.logits);
    assert_eq!(baseline.loss, perturbed.loss);
}

#[test]
fn all_ignored_labels_is_a_degenerate_batch() {
    let vocab = copy_vocab();
    let model = Model::init(tiny_spec(None, vocab.size()), 0).unwrap();
    let mut input = token_input(&vocab, "aa bb", "cc", 0);
    input.label_tokens.clear();
    let batch = collate(&[input], &vocab).unwrap();
    assert!(matches!(
        model.forward(&batch, RunMode::Eval),
        Err(ModelError::DegenerateBatch)
    ));
}

#[test]
fn over_long_sequences_are_rejected() {
    let vocab = copy_vocab();
    let mut spec = tiny_spec(None, vocab.size());
    spec.max_positions = 4;
    let model = Model::init(spec, 0).unwrap();
    let input = token_input(&vocab, "aa bb cc dd ee ff", "aa", 0);
    let batch = collate(&[input], &vocab).unwrap();
    assert!(matches!(
        model.forward(&batch, RunMode::Eval),
        Err(ModelError::SequenceTooLong { .. })
    ));
}

#[test]
fn weight_tying_links_embedding_and_logits() {
    let vocab = copy_vocab();
    let token = vocab.id_of("bb").unwrap() as usize;
    let mut model = Model::init(tiny_spec(None, vocab.size()), 9).unwrap();
    let input = token_input(&vocab, "aa bb", "bb cc", 0);
    let batch = collate(&[input], &vocab).unwrap();
    let before = model.forward(&batch, RunMode::Eval).unwrap();

    {
        let emb = &mut model.params.get_mut(SHARED_EMBEDDING).unwrap().value;
        let mut row = emb.index_axis_mut(ndarray::Axis(0), token);
        row += 0.5;
    }
    let after = model.forward(&batch, RunMode::Eval).unwrap();

    // The logit column for the perturbed token moves at every position...
    let moved_col = (0..before.logits.dim().1)
        .all(|j| before.logits[[0, j, token]] != after.logits[[0, j, token]]);
    assert!(moved_col, "logit column did not move");
    // ...and other columns move only via the embedded input (they do here
    // because `bb` is part of the encoder prompt and decoder stream).
    assert_ne!(before.logits, after.logits);
}

fn overfit_batch(vocab: &Vocabulary) -> crate::processors::Batch {
    let sentences = ["aa bb", "cc dd", "ee ff", "gg hh"];
    let inputs: Vec<ModelInput> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| token_input(vocab, s, s, i))
        .collect();
    collate(&inputs, vocab).unwrap()
}

#[test]
fn training_memorizes_a_small_copy_batch() {
    let vocab = copy_vocab();
    let mut spec = tiny_spec(None, vocab.size());
    spec.d_model = 32;
    spec.d_ff = 64;
    let mut model = Model::init(spec, 1).unwrap();
    let batch = overfit_batch(&vocab);
    let mut opt = AdamState::new();
    let hyper = TrainHyper {
        lr: 3e-3,
        ..Default::default()
    };
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = model.train_step(&batch, &mut opt, &hyper, &mut rng).unwrap();
    }
    assert!(last < 0.1, "final loss {last}");

    // The overfit model reproduces its targets greedily.
    let aa = vocab.id_of("aa").unwrap();
    let bb = vocab.id_of("bb").unwrap();
    let stream = Model::stream_of(&token_input(&vocab, "aa bb", "aa bb", 0));
    let out = model
        .generate_greedy(&stream, &[vocab.pad_id()], 8, vocab.eos_id(), vocab.pad_id())
        .unwrap();
    assert_eq!(out, vec![aa, bb]);
}

#[test]
fn freeze_backbone_trains_only_embedding_extractor_mapper() {
    let vocab = copy_vocab();
    let spec = tiny_spec(Some(4), vocab.size());
    let mut model = Model::init(spec, 3).unwrap();
    model.set_freeze_policy(FreezePolicy::FreezeBackboneExceptEmbedding);

    let trainable = model.params.trainable_names();
    assert!(trainable.iter().all(|n| n == SHARED_EMBEDDING
        || n.starts_with("extractor.")
        || n.starts_with("mapper.")));
    assert!(trainable.contains(&SHARED_EMBEDDING.to_string()));

    let frozen_before: Vec<(String, ArrayD<f64>)> = model
        .params
        .iter()
        .filter(|(_, t)| !t.trainable)
        .map(|(n, t)| (n.clone(), t.value.clone()))
        .collect();
    let embedding_before = model.params.get(SHARED_EMBEDDING).unwrap().value.clone();

    let inputs = vec![
        feature_input(&vocab, 3, 4, "aa bb", 0),
        feature_input(&vocab, 4, 4, "cc dd", 1),
    ];
    let batch = collate(&inputs, &vocab).unwrap();
    let mut opt = AdamState::new();
    let hyper = TrainHyper::default();
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
    for _ in 0..10 {
        model.train_step(&batch, &mut opt, &hyper, &mut rng).unwrap();
    }

    for (name, before) in &frozen_before {
        assert_eq!(
            &model.params.get(name).unwrap().value,
            before,
            "frozen tensor {name} changed"
        );
    }
    assert_ne!(
        model.params.get(SHARED_EMBEDDING).unwrap().value,
        embedding_before
    );
}

#[test]
fn freeze_all_except_mapper_without_mapper_has_no_trainables() {
    let vocab = copy_vocab();
    let mut model = Model::init(tiny_spec(None, vocab.size()), 0).unwrap();
    model.set_freeze_policy(FreezePolicy::FreezeAllExceptMapper);
    let batch = overfit_batch(&vocab);
    let mut opt = AdamState::new();
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
    assert!(matches!(
        model.train_step(&batch, &mut opt, &TrainHyper::default(), &mut rng),
        Err(ModelError::NoTrainableParameters)
    ));
}

#[test]
fn unknown_policy_strings_are_rejected() {
    use std::str::FromStr;
    assert!(FreezePolicy::from_str("none").is_ok());
    assert!(FreezePolicy::from_str("freeze_backbone_except_embedding").is_ok());
    assert!(FreezePolicy::from_str("freeze_all_except_mapper").is_ok());
    assert!(matches!(
        FreezePolicy::from_str("melt_everything"),
        Err(ModelError::UnknownPolicy(_))
    ));
}

#[test]
fn beam_one_equals_greedy_on_random_models() {
    let vocab = copy_vocab();
    for seed in 0..50u64 {
        let model = Model::init(tiny_spec(None, vocab.size()), seed).unwrap();
        let input = token_input(&vocab, "aa bb cc", "", 0);
        let stream = Model::stream_of(&input);
        let greedy = model
            .generate_greedy(&stream, &[vocab.pad_id()], 6, vocab.eos_id(), vocab.pad_id())
            .unwrap();
        let beam = model
            .generate_beam(&stream, &[vocab.pad_id()], 1, 6, vocab.eos_id(), vocab.pad_id())
            .unwrap();
        assert_eq!(greedy, beam, "seed {seed}");
    }
}

#[test]
fn max_len_zero_generates_nothing() {
    let vocab = copy_vocab();
    let model = Model::init(tiny_spec(None, vocab.size()), 0).unwrap();
    let stream = Model::stream_of(&token_input(&vocab, "aa", "", 0));
    let out = model
        .generate_greedy(&stream, &[vocab.pad_id()], 0, vocab.eos_id(), vocab.pad_id())
        .unwrap();
    assert!(out.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let vocab = copy_vocab();
    let spec = tiny_spec(Some(4), vocab.size());
    let model = Model::init(spec.clone(), 11).unwrap();
    let mut opt = AdamState::new();
    opt.step = 17;
    opt.moments.insert(
        SHARED_EMBEDDING.to_string(),
        (
            ArrayD::from_elem(IxDyn(&[vocab.size(), 16]), 0.25),
            ArrayD::from_elem(IxDyn(&[vocab.size(), 16]), 0.5),
        ),
    );
    let hash = [7u8; 32];
    let dir = std::env::temp_dir().join("mmh-model-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("ckpt-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &model.params, Some(&opt), 123, 456u128, &spec, &hash).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.optimizer.as_ref().unwrap(), &opt);
    assert_eq!(loaded.step, 123);
    assert_eq!(loaded.rng_word_pos, 456);
    assert_eq!(loaded.spec, spec);
    assert_eq!(loaded.vocab_hash, hash);
    loaded.ensure_matches(&spec, &hash).unwrap();

    let other_hash = [8u8; 32];
    assert!(matches!(
        loaded.ensure_matches(&spec, &other_hash),
        Err(ModelError::IncompatibleSpec(_))
    ));
    let mut other_spec = spec.clone();
    other_spec.d_model = 32;
    assert!(matches!(
        loaded.ensure_matches(&other_spec, &hash),
        Err(ModelError::IncompatibleSpec(_))
    ));
}

#[test]
fn resume_reproduces_the_uninterrupted_trajectory() {
    use rand::SeedableRng;
    let vocab = copy_vocab();
    let mut spec = tiny_spec(None, vocab.size());
    spec.dropout = 0.1; // exercise the RNG position bookkeeping
    let batch = overfit_batch(&vocab);
    let hyper = TrainHyper::default();
    let hash = [1u8; 32];

    // Uninterrupted: 6 steps.
    let mut model_a = Model::init(spec.clone(), 2).unwrap();
    let mut opt_a = AdamState::new();
    let mut rng_a = rand_chacha::ChaCha20Rng::seed_from_u64(1000);
    let mut losses_a = Vec::new();
    for _ in 0..6 {
        losses_a.push(model_a.train_step(&batch, &mut opt_a, &hyper, &mut rng_a).unwrap());
    }

    // Interrupted after 3 steps, checkpointed, resumed.
    let mut model_b = Model::init(spec.clone(), 2).unwrap();
    let mut opt_b = AdamState::new();
    let mut rng_b = rand_chacha::ChaCha20Rng::seed_from_u64(1000);
    let mut losses_b = Vec::new();
    for _ in 0..3 {
        losses_b.push(model_b.train_step(&batch, &mut opt_b, &hyper, &mut rng_b).unwrap());
    }
    let dir = std::env::temp_dir().join("mmh-model-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("resume-{}.ckpt", std::process::id()));
    save_checkpoint(
        &path,
        &model_b.params,
        Some(&opt_b),
        3,
        rng_b.get_word_pos(),
        &spec,
        &hash,
    )
    .unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    loaded.ensure_matches(&spec, &hash).unwrap();
    let mut model_c = Model {
        spec: loaded.spec.clone(),
        params: loaded.params.clone(),
    };
    let mut opt_c = loaded.optimizer.clone().unwrap();
    let mut rng_c = rand_chacha::ChaCha20Rng::seed_from_u64(1000);
    rng_c.set_word_pos(loaded.rng_word_pos);
    for _ in 0..3 {
        losses_b.push(model_c.train_step(&batch, &mut opt_c, &hyper, &mut rng_c).unwrap());
    }

    assert_eq!(losses_a, losses_b, "resumed losses diverged");
    assert_eq!(model_a.params, model_c.params);
}

#[test]
fn forward_is_deterministic_in_eval_mode() {
    let vocab = copy_vocab();
    let model = Model::init(tiny_spec(None, vocab.size()), 13).unwrap();
    let batch = overfit_batch(&vocab);
    let a = model.forward(&batch, RunMode::Eval).unwrap();
    let b = model.forward(&batch, RunMode::Eval).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.loss, b.loss);
}
