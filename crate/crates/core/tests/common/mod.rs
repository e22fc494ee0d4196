//! Shared fixtures and independent oracles for the integration and
//! acceptance suites. Oracles deliberately avoid the library's counting
//! and indexing machinery: straight slice scans and per-frame enumeration.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mmh_core::metadata::{write_metadata_tsv, SampleRecord, Split, SplitTable};
use mmh_core::processors::pretokenize;
use mmh_core::signal::{save_pose, PoseSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

/// Brute-force corpus BLEU: same declared definition (1-4 gram clipped
/// precision, effective orders, halving smoothing, brevity penalty), but
/// counted by quadratic slice scans instead of hash maps.
pub fn bleu_oracle(hypotheses: &[String], references: &[String]) -> f64 {
    assert_eq!(hypotheses.len(), references.len());
    let hyp_tokens: Vec<Vec<String>> = hypotheses.iter().map(|s| pretokenize(s)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|s| pretokenize(s)).collect();
    let hyp_len: usize = hyp_tokens.iter().map(Vec::len).sum();
    let ref_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return 0.0;
    }

    let mut log_sum = 0.0;
    let mut used = 0usize;
    let mut smoothing = 1.0f64;
    for n in 1..=4usize {
        let mut matches = 0usize;
        let mut total = 0usize;
        for (h, r) in hyp_tokens.iter().zip(&ref_tokens) {
            if h.len() < n {
                continue;
            }
            total += h.len() - n + 1;
            // Clipped matches without hash maps: for each distinct n-gram
            // (first occurrence scan), min(count in h, count in r).
            for start in 0..=(h.len() - n) {
                let gram = &h[start..start + n];
                let first = (0..start).any(|earlier| &h[earlier..earlier + n] == gram);
                if first {
                    continue;
                }
                let in_hyp = (0..=(h.len() - n))
                    .filter(|&s| &h[s..s + n] == gram)
                    .count();
                let in_ref = if r.len() < n {
                    0
                } else {
                    (0..=(r.len() - n)).filter(|&s| &r[s..s + n] == gram).count()
                };
                matches += in_hyp.min(in_ref);
            }
        }
        if total == 0 {
            continue;
        }
        let p = if matches == 0 {
            smoothing *= 2.0;
            1.0 / (smoothing * total as f64)
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
        used += 1;
    }
    if used == 0 {
        return 0.0;
    }
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * brevity * (log_sum / used as f64).exp()
}

/// Brute-force corpus chrF with the same declared parameterization.
pub fn chrf_oracle(hypotheses: &[String], references: &[String], max_order: usize, beta: f64) -> f64 {
    assert_eq!(hypotheses.len(), references.len());
    let hyp_chars: Vec<Vec<char>> = hypotheses
        .iter()
        .map(|s| s.chars().filter(|c| !c.is_whitespace()).collect())
        .collect();
    let ref_chars: Vec<Vec<char>> = references
        .iter()
        .map(|s| s.chars().filter(|c| !c.is_whitespace()).collect())
        .collect();

    let beta_sq = beta * beta;
    let mut f_sum = 0.0;
    let mut used = 0usize;
    for n in 1..=max_order {
        let mut matches = 0usize;
        let mut hyp_total = 0usize;
        let mut ref_total = 0usize;
        for (h, r) in hyp_chars.iter().zip(&ref_chars) {
            let ht = h.len().saturating_sub(n - 1);
            let rt = r.len().saturating_sub(n - 1);
            hyp_total += ht;
            ref_total += rt;
            if ht == 0 || rt == 0 {
                continue;
            }
            for start in 0..ht {
                let gram = &h[start..start + n];
                if (0..start).any(|earlier| &h[earlier..earlier + n] == gram) {
                    continue;
                }
                let in_hyp = (0..ht).filter(|&s| &h[s..s + n] == gram).count();
                let in_ref = (0..rt).filter(|&s| &r[s..s + n] == gram).count();
                matches += in_hyp.min(in_ref);
            }
        }
        if hyp_total == 0 && ref_total == 0 {
            continue;
        }
        let precision = if hyp_total == 0 {
            0.0
        } else {
            matches as f64 / hyp_total as f64
        };
        let recall = if ref_total == 0 {
            0.0
        } else {
            matches as f64 / ref_total as f64
        };
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
        };
        f_sum += f;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        100.0 * f_sum / used as f64
    }
}

// ---------------------------------------------------------------------------
// Temporal oracle
// ---------------------------------------------------------------------------

/// Enumerates kept frame indices for a clip by checking each frame's time
/// span `[i/fps, (i+1)/fps)` against `[start, end)` seconds. `end_ms == 0`
/// means "to the end of the signal"; `(0, 0)` keeps everything.
pub fn clip_oracle(t: usize, fps: f64, start_ms: u64, end_ms: u64) -> Vec<usize> {
    if start_ms == 0 && end_ms == 0 {
        return (0..t).collect();
    }
    let start_s = start_ms as f64 / 1000.0;
    let end_s = end_ms as f64 / 1000.0;
    (0..t)
        .filter(|&i| {
            let span_start = i as f64 / fps;
            let span_end = (i + 1) as f64 / fps;
            span_end > start_s && (end_ms == 0 || span_start < end_s)
        })
        .collect()
}

/// Frame indices surviving `keep every stride-th` subsampling.
pub fn stride_oracle(indices: &[usize], stride: usize) -> Vec<usize> {
    indices.iter().copied().step_by(stride).collect()
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

const WORDS: [&str; 16] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa",
];

/// `n` distinct short sentences from a small closed vocabulary.
pub fn copy_sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n);
    while sentences.len() < n {
        let len = rng.gen_range(3..=5);
        let words: Vec<&str> = (0..len)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect();
        let sentence = words.join(" ");
        if !sentences.contains(&sentence) {
            sentences.push(sentence);
        }
    }
    sentences
}

/// Distinct 3-word targets for signal-to-text fixtures.
pub fn triple_targets(n: usize) -> Vec<String> {
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let a = WORDS[i % WORDS.len()];
        let b = WORDS[(i * 5 + 3) % WORDS.len()];
        let c = WORDS[(i * 11 + 7) % WORDS.len()];
        targets.push(format!("{a} {b} {c}"));
    }
    assert_eq!(
        targets.len(),
        targets.iter().collect::<std::collections::BTreeSet<_>>().len(),
        "targets must be distinct"
    );
    targets
}

pub fn write_split(dir: &Path, name: &str, split: Split, records: Vec<SampleRecord>) -> PathBuf {
    let table = SplitTable {
        split,
        records,
        source_path: String::new(),
    };
    let path = dir.join(name);
    write_metadata_tsv(&table, &path).expect("fixture tsv writes");
    path
}

/// A text2text copy-task fixture: the prompt is the sentence, the output
/// repeats it. Returns the config path.
pub fn copy_task_fixture(dir: &Path, n: usize, max_steps: usize, seed: u64) -> PathBuf {
    let sentences = copy_sentences(n, seed);
    let records: Vec<SampleRecord> = sentences
        .iter()
        .map(|s| SampleRecord {
            encoder_prompt: s.clone(),
            output: s.clone(),
            ..Default::default()
        })
        .collect();
    let train = write_split(dir, "train.tsv", Split::Train, records.clone());
    let validation = write_split(dir, "validation.tsv", Split::Validation, records.clone());
    let test = write_split(dir, "test.tsv", Split::Test, records);

    let output_dir = dir.join("run");
    let config = format!(
        "model:\n  d_model: 64\n  n_layers: 2\n  n_heads: 4\n  d_ff: 128\ndata:\n  train_metadata_file: {train}\n  validation_metadata_file: {validation}\n  test_metadata_file: {test}\nprocessor:\ntraining:\n  max_steps: {max_steps}\n  batch_size: 8\n  lr: 3.0e-3\n  seed: {seed}\n  checkpoint_every: 100\n  max_len: 12\n  output_dir: {out}\n",
        train = train.display(),
        validation = validation.display(),
        test = test.display(),
        out = output_dir.display(),
    );
    let config_path = dir.join("config.yaml");
    std::fs::write(&config_path, config).expect("fixture config writes");
    config_path
}

/// Synthetic pose files: fixed-seed noise, one per sample. Half the
/// records carry non-zero millisecond bounds (frames exist beyond them).
pub struct PoseFixture {
    pub config_path: PathBuf,
    pub targets: Vec<String>,
    pub output_dir: PathBuf,
}

pub fn pose_task_fixture(dir: &Path, n: usize, max_steps: usize, seed: u64) -> PoseFixture {
    let targets = triple_targets(n);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut records = Vec::with_capacity(n);
    for (i, _target) in targets.iter().enumerate() {
        let clipped = i % 2 == 1;
        let t = if clipped { 30 } else { 20 };
        let frames = ndarray::Array3::from_shape_fn((t, 4, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let seq = PoseSequence { frames, fps: 25.0 };
        let path = dir.join(format!("pose-{i:02}.mmhpose"));
        save_pose(&seq, &path).expect("fixture pose writes");
        let (start, end) = if clipped { (200, 800) } else { (0, 0) };
        records.push(SampleRecord {
            signal: path.to_string_lossy().into_owned(),
            signal_start: start,
            signal_end: end,
            encoder_prompt: "<slt> asl en".to_string(),
            decoder_prompt: String::new(),
            output: targets[i].clone(),
        });
    }
    let train = write_split(dir, "train.tsv", Split::Train, records.clone());
    let validation = write_split(dir, "validation.tsv", Split::Validation, records.clone());
    let test = write_split(dir, "test.tsv", Split::Test, records);

    let output_dir = dir.join("run");
    let config = format!(
        "model:\n  d_model: 64\n  n_layers: 2\n  n_heads: 4\n  d_ff: 128\n  multimodal_mapper_type: linear\ndata:\n  train_metadata_file: {train}\n  validation_metadata_file: {validation}\n  test_metadata_file: {test}\nprocessor:\n  new_vocabulary: \"<slt>\"\ntraining:\n  max_steps: {max_steps}\n  batch_size: 8\n  lr: 3.0e-3\n  seed: {seed}\n  max_len: 8\n  output_dir: {out}\n",
        train = train.display(),
        validation = validation.display(),
        test = test.display(),
        out = output_dir.display(),
    );
    let config_path = dir.join("config.yaml");
    std::fs::write(&config_path, config).expect("fixture config writes");
    PoseFixture {
        config_path,
        targets,
        output_dir,
    }
}

/// Mixed-modality fixture: text with one inline pose reference per sample.
pub struct MixedFixture {
    pub config_path: PathBuf,
    pub targets: Vec<String>,
    pub output_dir: PathBuf,
}

pub fn mixed_task_fixture(dir: &Path, n: usize, max_steps: usize, seed: u64) -> MixedFixture {
    use mmh_core::metaproc::{write_mixed_tsv, MixedRecord, MixedTable};

    let targets = triple_targets(n);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x517cc1b727220a95);
    let mut records = Vec::with_capacity(n);
    for (i, target) in targets.iter().enumerate() {
        let t = 18 + (i % 3) * 4;
        let frames = ndarray::Array3::from_shape_fn((t, 4, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let seq = PoseSequence { frames, fps: 25.0 };
        let path = dir.join(format!("mixed-pose-{i:02}.mmhpose"));
        save_pose(&seq, &path).expect("fixture pose writes");
        records.push(MixedRecord {
            encoder_input: format!("translate <signal:{}> now", path.display()),
            decoder_input: String::new(),
            label: target.clone(),
        });
    }
    let write = |name: &str, split: Split| -> PathBuf {
        let table = MixedTable {
            split,
            records: records.clone(),
            source_path: String::new(),
        };
        let path = dir.join(name);
        write_mixed_tsv(&table, &path).expect("fixture mixed tsv writes");
        path
    };
    let train = write("train.tsv", Split::Train);
    let validation = write("validation.tsv", Split::Validation);
    let test = write("test.tsv", Split::Test);

    let output_dir = dir.join("run");
    let config = format!(
        "model:\n  d_model: 64\n  n_layers: 2\n  n_heads: 4\n  d_ff: 128\ndata:\n  train_metadata_file: {train}\n  validation_metadata_file: {validation}\n  test_metadata_file: {test}\nprocessor:\ntraining:\n  max_steps: {max_steps}\n  batch_size: 8\n  lr: 3.0e-3\n  seed: {seed}\n  max_len: 8\n  output_dir: {out}\n",
        train = train.display(),
        validation = validation.display(),
        test = test.display(),
        out = output_dir.display(),
    );
    let config_path = dir.join("config.yaml");
    std::fs::write(&config_path, config).expect("fixture config writes");
    MixedFixture {
        config_path,
        targets,
        output_dir,
    }
}

/// Normalized exact-match rate between predictions and references
/// (whitespace/punctuation normalization on both sides).
pub fn exact_match_rate(predictions: &[String], references: &[String]) -> f64 {
    assert_eq!(predictions.len(), references.len());
    let matches = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| pretokenize(p) == pretokenize(r))
        .count();
    matches as f64 / predictions.len() as f64
}
