//! Mixed-modality meta processor.
//!
//! Records carry free text with inline signal references of the form
//! `<signal:PATH>` or `<signal:PATH#START-END>` (bounds in milliseconds).
//! `\<` escapes a literal `<`. The detector splits the text into segments,
//! the processor routes each signal to its modality loader and tokenizes
//! the text in between, producing an ordered stream of token and feature
//! blocks the model consumes at exactly those positions.

use std::path::Path;

use thiserror::Error;

use crate::metadata::{
    infer_split_from_path, parse_tsv_rows, sanitize_field_newlines, MetadataError, SampleRecord,
    Split, Violation,
};
use crate::modality::{Modality, SignalExtensions};
use crate::processors::{
    EncoderStream, ProcessError, SampleProcessor, StreamBlock,
};
use crate::TokenId;

/// Header of the mixed-modality metadata TSV, bit-exact.
pub const MIXED_HEADER: &str = "encoder_input\tdecoder_input\tlabel";

pub const MIXED_COLUMNS: [&str; 3] = ["encoder_input", "decoder_input", "label"];

/// One mixed-modality example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MixedRecord {
    /// Natural-language text with embedded signal references; non-empty.
    pub encoder_input: String,
    pub decoder_input: String,
    pub label: String,
}

/// All mixed records of one split, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedTable {
    pub split: Split,
    pub records: Vec<MixedRecord>,
    pub source_path: String,
}

#[derive(Debug, Error)]
pub enum MetaprocError {
    #[error("malformed signal reference at byte {offset}: {detail}")]
    MalformedReference { offset: usize, detail: String },
    #[error("segment {segment}: no modality registered for {path:?}")]
    UnknownModality { segment: usize, path: String },
    #[error("segment {segment}: {source}")]
    Process {
        segment: usize,
        #[source]
        source: ProcessError,
    },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

/// A run of plain text or one signal reference.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text {
        content: String,
    },
    Signal {
        path: String,
        start_ms: u64,
        end_ms: u64,
        /// `None` when the extension is not registered; routing fails later
        /// with [`MetaprocError::UnknownModality`].
        modality: Option<Modality>,
    },
}

const OPEN: &str = "<signal:";

/// Splits text into segments according to the reference grammar.
///
/// Adjacent text (including escaped `\<`) merges into one segment. A
/// `<signal:` opener must form a complete reference; anything else is
/// reported as [`MetaprocError::MalformedReference`] with its byte offset.
pub fn detect_signals(
    text: &str,
    extensions: &SignalExtensions,
) -> Result<Vec<Segment>, MetaprocError> {
    let bytes = text.as_bytes();
    let mut segments = Vec::new();
    let mut buf = String::new();
    let mut i = 0usize;

    while i < bytes.len() {
        if bytes[i] == b'\\' && text[i + 1..].starts_with('<') {
            buf.push('<');
            i += 2;
            continue;
        }
        if text[i..].starts_with(OPEN) {
            let open_at = i;
            let body_start = i + OPEN.len();
            let close = text[body_start..].find('>').map(|p| body_start + p).ok_or(
                MetaprocError::MalformedReference {
                    offset: open_at,
                    detail: "missing closing `>`".to_string(),
                },
            )?;
            let body = &text[body_start..close];
            let segment = parse_reference(body, open_at, extensions)?;
            if !buf.is_empty() {
                segments.push(Segment::Text {
                    content: std::mem::take(&mut buf),
                });
            }
            segments.push(segment);
            i = close + 1;
            continue;
        }
        let c = text[i..].chars().next().expect("in bounds");
        buf.push(c);
        i += c.len_utf8();
    }
    if !buf.is_empty() {
        segments.push(Segment::Text { content: buf });
    }
    Ok(segments)
}

fn parse_reference(
    body: &str,
    offset: usize,
    extensions: &SignalExtensions,
) -> Result<Segment, MetaprocError> {
    let malformed = |detail: &str| MetaprocError::MalformedReference {
        offset,
        detail: detail.to_string(),
    };
    let (path, bounds) = match body.find('#') {
        Some(hash) => (&body[..hash], Some(&body[hash + 1..])),
        None => (body, None),
    };
    if path.is_empty() {
        return Err(malformed("empty signal path"));
    }
    if path.contains('#') {
        return Err(malformed("multiple `#` separators"));
    }
    let (start_ms, end_ms) = match bounds {
        None => (0, 0),
        Some(b) => {
            let (s, e) = b
                .split_once('-')
                .ok_or_else(|| malformed("bounds must be START-END"))?;
            let start: u64 = s
                .parse()
                .map_err(|_| malformed(&format!("bad start {s:?}")))?;
            let end: u64 = e
                .parse()
                .map_err(|_| malformed(&format!("bad end {e:?}")))?;
            if end != 0 && end <= start {
                return Err(malformed(&format!(
                    "end ({end}) must be 0 or greater than start ({start})"
                )));
            }
            (start, end)
        }
    };
    Ok(Segment::Signal {
        path: path.to_string(),
        start_ms,
        end_ms,
        modality: extensions.modality_of(path),
    })
}

/// Re-serializes segments to the canonical reference syntax. Text is
/// emitted verbatim except that a `<` which would read as an opener, or
/// which follows a backslash (and would otherwise pair into an unintended
/// escape), gets escaped; `detect_signals` of the result reproduces the
/// segments exactly.
pub fn serialize_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for segment in segments {
        match segment {
            Segment::Text { content } => {
                let mut prev_backslash = false;
                for (idx, c) in content.char_indices() {
                    if c == '<'
                        && (prev_backslash || content[idx + 1..].starts_with(&OPEN[1..]))
                    {
                        out.push('\\');
                    }
                    out.push(c);
                    prev_backslash = c == '\\';
                }
            }
            Segment::Signal {
                path,
                start_ms,
                end_ms,
                ..
            } => {
                if *start_ms == 0 && *end_ms == 0 {
                    out.push_str(&format!("<signal:{path}>"));
                } else {
                    out.push_str(&format!("<signal:{path}#{start_ms}-{end_ms}>"));
                }
            }
        }
    }
    out
}

/// A processed mixed record: ordered encoder blocks plus decoder tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedInput {
    pub stream: EncoderStream,
    pub decoder_prompt_tokens: Vec<TokenId>,
    pub label_tokens: Vec<TokenId>,
    pub source_index: usize,
}

/// Routes a mixed record through the text and signal processors.
///
/// Text segments become token blocks; signal segments load through the
/// modality matching their extension (honoring clip bounds and the
/// configured frame stride). Block order always equals segment order.
pub fn process_mixed(
    record: &MixedRecord,
    row: usize,
    processor: &SampleProcessor<'_>,
    extensions: &SignalExtensions,
) -> Result<MixedInput, MetaprocError> {
    let segments = detect_signals(&record.encoder_input, extensions)?;
    let mut blocks = Vec::new();
    for (index, segment) in segments.iter().enumerate() {
        match segment {
            Segment::Text { content } => {
                let ids = processor.vocab().tokenize(content);
                if !ids.is_empty() {
                    blocks.push(StreamBlock::Tokens(ids));
                }
            }
            Segment::Signal {
                path,
                start_ms,
                end_ms,
                modality,
            } => {
                let modality = modality.ok_or_else(|| MetaprocError::UnknownModality {
                    segment: index,
                    path: path.clone(),
                })?;
                let probe = SampleRecord {
                    signal: path.clone(),
                    signal_start: *start_ms,
                    signal_end: *end_ms,
                    ..Default::default()
                };
                let features = processor
                    .load_signal_features(path, &probe, row, modality)
                    .map_err(|source| MetaprocError::Process {
                        segment: index,
                        source,
                    })?;
                blocks.push(StreamBlock::Features(features));
            }
        }
    }

    let label_tokens = if record.label.is_empty() {
        Vec::new()
    } else {
        let mut ids = processor.vocab().tokenize(&record.label);
        ids.push(processor.vocab().eos_id());
        ids
    };
    Ok(MixedInput {
        stream: EncoderStream { blocks },
        decoder_prompt_tokens: processor.decoder_prompt(&record.decoder_input),
        label_tokens,
        source_index: row,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Token,
    Feature,
}

/// Provenance of one encoder position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionSource {
    pub kind: SourceKind,
    pub block_index: usize,
    pub offset: usize,
}

/// Per-position placement plan for interleaving embedded tokens and mapped
/// features; positions are contiguous and 0-based, and the plan length is
/// exactly the encoder length the model sees for this stream.
pub fn assemble_encoder_embedding_plan(stream: &EncoderStream) -> Vec<PositionSource> {
    let mut plan = Vec::with_capacity(stream.total_len());
    for (block_index, block) in stream.blocks.iter().enumerate() {
        let kind = match block {
            StreamBlock::Tokens(_) => SourceKind::Token,
            StreamBlock::Features(_) => SourceKind::Feature,
        };
        for offset in 0..block.len() {
            plan.push(PositionSource {
                kind,
                block_index,
                offset,
            });
        }
    }
    plan
}

/// Parses a mixed-modality TSV, inferring the split from the file stem.
pub fn parse_mixed_tsv(path: impl AsRef<Path>) -> Result<MixedTable, MetaprocError> {
    let path = path.as_ref();
    let split = infer_split_from_path(path)
        .ok_or_else(|| MetadataError::UnknownSplit(path.to_path_buf()))?;
    parse_mixed_tsv_for_split(path, split)
}

pub fn parse_mixed_tsv_for_split(
    path: impl AsRef<Path>,
    split: Split,
) -> Result<MixedTable, MetaprocError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = parse_tsv_rows(&text, &MIXED_COLUMNS, path)?;
    let records = rows
        .into_iter()
        .map(|cells| MixedRecord {
            encoder_input: cells[0].to_string(),
            decoder_input: cells[1].to_string(),
            label: cells[2].to_string(),
        })
        .collect();
    Ok(MixedTable {
        split,
        records,
        source_path: path.to_string_lossy().into_owned(),
    })
}

/// Writes a mixed table with the same conventions as the main metadata
/// format (LF, tabs, newline sanitization).
pub fn write_mixed_tsv(table: &MixedTable, path: impl AsRef<Path>) -> Result<(), MetaprocError> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(MIXED_HEADER);
    out.push('\n');
    for (row, rec) in table.records.iter().enumerate() {
        for (column, value) in [
            ("encoder_input", &rec.encoder_input),
            ("decoder_input", &rec.decoder_input),
            ("label", &rec.label),
        ] {
            if value.contains('\t') {
                return Err(MetadataError::TabInField { row, column }.into());
            }
        }
        out.push_str(&sanitize_field_newlines(&rec.encoder_input));
        out.push('\t');
        out.push_str(&sanitize_field_newlines(&rec.decoder_input));
        out.push('\t');
        out.push_str(&sanitize_field_newlines(&rec.label));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Invariant checks for mixed records: non-empty encoder input, labels
/// required outside the test split, references well-formed and routable.
pub fn validate_mixed_records(
    table: &MixedTable,
    extensions: &SignalExtensions,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (row, rec) in table.records.iter().enumerate() {
        if rec.encoder_input.is_empty() {
            violations.push(Violation {
                row,
                message: "encoder_input must be non-empty".to_string(),
            });
        }
        if rec.label.is_empty() && table.split != Split::Test {
            violations.push(Violation {
                row,
                message: format!(
                    "empty label is only allowed in the test split (split: {})",
                    table.split
                ),
            });
        }
        match detect_signals(&rec.encoder_input, extensions) {
            Err(e) => violations.push(Violation {
                row,
                message: e.to_string(),
            }),
            Ok(segments) => {
                for segment in segments {
                    if let Segment::Signal {
                        path, modality, ..
                    } = segment
                    {
                        if modality.is_none() {
                            violations.push(Violation {
                                row,
                                message: format!("no modality registered for {path:?}"),
                            });
                        } else if !Path::new(&path).exists() {
                            violations.push(Violation {
                                row,
                                message: format!("missing signal file {path:?}"),
                            });
                        }
                    }
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processors::{build_vocabulary, ProcessorConfig};
    use crate::signal::{save_pose, PoseSequence};
    use ndarray::Array3;

    fn reg() -> SignalExtensions {
        SignalExtensions::default()
    }

    #[test]
    fn detects_text_signal_text() {
        let segments =
            detect_signals("Translate <signal:/d/a.mmhpose#404-514> to English", &reg()).unwrap();
        assert_eq!(
            segments,
            vec![
                Segment::Text {
                    content: "Translate ".to_string()
                },
                Segment::Signal {
                    path: "/d/a.mmhpose".to_string(),
                    start_ms: 404,
                    end_ms: 514,
                    modality: Some(Modality::Pose2Text),
                },
                Segment::Text {
                    content: " to English".to_string()
                },
            ]
        );
    }

    #[test]
    fn plain_text_is_one_segment() {
        let segments = detect_signals("no references here", &reg()).unwrap();
        assert_eq!(segments.len(), 1);
        assert!(matches!(&segments[0], Segment::Text { content } if content == "no references here"));
    }

    #[test]
    fn end_before_start_is_malformed() {
        let err = detect_signals("<signal:/d/a.mmhpose#9-1>", &reg()).unwrap_err();
        match err {
            MetaprocError::MalformedReference { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected MalformedReference, got {other:?}"),
        }
    }

    #[test]
    fn open_end_bounds_are_legal() {
        let segments = detect_signals("<signal:/d/a.mmhpose#9-0>", &reg()).unwrap();
        assert!(matches!(
            segments[0],
            Segment::Signal { start_ms: 9, end_ms: 0, .. }
        ));
    }

    #[test]
    fn unclosed_reference_is_malformed() {
        assert!(matches!(
            detect_signals("before <signal:/d/a.mmhpose", &reg()),
            Err(MetaprocError::MalformedReference { offset: 7, .. })
        ));
        assert!(matches!(
            detect_signals("<signal:>", &reg()),
            Err(MetaprocError::MalformedReference { .. })
        ));
        assert!(matches!(
            detect_signals("<signal:/a.mmhpose#12>", &reg()),
            Err(MetaprocError::MalformedReference { .. })
        ));
    }

    #[test]
    fn escape_yields_literal_and_merges_text() {
        let segments = detect_signals(r"a \<signal:/x.mmhpose> b", &reg()).unwrap();
        assert_eq!(
            segments,
            vec![Segment::Text {
                content: "a <signal:/x.mmhpose> b".to_string()
            }]
        );
    }

    #[test]
    fn bare_angle_bracket_is_text() {
        let segments = detect_signals("a < b <sig> c", &reg()).unwrap();
        assert_eq!(segments.len(), 1);
    }

    #[test]
    fn unknown_extension_parses_with_unresolved_modality() {
        let segments = detect_signals("<signal:/d/a.xyz>", &reg()).unwrap();
        assert!(matches!(
            &segments[0],
            Segment::Signal { modality: None, .. }
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let inputs = [
            "Translate <signal:/d/a.mmhpose#404-514> to English",
            "plain text",
            r"escaped \<signal:/not/a/ref> stays text",
            "<signal:/a.mmhfeat><signal:/b.mmhvid#5-10>",
        ];
        for input in inputs {
            let segments = detect_signals(input, &reg()).unwrap();
            let rendered = serialize_segments(&segments);
            let reparsed = detect_signals(&rendered, &reg()).unwrap();
            assert_eq!(segments, reparsed, "round trip failed for {input:?}");
        }
    }

    fn fixture_pose(name: &str, t: usize, k: usize) -> String {
        let dir = std::env::temp_dir().join("mmh-metaproc-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{name}-{}.mmhpose", std::process::id()));
        let seq = PoseSequence {
            frames: Array3::from_shape_fn((t, k, 3), |(a, b, c)| (a + b + c) as f64),
            fps: 25.0,
        };
        save_pose(&seq, &path).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn text_only_record_reduces_to_text2text() {
        let vocab = build_vocabulary(["translate the cat sits"], 1).unwrap();
        let processor = SampleProcessor::new(&vocab, ProcessorConfig::default()).unwrap();
        let record = MixedRecord {
            encoder_input: "translate the cat".to_string(),
            decoder_input: String::new(),
            label: "the cat sits".to_string(),
        };
        let mixed = process_mixed(&record, 0, &processor, &reg()).unwrap();

        let sample = SampleRecord {
            encoder_prompt: "translate the cat".to_string(),
            output: "the cat sits".to_string(),
            ..Default::default()
        };
        let plain = processor
            .process_sample(&sample, 0, Modality::Text2Text)
            .unwrap();

        assert_eq!(mixed.stream.blocks.len(), 1);
        assert!(
            matches!(&mixed.stream.blocks[0], StreamBlock::Tokens(ids) if *ids == plain.encoder_tokens)
        );
        assert_eq!(mixed.label_tokens, plain.label_tokens);
        assert_eq!(mixed.decoder_prompt_tokens, plain.decoder_prompt_tokens);
    }

    #[test]
    fn two_references_keep_source_order() {
        let a = fixture_pose("order-a", 4, 2);
        let b = fixture_pose("order-b", 6, 2);
        let vocab = build_vocabulary(["first then second"], 1).unwrap();
        let processor = SampleProcessor::new(&vocab, ProcessorConfig::default()).unwrap();
        let record = MixedRecord {
            encoder_input: format!("first <signal:{a}> then <signal:{b}> second"),
            decoder_input: String::new(),
            label: "first".to_string(),
        };
        let mixed = process_mixed(&record, 0, &processor, &reg()).unwrap();
        assert_eq!(mixed.stream.blocks.len(), 5);
        assert!(matches!(&mixed.stream.blocks[1], StreamBlock::Features(f) if f.dim() == (4, 6)));
        assert!(matches!(&mixed.stream.blocks[3], StreamBlock::Features(f) if f.dim() == (6, 6)));
    }

    #[test]
    fn clip_bounds_apply_inside_references() {
        let path = fixture_pose("clip", 50, 2);
        let vocab = build_vocabulary(["x"], 1).unwrap();
        let processor = SampleProcessor::new(&vocab, ProcessorConfig::default()).unwrap();
        let record = MixedRecord {
            encoder_input: format!("x <signal:{path}#404-514>"),
            decoder_input: String::new(),
            label: "x".to_string(),
        };
        let mixed = process_mixed(&record, 0, &processor, &reg()).unwrap();
        // floor(0.404*25)=10, ceil(0.514*25)=13 -> 3 frames.
        assert!(matches!(&mixed.stream.blocks[1], StreamBlock::Features(f) if f.dim() == (3, 6)));
    }

    #[test]
    fn unknown_extension_fails_routing() {
        let vocab = build_vocabulary(["x"], 1).unwrap();
        let processor = SampleProcessor::new(&vocab, ProcessorConfig::default()).unwrap();
        let record = MixedRecord {
            encoder_input: "x <signal:/d/a.xyz>".to_string(),
            decoder_input: String::new(),
            label: "x".to_string(),
        };
        assert!(matches!(
            process_mixed(&record, 0, &processor, &reg()),
            Err(MetaprocError::UnknownModality { segment: 1, .. })
        ));
    }

    #[test]
    fn placement_plan_is_contiguous() {
        let stream = EncoderStream {
            blocks: vec![
                StreamBlock::Tokens(vec![5, 6, 7]),
                StreamBlock::Features(ndarray::Array2::zeros((5, 2))),
            ],
        };
        let plan = assemble_encoder_embedding_plan(&stream);
        assert_eq!(plan.len(), 8);
        assert_eq!(plan.len(), stream.total_len());
        for (pos, source) in plan.iter().enumerate() {
            if pos < 3 {
                assert_eq!(source.kind, SourceKind::Token);
                assert_eq!(source.block_index, 0);
                assert_eq!(source.offset, pos);
            } else {
                assert_eq!(source.kind, SourceKind::Feature);
                assert_eq!(source.block_index, 1);
                assert_eq!(source.offset, pos - 3);
            }
        }
    }

    #[test]
    fn mixed_tsv_round_trips() {
        let dir = std::env::temp_dir().join("mmh-metaproc-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("mixed-train-{}.tsv", std::process::id()));
        let table = MixedTable {
            split: Split::Train,
            records: vec![
                MixedRecord {
                    encoder_input: "Translate <signal:/d/a.mmhpose#404-514> to English".to_string(),
                    decoder_input: String::new(),
                    label: "hello".to_string(),
                },
                MixedRecord {
                    encoder_input: "plain".to_string(),
                    decoder_input: "<pad>".to_string(),
                    label: "world".to_string(),
                },
            ],
            source_path: String::new(),
        };
        write_mixed_tsv(&table, &path).unwrap();
        let parsed = parse_mixed_tsv(&path).unwrap();
        assert_eq!(parsed.split, Split::Train);
        assert_eq!(parsed.records, table.records);
    }

    #[test]
    fn validation_flags_bad_mixed_records() {
        let table = MixedTable {
            split: Split::Train,
            records: vec![
                MixedRecord {
                    encoder_input: String::new(),
                    decoder_input: String::new(),
                    label: "x".to_string(),
                },
                MixedRecord {
                    encoder_input: "<signal:/missing.mmhpose>".to_string(),
                    decoder_input: String::new(),
                    label: "x".to_string(),
                },
                MixedRecord {
                    encoder_input: "<signal:/d/a.mmhpose#9-1>".to_string(),
                    decoder_input: String::new(),
                    label: "x".to_string(),
                },
            ],
            source_path: String::new(),
        };
        let violations = validate_mixed_records(&table, &reg());
        assert_eq!(violations.len(), 3);
        assert_eq!(violations[0].row, 0);
        assert!(violations[1].message.contains("missing signal file"));
        assert!(violations[2].message.contains("malformed"));
    }
}
