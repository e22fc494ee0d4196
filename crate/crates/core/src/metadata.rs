//! Standardized TSV dataset metadata.
//!
//! Every experiment consumes one TSV file per split. A row holds six
//! tab-separated fields: `signal`, `signal_start`, `signal_end`,
//! `encoder_prompt`, `decoder_prompt`, `output`. Temporal bounds are
//! integer milliseconds; `0`/`0` (or empty cells) means "use the whole
//! signal". Tabs inside fields are unsupported; newlines are sanitized to
//! spaces on write.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modality::Modality;

/// The exact header line every metadata TSV must start with.
pub const METADATA_HEADER: &str = "signal\tsignal_start\tsignal_end\tencoder_prompt\tdecoder_prompt\toutput";

/// Column names in on-disk order.
pub const METADATA_COLUMNS: [&str; 6] = [
    "signal",
    "signal_start",
    "signal_end",
    "encoder_prompt",
    "decoder_prompt",
    "output",
];

/// Dataset split a metadata file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

/// One dataset example.
///
/// `signal` is either raw text or a path to a signal file and may be empty
/// for text-only tasks, in which case `encoder_prompt` must carry the
/// input. `signal_start` / `signal_end` are milliseconds; `signal_end == 0`
/// means "until the end of the signal".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub signal: String,
    pub signal_start: u64,
    pub signal_end: u64,
    pub encoder_prompt: String,
    pub decoder_prompt: String,
    pub output: String,
}

impl SampleRecord {
    /// Whole-signal sentinel: no explicit clip bounds.
    pub fn has_clip_bounds(&self) -> bool {
        self.signal_start != 0 || self.signal_end != 0
    }
}

/// All records of one split, in file order.
///
/// Record order is significant: prediction dumps index rows by their
/// position in this table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitTable {
    pub split: Split,
    pub records: Vec<SampleRecord>,
    pub source_path: String,
}

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("metadata file {0:?} has no data rows")]
    EmptyFile(PathBuf),
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("unexpected column `{0}` in header")]
    UnexpectedColumn(String),
    #[error("header columns out of order: expected `{expected}`, found `{found}`")]
    ColumnOrder { expected: String, found: String },
    #[error("row {row}: bad integer {value:?} in column `{column}`")]
    BadInteger {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: expected 6 tab-separated fields, found {found} (tabs inside fields are not supported)")]
    RowWidth { row: usize, found: usize },
    #[error("cannot infer split from file name {0:?}: no `train`, `validation` or `test` token in the stem")]
    UnknownSplit(PathBuf),
    #[error("cannot concatenate tables of different splits: {0} vs {1}")]
    MixedSplits(Split, Split),
    #[error("no tables to concatenate")]
    NoTables,
    #[error("row {row}: field `{column}` contains a tab character")]
    TabInField { row: usize, column: &'static str },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parses a metadata TSV, inferring the split from the file stem.
///
/// Stems are split on non-alphanumeric characters and must contain a
/// `train`, `validation` or `test` token (`slt-train.tsv` works).
pub fn parse_metadata_tsv(path: impl AsRef<Path>) -> Result<SplitTable, MetadataError> {
    let path = path.as_ref();
    let split = infer_split_from_path(path).ok_or_else(|| MetadataError::UnknownSplit(path.to_path_buf()))?;
    parse_metadata_tsv_for_split(path, split)
}

/// Parses a metadata TSV for a known split (used by the pipeline, where
/// the configuration key already names the split).
pub fn parse_metadata_tsv_for_split(
    path: impl AsRef<Path>,
    split: Split,
) -> Result<SplitTable, MetadataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records = parse_metadata_str(&text, path)?;
    Ok(SplitTable {
        split,
        records,
        source_path: path.to_string_lossy().into_owned(),
    })
}

pub(crate) fn infer_split_from_path(path: &Path) -> Option<Split> {
    let stem = path.file_stem()?.to_str()?;
    stem.split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| tok.parse::<Split>().ok())
}

fn parse_metadata_str(text: &str, path: &Path) -> Result<Vec<SampleRecord>, MetadataError> {
    let rows = parse_tsv_rows(text, &METADATA_COLUMNS, path)?;
    let mut records = Vec::with_capacity(rows.len());
    for (row, cells) in rows.into_iter().enumerate() {
        records.push(SampleRecord {
            signal: cells[0].to_string(),
            signal_start: parse_ms(cells[1], row, "signal_start")?,
            signal_end: parse_ms(cells[2], row, "signal_end")?,
            encoder_prompt: cells[3].to_string(),
            decoder_prompt: cells[4].to_string(),
            output: cells[5].to_string(),
        });
    }
    Ok(records)
}

/// Shared TSV scaffolding: exact header, fixed column count per data row,
/// at least one data row. Also used by the mixed-modality metadata format.
pub(crate) fn parse_tsv_rows<'a>(
    text: &'a str,
    columns: &'static [&'static str],
    path: &Path,
) -> Result<Vec<Vec<&'a str>>, MetadataError> {
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) => h,
        None => return Err(MetadataError::EmptyFile(path.to_path_buf())),
    };
    check_header(header, columns)?;

    let mut rows = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != columns.len() {
            return Err(MetadataError::RowWidth {
                row,
                found: cells.len(),
            });
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(MetadataError::EmptyFile(path.to_path_buf()));
    }
    Ok(rows)
}

fn check_header(header: &str, columns: &'static [&'static str]) -> Result<(), MetadataError> {
    let found: Vec<&str> = header.split('\t').collect();
    if found == columns {
        return Ok(());
    }
    for expected in columns {
        if !found.contains(expected) {
            return Err(MetadataError::MissingColumn(expected));
        }
    }
    for col in &found {
        if !columns.contains(col) {
            return Err(MetadataError::UnexpectedColumn(col.to_string()));
        }
    }
    Err(MetadataError::ColumnOrder {
        expected: columns.join(", "),
        found: found.join(", "),
    })
}


fn parse_ms(cell: &str, row: usize, column: &'static str) -> Result<u64, MetadataError> {
    if cell.is_empty() {
        return Ok(0);
    }
    cell.parse::<u64>().map_err(|_| MetadataError::BadInteger {
        row,
        column,
        value: cell.to_string(),
    })
}

/// A single invariant breach found by [`validate_records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 0-based record index within the table.
    pub row: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

/// Validation outcome; empty means the table is usable for the modality.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every record against the shared invariants plus modality rules.
///
/// Records with an empty `signal` are text-prompt-only rows and are legal
/// under any modality (multitask files mix them with signal rows); file
/// checks apply only to records that carry a signal path.
pub fn validate_records(
    table: &SplitTable,
    modality: Modality,
    extensions: &crate::modality::SignalExtensions,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |row: usize, message: String| report.violations.push(Violation { row, message });

    for (row, rec) in table.records.iter().enumerate() {
        if rec.signal_end != 0 && rec.signal_end <= rec.signal_start {
            push(
                row,
                format!(
                    "signal_end ({}) must be 0 or greater than signal_start ({})",
                    rec.signal_end, rec.signal_start
                ),
            );
        }
        if rec.signal.is_empty() && rec.encoder_prompt.is_empty() {
            push(row, "empty signal requires a non-empty encoder_prompt".to_string());
        }
        if rec.output.is_empty() && table.split != Split::Test {
            push(
                row,
                format!("empty output is only allowed in the test split (split: {})", table.split),
            );
        }

        if !rec.signal.is_empty() && modality.has_file_signals() && modality != Modality::Mixed {
            match extensions.modality_of(&rec.signal) {
                Some(m) if m == modality => {
                    if !Path::new(&rec.signal).exists() {
                        push(row, format!("missing signal file {:?}", rec.signal));
                    }
                }
                Some(other) => push(
                    row,
                    format!(
                        "signal extension is registered for {other}, not {modality} ({:?})",
                        rec.signal
                    ),
                ),
                None => push(
                    row,
                    format!(
                        "signal path {:?} has no extension registered for {modality} (expected one of: {})",
                        rec.signal,
                        extensions.extensions_for(modality).join(", ")
                    ),
                ),
            }
        }
    }
    report
}

/// Concatenates same-split tables in argument order (multitask datasets).
pub fn concat_multitask(tables: &[SplitTable]) -> Result<SplitTable, MetadataError> {
    let first = tables.first().ok_or(MetadataError::NoTables)?;
    let mut records = Vec::new();
    for table in tables {
        if table.split != first.split {
            return Err(MetadataError::MixedSplits(first.split, table.split));
        }
        records.extend(table.records.iter().cloned());
    }
    Ok(SplitTable {
        split: first.split,
        records,
        source_path: format!("concat({})", tables.len()),
    })
}

/// Warning emitted by [`write_metadata_tsv`] when a field needed cleanup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteWarning {
    pub row: usize,
    pub column: &'static str,
    pub message: String,
}

/// Writes a table back to disk.
///
/// Newlines inside fields are replaced by single spaces (reported as
/// warnings); tabs are a hard error because they cannot be escaped in TSV.
/// Zero millisecond bounds are written as empty cells. The written file
/// re-parses to an equal table whenever no warnings were emitted.
pub fn write_metadata_tsv(
    table: &SplitTable,
    path: impl AsRef<Path>,
) -> Result<Vec<WriteWarning>, MetadataError> {
    let path = path.as_ref();
    let mut warnings = Vec::new();
    let mut out = String::with_capacity(table.records.len() * 64);
    out.push_str(METADATA_HEADER);
    out.push('\n');

    for (row, rec) in table.records.iter().enumerate() {
        let text_cells = [
            ("signal", &rec.signal),
            ("encoder_prompt", &rec.encoder_prompt),
            ("decoder_prompt", &rec.decoder_prompt),
            ("output", &rec.output),
        ];
        let mut cleaned: Vec<String> = Vec::with_capacity(4);
        for (column, value) in text_cells {
            if value.contains('\t') {
                return Err(MetadataError::TabInField { row, column });
            }
            let sanitized = sanitize_field_newlines(value);
            if sanitized != **value {
                warnings.push(WriteWarning {
                    row,
                    column,
                    message: "newline replaced by space".to_string(),
                });
            }
            cleaned.push(sanitized);
        }
        out.push_str(&cleaned[0]);
        out.push('\t');
        out.push_str(&format_ms(rec.signal_start));
        out.push('\t');
        out.push_str(&format_ms(rec.signal_end));
        out.push('\t');
        out.push_str(&cleaned[1]);
        out.push('\t');
        out.push_str(&cleaned[2]);
        out.push('\t');
        out.push_str(&cleaned[3]);
        out.push('\n');
    }

    std::fs::write(path, out).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(warnings)
}

pub(crate) fn sanitize_field_newlines(s: &str) -> String {
    if !s.contains(['\n', '\r']) {
        return s.to_string();
    }
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

fn format_ms(ms: u64) -> String {
    if ms == 0 {
        String::new()
    } else {
        ms.to_string()
    }
}
