//! Run configuration: a YAML file with four sections (`model`, `data`,
//! `processor`, `training`) driving setup, training and generation.
//!
//! Loading is strict: unknown keys are rejected, missing keys take the
//! documented defaults, and every scalar is type-checked with its full
//! key path in the error. `dataset` is accepted as an alias for `data`,
//! and `pretrained_backbone` for `pretrained_checkpoint`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use thiserror::Error;

use crate::modality::Modality;
use crate::model::FreezePolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing config section `{0}`")]
    MissingSection(&'static str),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` has the wrong type (expected {expected})")]
    TypeError { key: String, expected: &'static str },
    #[error("config key `{key}` is invalid: {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("config file is not a mapping")]
    NotAMapping,
    #[error("cannot parse {path:?}: {source}")]
    Yaml {
        path: PathBuf,
        #[source]
        source: serde_yaml::Error,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Environment variable consulted when `training.seed` is omitted.
pub const SEED_ENV_VAR: &str = "MMH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    /// Declarative model family tag; only the default composition exists.
    #[serde(rename = "type")]
    pub model_type: Option<String>,
    pub backbone_type: String,
    pub pretrained_checkpoint: Option<PathBuf>,
    pub extractor_type: crate::model::ExtractorType,
    pub multimodal_mapper_type: crate::model::MapperType,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataFilters {
    /// Drop records whose signal file exceeds this many raw frames.
    pub max_signal_frames: Option<usize>,
    /// Drop records whose tokenized output exceeds this many tokens.
    pub max_output_tokens: Option<usize>,
    /// Drop records where any of these fields is empty.
    pub required_nonempty_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub train_metadata_file: Option<PathBuf>,
    pub validation_metadata_file: Option<PathBuf>,
    pub test_metadata_file: Option<PathBuf>,
    pub filters: DataFilters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSection {
    /// Vocabulary file; omitted means "build from the training split".
    pub text_tokenizer_path: Option<PathBuf>,
    pub vocab_min_count: usize,
    /// Comma-separated control tokens appended to the vocabulary.
    pub new_vocabulary: String,
    pub skip_frames_stride: usize,
    pub fps_default: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub normalize_pose: bool,
    pub glyph_table_path: Option<PathBuf>,
    /// Extra extension -> modality routes merged over the defaults.
    pub signal_extensions: BTreeMap<String, Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation loss/perplexity every n steps; 0 disables.
    pub eval_every: usize,
    /// Periodic checkpoint every n steps; 0 keeps only final/best.
    pub checkpoint_every: usize,
    pub max_len: usize,
    pub beam: usize,
    pub freeze_policy: FreezePolicy,
    pub output_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
}

/// The fully resolved four-section configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub processor: ProcessorSection,
    pub training: TrainingSection,
}

impl RunConfig {
    /// Writes the resolved snapshot (canonical keys, defaults filled in).
    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let text = serde_yaml::to_string(self).map_err(|source| ConfigError::Yaml {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Extension registry with the configured extra routes applied.
    pub fn signal_extensions(&self) -> crate::modality::SignalExtensions {
        let mut reg = crate::modality::SignalExtensions::default();
        for (ext, modality) in &self.processor.signal_extensions {
            reg.register(ext, *modality);
        }
        reg
    }

    pub fn processor_config(&self) -> crate::processors::ProcessorConfig {
        crate::processors::ProcessorConfig {
            skip_frames_stride: self.processor.skip_frames_stride,
            fps_default: self.processor.fps_default,
            image_height: self.processor.image_height,
            image_width: self.processor.image_width,
            normalize_pose: self.processor.normalize_pose,
            input_dim: None,
            glyph_table_path: self.processor.glyph_table_path.clone(),
        }
    }

    pub fn train_hyper(&self) -> crate::model::TrainHyper {
        crate::model::TrainHyper {
            lr: self.training.lr,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            eps: self.training.eps,
            clip_norm: self.training.clip_norm,
        }
    }
}

/// Loads and resolves a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, path)
}

/// Parses config text; `origin` is only used in error messages.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
    let value: Value = serde_yaml::from_str(text).map_err(|source| ConfigError::Yaml {
        path: origin.to_path_buf(),
        source,
    })?;
    let root = match value {
        Value::Mapping(m) => m,
        Value::Null => serde_yaml::Mapping::new(),
        _ => return Err(ConfigError::NotAMapping),
    };

    for key in root.keys() {
        let name = key.as_str().unwrap_or("<non-string>");
        if !["model", "data", "dataset", "processor", "training"].contains(&name) {
            return Err(ConfigError::UnknownKey(name.to_string()));
        }
    }

    let model = parse_model(section(&root, "model", &[])?)?;
    let data = parse_data(section(&root, "data", &["dataset"])?)?;
    let processor = parse_processor(section(&root, "processor", &[])?)?;
    let training = parse_training(section(&root, "training", &[])?)?;

    Ok(RunConfig {
        model,
        data,
        processor,
        training,
    })
}

fn section<'a>(
    root: &'a serde_yaml::Mapping,
    name: &'static str,
    aliases: &[&str],
) -> Result<SectionReader<'a>, ConfigError> {
    let mut found = root.get(Value::String(name.to_string()));
    for alias in aliases {
        if found.is_none() {
            found = root.get(Value::String(alias.to_string()));
        }
    }
    let value = found.ok_or(ConfigError::MissingSection(name))?;
    let map = match value {
        Value::Mapping(m) => Some(m),
        Value::Null => None, // present but empty: all defaults
        _ => {
            return Err(ConfigError::TypeError {
                key: name.to_string(),
                expected: "mapping",
            })
        }
    };
    Ok(SectionReader {
        name,
        map,
        seen: std::cell::RefCell::new(BTreeSet::new()),
    })
}

struct SectionReader<'a> {
    name: &'static str,
    map: Option<&'a serde_yaml::Mapping>,
    seen: std::cell::RefCell<BTreeSet<String>>,
}

impl<'a> SectionReader<'a> {
    fn path(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    /// Fetches a value under `key` or any alias; null counts as absent.
    fn raw(&self, keys: &[&str]) -> Option<&'a Value> {
        let map = self.map?;
        let mut result = None;
        for key in keys {
            self.seen.borrow_mut().insert(key.to_string());
            if result.is_none() {
                match map.get(Value::String(key.to_string())) {
                    Some(Value::Null) | None => {}
                    Some(v) => result = Some(v),
                }
            }
        }
        result
    }

    fn string(&self, keys: &[&str]) -> Result<Option<String>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "string",
            }),
        }
    }

    fn usize(&self, keys: &[&str]) -> Result<Option<usize>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Number(n)) if n.as_u64().is_some() => {
                Ok(Some(n.as_u64().unwrap() as usize))
            }
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "non-negative integer",
            }),
        }
    }

    fn u64(&self, keys: &[&str]) -> Result<Option<u64>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Number(n)) if n.as_u64().is_some() => Ok(n.as_u64()),
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "non-negative integer",
            }),
        }
    }

    fn f64(&self, keys: &[&str]) -> Result<Option<f64>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "number",
            }),
        }
    }

    fn bool(&self, keys: &[&str]) -> Result<Option<bool>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "boolean",
            }),
        }
    }

    fn string_list(&self, keys: &[&str]) -> Result<Option<Vec<String>>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Sequence(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item.as_str() {
                        Some(s) => out.push(s.to_string()),
                        None => {
                            return Err(ConfigError::TypeError {
                                key: self.path(keys[0]),
                                expected: "list of strings",
                            })
                        }
                    }
                }
                Ok(Some(out))
            }
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "list of strings",
            }),
        }
    }

    fn mapping(&self, keys: &[&str]) -> Result<Option<&'a serde_yaml::Mapping>, ConfigError> {
        match self.raw(keys) {
            None => Ok(None),
            Some(Value::Mapping(m)) => Ok(Some(m)),
            Some(_) => Err(ConfigError::TypeError {
                key: self.path(keys[0]),
                expected: "mapping",
            }),
        }
    }

    /// Errors on keys never requested by any getter.
    fn finish(&self) -> Result<(), ConfigError> {
        let Some(map) = self.map else {
            return Ok(());
        };
        let seen = self.seen.borrow();
        for key in map.keys() {
            let name = key.as_str().unwrap_or("<non-string>");
            if !seen.contains(name) {
                return Err(ConfigError::UnknownKey(self.path(name)));
            }
        }
        Ok(())
    }
}

fn parse_enum<T: std::str::FromStr>(
    raw: Option<String>,
    default: T,
    key: &str,
    known: &'static str,
) -> Result<T, ConfigError> {
    match raw {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| ConfigError::InvalidValue {
            key: key.to_string(),
            detail: format!("unknown value {s:?} (known: {known})"),
        }),
    }
}

impl std::str::FromStr for crate::model::ExtractorType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(crate::model::ExtractorType::Identity),
            "linear" => Ok(crate::model::ExtractorType::Linear),
            _ => Err(()),
        }
    }
}

impl std::str::FromStr for crate::model::MapperType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(crate::model::MapperType::Linear),
            "mlp" => Ok(crate::model::MapperType::Mlp),
            _ => Err(()),
        }
    }
}

fn parse_model(reader: SectionReader<'_>) -> Result<ModelSection, ConfigError> {
    let model = ModelSection {
        model_type: reader.string(&["type"])?,
        backbone_type: reader
            .string(&["backbone_type"])?
            .unwrap_or_else(|| "tiny-transformer".to_string()),
        pretrained_checkpoint: reader
            .string(&["pretrained_checkpoint", "pretrained_backbone"])?
            .map(PathBuf::from),
        extractor_type: parse_enum(
            reader.string(&["extractor_type"])?,
            crate::model::ExtractorType::Identity,
            "model.extractor_type",
            "identity, linear",
        )?,
        multimodal_mapper_type: parse_enum(
            reader.string(&["multimodal_mapper_type"])?,
            crate::model::MapperType::Linear,
            "model.multimodal_mapper_type",
            "linear, mlp",
        )?,
        d_model: reader.usize(&["d_model"])?.unwrap_or(64),
        n_layers: reader.usize(&["n_layers"])?.unwrap_or(2),
        n_heads: reader.usize(&["n_heads"])?.unwrap_or(4),
        d_ff: reader.usize(&["d_ff"])?.unwrap_or(128),
        dropout: reader.f64(&["dropout"])?.unwrap_or(0.0),
        max_positions: reader.usize(&["max_positions"])?.unwrap_or(512),
    };
    reader.finish()?;
    if !(0.0..1.0).contains(&model.dropout) {
        return Err(ConfigError::InvalidValue {
            key: "model.dropout".to_string(),
            detail: format!("must be in [0, 1), got {}", model.dropout),
        });
    }
    Ok(model)
}

const FILTERABLE_FIELDS: [&str; 7] = [
    "signal",
    "encoder_prompt",
    "decoder_prompt",
    "output",
    "encoder_input",
    "decoder_input",
    "label",
];

fn parse_data(reader: SectionReader<'_>) -> Result<DataSection, ConfigError> {
    let filters = match reader.mapping(&["filters"])? {
        None => DataFilters::default(),
        Some(map) => {
            let sub = SectionReader {
                name: "data.filters",
                map: Some(map),
                seen: std::cell::RefCell::new(BTreeSet::new()),
            };
            let filters = DataFilters {
                max_signal_frames: sub.usize(&["max_signal_frames"])?,
                max_output_tokens: sub.usize(&["max_output_tokens"])?,
                required_nonempty_fields: sub
                    .string_list(&["required_nonempty_fields"])?
                    .unwrap_or_default(),
            };
            sub.finish()?;
            for field in &filters.required_nonempty_fields {
                if !FILTERABLE_FIELDS.contains(&field.as_str()) {
                    return Err(ConfigError::InvalidValue {
                        key: "data.filters.required_nonempty_fields".to_string(),
                        detail: format!("unknown field {field:?}"),
                    });
                }
            }
            filters
        }
    };
    let data = DataSection {
        train_metadata_file: reader.string(&["train_metadata_file"])?.map(PathBuf::from),
        validation_metadata_file: reader
            .string(&["validation_metadata_file"])?
            .map(PathBuf::from),
        test_metadata_file: reader.string(&["test_metadata_file"])?.map(PathBuf::from),
        filters,
    };
    reader.finish()?;
    Ok(data)
}

fn parse_processor(reader: SectionReader<'_>) -> Result<ProcessorSection, ConfigError> {
    let mut signal_extensions = BTreeMap::new();
    if let Some(map) = reader.mapping(&["signal_extensions"])? {
        for (k, v) in map {
            let ext = k.as_str().ok_or_else(|| ConfigError::TypeError {
                key: "processor.signal_extensions".to_string(),
                expected: "string keys",
            })?;
            let modality_name = v.as_str().ok_or_else(|| ConfigError::TypeError {
                key: format!("processor.signal_extensions.{ext}"),
                expected: "modality name",
            })?;
            let modality: Modality = modality_name.parse().map_err(
                |e: crate::modality::UnknownModality| ConfigError::InvalidValue {
                    key: format!("processor.signal_extensions.{ext}"),
                    detail: e.to_string(),
                },
            )?;
            signal_extensions.insert(ext.trim_start_matches('.').to_ascii_lowercase(), modality);
        }
    }
    let processor = ProcessorSection {
        text_tokenizer_path: reader.string(&["text_tokenizer_path"])?.map(PathBuf::from),
        vocab_min_count: reader.usize(&["vocab_min_count"])?.unwrap_or(1),
        new_vocabulary: reader.string(&["new_vocabulary"])?.unwrap_or_default(),
        skip_frames_stride: reader.usize(&["skip_frames_stride"])?.unwrap_or(1),
        fps_default: reader.f64(&["fps_default"])?.unwrap_or(25.0),
        image_height: reader.usize(&["image_height"])?.unwrap_or(24),
        image_width: reader.usize(&["image_width"])?.unwrap_or(96),
        normalize_pose: reader.bool(&["normalize_pose"])?.unwrap_or(false),
        glyph_table_path: reader.string(&["glyph_table_path"])?.map(PathBuf::from),
        signal_extensions,
    };
    reader.finish()?;
    if processor.skip_frames_stride == 0 {
        return Err(ConfigError::InvalidValue {
            key: "processor.skip_frames_stride".to_string(),
            detail: "must be >= 1".to_string(),
        });
    }
    if processor.image_height < 8 || processor.image_width < 8 {
        return Err(ConfigError::InvalidValue {
            key: "processor.image_height".to_string(),
            detail: "image geometry must be at least 8x8".to_string(),
        });
    }
    if !(processor.fps_default.is_finite() && processor.fps_default > 0.0) {
        return Err(ConfigError::InvalidValue {
            key: "processor.fps_default".to_string(),
            detail: "must be positive".to_string(),
        });
    }
    Ok(processor)
}

fn parse_training(reader: SectionReader<'_>) -> Result<TrainingSection, ConfigError> {
    let seed = match reader.u64(&["seed"])? {
        Some(s) => s,
        None => match std::env::var(SEED_ENV_VAR) {
            Ok(raw) => raw.parse().map_err(|_| ConfigError::InvalidValue {
                key: format!("${SEED_ENV_VAR}"),
                detail: format!("not a valid seed: {raw:?}"),
            })?,
            Err(_) => 0,
        },
    };
    let freeze_policy = match reader.string(&["freeze_policy"])? {
        None => FreezePolicy::None,
        Some(s) => s
            .parse::<FreezePolicy>()
            .map_err(|e| ConfigError::InvalidValue {
                key: "training.freeze_policy".to_string(),
                detail: e.to_string(),
            })?,
    };
    let training = TrainingSection {
        max_steps: reader.usize(&["max_steps"])?.unwrap_or(1000),
        batch_size: reader.usize(&["batch_size"])?.unwrap_or(8),
        lr: reader.f64(&["lr"])?.unwrap_or(3e-4),
        beta1: reader.f64(&["beta1"])?.unwrap_or(0.9),
        beta2: reader.f64(&["beta2"])?.unwrap_or(0.98),
        eps: reader.f64(&["eps"])?.unwrap_or(1e-9),
        clip_norm: reader.f64(&["clip_norm"])?.unwrap_or(1.0),
        seed,
        eval_every: reader.usize(&["eval_every"])?.unwrap_or(0),
        checkpoint_every: reader.usize(&["checkpoint_every"])?.unwrap_or(0),
        max_len: reader.usize(&["max_len"])?.unwrap_or(64),
        beam: reader.usize(&["beam"])?.unwrap_or(1),
        freeze_policy,
        output_dir: reader
            .string(&["output_dir", "output_path"])?
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("mmh_output")),
        resume_from: reader.string(&["resume_from"])?.map(PathBuf::from),
    };
    reader.finish()?;
    for (key, value) in [
        ("training.max_steps", training.max_steps),
        ("training.batch_size", training.batch_size),
        ("training.beam", training.beam),
    ] {
        if value == 0 {
            return Err(ConfigError::InvalidValue {
                key: key.to_string(),
                detail: "must be >= 1".to_string(),
            });
        }
    }
    Ok(training)
}

/// Applies `--section.key value` overrides (bare keys default to the
/// training section). Unknown paths and unparsable values error the same
/// way the file loader does.
pub fn apply_overrides(
    config: &mut RunConfig,
    overrides: &[(String, String)],
) -> Result<(), ConfigError> {
    for (raw_key, value) in overrides {
        let key = if raw_key.contains('.') {
            raw_key.clone()
        } else {
            format!("training.{raw_key}")
        };
        apply_one_override(config, &key, value)?;
    }
    Ok(())
}

fn apply_one_override(config: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    fn parse<T: std::str::FromStr>(
        key: &str,
        value: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::TypeError {
            key: key.to_string(),
            expected,
        })
    }

    match key {
        "training.max_steps" => config.training.max_steps = parse(key, value, "integer")?,
        "training.batch_size" => config.training.batch_size = parse(key, value, "integer")?,
        "training.lr" => config.training.lr = parse(key, value, "number")?,
        "training.beta1" => config.training.beta1 = parse(key, value, "number")?,
        "training.beta2" => config.training.beta2 = parse(key, value, "number")?,
        "training.eps" => config.training.eps = parse(key, value, "number")?,
        "training.clip_norm" => config.training.clip_norm = parse(key, value, "number")?,
        "training.seed" => config.training.seed = parse(key, value, "integer")?,
        "training.eval_every" => config.training.eval_every = parse(key, value, "integer")?,
        "training.checkpoint_every" => {
            config.training.checkpoint_every = parse(key, value, "integer")?
        }
        "training.max_len" => config.training.max_len = parse(key, value, "integer")?,
        "training.beam" => config.training.beam = parse(key, value, "integer")?,
        "training.freeze_policy" => {
            config.training.freeze_policy =
                value
                    .parse::<FreezePolicy>()
                    .map_err(|e| ConfigError::InvalidValue {
                        key: key.to_string(),
                        detail: e.to_string(),
                    })?
        }
        "training.output_dir" | "training.output_path" => {
            config.training.output_dir = PathBuf::from(value)
        }
        "training.resume_from" => config.training.resume_from = Some(PathBuf::from(value)),
        "model.dropout" => config.model.dropout = parse(key, value, "number")?,
        "model.max_positions" => config.model.max_positions = parse(key, value, "integer")?,
        "processor.skip_frames_stride" => {
            config.processor.skip_frames_stride = parse(key, value, "integer")?
        }
        "processor.fps_default" => config.processor.fps_default = parse(key, value, "number")?,
        "data.train_metadata_file" => {
            config.data.train_metadata_file = Some(PathBuf::from(value))
        }
        "data.validation_metadata_file" => {
            config.data.validation_metadata_file = Some(PathBuf::from(value))
        }
        "data.test_metadata_file" => config.data.test_metadata_file = Some(PathBuf::from(value)),
        other => return Err(ConfigError::UnknownKey(other.to_string())),
    }
    Ok(())
}
