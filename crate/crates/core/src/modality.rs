//! Modality names and the signal-extension registry used to route files
//! to the right loader.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The input modality of an experiment (or of a single inline signal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text2Text,
    Pose2Text,
    Features2Text,
    Video2Text,
    Image2Text,
    /// Mixed-modality records with inline signal references.
    Mixed,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Text2Text,
        Modality::Pose2Text,
        Modality::Features2Text,
        Modality::Video2Text,
        Modality::Image2Text,
        Modality::Mixed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text2Text => "text2text",
            Modality::Pose2Text => "pose2text",
            Modality::Features2Text => "features2text",
            Modality::Video2Text => "video2text",
            Modality::Image2Text => "image2text",
            Modality::Mixed => "mixed",
        }
    }

    /// Whether records of this modality reference signal files on disk.
    pub fn has_file_signals(&self) -> bool {
        matches!(
            self,
            Modality::Pose2Text | Modality::Features2Text | Modality::Video2Text | Modality::Mixed
        )
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| UnknownModality(s.to_string()))
    }
}

/// Error for modality names not in [`Modality::ALL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownModality(pub String);

impl fmt::Display for UnknownModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Modality::ALL.iter().map(|m| m.as_str()).collect();
        write!(
            f,
            "unknown modality `{}` (registered modalities: {})",
            self.0,
            names.join(", ")
        )
    }
}

impl std::error::Error for UnknownModality {}

/// Maps file extensions (without the leading dot) to signal modalities.
///
/// Used by record validation and by the mixed-modality signal detector to
/// infer how to load a referenced file. Extendable through the processor
/// section of the run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalExtensions {
    map: BTreeMap<String, Modality>,
}

impl Default for SignalExtensions {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert("mmhpose".to_string(), Modality::Pose2Text);
        map.insert("json".to_string(), Modality::Pose2Text);
        map.insert("mmhfeat".to_string(), Modality::Features2Text);
        map.insert("mmhvid".to_string(), Modality::Video2Text);
        SignalExtensions { map }
    }
}

impl SignalExtensions {
    /// Registers (or overrides) an extension. Extensions are compared
    /// case-insensitively and without the leading dot.
    pub fn register(&mut self, extension: &str, modality: Modality) {
        let key = extension.trim_start_matches('.').to_ascii_lowercase();
        self.map.insert(key, modality);
    }

    /// Looks up the modality for a path by its extension.
    pub fn modality_of(&self, path: &str) -> Option<Modality> {
        let ext = std::path::Path::new(path).extension()?.to_str()?;
        self.map.get(&ext.to_ascii_lowercase()).copied()
    }

    /// Extensions registered for a given modality.
    pub fn extensions_for(&self, modality: Modality) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, m)| **m == modality)
            .map(|(e, _)| e.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_round_trips_through_names() {
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
    }

    #[test]
    fn unknown_modality_lists_registered_names() {
        let err = "pose3text".parse::<Modality>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pose2text"));
        assert!(msg.contains("mixed"));
    }

    #[test]
    fn default_extensions_route_to_loaders() {
        let reg = SignalExtensions::default();
        assert_eq!(reg.modality_of("/d/a.mmhpose"), Some(Modality::Pose2Text));
        assert_eq!(reg.modality_of("/d/a.json"), Some(Modality::Pose2Text));
        assert_eq!(reg.modality_of("/d/a.mmhfeat"), Some(Modality::Features2Text));
        assert_eq!(reg.modality_of("/d/a.MMHVID"), Some(Modality::Video2Text));
        assert_eq!(reg.modality_of("/d/a.xyz"), None);
        assert_eq!(reg.modality_of("no-extension"), None);
    }

    #[test]
    fn register_overrides_and_strips_dot() {
        let mut reg = SignalExtensions::default();
        reg.register(".npy", Modality::Features2Text);
        assert_eq!(reg.modality_of("x.npy"), Some(Modality::Features2Text));
    }
}
