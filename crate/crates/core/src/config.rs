//! Run configuration: backend selection, module toggles for the ablation
//! axes, and the stable config hash embedded in traces and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::case_model::Task;
use crate::model_backends::RetryPolicy;
use crate::record_review::ReviewConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("bad config: {0}")]
    Invalid(String),
    #[error("config file {0}: {1}")]
    Parse(String, #[source] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: RetryPolicy,
    pub inflight: usize,
    /// Rule file for the scripted mock (kind = mock).
    pub mock_rules: Option<PathBuf>,
}

impl Default for BackendSettings {
    fn default() -> Self {
        BackendSettings {
            kind: BackendKind::Mock,
            base_url: "http://localhost:8000/v1".into(),
            model: "default-model".into(),
            temperature: 0.0,
            max_tokens: 1024,
            retries: RetryPolicy::default(),
            inflight: 8,
            mock_rules: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Http,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub seed: u64,
    pub base_url: String,
    pub model: String,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            kind: EmbeddingKind::Hash,
            dim: crate::model_backends::DEFAULT_HASH_DIMS,
            seed: 0,
            base_url: "http://localhost:8000/v1".into(),
            model: "default-embedding".into(),
        }
    }
}

/// What text is embedded as the retrieval query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Radiology report plus the (possibly filtered) history.
    #[default]
    ReportHistory,
    /// Radiology report only.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub enabled: bool,
    pub k: usize,
    pub budget: usize,
    pub query_mode: QueryMode,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            enabled: true,
            k: 10,
            budget: crate::reg_retrieval::DEFAULT_CONTEXT_BUDGET,
            query_mode: QueryMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSettings {
    pub enabled: bool,
    pub max_rounds: u32,
    /// Stages the chief reviews.
    pub stages: Vec<Task>,
    /// Rule file for the chief's scripted mock; falls back to the main
    /// backend's rules when absent.
    pub chief_mock_rules: Option<PathBuf>,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        GuidanceSettings {
            enabled: true,
            max_rounds: 2,
            stages: vec![Task::Triage, Task::Diagnosis, Task::Treatment],
            chief_mock_rules: None,
        }
    }
}

/// The full run configuration; every field has a default so partial JSON
/// files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendSettings,
    pub embedding: EmbeddingSettings,
    pub record_review: ReviewConfig,
    pub retrieval: RetrievalSettings,
    pub guidance: GuidanceSettings,
    pub templates_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse(path.display().to_string(), e))
    }

    /// Stable digest of the canonicalized config; identical configs hash
    /// identically across processes.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Apply `--disable` style toggles: any of record_review, retrieval,
    /// guidance.
    pub fn apply_disables(&mut self, names: &[&str]) -> Result<(), ConfigError> {
        for name in names {
            match name.trim() {
                "record_review" => self.record_review.enabled = false,
                "retrieval" => self.retrieval.enabled = false,
                "guidance" => self.guidance.enabled = false,
                "" => {}
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown module {other:?} in --disable (expected record_review, retrieval, guidance)"
                    )))
                }
            }
        }
        Ok(())
    }
}
