use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;

use crate::cassette::CassetteMode;
use crate::concepts::EXTRACTION_PROMPT_VERSION;
use crate::detector::{DetectorBackend, DetectorKind};
use crate::digest::{json_hash, sha256_hex};
use crate::model_client::ChatBackend;
use crate::render::{RenderConfig, VPromptStyle};
use crate::tprompt::{PromptStrategy, ANSWER_PROMPT_VERSION};

use super::PipelineError;

pub const DEFAULT_MAX_CONCURRENCY: usize = 4;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
/// Hex digits of the config hash used as the run directory name.
pub const RUN_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Extraction, detection and markers before the answer query.
    #[default]
    Vtprompt,
    /// Original image, no visual prompt.
    Baseline,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vtprompt" => Ok(RunMode::Vtprompt),
            "baseline" | "original" => Ok(RunMode::Baseline),
            other => Err(format!("unknown run mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Expected prompt template versions. A mismatch with the compiled templates
/// is a config error rather than a silent change of outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPins {
    #[serde(default = "default_extraction_version")]
    pub extraction: String,
    #[serde(default = "default_answer_version")]
    pub answer: String,
}

impl Default for PromptPins {
    fn default() -> Self {
        Self {
            extraction: default_extraction_version(),
            answer: default_answer_version(),
        }
    }
}

fn default_extraction_version() -> String {
    EXTRACTION_PROMPT_VERSION.into()
}
fn default_answer_version() -> String {
    ANSWER_PROMPT_VERSION.into()
}
fn default_concurrency() -> usize {
    DEFAULT_MAX_CONCURRENCY
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_output() -> PathBuf {
    "runs".into()
}
fn default_cache() -> PathBuf {
    "cache".into()
}
fn default_cassettes() -> PathBuf {
    "cassettes".into()
}
fn default_style() -> VPromptStyle {
    VPromptStyle::TYPE_A
}
fn default_strategy() -> PromptStrategy {
    PromptStrategy::Tprompt
}

/// Everything needed to reproduce a run. Loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_cassettes")]
    pub cassette_dir: PathBuf,
    #[serde(default)]
    pub cassette_mode: CassetteMode,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub detector_kind: DetectorKind,
    #[serde(default = "default_style", with = "style_serde")]
    pub style: VPromptStyle,
    #[serde(default = "default_strategy", with = "strategy_serde")]
    pub strategy: PromptStrategy,
    #[serde(default)]
    pub sample: Option<SampleSpec>,
    pub text_backend: ChatBackend,
    pub vision_backend: ChatBackend,
    pub detector: DetectorBackend,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub prompt_versions: PromptPins,
}

impl RunConfig {
    /// Parse TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        for p in [
            &mut cfg.manifest,
            &mut cfg.output_dir,
            &mut cfg.cache_dir,
            &mut cfg.cassette_dir,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::ConfigInvalid(format!("cannot read {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be at least 1".into());
        }
        if let Some(s) = self.sample {
            if s.n == 0 {
                return bad("sample.n must be positive".into());
            }
        }
        if self.prompt_versions.extraction != EXTRACTION_PROMPT_VERSION {
            return bad(format!(
                "extraction prompt pinned to {} but this build ships {EXTRACTION_PROMPT_VERSION}",
                self.prompt_versions.extraction
            ));
        }
        if self.prompt_versions.answer != ANSWER_PROMPT_VERSION {
            return bad(format!(
                "answer prompt pinned to {} but this build ships {ANSWER_PROMPT_VERSION}",
                self.prompt_versions.answer
            ));
        }
        if self.mode == RunMode::Vtprompt {
            self.style
                .validate()
                .or_else(|e| bad(e.to_string()))?;
            self.render.validate().or_else(|e| bad(e.to_string()))?;
            if self.style.mask && !self.detector_kind.has_masks() {
                return bad(format!(
                    "style {} needs masks but detector kind {} only produces boxes",
                    self.style, self.detector_kind
                ));
            }
        }
        Ok(())
    }

    /// Hash of every field that can change records. Directories, concurrency
    /// and cassette mode are excluded; the manifest enters by content.
    pub fn config_hash(&self) -> Result<String, PipelineError> {
        let manifest = std::fs::read(&self.manifest).map_err(|e| {
            PipelineError::ConfigInvalid(format!("cannot read {}: {e}", self.manifest.display()))
        })?;
        let visual = match self.mode {
            RunMode::Baseline => serde_json::Value::Null,
            RunMode::Vtprompt => json!({
                "detector_kind": self.detector_kind,
                "style": style_key(&self.style),
                "detector": self.detector,
                "render": self.render,
                "text_backend": backend_key(&self.text_backend),
                "extraction_prompt": self.prompt_versions.extraction,
            }),
        };
        Ok(json_hash(&json!({
            "manifest_sha256": sha256_hex(&manifest),
            "mode": self.mode,
            "strategy": self.strategy,
            "sample": self.sample,
            "vision_backend": backend_key(&self.vision_backend),
            "answer_prompt": self.prompt_versions.answer,
            "visual": visual,
        })))
    }

    pub fn run_id(&self) -> Result<String, PipelineError> {
        Ok(self.config_hash()?[..RUN_ID_LEN].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf, PipelineError> {
        Ok(self.output_dir.join(self.run_id()?))
    }

    /// Short human label, e.g. `+ TP / type_b / grounding_box`.
    pub fn describe(&self) -> String {
        match self.mode {
            RunMode::Baseline => format!("original image / {}", self.strategy.label()),
            RunMode::Vtprompt => format!(
                "{} / {} / {}",
                self.strategy.label(),
                self.style,
                self.detector_kind
            ),
        }
    }
}

// Credentials stay out of the hash; only where and which model matter.
fn backend_key(b: &ChatBackend) -> serde_json::Value {
    json!({"id": b.id, "endpoint": b.endpoint, "model": b.model, "dialect": b.dialect})
}

fn style_key(s: &VPromptStyle) -> serde_json::Value {
    serde_json::to_value(s).expect("serializable")
}

mod style_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Name(String),
        Layers(VPromptStyle),
    }

    pub fn serialize<S: Serializer>(s: &VPromptStyle, ser: S) -> Result<S::Ok, S::Error> {
        match s.preset_name() {
            Some(n) => ser.serialize_str(n),
            None => s.serialize(ser),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<VPromptStyle, D::Error> {
        match Raw::deserialize(de)? {
            Raw::Name(n) => n.parse().map_err(serde::de::Error::custom),
            Raw::Layers(s) => Ok(s),
        }
    }
}

mod strategy_serde {
    use super::*;

    pub fn serialize<S: Serializer>(s: &PromptStrategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<PromptStrategy, D::Error> {
        String::deserialize(de)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}
