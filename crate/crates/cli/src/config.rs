//! Settings from an optional TOML file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use focus_core::filterpipe::FilterConfig;
use focus_core::focus::FocusConfig;
use focus_core::harness::DEFAULT_FAILURE_THRESHOLD;
use serde::Deserialize;

use crate::UsageError;

pub const DEFAULT_SIMILARITY_MODEL: &str = "text-embedding-3-small";
pub const DEFAULT_SIMCSE_MODEL: &str = "sup-simcse-roberta-large";
pub const MOCK_MODEL: &str = "mock";

/// Shape of the `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub mock: Option<bool>,
    pub mock_script: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub retries: Option<u32>,
    pub similarity_model: Option<String>,
    pub simcse_model: Option<String>,
    pub failure_threshold: Option<f64>,
    pub filter: Option<FilterConfig>,
    pub focus: Option<FocusConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&body).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())).into())
    }
}

/// Values shared by every subcommand after merging.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: Option<String>,
    pub seed: u64,
    pub parallel: usize,
    pub cache_dir: Option<PathBuf>,
    pub mock: bool,
    pub mock_script: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub retries: u32,
    pub similarity_model: String,
    pub simcse_model: String,
    pub failure_threshold: f64,
    pub filter: FilterConfig,
    pub focus: FocusConfig,
}

/// Flags that apply to every subcommand.
#[derive(Debug, Default, Clone)]
pub struct GlobalFlags {
    pub model: Option<String>,
    pub parallel: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub mock: bool,
    pub mock_script: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

impl Settings {
    pub fn merge(file: FileConfig, flags: &GlobalFlags) -> anyhow::Result<Self> {
        let mut focus = file.focus.unwrap_or_default();
        if let Some(p) = &flags.prompts {
            focus.prompt_catalog = Some(p.clone());
        }
        let prompts = focus.prompt_catalog.clone().or(file.prompts);
        let s = Settings {
            model: flags.model.clone().or(file.model),
            seed: file.seed.unwrap_or(0),
            parallel: flags.parallel.or(file.parallel).unwrap_or(4),
            cache_dir: flags.cache_dir.clone().or(file.cache_dir),
            mock: flags.mock || file.mock.unwrap_or(false),
            mock_script: flags.mock_script.clone().or(file.mock_script),
            prompts,
            retries: file.retries.unwrap_or(2),
            similarity_model: file.similarity_model.unwrap_or_else(|| DEFAULT_SIMILARITY_MODEL.into()),
            simcse_model: file.simcse_model.unwrap_or_else(|| DEFAULT_SIMCSE_MODEL.into()),
            failure_threshold: file.failure_threshold.unwrap_or(DEFAULT_FAILURE_THRESHOLD),
            filter: file.filter.unwrap_or_default(),
            focus,
        };
        if s.parallel == 0 {
            return Err(UsageError("--parallel must be at least 1".into()).into());
        }
        if !(0.0..=1.0).contains(&s.failure_threshold) {
            return Err(UsageError("failure_threshold must be within [0, 1]".into()).into());
        }
        s.focus.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(s)
    }

    /// Model id for chat calls. Mock mode has a fixed default.
    pub fn model_id(&self) -> anyhow::Result<String> {
        match (&self.model, self.mock) {
            (Some(m), _) => Ok(m.clone()),
            (None, true) => Ok(MOCK_MODEL.into()),
            (None, false) => Err(UsageError("--model is required unless --mock is set".into()).into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str(
            "model = \"file-model\"\nparallel = 2\nseed = 9\n[filter]\ndownvote_ratio_max = 0.5\n[focus]\nentity_dropout = 0.25\n",
        )
        .unwrap();
        let flags = GlobalFlags { model: Some("flag-model".into()), ..GlobalFlags::default() };
        let s = Settings::merge(file, &flags).unwrap();
        assert_eq!(s.model.as_deref(), Some("flag-model"));
        assert_eq!(s.parallel, 2);
        assert_eq!(s.seed, 9);
        assert_eq!(s.filter.downvote_ratio_max, 0.5);
        assert_eq!(s.focus.entity_dropout, 0.25);
        assert_eq!(s.focus.mask_token, "[MASK]");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("modle = \"x\"").is_err());
    }

    #[test]
    fn model_required_outside_mock() {
        let s = Settings::merge(FileConfig::default(), &GlobalFlags::default()).unwrap();
        assert!(s.model_id().is_err());
        let s = Settings::merge(FileConfig::default(), &GlobalFlags { mock: true, ..GlobalFlags::default() }).unwrap();
        assert_eq!(s.model_id().unwrap(), MOCK_MODEL);
    }
}
