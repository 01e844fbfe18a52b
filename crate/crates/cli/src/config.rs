//! Run configuration: one TOML document, overridden by command-line flags.
//!
//! Precedence is flag, then file, then built-in default. Every seed has a
//! fixed default; nothing is drawn from the clock.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tod_core::corpus::SyntheticSpec;
use tod_core::system::SystemConfig;
use tod_core::taxonomy::LabelSpace;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root for every artifact path left unset.
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    /// Taxonomy TOML; the built-in label space when unset.
    pub taxonomy: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out: PathBuf::from("run"), corpus: None, taxonomy: None, checkpoints: None, reports: None }
    }
}

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.out.join("corpus.jsonl"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }

    pub fn reports(&self) -> PathBuf {
        self.reports.clone().unwrap_or_else(|| self.out.join("reports"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChatOptions {
    /// Dialog whose local KB the session uses; the first test dialog when unset.
    pub dialog: Option<String>,
    /// JSON file holding a KB; takes precedence over `dialog`.
    pub kb: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateOptions {
    /// JSONL predictions, one record per test turn in corpus order;
    /// `<reports>/generations.jsonl` when unset.
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub system: SystemConfig,
    pub chat: ChatOptions,
    pub evaluate: EvaluateOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut data = SyntheticSpec::new(1000, 5000, 42);
        data.label_noise_rate = 0.05;
        RunConfig {
            paths: Paths::default(),
            data,
            system: SystemConfig::default(),
            chat: ChatOptions::default(),
            evaluate: EvaluateOptions::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces both the corpus seed and the master training seed.
    pub seed: Option<u64>,
    pub skip_pretrain: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read `path` (defaults when `None`) and apply the overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.data.seed = seed;
            self.system.seed = seed;
        }
        if overrides.skip_pretrain {
            self.system.skip_pretrain = true;
        }
        if let Some(out) = &overrides.out {
            self.paths.out = out.clone();
        }
    }

    pub fn label_space(&self) -> Result<LabelSpace, CliError> {
        match &self.paths.taxonomy {
            Some(p) => LabelSpace::load(p).map_err(|e| CliError::Config(format!("taxonomy {}: {e}", p.display()))),
            None => Ok(LabelSpace::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["bogus = 1", "[paths]\nbogus = 'x'", "[system]\nbogus = 1", "[system.weak.teacher]\nlr = 1.0", "[data]\nn_labeled = 1\nn_unlabeled = 1\nseed = 1\nextra = 2"] {
            assert!(matches!(RunConfig::from_toml(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = RunConfig::from_toml("[paths]\nout = 'a'\n[system]\nseed = 5\n").unwrap();
        cfg.apply(&Overrides { seed: Some(9), skip_pretrain: true, out: Some("b".into()) });
        assert_eq!((cfg.data.seed, cfg.system.seed, cfg.system.skip_pretrain), (9, 9, true));
        assert_eq!(cfg.paths.corpus(), Path::new("b/corpus.jsonl"));
        assert_eq!(cfg.paths.reports(), Path::new("b/reports"));
    }

    #[test]
    fn explicit_paths_ignore_out() {
        let cfg = RunConfig::from_toml("[paths]\nout = 'a'\ncorpus = 'c.jsonl'\ncheckpoints = 'ck'\n").unwrap();
        assert_eq!(cfg.paths.corpus(), Path::new("c.jsonl"));
        assert_eq!(cfg.paths.checkpoints(), Path::new("ck"));
        assert_eq!(cfg.paths.reports(), Path::new("a/reports"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
