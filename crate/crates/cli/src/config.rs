//! The training run file: a TOML document with `run`, `paths`, `model`,
//! `train` and `loss` sections.
//!
//! Only `paths` entries can be overridden from the environment
//! (`R2T_PATHS_<KEY>`); hyperparameters always come from the file.

use std::path::{Path, PathBuf};

use r2t_core::loss::{LossMode, LossWeights};
use r2t_core::neural::{Architecture, ModelConfig};
use r2t_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: LossMode,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_architecture() -> Architecture {
    Architecture::Recurrent
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub rules: Option<PathBuf>,
    /// Unlabeled sentences (plain text or JSONL).
    pub corpus: Option<PathBuf>,
    /// Gold JSONL for fine-tuning.
    pub gold: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl PathsSection {
    fn slots(&mut self) -> [(&'static str, &mut Option<PathBuf>); 6] {
        [
            ("RULES", &mut self.rules),
            ("CORPUS", &mut self.corpus),
            ("GOLD", &mut self.gold),
            ("EMBEDDINGS", &mut self.embeddings),
            ("INIT_CHECKPOINT", &mut self.init_checkpoint),
            ("OUTPUT_DIR", &mut self.output_dir),
        ]
    }

    /// Applies `R2T_PATHS_*` variables looked up through `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) {
        for (key, slot) in self.slots() {
            if let Some(v) = env(&format!("R2T_PATHS_{key}")) {
                *slot = Some(PathBuf::from(v));
            }
        }
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for (_, slot) in self.slots() {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Overrides of the architecture defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub char_input_dim: Option<usize>,
    pub char_emb_dim: Option<usize>,
    pub word_emb_dim: Option<usize>,
    pub token_hidden: Option<usize>,
    pub model_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
}

impl ModelSection {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

/// Overrides of the optimization regime.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub sft_rule_weight: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid run config: {e}")))
    }

    /// Reads a run file, resolves relative paths against its directory
    /// and applies environment overrides.
    pub fn load(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        cfg.paths.apply_env(env);
        Ok(cfg)
    }

    pub fn model_config(&self, num_tags: usize) -> ModelConfig {
        let mut m = ModelConfig::for_architecture(self.run.architecture, num_tags);
        let o = &self.model;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { m.$f = v; } )* };
        }
        set!(char_input_dim, char_emb_dim, word_emb_dim, token_hidden, model_dim, layers, heads, ff_dim, dropout, max_len);
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::for_architecture(self.run.mode, self.run.architecture);
        t.seed = self.run.seed;
        t.weights = self.loss;
        let o = &self.train;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { t.$f = v; } )* };
        }
        set!(epochs, batch_size, learning_rate, weight_decay, max_grad_norm, sft_rule_weight);
        t
    }

    /// Checks that the paths the mode needs are present and that the
    /// hyperparameters are valid.
    pub fn validate(&self) -> Result<(), CliError> {
        let need = |p: &Option<PathBuf>, what: &str| match p {
            Some(_) => Ok(()),
            None => Err(CliError::config(format!("paths.{what} is required for {:?} training", self.run.mode))),
        };
        need(&self.paths.output_dir, "output_dir")?;
        match self.run.mode {
            LossMode::Unsupervised => {
                need(&self.paths.rules, "rules")?;
                need(&self.paths.corpus, "corpus")?;
            }
            LossMode::Sft => need(&self.paths.gold, "gold")?,
        }
        self.train_config().validate()?;
        self.model_config(2).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[run]\nmode = \"unsupervised\"\n";

    #[test]
    fn defaults_follow_regime() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        let t = c.train_config();
        assert_eq!((t.epochs, t.batch_size, t.learning_rate, t.seed), (30, 256, 1e-3, 42));
        assert_eq!(c.model_config(8).token_hidden, 256);
        assert_eq!(c.loss, LossWeights::default());
    }

    #[test]
    fn sections_override() {
        let text = format!(
            "{MINIMAL}seed = 3\n[model]\ntoken_hidden = 64\n[train]\nepochs = 10\n[loss]\nalpha = 1.0\nbeta = 0.0\ngamma = 0.0\ndelta = 0.0\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.model_config(6).token_hidden, 64);
        let t = c.train_config();
        assert_eq!((t.epochs, t.seed, t.weights.alpha, t.weights.beta), (10, 3, 1.0, 0.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}[train]\nepoch = 3\n")).is_err());
        assert!(RunConfig::parse("[run]\nmode = \"semi\"\n").is_err());
    }

    #[test]
    fn environment_overrides_paths_only() {
        let mut c = RunConfig::parse(&format!("{MINIMAL}[paths]\nrules = \"a.json\"\n")).unwrap();
        c.paths.apply_env(|k| (k == "R2T_PATHS_RULES").then(|| "/x/b.json".to_string()));
        assert_eq!(c.paths.rules.as_deref(), Some(Path::new("/x/b.json")));
        assert_eq!(c.paths.corpus, None);
    }

    #[test]
    fn sft_without_gold_is_a_config_error() {
        let c = RunConfig::parse("[run]\nmode = \"sft\"\n[paths]\noutput_dir = \"out\"\n").unwrap();
        assert_eq!(c.validate().unwrap_err().code, crate::EXIT_CONFIG);
    }
}
