use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Recurrent,
    Transformer,
}

/// Where layer normalization sits inside each Transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
}

/// Dimensions of the tagger.
///
/// Both architectures share the input side: a word vector concatenated
/// with the final states of a character BiLSTM. The recurrent variant
/// feeds that into a one-layer token BiLSTM; the Transformer variant
/// projects it to `model_dim` and runs a stack of encoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Width of each character's input embedding.
    pub char_input_dim: usize,
    /// Width of the character encoding (forward and backward states).
    pub char_emb_dim: usize,
    pub word_emb_dim: usize,
    /// Token BiLSTM hidden units per direction.
    pub token_hidden: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub num_tags: usize,
    pub max_len: usize,
    pub norm: NormPlacement,
}

impl ModelConfig {
    pub fn recurrent(num_tags: usize) -> Self {
        Self {
            architecture: Architecture::Recurrent,
            char_input_dim: 50,
            char_emb_dim: 50,
            word_emb_dim: 300,
            token_hidden: 256,
            model_dim: 768,
            layers: 10,
            heads: 6,
            ff_dim: 3072,
            dropout: 0.3,
            num_tags,
            max_len: 512,
            norm: NormPlacement::Pre,
        }
    }

    pub fn transformer(num_tags: usize) -> Self {
        Self {
            architecture: Architecture::Transformer,
            dropout: 0.1,
            ..Self::recurrent(num_tags)
        }
    }

    pub fn for_architecture(architecture: Architecture, num_tags: usize) -> Self {
        match architecture {
            Architecture::Recurrent => Self::recurrent(num_tags),
            Architecture::Transformer => Self::transformer(num_tags),
        }
    }

    /// Width of the concatenated word + character representation.
    pub fn input_dim(&self) -> usize {
        self.word_emb_dim + self.char_emb_dim
    }

    pub fn char_hidden(&self) -> usize {
        self.char_emb_dim / 2
    }

    /// Width of the contextual representation fed to the output layer.
    pub fn encoder_dim(&self) -> usize {
        match self.architecture {
            Architecture::Recurrent => 2 * self.token_hidden,
            Architecture::Transformer => self.model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.char_emb_dim == 0 || !self.char_emb_dim.is_multiple_of(2) {
            return fail(format!("char_emb_dim must be a positive even number, got {}", self.char_emb_dim));
        }
        if self.char_input_dim == 0 || self.word_emb_dim == 0 {
            return fail("embedding widths must be positive".into());
        }
        if self.num_tags < 2 {
            return fail(format!("num_tags must be at least 2, got {}", self.num_tags));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match self.architecture {
            Architecture::Recurrent if self.token_hidden == 0 => fail("token_hidden must be positive".into()),
            Architecture::Transformer => {
                if self.model_dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
                    return fail("transformer dimensions must be positive".into());
                }
                if !self.model_dim.is_multiple_of(self.heads) {
                    return fail(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads));
                }
                if self.max_len == 0 {
                    return fail("max_len must be positive".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
