use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and switches of the query model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per sequence.
    pub seq_len: usize,
    /// Width of the input feature vectors.
    pub input_dim: usize,
    /// Model width.
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of action queries.
    pub queries: usize,
    /// Encoder self-attention half-window: each frame sees `2 * window + 1` frames.
    pub window: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ffn_dim: usize,
    /// Hidden width of the prediction heads.
    pub head_hidden: usize,
    /// Confidence threshold for counting.
    pub alpha: f64,
    pub use_daq: bool,
    pub use_icl: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        ModelConfig {
            seq_len: 128,
            input_dim: 16,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 16,
            window: 16,
            ffn_dim: 128,
            head_hidden: 64,
            alpha: 0.2,
            use_daq: true,
            use_icl: true,
        }
    }

    /// Full-scale layout (512-dim features, 40 queries, 512 frames).
    pub fn reference() -> Self {
        ModelConfig {
            seq_len: 512,
            input_dim: 512,
            width: 512,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 4,
            queries: 40,
            window: 16,
            ffn_dim: 2048,
            head_hidden: 512,
            alpha: 0.2,
            use_daq: true,
            use_icl: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
            ("width", self.width),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("window", self.window),
            ("ffn_dim", self.ffn_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be >= 1"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.queries > self.seq_len {
            return Err(Error::config(
                "model.queries",
                format!("{} queries exceed {} frames", self.queries, self.seq_len),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("model.alpha", format!("{} is not in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}
