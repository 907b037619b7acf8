use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-token encoder outputs are reduced to one trajectory vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub pred_layers: usize,
    pub pred_heads: usize,
    /// Hidden width of the feed-forward sublayers as a multiple of `d`.
    pub ffn_mult: usize,
    pub max_len: usize,
    /// Targets sampled per trajectory.
    pub targets: usize,
    pub target_ratios: Vec<f64>,
    pub successive_p: f64,
    pub context_ratio_range: (f64, f64),
    pub ema_momentum: f64,
    pub pooling: Pooling,
    pub use_adjfuse: bool,
    /// Standard deviation of the normal init for positional tables, the
    /// mask token and the AdjFuse projection.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            enc_layers: 3,
            enc_heads: 4,
            pred_layers: 2,
            pred_heads: 8,
            ffn_mult: 4,
            max_len: 200,
            targets: 4,
            target_ratios: vec![0.10, 0.20, 0.30],
            successive_p: 0.5,
            context_ratio_range: (0.85, 1.0),
            ema_momentum: 0.996,
            pooling: Pooling::Mean,
            use_adjfuse: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub const LOW_RATIOS: [f64; 3] = [0.05, 0.15, 0.25];
    pub const HIGH_RATIOS: [f64; 3] = [0.30, 0.40, 0.50];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.enc_heads == 0 || self.pred_heads == 0 {
            return bad("dimension and head counts must be positive".into());
        }
        if self.d % self.enc_heads != 0 || self.d % self.pred_heads != 0 {
            return bad(format!(
                "d = {} must be divisible by enc_heads = {} and pred_heads = {}",
                self.d, self.enc_heads, self.pred_heads
            ));
        }
        if self.enc_layers == 0 || self.pred_layers == 0 || self.ffn_mult == 0 {
            return bad("layer counts and ffn_mult must be positive".into());
        }
        if self.max_len < 4 || self.targets == 0 {
            return bad("max_len must be at least 4 and targets at least 1".into());
        }
        if self.target_ratios.is_empty() || self.target_ratios.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return bad(format!("target ratios {:?} must lie in (0, 1)", self.target_ratios));
        }
        if !(0.0..=1.0).contains(&self.successive_p) {
            return bad(format!("successive_p = {} outside [0, 1]", self.successive_p));
        }
        let (lo, hi) = self.context_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("context ratio range ({lo}, {hi}) must lie within (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum = {} outside [0, 1]", self.ema_momentum));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std = {} must be finite and non-negative", self.init_std));
        }
        Ok(())
    }

    /// Canonical TOML text, embedded in checkpoints.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
