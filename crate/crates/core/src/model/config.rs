use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gating::LoadEstimate;
use crate::{Error, Result};

/// Every architectural and optimization hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Width `d` after the channel change.
    pub width: usize,
    pub alpha: f64,
    pub k_gate: usize,
    pub k_freq: usize,
    /// One expert per entry.
    pub patch_sizes: Vec<usize>,
    pub trend_kernels: Vec<usize>,
    pub stream_depth: usize,
    pub stream_kernels: Vec<usize>,
    pub heads: usize,
    pub revin_affine: bool,
    /// When off, both streams see the normalized input and the experts see
    /// the channel-changed input directly.
    pub hybrid_decomposition: bool,
    pub soft_load: bool,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub balance_loss_weight: f64,
    pub grad_clip: f64,
    /// Validation runs every `eval_every` steps.
    pub eval_every: usize,
    /// Early-stopping patience, in validation runs.
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 7,
            lookback: 336,
            horizon: 96,
            width: 16,
            alpha: 0.3,
            k_gate: 2,
            k_freq: 5,
            patch_sizes: vec![4, 8, 16, 24],
            trend_kernels: vec![5, 9, 13],
            stream_depth: 2,
            stream_kernels: vec![3, 5],
            heads: 2,
            revin_affine: true,
            hybrid_decomposition: true,
            soft_load: false,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            batch_size: 32,
            max_steps: 1000,
            seed: 0,
            balance_loss_weight: 0.01,
            grad_clip: 5.0,
            eval_every: 50,
            patience: 5,
        }
    }
}

/// The fields that determine parameter shapes and the forward computation.
#[derive(Serialize)]
struct Architecture<'a> {
    channels: usize,
    lookback: usize,
    horizon: usize,
    width: usize,
    alpha: f64,
    k_gate: usize,
    k_freq: usize,
    patch_sizes: &'a [usize],
    trend_kernels: &'a [usize],
    stream_depth: usize,
    stream_kernels: &'a [usize],
    heads: usize,
    revin_affine: bool,
    hybrid_decomposition: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("horizon", self.horizon),
            ("width", self.width),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("stream_depth", self.stream_depth),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.lookback < 2 {
            return Err(Error::config(format!("lookback must be at least 2, got {}", self.lookback)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::config("patch_sizes must name at least one expert"));
        }
        if let Some(p) = self.patch_sizes.iter().find(|&&p| p == 0 || p > self.lookback) {
            return Err(Error::config(format!("patch size {p} must lie in [1, lookback = {}]", self.lookback)));
        }
        if self.k_gate == 0 || self.k_gate > self.patch_sizes.len() {
            return Err(Error::config(format!(
                "k_gate must lie in [1, {}], got {}",
                self.patch_sizes.len(),
                self.k_gate
            )));
        }
        if self.k_freq == 0 || self.k_freq > self.lookback / 2 {
            return Err(Error::config(format!("k_freq must lie in [1, {}], got {}", self.lookback / 2, self.k_freq)));
        }
        if self.trend_kernels.is_empty() || self.trend_kernels.iter().any(|k| k % 2 == 0 || *k > self.lookback) {
            return Err(Error::config(format!(
                "trend_kernels {:?} must be non-empty, odd and at most the lookback",
                self.trend_kernels
            )));
        }
        if self.stream_kernels.is_empty() || self.stream_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!("stream_kernels {:?} must be non-empty and odd", self.stream_kernels)));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!("heads {} must divide width {}", self.heads, self.width)));
        }
        let non_negative = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("balance_loss_weight", self.balance_loss_weight),
        ];
        if let Some((name, v)) = non_negative.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        Ok(())
    }

    pub fn experts(&self) -> usize {
        self.patch_sizes.len()
    }

    /// Gate feature width: four band amplitudes plus two per-width summaries.
    pub fn gate_features(&self) -> usize {
        4 + 2 * self.width
    }

    pub fn load_estimate(&self) -> LoadEstimate {
        if self.soft_load {
            LoadEstimate::Soft
        } else {
            LoadEstimate::StraightThrough
        }
    }

    /// SHA-256 over the architecture fields only; checkpoints carry it so a
    /// model is never loaded into a differently shaped network.
    pub fn architecture_digest(&self) -> [u8; 32] {
        let arch = Architecture {
            channels: self.channels,
            lookback: self.lookback,
            horizon: self.horizon,
            width: self.width,
            alpha: self.alpha,
            k_gate: self.k_gate,
            k_freq: self.k_freq,
            patch_sizes: &self.patch_sizes,
            trend_kernels: &self.trend_kernels,
            stream_depth: self.stream_depth,
            stream_kernels: &self.stream_kernels,
            heads: self.heads,
            revin_affine: self.revin_affine,
            hybrid_decomposition: self.hybrid_decomposition,
        };
        let text = toml::to_string(&arch).expect("architecture serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().learning_rate, 5e-5);
    }

    #[test]
    fn digest_ignores_training_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig { learning_rate: 1e-3, max_steps: 3, seed: 9, ..a.clone() };
        let c = ModelConfig { width: 8, ..a.clone() };
        assert_eq!(a.architecture_digest(), b.architecture_digest());
        assert_ne!(a.architecture_digest(), c.architecture_digest());
    }

    #[test]
    fn rejects_bad_fields() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig { alpha: 1.0, ..base.clone() },
            ModelConfig { k_gate: 5, ..base.clone() },
            ModelConfig { patch_sizes: vec![4, 400], ..base.clone() },
            ModelConfig { trend_kernels: vec![4], ..base.clone() },
            ModelConfig { heads: 3, ..base.clone() },
            ModelConfig { k_freq: 169, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
