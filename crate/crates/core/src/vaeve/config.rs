use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the decoder feeds in place of `sigmoid(z_{t-Δt})` when `t ≤ Δt`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayBoundary {
    /// `y_t = 0`, the same convention as decoder pretraining.
    #[default]
    Zero,
    /// Reuse the first latent frame.
    Clamp,
}

/// Structural and loss hyperparameters of the variability encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeveConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub enc_cells: usize,
    pub dec_cells: usize,
    pub phoneme_count: usize,
    /// Standard deviation of the isotropic decoder Gaussian.
    pub sigma: f64,
    /// Monte Carlo samples per frame in the objective.
    pub mc_samples: usize,
    /// Average-pooling radius over encoder hidden states (0 = off).
    pub pool_radius: usize,
    /// Delay between latent frame and decoder frame (0 = off).
    pub delay: usize,
    pub delay_boundary: DelayBoundary,
    /// Train only the encoder during fine-tuning.
    pub fix_decoder: bool,
    /// Encoder input context radius; frames are stacked `2r+1` wide.
    pub ctx_radius_enc: usize,
    pub bidirectional_encoder: bool,
    /// Weight of the KL term after the `1/σ²` prefactor is folded into the
    /// learning rate. `None` means `σ²`.
    pub kl_weight: Option<f64>,
}

impl Default for VaeveConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            latent_dim: 39,
            enc_cells: 128,
            dec_cells: 256,
            phoneme_count: 8,
            sigma: 0.01,
            mc_samples: 1,
            pool_radius: 0,
            delay: 0,
            delay_boundary: DelayBoundary::Zero,
            fix_decoder: false,
            ctx_radius_enc: 0,
            bidirectional_encoder: false,
            kl_weight: None,
        }
    }
}

impl VaeveConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.phoneme_count == 0 || self.latent_dim == 0 {
            return fail("feature_dim, phoneme_count and latent_dim must be positive".into());
        }
        if self.latent_dim >= self.enc_cells {
            return fail(format!(
                "latent_dim ({}) must be smaller than enc_cells ({})",
                self.latent_dim, self.enc_cells
            ));
        }
        if self.dec_cells == 0 {
            return fail("dec_cells must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1".into());
        }
        if let Some(w) = self.kl_weight {
            if !(w >= 0.0) {
                return fail(format!("kl_weight must be non-negative, got {w}"));
            }
        }
        Ok(())
    }

    pub fn effective_kl_weight(&self) -> f64 {
        self.kl_weight.unwrap_or(self.sigma * self.sigma)
    }

    /// Width of one encoder input frame after context stacking.
    pub fn encoder_input_dim(&self) -> usize {
        (2 * self.ctx_radius_enc + 1) * self.feature_dim
    }

    /// Width of the encoder state fed to the mean/deviation heads.
    pub fn encoder_state_dim(&self) -> usize {
        if self.bidirectional_encoder {
            2 * self.enc_cells
        } else {
            self.enc_cells
        }
    }
}
