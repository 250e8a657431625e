use rand::Rng;

use super::VaeveConfig;
use super::LOG_SD_RANGE;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::recurrent::LstmParams;

pub const ENC_LSTM: &str = "enc.lstm";
pub const ENC_LSTM_REV: &str = "enc.lstm_rev";
pub const ENC_MU_W: &str = "enc.mu.w";
pub const ENC_MU_B: &str = "enc.mu.b";
pub const ENC_SIGMA_W: &str = "enc.sigma.w";
pub const ENC_SIGMA_B: &str = "enc.sigma.b";
/// Runs over the acoustic-side sum `f_t = x_t + y_t`.
pub const DEC_LSTM_UPPER: &str = "dec.lstm1";
/// Runs over one-hot phoneme labels.
pub const DEC_LSTM_PHONE: &str = "dec.lstm2";
pub const DEC_Y_W: &str = "dec.y.w";
pub const DEC_Y_B: &str = "dec.y.b";
pub const DEC_OUT_W: &str = "dec.out.w";
pub const DEC_OUT_B: &str = "dec.out.b";
/// Temporary map replacing the upper decoder LSTM during the first
/// pretraining stage.
pub const DEC_BYPASS_W: &str = "dec.bypass.w";
pub const DEC_BYPASS_B: &str = "dec.bypass.b";

/// Every parameter of the encoder lives under `enc.`.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

/// Every parameter of the decoder lives under `dec.`.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.")
}

pub fn is_latent_branch_param(name: &str) -> bool {
    name == DEC_Y_W || name == DEC_Y_B
}

pub fn is_bypass_param(name: &str) -> bool {
    name == DEC_BYPASS_W || name == DEC_BYPASS_B
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .expect("shape matches")
}

/// All trainable weights of the encoder (φ) and decoder (θ), by name.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeveParams {
    set: ParamSet,
}

impl VaeveParams {
    pub fn init(cfg: &VaeveConfig, rng: &mut impl Rng) -> Self {
        let mut set = ParamSet::new();
        let (d, f, p, h) = (
            cfg.latent_dim,
            cfg.feature_dim,
            cfg.phoneme_count,
            cfg.dec_cells,
        );
        LstmParams::init(cfg.encoder_input_dim(), cfg.enc_cells, rng).store(ENC_LSTM, &mut set);
        if cfg.bidirectional_encoder {
            LstmParams::init(cfg.encoder_input_dim(), cfg.enc_cells, rng)
                .store(ENC_LSTM_REV, &mut set);
        }
        let s = cfg.encoder_state_dim();
        set.insert(ENC_MU_W, uniform_matrix(d, s, rng));
        set.insert(ENC_MU_B, Tensor::zeros(&[d]));
        set.insert(ENC_SIGMA_W, uniform_matrix(d, s, rng));
        // Posterior widths start at the decoder noise scale rather than at
        // the prior, so early sampling noise does not swamp the reconstruction.
        let (lo, hi) = LOG_SD_RANGE;
        set.insert(
            ENC_SIGMA_B,
            Tensor::filled(&[d], cfg.sigma.ln().clamp(lo, hi)),
        );

        LstmParams::init(p, h, rng).store(DEC_LSTM_PHONE, &mut set);
        LstmParams::init(h, h, rng).store(DEC_LSTM_UPPER, &mut set);
        set.insert(DEC_Y_W, uniform_matrix(h, d, rng));
        set.insert(DEC_Y_B, Tensor::zeros(&[h]));
        set.insert(DEC_OUT_W, uniform_matrix(f, h, rng));
        set.insert(DEC_OUT_B, Tensor::zeros(&[f]));
        Self { set }
    }

    /// Wraps a named set after checking it has exactly the tensors `cfg` implies.
    pub fn from_set(cfg: &VaeveConfig, set: ParamSet) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::init(cfg, &mut rng);
        for (name, t) in reference.set.iter() {
            let got = set
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "vaeve_params",
                    left: t.shape().to_vec(),
                    right: got.shape().to_vec(),
                });
            }
        }
        for name in set.names() {
            if !reference.set.contains(name) && !is_bypass_param(name) {
                return Err(Error::Invalid(format!("unexpected parameter `{name}`")));
            }
        }
        Ok(Self { set })
    }

    pub fn as_set(&self) -> &ParamSet {
        &self.set
    }

    pub fn as_set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn into_set(self) -> ParamSet {
        self.set
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.set.require(name)
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor) {
        self.set.insert(name, t);
    }

    pub fn encoder_names(&self) -> Vec<String> {
        self.set
            .names()
            .filter(|n| is_encoder_param(n))
            .map(str::to_owned)
            .collect()
    }

    pub fn decoder_names(&self) -> Vec<String> {
        self.set
            .names()
            .filter(|n| is_decoder_param(n))
            .map(str::to_owned)
            .collect()
    }

    /// Adds the temporary bypass map used by the first pretraining stage.
    pub fn add_bypass(&mut self, cfg: &VaeveConfig, rng: &mut impl Rng) {
        let h = cfg.dec_cells;
        self.set.insert(DEC_BYPASS_W, uniform_matrix(h, h, rng));
        self.set.insert(DEC_BYPASS_B, Tensor::zeros(&[h]));
    }

    pub fn remove_bypass(&mut self) {
        self.set.remove(DEC_BYPASS_W);
        self.set.remove(DEC_BYPASS_B);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> VaeveConfig {
        VaeveConfig {
            feature_dim: 4,
            latent_dim: 2,
            enc_cells: 5,
            dec_cells: 6,
            phoneme_count: 3,
            ..VaeveConfig::default()
        }
    }

    #[test]
    fn names_are_partitioned() {
        let p = VaeveParams::init(&small(), &mut ChaCha8Rng::seed_from_u64(0));
        let enc = p.encoder_names();
        let dec = p.decoder_names();
        assert_eq!(enc.len() + dec.len(), p.as_set().len());
        assert!(dec.iter().any(|n| n == DEC_Y_W));
        assert!(enc.iter().all(|n| !is_decoder_param(n)));
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = small();
        let p = VaeveParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.get(DEC_Y_W).unwrap().shape(), &[6, 2]);
        assert_eq!(p.get(DEC_OUT_W).unwrap().shape(), &[4, 6]);
        assert_eq!(p.get("enc.lstm.w_i").unwrap().shape(), &[5, 4]);
        assert_eq!(p.get("enc.lstm.b_f").unwrap().data(), &[1.0; 5]);
        assert!(VaeveParams::from_set(&cfg, p.clone().into_set()).is_ok());

        let other = VaeveConfig {
            feature_dim: 5,
            ..cfg
        };
        assert!(VaeveParams::from_set(&other, p.into_set()).is_err());
    }
}
