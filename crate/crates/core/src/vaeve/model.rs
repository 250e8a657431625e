use std::ops::Range;

use super::params::*;
use super::{DelayBoundary, VaeveConfig, VaeveParams};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::recurrent::{lstm_layer, lstm_layer_reversed, LstmNodes};

/// Bounds applied to the log standard deviation before exponentiation.
pub const LOG_SD_RANGE: (f64, f64) = (-8.0, 8.0);

/// Per-frame posterior parameters, both `T × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub sd: Tensor,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.mu.rows()
    }
}

/// Graph handles produced by [`encoder_graph`].
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub mu: Vec<NodeId>,
    pub log_sd: Vec<NodeId>,
    pub sd: Vec<NodeId>,
}

/// Loss components for one utterance. `total = recon + kl_weight · kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

/// How the decoder is wired for a given training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecoderPath {
    /// `f_t = x_t + y_t` through the upper LSTM.
    #[default]
    Full,
    /// `y_t = 0`; the latent branch is not on the graph.
    PhonemeOnly,
    /// `y_t = 0` and the upper LSTM replaced by the temporary bypass map.
    Bypass,
}

/// Clamped averaging window around frame `t` in a sequence of `len` frames.
pub fn pool_window(t: usize, len: usize, radius: usize) -> Range<usize> {
    t.saturating_sub(radius)..(t + radius + 1).min(len)
}

/// Windowed means of `seq`, with the divisor equal to the actual window size.
pub fn average_pool(seq: &[Vec<f64>], radius: usize) -> Vec<Vec<f64>> {
    (0..seq.len())
        .map(|t| {
            let w = pool_window(t, seq.len(), radius);
            let n = w.len() as f64;
            let mut acc = vec![0.0; seq[t].len()];
            for row in &seq[w] {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / n).collect()
        })
        .collect()
}

/// Stacks each frame with `radius` neighbours on either side, replicating
/// the first and last frames at the edges.
pub fn context_frames(features: &Tensor, radius: usize) -> Vec<Vec<f64>> {
    let t_len = features.rows();
    (0..t_len)
        .map(|t| {
            let mut row = Vec::with_capacity((2 * radius + 1) * features.cols());
            for k in 0..=2 * radius {
                let s = (t + k).saturating_sub(radius).min(t_len - 1);
                row.extend_from_slice(features.row(s));
            }
            row
        })
        .collect()
}

fn check_features(cfg: &VaeveConfig, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::Invalid(format!(
            "features must be a non-empty T×F matrix, got shape {:?}",
            features.shape()
        )));
    }
    if features.cols() != cfg.feature_dim {
        return Err(Error::dim(
            "feature dimension",
            cfg.feature_dim,
            features.cols(),
        ));
    }
    Ok(())
}

pub(crate) fn check_phonemes(cfg: &VaeveConfig, phonemes: &[usize]) -> Result<()> {
    if phonemes.is_empty() {
        return Err(Error::Invalid("empty phoneme sequence".into()));
    }
    for (frame, &label) in phonemes.iter().enumerate() {
        if label >= cfg.phoneme_count {
            return Err(Error::LabelOutOfRange {
                frame,
                label,
                count: cfg.phoneme_count,
            });
        }
    }
    Ok(())
}

fn affine(g: &mut Graph, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let wx = g.matvec(w, x)?;
    g.add(wx, b)
}

/// Builds the probabilistic encoder on `g`.
pub fn encoder_graph(
    g: &mut Graph,
    cfg: &VaeveConfig,
    params: &VaeveParams,
    features: &Tensor,
) -> Result<EncoderNodes> {
    check_features(cfg, features)?;
    let set = params.as_set();
    let inputs: Vec<NodeId> = context_frames(features, cfg.ctx_radius_enc)
        .into_iter()
        .map(|row| g.constant(Tensor::vector(row)))
        .collect();

    let fwd = LstmNodes::register(g, ENC_LSTM, set)?;
    let mut hidden = lstm_layer(g, &fwd, &inputs)?;
    if cfg.bidirectional_encoder {
        let rev = LstmNodes::register(g, ENC_LSTM_REV, set)?;
        let back = lstm_layer_reversed(g, &rev, &inputs)?;
        hidden = hidden
            .iter()
            .zip(&back)
            .map(|(&a, &b)| g.concat(&[a, b]))
            .collect::<Result<_>>()?;
    }
    if cfg.pool_radius > 0 {
        let t_len = hidden.len();
        hidden = (0..t_len)
            .map(|t| g.window_mean(&hidden[pool_window(t, t_len, cfg.pool_radius)]))
            .collect::<Result<_>>()?;
    }

    let mu_w = g.param(ENC_MU_W, set.require(ENC_MU_W)?);
    let mu_b = g.param(ENC_MU_B, set.require(ENC_MU_B)?);
    let sd_w = g.param(ENC_SIGMA_W, set.require(ENC_SIGMA_W)?);
    let sd_b = g.param(ENC_SIGMA_B, set.require(ENC_SIGMA_B)?);
    let mut out = EncoderNodes {
        mu: Vec::with_capacity(hidden.len()),
        log_sd: Vec::with_capacity(hidden.len()),
        sd: Vec::with_capacity(hidden.len()),
    };
    for h in hidden {
        out.mu.push(affine(g, mu_w, mu_b, h)?);
        let pre = affine(g, sd_w, sd_b, h)?;
        let log_sd = g.clamp(pre, LOG_SD_RANGE.0, LOG_SD_RANGE.1);
        out.sd.push(g.exp(log_sd));
        out.log_sd.push(log_sd);
    }
    Ok(out)
}

/// Builds the phoneme-conditioned decoder on `g` and returns `μ^(dec)_t` per frame.
///
/// `latent` must hold one node per frame for [`DecoderPath::Full`] and is
/// ignored otherwise.
pub fn decoder_graph(
    g: &mut Graph,
    cfg: &VaeveConfig,
    params: &VaeveParams,
    phonemes: &[usize],
    latent: Option<&[NodeId]>,
    path: DecoderPath,
) -> Result<Vec<NodeId>> {
    check_phonemes(cfg, phonemes)?;
    let set = params.as_set();
    let t_len = phonemes.len();

    let onehots: Vec<NodeId> = phonemes
        .iter()
        .map(|&c| {
            let mut v = vec![0.0; cfg.phoneme_count];
            v[c] = 1.0;
            g.constant(Tensor::vector(v))
        })
        .collect();
    let phone = LstmNodes::register(g, DEC_LSTM_PHONE, set)?;
    let xs = lstm_layer(g, &phone, &onehots)?;

    let fs = match path {
        DecoderPath::Full => {
            let z = latent.ok_or_else(|| Error::Invalid("decoder needs latent frames".into()))?;
            if z.len() != t_len {
                return Err(Error::dim("latent frames", t_len, z.len()));
            }
            let yw = g.param(DEC_Y_W, set.require(DEC_Y_W)?);
            let yb = g.param(DEC_Y_B, set.require(DEC_Y_B)?);
            let mut fs = Vec::with_capacity(t_len);
            for (t, &x) in xs.iter().enumerate() {
                let source = match (t.checked_sub(cfg.delay), cfg.delay_boundary) {
                    (Some(s), _) => Some(s),
                    (None, DelayBoundary::Zero) => None,
                    (None, DelayBoundary::Clamp) => Some(0),
                };
                let f = match source {
                    Some(s) => {
                        let sz = g.sigmoid(z[s]);
                        let y = affine(g, yw, yb, sz)?;
                        g.add(x, y)?
                    }
                    None => x,
                };
                fs.push(f);
            }
            fs
        }
        DecoderPath::PhonemeOnly | DecoderPath::Bypass => xs,
    };

    let hs = if path == DecoderPath::Bypass {
        let w = g.param(DEC_BYPASS_W, set.require(DEC_BYPASS_W)?);
        let b = g.param(DEC_BYPASS_B, set.require(DEC_BYPASS_B)?);
        fs.iter()
            .map(|&f| affine(g, w, b, f))
            .collect::<Result<Vec<_>>>()?
    } else {
        let upper = LstmNodes::register(g, DEC_LSTM_UPPER, set)?;
        lstm_layer(g, &upper, &fs)?
    };

    let ow = g.param(DEC_OUT_W, set.require(DEC_OUT_W)?);
    let ob = g.param(DEC_OUT_B, set.require(DEC_OUT_B)?);
    hs.into_iter().map(|h| affine(g, ow, ob, h)).collect()
}

/// `KL_t` node for one frame given its mean and log deviation nodes.
fn kl_frame(g: &mut Graph, mu: NodeId, log_sd: NodeId, sd: NodeId) -> Result<NodeId> {
    let d = g.value(mu).len() as f64;
    let mu2 = g.mul(mu, mu)?;
    let sd2 = g.mul(sd, sd)?;
    let two_log = g.scale(log_sd, 2.0);
    let a = g.add(mu2, sd2)?;
    let b = g.sub(a, two_log)?;
    let s = g.sum(b);
    let minus_d = g.constant(Tensor::scalar(-d));
    let inner = g.add(s, minus_d)?;
    Ok(g.scale(inner, 0.5))
}

fn reduce_sum(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let c = g.concat(terms)?;
    Ok(g.sum(c))
}

fn check_noise(enc_frames: usize, d: usize, noise: &[Tensor]) -> Result<()> {
    if noise.is_empty() {
        return Err(Error::Invalid("at least one noise draw is required".into()));
    }
    for eps in noise {
        if eps.shape() != [enc_frames, d] {
            return Err(Error::Shape {
                op: "noise",
                left: vec![enc_frames, d],
                right: eps.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Negated lower bound for one utterance, with the encoder on the graph so
/// that gradients reach both encoder and decoder weights.
///
/// `noise` holds one `T × D` standard-normal draw per Monte Carlo sample.
pub fn elbo_graph(
    g: &mut Graph,
    cfg: &VaeveConfig,
    params: &VaeveParams,
    features: &Tensor,
    phonemes: &[usize],
    noise: &[Tensor],
) -> Result<LossNodes> {
    let t_len = features.rows();
    if phonemes.len() != t_len {
        return Err(Error::dim("phoneme labels", t_len, phonemes.len()));
    }
    let enc = encoder_graph(g, cfg, params, features)?;
    check_noise(t_len, cfg.latent_dim, noise)?;

    let targets: Vec<NodeId> = (0..t_len)
        .map(|t| g.constant(Tensor::vector(features.row(t).to_vec())))
        .collect();
    let inv_j = 1.0 / noise.len() as f64;
    let mut recon_terms = Vec::with_capacity(t_len * noise.len());
    for eps in noise {
        let z: Vec<NodeId> = (0..t_len)
            .map(|t| {
                let e = g.constant(Tensor::vector(eps.row(t).to_vec()));
                let spread = g.mul(enc.sd[t], e)?;
                g.add(enc.mu[t], spread)
            })
            .collect::<Result<_>>()?;
        let out = decoder_graph(g, cfg, params, phonemes, Some(&z), DecoderPath::Full)?;
        for (o, target) in out.iter().zip(&targets) {
            let d = g.half_sq_dist(*target, *o)?;
            recon_terms.push(g.scale(d, inv_j));
        }
    }
    let recon = reduce_sum(g, &recon_terms)?;
    let kl_terms = (0..t_len)
        .map(|t| kl_frame(g, enc.mu[t], enc.log_sd[t], enc.sd[t]))
        .collect::<Result<Vec<_>>>()?;
    let kl = reduce_sum(g, &kl_terms)?;
    let weighted = g.scale(kl, cfg.effective_kl_weight());
    let total = g.add(recon, weighted)?;
    Ok(LossNodes { total, recon, kl })
}

/// Reconstruction-only objective used while pretraining the decoder.
pub fn reconstruction_graph(
    g: &mut Graph,
    cfg: &VaeveConfig,
    params: &VaeveParams,
    features: &Tensor,
    phonemes: &[usize],
    path: DecoderPath,
) -> Result<NodeId> {
    check_features(cfg, features)?;
    if phonemes.len() != features.rows() {
        return Err(Error::dim(
            "phoneme labels",
            features.rows(),
            phonemes.len(),
        ));
    }
    let out = decoder_graph(g, cfg, params, phonemes, None, path)?;
    let terms = out
        .iter()
        .enumerate()
        .map(|(t, &o)| {
            let target = g.constant(Tensor::vector(features.row(t).to_vec()));
            g.half_sq_dist(target, o)
        })
        .collect::<Result<Vec<_>>>()?;
    reduce_sum(g, &terms)
}

fn stack(g: &Graph, nodes: &[NodeId]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = nodes.iter().map(|&n| g.value(n).data().to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Posterior means and deviations for every frame.
pub fn encode(features: &Tensor, cfg: &VaeveConfig, params: &VaeveParams) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let nodes = encoder_graph(&mut g, cfg, params, features)?;
    Ok(EncoderOutput {
        mu: stack(&g, &nodes.mu)?,
        sd: stack(&g, &nodes.sd)?,
    })
}

/// Deterministic test-time encoding: the posterior means.
pub fn encode_mean(features: &Tensor, cfg: &VaeveConfig, params: &VaeveParams) -> Result<Tensor> {
    Ok(encode(features, cfg, params)?.mu)
}

/// Reparameterized draw `z = μ + σ ⊙ ε`.
pub fn sample_latent(enc: &EncoderOutput, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != enc.mu.shape() {
        return Err(Error::Shape {
            op: "sample_latent",
            left: enc.mu.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    let data = enc
        .mu
        .data()
        .iter()
        .zip(enc.sd.data())
        .zip(noise.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(enc.mu.shape().to_vec(), data)
}

/// Decoder means `μ^(dec)` (`T × F`) for fixed latent frames `z` (`T × D`).
pub fn decode(
    phonemes: &[usize],
    z: &Tensor,
    cfg: &VaeveConfig,
    params: &VaeveParams,
) -> Result<Tensor> {
    if z.rows() != phonemes.len() || z.cols() != cfg.latent_dim {
        return Err(Error::Shape {
            op: "decode",
            left: vec![phonemes.len(), cfg.latent_dim],
            right: z.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let zn: Vec<NodeId> = (0..z.rows())
        .map(|t| g.constant(Tensor::vector(z.row(t).to_vec())))
        .collect();
    let out = decoder_graph(&mut g, cfg, params, phonemes, Some(&zn), DecoderPath::Full)?;
    stack(&g, &out)
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))` for one frame.
pub fn kl_divergence(mu: &[f64], sd: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(sd)
        .map(|(m, s)| 1.0 + 2.0 * s.ln() - m * m - s * s)
        .sum::<f64>()
}

/// Negated lower bound evaluated from an already computed encoder output.
pub fn elbo_loss(
    features: &Tensor,
    phonemes: &[usize],
    enc: &EncoderOutput,
    noise: &[Tensor],
    cfg: &VaeveConfig,
    params: &VaeveParams,
) -> Result<LossTerms> {
    check_features(cfg, features)?;
    check_noise(enc.frames(), cfg.latent_dim, noise)?;
    if enc.frames() != features.rows() {
        return Err(Error::dim("encoder frames", features.rows(), enc.frames()));
    }
    let mut recon = 0.0;
    for eps in noise {
        let z = sample_latent(enc, eps)?;
        let out = decode(phonemes, &z, cfg, params)?;
        let sq: f64 = out
            .data()
            .iter()
            .zip(features.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        recon += 0.5 * sq;
    }
    recon /= noise.len() as f64;
    let kl: f64 = (0..enc.frames())
        .map(|t| kl_divergence(enc.mu.row(t), enc.sd.row(t)))
        .sum();
    Ok(LossTerms {
        total: recon + cfg.effective_kl_weight() * kl,
        recon,
        kl,
    })
}
