//! The variability encoder: a recurrent Gaussian encoder over acoustic
//! frames and a decoder that reconstructs the frames from phoneme labels
//! plus the sampled latent sequence.
//!
//! Because the decoder already sees the phoneme sequence, whatever the
//! latent has to contribute to the reconstruction is the phoneme-independent
//! part of the signal. Pooling, delay, a frozen decoder and stacked encoder
//! context are all switches on [`VaeveConfig`].

mod config;
mod model;
pub mod params;

pub use config::{DelayBoundary, VaeveConfig};
pub use model::{
    average_pool, context_frames, decode, decoder_graph, elbo_graph, elbo_loss, encode,
    encode_mean, encoder_graph, kl_divergence, pool_window, reconstruction_graph, sample_latent,
    DecoderPath, EncoderNodes, EncoderOutput, LossNodes, LossTerms, LOG_SD_RANGE,
};
pub use params::VaeveParams;
