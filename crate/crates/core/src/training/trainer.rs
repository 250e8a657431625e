use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{fingerprint, Checkpoint, Fingerprint, RngState};
use super::rmsprop::{clip_global_norm, OptimizerState};
use super::TrainConfig;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::Utterance;
use crate::vaeve::params::{
    is_bypass_param, is_decoder_param, DEC_LSTM_PHONE, DEC_LSTM_UPPER, DEC_OUT_B, DEC_OUT_W,
};
use crate::vaeve::{elbo_graph, reconstruction_graph, DecoderPath, VaeveConfig, VaeveParams};

// ChaCha stream ids. Shuffle streams are offset per stage so that the same
// epoch index in different stages visits utterances in different orders.
const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;
const STAGE_STRIDE: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-utterance objective, each term measured before its update.
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

pub fn train_fingerprint(vcfg: &VaeveConfig, tcfg: &TrainConfig) -> Fingerprint {
    fingerprint(
        "vaeve/train",
        &[
            &serde_json::to_value(vcfg).unwrap(),
            &serde_json::to_value(tcfg).unwrap(),
        ],
    )
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Copy)]
enum Objective {
    Reconstruction(DecoderPath),
    Elbo,
}

struct Stage<'a> {
    name: &'static str,
    index: u64,
    epochs: usize,
    objective: Objective,
    trainable: &'a dyn Fn(&str) -> bool,
}

struct Run<'a> {
    corpus: &'a [Utterance],
    vcfg: &'a VaeveConfig,
    tcfg: &'a TrainConfig,
    seed: u64,
    params: VaeveParams,
    opt: OptimizerState,
    noise: ChaCha8Rng,
    epochs_done: u64,
    steps: u64,
    history: Vec<EpochStats>,
}

impl Run<'_> {
    fn stage(&mut self, stage: &Stage) -> Result<()> {
        let optimizer = self.tcfg.optimizer();
        let user_frozen: BTreeSet<&str> = self.tcfg.frozen.iter().map(String::as_str).collect();
        let trainable: Vec<String> = self
            .params
            .as_set()
            .names()
            .filter(|n| (stage.trainable)(n) && !user_frozen.contains(n))
            .map(str::to_owned)
            .collect();
        let frozen: BTreeSet<String> = self
            .params
            .as_set()
            .names()
            .filter(|n| !trainable.iter().any(|t| t == n))
            .map(str::to_owned)
            .collect();

        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        for epoch in 0..stage.epochs {
            let mut shuffle = rng(
                self.seed,
                STREAM_SHUFFLE + stage.index * STAGE_STRIDE + epoch as u64,
            );
            order.sort_unstable();
            order.shuffle(&mut shuffle);

            let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
            for &i in &order {
                let utt = &self.corpus[i];
                let mut g = Graph::new();
                let (total, recon, kl) = match stage.objective {
                    Objective::Reconstruction(path) => {
                        let r = reconstruction_graph(
                            &mut g,
                            self.vcfg,
                            &self.params,
                            &utt.features,
                            &utt.phonemes,
                            path,
                        )?;
                        (r, r, None)
                    }
                    Objective::Elbo => {
                        let t_len = utt.features.rows();
                        let d = self.vcfg.latent_dim;
                        let noise: Vec<Tensor> = (0..self.vcfg.mc_samples)
                            .map(|_| {
                                let data = (0..t_len * d)
                                    .map(|_| StandardNormal.sample(&mut self.noise))
                                    .collect();
                                Tensor::matrix(t_len, d, data)
                            })
                            .collect::<Result<_>>()?;
                        let nodes = elbo_graph(
                            &mut g,
                            self.vcfg,
                            &self.params,
                            &utt.features,
                            &utt.phonemes,
                            &noise,
                        )?;
                        (nodes.total, nodes.recon, Some(nodes.kl))
                    }
                };
                let value = g.scalar(total);
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {value} on utterance `{}` ({} epoch {epoch})",
                        utt.id, stage.name
                    )));
                }
                loss_sum += value;
                recon_sum += g.scalar(recon);
                kl_sum += kl.map_or(0.0, |k| g.scalar(k));

                let mut grads = g.backward(total)?;
                clip_global_norm(
                    &mut grads,
                    trainable.iter().map(String::as_str),
                    self.tcfg.clip_norm,
                );
                optimizer.step(
                    self.params.as_set_mut(),
                    &grads,
                    &mut self.opt,
                    |name| self.tcfg.lr_for(epoch, name),
                    &frozen,
                )?;
                self.steps += 1;
            }
            let n = self.corpus.len() as f64;
            self.history.push(EpochStats {
                stage: stage.name,
                epoch,
                lr: self.tcfg.lr_for(epoch, ""),
                loss: loss_sum / n,
                recon: recon_sum / n,
                kl: kl_sum / n,
            });
            self.epochs_done += 1;
        }
        Ok(())
    }

    fn finish(mut self) -> TrainOutcome {
        // Accumulators for names that no longer exist (the bypass) are dropped.
        let names: Vec<String> = self.opt.accumulators.names().map(str::to_owned).collect();
        for n in names {
            if !self.params.as_set().contains(&n) {
                self.opt.accumulators.remove(&n);
            }
        }
        TrainOutcome {
            checkpoint: Checkpoint {
                fingerprint: train_fingerprint(self.vcfg, self.tcfg),
                params: self.params.into_set(),
                optimizer: self.opt.accumulators,
                epoch: self.epochs_done,
                steps: self.steps,
                rng: RngState::capture(&self.noise),
            },
            history: self.history,
        }
    }
}

fn check_corpus(corpus: &[Utterance], vcfg: &VaeveConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    for u in corpus {
        if u.features.cols() != vcfg.feature_dim {
            return Err(Error::dim(
                format!("feature dim of `{}`", u.id),
                vcfg.feature_dim,
                u.features.cols(),
            ));
        }
    }
    Ok(())
}

fn is_phone_stack(name: &str) -> bool {
    name.starts_with(&format!("{DEC_LSTM_PHONE}.")) || name == DEC_OUT_W || name == DEC_OUT_B
}

fn is_upper(name: &str) -> bool {
    name.starts_with(&format!("{DEC_LSTM_UPPER}."))
}

/// Fits the decoder with the latent branch output held at zero. Encoder
/// weights and the latent branch itself stay at their initial values.
pub fn pretrain_decoder(
    corpus: &[Utterance],
    vcfg: &VaeveConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    vcfg.validate()?;
    tcfg.validate()?;
    check_corpus(corpus, vcfg)?;
    let mut init = rng(seed, STREAM_INIT);
    let mut params = VaeveParams::init(vcfg, &mut init);
    let opt = OptimizerState::for_params(params.as_set());
    if !tcfg.pretrain_joint {
        params.add_bypass(vcfg, &mut init);
    }
    let mut run = Run {
        corpus,
        vcfg,
        tcfg,
        seed,
        params,
        opt,
        noise: rng(seed, STREAM_NOISE),
        epochs_done: 0,
        steps: 0,
        history: Vec::new(),
    };
    let full_stack = |n: &str| is_phone_stack(n) || is_upper(n);
    if tcfg.pretrain_joint {
        run.stage(&Stage {
            name: "pretrain",
            index: 0,
            epochs: tcfg.pretrain_epochs,
            objective: Objective::Reconstruction(DecoderPath::PhonemeOnly),
            trainable: &full_stack,
        })?;
    } else {
        let lower = |n: &str| is_phone_stack(n) || is_bypass_param(n);
        run.stage(&Stage {
            name: "pretrain-1",
            index: 0,
            epochs: tcfg.pretrain_epochs,
            objective: Objective::Reconstruction(DecoderPath::Bypass),
            trainable: &lower,
        })?;
        run.params.remove_bypass();
        run.stage(&Stage {
            name: "pretrain-2",
            index: 1,
            epochs: tcfg.pretrain_epochs,
            objective: Objective::Reconstruction(DecoderPath::PhonemeOnly),
            trainable: &full_stack,
        })?;
    }
    Ok(run.finish())
}

/// Jointly optimises the full objective starting from a pretrained
/// checkpoint. With `fix_decoder` only encoder weights move.
pub fn finetune(
    corpus: &[Utterance],
    ckpt: &Checkpoint,
    vcfg: &VaeveConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    vcfg.validate()?;
    tcfg.validate()?;
    check_corpus(corpus, vcfg)?;
    ckpt.verify(&train_fingerprint(vcfg, tcfg))?;
    let params = VaeveParams::from_set(vcfg, ckpt.params.clone())?;
    let mut opt = OptimizerState {
        accumulators: ckpt.optimizer.clone(),
    };
    for (name, t) in params.as_set().iter() {
        if !opt.accumulators.contains(name) {
            opt.accumulators.insert(name, Tensor::zeros(t.shape()));
        }
    }
    let mut run = Run {
        corpus,
        vcfg,
        tcfg,
        seed,
        params,
        opt,
        noise: rng(seed, STREAM_NOISE + 1),
        epochs_done: ckpt.epoch,
        steps: ckpt.steps,
        history: Vec::new(),
    };
    let fix = vcfg.fix_decoder;
    let trainable = move |n: &str| !(fix && is_decoder_param(n));
    run.stage(&Stage {
        name: "finetune",
        index: 2,
        epochs: tcfg.epochs,
        objective: Objective::Elbo,
        trainable: &trainable,
    })?;
    debug_assert!(run.params.as_set().names().all(|n| !is_bypass_param(n)));
    Ok(run.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vaeve::params::{is_latent_branch_param, DEC_Y_B, DEC_Y_W};

    fn tiny_cfg() -> VaeveConfig {
        VaeveConfig {
            feature_dim: 3,
            latent_dim: 2,
            enc_cells: 4,
            dec_cells: 5,
            phoneme_count: 3,
            ..VaeveConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<Utterance> {
        let table = [[1.0, 0.0, -1.0], [0.0, 0.5, 0.5], [-0.5, -1.0, 0.0]];
        (0..n)
            .map(|i| {
                let phonemes: Vec<usize> = (0..8).map(|t| (t / 3 + i) % 3).collect();
                let rows: Vec<Vec<f64>> = phonemes.iter().map(|&p| table[p].to_vec()).collect();
                Utterance {
                    id: format!("u{i}"),
                    features: Tensor::from_rows(&rows).unwrap(),
                    phonemes,
                    truth: None,
                }
            })
            .collect()
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            epochs: 2,
            pretrain_epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretraining_leaves_latent_branch_and_encoder() {
        let (v, t) = (tiny_cfg(), tcfg());
        let data = corpus(4);
        let out = pretrain_decoder(&data, &v, &t, 7).unwrap();
        let init = VaeveParams::init(&v, &mut rng(7, STREAM_INIT));
        for (name, tensor) in init.as_set().iter() {
            let after = out.checkpoint.params.get(name).unwrap();
            if is_latent_branch_param(name) || !is_decoder_param(name) {
                assert_eq!(after, tensor, "{name} moved");
            }
        }
        assert_ne!(
            out.checkpoint.params.get(DEC_OUT_W).unwrap(),
            init.get(DEC_OUT_W).unwrap()
        );
        assert!(out.checkpoint.params.names().all(|n| !is_bypass_param(n)));
        assert!(out.checkpoint.params.contains(DEC_Y_W) && out.checkpoint.params.contains(DEC_Y_B));
        assert_eq!(out.checkpoint.steps, 4 * 2 * 2);
        assert_eq!(out.checkpoint.epoch, 4);
        assert_eq!(out.history.len(), 4);
    }

    #[test]
    fn finetune_contracts() {
        let v = tiny_cfg();
        let t = tcfg();
        let data = corpus(3);
        let pre = pretrain_decoder(&data, &v, &t, 1).unwrap().checkpoint;
        let tuned = finetune(&data, &pre, &v, &t, 1).unwrap().checkpoint;
        assert_eq!(tuned.steps, pre.steps + 3 * 2);
        assert!(tuned
            .params
            .names()
            .filter(|n| is_decoder_param(n))
            .any(|n| tuned.params.get(n) != pre.params.get(n)));

        let fixed = VaeveConfig {
            fix_decoder: true,
            ..v.clone()
        };
        let pre_fixed = pretrain_decoder(&data, &fixed, &t, 1).unwrap().checkpoint;
        let tuned_fixed = finetune(&data, &pre_fixed, &fixed, &t, 1)
            .unwrap()
            .checkpoint;
        for (name, before) in pre_fixed.params.iter().filter(|(n, _)| is_decoder_param(n)) {
            let after = tuned_fixed.params.get(name).unwrap();
            assert!(
                before
                    .data()
                    .iter()
                    .zip(after.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} changed"
            );
        }
        assert!(tuned_fixed
            .params
            .names()
            .filter(|n| !is_decoder_param(n))
            .any(|n| tuned_fixed.params.get(n) != pre_fixed.params.get(n)));

        let err = finetune(&data, &pre, &fixed, &t, 1).unwrap_err();
        assert!(matches!(err, Error::Fingerprint { .. }));
    }

    #[test]
    fn deterministic_and_empty_rejected() {
        let (v, t) = (tiny_cfg(), tcfg());
        let data = corpus(3);
        let a = pretrain_decoder(&data, &v, &t, 5)
            .unwrap()
            .checkpoint
            .to_bytes();
        let b = pretrain_decoder(&data, &v, &t, 5)
            .unwrap()
            .checkpoint
            .to_bytes();
        assert_eq!(a, b);
        assert!(pretrain_decoder(&[], &v, &t, 5).is_err());
    }
}
