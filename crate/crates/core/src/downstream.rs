//! Frame classifier standing in for the acoustic model, and the protocol for
//! retraining it with latent encodings appended to its input.
//!
//! Input rows are `[o_{t−τ}, …, o_{t+τ}, z_t]`. The spliced acoustic part is
//! standardised with statistics from the baseline training data, then fed
//! through `cls.in.old.w`; the latent part goes through `cls.in.new.w`, a
//! block that only exists after retraining and starts at zero.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{variability_strata, Split, Utterance};
use crate::training::{
    clip_global_norm, fingerprint, lr_at, Checkpoint, Fingerprint, OptimizerState, RmsProp,
    RngState,
};
use crate::vaeve::params::uniform_matrix;
use crate::vaeve::{context_frames, encode, encode_mean, EncoderOutput, VaeveConfig, VaeveParams};

pub const NORM_MEAN: &str = "cls.norm.mean";
pub const NORM_STD: &str = "cls.norm.std";
pub const IN_OLD_W: &str = "cls.in.old.w";
pub const IN_NEW_W: &str = "cls.in.new.w";
pub const IN_B: &str = "cls.in.b";
pub const H2_W: &str = "cls.h2.w";
pub const H2_B: &str = "cls.h2.b";
pub const OUT_W: &str = "cls.out.w";
pub const OUT_B: &str = "cls.out.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub context_radius: usize,
    pub base_lr: f64,
    pub constant_epochs: usize,
    pub epochs: usize,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            context_radius: 4,
            base_lr: 1e-3,
            constant_epochs: 4,
            epochs: 8,
            rho: 0.9,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "classifier hidden width and epochs must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0)
            || !(0.0..1.0).contains(&self.rho)
            || !(self.eps > 0.0)
            || !(self.clip_norm > 0.0)
        {
            return Err(Error::Config(
                "classifier optimiser settings out of range".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate of the last baseline epoch.
    pub fn final_lr(&self) -> f64 {
        lr_at(self.epochs - 1, self.base_lr, self.constant_epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Learning rate of the pre-existing weights; `None` continues from the
    /// baseline's final learning rate.
    pub old_lr: Option<f64>,
    pub new_lr_multiplier: f64,
    pub epochs: usize,
    pub constant_epochs: usize,
    pub context_radius: usize,
    pub freeze_normalization: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            old_lr: None,
            new_lr_multiplier: 100.0,
            epochs: 4,
            constant_epochs: 4,
            context_radius: 4,
            freeze_normalization: true,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.new_lr_multiplier > 0.0 && self.new_lr_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "new_lr_multiplier must be positive, got {}",
                self.new_lr_multiplier
            )));
        }
        if let Some(lr) = self.old_lr {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("old_lr must be positive, got {lr}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("retrain epochs must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for parameter `name` in retraining epoch `epoch`.
    pub fn lr_for(&self, cls: &ClassifierConfig, epoch: usize, name: &str) -> f64 {
        let base = lr_at(
            epoch,
            self.old_lr.unwrap_or_else(|| cls.final_lr()),
            self.constant_epochs,
        );
        if name == IN_NEW_W {
            base * self.new_lr_multiplier
        } else {
            base
        }
    }
}

/// Row `t` = `[o_{t−τ}, …, o_{t+τ}, z_t]`, edges replicated.
pub fn concat_features(features: &Tensor, z: &Tensor, radius: usize) -> Result<Tensor> {
    if z.rows() != features.rows() {
        return Err(Error::Shape {
            op: "concat_features",
            left: features.shape().to_vec(),
            right: z.shape().to_vec(),
        });
    }
    let rows: Vec<Vec<f64>> = context_frames(features, radius)
        .into_iter()
        .enumerate()
        .map(|(t, mut r)| {
            r.extend_from_slice(z.row(t));
            r
        })
        .collect();
    Tensor::matrix(
        features.rows(),
        rows.first().map_or(0, Vec::len),
        rows.concat(),
    )
}

pub fn classifier_fingerprint(cls: &ClassifierConfig) -> Fingerprint {
    fingerprint("vaeve/classifier", &[cls])
}

pub fn retrain_fingerprint(
    cls: &ClassifierConfig,
    rcfg: &RetrainConfig,
    vcfg: &VaeveConfig,
    vaeve_fingerprint: &Fingerprint,
) -> Fingerprint {
    fingerprint(
        "vaeve/retrain",
        &[
            &serde_json::to_value(cls).unwrap(),
            &serde_json::to_value(rcfg).unwrap(),
            &serde_json::to_value(vcfg).unwrap(),
            &serde_json::Value::String(hex::encode(vaeve_fingerprint)),
        ],
    )
}

/// Frame classifier weights plus the splicing radius they assume.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub params: ParamSet,
    pub context_radius: usize,
}

fn standardisation(utts: &[&Utterance], radius: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut n = 0.0;
    for u in utts {
        for row in context_frames(&u.features, radius) {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            }
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = q / n - m * m;
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Classifier {
    pub fn init(
        cfg: &ClassifierConfig,
        feature_dim: usize,
        phonemes: usize,
        norm: (Vec<f64>, Vec<f64>),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = (2 * cfg.context_radius + 1) * feature_dim;
        let h = cfg.hidden;
        let mut params = ParamSet::new();
        params.insert(NORM_MEAN, Tensor::vector(norm.0));
        params.insert(NORM_STD, Tensor::vector(norm.1));
        params.insert(IN_OLD_W, uniform_matrix(h, k, rng));
        params.insert(IN_B, Tensor::zeros(&[h]));
        params.insert(H2_W, uniform_matrix(h, h, rng));
        params.insert(H2_B, Tensor::zeros(&[h]));
        params.insert(OUT_W, uniform_matrix(phonemes, h, rng));
        params.insert(OUT_B, Tensor::zeros(&[phonemes]));
        Self {
            params,
            context_radius: cfg.context_radius,
        }
    }

    /// Validates tensor shapes against each other and the configuration.
    pub fn from_params(params: ParamSet, cfg: &ClassifierConfig) -> Result<Self> {
        let k = params.require(NORM_MEAN)?.len();
        let h = cfg.hidden;
        let old = params.require(IN_OLD_W)?;
        if old.shape() != [h, k] {
            return Err(Error::Shape {
                op: "classifier",
                left: vec![h, k],
                right: old.shape().to_vec(),
            });
        }
        if k % (2 * cfg.context_radius + 1) != 0 {
            return Err(Error::Invalid(format!(
                "input width {k} is not a multiple of the {}-frame splice",
                2 * cfg.context_radius + 1
            )));
        }
        for (name, shape) in [
            (NORM_STD, vec![k]),
            (IN_B, vec![h]),
            (H2_W, vec![h, h]),
            (H2_B, vec![h]),
        ] {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "classifier",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
        }
        let out = params.require(OUT_W)?;
        if out.cols() != h || params.require(OUT_B)?.len() != out.rows() {
            return Err(Error::Invalid(
                "classifier readout shapes are inconsistent".into(),
            ));
        }
        if let Some(new) = params.get(IN_NEW_W) {
            if new.rows() != h {
                return Err(Error::dim("rows of the latent input block", h, new.rows()));
            }
        }
        Ok(Self {
            params,
            context_radius: cfg.context_radius,
        })
    }

    pub fn input_width(&self) -> usize {
        self.params.get(NORM_MEAN).map_or(0, Tensor::len)
    }

    pub fn feature_dim(&self) -> usize {
        self.input_width() / (2 * self.context_radius + 1)
    }

    /// Columns of the latent input block, 0 for a baseline classifier.
    pub fn latent_dim(&self) -> usize {
        self.params.get(IN_NEW_W).map_or(0, Tensor::cols)
    }

    pub fn phonemes(&self) -> usize {
        self.params.get(OUT_B).map_or(0, Tensor::len)
    }

    /// Adds a zero latent block of `latent_dim` columns.
    pub fn widen(&mut self, latent_dim: usize) -> Result<()> {
        match self.latent_dim() {
            0 => {
                let h = self.params.require(IN_B)?.len();
                self.params
                    .insert(IN_NEW_W, Tensor::zeros(&[h, latent_dim]));
                Ok(())
            }
            d if d == latent_dim => Ok(()),
            d => Err(Error::dim("latent input block", d, latent_dim)),
        }
    }

    fn standardised(&self, row: &[f64]) -> Vec<f64> {
        let mean = self.params.get(NORM_MEAN).unwrap().data();
        let std = self.params.get(NORM_STD).unwrap().data();
        row.iter()
            .zip(mean)
            .zip(std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn check_inputs(&self, utt: &Utterance, z: Option<&Tensor>) -> Result<()> {
        if utt.features.cols() != self.feature_dim() {
            return Err(Error::dim(
                format!("feature dim of `{}` against the classifier", utt.id),
                self.feature_dim(),
                utt.features.cols(),
            ));
        }
        match (z, self.latent_dim()) {
            (None, 0) => Ok(()),
            (None, d) => Err(Error::dim("latent input (no encoder supplied)", d, 0)),
            (Some(z), d) => {
                if z.cols() != d {
                    Err(Error::dim("latent input block", d, z.cols()))
                } else if z.rows() != utt.frames() {
                    Err(Error::dim("latent frames", utt.frames(), z.rows()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Builds the per-frame logits for one utterance.
    fn logits_graph(
        &self,
        g: &mut Graph,
        utt: &Utterance,
        z: Option<&Tensor>,
    ) -> Result<Vec<NodeId>> {
        self.check_inputs(utt, z)?;
        let p = &self.params;
        let w_old = g.param(IN_OLD_W, p.require(IN_OLD_W)?);
        let w_new = match z {
            Some(_) => Some(g.param(IN_NEW_W, p.require(IN_NEW_W)?)),
            None => None,
        };
        let b1 = g.param(IN_B, p.require(IN_B)?);
        let w2 = g.param(H2_W, p.require(H2_W)?);
        let b2 = g.param(H2_B, p.require(H2_B)?);
        let w3 = g.param(OUT_W, p.require(OUT_W)?);
        let b3 = g.param(OUT_B, p.require(OUT_B)?);
        context_frames(&utt.features, self.context_radius)
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let x = g.constant(Tensor::vector(self.standardised(row)));
                let mut a = g.matvec(w_old, x)?;
                if let (Some(w_new), Some(z)) = (w_new, z) {
                    let zt = g.constant(Tensor::vector(z.row(t).to_vec()));
                    let b = g.matvec(w_new, zt)?;
                    a = g.add(a, b)?;
                }
                let a = g.add(a, b1)?;
                let h1 = g.relu(a);
                let a2 = g.matvec(w2, h1)?;
                let a2 = g.add(a2, b2)?;
                let h2 = g.relu(a2);
                let o = g.matvec(w3, h2)?;
                g.add(o, b3)
            })
            .collect()
    }

    /// Frame logits, `T × P`.
    pub fn logits(&self, utt: &Utterance, z: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.logits_graph(&mut g, utt, z)?;
        let rows: Vec<Vec<f64>> = nodes.iter().map(|&n| g.value(n).data().to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn predict(&self, utt: &Utterance, z: Option<&Tensor>) -> Result<Vec<usize>> {
        let l = self.logits(utt, z)?;
        Ok((0..l.rows())
            .map(|t| {
                let r = l.row(t);
                (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b })
            })
            .collect())
    }

    /// Mean frame cross-entropy of one utterance.
    fn loss_graph(&self, g: &mut Graph, utt: &Utterance, z: Option<&Tensor>) -> Result<NodeId> {
        let logits = self.logits_graph(g, utt, z)?;
        let mut total: Option<NodeId> = None;
        for (&l, &label) in logits.iter().zip(&utt.phonemes) {
            let x = g.softmax_xent(l, label)?;
            total = Some(match total {
                Some(acc) => g.add(acc, x)?,
                None => x,
            });
        }
        let total =
            total.ok_or_else(|| Error::Invalid(format!("utterance `{}` has no frames", utt.id)))?;
        Ok(g.scale(total, 1.0 / utt.frames() as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub classifier: Classifier,
    pub checkpoint: Checkpoint,
    pub history: Vec<ClassifierEpoch>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const FROZEN: [&str; 2] = [NORM_MEAN, NORM_STD];

/// Cross-entropy training on spliced acoustic frames only.
pub fn train_baseline(
    corpus: &[&Utterance],
    cfg: &ClassifierConfig,
    phonemes: usize,
    seed: u64,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Invalid("classifier corpus is empty".into()))?;
    let f = first.features.cols();
    for u in corpus {
        u.validate(phonemes)?;
        if u.features.cols() != f {
            return Err(Error::dim(
                format!("feature dim of `{}`", u.id),
                f,
                u.features.cols(),
            ));
        }
    }
    let norm = standardisation(corpus, cfg.context_radius);
    let mut classifier = Classifier::init(cfg, f, phonemes, norm, &mut stream(seed, 0));
    let mut opt = OptimizerState::for_params(&classifier.params);
    let optimizer = RmsProp {
        rho: cfg.rho,
        eps: cfg.eps,
    };
    let frozen: BTreeSet<String> = FROZEN.iter().map(|s| s.to_string()).collect();
    let trainable: Vec<String> = classifier
        .params
        .names()
        .filter(|n| !frozen.contains(*n))
        .map(str::to_owned)
        .collect();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, 100 + epoch as u64));
        let lr = lr_at(epoch, cfg.base_lr, cfg.constant_epochs);
        let mut sum = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let loss = classifier.loss_graph(&mut g, corpus[i], None)?;
            sum += finite(g.scalar(loss), &corpus[i].id)?;
            let mut grads = g.backward(loss)?;
            clip_global_norm(
                &mut grads,
                trainable.iter().map(String::as_str),
                cfg.clip_norm,
            );
            optimizer.step(&mut classifier.params, &grads, &mut opt, |_| lr, &frozen)?;
        }
        history.push(ClassifierEpoch {
            epoch,
            mean_loss: sum / corpus.len() as f64,
        });
    }
    let checkpoint = Checkpoint {
        fingerprint: classifier_fingerprint(cfg),
        params: classifier.params.clone(),
        optimizer: opt.accumulators,
        epoch: cfg.epochs as u64,
        steps: (cfg.epochs * corpus.len()) as u64,
        rng: RngState::default(),
    };
    Ok(ClassifierOutcome {
        classifier,
        checkpoint,
        history,
    })
}

fn finite(v: f64, id: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "non-finite classifier loss on `{id}`"
        )))
    }
}

/// One RMSProp update of a widened classifier under the retraining
/// learning rates: the latent block moves at `new_lr_multiplier` times the
/// rate of every other weight.
pub fn retrain_step(
    classifier: &mut Classifier,
    grads: &ParamSet,
    state: &mut OptimizerState,
    cls: &ClassifierConfig,
    rcfg: &RetrainConfig,
    epoch: usize,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    RmsProp {
        rho: cls.rho,
        eps: cls.eps,
    }
    .step(
        &mut classifier.params,
        grads,
        state,
        |n| rcfg.lr_for(cls, epoch, n),
        frozen,
    )
}

/// Widens a trained baseline by a zero latent block and retrains it with
/// latents sampled from the encoder posterior, one fresh draw per update.
#[allow(clippy::too_many_arguments)]
pub fn retrain_with_encodings(
    baseline: &Checkpoint,
    cls: &ClassifierConfig,
    vcfg: &VaeveConfig,
    vaeve: &VaeveParams,
    vaeve_fingerprint: &Fingerprint,
    corpus: &[&Utterance],
    rcfg: &RetrainConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    cls.validate()?;
    rcfg.validate()?;
    baseline.verify(&classifier_fingerprint(cls))?;
    if rcfg.context_radius != cls.context_radius {
        return Err(Error::dim(
            "retrain context radius",
            cls.context_radius,
            rcfg.context_radius,
        ));
    }
    let mut classifier = Classifier::from_params(baseline.params.clone(), cls)?;
    if classifier.feature_dim() != vcfg.feature_dim {
        return Err(Error::dim(
            "encoder feature dim against the classifier",
            classifier.feature_dim(),
            vcfg.feature_dim,
        ));
    }
    classifier.widen(vcfg.latent_dim)?;
    if corpus.is_empty() {
        return Err(Error::Invalid("retraining corpus is empty".into()));
    }
    if !rcfg.freeze_normalization {
        let (m, s) = standardisation(corpus, cls.context_radius);
        classifier.params.insert(NORM_MEAN, Tensor::vector(m));
        classifier.params.insert(NORM_STD, Tensor::vector(s));
    }
    let posterior: Vec<EncoderOutput> = corpus
        .par_iter()
        .map(|u| encode(&u.features, vcfg, vaeve))
        .collect::<Result<_>>()?;

    let mut opt = OptimizerState::for_params(&classifier.params);
    let frozen: BTreeSet<String> = FROZEN.iter().map(|s| s.to_string()).collect();
    let trainable: Vec<String> = classifier
        .params
        .names()
        .filter(|n| !frozen.contains(*n))
        .map(str::to_owned)
        .collect();
    let mut noise = stream(seed, 1);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..rcfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, 200 + epoch as u64));
        let mut sum = 0.0;
        for &i in &order {
            let post = &posterior[i];
            let eps_data = (0..post.mu.len())
                .map(|_| StandardNormal.sample(&mut noise))
                .collect();
            let eps = Tensor::new(post.mu.shape().to_vec(), eps_data)?;
            let z = crate::vaeve::sample_latent(post, &eps)?;
            let mut g = Graph::new();
            let loss = classifier.loss_graph(&mut g, corpus[i], Some(&z))?;
            sum += finite(g.scalar(loss), &corpus[i].id)?;
            let mut grads = g.backward(loss)?;
            clip_global_norm(
                &mut grads,
                trainable.iter().map(String::as_str),
                cls.clip_norm,
            );
            retrain_step(&mut classifier, &grads, &mut opt, cls, rcfg, epoch, &frozen)?;
        }
        history.push(ClassifierEpoch {
            epoch,
            mean_loss: sum / corpus.len() as f64,
        });
    }
    let checkpoint = Checkpoint {
        fingerprint: retrain_fingerprint(cls, rcfg, vcfg, vaeve_fingerprint),
        params: classifier.params.clone(),
        optimizer: opt.accumulators,
        epoch: rcfg.epochs as u64,
        steps: (rcfg.epochs * corpus.len()) as u64,
        rng: RngState::capture(&noise),
    };
    Ok(ClassifierOutcome {
        classifier,
        checkpoint,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FerReport {
    pub overall_fer: f64,
    /// Frame error per variability quartile of the test set, lowest first.
    /// Empty for corpora without ground truth.
    pub stratum_fer: Vec<f64>,
    pub stratum_frames: Vec<usize>,
    pub stratum_utterances: Vec<usize>,
    pub total_frames: usize,
    pub fingerprint: String,
}

impl FerReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Frame error on the test side of `split`, with posterior means as the
/// latent input whenever an encoder is supplied.
pub fn evaluate(
    classifier: &Classifier,
    vaeve: Option<(&VaeveConfig, &VaeveParams)>,
    corpus: &[Utterance],
    split: &Split,
    fingerprint: &Fingerprint,
) -> Result<FerReport> {
    split.check_disjoint()?;
    let test: Vec<&Utterance> = Split::select(corpus, &split.test)?;
    if test.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let errors: Vec<(usize, usize)> = test
        .par_iter()
        .map(|u| {
            let z = match vaeve {
                Some((cfg, params)) => {
                    if u.features.cols() != cfg.feature_dim {
                        return Err(Error::dim(
                            format!("feature dim of `{}` against the encoder", u.id),
                            cfg.feature_dim,
                            u.features.cols(),
                        ));
                    }
                    Some(encode_mean(&u.features, cfg, params)?)
                }
                None => None,
            };
            let pred = classifier.predict(u, z.as_ref())?;
            let wrong = pred.iter().zip(&u.phonemes).filter(|(a, b)| a != b).count();
            Ok((wrong, u.frames()))
        })
        .collect::<Result<_>>()?;
    let total_frames: usize = errors.iter().map(|e| e.1).sum();
    let total_errors: usize = errors.iter().map(|e| e.0).sum();
    let owned: Vec<Utterance> = test.iter().map(|u| (*u).clone()).collect();
    let (mut stratum_fer, mut stratum_frames, mut stratum_utterances) =
        (Vec::new(), Vec::new(), Vec::new());
    if owned.iter().all(|u| u.truth.is_some()) {
        let strata = variability_strata(&owned)?;
        for s in 0..4 {
            let (e, f, n) = errors
                .iter()
                .zip(&strata)
                .filter(|(_, &q)| q == s)
                .fold((0, 0, 0), |(e, f, n), ((we, wf), _)| {
                    (e + we, f + wf, n + 1)
                });
            stratum_fer.push(if f == 0 { 0.0 } else { e as f64 / f as f64 });
            stratum_frames.push(f);
            stratum_utterances.push(n);
        }
    }
    Ok(FerReport {
        overall_fer: total_errors as f64 / total_frames as f64,
        stratum_fer,
        stratum_frames,
        stratum_utterances,
        total_frames,
        fingerprint: hex::encode(fingerprint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_corpus, CorpusSpec};

    #[test]
    fn splice_shapes() {
        let o = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let z = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let row = concat_features(&o, &z, 1).unwrap();
        assert_eq!(row.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 3.0]);
        let r0 = concat_features(&o, &z, 0).unwrap();
        assert_eq!(r0.data(), &[0.5, -1.0, 3.0]);
        let wide = concat_features(&Tensor::zeros(&[3, 16]), &Tensor::zeros(&[3, 39]), 4).unwrap();
        assert_eq!(wide.cols(), 9 * 16 + 39);
        assert!(concat_features(&o, &Tensor::zeros(&[2, 1]), 1).is_err());
    }

    fn small_setup() -> (Vec<Utterance>, ClassifierConfig) {
        let spec = CorpusSpec {
            utterances: 8,
            mean_len: 10,
            len_spread: 2,
            feature_dim: 3,
            phonemes: 4,
            ..CorpusSpec::default()
        };
        let cfg = ClassifierConfig {
            hidden: 6,
            context_radius: 1,
            epochs: 2,
            ..ClassifierConfig::default()
        };
        (gen_corpus(&spec).unwrap().0, cfg)
    }

    #[test]
    fn widening_preserves_outputs_exactly() {
        let (corpus, cfg) = small_setup();
        let refs: Vec<&Utterance> = corpus.iter().collect();
        let base = train_baseline(&refs, &cfg, 4, 3).unwrap().classifier;
        let mut wide = base.clone();
        wide.widen(2).unwrap();
        for u in &corpus {
            let z = Tensor::filled(&[u.frames(), 2], 7.5);
            let a = base.logits(u, None).unwrap();
            let b = wide.logits(u, Some(&z)).unwrap();
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(wide.widen(3).is_err());
    }

    #[test]
    fn hundredfold_rate_by_hand() {
        let (corpus, cfg) = small_setup();
        let refs: Vec<&Utterance> = corpus.iter().collect();
        let mut c = train_baseline(&refs, &cfg, 4, 3).unwrap().classifier;
        c.widen(2).unwrap();
        let before = c.clone();
        let mut grads = c.params.zeros_like();
        grads
            .iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 1.0));
        let s0 = 0.3;
        let mut state = OptimizerState {
            accumulators: c.params.zeros_like(),
        };
        state
            .accumulators
            .iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = s0));
        let rcfg = RetrainConfig {
            old_lr: Some(1e-4),
            ..RetrainConfig::default()
        };
        let frozen: BTreeSet<String> = FROZEN.iter().map(|s| s.to_string()).collect();
        retrain_step(&mut c, &grads, &mut state, &cfg, &rcfg, 0, &frozen).unwrap();
        let denom = (cfg.rho * s0 + (1.0 - cfg.rho) + cfg.eps).sqrt();
        let delta = |name: &str| -> Vec<f64> {
            let a = before.params.get(name).unwrap().data();
            let b = c.params.get(name).unwrap().data();
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        for d in delta(IN_NEW_W) {
            assert!((d - 100.0 * 1e-4 / denom).abs() < 1e-10);
        }
        for d in delta(IN_OLD_W) {
            assert!((d - 1e-4 / denom).abs() < 1e-10);
        }
        assert!(delta(NORM_MEAN).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn perfect_classifier_and_strata_partition() {
        let (corpus, cfg) = small_setup();
        let refs: Vec<&Utterance> = corpus.iter().collect();
        let mut c = train_baseline(&refs, &cfg, 4, 3).unwrap().classifier;
        let split = Split {
            train: vec![],
            test: corpus.iter().map(|u| u.id.clone()).collect(),
        };
        let fp = [0u8; 32];
        let report = evaluate(&c, None, &corpus, &split, &fp).unwrap();
        assert_eq!(
            report.stratum_frames.iter().sum::<usize>(),
            report.total_frames
        );
        assert_eq!(
            report.stratum_utterances.iter().sum::<usize>(),
            corpus.len()
        );
        assert_eq!(
            report.to_json(),
            evaluate(&c, None, &corpus, &split, &fp).unwrap().to_json()
        );

        // force every prediction to class 0 and relabel the corpus to match
        c.params.insert(OUT_W, Tensor::zeros(&[4, cfg.hidden]));
        c.params
            .insert(OUT_B, Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let relabelled: Vec<Utterance> = corpus
            .iter()
            .map(|u| Utterance {
                phonemes: vec![0; u.frames()],
                ..u.clone()
            })
            .collect();
        assert_eq!(
            evaluate(&c, None, &relabelled, &split, &fp)
                .unwrap()
                .overall_fer,
            0.0
        );

        let overlap = Split {
            train: vec![corpus[0].id.clone()],
            test: vec![corpus[0].id.clone()],
        };
        assert!(matches!(
            evaluate(&c, None, &corpus, &overlap, &fp),
            Err(Error::SplitOverlap(_))
        ));
    }

    #[test]
    fn mismatched_feature_dim_is_named() {
        let (corpus, cfg) = small_setup();
        let refs: Vec<&Utterance> = corpus.iter().collect();
        let c = train_baseline(&refs, &cfg, 4, 3).unwrap().classifier;
        let u = Utterance {
            features: Tensor::zeros(&[5, 4]),
            phonemes: vec![0; 5],
            ..corpus[0].clone()
        };
        let msg = c.predict(&u, None).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn baseline_is_deterministic() {
        let (corpus, cfg) = small_setup();
        let refs: Vec<&Utterance> = corpus.iter().collect();
        let a = train_baseline(&refs, &cfg, 4, 9)
            .unwrap()
            .checkpoint
            .to_bytes();
        let b = train_baseline(&refs, &cfg, 4, 9)
            .unwrap()
            .checkpoint
            .to_bytes();
        assert_eq!(a, b);
    }
}
