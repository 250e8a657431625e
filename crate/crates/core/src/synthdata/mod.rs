//! Synthetic corpora with known phoneme content and known per-utterance
//! variability factors.
//!
//! Generator `synth-v1`, fixed so that probe targets stay stable:
//!
//! * Tables from stream 0 of the spec seed: a phoneme embedding
//!   `E ∈ R^{P×F}` with `N(0, 1)` entries, `V` distortion matrices
//!   `A_k ∈ R^{F×F}` with `N(0, 1.5²/F)` entries, and an offset map
//!   `W ∈ R^{F×V}` with `N(0, 1)` entries.
//! * Utterance `i` draws everything else from stream `i + 1`: its length
//!   `T ~ U{T̄−spread, …, T̄+spread}`, its factors `v ~ factor_scale · U[−1, 1]^V`
//!   and its phoneme walk.
//! * Phonemes follow a Markov chain that stays put with probability 0.8 and
//!   otherwise jumps uniformly to another phoneme. After each emitted frame
//!   the same frame is repeated with probability `0.25 (1 + v₁)`, clamped to
//!   `[0, 0.9]`, which stretches runs for large `v₁` (a tempo analogue).
//! * With `drift > 0` the frame factor performs a random walk
//!   `v_t = clamp(v_{t−1} + drift · N(0, I), −1, 1)` starting from `v`.
//! * `o_t = E[c_t] + M(v_t) E[c_t] + W v_t + noise_std · N(0, I)` with
//!   `M(v) = Σ_k v_k A_k`, rounded to `f32` so the on-disk form is exact.

mod io;

pub use io::{
    decode_features, decode_labels, encode_features, encode_labels, read_corpus, read_features,
    write_corpus, write_features, Manifest, ManifestEntry, FEATURE_MAGIC, LABEL_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "synth-v1";

const SELF_LOOP: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub phonemes: usize,
    pub mean_len: usize,
    pub len_spread: usize,
    pub feature_dim: usize,
    pub factor_dim: usize,
    /// Step size of the within-utterance factor random walk.
    pub drift: f64,
    pub noise_std: f64,
    /// Half-width of the factor cube; 0 fixes every factor at 0.
    pub factor_scale: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            utterances: 200,
            phonemes: 8,
            mean_len: 50,
            len_spread: 10,
            feature_dim: 16,
            factor_dim: 2,
            drift: 0.0,
            noise_std: 0.7,
            factor_scale: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("utterances", self.utterances),
            ("phonemes", self.phonemes),
            ("mean_len", self.mean_len),
            ("feature_dim", self.feature_dim),
            ("factor_dim", self.factor_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("corpus {name} must be at least 1")));
            }
        }
        if self.len_spread >= self.mean_len {
            return Err(Error::Config(format!(
                "len_spread {} must be below mean_len {}",
                self.len_spread, self.mean_len
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("drift", self.drift),
            ("factor_scale", self.factor_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "corpus {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × F`.
    pub features: Tensor,
    pub phonemes: Vec<usize>,
    /// Utterance-level factors; `None` for blind corpora.
    pub truth: Option<Vec<f64>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.phonemes.len()
    }

    pub fn validate(&self, phoneme_count: usize) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(Error::Invalid(format!(
                "utterance `{}` has no frames",
                self.id
            )));
        }
        if self.features.rows() != self.phonemes.len() {
            return Err(Error::dim(
                format!("label count of `{}`", self.id),
                self.features.rows(),
                self.phonemes.len(),
            ));
        }
        if !self.features.all_finite() {
            return Err(Error::Numerical(format!(
                "utterance `{}` has non-finite features",
                self.id
            )));
        }
        if let Some((frame, &label)) = self
            .phonemes
            .iter()
            .enumerate()
            .find(|(_, &p)| p >= phoneme_count)
        {
            return Err(Error::LabelOutOfRange {
                frame,
                label,
                count: phoneme_count,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub factors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: String,
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn from_corpus(corpus: &[Utterance]) -> Result<Self> {
        let records = corpus
            .iter()
            .map(|u| {
                Ok(TruthRecord {
                    id: u.id.clone(),
                    factors: u
                        .truth
                        .clone()
                        .ok_or_else(|| Error::MissingTruth(u.id.clone()))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            version: GENERATOR_VERSION.to_owned(),
            records,
        })
    }
}

struct Tables {
    embed: Vec<Vec<f64>>,
    distort: Vec<Vec<Vec<f64>>>,
    offset: Vec<Vec<f64>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn gaussian_rows(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, sd).expect("finite sd");
    (0..rows)
        .map(|_| (0..cols).map(|_| n.sample(rng)).collect())
        .collect()
}

impl Tables {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = stream(spec.seed, 0);
        let f = spec.feature_dim;
        let embed = gaussian_rows(spec.phonemes, f, 1.0, &mut rng);
        let distort = (0..spec.factor_dim)
            .map(|_| gaussian_rows(f, f, 1.5 / (f as f64).sqrt(), &mut rng))
            .collect();
        let offset = gaussian_rows(f, spec.factor_dim, 1.0, &mut rng);
        Self {
            embed,
            distort,
            offset,
        }
    }

    fn frame(&self, phone: usize, v: &[f64], out: &mut [f64]) {
        let e = &self.embed[phone];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = e[r];
            for (k, vk) in v.iter().enumerate() {
                let row = &self.distort[k][r];
                acc += vk * row.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                acc += self.offset[r][k] * vk;
            }
            *o = acc;
        }
    }
}

fn utterance(spec: &CorpusSpec, tables: &Tables, index: usize) -> Result<Utterance> {
    let mut rng = stream(spec.seed, index as u64 + 1);
    let lo = spec.mean_len - spec.len_spread;
    let t_len = rng.gen_range(lo..=spec.mean_len + spec.len_spread);
    let v: Vec<f64> = (0..spec.factor_dim)
        .map(|_| spec.factor_scale * rng.gen_range(-1.0..=1.0))
        .collect();
    let repeat = (0.25 * (1.0 + v[0])).clamp(0.0, 0.9);

    let mut phone = rng.gen_range(0..spec.phonemes);
    let mut phonemes = Vec::with_capacity(t_len);
    while phonemes.len() < t_len {
        phonemes.push(phone);
        if phonemes.len() < t_len && rng.gen_bool(repeat) {
            phonemes.push(phone);
        }
        if spec.phonemes > 1 && !rng.gen_bool(SELF_LOOP) {
            let jump = rng.gen_range(1..spec.phonemes);
            phone = (phone + jump) % spec.phonemes;
        }
    }

    let f = spec.feature_dim;
    let mut data = vec![0.0; t_len * f];
    let mut vt = v.clone();
    for (t, &p) in phonemes.iter().enumerate() {
        if spec.drift > 0.0 && t > 0 {
            for x in vt.iter_mut() {
                let step: f64 = StandardNormal.sample(&mut rng);
                *x = (*x + spec.drift * step).clamp(-1.0, 1.0);
            }
        }
        let row = &mut data[t * f..(t + 1) * f];
        tables.frame(p, &vt, row);
        for x in row.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x = (*x + spec.noise_std * n) as f32 as f64;
        }
    }
    Ok(Utterance {
        id: format!("utt{index:05}"),
        features: Tensor::matrix(t_len, f, data)?,
        phonemes,
        truth: Some(v),
    })
}

/// Generates the corpus described by `spec`. Utterances are independent and
/// generated in parallel; the result does not depend on the thread count.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<(Vec<Utterance>, GroundTruth)> {
    spec.validate()?;
    let tables = Tables::new(spec);
    let corpus = (0..spec.utterances)
        .into_par_iter()
        .map(|i| utterance(spec, &tables, i))
        .collect::<Result<Vec<_>>>()?;
    let truth = GroundTruth::from_corpus(&corpus)?;
    Ok((corpus, truth))
}

/// Quartile of `‖v‖` for every utterance, 0 = lowest, 3 = highest. Ties are
/// broken by corpus order.
pub fn variability_strata(corpus: &[Utterance]) -> Result<Vec<usize>> {
    let norms = corpus
        .iter()
        .map(|u| {
            let v = u
                .truth
                .as_ref()
                .ok_or_else(|| Error::MissingTruth(u.id.clone()))?;
            Ok(v.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut strata = vec![0; corpus.len()];
    for (rank, &i) in order.iter().enumerate() {
        strata[i] = rank * 4 / corpus.len();
    }
    Ok(strata)
}

/// SHA-256 over ids, labels, feature bits and truth of every utterance.
pub fn corpus_fingerprint(corpus: &[Utterance]) -> String {
    let mut h = Sha256::new();
    for u in corpus {
        h.update((u.id.len() as u64).to_le_bytes());
        h.update(u.id.as_bytes());
        h.update((u.features.rows() as u64).to_le_bytes());
        h.update((u.features.cols() as u64).to_le_bytes());
        for v in u.features.data() {
            h.update(v.to_le_bytes());
        }
        for &p in &u.phonemes {
            h.update((p as u64).to_le_bytes());
        }
        match &u.truth {
            Some(t) => {
                h.update([1u8]);
                t.iter().for_each(|v| h.update(v.to_le_bytes()));
            }
            None => h.update([0u8]),
        }
    }
    hex::encode(h.finalize())
}

/// Disjoint train/test partition by utterance id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Seeded shuffle of ids, the first `test_fraction` of which go to test.
    pub fn random(corpus: &[Utterance], test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        use rand::seq::SliceRandom;
        let mut ids: Vec<String> = corpus.iter().map(|u| u.id.clone()).collect();
        ids.shuffle(&mut stream(seed, 0x5eed));
        let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
        let train = ids.split_off(n_test);
        let mut split = Self { train, test: ids };
        split.train.sort();
        split.test.sort();
        Ok(split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: std::collections::BTreeSet<&str> =
            self.train.iter().map(String::as_str).collect();
        match self.test.iter().find(|id| train.contains(id.as_str())) {
            Some(id) => Err(Error::SplitOverlap(id.clone())),
            None => Ok(()),
        }
    }

    /// Selects utterances by id, in the order listed.
    pub fn select<'a>(corpus: &'a [Utterance], ids: &[String]) -> Result<Vec<&'a Utterance>> {
        let index: std::collections::HashMap<&str, &Utterance> =
            corpus.iter().map(|u| (u.id.as_str(), u)).collect();
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Invalid(format!("split references unknown utterance `{id}`"))
                })
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, ids) in [("train", &self.train), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for id in ids {
                h.update((id.len() as u64).to_le_bytes());
                h.update(id.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
