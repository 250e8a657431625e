//! Read-only measurements of what a trained encoder has captured.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synthdata::{Split, Utterance};
use crate::vaeve::{decode, encode, kl_divergence, VaeveConfig, VaeveParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub ridge_lambda: f64,
    pub leakage_steps: usize,
    pub leakage_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: 1e-2,
            leakage_steps: 200,
            leakage_lr: 0.1,
        }
    }
}

/// `y ≈ x W + b`, with `W` of shape `K × V`.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weights;
        for mut row in y.row_iter_mut() {
            row += self.intercept.transpose();
        }
        y
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn centered(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Closed-form ridge regression with an unpenalised intercept.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeModel> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::dim("ridge rows", x.nrows(), y.nrows()));
    }
    if x.nrows() == 0 {
        return Err(Error::Invalid("ridge fit needs at least one row".into()));
    }
    let (xm, ym) = (column_means(x), column_means(y));
    let (xc, yc) = (centered(x, &xm), centered(y, &ym));
    let mut gram = xc.transpose() * &xc;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * &yc;
    let weights = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?
        .solve(&rhs);
    let intercept = &ym - weights.transpose() * &xm;
    Ok(RidgeModel { weights, intercept })
}

/// Coefficient of determination per target column.
pub fn r_squared(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    let mean = column_means(truth);
    (0..truth.ncols())
        .map(|j| {
            let (mut res, mut tot) = (0.0, 0.0);
            for i in 0..truth.nrows() {
                res += (truth[(i, j)] - pred[(i, j)]).powi(2);
                tot += (truth[(i, j)] - mean[j]).powi(2);
            }
            if tot == 0.0 {
                if res == 0.0 {
                    1.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                1.0 - res / tot
            }
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

fn mean_row(t: &Tensor) -> Vec<f64> {
    t.column_means()
}

fn truth_of(u: &Utterance) -> Result<Vec<f64>> {
    u.truth
        .clone()
        .ok_or_else(|| Error::MissingTruth(u.id.clone()))
}

/// Fits on `train` rows, scores on `test` rows.
pub fn heldout_r2(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
    lambda: f64,
) -> Result<Vec<f64>> {
    let model = fit_ridge(&to_matrix(train_x), &to_matrix(train_y), lambda)?;
    Ok(r_squared(
        &model.predict(&to_matrix(test_x)),
        &to_matrix(test_y),
    ))
}

fn utterance_means<F>(utts: &[&Utterance], f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Utterance) -> Result<Tensor> + Sync,
{
    utts.par_iter()
        .map(|u| f(u).map(|t| mean_row(&t)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityProbe {
    pub r2: Vec<f64>,
    pub mean_r2: f64,
}

impl VariabilityProbe {
    fn from_scores(r2: Vec<f64>) -> Self {
        let mean_r2 = r2.iter().sum::<f64>() / r2.len().max(1) as f64;
        Self { r2, mean_r2 }
    }
}

fn split_sets<'a>(
    corpus: &'a [Utterance],
    split: &Split,
) -> Result<(Vec<&'a Utterance>, Vec<&'a Utterance>)> {
    split.check_disjoint()?;
    Ok((
        Split::select(corpus, &split.train)?,
        Split::select(corpus, &split.test)?,
    ))
}

/// Ridge from utterance-mean posterior means to the true factors.
pub fn variability_probe(
    cfg: &VaeveConfig,
    params: &VaeveParams,
    corpus: &[Utterance],
    split: &Split,
    lambda: f64,
) -> Result<VariabilityProbe> {
    let (train, test) = split_sets(corpus, split)?;
    let ys = |set: &[&Utterance]| set.iter().map(|u| truth_of(u)).collect::<Result<Vec<_>>>();
    let (train_y, test_y) = (ys(&train)?, ys(&test)?);
    let enc = |u: &Utterance| encode(&u.features, cfg, params).map(|e| e.mu);
    let train_x = utterance_means(&train, enc)?;
    let test_x = utterance_means(&test, enc)?;
    Ok(VariabilityProbe::from_scores(heldout_r2(
        &train_x, &train_y, &test_x, &test_y, lambda,
    )?))
}

/// The same probe on raw utterance-mean features: the ceiling a linear
/// read-out of the acoustic input achieves.
pub fn raw_variability_probe(
    corpus: &[Utterance],
    split: &Split,
    lambda: f64,
) -> Result<VariabilityProbe> {
    let (train, test) = split_sets(corpus, split)?;
    let ys = |set: &[&Utterance]| set.iter().map(|u| truth_of(u)).collect::<Result<Vec<_>>>();
    let xs = |set: &[&Utterance]| {
        set.iter()
            .map(|u| mean_row(&u.features))
            .collect::<Vec<_>>()
    };
    Ok(VariabilityProbe::from_scores(heldout_r2(
        &xs(&train),
        &ys(&train)?,
        &xs(&test),
        &ys(&test)?,
        lambda,
    )?))
}

/// Multinomial logistic regression on standardised inputs, trained by
/// full-batch gradient descent. Returns held-out accuracy.
pub fn softmax_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Invalid(
            "leakage probe needs train and test frames".into(),
        ));
    }
    let k = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..k)
        .map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..k)
        .map(|j| {
            let var = train_x
                .iter()
                .map(|r| (r[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardise = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean[j]) / std[j])
                    .collect()
            })
            .collect()
    };
    let (xs, xt) = (standardise(train_x), standardise(test_x));

    // weights[c] = [w_c0 … w_c(k−1), b_c]
    let mut w = vec![vec![0.0; k + 1]; classes];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[k] + wc[..k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; k + 1]; classes];
        for (x, &y) in xs.iter().zip(train_y) {
            let l = logits(&w, x);
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / z - if c == y { 1.0 } else { 0.0 };
                for j in 0..k {
                    grad[c][j] += d * x[j];
                }
                grad[c][k] += d;
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= lr * g / n;
            }
        }
    }
    let correct = xt
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let l = logits(&w, x);
            // first maximal index, so ties resolve deterministically
            let best = (0..classes).fold(0, |b, c| if l[c] > l[b] { c } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / test_x.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageProbe {
    pub latent_accuracy: f64,
    pub raw_accuracy: f64,
}

fn frames(
    set: &[&Utterance],
    f: impl Fn(&Utterance) -> Result<Tensor> + Sync,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let per: Vec<Tensor> = set.par_iter().map(|u| f(u)).collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (u, t) in set.iter().zip(&per) {
        for r in 0..t.rows() {
            xs.push(t.row(r).to_vec());
            ys.push(u.phonemes[r]);
        }
    }
    Ok((xs, ys))
}

/// Frame-level phoneme accuracy from posterior means and from raw frames.
pub fn leakage_probe(
    cfg: &VaeveConfig,
    params: &VaeveParams,
    corpus: &[Utterance],
    split: &Split,
    probe: &ProbeConfig,
) -> Result<LeakageProbe> {
    let (train, test) = split_sets(corpus, split)?;
    let enc = |u: &Utterance| encode(&u.features, cfg, params).map(|e| e.mu);
    let raw = |u: &Utterance| Ok(u.features.clone());
    let p = cfg.phoneme_count;
    let (zx, zy) = frames(&train, enc)?;
    let (zxt, zyt) = frames(&test, enc)?;
    let (rx, ry) = frames(&train, raw)?;
    let (rxt, ryt) = frames(&test, raw)?;
    Ok(LeakageProbe {
        latent_accuracy: softmax_probe(
            &zx,
            &zy,
            &zxt,
            &zyt,
            p,
            probe.leakage_steps,
            probe.leakage_lr,
        )?,
        raw_accuracy: softmax_probe(
            &rx,
            &ry,
            &rxt,
            &ryt,
            p,
            probe.leakage_steps,
            probe.leakage_lr,
        )?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    /// Mean squared error per feature element.
    pub mse: f64,
    pub kl_per_frame: f64,
    /// Per-element variance of the evaluated features, for scale.
    pub feature_variance: f64,
}

/// Reconstruction along the mean path (`z = μ`), over `utts`.
pub fn recon_report(
    cfg: &VaeveConfig,
    params: &VaeveParams,
    utts: &[&Utterance],
) -> Result<ReconReport> {
    let per: Vec<(f64, f64, usize)> = utts
        .par_iter()
        .map(|u| {
            let e = encode(&u.features, cfg, params)?;
            let out = decode(&u.phonemes, &e.mu, cfg, params)?;
            let sq: f64 = out
                .data()
                .iter()
                .zip(u.features.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let kl: f64 = (0..e.frames())
                .map(|t| kl_divergence(e.mu.row(t), e.sd.row(t)))
                .sum();
            Ok((sq, kl, u.frames()))
        })
        .collect::<Result<_>>()?;
    let frames: usize = per.iter().map(|p| p.2).sum();
    if frames == 0 {
        return Err(Error::Invalid(
            "reconstruction report over an empty set".into(),
        ));
    }
    let f = cfg.feature_dim as f64;
    Ok(ReconReport {
        mse: per.iter().map(|p| p.0).sum::<f64>() / (frames as f64 * f),
        kl_per_frame: per.iter().map(|p| p.1).sum::<f64>() / frames as f64,
        feature_variance: feature_variance(utts),
    })
}

/// Mean over feature columns of the per-column variance across all frames.
pub fn feature_variance(utts: &[&Utterance]) -> f64 {
    let Some(first) = utts.first() else {
        return 0.0;
    };
    let f = first.features.cols();
    let (mut sum, mut sq, mut n) = (vec![0.0; f], vec![0.0; f], 0.0);
    for u in utts {
        for t in 0..u.features.rows() {
            for (j, v) in u.features.row(t).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    (0..f)
        .map(|j| sq[j] / n - (sum[j] / n).powi(2))
        .sum::<f64>()
        / f as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variability: VariabilityProbe,
    pub raw_variability: VariabilityProbe,
    pub leakage: LeakageProbe,
    pub reconstruction: ReconReport,
    pub model_fingerprint: String,
    pub corpus_fingerprint: String,
    pub split_hash: String,
}

pub fn probe_suite(
    cfg: &VaeveConfig,
    params: &VaeveParams,
    corpus: &[Utterance],
    split: &Split,
    probe: &ProbeConfig,
    model_fingerprint: String,
    corpus_fingerprint: String,
) -> Result<ProbeReport> {
    let test = Split::select(corpus, &split.test)?;
    Ok(ProbeReport {
        variability: variability_probe(cfg, params, corpus, split, probe.ridge_lambda)?,
        raw_variability: raw_variability_probe(corpus, split, probe.ridge_lambda)?,
        leakage: leakage_probe(cfg, params, corpus, split, probe)?,
        reconstruction: recon_report(cfg, params, &test)?,
        model_fingerprint,
        corpus_fingerprint,
        split_hash: split.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn exact_linear_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(60, 4, &mut rng);
        let w = gaussian(4, 2, &mut rng);
        let mut y = &x * &w;
        for mut r in y.row_iter_mut() {
            r[0] += 0.5;
            r[1] -= 2.0;
        }
        let m = fit_ridge(&x, &y, 1e-8).unwrap();
        assert!((m.weights - w).abs().max() < 1e-6);
        assert!((m.intercept[0] - 0.5).abs() < 1e-6 && (m.intercept[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn independent_noise_has_no_skill() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xa, ya) = (gaussian(500, 3, &mut rng), gaussian(500, 2, &mut rng));
        let (xb, yb) = (gaussian(500, 3, &mut rng), gaussian(500, 2, &mut rng));
        let m = fit_ridge(&xa, &ya, 1e-2).unwrap();
        for r2 in r_squared(&m.predict(&xb), &yb) {
            assert!(r2.abs() < 0.1, "{r2}");
        }
    }

    #[test]
    fn huge_lambda_predicts_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (gaussian(40, 3, &mut rng), gaussian(40, 1, &mut rng));
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        assert!(m.weights.abs().max() < 1e-9);
        assert!((m.intercept[0] - y.mean()).abs() < 1e-9);
        assert!(fit_ridge(&x, &y, 0.0).is_err());
        assert!(fit_ridge(&x, &y, -1.0).is_err());
    }

    #[test]
    fn constant_input_gives_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 4;
        let labels: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..p)).collect();
        let x = vec![vec![0.3, -1.0]; 2000];
        let acc = softmax_probe(
            &x[..1000],
            &labels[..1000],
            &x[1000..],
            &labels[1000..],
            p,
            200,
            0.1,
        )
        .unwrap();
        // always the same class; binomial sd at n = 1000 is about 0.014
        assert!((acc - 0.25).abs() < 0.06, "{acc}");
    }

    #[test]
    fn separable_input_is_learnt() {
        let x: Vec<Vec<f64>> = (0..300).map(|i| vec![(i % 3) as f64, 1.0]).collect();
        let y: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let acc = softmax_probe(&x, &y, &x, &y, 3, 200, 0.5).unwrap();
        assert!(acc > 0.9, "{acc}");
    }
}
