//! The finite-difference battery behind `vaeve gradcheck`: one check per
//! graph primitive, one for an LSTM step and one for the full objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check_with, GradCheckReport, Graph, NodeId, ParamSet, Stencil, Tensor};
use crate::error::Result;
use crate::recurrent::{lstm_layer, LstmNodes, LstmParams};
use crate::vaeve::{elbo_graph, VaeveConfig, VaeveParams};

/// Bound every case must stay under.
pub const TOLERANCE: f64 = 1e-4;

const PRIMITIVE_STEP: f64 = 1e-5;
const ELBO_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct BatteryCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl BatteryCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values bounded away from zero, for kinks and logarithms.
fn away_from_zero(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n)
        .map(|i| {
            let v: f64 = StandardNormal.sample(rng);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.3 + v.abs())
        })
        .collect();
    Tensor::vector(data)
}

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Reduces a vector output to a scalar through fixed random weights so
/// every output coordinate contributes its own gradient.
fn probe_sum(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn primitive_case(
    name: &'static str,
    inputs: Vec<Tensor>,
    out_len: usize,
    build: Build,
    seed: u64,
) -> Result<BatteryCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = normal(&[out_len], &mut rng);
    let mut params = ParamSet::new();
    for (i, t) in inputs.into_iter().enumerate() {
        params.insert(format!("x{i}"), t);
    }
    let report = grad_check_with(&params, Stencil::Central(PRIMITIVE_STEP), |set| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = set.iter().map(|(n, t)| g.param(n, t)).collect();
        let out = build(&mut g, &ids)?;
        let loss = probe_sum(&mut g, out, &weights)?;
        Ok((g, loss))
    })?;
    Ok(BatteryCase { name, report })
}

fn lstm_case(seed: u64) -> Result<BatteryCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = LstmParams::init(3, 4, &mut rng);
    let mut params = ParamSet::new();
    layer.store("lstm", &mut params);
    let xs: Vec<Tensor> = (0..3).map(|_| normal(&[3], &mut rng)).collect();
    let weights = normal(&[4], &mut rng);
    let report = grad_check_with(&params, Stencil::Central(PRIMITIVE_STEP), |set| {
        let mut g = Graph::new();
        let nodes = LstmNodes::register(&mut g, "lstm", set)?;
        let inputs: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let hs = lstm_layer(&mut g, &nodes, &inputs)?;
        let last = *hs.last().expect("non-empty sequence");
        let loss = probe_sum(&mut g, last, &weights)?;
        Ok((g, loss))
    })?;
    Ok(BatteryCase {
        name: "lstm_layer",
        report,
    })
}

/// Objective on `T=5, F=4, D=2, P=3` with pooling and a delay switched on.
pub fn elbo_case(seed: u64) -> Result<BatteryCase> {
    let cfg = VaeveConfig {
        feature_dim: 4,
        latent_dim: 2,
        enc_cells: 5,
        dec_cells: 6,
        phoneme_count: 3,
        pool_radius: 1,
        delay: 1,
        ..VaeveConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = VaeveParams::init(&cfg, &mut rng);
    let x = normal(&[5, 4], &mut rng);
    let phones = [0, 2, 1, 1, 0];
    let noise = vec![normal(&[5, 2], &mut rng)];
    let report = grad_check_with(params.as_set(), Stencil::Richardson(ELBO_STEP), |set| {
        let p = VaeveParams::from_set(&cfg, set.clone())?;
        let mut g = Graph::new();
        let nodes = elbo_graph(&mut g, &cfg, &p, &x, &phones, &noise)?;
        Ok((g, nodes.total))
    })?;
    Ok(BatteryCase {
        name: "elbo",
        report,
    })
}

/// Every case, in a fixed order. Deterministic in `seed`.
pub fn run(seed: u64) -> Result<Vec<BatteryCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |shape: &[usize]| normal(shape, &mut rng);
    let (a, b, c) = (v(&[5]), v(&[5]), v(&[5]));
    let m = v(&[4, 5]);
    let logits = v(&[4]);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let kinked = away_from_zero(5, &mut rng2);
    let positive = Tensor::vector(kinked.data().iter().map(|x| x.abs()).collect());

    let cases: Vec<(&'static str, Vec<Tensor>, usize, Build)> = vec![
        ("matvec", vec![m.clone(), a.clone()], 4, |g, x| {
            g.matvec(x[0], x[1])
        }),
        ("add", vec![a.clone(), b.clone()], 5, |g, x| {
            g.add(x[0], x[1])
        }),
        ("sub", vec![a.clone(), b.clone()], 5, |g, x| {
            g.sub(x[0], x[1])
        }),
        ("mul", vec![a.clone(), b.clone()], 5, |g, x| {
            g.mul(x[0], x[1])
        }),
        ("sigmoid", vec![a.clone()], 5, |g, x| Ok(g.sigmoid(x[0]))),
        ("tanh", vec![a.clone()], 5, |g, x| Ok(g.tanh(x[0]))),
        ("exp", vec![a.clone()], 5, |g, x| Ok(g.exp(x[0]))),
        ("log", vec![positive.clone()], 5, |g, x| g.log(x[0])),
        ("relu", vec![kinked.clone()], 5, |g, x| Ok(g.relu(x[0]))),
        ("clamp", vec![kinked.clone()], 5, |g, x| {
            Ok(g.clamp(x[0], -1.0, 1.0))
        }),
        ("scale", vec![a.clone()], 5, |g, x| Ok(g.scale(x[0], -2.5))),
        ("sum", vec![a.clone()], 1, |g, x| Ok(g.sum(x[0]))),
        (
            "window_mean",
            vec![a.clone(), b.clone(), c.clone()],
            5,
            |g, x| g.window_mean(x),
        ),
        ("concat", vec![a.clone(), logits.clone()], 9, |g, x| {
            g.concat(x)
        }),
        ("half_sq_dist", vec![a.clone(), b.clone()], 1, |g, x| {
            g.half_sq_dist(x[0], x[1])
        }),
        ("softmax_xent", vec![logits.clone()], 1, |g, x| {
            g.softmax_xent(x[0], 2)
        }),
        ("map", vec![a.clone()], 5, |g, x| {
            Ok(g.map(x[0], |v| v * v * v, |v| 3.0 * v * v))
        }),
    ];

    let mut out = Vec::with_capacity(cases.len() + 2);
    for (i, (name, inputs, len, build)) in cases.into_iter().enumerate() {
        out.push(primitive_case(
            name,
            inputs,
            len,
            build,
            seed + 1 + i as u64,
        )?);
    }
    out.push(lstm_case(seed + 100)?);
    out.push(elbo_case(seed + 200)?);
    Ok(out)
}
