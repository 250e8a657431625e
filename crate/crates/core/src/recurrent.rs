//! Single-layer LSTM used by the encoder and both decoder branches.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Gate suffixes in the order input, forget, cell candidate, output.
pub const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Weights of one LSTM layer. `w[k]` is `cells × input`, `u[k]` is
/// `cells × cells`, `b[k]` has length `cells`, with `k` indexing [`GATES`].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmParams {
    /// Uniform init in `±1/√fan_in` per matrix, forget bias 1 and other biases 0.
    pub fn init(input: usize, cells: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let bound = 1.0 / (shape[1] as f64).sqrt();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
            .expect("shape matches")
        };
        let w = std::array::from_fn(|_| uniform(&[cells, input]));
        let u = std::array::from_fn(|_| uniform(&[cells, cells]));
        let b = std::array::from_fn(|k| {
            if GATES[k] == "f" {
                Tensor::filled(&[cells], 1.0)
            } else {
                Tensor::zeros(&[cells])
            }
        });
        Self { w, u, b }
    }

    pub fn zeros(input: usize, cells: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Tensor::zeros(&[cells, input])),
            u: std::array::from_fn(|_| Tensor::zeros(&[cells, cells])),
            b: std::array::from_fn(|_| Tensor::zeros(&[cells])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].shape()[1]
    }

    pub fn cells(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn names(prefix: &str) -> Vec<String> {
        let mut out = Vec::with_capacity(12);
        for kind in ["w", "u", "b"] {
            for gate in GATES {
                out.push(format!("{prefix}.{kind}_{gate}"));
            }
        }
        out
    }

    pub fn store(&self, prefix: &str, params: &mut ParamSet) {
        for (k, gate) in GATES.iter().enumerate() {
            params.insert(format!("{prefix}.w_{gate}"), self.w[k].clone());
            params.insert(format!("{prefix}.u_{gate}"), self.u[k].clone());
            params.insert(format!("{prefix}.b_{gate}"), self.b[k].clone());
        }
    }

    pub fn load(prefix: &str, params: &ParamSet) -> Result<Self> {
        let get = |kind: &str, k: usize| -> Result<Tensor> {
            Ok(params
                .require(&format!("{prefix}.{kind}_{}", GATES[k]))?
                .clone())
        };
        let mut w = Vec::with_capacity(4);
        let mut u = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for k in 0..4 {
            w.push(get("w", k)?);
            u.push(get("u", k)?);
            b.push(get("b", k)?);
        }
        let out = Self {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: b.try_into().unwrap(),
        };
        out.validate(prefix)?;
        Ok(out)
    }

    #[allow(clippy::needless_range_loop)]
    fn validate(&self, prefix: &str) -> Result<()> {
        let (cells, input) = (self.cells(), self.input_dim());
        for k in 0..4 {
            let ok = self.w[k].shape() == [cells, input]
                && self.u[k].shape() == [cells, cells]
                && self.b[k].shape() == [cells];
            if !ok {
                return Err(Error::Invalid(format!(
                    "{prefix}: inconsistent gate shapes for gate {}",
                    GATES[k]
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for one layer's twelve weight tensors.
#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    w: [NodeId; 4],
    u: [NodeId; 4],
    b: [NodeId; 4],
    input: usize,
    cells: usize,
}

impl LstmNodes {
    /// Registers the layer as named trainable leaves under `prefix`.
    pub fn register(graph: &mut Graph, prefix: &str, params: &ParamSet) -> Result<Self> {
        let layer = LstmParams::load(prefix, params)?;
        Ok(Self::from_params(graph, prefix, &layer))
    }

    pub fn from_params(graph: &mut Graph, prefix: &str, layer: &LstmParams) -> Self {
        let w =
            std::array::from_fn(|k| graph.param(&format!("{prefix}.w_{}", GATES[k]), &layer.w[k]));
        let u =
            std::array::from_fn(|k| graph.param(&format!("{prefix}.u_{}", GATES[k]), &layer.u[k]));
        let b =
            std::array::from_fn(|k| graph.param(&format!("{prefix}.b_{}", GATES[k]), &layer.b[k]));
        Self {
            w,
            u,
            b,
            input: layer.input_dim(),
            cells: layer.cells(),
        }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }
}

/// One LSTM step: returns `(h_t, c_t)`.
#[allow(clippy::needless_range_loop)]
pub fn lstm_cell(
    graph: &mut Graph,
    layer: &LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    if graph.value(x).len() != layer.input {
        return Err(Error::dim("lstm input", layer.input, graph.value(x).len()));
    }
    let mut pre = [x; 4];
    for k in 0..4 {
        let wx = graph.matvec(layer.w[k], x)?;
        let uh = graph.matvec(layer.u[k], h_prev)?;
        let s = graph.add(wx, uh)?;
        pre[k] = graph.add(s, layer.b[k])?;
    }
    let i = graph.sigmoid(pre[0]);
    let f = graph.sigmoid(pre[1]);
    let g = graph.tanh(pre[2]);
    let o = graph.sigmoid(pre[3]);
    let keep = graph.mul(f, c_prev)?;
    let write = graph.mul(i, g)?;
    let c = graph.add(keep, write)?;
    let tc = graph.tanh(c);
    let h = graph.mul(o, tc)?;
    Ok((h, c))
}

/// Left-to-right scan from a zero state; returns `h_1..h_T`.
pub fn lstm_layer(graph: &mut Graph, layer: &LstmNodes, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
    if inputs.is_empty() {
        return Err(Error::Invalid("lstm_layer: empty input sequence".into()));
    }
    let zero = graph.constant(Tensor::zeros(&[layer.cells]));
    let (mut h, mut c) = (zero, zero);
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = lstm_cell(graph, layer, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Right-to-left scan; output `k` still corresponds to input `k`.
pub fn lstm_layer_reversed(
    graph: &mut Graph,
    layer: &LstmNodes,
    inputs: &[NodeId],
) -> Result<Vec<NodeId>> {
    let rev: Vec<NodeId> = inputs.iter().rev().copied().collect();
    let mut out = lstm_layer(graph, layer, &rev)?;
    out.reverse();
    Ok(out)
}
