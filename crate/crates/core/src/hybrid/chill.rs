use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Tape, Var};
use crate::domain::HOURS_PER_DAY;
use crate::error::{Error, Result};
use crate::mechanistic::{constants::UTAH_MAX_WEIGHT, utah_chill};

pub const HIDDEN: usize = 64;

/// Daily chill network: 24 hourly temperatures -> 64 -> 64 -> 1, ReLU hidden
/// layers and a logistic output, so every daily contribution lies in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w3: Array2<f64>,
    pub b3: Array2<f64>,
    /// Inputs enter the network as `(T - input_shift) * input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

fn uniform_layer(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (1.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl Mlp {
    /// Weights uniform in ±sqrt(1/fan_in), biases zero.
    pub fn init(rng: &mut impl Rng) -> Self {
        Mlp {
            w1: uniform_layer(rng, HIDDEN, HOURS_PER_DAY),
            b1: Array2::zeros((1, HIDDEN)),
            w2: uniform_layer(rng, HIDDEN, HIDDEN),
            b2: Array2::zeros((1, HIDDEN)),
            w3: uniform_layer(rng, 1, HIDDEN),
            b3: Array2::zeros((1, 1)),
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn n_weights(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn scaled_inputs(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let (shift, scale) = (self.input_shift, self.input_scale);
        inputs.mapv(|t| (t - shift) * scale)
    }

    /// Daily outputs for every row of `inputs`, without a tape.
    pub fn eval(&self, inputs: ArrayView2<'_, f64>) -> Vec<f64> {
        let x = self.scaled_inputs(inputs);
        let h1 = (x.dot(&self.w1.t()) + &self.b1).mapv(|v| v.max(0.0));
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(|v| v.max(0.0));
        let out = h2.dot(&self.w3.t()) + &self.b3;
        out.column(0).iter().map(|&z| logistic(z)).collect()
    }

    /// Records the network on `tape` with the six tensors as leaves `params`.
    pub(crate) fn record(tape: &mut Tape, params: &[Var; 6], scaled: Array2<f64>) -> Var {
        let x = tape.constant(scaled);
        let z1 = tape.matmul_t(x, params[0]);
        let z1 = tape.add_row(z1, params[1]);
        let h1 = tape.relu(z1);
        let z2 = tape.matmul_t(h1, params[2]);
        let z2 = tape.add_row(z2, params[3]);
        let h2 = tape.relu(z2);
        let z3 = tape.matmul_t(h2, params[4]);
        let z3 = tape.add_row(z3, params[5]);
        tape.logistic(z3)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    shape: [usize; 2],
    /// Row-major `shape[0] x shape[1]` weights.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    input_shift: f64,
    input_scale: f64,
    hidden_activation: String,
    output_activation: String,
    layers: Vec<LayerFile>,
}

impl From<Mlp> for MlpFile {
    fn from(m: Mlp) -> Self {
        let layer = |w: &Array2<f64>, b: &Array2<f64>| LayerFile {
            shape: [w.nrows(), w.ncols()],
            weights: w.iter().copied().collect(),
            bias: b.iter().copied().collect(),
        };
        MlpFile {
            input_shift: m.input_shift,
            input_scale: m.input_scale,
            hidden_activation: "relu".into(),
            output_activation: "logistic".into(),
            layers: vec![layer(&m.w1, &m.b1), layer(&m.w2, &m.b2), layer(&m.w3, &m.b3)],
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        let expected = [[HIDDEN, HOURS_PER_DAY], [HIDDEN, HIDDEN], [1, HIDDEN]];
        if f.layers.len() != 3 {
            return Err(Error::invalid(format!("expected 3 layers, got {}", f.layers.len())));
        }
        let mut tensors = Vec::new();
        for (l, shape) in f.layers.into_iter().zip(expected) {
            if l.shape != shape || l.weights.len() != shape[0] * shape[1] || l.bias.len() != shape[0] {
                return Err(Error::invalid(format!(
                    "layer shape {:?} does not match expected {shape:?}",
                    l.shape
                )));
            }
            tensors.push(Array2::from_shape_vec((shape[0], shape[1]), l.weights).expect("checked length"));
            tensors.push(Array2::from_shape_vec((1, shape[0]), l.bias).expect("checked length"));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("six tensors");
        Ok(Mlp {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
            input_shift: f.input_shift,
            input_scale: f.input_scale,
        })
    }
}

/// Where the daily chill contribution comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChillResponse {
    /// Learned network.
    Mlp(Mlp),
    /// Daily Utah sum divided by `24 * max weight`; negative on warm days.
    Utah,
    /// Smooth Chill Hours count divided by 24: each hour contributes
    /// `σ(k T) σ(k (upper - T))`.
    ChillHoursSurrogate { upper: f64, steepness: f64 },
    Constant { value: f64 },
}

impl ChillResponse {
    pub fn is_learned(&self) -> bool {
        matches!(self, ChillResponse::Mlp(_))
    }

    /// Daily contributions for every row of `inputs` (raw °C).
    pub fn daily_values(&self, inputs: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            ChillResponse::Mlp(m) => m.eval(inputs),
            ChillResponse::Utah => inputs
                .axis_iter(Axis(0))
                .map(|d| utah_chill(d) / (HOURS_PER_DAY as f64 * UTAH_MAX_WEIGHT))
                .collect(),
            ChillResponse::ChillHoursSurrogate { upper, steepness } => inputs
                .axis_iter(Axis(0))
                .map(|d| {
                    d.iter()
                        .map(|&t| logistic(steepness * t) * logistic(steepness * (upper - t)))
                        .sum::<f64>()
                        / HOURS_PER_DAY as f64
                })
                .collect(),
            ChillResponse::Constant { value } => vec![*value; inputs.nrows()],
        }
    }
}
