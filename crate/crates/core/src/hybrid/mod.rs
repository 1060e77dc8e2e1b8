//! Differentiable two-stage dormancy model with a replaceable daily chill
//! response.
//!
//! Hard indicators of the classical model are replaced by generalized
//! logistic functions of the normalized accumulations `C/S` and `F/S`:
//!
//! ```text
//! C_t  = Σ_{τ<=t} c(x_τ)             r^c_t = σ(C_t / S; α_c, β_c, 1)
//! F_t  = Σ_{τ<=t} gdh(x_τ) r^c_τ     r^f_t = σ(F_t / S; 1/s, β_f, 1)
//! p_t  = r^f_t - r^f_{t-1},          r^f_0 = σ(0; 1/s, β_f, 1)
//! ```
//!
//! `r^f` is read as the CDF of a logistic distribution with scale `s`, so
//! `p_t` is the probability of bloom on day `t`; training minimizes
//! `-log p_{observed}` and predictions take the most probable day.

mod chill;
mod train;

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Tape, Var};
use crate::domain::HOURS_PER_DAY;
use crate::error::{Error, Result};

pub use chill::{ChillResponse, Mlp, HIDDEN};
pub use train::{
    init_thresholds, train, train_ablation_utah, train_with_response, EpochStats, TrainConfig, TrainedModel,
};

/// Fixed slope of the chill soft threshold.
pub const CHILL_SLOPE: f64 = 50.0;
/// Lower bound on the learned forcing scale.
pub const MIN_FORCING_SCALE: f64 = 0.01;
/// Probabilities are clamped to this value inside the log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

/// Generalized logistic `γ / (1 + exp(-α (x - β)))`.
pub fn soft_threshold(x: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    gamma * logistic(alpha * (x - beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridParams {
    pub chill: ChillResponse,
    /// Inflection of the chill gate on the `C/S` axis, in (0, 1).
    pub chill_inflection: f64,
    /// Inflection of the bloom CDF on the `F/S` axis.
    pub forcing_inflection: f64,
    pub base_temp: f64,
    pub chill_slope: f64,
    /// Logistic scale `s`; the forcing slope is `1/s`.
    pub forcing_scale: f64,
}

impl HybridParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.chill_inflection,
            self.forcing_inflection,
            self.base_temp,
            self.chill_slope,
            self.forcing_scale,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.forcing_scale <= 0.0 || self.chill_slope <= 0.0 {
            return Err(Error::invalid(format!(
                "invalid hybrid parameters: chill {}, forcing {}, base {}, slope {}, scale {}",
                self.chill_inflection, self.forcing_inflection, self.base_temp, self.chill_slope, self.forcing_scale
            )));
        }
        Ok(())
    }
}

/// Seasons stacked row-wise for batched evaluation. All seasons share the
/// same nominal length `S`; each may be truncated (for training, days after
/// the observed bloom do not affect the likelihood).
#[derive(Debug, Clone)]
pub struct SeasonBatch {
    inputs: Array2<f64>,
    segments: Arc<[usize]>,
    season_len: usize,
    /// Global row of the observed day in each segment.
    targets: Option<Arc<[usize]>>,
}

impl SeasonBatch {
    /// `observed` holds 1-based observed days; with `truncate` every season is
    /// cut after its observed day.
    pub fn new(seasons: &[ArrayView2<'_, f64>], observed: Option<&[usize]>, truncate: bool) -> Result<Self> {
        let season_len = seasons
            .first()
            .map(|s| s.nrows())
            .ok_or_else(|| Error::invalid("empty season batch"))?;
        if let Some(obs) = observed {
            if obs.len() != seasons.len() {
                return Err(Error::invalid("one observed day per season required"));
            }
        }
        let mut segments = Vec::with_capacity(seasons.len());
        let mut targets = Vec::with_capacity(seasons.len());
        let mut rows = Vec::new();
        let mut offset = 0;
        for (i, s) in seasons.iter().enumerate() {
            if s.nrows() != season_len || s.ncols() != HOURS_PER_DAY {
                return Err(Error::invalid(format!(
                    "season {i} has shape {:?}, expected ({season_len}, {HOURS_PER_DAY})",
                    s.dim()
                )));
            }
            let mut len = season_len;
            if let Some(obs) = observed {
                let day = obs[i];
                if !(1..=season_len).contains(&day) {
                    return Err(Error::SeasonDay {
                        day: day as i64,
                        season_len,
                    });
                }
                if truncate {
                    len = day;
                }
                targets.push(offset + day - 1);
            }
            rows.extend(s.rows().into_iter().take(len).flat_map(|r| r.to_vec()));
            segments.push(len);
            offset += len;
        }
        let inputs = Array2::from_shape_vec((offset, HOURS_PER_DAY), rows).expect("row count");
        Ok(SeasonBatch {
            inputs,
            segments: segments.into(),
            season_len,
            targets: observed.map(|_| targets.into()),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn season_len(&self) -> usize {
        self.season_len
    }
}

/// Tape handles of one recorded forward pass.
pub(crate) struct Graph {
    /// Trainable leaves: six network tensors when the response is learned,
    /// then chill inflection, forcing inflection, base temperature, scale.
    pub params: Vec<Var>,
    pub daily_chill: Var,
    pub chill_cum: Var,
    pub chill_gate: Var,
    pub forcing_cum: Var,
    pub forcing_cdf: Var,
    pub initial_cdf: Var,
    pub prob: Var,
}

fn col(a: Vec<f64>) -> Array2<f64> {
    let n = a.len();
    Array2::from_shape_vec((n, 1), a).expect("column")
}

/// Records the model on `tape`.
pub(crate) fn record(tape: &mut Tape, batch: &SeasonBatch, params: &HybridParams) -> Graph {
    let inv_len = 1.0 / batch.season_len as f64;
    let mut leaves = Vec::with_capacity(10);
    let daily_chill = match &params.chill {
        ChillResponse::Mlp(m) => {
            let vars: [Var; 6] = m.tensors().map(|t| tape.param(t.clone()));
            leaves.extend(vars);
            Mlp::record(tape, &vars, m.scaled_inputs(batch.inputs.view()))
        }
        frozen => tape.constant(col(frozen.daily_values(batch.inputs.view()))),
    };
    let chill_inflection = tape.scalar_param(params.chill_inflection);
    let forcing_inflection = tape.scalar_param(params.forcing_inflection);
    let base_temp = tape.scalar_param(params.base_temp);
    let scale = tape.scalar_param(params.forcing_scale);
    leaves.extend([chill_inflection, forcing_inflection, base_temp, scale]);

    let chill_cum = tape.segment_cumsum(daily_chill, batch.segments.clone());
    let chill_norm = tape.scale(chill_cum, inv_len);
    let centered = tape.sub(chill_norm, chill_inflection);
    let steep = tape.scale(centered, params.chill_slope);
    let chill_gate = tape.logistic(steep);

    let x = tape.constant(batch.inputs.clone());
    let excess = tape.sub(x, base_temp);
    let hinge = tape.relu(excess);
    let gdh = tape.sum_rows(hinge);
    let gated = tape.mul(gdh, chill_gate);
    let forcing_cum = tape.segment_cumsum(gated, batch.segments.clone());
    let forcing_norm = tape.scale(forcing_cum, inv_len);

    let slope = tape.recip(scale);
    let centered = tape.sub(forcing_norm, forcing_inflection);
    let z = tape.mul(centered, slope);
    let forcing_cdf = tape.logistic(z);
    let neg_beta = tape.neg(forcing_inflection);
    let z0 = tape.mul(neg_beta, slope);
    let initial_cdf = tape.logistic(z0);
    let prob = tape.segment_diff(forcing_cdf, initial_cdf, batch.segments.clone());

    Graph {
        params: leaves,
        daily_chill,
        chill_cum,
        chill_gate,
        forcing_cum,
        forcing_cdf,
        initial_cdf,
        prob,
    }
}

/// Mean negative log-likelihood of the batch targets.
pub(crate) fn record_loss(tape: &mut Tape, batch: &SeasonBatch, graph: &Graph) -> Var {
    let targets = batch.targets.clone().expect("batch built with observed days");
    let picked = tape.gather(graph.prob, targets);
    let clamped = tape.max_const(picked, PROB_FLOOR);
    let logp = tape.log(clamped);
    let nll = tape.neg(logp);
    tape.mean(nll)
}

/// Per-day bloom probabilities and the accumulation traces behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloomDistribution {
    /// `p[t-1]` is the probability of bloom on season day `t`.
    pub prob: Vec<f64>,
    pub daily_chill: Vec<f64>,
    pub chill_cum: Vec<f64>,
    pub chill_gate: Vec<f64>,
    pub forcing_cum: Vec<f64>,
    pub forcing_cdf: Vec<f64>,
    pub initial_cdf: f64,
}

impl BloomDistribution {
    pub fn season_len(&self) -> usize {
        self.prob.len()
    }
}

/// Full-season forward pass for several seasons at once.
pub fn forward_batch(seasons: &[ArrayView2<'_, f64>], params: &HybridParams) -> Result<Vec<BloomDistribution>> {
    let batch = SeasonBatch::new(seasons, None, false)?;
    let mut tape = Tape::new();
    let g = record(&mut tape, &batch, params);
    let column = |v: Var| tape.value(v).column(0).to_vec();
    let (daily, ccum, gate, fcum, cdf, prob) = (
        column(g.daily_chill),
        column(g.chill_cum),
        column(g.chill_gate),
        column(g.forcing_cum),
        column(g.forcing_cdf),
        column(g.prob),
    );
    let initial = tape.scalar(g.initial_cdf);
    let mut out = Vec::with_capacity(batch.len());
    let mut r = 0;
    for &len in batch.segments.iter() {
        let span = r..r + len;
        let dist = BloomDistribution {
            prob: prob[span.clone()].to_vec(),
            daily_chill: daily[span.clone()].to_vec(),
            chill_cum: ccum[span.clone()].to_vec(),
            chill_gate: gate[span.clone()].to_vec(),
            forcing_cum: fcum[span.clone()].to_vec(),
            forcing_cdf: cdf[span].to_vec(),
            initial_cdf: initial,
        };
        debug_assert!(
            dist.forcing_cdf.windows(2).all(|w| w[0] <= w[1]) && initial <= dist.forcing_cdf[0],
            "bloom CDF must be non-decreasing"
        );
        out.push(dist);
        r += len;
    }
    Ok(out)
}

/// Forward pass over one season (any number of days).
pub fn forward(series: ArrayView2<'_, f64>, params: &HybridParams) -> Result<BloomDistribution> {
    Ok(forward_batch(&[series], params)?.remove(0))
}

/// `-log(max(p_observed, PROB_FLOOR))`.
pub fn nll_loss(dist: &BloomDistribution, observed_day: usize) -> Result<f64> {
    if !(1..=dist.season_len()).contains(&observed_day) {
        return Err(Error::SeasonDay {
            day: observed_day as i64,
            season_len: dist.season_len(),
        });
    }
    Ok(-dist.prob[observed_day - 1].max(PROB_FLOOR).ln())
}

/// Most probable bloom day (1-based); ties go to the earliest day.
pub fn predict_bloom_soft(dist: &BloomDistribution) -> usize {
    argmax_earliest(&dist.prob)
}

pub(crate) fn argmax_earliest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best + 1
}

/// Mean NLL and its gradient for the trainable leaves, in [`Graph::params`]
/// order.
pub fn loss_and_gradient(batch: &SeasonBatch, params: &HybridParams) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let graph = record(&mut tape, batch, params);
    let loss = record_loss(&mut tape, batch, &graph);
    let grads = tape.backward(loss)?;
    let g = graph.params.iter().map(|&v| grads.wrt(&tape, v)).collect();
    Ok((tape.scalar(loss), g))
}
