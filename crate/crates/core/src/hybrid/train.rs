use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{loss_and_gradient, record, ChillResponse, HybridParams, Mlp, SeasonBatch, CHILL_SLOPE, MIN_FORCING_SCALE};
use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamSpec, Tape};
use crate::domain::{Dataset, Grouping};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};

/// Optimization schedule and initialization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub adam: AdamConfig,
    pub chill_slope: f64,
    pub init_forcing_scale: f64,
    pub min_forcing_scale: f64,
    pub init_base_temp: f64,
    /// The chill inflection starts where the initial network has accumulated
    /// the chill of this fraction of the days up to the observed bloom.
    pub init_chill_fraction: f64,
    /// Apply weight decay to the inflections and base temperature too.
    pub decay_thresholds: bool,
    /// Standardize network inputs with the training mean and deviation.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20000,
            lr: 1e-3,
            lr_decay: 0.9,
            decay_every: 2000,
            adam: AdamConfig::default(),
            chill_slope: CHILL_SLOPE,
            init_forcing_scale: 1.0,
            min_forcing_scale: MIN_FORCING_SCALE,
            init_base_temp: 5.0,
            init_chill_fraction: 0.5,
            decay_thresholds: false,
            normalize_inputs: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let periods = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.lr * self.lr_decay.powi(periods as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("chill_slope", self.chill_slope),
            ("init_forcing_scale", self.init_forcing_scale),
            ("min_forcing_scale", self.min_forcing_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.adam.weight_decay < 0.0 || !self.adam.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.init_chill_fraction > 0.0 && self.init_chill_fraction <= 1.0) {
            return Err(Error::invalid("init_chill_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_nll: f64,
    pub lr: f64,
}

/// Trained parameters per group, as written to the model JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub seed: u64,
    pub grouping: Grouping,
    pub config_hash: String,
    pub config: TrainConfig,
    pub groups: BTreeMap<String, HybridParams>,
    #[serde(skip)]
    pub traces: BTreeMap<String, Vec<EpochStats>>,
    #[serde(skip)]
    pub group_sizes: BTreeMap<String, usize>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for p in model.groups.values() {
            p.validate()?;
        }
        Ok(model)
    }

    pub fn params_for(&self, key: &str) -> Result<&HybridParams> {
        self.groups
            .get(key)
            .ok_or_else(|| Error::MissingGroup(key.to_string()))
    }

    /// Sample-weighted mean NLL across groups per epoch.
    pub fn combined_trace(&self) -> Vec<EpochStats> {
        let total: usize = self.group_sizes.values().sum();
        let epochs = self.traces.values().map(Vec::len).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let mut nll = 0.0;
                let mut lr = 0.0;
                for (key, trace) in &self.traces {
                    let w = self.group_sizes.get(key).copied().unwrap_or(0) as f64 / total.max(1) as f64;
                    nll += w * trace[e].mean_nll;
                    lr = trace[e].lr;
                }
                EpochStats {
                    epoch: e,
                    mean_nll: nll,
                    lr,
                }
            })
            .collect()
    }

    /// Loss trace CSV: `epoch,mean_nll,lr`.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_nll", "lr"])?;
        for row in self.combined_trace() {
            w.write_record([row.epoch.to_string(), row.mean_nll.to_string(), row.lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Places the two inflections where the untrained model's accumulations sit
/// on the training samples: chill at `init_chill_fraction` of the way to the
/// observed day, forcing at the observed day.
pub fn init_thresholds(
    seasons: &[ArrayView2<'_, f64>],
    observed: &[usize],
    params: &mut HybridParams,
    chill_fraction: f64,
) -> Result<()> {
    let batch = SeasonBatch::new(seasons, Some(observed), true)?;
    let season_len = batch.season_len() as f64;
    let mut tape = Tape::new();
    let g = record(&mut tape, &batch, params);
    let chill = tape.value(g.chill_cum);
    let mut start = 0;
    let mut at_fraction = Vec::with_capacity(observed.len());
    for &day in observed {
        let k = ((chill_fraction * day as f64).round() as usize).clamp(1, day);
        at_fraction.push(chill[[start + k - 1, 0]] / season_len);
        start += day;
    }
    params.chill_inflection = median(at_fraction).clamp(0.01, 0.99);

    let mut tape = Tape::new();
    let g = record(&mut tape, &batch, params);
    let forcing = tape.value(g.forcing_cum);
    let mut start = 0;
    let mut at_bloom = Vec::with_capacity(observed.len());
    for &day in observed {
        at_bloom.push(forcing[[start + day - 1, 0]] / season_len);
        start += day;
    }
    params.forcing_inflection = median(at_bloom).max(1e-3);
    Ok(())
}

fn snapshot(p: &HybridParams) -> String {
    format!(
        "chill_inflection={} forcing_inflection={} base_temp={} forcing_scale={}",
        p.chill_inflection, p.forcing_inflection, p.base_temp, p.forcing_scale
    )
}

fn mean_std(inputs: ArrayView2<'_, f64>) -> (f64, f64) {
    let n = inputs.len() as f64;
    let mean = inputs.sum() / n;
    let var = inputs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Seasons per forward/backward chunk; small chunks keep the network
/// activations cache-resident.
const CHUNK: usize = 8;

/// Mean NLL and gradient over weighted chunks; equal to the full-batch values
/// up to summation order.
fn chunked_loss_and_gradient(batches: &[(f64, SeasonBatch)], params: &HybridParams) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut total = 0.0;
    let mut grads: Vec<Array2<f64>> = Vec::new();
    for (weight, batch) in batches {
        let (loss, g) = loss_and_gradient(batch, params)?;
        total += weight * loss;
        if grads.is_empty() {
            grads = g.into_iter().map(|x| x * *weight).collect();
        } else {
            for (acc, x) in grads.iter_mut().zip(g) {
                acc.scaled_add(*weight, &x);
            }
        }
    }
    Ok((total, grads))
}

struct GroupFit {
    params: HybridParams,
    trace: Vec<EpochStats>,
}

fn train_group(
    key: &str,
    seasons: &[ArrayView2<'_, f64>],
    observed: &[usize],
    mut chill: ChillResponse,
    config: &TrainConfig,
) -> Result<GroupFit> {
    if let (ChillResponse::Mlp(m), true) = (&mut chill, config.normalize_inputs) {
        let stacked = ndarray::concatenate(ndarray::Axis(0), seasons).map_err(|e| Error::invalid(e.to_string()))?;
        let (mean, std) = mean_std(stacked.view());
        m.input_shift = mean;
        m.input_scale = 1.0 / std;
    }
    let mut params = HybridParams {
        chill,
        chill_inflection: 0.5,
        forcing_inflection: 1.0,
        base_temp: config.init_base_temp,
        chill_slope: config.chill_slope,
        forcing_scale: config.init_forcing_scale.max(config.min_forcing_scale),
    };
    init_thresholds(seasons, observed, &mut params, config.init_chill_fraction)?;
    let batches: Vec<(f64, SeasonBatch)> = seasons
        .chunks(CHUNK)
        .zip(observed.chunks(CHUNK))
        .map(|(s, o)| Ok((s.len() as f64 / seasons.len() as f64, SeasonBatch::new(s, Some(o), true)?)))
        .collect::<Result<_>>()?;

    let threshold_spec = |lower: Option<f64>, upper: Option<f64>| ParamSpec {
        weight_decay: config.decay_thresholds,
        lower,
        upper,
    };
    let mut tensors: Vec<Array2<f64>> = Vec::new();
    let mut specs: Vec<ParamSpec> = Vec::new();
    if let ChillResponse::Mlp(m) = &params.chill {
        for t in m.tensors() {
            tensors.push(t.clone());
            specs.push(ParamSpec {
                weight_decay: true,
                ..Default::default()
            });
        }
    }
    let n_net = tensors.len();
    let scalar = |v: f64| Array2::from_elem((1, 1), v);
    tensors.extend([
        scalar(params.chill_inflection),
        scalar(params.forcing_inflection),
        scalar(params.base_temp),
        scalar(params.forcing_scale),
    ]);
    specs.extend([
        threshold_spec(Some(1e-6), Some(1.0 - 1e-6)),
        threshold_spec(Some(1e-6), None),
        threshold_spec(None, None),
        ParamSpec {
            weight_decay: false,
            lower: Some(config.min_forcing_scale),
            upper: None,
        },
    ]);
    let mut state = AdamState::new(&tensors);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let diverged = |p: &HybridParams| Error::Diverged {
            group: key.to_string(),
            epoch,
            snapshot: snapshot(p),
        };
        let (loss, grads) = match chunked_loss_and_gradient(&batches, &params) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(&params)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(&params));
        }
        trace.push(EpochStats {
            epoch,
            mean_nll: loss,
            lr,
        });
        if adam_step(&mut tensors, &grads, &specs, &mut state, &config.adam, lr).is_err() {
            return Err(diverged(&params));
        }
        if let ChillResponse::Mlp(m) = &mut params.chill {
            for (dst, src) in m.tensors_mut().into_iter().zip(&tensors[..n_net]) {
                dst.assign(src);
            }
        }
        params.chill_inflection = tensors[n_net][[0, 0]];
        params.forcing_inflection = tensors[n_net + 1][[0, 0]];
        params.base_temp = tensors[n_net + 2][[0, 0]];
        params.forcing_scale = tensors[n_net + 3][[0, 0]];
    }
    Ok(GroupFit { params, trace })
}

/// Full-batch Adam training, one independent parameter set per group.
/// `make_response` builds the initial chill response from the group's rng.
pub fn train_with_response(
    train: &Dataset,
    seed: u64,
    config: &TrainConfig,
    grouping: Grouping,
    make_response: impl Fn(&mut ChaCha8Rng) -> ChillResponse + Sync,
) -> Result<TrainedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let groups = train.groups(grouping);
    let keys: Vec<&String> = groups.keys().collect();
    let fits: Vec<GroupFit> = keys
        .par_iter()
        .map(|key| {
            let idx = &groups[*key];
            let seasons: Vec<ArrayView2<'_, f64>> = idx.iter().map(|&i| train.samples()[i].series.temps()).collect();
            let observed: Vec<usize> = idx.iter().map(|&i| train.samples()[i].record.bloom_day).collect();
            let mut rng = stream(&[seed, hash_str(key)]);
            let response = make_response(&mut rng);
            train_group(key, &seasons, &observed, response, config)
        })
        .collect::<Result<_>>()?;

    let mut model = TrainedModel {
        seed,
        grouping,
        config_hash: config.hash(),
        config: config.clone(),
        groups: BTreeMap::new(),
        traces: BTreeMap::new(),
        group_sizes: BTreeMap::new(),
    };
    for (key, fit) in keys.into_iter().zip(fits) {
        model.groups.insert(key.clone(), fit.params);
        model.traces.insert(key.clone(), fit.trace);
        model.group_sizes.insert(key.clone(), groups[key].len());
    }
    Ok(model)
}

/// Trains the hybrid model with a freshly initialized chill network per group.
pub fn train(train: &Dataset, seed: u64, config: &TrainConfig, grouping: Grouping) -> Result<TrainedModel> {
    train_with_response(train, seed, config, grouping, |rng| ChillResponse::Mlp(Mlp::init(rng)))
}

/// Same structure with the chill response frozen to the scaled Utah model;
/// only the thresholds, base temperature and scale are learned.
pub fn train_ablation_utah(train: &Dataset, seed: u64, config: &TrainConfig, grouping: Grouping) -> Result<TrainedModel> {
    train_with_response(train, seed, config, grouping, |_| ChillResponse::Utah)
}
