//! Train/test protocols, repeated-seed evaluation and figure-data exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Grouping, Sample, SEASON_LENGTH};
use crate::error::{Error, Result};
use crate::hybrid::{forward_batch, predict_bloom_soft, train, train_ablation_utah, HybridParams, TrainConfig, TrainedModel};
use crate::mechanistic::{grid_search, predict_bloom_hard, ChillModelKind, GridSearch, GridSpec, MechanisticConfig};
use crate::rng::{hash_str, stream};

/// Generalization protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Held-out years, parameters per location.
    TemporalPerLocation,
    /// Held-out years, parameters per variety.
    TemporalPerVariety,
    /// Held-out years at held-out locations, parameters per variety.
    Spatiotemporal,
}

impl Setting {
    pub fn grouping(&self) -> Grouping {
        match self {
            Setting::TemporalPerLocation => Grouping::PerLocation,
            Setting::TemporalPerVariety | Setting::Spatiotemporal => Grouping::PerVariety,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::TemporalPerLocation => "temporal",
            Setting::TemporalPerVariety => "temporal-variety",
            Setting::Spatiotemporal => "spatiotemporal",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "temporal" | "temporal-per-location" => Ok(Setting::TemporalPerLocation),
            "2" | "temporal-variety" | "temporal-per-variety" => Ok(Setting::TemporalPerVariety),
            "3" | "spatiotemporal" => Ok(Setting::Spatiotemporal),
            other => Err(Error::invalid(format!(
                "unknown setting '{other}' (expected temporal, temporal-variety or spatiotemporal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    pub train_year_fraction: f64,
    /// Only used by [`Setting::Spatiotemporal`].
    pub holdout_location_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(setting: Setting, seed: u64) -> Self {
        SplitSpec {
            setting,
            train_year_fraction: 0.75,
            holdout_location_fraction: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train_year_fraction", self.train_year_fraction),
            ("holdout_location_fraction", self.holdout_location_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Size of the held-out part: `round(fraction · n)`, at least one and leaving
/// at least one for training.
pub fn holdout_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

fn shuffled<T: Clone>(items: &[T], seed: u64, tag: &str) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut stream(&[seed, hash_str(tag)]));
    v
}

/// Partitions `data` into train and test sets. Years are shared by all
/// locations; no (location, year) pair lands in both sets.
pub fn make_split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let years = data.years();
    if years.len() < 2 {
        return Err(Error::Split(format!("need at least 2 distinct years, found {}", years.len())));
    }
    let n_test_years = holdout_count(years.len(), 1.0 - spec.train_year_fraction);
    let test_years: BTreeSet<i32> = shuffled(&years, spec.seed, "years")
        .into_iter()
        .take(n_test_years)
        .collect();

    let held_out: BTreeSet<String> = if spec.setting == Setting::Spatiotemporal {
        let locations: Vec<String> = data
            .samples()
            .iter()
            .map(|s| s.record.location_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if locations.len() < 2 {
            return Err(Error::Split(format!(
                "spatiotemporal split needs at least 2 locations, found {}",
                locations.len()
            )));
        }
        let n = holdout_count(locations.len(), spec.holdout_location_fraction);
        shuffled(&locations, spec.seed, "locations").into_iter().take(n).collect()
    } else {
        BTreeSet::new()
    };

    let spatial = spec.setting == Setting::Spatiotemporal;
    let train = data.filter(|s| {
        !test_years.contains(&s.record.season_start_year) && !held_out.contains(&s.record.location_id)
    });
    let test = data.filter(|s| {
        test_years.contains(&s.record.season_start_year) && (!spatial || held_out.contains(&s.record.location_id))
    });
    Ok((train, test))
}

/// A fitted model that maps a sample to an integer season day.
pub trait Predictor: Send + Sync {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<usize>>;
}

/// Something that can be calibrated or trained on a dataset.
pub trait Fitter: Sync {
    fn name(&self) -> String;
    /// Settings echoed into the report.
    fn describe(&self) -> serde_json::Value;
    fn fit(&self, train: &Dataset, grouping: Grouping, seed: u64) -> Result<Box<dyn Predictor>>;
}

pub struct MechanisticFitter {
    pub kind: ChillModelKind,
    pub grid: GridSpec,
    pub config: MechanisticConfig,
}

impl MechanisticFitter {
    pub fn new(kind: ChillModelKind) -> Self {
        MechanisticFitter {
            kind,
            grid: GridSpec::default_for(kind),
            config: MechanisticConfig::default(),
        }
    }
}

impl Predictor for GridSearch {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<usize>> {
        samples
            .iter()
            .map(|s| {
                let params = self.params_for(self.grouping.key(&s.record))?;
                Ok(predict_bloom_hard(&s.series, params, self.model, &self.config).scored(SEASON_LENGTH))
            })
            .collect()
    }
}

impl Fitter for MechanisticFitter {
    fn name(&self) -> String {
        self.kind.as_str().to_string()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.kind, "grid": self.grid, "config": self.config })
    }

    fn fit(&self, train: &Dataset, grouping: Grouping, _seed: u64) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(grid_search(train, self.kind, &self.grid, grouping, &self.config)?))
    }
}

/// Predicts with a set of hybrid parameters per group key.
pub fn predict_hybrid(groups: &BTreeMap<String, HybridParams>, grouping: Grouping, samples: &[&Sample]) -> Result<Vec<usize>> {
    let mut out = vec![0; samples.len()];
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_group.entry(grouping.key(&s.record)).or_default().push(i);
    }
    for (key, idx) in by_group {
        let params = groups.get(key).ok_or_else(|| Error::MissingGroup(key.to_string()))?;
        let seasons: Vec<ArrayView2<'_, f64>> = idx.iter().map(|&i| samples[i].series.temps()).collect();
        for (&i, dist) in idx.iter().zip(forward_batch(&seasons, params)?) {
            out[i] = predict_bloom_soft(&dist);
        }
    }
    Ok(out)
}

impl Predictor for TrainedModel {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<usize>> {
        predict_hybrid(&self.groups, self.grouping, samples)
    }
}

pub struct HybridFitter {
    pub config: TrainConfig,
    /// Freeze the chill response to the scaled Utah model.
    pub utah_ablation: bool,
}

impl Fitter for HybridFitter {
    fn name(&self) -> String {
        if self.utah_ablation { "hybrid-utah" } else { "hybrid" }.to_string()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.name(), "train": self.config })
    }

    fn fit(&self, data: &Dataset, grouping: Grouping, seed: u64) -> Result<Box<dyn Predictor>> {
        let model = if self.utah_ablation {
            train_ablation_utah(data, seed, &self.config, grouping)?
        } else {
            train(data, seed, &self.config, grouping)?
        };
        Ok(Box::new(model))
    }
}

/// Predicts the median training label of the sample's group (lower median on
/// even counts).
pub struct MedianFitter;

struct MedianPredictor {
    grouping: Grouping,
    medians: BTreeMap<String, usize>,
}

impl Predictor for MedianPredictor {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<usize>> {
        samples
            .iter()
            .map(|s| {
                let key = self.grouping.key(&s.record);
                self.medians
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::MissingGroup(key.to_string()))
            })
            .collect()
    }
}

impl Fitter for MedianFitter {
    fn name(&self) -> String {
        "median".to_string()
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "model": "median" })
    }

    fn fit(&self, train: &Dataset, grouping: Grouping, _seed: u64) -> Result<Box<dyn Predictor>> {
        let medians = train
            .groups(grouping)
            .into_iter()
            .map(|(key, idx)| {
                let mut days: Vec<usize> = idx.iter().map(|&i| train.samples()[i].record.bloom_day).collect();
                days.sort_unstable();
                (key, days[(days.len() - 1) / 2])
            })
            .collect();
        Ok(Box::new(MedianPredictor { grouping, medians }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub location_id: String,
    pub variety: String,
    pub season_start_year: i32,
    pub observed: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: Option<f64>,
    pub error: Option<String>,
    pub pairs: Vec<PredictionPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub setting: Setting,
    pub grouping: Grouping,
    pub split: SplitSpec,
    pub n_seeds: usize,
    pub n_succeeded: usize,
    pub mean_mae: Option<f64>,
    /// Sample standard deviation (n − 1) of per-seed MAEs over √n; absent
    /// with fewer than two successful seeds.
    pub standard_error: Option<f64>,
    pub warnings: Vec<String>,
    pub fitter: serde_json::Value,
    pub seeds: Vec<SeedResult>,
}

impl EvalReport {
    pub fn per_seed_mae(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.mae).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn mean_absolute_error(pairs: &[PredictionPair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| (p.observed as f64 - p.predicted as f64).abs())
        .sum();
    total / pairs.len() as f64
}

/// Mean and standard error (sample deviation, n − 1).
pub fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

fn run_seed(fitter: &dyn Fitter, data: &Dataset, spec: &SplitSpec, seed: u64) -> SeedResult {
    let mut result = SeedResult {
        seed,
        n_train: 0,
        n_test: 0,
        mae: None,
        error: None,
        pairs: Vec::new(),
    };
    let outcome = (|| -> Result<()> {
        let (train, test) = make_split(data, &SplitSpec { seed, ..*spec })?;
        result.n_train = train.len();
        result.n_test = test.len();
        if test.is_empty() || train.is_empty() {
            return Err(Error::Split("empty train or test set".into()));
        }
        let predictor = fitter.fit(&train, spec.setting.grouping(), seed)?;
        let mut samples: Vec<&Sample> = test.samples().iter().collect();
        samples.sort_by(|a, b| {
            (&a.record.location_id, a.record.season_start_year).cmp(&(&b.record.location_id, b.record.season_start_year))
        });
        let predicted = predictor.predict(&samples)?;
        result.pairs = samples
            .iter()
            .zip(predicted)
            .map(|(s, p)| PredictionPair {
                location_id: s.record.location_id.clone(),
                variety: s.record.variety.clone(),
                season_start_year: s.record.season_start_year,
                observed: s.record.bloom_day,
                predicted: p,
            })
            .collect();
        result.mae = Some(mean_absolute_error(&result.pairs));
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
    }
    result
}

/// Splits, fits and scores once per seed; seeds run in parallel. A failing
/// seed is recorded in the report and excluded from the aggregate.
pub fn evaluate(fitter: &dyn Fitter, data: &Dataset, spec: &SplitSpec, seeds: &[u64]) -> Result<EvalReport> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let results: Vec<SeedResult> = seeds.par_iter().map(|&seed| run_seed(fitter, data, spec, seed)).collect();
    let maes: Vec<f64> = results.iter().filter_map(|r| r.mae).collect();
    let warnings: Vec<String> = results
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("seed {} failed: {e}", r.seed)))
        .collect();
    let (mean_mae, standard_error) = mean_and_se(&maes);
    Ok(EvalReport {
        model: fitter.name(),
        setting: spec.setting,
        grouping: spec.setting.grouping(),
        split: *spec,
        n_seeds: seeds.len(),
        n_succeeded: maes.len(),
        mean_mae,
        standard_error,
        warnings,
        fitter: fitter.describe(),
        seeds: results,
    })
}

/// Temperature bin width of the response density, °C.
pub const TEMP_BIN: f64 = 0.5;
/// Response bin width of the response density.
pub const RESPONSE_BIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    /// Lower edge of the daily-mean temperature bin, °C.
    pub mean_temp: f64,
    /// Lower edge of the response bin.
    pub response: f64,
    /// Fraction of the column's days in this cell; columns sum to one.
    pub density: f64,
    pub count: usize,
}

/// Daily chill response against daily mean temperature, as a column-normalized
/// 2-D histogram over every day of `test`.
pub fn export_response_density(params: &HybridParams, test: &Dataset) -> Result<Vec<DensityRow>> {
    if test.is_empty() {
        return Err(Error::invalid("response density needs a non-empty test set"));
    }
    let mut cells: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for s in test.samples() {
        let temps = s.series.temps();
        let response = params.chill.daily_values(temps);
        for (day, r) in temps.rows().into_iter().zip(response) {
            let mean = day.mean().expect("24 hours");
            let tb = (mean / TEMP_BIN).floor() as i64;
            let rb = (r / RESPONSE_BIN).floor() as i64;
            *cells.entry((tb, rb)).or_default() += 1;
        }
    }
    let mut totals: BTreeMap<i64, usize> = BTreeMap::new();
    for (&(tb, _), &c) in &cells {
        *totals.entry(tb).or_default() += c;
    }
    Ok(cells
        .into_iter()
        .map(|((tb, rb), count)| DensityRow {
            mean_temp: tb as f64 * TEMP_BIN,
            response: rb as f64 * RESPONSE_BIN,
            density: count as f64 / totals[&tb] as f64,
            count,
        })
        .collect())
}

pub fn write_density(path: &Path, rows: &[DensityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub seed: u64,
    pub location_id: String,
    pub variety: String,
    pub season_start_year: i32,
    pub observed_day: usize,
    pub predicted_day: usize,
    /// `predicted - observed`.
    pub residual: i64,
}

/// Observed/predicted pairs of every successful seed; with `by_variety` rows
/// are ordered by variety first.
pub fn export_scatter(report: &EvalReport, by_variety: bool) -> Vec<ScatterRow> {
    let mut rows: Vec<ScatterRow> = report
        .seeds
        .iter()
        .flat_map(|s| {
            s.pairs.iter().map(move |p| ScatterRow {
                seed: s.seed,
                location_id: p.location_id.clone(),
                variety: p.variety.clone(),
                season_start_year: p.season_start_year,
                observed_day: p.observed,
                predicted_day: p.predicted,
                residual: p.predicted as i64 - p.observed as i64,
            })
        })
        .collect();
    if by_variety {
        rows.sort_by(|a, b| a.variety.cmp(&b.variety));
    }
    rows
}

pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
