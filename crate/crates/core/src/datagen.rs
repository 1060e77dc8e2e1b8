//! Synthetic hourly climate and oracle bloom labels.
//!
//! Temperatures follow an annual and a diurnal cosine plus Gaussian day-level
//! and hour-level noise; labels come from the hard-threshold model with known
//! parameters, so calibration and training can be checked against the truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use chrono::Datelike;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    season_index_to_date, BloomRecord, Dataset, Location, Sample, SeasonSeries, HOURS_PER_DAY, SEASON_LENGTH,
};
use crate::error::{Error, Result};
use crate::mechanistic::{predict_bloom_hard, BloomDay, ChillModelKind, MechanisticConfig, MechanisticParams};
use crate::rng::{hash_str, stream, stream_seed};

/// Hour of the daily maximum.
const WARMEST_HOUR: f64 = 14.0;
/// Colder offset applied per regeneration of a season without bloom.
const RETRY_COOLING: f64 = 1.0;
pub const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClimateSpec {
    pub mean_temp: f64,
    pub seasonal_amplitude: f64,
    pub diurnal_amplitude: f64,
    pub daily_noise_std: f64,
    pub hourly_noise_std: f64,
    /// Day of year of the seasonal maximum.
    pub warmest_day: f64,
    /// Location offsets are drawn uniformly from `±location_offset_spread`.
    pub location_offset_spread: f64,
    pub seed: u64,
}

impl Default for ClimateSpec {
    fn default() -> Self {
        ClimateSpec {
            mean_temp: 12.0,
            seasonal_amplitude: 10.0,
            diurnal_amplitude: 5.0,
            daily_noise_std: 2.0,
            hourly_noise_std: 0.5,
            warmest_day: 200.0,
            location_offset_spread: 2.0,
            seed: 0,
        }
    }
}

impl ClimateSpec {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("diurnal_amplitude", self.diurnal_amplitude),
            ("daily_noise_std", self.daily_noise_std),
            ("hourly_noise_std", self.hourly_noise_std),
            ("location_offset_spread", self.location_offset_spread),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.mean_temp.is_finite() || !self.warmest_day.is_finite() {
            return Err(Error::invalid("mean_temp and warmest_day must be finite"));
        }
        Ok(())
    }

    /// Noise-free temperature at a day of year and hour.
    pub fn expected(&self, offset: f64, day_of_year: u32, hour: usize) -> f64 {
        self.mean_temp
            + offset
            + self.seasonal_amplitude * (2.0 * PI * (f64::from(day_of_year) - self.warmest_day) / 365.0).cos()
            + self.diurnal_amplitude * (2.0 * PI * (hour as f64 - WARMEST_HOUR) / 24.0).cos()
    }
}

/// Per-location parameter shifts, linear in the location's climate offset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Heterogeneity {
    pub chill_req_per_degree: f64,
    pub forcing_req_per_degree: f64,
    pub base_temp_per_degree: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: ChillModelKind,
    pub params: MechanisticParams,
    /// Standard deviation of the Gaussian label jitter, in days.
    pub jitter_std: f64,
    #[serde(default)]
    pub heterogeneity: Heterogeneity,
    /// Locations are assigned to varieties round-robin.
    #[serde(default = "one")]
    pub n_varieties: usize,
    #[serde(default)]
    pub config: MechanisticConfig,
}

fn one() -> usize {
    1
}

impl OracleSpec {
    /// Utah oracle whose parameters lie on the default calibration lattice.
    pub fn utah_default() -> Self {
        OracleSpec {
            kind: ChillModelKind::Utah,
            params: MechanisticParams {
                chill_req: 800.0,
                forcing_req: 6000.0,
                base_temp: 4.0,
            },
            jitter_std: 0.0,
            heterogeneity: Heterogeneity::default(),
            n_varieties: 1,
            config: MechanisticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.jitter_std.is_finite() && self.jitter_std >= 0.0) {
            return Err(Error::invalid(format!("jitter_std must be >= 0, got {}", self.jitter_std)));
        }
        if self.n_varieties == 0 {
            return Err(Error::invalid("n_varieties must be >= 1"));
        }
        Ok(())
    }

    /// Parameters of a location with climate offset `offset`.
    pub fn params_at(&self, offset: f64) -> MechanisticParams {
        let h = &self.heterogeneity;
        MechanisticParams {
            chill_req: self.params.chill_req + h.chill_req_per_degree * offset,
            forcing_req: self.params.forcing_req + h.forcing_req_per_degree * offset,
            base_temp: self.params.base_temp + h.base_temp_per_degree * offset,
        }
    }
}

/// One season of hourly temperatures. The noise stream is derived from
/// `spec.seed` and `year_seed` only.
pub fn gen_season(spec: &ClimateSpec, location_offset: f64, season_start_year: i32, year_seed: u64) -> Result<SeasonSeries> {
    spec.validate()?;
    let mut rng = stream(&[spec.seed, year_seed]);
    let mut temps = Array2::zeros((SEASON_LENGTH, HOURS_PER_DAY));
    for (t, mut row) in temps.rows_mut().into_iter().enumerate() {
        let doy = season_index_to_date(t + 1, season_start_year)?.ordinal();
        let daily: f64 = rng.sample(StandardNormal);
        for (h, v) in row.iter_mut().enumerate() {
            let hourly: f64 = rng.sample(StandardNormal);
            *v = spec.expected(location_offset, doy, h)
                + spec.daily_noise_std * daily
                + spec.hourly_noise_std * hourly;
        }
    }
    SeasonSeries::new(temps, season_start_year)
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub climate: ClimateSpec,
    pub oracle: OracleSpec,
    pub locations: BTreeMap<String, LocationTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTruth {
    pub offset: f64,
    pub variety: String,
    pub params: MechanisticParams,
    /// Seasons regenerated colder because the oracle did not bloom.
    pub retried_seasons: Vec<i32>,
}

impl Truth {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn location_id(i: usize) -> String {
    format!("loc-{i:03}")
}

struct Generated {
    sample: Sample,
    retried: bool,
}

fn gen_one(climate: &ClimateSpec, oracle: &OracleSpec, loc: &Location, offset: f64, year: i32) -> Result<Generated> {
    let params = oracle.params_at(offset);
    let key = hash_str(&loc.location_id);
    for attempt in 0..MAX_ATTEMPTS {
        let year_seed = stream_seed(&[key, year as u64, attempt as u64]);
        let series = gen_season(climate, offset - RETRY_COOLING * attempt as f64, year, year_seed)?;
        let BloomDay::Day(day) = predict_bloom_hard(&series, &params, oracle.kind, &oracle.config) else {
            continue;
        };
        let mut rng = stream(&[climate.seed, year_seed, 0x6a17]);
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * oracle.jitter_std;
        let day = (day as i64 + jitter.round() as i64).clamp(1, SEASON_LENGTH as i64) as usize;
        let record = BloomRecord {
            location_id: loc.location_id.clone(),
            variety: loc.variety.clone(),
            season_start_year: year,
            bloom_day: day,
        };
        return Ok(Generated {
            sample: Sample {
                series: Arc::new(series),
                record,
            },
            retried: attempt > 0,
        });
    }
    Err(Error::RetryBudget {
        location: loc.location_id.clone(),
        year,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generates `n_locations × years` labelled seasons. Seasons where the oracle
/// never blooms are regenerated with a colder offset.
pub fn gen_dataset(climate: &ClimateSpec, oracle: &OracleSpec, n_locations: usize, years: &[i32]) -> Result<(Dataset, Truth)> {
    climate.validate()?;
    oracle.validate()?;
    if n_locations == 0 || years.is_empty() {
        return Err(Error::invalid("need at least one location and one year"));
    }
    let mut locations = BTreeMap::new();
    let mut offsets = Vec::with_capacity(n_locations);
    for i in 0..n_locations {
        let id = location_id(i);
        let mut rng = stream(&[climate.seed, hash_str(&id)]);
        let u: f64 = rng.random_range(-1.0..=1.0);
        let offset = u * climate.location_offset_spread;
        let loc = Location {
            location_id: id.clone(),
            latitude: 30.0 + 20.0 * rng.random::<f64>(),
            longitude: 130.0 + 10.0 * rng.random::<f64>(),
            variety: format!("variety-{}", i % oracle.n_varieties),
        };
        let params = oracle.params_at(offset);
        params
            .validate()
            .map_err(|e| Error::invalid(format!("oracle parameters at {id}: {e}")))?;
        locations.insert(id, loc);
        offsets.push(offset);
    }
    let jobs: Vec<(usize, i32)> = (0..n_locations).flat_map(|i| years.iter().map(move |&y| (i, y))).collect();
    let generated: Vec<Generated> = jobs
        .par_iter()
        .map(|&(i, year)| gen_one(climate, oracle, &locations[&location_id(i)], offsets[i], year))
        .collect::<Result<_>>()?;

    let mut truth = Truth {
        climate: climate.clone(),
        oracle: oracle.clone(),
        locations: BTreeMap::new(),
    };
    for (i, &offset) in offsets.iter().enumerate() {
        let id = location_id(i);
        truth.locations.insert(
            id.clone(),
            LocationTruth {
                offset,
                variety: locations[&id].variety.clone(),
                params: oracle.params_at(offset),
                retried_seasons: Vec::new(),
            },
        );
    }
    let mut samples = Vec::with_capacity(generated.len());
    for g in generated {
        if g.retried {
            let lt = truth.locations.get_mut(&g.sample.record.location_id).expect("known location");
            lt.retried_seasons.push(g.sample.record.season_start_year);
        }
        samples.push(g.sample);
    }
    Ok((Dataset::new(samples, locations)?, truth))
}
