//! Classical chill models, Growing Degree Hours forcing and the two-stage
//! hard-threshold bloom predictor.
//!
//! Chill accumulates day by day until it first reaches the chill requirement;
//! from that day on (inclusive) forcing accumulates, and bloom is the first day
//! forcing reaches the forcing requirement.

pub mod constants;
mod grid;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::domain::{daily_stats, SeasonSeries, HOURS_PER_DAY, SEASON_LENGTH};
use crate::error::{Error, Result};

pub use grid::{grid_search, linspace, FittedGroup, GridSearch, GridSpec};

use constants::{CHILL_HOURS_LOWER, UTAH_ABOVE_LAST, UTAH_TABLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChillModelKind {
    ChillHours,
    Utah,
    ChillDays,
}

impl ChillModelKind {
    pub const ALL: [ChillModelKind; 3] = [
        ChillModelKind::ChillHours,
        ChillModelKind::Utah,
        ChillModelKind::ChillDays,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ChillModelKind::ChillHours => "chill-hours",
            ChillModelKind::Utah => "utah",
            ChillModelKind::ChillDays => "chill-days",
        }
    }
}

impl std::fmt::Display for ChillModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChillModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chill-hours" | "chill_hours" | "chillhours" => Ok(ChillModelKind::ChillHours),
            "utah" => Ok(ChillModelKind::Utah),
            "chill-days" | "chill_days" | "chilldays" => Ok(ChillModelKind::ChillDays),
            _ => Err(Error::invalid(format!(
                "unknown chill model '{s}' (expected chill-hours, utah or chill-days)"
            ))),
        }
    }
}

/// Chill requirement, forcing requirement and base temperature, in the
/// native units of the chill model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanisticParams {
    pub chill_req: f64,
    pub forcing_req: f64,
    pub base_temp: f64,
}

impl MechanisticParams {
    pub fn validate(&self) -> Result<()> {
        if self.chill_req.is_nan() || self.chill_req < 0.0 || self.forcing_req.is_nan() || self.forcing_req < 0.0 {
            return Err(Error::invalid(format!(
                "requirements must be non-negative, got chill {} forcing {}",
                self.chill_req, self.forcing_req
            )));
        }
        if !self.base_temp.is_finite() {
            return Err(Error::invalid("base temperature must be finite"));
        }
        Ok(())
    }
}

/// Model details that vary between published implementations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanisticConfig {
    pub chill_hours_upper: f64,
    /// Clamp cumulative Utah chill at zero after every day.
    pub floor_utah: bool,
}

impl Default for MechanisticConfig {
    fn default() -> Self {
        MechanisticConfig {
            chill_hours_upper: constants::CHILL_HOURS_UPPER,
            floor_utah: true,
        }
    }
}

/// Number of hours inside the chill band `[0, upper]`.
pub fn chill_hours(day_temps: ArrayView1<'_, f64>, upper_threshold: f64) -> f64 {
    day_temps
        .iter()
        .filter(|&&t| (CHILL_HOURS_LOWER..=upper_threshold).contains(&t))
        .count() as f64
}

pub fn utah_weight(temp: f64) -> f64 {
    UTAH_TABLE
        .iter()
        .find(|(upper, _)| temp <= *upper)
        .map_or(UTAH_ABOVE_LAST, |&(_, w)| w)
}

/// Sum of hourly Utah weights over one day.
pub fn utah_chill(day_temps: ArrayView1<'_, f64>) -> f64 {
    day_temps.iter().map(|&t| utah_weight(t)).sum()
}

/// Daily chill days (Cesaraccio et al. 2004, Agric. For. Meteorol. 126,
/// table 1), returned as a non-negative magnitude. `base_temp` is the chill
/// threshold Tc. The published cases assume `Tc >= 0` and `Tx > 0`; days
/// entirely at or below 0 °C and negative thresholds contribute nothing.
pub fn chill_days(day_min: f64, day_max: f64, day_mean: f64, base_temp: f64) -> Result<f64> {
    let (tn, tx, tm, tc) = (day_min, day_max, day_mean, base_temp);
    if ![tn, tx, tm, tc].iter().all(|v| v.is_finite()) || tn > tm || tm > tx {
        return Err(Error::InvalidDay {
            min: tn,
            mean: tm,
            max: tx,
        });
    }
    if tc < 0.0 || tx <= 0.0 {
        return Ok(0.0);
    }
    let value = if tn >= 0.0 {
        if tc <= tn {
            // case 1: 0 <= Tc <= Tn <= Tx
            0.0
        } else if tc < tx {
            // case 2: 0 <= Tn <= Tc < Tx
            (tm - tn) - (tx - tc).powi(2) / (2.0 * (tx - tn))
        } else {
            // case 3: 0 <= Tn <= Tx <= Tc
            tm - tn
        }
    } else if tx <= tc {
        // case 4: Tn < 0 < Tx <= Tc
        tx / (tx - tn) * (tx / 2.0)
    } else {
        // case 5: Tn < 0 < Tc < Tx
        tx / (tx - tn) * (tx / 2.0) - (tx - tc).powi(2) / (2.0 * (tx - tn))
    };
    Ok(value.max(0.0))
}

/// Growing Degree Hours: `sum_h max(0, T_h - base_temp)`.
pub fn gdh_forcing(day_temps: ArrayView1<'_, f64>, base_temp: f64) -> f64 {
    day_temps.iter().map(|&t| (t - base_temp).max(0.0)).sum()
}

/// Daily chill units of one day under `kind`.
pub fn daily_chill(
    day_temps: ArrayView1<'_, f64>,
    kind: ChillModelKind,
    base_temp: f64,
    config: &MechanisticConfig,
) -> f64 {
    match kind {
        ChillModelKind::ChillHours => chill_hours(day_temps, config.chill_hours_upper),
        ChillModelKind::Utah => utah_chill(day_temps),
        ChillModelKind::ChillDays => {
            let day: Vec<f64> = day_temps.to_vec();
            let stats = daily_stats(&day).expect("season series values are validated finite");
            chill_days(stats.min, stats.max, stats.mean, base_temp)
                .expect("daily_stats yields ordered statistics")
        }
    }
}

/// Predicted bloom day of the hard-threshold model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BloomDay {
    Day(usize),
    NoBloom,
}

impl BloomDay {
    /// Season index used for scoring; `NoBloom` counts as the last day.
    pub fn scored(&self, season_len: usize) -> usize {
        match *self {
            BloomDay::Day(t) => t,
            BloomDay::NoBloom => season_len,
        }
    }
}

/// Two-stage accumulation over pre-computed daily units. `chill` and `forcing`
/// must have equal length.
pub fn accumulate_hard(chill: &[f64], forcing: &[f64], params: &MechanisticParams, floor_chill: bool) -> BloomDay {
    debug_assert_eq!(chill.len(), forcing.len());
    let mut chill_sum = 0.0;
    let mut chilled = false;
    let mut forcing_sum = 0.0;
    for (t, (&c, &f)) in chill.iter().zip(forcing).enumerate() {
        if !chilled {
            chill_sum += c;
            if floor_chill {
                chill_sum = f64::max(chill_sum, 0.0);
            }
            chilled = chill_sum >= params.chill_req;
        }
        if chilled {
            forcing_sum += f;
            if forcing_sum >= params.forcing_req {
                return BloomDay::Day(t + 1);
            }
        }
    }
    BloomDay::NoBloom
}

/// Hard-threshold bloom prediction for one season.
pub fn predict_bloom_hard(
    series: &SeasonSeries,
    params: &MechanisticParams,
    kind: ChillModelKind,
    config: &MechanisticConfig,
) -> BloomDay {
    let (chill, forcing) = daily_units(series, kind, params.base_temp, config);
    accumulate_hard(&chill, &forcing, params, kind == ChillModelKind::Utah && config.floor_utah)
}

/// Daily chill and forcing units for a whole season.
pub fn daily_units(
    series: &SeasonSeries,
    kind: ChillModelKind,
    base_temp: f64,
    config: &MechanisticConfig,
) -> (Vec<f64>, Vec<f64>) {
    let temps = series.temps();
    let mut chill = Vec::with_capacity(SEASON_LENGTH);
    let mut forcing = Vec::with_capacity(SEASON_LENGTH);
    for day in temps.rows() {
        debug_assert_eq!(day.len(), HOURS_PER_DAY);
        chill.push(daily_chill(day, kind, base_temp, config));
        forcing.push(gdh_forcing(day, base_temp));
    }
    (chill, forcing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1, Array2};
    use proptest::prelude::*;

    fn day(v: f64) -> Array1<f64> {
        Array1::from_elem(24, v)
    }

    #[test]
    fn chill_hours_examples() {
        assert_eq!(chill_hours(day(5.0).view(), 7.2), 24.0);
        assert_eq!(chill_hours(day(-10.0).view(), 7.2), 0.0);
        assert_eq!(chill_hours(day(0.0).view(), 7.2), 24.0);
        assert_eq!(chill_hours(day(7.2).view(), 7.2), 24.0);
        assert_eq!(chill_hours(day(7.3).view(), 7.2), 0.0);
    }

    #[test]
    fn utah_anchor_points() {
        // optimum at 6 °C, no effect at 0 °C and 12.5 °C
        let max = UTAH_TABLE.iter().map(|r| r.1).fold(f64::MIN, f64::max);
        assert_eq!(utah_weight(6.0), max);
        assert_eq!(max, constants::UTAH_MAX_WEIGHT);
        assert_eq!(utah_chill(day(6.0).view()), 24.0 * max);
        assert_eq!(utah_chill(day(0.0).view()), 0.0);
        assert_eq!(utah_weight(12.5), 0.0);
        assert_eq!(utah_weight(25.0), UTAH_ABOVE_LAST);
    }

    #[test]
    fn gdh_examples() {
        assert_eq!(gdh_forcing(day(4.0).view(), 4.0), 0.0);
        assert_eq!(gdh_forcing(day(5.0).view(), 4.0), 24.0);
        let v = arr1(&[1.0, 6.5, 4.0, 10.0]);
        assert_eq!(gdh_forcing(v.view(), 4.0), 2.5 + 6.0);
    }

    #[test]
    fn chill_days_warm_day_is_zero() {
        assert_eq!(chill_days(12.0, 20.0, 16.0, 7.0).unwrap(), 0.0);
        assert!(chill_days(5.0, 4.0, 4.5, 7.0).is_err());
        assert!(chill_days(1.0, 4.0, 5.0, 7.0).is_err());
    }

    #[test]
    fn chill_days_is_continuous_across_case_boundaries() {
        let eps = 1e-9;
        // case 2 -> case 3 as Tx approaches Tc from above
        let a = chill_days(2.0, 7.0 + eps, 4.0, 7.0).unwrap();
        let b = chill_days(2.0, 7.0, 4.0, 7.0).unwrap();
        assert!((a - b).abs() < 1e-6);
        // case 4 -> case 5 as Tx crosses Tc
        let a = chill_days(-3.0, 7.0 + eps, 2.0, 7.0).unwrap();
        let b = chill_days(-3.0, 7.0, 2.0, 7.0).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn hard_trivial_cases() {
        let series = SeasonSeries::new(Array2::from_elem((SEASON_LENGTH, 24), 5.0), 2000).unwrap();
        let cfg = MechanisticConfig::default();
        for kind in ChillModelKind::ALL {
            let p = MechanisticParams {
                chill_req: 0.0,
                forcing_req: 0.0,
                base_temp: 3.0,
            };
            assert_eq!(predict_bloom_hard(&series, &p, kind, &cfg), BloomDay::Day(1));
            let p = MechanisticParams {
                forcing_req: f64::INFINITY,
                ..p
            };
            assert_eq!(predict_bloom_hard(&series, &p, kind, &cfg), BloomDay::NoBloom);
        }
        assert_eq!(BloomDay::NoBloom.scored(SEASON_LENGTH), 274);
    }

    proptest! {
        #[test]
        fn unit_ranges(v in proptest::collection::vec(-30.0f64..35.0, 24), tb in -5.0f64..15.0) {
            let d = Array1::from(v);
            let ch = chill_hours(d.view(), 7.2);
            prop_assert!((0.0..=24.0).contains(&ch) && ch.fract() == 0.0);
            prop_assert!(gdh_forcing(d.view(), tb) >= 0.0);
            let u = utah_chill(d.view());
            prop_assert!((-24.0..=24.0).contains(&u));
        }
    }
}
