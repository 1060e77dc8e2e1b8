use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{daily_chill, gdh_forcing, ChillModelKind, MechanisticConfig, MechanisticParams};
use crate::domain::{Dataset, Grouping, Sample};
use crate::error::{Error, Result};

/// Candidate values per axis, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub chill_req: Vec<f64>,
    pub forcing_req: Vec<f64>,
    pub base_temp: Vec<f64>,
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl GridSpec {
    /// Desk-scale default grid: 20 chill steps over a model-specific range,
    /// 20 forcing steps over [1000, 20000] GDH and base temperatures 0..=15 °C.
    pub fn default_for(kind: ChillModelKind) -> Self {
        let chill_req = match kind {
            ChillModelKind::ChillHours | ChillModelKind::Utah => linspace(100.0, 2000.0, 20),
            ChillModelKind::ChillDays => linspace(20.0, 400.0, 20),
        };
        GridSpec {
            chill_req,
            forcing_req: linspace(1000.0, 20000.0, 20),
            base_temp: (0..=15).map(f64::from).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("chill_req", &self.chill_req),
            ("forcing_req", &self.forcing_req),
            ("base_temp", &self.base_temp),
        ] {
            if axis.is_empty() {
                return Err(Error::invalid(format!("grid axis {name} is empty")));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "grid axis {name} must be finite and strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chill_req.len() * self.forcing_req.len() * self.base_temp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGroup {
    pub params: MechanisticParams,
    pub train_mse: f64,
    pub n_samples: usize,
}

/// Fitted parameters per group key, as written to `params_<model>_<grouping>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub model: ChillModelKind,
    pub grouping: Grouping,
    pub config: MechanisticConfig,
    pub groups: BTreeMap<String, FittedGroup>,
    /// Group keys known from the location table that had no training samples.
    pub skipped: Vec<String>,
}

impl GridSearch {
    pub fn file_name(&self) -> String {
        format!("params_{}_{}.json", self.model, self.grouping)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn params_for(&self, key: &str) -> Result<&MechanisticParams> {
        self.groups
            .get(key)
            .map(|g| &g.params)
            .ok_or_else(|| Error::MissingGroup(key.to_string()))
    }
}

/// Squared-error sums for every (chill, forcing) pair at one base temperature.
/// Errors are integer day differences, so the sums are exact.
fn sse_table(
    samples: &[&Sample],
    kind: ChillModelKind,
    base_temp: f64,
    grid: &GridSpec,
    config: &MechanisticConfig,
) -> Vec<u64> {
    let n_force = grid.forcing_req.len();
    let mut sse = vec![0u64; grid.chill_req.len() * n_force];
    let floor = kind == ChillModelKind::Utah && config.floor_utah;
    let mut running_max = Vec::new();
    let mut forcing_from = Vec::new();
    for sample in samples {
        let temps = sample.series.temps();
        let season_len = temps.nrows();
        let observed = sample.record.bloom_day as i64;
        let gdh: Vec<f64> = temps.rows().into_iter().map(|d| gdh_forcing(d, base_temp)).collect();

        // running maximum of the cumulative chill: its first crossing of a
        // requirement is the first crossing of the cumulative sum itself
        running_max.clear();
        let (mut chill_sum, mut best) = (0.0f64, f64::NEG_INFINITY);
        for day in temps.rows() {
            chill_sum += daily_chill(day, kind, base_temp, config);
            if floor {
                chill_sum = chill_sum.max(0.0);
            }
            best = best.max(chill_sum);
            running_max.push(best);
        }

        for (j, &chill_req) in grid.chill_req.iter().enumerate() {
            let start = running_max.partition_point(|&c| c < chill_req);
            let row = &mut sse[j * n_force..(j + 1) * n_force];
            if start == season_len {
                let err = (season_len as i64 - observed).pow(2) as u64;
                row.iter_mut().for_each(|s| *s += err);
                continue;
            }
            // forcing accumulated from the chill day on, summed in the same
            // order as the sequential predictor
            forcing_from.clear();
            let mut f = 0.0;
            for &g in &gdh[start..] {
                f += g;
                forcing_from.push(f);
            }
            for (i, &forcing_req) in grid.forcing_req.iter().enumerate() {
                let k = forcing_from.partition_point(|&f| f < forcing_req);
                let predicted = if k == forcing_from.len() {
                    season_len
                } else {
                    start + k + 1
                };
                row[i] += (predicted as i64 - observed).pow(2) as u64;
            }
        }
    }
    sse
}

/// Exhaustive grid search minimizing training MSE per group. Ties resolve to
/// the lexicographically smallest (chill, forcing, base temperature).
pub fn grid_search(
    train: &Dataset,
    kind: ChillModelKind,
    grid: &GridSpec,
    grouping: Grouping,
    config: &MechanisticConfig,
) -> Result<GridSearch> {
    grid.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("grid search needs a non-empty training set"));
    }
    let groups = train.groups(grouping);
    let jobs: Vec<(&String, usize)> = groups
        .keys()
        .flat_map(|k| (0..grid.base_temp.len()).map(move |b| (k, b)))
        .collect();
    let tables: Vec<Vec<u64>> = jobs
        .par_iter()
        .map(|&(key, b)| {
            let samples: Vec<&Sample> = groups[key].iter().map(|&i| &train.samples()[i]).collect();
            sse_table(&samples, kind, grid.base_temp[b], grid, config)
        })
        .collect();

    let n_force = grid.forcing_req.len();
    let mut best: BTreeMap<String, (u64, usize, usize, usize)> = BTreeMap::new();
    for (&(key, b), table) in jobs.iter().zip(&tables) {
        for (idx, &sse) in table.iter().enumerate() {
            let cand = (sse, idx / n_force, idx % n_force, b);
            best.entry(key.clone())
                .and_modify(|cur| {
                    if cand < *cur {
                        *cur = cand;
                    }
                })
                .or_insert(cand);
        }
    }

    let fitted = best
        .into_iter()
        .map(|(key, (sse, j, i, b))| {
            let n = groups[&key].len();
            let group = FittedGroup {
                params: MechanisticParams {
                    chill_req: grid.chill_req[j],
                    forcing_req: grid.forcing_req[i],
                    base_temp: grid.base_temp[b],
                },
                train_mse: sse as f64 / n as f64,
                n_samples: n,
            };
            (key, group)
        })
        .collect::<BTreeMap<_, _>>();

    let mut skipped: Vec<String> = train
        .locations()
        .values()
        .map(|l| grouping.key_of_location(l).to_string())
        .filter(|k| !fitted.contains_key(k))
        .collect();
    skipped.sort();
    skipped.dedup();

    Ok(GridSearch {
        model: kind,
        grouping,
        config: *config,
        groups: fitted,
        skipped,
    })
}
