//! Independent straight-line implementation of the hybrid model used as a
//! test oracle: plain loops over days, hours and neurons, no tape, no ndarray
//! arithmetic.
#![allow(dead_code)]

use dormancy::hybrid::{HybridParams, Mlp, HIDDEN};
use ndarray::Array2;

const H: usize = HIDDEN;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Network intermediates of one day.
#[derive(Clone)]
pub struct DayCache {
    pub x: [f64; 24],
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub z3: f64,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn day_cache(m: &Mlp, hours: &[f64]) -> DayCache {
    let mut x = [0.0; 24];
    for (k, v) in hours.iter().enumerate() {
        x[k] = (v - m.input_shift) * m.input_scale;
    }
    let mut z1 = vec![0.0; H];
    for j in 0..H {
        let mut acc = m.b1[[0, j]];
        for k in 0..24 {
            acc += m.w1[[j, k]] * x[k];
        }
        z1[j] = acc;
    }
    let mut z2 = vec![0.0; H];
    for i in 0..H {
        let mut acc = m.b2[[0, i]];
        for j in 0..H {
            acc += m.w2[[i, j]] * relu(z1[j]);
        }
        z2[i] = acc;
    }
    let mut z3 = m.b3[[0, 0]];
    for i in 0..H {
        z3 += m.w3[[0, i]] * relu(z2[i]);
    }
    DayCache { x, z1, z2, z3 }
}

#[derive(Clone, Copy)]
pub struct Scalars {
    pub chill_inflection: f64,
    pub forcing_inflection: f64,
    pub base_temp: f64,
    pub forcing_scale: f64,
    pub chill_slope: f64,
}

impl Scalars {
    pub fn of(p: &HybridParams) -> Self {
        Scalars {
            chill_inflection: p.chill_inflection,
            forcing_inflection: p.forcing_inflection,
            base_temp: p.base_temp,
            forcing_scale: p.forcing_scale,
            chill_slope: p.chill_slope,
        }
    }
}

/// Daily growing degree hours.
pub fn gdh(hours: &[f64], base: f64) -> f64 {
    let mut total = 0.0;
    for &t in hours {
        if t - base > 0.0 {
            total += t - base;
        }
    }
    total
}

/// `sigmoid(b) - sigmoid(a)`, taken through the upper tail when both are
/// near 1 so the difference keeps its digits.
fn cdf_step(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        sigmoid(-a) - sigmoid(-b)
    } else {
        sigmoid(b) - sigmoid(a)
    }
}

/// Per-day bloom probabilities from daily chill values.
pub fn probabilities(season: &Array2<f64>, chill: &[f64], s: &Scalars) -> Vec<f64> {
    let len = season.nrows() as f64;
    let mut c = 0.0;
    let mut f = 0.0;
    let mut prev = -s.forcing_inflection / s.forcing_scale;
    let mut p = Vec::with_capacity(chill.len());
    for (t, &ct) in chill.iter().enumerate() {
        c += ct;
        let gate = sigmoid(s.chill_slope * (c / len - s.chill_inflection));
        let row: Vec<f64> = season.row(t).to_vec();
        f += gdh(&row, s.base_temp) * gate;
        let z = (f / len - s.forcing_inflection) / s.forcing_scale;
        p.push(cdf_step(prev, z));
        prev = z;
    }
    p
}

pub fn nll_of(p: &[f64], observed: usize) -> f64 {
    -f64::max(p[observed - 1], 1e-12).ln()
}

/// Mean NLL over seasons for given daily chill values.
pub fn mean_nll(seasons: &[Array2<f64>], observed: &[usize], chill: &[Vec<f64>], s: &Scalars) -> f64 {
    let mut total = 0.0;
    for ((season, &y), c) in seasons.iter().zip(observed).zip(chill) {
        total += nll_of(&probabilities(season, c, s), y);
    }
    total / seasons.len() as f64
}

/// Daily chill of the network for every day of every season.
pub fn network_chill(m: &Mlp, seasons: &[Array2<f64>]) -> Vec<Vec<f64>> {
    seasons
        .iter()
        .map(|s| {
            s.rows()
                .into_iter()
                .map(|r| sigmoid(day_cache(m, r.as_slice().unwrap()).z3))
                .collect()
        })
        .collect()
}

/// Finite differences of one coordinate. `central` is the five-point central
/// stencil, `central3` the plain three-point one. `kink_up` / `kink_down`
/// report whether a ReLU or hinge input changes sign between the point and
/// `+2h` / `-2h`; the one-sided stencils are second order.
#[derive(Debug, Clone, Copy)]
pub struct FdEntry {
    pub central: f64,
    pub central3: f64,
    pub forward: f64,
    pub backward: f64,
    pub kink_up: bool,
    pub kink_down: bool,
}

impl FdEntry {
    pub fn straddles_kink(&self) -> bool {
        self.kink_up || self.kink_down
    }
}

pub struct FdProblem<'a> {
    pub mlp: &'a Mlp,
    pub scalars: Scalars,
    pub seasons: &'a [Array2<f64>],
    pub observed: &'a [usize],
    caches: Vec<Vec<DayCache>>,
}

/// Which network coordinate is perturbed.
#[derive(Clone, Copy)]
enum Coord {
    W1(usize, usize),
    B1(usize),
    W2(usize, usize),
    B2(usize),
    W3(usize),
    B3,
}

impl<'a> FdProblem<'a> {
    pub fn new(mlp: &'a Mlp, scalars: Scalars, seasons: &'a [Array2<f64>], observed: &'a [usize]) -> Self {
        let caches = seasons
            .iter()
            .map(|s| {
                s.rows()
                    .into_iter()
                    .map(|r| day_cache(mlp, r.as_slice().unwrap()))
                    .collect()
            })
            .collect();
        FdProblem {
            mlp,
            scalars,
            seasons,
            observed,
            caches,
        }
    }

    /// Daily chill with one network coordinate shifted by `delta`, computed
    /// incrementally from the cached intermediates. Also reports sign flips.
    fn shifted_chill(&self, coord: Coord, delta: f64) -> (Vec<Vec<f64>>, bool) {
        let m = self.mlp;
        let mut flipped = false;
        let chill = self
            .caches
            .iter()
            .map(|days| {
                days.iter()
                    .map(|d| {
                        let z3 = match coord {
                            Coord::B3 => d.z3 + delta,
                            Coord::W3(i) => d.z3 + delta * relu(d.z2[i]),
                            Coord::W2(i, _) | Coord::B2(i) => {
                                let input = if let Coord::W2(_, j) = coord { relu(d.z1[j]) } else { 1.0 };
                                let z2i = d.z2[i] + delta * input;
                                flipped |= (z2i > 0.0) != (d.z2[i] > 0.0);
                                d.z3 + m.w3[[0, i]] * (relu(z2i) - relu(d.z2[i]))
                            }
                            Coord::W1(j, _) | Coord::B1(j) => {
                                let input = if let Coord::W1(_, k) = coord { d.x[k] } else { 1.0 };
                                let z1j = d.z1[j] + delta * input;
                                flipped |= (z1j > 0.0) != (d.z1[j] > 0.0);
                                let dh = relu(z1j) - relu(d.z1[j]);
                                let mut z3 = m.b3[[0, 0]];
                                for i in 0..H {
                                    let z2i = d.z2[i] + m.w2[[i, j]] * dh;
                                    flipped |= (z2i > 0.0) != (d.z2[i] > 0.0);
                                    z3 += m.w3[[0, i]] * relu(z2i);
                                }
                                z3
                            }
                        };
                        sigmoid(z3)
                    })
                    .collect()
            })
            .collect();
        (chill, flipped)
    }

    fn entry(&self, h: f64, mut eval: impl FnMut(f64) -> (f64, bool)) -> FdEntry {
        let (f0, _) = eval(0.0);
        let (fp, _) = eval(h);
        let (fm, _) = eval(-h);
        // sign changes are monotone in the offset, so checking ±2h covers ±h
        let (fp2, kink_up) = eval(2.0 * h);
        let (fm2, kink_down) = eval(-2.0 * h);
        FdEntry {
            central: (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h),
            central3: (fp - fm) / (2.0 * h),
            forward: (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h),
            backward: (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h),
            kink_up,
            kink_down,
        }
    }

    fn base_chill(&self) -> Vec<Vec<f64>> {
        self.caches
            .iter()
            .map(|days| days.iter().map(|d| sigmoid(d.z3)).collect())
            .collect()
    }

    /// Number of trainable coordinates.
    pub fn len(&self) -> usize {
        let n = H;
        n * 24 + n + n * n + n + n + 1 + 4
    }

    fn coord(&self, mut idx: usize) -> Option<Coord> {
        let n = H;
        if idx < n * 24 {
            return Some(Coord::W1(idx / 24, idx % 24));
        }
        idx -= n * 24;
        if idx < n {
            return Some(Coord::B1(idx));
        }
        idx -= n;
        if idx < n * n {
            return Some(Coord::W2(idx / n, idx % n));
        }
        idx -= n * n;
        if idx < n {
            return Some(Coord::B2(idx));
        }
        idx -= n;
        if idx < n {
            return Some(Coord::W3(idx));
        }
        idx -= n;
        (idx == 0).then_some(Coord::B3)
    }

    /// Finite difference of coordinate `idx`, in the order of the library
    /// gradient: w1, b1, w2, b2, w3, b3 (row-major), then chill inflection,
    /// forcing inflection, base temperature, forcing scale.
    pub fn entry_at(&self, idx: usize, h: f64) -> FdEntry {
        let s = self.scalars;
        if let Some(c) = self.coord(idx) {
            return self.entry(h, |d| {
                if d == 0.0 {
                    return (mean_nll(self.seasons, self.observed, &self.base_chill(), &s), false);
                }
                let (chill, flipped) = self.shifted_chill(c, d);
                (mean_nll(self.seasons, self.observed, &chill, &s), flipped)
            });
        }
        let which = idx - (self.len() - 4);
        let chill = self.base_chill();
        self.entry(h, |d| {
            let mut sc = s;
            match which {
                0 => sc.chill_inflection += d,
                1 => sc.forcing_inflection += d,
                2 => sc.base_temp += d,
                _ => sc.forcing_scale += d,
            }
            let kink = d != 0.0 && which == 2 && self.hinge_crosses(s.base_temp, sc.base_temp);
            (mean_nll(self.seasons, self.observed, &chill, &sc), kink)
        })
    }

    fn hinge_crosses(&self, a: f64, b: f64) -> bool {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.seasons.iter().any(|s| s.iter().any(|&t| t >= lo && t <= hi))
    }
}

/// Outcome of comparing one autodiff coordinate with finite differences.
#[derive(Debug, Clone, Copy)]
pub struct CoordCheck {
    pub autodiff: f64,
    pub fd: FdEntry,
    pub h: f64,
    pub passed: bool,
    pub rel_err: f64,
}

pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

pub fn close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff < ABS_TOL || diff <= REL_TOL * a.abs().max(b.abs())
}

/// Compares one autodiff coordinate with finite differences at step `h`.
/// The five-point central difference is the reference unless a kink lies
/// within `2h`: then the second-order stencil on the kink-free side is used,
/// and when both sides have kinks the autodiff value must lie between the two
/// one-sided estimates.
pub fn check_coordinate(problem: &FdProblem<'_>, idx: usize, autodiff: f64, h: f64) -> CoordCheck {
    let fd = problem.entry_at(idx, h);
    let reference = match (fd.kink_up, fd.kink_down) {
        (false, false) => fd.central,
        (true, false) => fd.backward,
        (false, true) => fd.forward,
        (true, true) => {
            let lo = fd.forward.min(fd.backward);
            let hi = fd.forward.max(fd.backward);
            if autodiff >= lo && autodiff <= hi {
                autodiff
            } else if autodiff < lo {
                lo
            } else {
                hi
            }
        }
    };
    let rel_err = (autodiff - reference).abs() / autodiff.abs().max(reference.abs()).max(f64::MIN_POSITIVE);
    CoordCheck {
        autodiff,
        fd,
        h,
        passed: close(autodiff, reference),
        rel_err,
    }
}

/// Smallest distance any ReLU or hinge input keeps from its kink in a random
/// problem. Finite-difference stencils of ±2·1e-4 on weights multiplying
/// inputs of up to ~20 °C move pre-activations by at most ~4e-3.
pub const KINK_MARGIN: f64 = 1e-2;

/// The point within `max_shift` of `center` farthest from every value, and
/// that distance.
fn clear_of(values: &[f64], center: f64, max_shift: f64) -> (f64, f64) {
    (0..=1000)
        .map(|k| center + max_shift * (k as f64 / 500.0 - 1.0))
        .map(|c| (c, values.iter().fold(f64::INFINITY, |m, v| m.min((v - c).abs()))))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// Nudges hidden biases so that no day's pre-activation lies within
/// `KINK_MARGIN` of zero. Returns false if some unit cannot be cleared.
fn clear_relu_kinks(mlp: &mut Mlp, seasons: &[Array2<f64>]) -> bool {
    let rows = || seasons.iter().flat_map(|s| s.rows().into_iter().map(|r| r.to_vec()));
    let caches: Vec<DayCache> = rows().map(|r| day_cache(mlp, &r)).collect();
    for j in 0..H {
        let z: Vec<f64> = caches.iter().map(|d| d.z1[j] - mlp.b1[[0, j]]).collect();
        let (b, margin) = clear_of(&z.iter().map(|v| -v).collect::<Vec<_>>(), mlp.b1[[0, j]], 0.5);
        if margin < KINK_MARGIN {
            return false;
        }
        mlp.b1[[0, j]] = b;
    }
    let caches: Vec<DayCache> = rows().map(|r| day_cache(mlp, &r)).collect();
    for i in 0..H {
        let z: Vec<f64> = caches.iter().map(|d| d.z2[i] - mlp.b2[[0, i]]).collect();
        let (b, margin) = clear_of(&z.iter().map(|v| -v).collect::<Vec<_>>(), mlp.b2[[0, i]], 0.5);
        if margin < KINK_MARGIN {
            return false;
        }
        mlp.b2[[0, i]] = b;
    }
    true
}

/// A random miniature problem: seasons of `len` days, a randomly initialized
/// network with perturbed biases, and observed days near the mode of the
/// model's own bloom distribution so no probability sits on the floor.
/// `random_fd_problem` also nudges biases and the base temperature so that
/// every ReLU and hinge input stays `KINK_MARGIN` away from its kink; that
/// needs short seasons.
pub fn random_fd_problem(rng: &mut impl rand::Rng, n_seasons: usize, len: usize) -> (HybridParams, Vec<Array2<f64>>, Vec<usize>) {
    random_instance(rng, n_seasons, len, true)
}

/// As [`random_fd_problem`] without moving anything away from the kinks.
pub fn random_problem(rng: &mut impl rand::Rng, n_seasons: usize, len: usize) -> (HybridParams, Vec<Array2<f64>>, Vec<usize>) {
    random_instance(rng, n_seasons, len, false)
}

fn random_instance(
    rng: &mut impl rand::Rng,
    n_seasons: usize,
    len: usize,
    clear_kinks: bool,
) -> (HybridParams, Vec<Array2<f64>>, Vec<usize>) {
    use dormancy::hybrid::ChillResponse;
    loop {
        let seasons: Vec<Array2<f64>> = (0..n_seasons)
            .map(|_| {
                let mut a = Array2::zeros((len, 24));
                for t in 0..len {
                    let mean: f64 = rng.random_range(-2.0..16.0);
                    for h in 0..24 {
                        let diurnal = 4.0 * (2.0 * std::f64::consts::PI * (h as f64 - 14.0) / 24.0).cos();
                        a[[t, h]] = mean + diurnal + rng.random_range(-0.5..0.5);
                    }
                }
                a
            })
            .collect();
        let mut mlp = Mlp::init(rng);
        mlp.b1.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        mlp.b2.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        mlp.b3[[0, 0]] = rng.random_range(-1.0..1.0);
        let mut base_temp = rng.random_range(2.0..8.0);
        if clear_kinks {
            if !clear_relu_kinks(&mut mlp, &seasons) {
                continue;
            }
            let temps: Vec<f64> = seasons.iter().flat_map(|s| s.iter().copied()).collect();
            let (b, margin) = clear_of(&temps, base_temp, 0.5);
            if margin < KINK_MARGIN {
                continue;
            }
            base_temp = b;
        }
        let mut params = HybridParams {
            chill: ChillResponse::Mlp(mlp.clone()),
            chill_inflection: rng.random_range(0.15..0.45),
            forcing_inflection: 0.0,
            base_temp,
            chill_slope: 50.0,
            forcing_scale: 1.0,
        };
        let chill = network_chill(&mlp, &seasons);
        // forcing inflection at the normalized forcing of a mid-to-late day
        let target = rng.random_range(len / 2..len - 2);
        let mut at_target = Vec::new();
        for (season, c) in seasons.iter().zip(&chill) {
            let sc = Scalars::of(&params);
            let mut cum = 0.0;
            let mut f = 0.0;
            for t in 0..=target {
                cum += c[t];
                let gate = sigmoid(sc.chill_slope * (cum / len as f64 - sc.chill_inflection));
                f += gdh(season.row(t).as_slice().unwrap(), sc.base_temp) * gate;
            }
            at_target.push(f / len as f64);
        }
        at_target.sort_by(f64::total_cmp);
        params.forcing_inflection = at_target[at_target.len() / 2];
        if params.forcing_inflection <= 1e-3 {
            continue;
        }
        // spread the bloom CDF over a few days, as on a full-length season,
        // rather than a single miniature day
        let per_day = params.forcing_inflection / (target + 1) as f64;
        params.forcing_scale = (per_day * rng.random_range(0.5..2.0)).max(0.01);
        let sc = Scalars::of(&params);
        let mut observed = Vec::new();
        let mut ok = true;
        for (season, c) in seasons.iter().zip(&chill) {
            let p = probabilities(season, c, &sc);
            let mode = (0..len).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            let y = (mode as i64 + rng.random_range(-1..=1)).clamp(0, len as i64 - 1) as usize;
            ok &= mode + 1 < len && p[y] > 0.05;
            observed.push(y + 1);
        }
        if ok {
            return (params, seasons, observed);
        }
    }
}
