//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

mod common;

use std::time::Instant;

use dormancy::datagen::{gen_dataset, gen_season, ClimateSpec, Heterogeneity, OracleSpec};
use dormancy::domain::{Dataset, Grouping, SEASON_LENGTH};
use dormancy::eval::{
    evaluate, export_response_density, EvalReport, Fitter, HybridFitter, MechanisticFitter, MedianFitter, Setting,
    SplitSpec,
};
use dormancy::hybrid::{
    forward, forward_batch, loss_and_gradient, predict_bloom_soft, ChillResponse, HybridParams, Mlp, SeasonBatch,
    TrainConfig, CHILL_SLOPE,
};
use dormancy::mechanistic::{
    accumulate_hard, chill_hours, gdh_forcing, grid_search, BloomDay, ChillModelKind, GridSpec, MechanisticConfig,
    MechanisticParams,
};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn years(first: i32, n: i32) -> Vec<i32> {
    (first..first + n).collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mae(report: &EvalReport) -> Result<f64, String> {
    if !report.warnings.is_empty() {
        return Err(format!("{} failed seeds: {:?}", report.model, report.warnings));
    }
    report.mean_mae.ok_or_else(|| format!("{} produced no MAE", report.model))
}

fn run_eval(fitter: &dyn Fitter, data: &Dataset, setting: Setting, seeds: &[u64]) -> Result<f64, String> {
    let report = evaluate(fitter, data, &SplitSpec::new(setting, 0), seeds).map_err(|e| e.to_string())?;
    mae(&report)
}

fn hybrid(epochs: usize, utah_ablation: bool) -> HybridFitter {
    HybridFitter { config: TrainConfig { epochs, ..TrainConfig::default() }, utah_ablation }
}

/// Autodiff against finite differences on 10 parameter points × 5 seasons.
fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut total, mut failed, mut kinked, mut three_point_ok) = (0, 0, 0, 0);
    let mut worst = 0.0f64;
    let mut first_failure = None;
    for point in 0..10 {
        let (params, seasons, observed) = common::random_fd_problem(&mut rng, 5, 20);
        let views: Vec<ArrayView2<'_, f64>> = seasons.iter().map(|s| s.view()).collect();
        let batch = SeasonBatch::new(&views, Some(&observed), false).map_err(|e| e.to_string())?;
        let (_, grads) = loss_and_gradient(&batch, &params).map_err(|e| e.to_string())?;
        let ChillResponse::Mlp(mlp) = &params.chill else { unreachable!() };
        let problem = common::FdProblem::new(mlp, common::Scalars::of(&params), &seasons, &observed);
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        if flat.len() != problem.len() {
            return Err(format!("gradient has {} coordinates, expected {}", flat.len(), problem.len()));
        }
        for (idx, &ad) in flat.iter().enumerate() {
            let c = common::check_coordinate(&problem, idx, ad, 1e-4);
            let e = problem.entry_at(idx, 1e-4);
            total += 1;
            if e.straddles_kink() {
                kinked += 1;
            } else if (ad - e.central).abs() >= common::ABS_TOL {
                // coordinates below the absolute floor pass regardless
                worst = worst.max(c.rel_err);
            }
            if common::close(ad, e.central3) {
                three_point_ok += 1;
            }
            if !c.passed {
                failed += 1;
                first_failure.get_or_insert(format!("point {point} coordinate {idx}: {c:?}"));
            }
        }
    }
    check(
        failed == 0,
        format!(
            "{total} coordinates, {failed} failed, {kinked} kink-bracketed, worst rel err above the absolute floor {worst:.2e} \
             (3-point stencil alone: {three_point_ok}/{total}){}",
            first_failure.map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

/// Grid search recovers the oracle point exactly, and within a step under jitter.
fn oracle_recovery() -> Outcome {
    let grid = GridSpec::default_for(ChillModelKind::Utah);
    let oracle = OracleSpec::utah_default();
    let fit = |jitter: f64| -> Result<(MechanisticParams, f64), String> {
        let spec = OracleSpec { jitter_std: jitter, ..oracle.clone() };
        let (data, _) = gen_dataset(&ClimateSpec::default(), &spec, 10, &years(1990, 20)).map_err(|e| e.to_string())?;
        let r = grid_search(&data, ChillModelKind::Utah, &grid, Grouping::PerVariety, &MechanisticConfig::default())
            .map_err(|e| e.to_string())?;
        let g = r.groups.values().next().ok_or("no fitted group")?;
        Ok((g.params, g.train_mse))
    };
    let step = |axis: &[f64]| axis[1] - axis[0];
    let (exact, mse) = fit(0.0)?;
    let (noisy, noisy_mse) = fit(1.0)?;
    let truth = oracle.params;
    let within = (noisy.chill_req - truth.chill_req).abs() <= step(&grid.chill_req) + 1e-9
        && (noisy.forcing_req - truth.forcing_req).abs() <= step(&grid.forcing_req) + 1e-9
        && (noisy.base_temp - truth.base_temp).abs() <= step(&grid.base_temp) + 1e-9;
    check(
        exact == truth && mse == 0.0 && within,
        format!("jitter 0: {exact:?} mse {mse}; jitter 1: {noisy:?} mse {noisy_mse:.3}; oracle {truth:?}"),
    )
}

/// Criteria 3 and 7 share one synthetic set and one full-hybrid evaluation;
/// each is returned with its own runtime.
fn hybrid_learning_and_ablation() -> ((Outcome, f64), (Outcome, f64)) {
    let start = Instant::now();
    let spec = OracleSpec { jitter_std: 1.0, ..OracleSpec::utah_default() };
    let data = match gen_dataset(&ClimateSpec::default(), &spec, 10, &years(1990, 20)) {
        Ok((d, _)) => d,
        Err(e) => return ((Err(e.to_string()), 0.0), (Err(e.to_string()), 0.0)),
    };
    let seeds = [0, 1, 2];
    let full = run_eval(&hybrid(2000, false), &data, Setting::TemporalPerLocation, &seeds);
    let median = run_eval(&MedianFitter, &data, Setting::TemporalPerLocation, &seeds);
    let learning = match (&full, &median) {
        (Ok(h), Ok(m)) => check(*h <= 2.0 && h < m, format!("hybrid MAE {h:.3} (≤ 2.0), median baseline {m:.3}")),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    let learning_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let ablation = run_eval(&hybrid(2000, true), &data, Setting::TemporalPerLocation, &seeds);
    let ordering = match (&full, &ablation) {
        (Ok(h), Ok(a)) => check((a - h).abs() <= 1.0, format!("Utah-frozen ablation MAE {a:.3}, full hybrid {h:.3}")),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    // the ablation is compared against the full-hybrid run above
    ((learning, learning_secs), (ordering, start.elapsed().as_secs_f64()))
}

/// Per-variety fits underfit a climate-linked chill requirement; the hybrid
/// absorbs it.
fn underfitting() -> Outcome {
    let climate = ClimateSpec { location_offset_spread: 3.0, ..ClimateSpec::default() };
    let mut oracle = OracleSpec { jitter_std: 1.0, ..OracleSpec::utah_default() };
    oracle.heterogeneity = Heterogeneity { chill_req_per_degree: -200.0, ..Heterogeneity::default() };
    let (data, _) = gen_dataset(&climate, &oracle, 10, &years(1990, 20)).map_err(|e| e.to_string())?;
    let seeds = [0];
    let mech = MechanisticFitter::new(ChillModelKind::Utah);
    let mech_loc = run_eval(&mech, &data, Setting::TemporalPerLocation, &seeds)?;
    let mech_var = run_eval(&mech, &data, Setting::TemporalPerVariety, &seeds)?;
    let net = hybrid(2000, false);
    let hyb_loc = run_eval(&net, &data, Setting::TemporalPerLocation, &seeds)?;
    let hyb_var = run_eval(&net, &data, Setting::TemporalPerVariety, &seeds)?;
    let (mech_gap, hyb_gap) = (mech_var - mech_loc, hyb_var - hyb_loc);
    check(
        mech_gap >= 2.0 && hyb_gap < 1.0,
        format!(
            "mechanistic per-variety {mech_var:.3} vs per-location {mech_loc:.3} (gap {mech_gap:.3} ≥ 2); \
             hybrid {hyb_var:.3} vs {hyb_loc:.3} (gap {hyb_gap:.3} < 1)"
        ),
    )
}

/// A steep Chill Hours surrogate with matched thresholds reproduces the hard model.
fn hard_soft_consistency() -> Outcome {
    let config = MechanisticConfig::default();
    let hard = MechanisticParams { chill_req: 800.0, forcing_req: 6000.0, base_temp: 4.0 };
    let s = SEASON_LENGTH as f64;
    let soft = HybridParams {
        chill: ChillResponse::ChillHoursSurrogate { upper: config.chill_hours_upper, steepness: 50.0 },
        chill_inflection: hard.chill_req / (24.0 * s),
        forcing_inflection: hard.forcing_req / s,
        base_temp: hard.base_temp,
        chill_slope: CHILL_SLOPE,
        forcing_scale: 0.01,
    };
    let margin = 0.3;
    let climate = ClimateSpec::default();
    let (mut accepted, mut skipped, mut worst) = (0, 0, 0i64);
    let mut disagreements = Vec::new();
    let mut k = 0u64;
    while accepted < 100 {
        if k > 20_000 {
            return Err(format!("only {accepted} seasons met the crossing margin"));
        }
        let offset = (k % 9) as f64 * 0.5 - 2.0;
        let season = gen_season(&climate, offset, 2000, k).map_err(|e| e.to_string())?;
        k += 1;
        let chill: Vec<f64> = season.temps().rows().into_iter().map(|d| chill_hours(d, config.chill_hours_upper)).collect();
        let forcing: Vec<f64> = season.temps().rows().into_iter().map(|d| gdh_forcing(d, hard.base_temp)).collect();
        let BloomDay::Day(day) = accumulate_hard(&chill, &forcing, &hard, false) else {
            skipped += 1;
            continue;
        };
        // normalized forcing before and on the bloom day, in the hard model
        let mut c = 0.0;
        let mut f = 0.0;
        let mut before = 0.0;
        for t in 0..day {
            if c < hard.chill_req {
                c += chill[t];
            }
            if c >= hard.chill_req {
                before = f;
                f += forcing[t];
            }
        }
        let beta = soft.forcing_inflection;
        if before / s > beta - margin || f / s < beta + margin {
            skipped += 1;
            continue;
        }
        accepted += 1;
        let dist = forward(season.temps(), &soft).map_err(|e| e.to_string())?;
        let diff = predict_bloom_soft(&dist) as i64 - day as i64;
        worst = worst.max(diff.abs());
        if diff.abs() > 1 {
            disagreements.push(format!("season {} hard {day} soft {}", k - 1, predict_bloom_soft(&dist)));
        }
    }
    check(
        disagreements.is_empty(),
        format!("{accepted} seasons ({skipped} outside the margin skipped), max |soft − hard| {worst} days{}", {
            if disagreements.is_empty() { String::new() } else { format!("; {disagreements:?}") }
        }),
    )
}

/// CDF monotonicity, probability range and density normalization.
fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = Vec::new();
    for i in 0..1000 {
        let len = rng.random_range(1..=SEASON_LENGTH);
        let shift = rng.random_range(-10.0..20.0);
        let season = Array2::from_shape_simple_fn((len, 24), || shift + rng.random_range(-15.0..15.0));
        let params = HybridParams {
            chill: ChillResponse::Mlp(Mlp::init(&mut rng)),
            chill_inflection: rng.random_range(0.0..1.0),
            forcing_inflection: rng.random_range(0.0..50.0),
            base_temp: rng.random_range(-5.0..15.0),
            chill_slope: CHILL_SLOPE,
            forcing_scale: 10f64.powf(rng.random_range(-2.0..1.0)),
        };
        let dist = forward_batch(&[season.view()], &params).map_err(|e| e.to_string())?.remove(0);
        let monotone = dist.initial_cdf <= dist.forcing_cdf[0] && dist.forcing_cdf.windows(2).all(|w| w[0] <= w[1]);
        let in_range = dist.prob.iter().all(|p| (0.0..=1.0).contains(p));
        if !monotone || !in_range {
            violations.push(i);
        }
    }
    let mut worst_column = 0.0f64;
    for k in 0..5u64 {
        let climate = ClimateSpec { seed: k, ..ClimateSpec::default() };
        let (data, _) = gen_dataset(&climate, &OracleSpec::utah_default(), 3, &years(2000, 3)).map_err(|e| e.to_string())?;
        let params = HybridParams {
            chill: ChillResponse::Mlp(Mlp::init(&mut rng)),
            chill_inflection: 0.3,
            forcing_inflection: 20.0,
            base_temp: 4.0,
            chill_slope: CHILL_SLOPE,
            forcing_scale: 1.0,
        };
        let rows = export_response_density(&params, &data).map_err(|e| e.to_string())?;
        let mut columns = std::collections::BTreeMap::<i64, f64>::new();
        for r in &rows {
            *columns.entry((r.mean_temp / dormancy::eval::TEMP_BIN).round() as i64).or_default() += r.density;
        }
        for total in columns.values() {
            worst_column = worst_column.max((total - 1.0).abs());
        }
    }
    check(
        violations.is_empty() && worst_column <= 1e-9,
        format!("1000 forwards, {} violations; worst density column |sum − 1| {worst_column:.1e}", violations.len()),
    )
}

/// Evaluate reports are byte-identical across repeats and thread counts.
fn determinism() -> Outcome {
    let spec = OracleSpec { jitter_std: 1.0, ..OracleSpec::utah_default() };
    let (data, _) = gen_dataset(&ClimateSpec::default(), &spec, 4, &years(2000, 6)).map_err(|e| e.to_string())?;
    let fitters: Vec<(Box<dyn Fitter>, Setting)> = vec![
        (Box::new(MechanisticFitter::new(ChillModelKind::Utah)), Setting::Spatiotemporal),
        (Box::new(hybrid(30, false)), Setting::TemporalPerLocation),
        (Box::new(MedianFitter), Setting::TemporalPerVariety),
    ];
    let seeds = [0, 1, 2, 3];
    let run = |threads: usize, fitter: &dyn Fitter, setting: Setting| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let report = pool.install(|| evaluate(fitter, &data, &SplitSpec::new(setting, 0), &seeds)).map_err(|e| e.to_string())?;
        serde_json::to_string_pretty(&report).map_err(|e| e.to_string())
    };
    let mut mismatches = Vec::new();
    for (fitter, setting) in &fitters {
        let base = run(1, fitter.as_ref(), *setting)?;
        for threads in [1, 4] {
            if run(threads, fitter.as_ref(), *setting)? != base {
                mismatches.push(format!("{} at {threads} threads", fitter.name()));
            }
        }
    }
    check(mismatches.is_empty(), format!("3 models × 4 seeds, jobs 1 vs 4; mismatches: {mismatches:?}"))
}

fn report(n: usize, name: &str, secs: f64, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("PASS criterion {n} ({name}, {secs:.1}s): {d}"),
        Err(d) => println!("FAIL criterion {n} ({name}, {secs:.1}s): {d}"),
    }
    outcome.is_ok()
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let start = Instant::now();
    let outcome = f();
    (outcome, start.elapsed().as_secs_f64())
}

fn main() {
    let mut ok = true;
    let (o, t) = timed(gradient_fidelity);
    ok &= report(1, "gradient fidelity", t, &o);
    let (o, t) = timed(oracle_recovery);
    ok &= report(2, "oracle parameter recovery", t, &o);
    let ((learning, t3), ablation) = hybrid_learning_and_ablation();
    ok &= report(3, "hybrid learning", t3, &learning);
    let (o, t) = timed(underfitting);
    ok &= report(4, "underfitting", t, &o);
    let (o, t) = timed(hard_soft_consistency);
    ok &= report(5, "hard/soft consistency", t, &o);
    let (o, t) = timed(invariants);
    ok &= report(6, "CDF and density invariants", t, &o);
    ok &= report(7, "ablation ordering", ablation.1, &ablation.0);
    let (o, t) = timed(determinism);
    ok &= report(8, "determinism", t, &o);
    if !ok {
        std::process::exit(1);
    }
}
