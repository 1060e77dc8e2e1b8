//! Command-line front end. Every invocation writes its outputs into a fresh
//! run directory together with the effective configuration and a manifest of
//! content hashes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datagen::{gen_dataset, ClimateSpec, Heterogeneity, OracleSpec};
use crate::domain::{load_blooms, load_temps, season_index_to_date, Dataset, Grouping, Sample, SEASON_LENGTH};
use crate::error::Error;
use crate::eval::{
    evaluate, export_response_density, export_scatter, predict_hybrid, write_density, write_scatter, EvalReport,
    Fitter, HybridFitter, MechanisticFitter, MedianFitter, Setting, SplitSpec,
};
use crate::hybrid::{TrainConfig, TrainedModel};
use crate::mechanistic::{
    grid_search, linspace, predict_bloom_hard, ChillModelKind, GridSearch, GridSpec, MechanisticConfig,
    MechanisticParams,
};

#[derive(Debug, Parser, Serialize)]
#[command(name = "dormancy", version, about = "Tree dormancy phenology models: calibration, training and evaluation")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON file with flat keys mirroring the flags; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Validate temperature and bloom CSVs and write a normalized copy.
    #[command(args_override_self = true)]
    Ingest(IngestArgs),
    /// Generate a synthetic dataset from a known mechanistic oracle.
    #[command(args_override_self = true)]
    GenSynthetic(GenArgs),
    /// Grid-search calibration of a mechanistic model.
    #[command(args_override_self = true)]
    Calibrate(CalibrateArgs),
    /// Train the hybrid model.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Predict bloom dates with a fitted model file.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// Repeated-seed evaluation under one generalization setting.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Daily chill response against daily mean temperature.
    #[command(args_override_self = true)]
    ExportResponse(ExportResponseArgs),
    /// Observed/predicted pairs of an evaluation report.
    #[command(args_override_self = true)]
    ExportScatter(ExportScatterArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Calibrate(_) => "calibrate",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::ExportResponse(_) => "export-response",
            Command::ExportScatter(_) => "export-scatter",
        }
    }
}

const SUBCOMMANDS: [&str; 8] = [
    "ingest",
    "gen-synthetic",
    "calibrate",
    "train",
    "predict",
    "evaluate",
    "export-response",
    "export-scatter",
];

#[derive(Debug, Args, Serialize)]
pub struct OutputArgs {
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Hourly temperatures: location_id,date,h00..h23.
    #[arg(long)]
    pub temps: PathBuf,
    /// Bloom observations: location_id,latitude,longitude,variety,bloom_date.
    #[arg(long)]
    pub blooms: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub locations: usize,
    #[arg(long, default_value_t = 1990)]
    pub first_year: i32,
    /// Number of consecutive seasons.
    #[arg(long, default_value_t = 20)]
    pub years: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "utah")]
    pub oracle_model: String,
    #[arg(long, default_value_t = 800.0)]
    pub chill_req: f64,
    #[arg(long, default_value_t = 6000.0)]
    pub forcing_req: f64,
    #[arg(long, default_value_t = 4.0)]
    pub base_temp: f64,
    /// Standard deviation of the label jitter, days.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 1)]
    pub varieties: usize,
    #[arg(long, default_value_t = 0.0)]
    pub chill_req_per_degree: f64,
    #[arg(long, default_value_t = 0.0)]
    pub forcing_req_per_degree: f64,
    #[arg(long, default_value_t = 0.0)]
    pub base_temp_per_degree: f64,
    #[arg(long, default_value_t = 12.0)]
    pub mean_temp: f64,
    #[arg(long, default_value_t = 10.0)]
    pub seasonal_amplitude: f64,
    #[arg(long, default_value_t = 5.0)]
    pub diurnal_amplitude: f64,
    #[arg(long, default_value_t = 2.0)]
    pub daily_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub hourly_noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub offset_spread: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    /// Chill requirement grid, `start:end:count` or a comma list.
    #[arg(long)]
    pub grid_chill: Option<String>,
    /// Forcing requirement grid, `start:end:count` or a comma list.
    #[arg(long)]
    pub grid_forcing: Option<String>,
    /// Base temperature grid, `start:end:count` or a comma list.
    #[arg(long)]
    pub grid_base_temp: Option<String>,
    /// Chill Hours upper temperature, °C.
    #[arg(long, default_value_t = 7.2)]
    pub chill_hours_upper: f64,
    /// Do not floor the cumulative Utah chill at zero.
    #[arg(long)]
    pub no_utah_floor: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "utah")]
    pub model: String,
    #[arg(long, default_value = "per-location")]
    pub grouping: String,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 20000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 2000)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Use decoupled (AdamW-style) weight decay.
    #[arg(long)]
    pub decoupled_weight_decay: bool,
    /// Apply weight decay to the thresholds and base temperature too.
    #[arg(long)]
    pub decay_thresholds: bool,
    #[arg(long, default_value_t = 0.01)]
    pub min_forcing_scale: f64,
    #[arg(long, default_value_t = 5.0)]
    pub init_base_temp: f64,
    /// Standardize network inputs with training statistics.
    #[arg(long)]
    pub normalize_inputs: bool,
}

impl ScheduleArgs {
    fn to_config(&self) -> TrainConfig {
        let mut c = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            min_forcing_scale: self.min_forcing_scale,
            init_base_temp: self.init_base_temp,
            decay_thresholds: self.decay_thresholds,
            normalize_inputs: self.normalize_inputs,
            ..TrainConfig::default()
        };
        c.adam.weight_decay = self.weight_decay;
        c.adam.decoupled = self.decoupled_weight_decay;
        c
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "per-location")]
    pub grouping: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Freeze the chill response to the scaled Utah model.
    #[arg(long)]
    pub utah_ablation: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Hybrid model JSON or mechanistic parameter JSON.
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub temps: PathBuf,
    /// Location table (bloom CSV); required for per-variety models.
    #[arg(long)]
    pub blooms: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// chill-hours, utah, chill-days, hybrid, hybrid-utah or median.
    #[arg(long, default_value = "utah")]
    pub model: String,
    /// temporal, temporal-variety or spatiotemporal.
    #[arg(long, default_value = "temporal")]
    pub setting: String,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Explicit seeds; overrides `--seeds`/`--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Vec<u64>,
    #[arg(long, default_value_t = 0.75)]
    pub train_year_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    pub holdout_location_fraction: f64,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportResponseArgs {
    /// Hybrid model JSON.
    #[arg(long)]
    pub model_file: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportScatterArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// Order rows by variety.
    #[arg(long)]
    pub by_variety: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum CliError {
    /// Invalid configuration; exit code 2.
    Config(String),
    /// Pipeline failure in a named stage; exit code 1.
    Stage { stage: &'static str, source: Error },
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for crate::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| config_err(field, e))
}

fn require_file(field: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(field, format!("file '{}' does not exist", path.display())))
    }
}

/// `start:end:count` or `a,b,c`.
pub fn parse_axis(spec: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|e| format!("bad start '{}': {e}", parts[0]))?;
        let hi: f64 = parts[1].trim().parse().map_err(|e| format!("bad end '{}': {e}", parts[1]))?;
        let n: usize = parts[2].trim().parse().map_err(|e| format!("bad count '{}': {e}", parts[2]))?;
        if n == 0 {
            return Err("count must be positive".into());
        }
        return Ok(linspace(lo, hi, n));
    }
    spec.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad value '{v}': {e}")))
        .collect()
}

impl GridArgs {
    fn resolve(&self, kind: ChillModelKind) -> CliResult<(GridSpec, MechanisticConfig)> {
        let mut grid = GridSpec::default_for(kind);
        for (field, value, axis) in [
            ("grid-chill", &self.grid_chill, &mut grid.chill_req),
            ("grid-forcing", &self.grid_forcing, &mut grid.forcing_req),
            ("grid-base-temp", &self.grid_base_temp, &mut grid.base_temp),
        ] {
            if let Some(v) = value {
                *axis = parse_axis(v).map_err(|e| config_err(field, e))?;
            }
        }
        grid.validate().map_err(|e| config_err("grid", e))?;
        let config = MechanisticConfig {
            chill_hours_upper: self.chill_hours_upper,
            floor_utah: !self.no_utah_floor,
        };
        Ok((grid, config))
    }
}

/// Output directory assembled under a staging name and renamed into place
/// once complete.
struct RunDir {
    staging: PathBuf,
    parent: PathBuf,
    name: String,
}

impl RunDir {
    fn create(parent: &Path, subcommand: &str) -> CliResult<Self> {
        fs::create_dir_all(parent)
            .map_err(|e| config_err("out", format!("cannot create '{}': {e}", parent.display())))?;
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default();
        let stamp = chrono::DateTime::from_timestamp(now.as_secs() as i64, 0)
            .map(|t| t.format("%Y%m%dT%H%M%SZ").to_string())
            .unwrap_or_else(|| now.as_secs().to_string());
        let staging = parent.join(format!(".staging-{subcommand}-{}-{}", std::process::id(), now.as_nanos()));
        fs::create_dir(&staging)
            .map_err(|e| config_err("out", format!("cannot create '{}': {e}", staging.display())))?;
        Ok(RunDir {
            staging,
            parent: parent.to_path_buf(),
            name: format!("{subcommand}-{stamp}"),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    fn finish(self, subcommand: &str, config: &serde_json::Value) -> crate::Result<PathBuf> {
        fs::write(self.path("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
        let mut artifacts = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&self.staging)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            let bytes = fs::read(&path)?;
            artifacts.push(serde_json::json!({
                "path": path.file_name().map(|n| n.to_string_lossy().into_owned()),
                "bytes": bytes.len(),
                "sha256": hex(&Sha256::digest(&bytes)),
            }));
        }
        let manifest = serde_json::json!({
            "subcommand": subcommand,
            "created": self.name.rsplit('-').next(),
            "version": env!("CARGO_PKG_VERSION"),
            "artifacts": artifacts,
        });
        fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut target = self.parent.join(&self.name);
        let mut n = 1;
        while target.exists() {
            target = self.parent.join(format!("{}-{n}", self.name));
            n += 1;
        }
        fs::rename(&self.staging, &target)?;
        Ok(target)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Translates a flat JSON config object into flag arguments.
fn config_to_args(path: &Path) -> CliResult<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(map) = value else {
        return Err(config_err("config", "expected a JSON object with flat keys"));
    };
    let mut args = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            _ => Err(config_err(&key, "expected a string or number")),
        };
        match &v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => args.push(flag.into()),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar).collect::<CliResult<_>>()?;
                args.push(flag.into());
                args.push(joined.join(",").into());
            }
            serde_json::Value::Object(_) => return Err(config_err(&key, "nested objects are not supported")),
            other => {
                args.push(flag.into());
                args.push(scalar(other)?.into());
            }
        }
    }
    Ok(args)
}

/// Inserts config-file arguments right after the subcommand name so that
/// explicit flags, which come later, take precedence.
fn merge_config(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(config) = config else { return Ok(argv) };
    let extra = config_to_args(&config)?;
    let Some(pos) = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(argv);
    };
    let mut merged = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => return report(e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return report(config_err("jobs", "must be at least 1"));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => return report(config_err("jobs", e)),
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    match e {
        CliError::Config(msg) => {
            eprintln!("configuration error: {msg}");
            2
        }
        CliError::Stage { stage, source } => {
            eprintln!("error during {stage}: {source}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<PathBuf> {
    let name = cli.command.name();
    let echo = serde_json::to_value(&cli.command).map_err(|e| config_err("config", e))?;
    let (out, run) = match &cli.command {
        Command::Ingest(a) => (&a.output.out, ingest(a)?),
        Command::GenSynthetic(a) => (&a.output.out, gen_synthetic(a)?),
        Command::Calibrate(a) => (&a.output.out, calibrate(a)?),
        Command::Train(a) => (&a.output.out, train_cmd(a)?),
        Command::Predict(a) => (&a.output.out, predict(a)?),
        Command::Evaluate(a) => (&a.output.out, evaluate_cmd(a)?),
        Command::ExportResponse(a) => (&a.output.out, export_response(a)?),
        Command::ExportScatter(a) => (&a.output.out, export_scatter_cmd(a)?),
    };
    let dir = RunDir::create(out, name)?;
    run(&dir)?;
    dir.finish(name, &echo).stage("writing run directory")
}

/// Validated work that writes its artifacts into the run directory.
type Job<'a> = Box<dyn FnOnce(&RunDir) -> CliResult<()> + 'a>;

fn load_dataset(data: &DataArgs) -> CliResult<Dataset> {
    require_file("temps", &data.temps)?;
    require_file("blooms", &data.blooms)?;
    Dataset::load(&data.temps, &data.blooms).stage("ingestion")
}

#[derive(Serialize)]
struct IngestSummary {
    n_samples: usize,
    n_locations: usize,
    years: Vec<i32>,
    varieties: Vec<String>,
}

fn ingest(a: &IngestArgs) -> CliResult<Job<'_>> {
    require_file("temps", &a.data.temps)?;
    require_file("blooms", &a.data.blooms)?;
    Ok(Box::new(move |dir| {
        let data = load_dataset(&a.data)?;
        let mut varieties: Vec<String> = data.locations().values().map(|l| l.variety.clone()).collect();
        varieties.sort();
        varieties.dedup();
        let summary = IngestSummary {
            n_samples: data.len(),
            n_locations: data.locations().len(),
            years: data.years(),
            varieties,
        };
        write_json(&dir.path("summary.json"), &summary).stage("writing summary")?;
        data.save(&dir.path("temps.csv"), &dir.path("blooms.csv"))
            .stage("writing dataset")
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> crate::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_synthetic(a: &GenArgs) -> CliResult<Job<'_>> {
    let climate = ClimateSpec {
        mean_temp: a.mean_temp,
        seasonal_amplitude: a.seasonal_amplitude,
        diurnal_amplitude: a.diurnal_amplitude,
        daily_noise_std: a.daily_noise,
        hourly_noise_std: a.hourly_noise,
        location_offset_spread: a.offset_spread,
        seed: a.seed,
        ..ClimateSpec::default()
    };
    climate.validate().map_err(|e| config_err("climate", e))?;
    let oracle = OracleSpec {
        kind: parse_field("oracle-model", &a.oracle_model)?,
        params: MechanisticParams {
            chill_req: a.chill_req,
            forcing_req: a.forcing_req,
            base_temp: a.base_temp,
        },
        jitter_std: a.jitter,
        heterogeneity: Heterogeneity {
            chill_req_per_degree: a.chill_req_per_degree,
            forcing_req_per_degree: a.forcing_req_per_degree,
            base_temp_per_degree: a.base_temp_per_degree,
        },
        n_varieties: a.varieties,
        config: MechanisticConfig::default(),
    };
    oracle.validate().map_err(|e| config_err("oracle", e))?;
    if a.locations == 0 {
        return Err(config_err("locations", "must be at least 1"));
    }
    if a.years == 0 {
        return Err(config_err("years", "must be at least 1"));
    }
    let years: Vec<i32> = (0..a.years as i32).map(|i| a.first_year + i).collect();
    Ok(Box::new(move |dir| {
        let (data, truth) = gen_dataset(&climate, &oracle, a.locations, &years).stage("generation")?;
        data.save(&dir.path("temps.csv"), &dir.path("blooms.csv"))
            .stage("writing dataset")?;
        truth.save(&dir.path("truth.json")).stage("writing truth")
    }))
}

fn calibrate(a: &CalibrateArgs) -> CliResult<Job<'_>> {
    let kind: ChillModelKind = parse_field("model", &a.model)?;
    let grouping: Grouping = parse_field("grouping", &a.grouping)?;
    let (grid, config) = a.grid.resolve(kind)?;
    require_file("temps", &a.data.temps)?;
    require_file("blooms", &a.data.blooms)?;
    Ok(Box::new(move |dir| {
        let data = load_dataset(&a.data)?;
        let fit = grid_search(&data, kind, &grid, grouping, &config).stage("calibration")?;
        fit.save(&dir.path(&fit.file_name())).stage("writing parameters")
    }))
}

fn train_cmd(a: &TrainArgs) -> CliResult<Job<'_>> {
    let grouping: Grouping = parse_field("grouping", &a.grouping)?;
    let config = a.schedule.to_config();
    config.validate().map_err(|e| config_err("schedule", e))?;
    require_file("temps", &a.data.temps)?;
    require_file("blooms", &a.data.blooms)?;
    Ok(Box::new(move |dir| {
        let data = load_dataset(&a.data)?;
        let model = if a.utah_ablation {
            crate::hybrid::train_ablation_utah(&data, a.seed, &config, grouping)
        } else {
            crate::hybrid::train(&data, a.seed, &config, grouping)
        }
        .stage("training")?;
        model.save(&dir.path("model.json")).stage("writing model")?;
        model.write_trace(&dir.path("trace.csv")).stage("writing loss trace")
    }))
}

enum ModelFile {
    Hybrid(TrainedModel),
    Mechanistic(GridSearch),
}

fn load_model_file(path: &Path) -> CliResult<ModelFile> {
    require_file("model-file", path)?;
    let text = fs::read_to_string(path).map_err(|e| config_err("model-file", e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_err("model-file", e))?;
    if value.get("config_hash").is_some() {
        TrainedModel::load(path).map(ModelFile::Hybrid)
    } else {
        GridSearch::load(path).map(ModelFile::Mechanistic)
    }
    .map_err(|e| config_err("model-file", e))
}

#[derive(Serialize)]
struct PredictionRow {
    location_id: String,
    season_start_year: i32,
    predicted_day: usize,
    predicted_date: String,
}

fn predict(a: &PredictArgs) -> CliResult<Job<'_>> {
    let model = load_model_file(&a.model_file)?;
    require_file("temps", &a.temps)?;
    let grouping = match &model {
        ModelFile::Hybrid(m) => m.grouping,
        ModelFile::Mechanistic(m) => m.grouping,
    };
    let locations = match &a.blooms {
        Some(p) => {
            require_file("blooms", p)?;
            Some(load_blooms(p).map_err(|e| config_err("blooms", e))?.locations)
        }
        None if grouping == Grouping::PerVariety => {
            return Err(config_err("blooms", "a location table is required for per-variety models"))
        }
        None => None,
    };
    Ok(Box::new(move |dir| {
        let table = load_temps(&a.temps).stage("ingestion")?;
        let mut samples = Vec::new();
        for ((location_id, year), entry) in table {
            let Ok(series) = entry else { continue };
            let variety = match &locations {
                Some(l) => match l.get(&location_id) {
                    Some(loc) => loc.variety.clone(),
                    None => continue,
                },
                None => String::from("-"),
            };
            samples.push(Sample {
                series,
                record: crate::domain::BloomRecord {
                    location_id,
                    variety,
                    season_start_year: year,
                    bloom_day: 1,
                },
            });
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let days = match &model {
            ModelFile::Hybrid(m) => predict_hybrid(&m.groups, m.grouping, &refs),
            ModelFile::Mechanistic(m) => refs
                .iter()
                .map(|s| {
                    let p = m.params_for(m.grouping.key(&s.record))?;
                    Ok(predict_bloom_hard(&s.series, p, m.model, &m.config).scored(SEASON_LENGTH))
                })
                .collect(),
        }
        .stage("prediction")?;
        let mut w = csv::Writer::from_path(dir.path("predictions.csv"))
            .map_err(Error::from)
            .stage("writing predictions")?;
        for (s, day) in samples.iter().zip(days) {
            let date = season_index_to_date(day, s.record.season_start_year).stage("prediction")?;
            w.serialize(PredictionRow {
                location_id: s.record.location_id.clone(),
                season_start_year: s.record.season_start_year,
                predicted_day: day,
                predicted_date: date.to_string(),
            })
            .map_err(Error::from)
            .stage("writing predictions")?;
        }
        w.flush().map_err(Error::from).stage("writing predictions")
    }))
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<Job<'_>> {
    let setting: Setting = parse_field("setting", &a.setting)?;
    let spec = SplitSpec {
        setting,
        train_year_fraction: a.train_year_fraction,
        holdout_location_fraction: a.holdout_location_fraction,
        seed: a.seed,
    };
    spec.validate().map_err(|e| config_err("split", e))?;
    let seeds: Vec<u64> = if a.seed_list.is_empty() {
        if a.seeds == 0 {
            return Err(config_err("seeds", "must be at least 1"));
        }
        (0..a.seeds as u64).map(|i| a.seed + i).collect()
    } else {
        a.seed_list.clone()
    };
    let fitter: Box<dyn Fitter> = match a.model.as_str() {
        "hybrid" | "hybrid-utah" => {
            let config = a.schedule.to_config();
            config.validate().map_err(|e| config_err("schedule", e))?;
            Box::new(HybridFitter {
                config,
                utah_ablation: a.model == "hybrid-utah",
            })
        }
        "median" => Box::new(MedianFitter),
        other => {
            let kind: ChillModelKind = parse_field("model", other)?;
            let (grid, config) = a.grid.resolve(kind)?;
            Box::new(MechanisticFitter { kind, grid, config })
        }
    };
    require_file("temps", &a.data.temps)?;
    require_file("blooms", &a.data.blooms)?;
    Ok(Box::new(move |dir| {
        let data = load_dataset(&a.data)?;
        let report = evaluate(fitter.as_ref(), &data, &spec, &seeds).stage("evaluation")?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        report.save(&dir.path("report.json")).stage("writing report")
    }))
}

fn export_response(a: &ExportResponseArgs) -> CliResult<Job<'_>> {
    let ModelFile::Hybrid(model) = load_model_file(&a.model_file)? else {
        return Err(config_err("model-file", "response export needs a hybrid model"));
    };
    require_file("temps", &a.data.temps)?;
    require_file("blooms", &a.data.blooms)?;
    Ok(Box::new(move |dir| {
        let data = load_dataset(&a.data)?;
        for (key, params) in &model.groups {
            let test = data.filter(|s| model.grouping.key(&s.record) == key);
            if test.is_empty() {
                continue;
            }
            let rows = export_response_density(params, &test).stage("response export")?;
            let safe: String = key
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            write_density(&dir.path(&format!("response_{safe}.csv")), &rows).stage("writing response density")?;
        }
        Ok(())
    }))
}

fn export_scatter_cmd(a: &ExportScatterArgs) -> CliResult<Job<'_>> {
    require_file("report", &a.report)?;
    let report = EvalReport::load(&a.report).map_err(|e| config_err("report", e))?;
    Ok(Box::new(move |dir| {
        let rows = export_scatter(&report, a.by_variety);
        write_scatter(&dir.path("scatter.csv"), &rows).stage("writing scatter")
    }))
}
