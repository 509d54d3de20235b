//! Command-line surface: eight pipelines over field containers
//! (verify, pool, rev, cyclone, windpower, sample, perturb, sigtest).
//!
//! Every randomized pipeline takes `--seed` and produces bit-identical
//! outputs for any `--threads` value. Exit codes: 0 success, 1 bad
//! invocation/configuration, 2 bad input data; failures print one JSON
//! error object to stderr.

use crate::config::RunConfig;
use crate::container::{
    read_container, write_container, Container, ContainerHeader, ReadOptions,
};
use crate::cyclone::{
    clip_tracks, cyclone_rev, detect_nodes, one_degree_grid, stitch_nodes, strike_heatmap,
    write_tracks_csv, CycloneTrack, DetectConfig, StitchConfig, TimeSlice, MAX_REPORT_LEAD_H,
};
use crate::diffusion::{rollout, NormalizationStats, ToyDenoiser};
use crate::error::{Error, ErrorCategory, Result};
use crate::fields::ChannelMeta;
use crate::grid::{GriddedField, LatLonGrid};
use crate::mesh::IcosahedralMesh;
use crate::metrics::{
    self, climatology_percentiles, exceedance_binarize, exceedance_binarize_target,
    ExceedDirection,
};
use crate::perturb::{gp_perturbation, GpPerturbSpec, SphericalNoiseSpec, VariableStd};
use crate::pooling::{build_pool_regions, pooled_crps, PoolMode};
use crate::report::Report;
use crate::rng::derive_seed;
use crate::sht::synthesis_band_limit;
use crate::significance::{impute_missing, paired_metric_test, MetricKind, StatisticSeries};
use crate::windpower::{
    build_farm_groups, read_farms_csv, regional_power_crps, PowerCurve, WIND_POOL_MESH_LEVEL,
    WIND_POOL_SIZES_KM,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Seed-stream tags for the per-member/per-init substreams.
const PERTURB_MEMBER_STREAM: u64 = 0x636c_6970_6572_7462;
const SAMPLE_MEMBER_STREAM: u64 = 0x636c_6973_616d_706c;
const SIGTEST_STREAM: u64 = 0x636c_6973_6967_7473;
const RANK_STREAM: u64 = 0x636c_6972_616e_6b73;

#[derive(Parser, Debug)]
#[command(
    name = "stratus",
    version,
    about = "Verification and generative sampling for probabilistic gridded forecasts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score an ensemble forecast container against a truth container.
    Verify(VerifyArgs),
    /// Spatially pooled (neighborhood) CRPS at icosahedral pool scales.
    Pool(PoolArgs),
    /// Relative economic value curves for threshold exceedance events.
    Rev(RevArgs),
    /// Detect and stitch cyclone tracks; optionally score against truth.
    Cyclone(CycloneArgs),
    /// Regional wind-power CRPS over pooled wind-farm groups.
    Windpower(WindpowerArgs),
    /// Roll out a generative ensemble forecast from an initial-state container.
    Sample(SampleArgs),
    /// Build correlated initial-condition perturbations.
    Perturb(PerturbArgs),
    /// Paired significance test between two forecast systems.
    Sigtest(SigtestArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON run-configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the library default (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Ensemble forecast container.
    #[arg(long)]
    forecast: PathBuf,
    /// Single-member truth container.
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated metric list (overrides the config).
    #[arg(long)]
    metrics: Option<String>,
    /// Comma-separated exceedance percentiles (overrides the config).
    #[arg(long)]
    percentile: Option<String>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    forecast: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated mesh refinement levels (overrides the config).
    #[arg(long)]
    pool_level: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RevArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    forecast: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated exceedance percentiles (overrides the config).
    #[arg(long)]
    percentile: Option<String>,
    /// Comma-separated cost/loss ratios (overrides the config).
    #[arg(long)]
    cost_loss: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CycloneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Ensemble forecast container with msl, z300/z500, 10u/10v, zs.
    #[arg(long)]
    forecast: PathBuf,
    /// Optional single-member truth container for value scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write stitched tracks as CSV.
    #[arg(long)]
    tracks_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WindpowerArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    forecast: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Wind farm CSV (latitude, longitude, capacity_mw).
    #[arg(long)]
    farms: PathBuf,
    /// Power-curve CSV (wind_speed_ms, normalized_power); bundled
    /// idealized IEC Class II curve when omitted.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Comma-separated pool diameters in km (default 120,240,480).
    #[arg(long)]
    pool_size: Option<String>,
    /// Icosahedral refinement of the pooling centres (default 7).
    #[arg(long)]
    mesh_level: Option<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initial-state container (the last lead time seeds the rollout).
    #[arg(long)]
    init: PathBuf,
    /// Output forecast container.
    #[arg(long)]
    out: PathBuf,
    /// Number of forecast steps to roll out.
    #[arg(long, default_value_t = 30)]
    t_steps: usize,
    /// Hours per forecast step.
    #[arg(long, default_value_t = 12)]
    step_hours: i64,
    /// Toy denoiser target mean.
    #[arg(long, default_value_t = 0.0)]
    toy_mean: f64,
    /// Toy denoiser target std.
    #[arg(long, default_value_t = 1.0)]
    toy_std: f64,
    /// Spherical-harmonic band limit of the driving noise (defaults to
    /// the grid's synthesis limit).
    #[arg(long)]
    l_max: Option<usize>,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output container of perturbed initial states.
    #[arg(long)]
    out: PathBuf,
    /// Base state container (single member); zero base when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Grid as "NLATxNLON" (global, pole rows) when no base is given.
    #[arg(long)]
    grid: Option<String>,
    /// Ensemble members to generate.
    #[arg(long)]
    members: usize,
    /// Independent init times to generate (with --grid; a base container
    /// supplies its own).
    #[arg(long, default_value_t = 1)]
    inits: usize,
    /// Perturbation targets as "var=std" or "var:level=std", comma-
    /// separated (default "2t=1.0" without a base; all base channels at
    /// std 1.0 with one).
    #[arg(long)]
    std: Option<String>,
    /// Correlation lengthscale in km.
    #[arg(long, default_value_t = 1200.0)]
    lengthscale_km: f64,
    /// Fraction of each target std used as the perturbation std.
    #[arg(long, default_value_t = 0.085)]
    scale: f64,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SigtestArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Forecast system A.
    #[arg(long)]
    forecast: PathBuf,
    /// Forecast system B (the baseline).
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Metric to test: crps or rmse.
    #[arg(long, default_value = "crps")]
    metric: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parse arguments, dispatch, and map errors onto exit codes.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (category, code) = match e.category() {
                ErrorCategory::Config => ("config", 1),
                ErrorCategory::Data => ("data", 2),
            };
            eprintln!("{}", json!({ "error": e.to_string(), "category": category }));
            code
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Verify(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_verify(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
        Command::Pool(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_pool(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
        Command::Rev(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_rev(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
        Command::Cyclone(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_cyclone(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
        Command::Windpower(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_windpower(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
        Command::Sample(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_sample(&a, &cfg))?;
            emit(report, a.report.as_deref())
        }
        Command::Perturb(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_perturb(&a, &cfg))?;
            emit(report, a.report.as_deref())
        }
        Command::Sigtest(a) => {
            let cfg = a.common.load()?;
            let report = with_threads(cfg.threads, || cmd_sigtest(&a, &cfg))?;
            emit(report, a.out.as_deref())
        }
    }
}

/// Run under a bounded worker pool; 0 keeps the library default. Results
/// do not depend on the thread count.
fn with_threads<F>(threads: usize, f: F) -> Result<Report>
where
    F: FnOnce() -> Result<Report> + Send,
{
    if threads == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(f)
    }
}

fn emit(report: Report, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            report.write(path)?;
            println!("wrote report to {}", path.display());
        }
        None => print!("{}", report.to_json()?),
    }
    Ok(())
}

// ---------- shared parsing and loading helpers ----------

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn parse_u32_list(text: &str, what: &str) -> Result<Vec<u32>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::config(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn parse_grid_dims(text: &str) -> Result<LatLonGrid> {
    let (a, b) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::config(format!("grid {text:?} is not NLATxNLON")))?;
    let n_lat: usize = a
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad grid rows {a:?}")))?;
    let n_lon: usize = b
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad grid columns {b:?}")))?;
    LatLonGrid::global(n_lat, n_lon)
}

/// Parse "var=std" / "var:level=std" target lists.
fn parse_std_list(text: &str) -> Result<Vec<VariableStd>> {
    text.split(',')
        .map(|item| {
            let (name, std) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad target {item:?}, want var=std")))?;
            let std_6h_diff: f64 = std
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad std in {item:?}")))?;
            let name = name.trim();
            let (variable, level_hpa) = match name.split_once(':') {
                Some((v, l)) => {
                    let level: u16 = l
                        .trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad level in {item:?}")))?;
                    (v.trim().to_string(), Some(level))
                }
                None => (name.to_string(), None),
            };
            Ok(VariableStd {
                variable,
                level_hpa,
                std_6h_diff,
            })
        })
        .collect()
}

fn read_opts(cfg: &RunConfig) -> ReadOptions {
    ReadOptions {
        nan_fill: cfg.nan_fill.clone(),
    }
}

/// Load a forecast/truth container pair and check that they describe the
/// same grid and times.
fn load_pair(forecast: &Path, truth: &Path, cfg: &RunConfig) -> Result<(Container, Container)> {
    let opts = read_opts(cfg);
    let f = read_container(forecast, &opts)?;
    let t = read_container(truth, &opts)?;
    if t.header.n_members != 1 {
        return Err(Error::data(format!(
            "truth container must hold 1 member, found {}",
            t.header.n_members
        )));
    }
    if f.header.latitudes != t.header.latitudes || f.header.longitudes != t.header.longitudes {
        return Err(Error::dims("forecast and truth grids differ"));
    }
    if f.header.init_times != t.header.init_times {
        return Err(Error::dims("forecast and truth init times differ"));
    }
    if f.header.lead_times_h != t.header.lead_times_h {
        return Err(Error::dims("forecast and truth lead times differ"));
    }
    Ok((f, t))
}

/// Truth channel index matching a forecast channel.
fn matching_channel(t: &Container, ch: &ChannelMeta) -> Result<usize> {
    t.find_channel(&ch.variable, ch.level_hpa)
        .ok_or_else(|| Error::data(format!("truth container is missing channel {}", ch.label())))
}

fn channel_row(ch: &ChannelMeta, lead_h: i64) -> serde_json::Map<String, Value> {
    let mut row = serde_json::Map::new();
    row.insert("variable".into(), json!(ch.variable));
    row.insert("level_hpa".into(), json!(ch.level_hpa));
    row.insert("lead_h".into(), json!(lead_h));
    row
}

/// A metric value, or null with a note when the statistic is undefined
/// for this input (e.g. zero-skill spread/skill ratio).
fn metric_value(result: Result<f64>) -> Result<(Value, Option<String>)> {
    match result {
        Ok(v) => Ok((json!(v), None)),
        Err(Error::Degenerate(msg)) => Ok((Value::Null, Some(msg))),
        Err(e) => Err(e),
    }
}

// ---------- verify ----------

fn cmd_verify(args: &VerifyArgs, cfg: &RunConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    if let Some(metrics) = &args.metrics {
        cfg.metrics = metrics.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(p) = &args.percentile {
        cfg.percentiles = parse_f64_list(p, "percentile")?;
    }
    cfg.validate()?;

    let (f, t) = load_pair(&args.forecast, &args.truth, &cfg)?;
    let grid = f.header.grid()?;
    let weights = grid.area_weights();
    let mut rows = Vec::new();
    let mut histograms = Vec::new();

    for (ci, ch) in f.header.channels.iter().enumerate() {
        let tci = matching_channel(&t, ch)?;
        for (li, &lead_h) in f.header.lead_times_h.iter().enumerate() {
            let ens = f.to_ensemble_batch(ci, li)?;
            let tgt = t.to_target_batch(tci, li)?;
            let mut binarized: Option<(Vec<f64>, Vec<_>, Vec<_>)> = None;
            for metric in &cfg.metrics {
                match metric.as_str() {
                    "crps" | "rmse" | "spread" | "spread_skill" | "bias" => {
                        let result = match metric.as_str() {
                            "crps" => metrics::crps(&ens, &tgt, &weights),
                            "rmse" => metrics::ensemble_mean_rmse(&ens, &tgt, &weights),
                            "spread" => metrics::spread(&ens, &weights),
                            "spread_skill" => metrics::spread_skill_ratio(&ens, &tgt, &weights),
                            _ => metrics::bias(&ens, &tgt, &weights),
                        };
                        let (value, note) = metric_value(result)?;
                        let mut row = channel_row(ch, lead_h);
                        row.insert("metric".into(), json!(metric));
                        row.insert("value".into(), value);
                        if let Some(note) = note {
                            row.insert("note".into(), json!(note));
                        }
                        rows.push(Value::Object(row));
                    }
                    "rank_histogram" => {
                        let seed = derive_seed(cfg.seed, &[RANK_STREAM, ci as u64, li as u64]);
                        let hist = metrics::rank_histogram(&ens, &tgt, &weights, seed)?;
                        let mut row = channel_row(ch, lead_h);
                        row.insert("counts".into(), json!(hist.counts));
                        histograms.push(Value::Object(row));
                    }
                    "brier" | "brier_skill" => {
                        if binarized.is_none() {
                            let clim = climatology_percentiles(&tgt, &cfg.percentiles)?;
                            let mut pairs = (Vec::new(), Vec::new());
                            for (pi, _) in cfg.percentiles.iter().enumerate() {
                                let th = clim.threshold_field(pi);
                                pairs.0.push(exceedance_binarize(
                                    &ens,
                                    th,
                                    ExceedDirection::Above,
                                )?);
                                pairs.1.push(exceedance_binarize_target(
                                    &tgt,
                                    th,
                                    ExceedDirection::Above,
                                )?);
                            }
                            binarized = Some((cfg.percentiles.clone(), pairs.0, pairs.1));
                        }
                        let (percentiles, bin_ens, bin_tgt) = binarized.as_ref().unwrap();
                        for (pi, &p) in percentiles.iter().enumerate() {
                            let result = if metric == "brier" {
                                metrics::brier_score(&bin_ens[pi], &bin_tgt[pi], &weights)
                            } else {
                                metrics::brier_skill_score(&bin_ens[pi], &bin_tgt[pi], &weights)
                            };
                            let (value, note) = metric_value(result)?;
                            let mut row = channel_row(ch, lead_h);
                            row.insert("metric".into(), json!(metric));
                            row.insert("percentile".into(), json!(p));
                            row.insert("value".into(), value);
                            if let Some(note) = note {
                                row.insert("note".into(), json!(note));
                            }
                            rows.push(Value::Object(row));
                        }
                    }
                    other => {
                        return Err(Error::config(format!("unknown metric {other:?}")));
                    }
                }
            }
        }
    }

    let mut results = json!({ "rows": rows });
    if !histograms.is_empty() {
        results["rank_histograms"] = json!(histograms);
    }
    Ok(Report::new(
        "verify",
        &cfg.canonical_bytes(),
        Some(cfg.seed),
        results,
    ))
}

// ---------- pool ----------

fn cmd_pool(args: &PoolArgs, cfg: &RunConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    if let Some(levels) = &args.pool_level {
        cfg.pool_levels = parse_u32_list(levels, "pool level")?;
    }
    cfg.validate()?;

    let (f, t) = load_pair(&args.forecast, &args.truth, &cfg)?;
    let grid = f.header.grid()?;
    let mut rows = Vec::new();
    for &level in &cfg.pool_levels {
        let regions = build_pool_regions(&grid, level)?;
        for (ci, ch) in f.header.channels.iter().enumerate() {
            let tci = matching_channel(&t, ch)?;
            for (li, &lead_h) in f.header.lead_times_h.iter().enumerate() {
                let ens = f.to_ensemble_batch(ci, li)?;
                let tgt = t.to_target_batch(tci, li)?;
                for (mode, name) in [(PoolMode::Average, "avg"), (PoolMode::Max, "max")] {
                    let value = pooled_crps(&ens, &tgt, &regions, mode)?;
                    let mut row = channel_row(ch, lead_h);
                    row.insert("pool_level".into(), json!(level));
                    row.insert("n_regions".into(), json!(regions.n_regions()));
                    row.insert("mode".into(), json!(name));
                    row.insert("value".into(), json!(value));
                    rows.push(Value::Object(row));
                }
            }
        }
    }
    Ok(Report::new(
        "pool",
        &cfg.canonical_bytes(),
        None,
        json!({ "rows": rows }),
    ))
}

// ---------- rev ----------

fn cmd_rev(args: &RevArgs, cfg: &RunConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    if let Some(p) = &args.percentile {
        cfg.percentiles = parse_f64_list(p, "percentile")?;
    }
    if let Some(r) = &args.cost_loss {
        cfg.cost_loss_ratios = parse_f64_list(r, "cost/loss ratio")?;
    }
    cfg.validate()?;

    let (f, t) = load_pair(&args.forecast, &args.truth, &cfg)?;
    let grid = f.header.grid()?;
    let weights = grid.area_weights();
    let mut rows = Vec::new();
    for (ci, ch) in f.header.channels.iter().enumerate() {
        let tci = matching_channel(&t, ch)?;
        for (li, &lead_h) in f.header.lead_times_h.iter().enumerate() {
            let ens = f.to_ensemble_batch(ci, li)?;
            let tgt = t.to_target_batch(tci, li)?;
            let clim = climatology_percentiles(&tgt, &cfg.percentiles)?;
            for (pi, &p) in cfg.percentiles.iter().enumerate() {
                let th = clim.threshold_field(pi);
                let bin_ens = exceedance_binarize(&ens, th, ExceedDirection::Above)?;
                let bin_tgt = exceedance_binarize_target(&tgt, th, ExceedDirection::Above)?;
                let curve = match metrics::rev_curve(
                    &bin_ens,
                    &bin_tgt,
                    &weights,
                    &cfg.cost_loss_ratios,
                ) {
                    Ok(c) => json!(c),
                    Err(Error::Degenerate(msg)) => {
                        let mut row = channel_row(ch, lead_h);
                        row.insert("percentile".into(), json!(p));
                        row.insert("curve".into(), Value::Null);
                        row.insert("note".into(), json!(msg));
                        rows.push(Value::Object(row));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut row = channel_row(ch, lead_h);
                row.insert("percentile".into(), json!(p));
                row.insert("curve".into(), curve);
                rows.push(Value::Object(row));
            }
        }
    }
    Ok(Report::new(
        "rev",
        &cfg.canonical_bytes(),
        None,
        json!({ "rows": rows }),
    ))
}

// ---------- cyclone ----------

/// Detect and stitch tracks for every member of a container (single init
/// time), clipped to the reporting horizon.
fn container_tracks(c: &Container) -> Result<Vec<Vec<CycloneTrack>>> {
    if c.header.init_times.len() != 1 {
        return Err(Error::config(format!(
            "cyclone pipeline expects a single init time per container, found {}",
            c.header.init_times.len()
        )));
    }
    let detect = DetectConfig::default();
    let stitch = StitchConfig::default();
    let first_lead = *c.header.lead_times_h.first().unwrap();
    let mut out = Vec::with_capacity(c.header.n_members);
    for m in 0..c.header.n_members {
        let mut slices = Vec::with_capacity(c.header.lead_times_h.len());
        for (li, &lead_h) in c.header.lead_times_h.iter().enumerate() {
            let state = c.to_field_set(m, 0, li)?;
            let candidates = detect_nodes(&state, lead_h, &detect)?;
            slices.push(TimeSlice::new(lead_h, candidates)?);
        }
        let tracks = stitch_nodes(&slices, &stitch)?;
        out.push(clip_tracks(&tracks, first_lead, MAX_REPORT_LEAD_H));
    }
    Ok(out)
}

fn cmd_cyclone(args: &CycloneArgs, cfg: &RunConfig) -> Result<Report> {
    let opts = read_opts(cfg);
    let f = read_container(&args.forecast, &opts)?;
    let member_tracks = container_tracks(&f)?;
    let mut results = serde_json::Map::new();
    results.insert("n_members".into(), json!(f.header.n_members));
    results.insert(
        "tracks_per_member".into(),
        json!(member_tracks.iter().map(Vec::len).collect::<Vec<_>>()),
    );

    if let Some(truth_path) = &args.truth {
        let t = read_container(truth_path, &opts)?;
        if t.header.n_members != 1 {
            return Err(Error::data(format!(
                "truth container must hold 1 member, found {}",
                t.header.n_members
            )));
        }
        if t.header.lead_times_h != f.header.lead_times_h {
            return Err(Error::dims("forecast and truth lead times differ"));
        }
        let truth_tracks = container_tracks(&t)?.pop().unwrap();
        results.insert("truth_track_count".into(), json!(truth_tracks.len()));
        let grid = one_degree_grid();
        let mut fc_maps = Vec::new();
        let mut truth_maps = Vec::new();
        for &lead_h in &f.header.lead_times_h {
            if lead_h > MAX_REPORT_LEAD_H {
                break;
            }
            fc_maps.push(strike_heatmap(&member_tracks, &grid, lead_h)?);
            truth_maps.push(strike_heatmap(
                std::slice::from_ref(&truth_tracks),
                &grid,
                lead_h,
            )?);
        }
        let curve = match cyclone_rev(&fc_maps, &truth_maps, &cfg.cost_loss_ratios) {
            Ok(c) => json!(c),
            Err(Error::Degenerate(msg)) => {
                results.insert("rev_note".into(), json!(msg));
                Value::Null
            }
            Err(e) => return Err(e),
        };
        results.insert("rev".into(), curve);
        results.insert(
            "heatmap_times_h".into(),
            json!(fc_maps.iter().map(|h| h.time_h).collect::<Vec<_>>()),
        );
    }

    if let Some(path) = &args.tracks_out {
        let file = std::fs::File::create(path)?;
        write_tracks_csv(std::io::BufWriter::new(file), &member_tracks)?;
        results.insert("tracks_csv".into(), json!(path.display().to_string()));
    }
    Ok(Report::new(
        "cyclone",
        &cfg.canonical_bytes(),
        None,
        Value::Object(results),
    ))
}

// ---------- windpower ----------

fn cmd_windpower(args: &WindpowerArgs, cfg: &RunConfig) -> Result<Report> {
    let (f, t) = load_pair(&args.forecast, &args.truth, cfg)?;
    let grid = f.header.grid()?;
    let iu = f
        .find_channel("10u", None)
        .ok_or_else(|| Error::data("forecast container is missing channel 10u"))?;
    let iv = f
        .find_channel("10v", None)
        .ok_or_else(|| Error::data("forecast container is missing channel 10v"))?;
    let tu = matching_channel(&t, &f.header.channels[iu])?;
    let tv = matching_channel(&t, &f.header.channels[iv])?;

    let farms = read_farms_csv(std::fs::File::open(&args.farms)?)?;
    let curve = match &args.curve {
        Some(path) => PowerCurve::from_csv(std::fs::File::open(path)?)?,
        None => PowerCurve::iec_class2(),
    };
    let pool_sizes = match &args.pool_size {
        Some(text) => parse_f64_list(text, "pool size")?,
        None => WIND_POOL_SIZES_KM.to_vec(),
    };
    let mesh_level = args.mesh_level.unwrap_or(WIND_POOL_MESH_LEVEL);
    let mesh = IcosahedralMesh::refine(mesh_level)?;

    // Farm speeds per (member, init, lead) via bilinear interpolation of
    // the wind-speed magnitude field.
    let speed_at_farms = |c: &Container, m: usize, k: usize, li: usize, cu: usize, cv: usize| -> Result<Vec<f64>> {
        let u = c.slab(m, k, li, cu)?;
        let v = c.slab(m, k, li, cv)?;
        let speed: Vec<f64> = u
            .iter()
            .zip(v)
            .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
            .collect();
        let field = GriddedField::new(grid.clone(), speed)?;
        crate::windpower::interpolate_farm_speeds(&field, &farms)
    };

    let n_members = f.header.n_members;
    let n_inits = f.header.init_times.len();
    let mut rows = Vec::new();
    for (li, &lead_h) in f.header.lead_times_h.iter().enumerate() {
        let mut fc_speeds = Vec::with_capacity(n_members);
        for m in 0..n_members {
            let mut per_init = Vec::with_capacity(n_inits);
            for k in 0..n_inits {
                per_init.push(speed_at_farms(&f, m, k, li, iu, iv)?);
            }
            fc_speeds.push(per_init);
        }
        let mut truth_speeds = Vec::with_capacity(n_inits);
        for k in 0..n_inits {
            truth_speeds.push(speed_at_farms(&t, 0, k, li, tu, tv)?);
        }
        for &size in &pool_sizes {
            let groups = build_farm_groups(&farms, &mesh, size)?;
            let value =
                regional_power_crps(&fc_speeds, &truth_speeds, &farms, &groups, &curve)?;
            rows.push(json!({
                "pool_size_km": size,
                "lead_h": lead_h,
                "n_groups": groups.farm_indices.len(),
                "value": value,
            }));
        }
    }
    Ok(Report::new(
        "windpower",
        &cfg.canonical_bytes(),
        None,
        json!({ "rows": rows, "n_farms": farms.len(), "mesh_level": mesh_level }),
    ))
}

// ---------- sample ----------

fn cmd_sample(args: &SampleArgs, cfg: &RunConfig) -> Result<Report> {
    if args.t_steps == 0 {
        return Err(Error::config("t-steps must be positive"));
    }
    if args.step_hours <= 0 {
        return Err(Error::config("step-hours must be positive"));
    }
    let init = read_container(&args.init, &read_opts(cfg))?;
    let grid = init.header.grid()?;
    let n_channels = init.header.channels.len();
    let g = grid.n_cells();
    let l_max = args.l_max.unwrap_or_else(|| synthesis_band_limit(&grid));
    let noise = SphericalNoiseSpec {
        grid: grid.clone(),
        l_max,
        sigma: 1.0,
    };
    let sched = cfg.sampler.schedule();
    let churn = cfg.sampler.churn();
    let denoiser = ToyDenoiser::uniform(n_channels * g, args.toy_mean, args.toy_std)?;
    let stats = NormalizationStats::unit(n_channels);
    let precip = vec![false; n_channels];

    let n_members = init.header.n_members;
    let n_inits = init.header.init_times.len();
    let last_lead_idx = init.header.lead_times_h.len() - 1;
    let prev_lead_idx = last_lead_idx.saturating_sub(1);
    let base_lead = init.header.lead_times_h[last_lead_idx];
    let lead_times_h: Vec<i64> = (1..=args.t_steps as i64)
        .map(|s| base_lead + s * args.step_hours)
        .collect();

    let header = ContainerHeader::new(
        &grid,
        init.header.channels.clone(),
        init.header.init_times.clone(),
        lead_times_h,
        n_members,
    );
    let mut data = vec![0.0f32; header.n_values()];
    let t = args.t_steps;
    for m in 0..n_members {
        for k in 0..n_inits {
            let x0: Vec<f64> = (0..n_channels)
                .map(|c| init.slab(m, k, last_lead_idx, c))
                .collect::<Result<Vec<_>>>()?
                .concat()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let x_prev: Vec<f64> = (0..n_channels)
                .map(|c| init.slab(m, k, prev_lead_idx, c))
                .collect::<Result<Vec<_>>>()?
                .concat()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let seed = derive_seed(cfg.seed, &[SAMPLE_MEMBER_STREAM, m as u64, k as u64]);
            let states = rollout(
                &x0, &x_prev, n_channels, t, &stats, &precip, &sched, &churn, &denoiser,
                &noise, seed,
            )?;
            for (step, state) in states.iter().enumerate() {
                for c in 0..n_channels {
                    let start = (((m * n_inits + k) * t + step) * n_channels + c) * g;
                    for i in 0..g {
                        data[start + i] = state[c * g + i] as f32;
                    }
                }
            }
        }
    }
    let container = Container::new(header, data)?;
    write_container(&args.out, &container)?;
    Ok(Report::new(
        "sample",
        &cfg.canonical_bytes(),
        Some(cfg.seed),
        json!({
            "out": args.out.display().to_string(),
            "members": n_members,
            "init_times": n_inits,
            "t_steps": t,
            "channels": n_channels,
            "l_max": l_max,
        }),
    ))
}

// ---------- perturb ----------

/// Synthetic ISO init timestamps, 12 h apart starting 1970-01-01.
fn synthetic_init_times(n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::config("at least one init time is required"));
    }
    if n > 58 {
        return Err(Error::config(format!(
            "at most 58 synthetic init times are supported, got {n}"
        )));
    }
    Ok((0..n)
        .map(|k| format!("1970-01-{:02}T{:02}:00:00Z", 1 + k / 2, 12 * (k % 2)))
        .collect())
}

fn cmd_perturb(args: &PerturbArgs, cfg: &RunConfig) -> Result<Report> {
    if args.members == 0 {
        return Err(Error::config("members must be positive"));
    }
    let opts = read_opts(cfg);
    // Resolve the base states (one per init time) and the grid.
    let (grid, base, init_times): (LatLonGrid, Option<Container>, Vec<String>) = match (&args.base, &args.grid) {
        (Some(path), None) => {
            let c = read_container(path, &opts)?;
            if c.header.n_members != 1 {
                return Err(Error::data(format!(
                    "base container must hold 1 member, found {}",
                    c.header.n_members
                )));
            }
            let inits = c.header.init_times.clone();
            (c.header.grid()?, Some(c), inits)
        }
        (None, Some(dims)) => (
            parse_grid_dims(dims)?,
            None,
            synthetic_init_times(args.inits)?,
        ),
        _ => {
            return Err(Error::config(
                "exactly one of --base and --grid must be given",
            ));
        }
    };

    // Perturbation targets.
    let targets: Vec<VariableStd> = match &args.std {
        Some(text) => parse_std_list(text)?,
        None => match &base {
            Some(c) => c
                .header
                .channels
                .iter()
                .map(|ch| VariableStd {
                    variable: ch.variable.clone(),
                    level_hpa: ch.level_hpa,
                    std_6h_diff: 1.0,
                })
                .collect(),
            None => vec![VariableStd {
                variable: "2t".to_string(),
                level_hpa: None,
                std_6h_diff: 1.0,
            }],
        },
    };
    let spec = GpPerturbSpec {
        lengthscale_km: args.lengthscale_km,
        scale_factor: args.scale,
        targets,
    };
    let channels: Vec<ChannelMeta> = spec
        .targets
        .iter()
        .map(|t| ChannelMeta {
            variable: t.variable.clone(),
            level_hpa: t.level_hpa,
        })
        .collect();
    // Base channel indices aligned with the output channels.
    let base_channel_idx: Option<Vec<usize>> = match &base {
        Some(c) => Some(
            channels
                .iter()
                .map(|ch| {
                    c.find_channel(&ch.variable, ch.level_hpa).ok_or_else(|| {
                        Error::data(format!(
                            "base container is missing channel {}",
                            ch.label()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let g = grid.n_cells();
    let n_channels = channels.len();
    let n_inits = init_times.len();
    let header = ContainerHeader::new(
        &grid,
        channels,
        init_times,
        vec![0],
        args.members,
    );
    let mut data = vec![0.0f32; header.n_values()];
    for m in 0..args.members {
        for k in 0..n_inits {
            let seed = derive_seed(cfg.seed, &[PERTURB_MEMBER_STREAM, k as u64, m as u64]);
            let pert = gp_perturbation(&spec, &grid, seed)?;
            for c in 0..n_channels {
                let start = ((m * n_inits + k) * n_channels + c) * g;
                let p = pert.channel(c);
                match (&base, &base_channel_idx) {
                    (Some(bc), Some(idx)) => {
                        let lead = bc.header.lead_times_h.len() - 1;
                        let b = bc.slab(0, k, lead, idx[c])?;
                        for i in 0..g {
                            data[start + i] = (b[i] as f64 + p[i]) as f32;
                        }
                    }
                    _ => {
                        for i in 0..g {
                            data[start + i] = p[i] as f32;
                        }
                    }
                }
            }
        }
    }
    let container = Container::new(header, data)?;
    write_container(&args.out, &container)?;
    Ok(Report::new(
        "perturb",
        &cfg.canonical_bytes(),
        Some(cfg.seed),
        json!({
            "out": args.out.display().to_string(),
            "members": args.members,
            "init_times": n_inits,
            "channels": n_channels,
            "lengthscale_km": args.lengthscale_km,
            "scale": args.scale,
        }),
    ))
}

// ---------- sigtest ----------

fn cmd_sigtest(args: &SigtestArgs, cfg: &RunConfig) -> Result<Report> {
    let kind = match args.metric.as_str() {
        "crps" => MetricKind::Crps,
        "rmse" => MetricKind::EnsembleMeanRmse,
        other => {
            return Err(Error::config(format!(
                "unsupported sigtest metric {other:?}; use crps or rmse"
            )));
        }
    };
    let opts = read_opts(cfg);
    let a = read_container(&args.forecast, &opts)?;
    let b = read_container(&args.baseline, &opts)?;
    let (_, t) = load_pair(&args.forecast, &args.truth, cfg)?;
    if b.header.latitudes != a.header.latitudes
        || b.header.longitudes != a.header.longitudes
        || b.header.init_times != a.header.init_times
        || b.header.lead_times_h != a.header.lead_times_h
    {
        return Err(Error::dims(
            "forecast and baseline containers describe different grids or times",
        ));
    }
    let grid = a.header.grid()?;
    let weights = grid.area_weights();
    let n_inits = a.header.init_times.len();
    let n_leads = a.header.lead_times_h.len();
    // Series over init times per lead when long enough for block-length
    // selection; otherwise one series per channel over (init, lead).
    let per_lead = n_inits >= 32;

    let component_series = |c: &Container, ci: usize, tci: usize, li: usize| -> Result<Vec<Option<f64>>> {
        let ens = c.to_ensemble_batch(ci, li)?;
        let tgt = t.to_target_batch(tci, li)?;
        match kind {
            MetricKind::Crps => metrics::crps_series(&ens, &tgt, &weights),
            MetricKind::EnsembleMeanRmse => metrics::mse_series(&ens, &tgt, &weights),
            _ => unreachable!("restricted above"),
        }
    };

    let mut rows = Vec::new();
    for (ci, ch) in a.header.channels.iter().enumerate() {
        let bci = matching_channel(&b, ch)?;
        let tci = matching_channel(&t, ch)?;
        let mut tasks: Vec<(Option<i64>, Vec<Option<f64>>, Vec<Option<f64>>)> = Vec::new();
        if per_lead {
            for (li, &lead_h) in a.header.lead_times_h.iter().enumerate() {
                tasks.push((
                    Some(lead_h),
                    component_series(&a, ci, tci, li)?,
                    component_series(&b, bci, tci, li)?,
                ));
            }
        } else {
            // Pool leads within each init time, ordered by valid time.
            let mut sa = Vec::with_capacity(n_inits * n_leads);
            let mut sb = Vec::with_capacity(n_inits * n_leads);
            let mut per_lead_a = Vec::with_capacity(n_leads);
            let mut per_lead_b = Vec::with_capacity(n_leads);
            for li in 0..n_leads {
                per_lead_a.push(component_series(&a, ci, tci, li)?);
                per_lead_b.push(component_series(&b, bci, tci, li)?);
            }
            for k in 0..n_inits {
                for li in 0..n_leads {
                    sa.push(per_lead_a[li][k]);
                    sb.push(per_lead_b[li][k]);
                }
            }
            tasks.push((None, sa, sb));
        }
        for (lead_h, sa, sb) in tasks {
            let n = sa.len();
            let timestamps: Vec<i64> = (0..n as i64).collect();
            let series_a = impute_missing(&StatisticSeries::from_scalars(timestamps.clone(), &sa)?)?;
            let series_b = impute_missing(&StatisticSeries::from_scalars(timestamps, &sb)?)?;
            let seed = derive_seed(
                cfg.seed,
                &[SIGTEST_STREAM, ci as u64, lead_h.unwrap_or(-1) as u64],
            );
            let r = paired_metric_test(kind, &series_a, &series_b, cfg.alpha, cfg.n_resamples, seed)?;
            let mut row = serde_json::Map::new();
            row.insert("variable".into(), json!(ch.variable));
            row.insert("level_hpa".into(), json!(ch.level_hpa));
            row.insert("lead_h".into(), json!(lead_h));
            row.insert("pooled_leads".into(), json!(lead_h.is_none()));
            row.insert("metric".into(), json!(r.metric));
            row.insert("value_a".into(), json!(r.value_a));
            row.insert("value_b".into(), json!(r.value_b));
            row.insert("difference".into(), json!(r.difference));
            row.insert("ci_lo".into(), json!(r.ci_lo));
            row.insert("ci_hi".into(), json!(r.ci_hi));
            row.insert("reject".into(), json!(r.reject));
            row.insert("alpha".into(), json!(r.alpha));
            row.insert("block_length".into(), json!(r.block_length));
            row.insert("n_resamples".into(), json!(r.n_resamples));
            row.insert("z0_clamped".into(), json!(r.z0_clamped));
            rows.push(Value::Object(row));
        }
    }
    Ok(Report::new(
        "sigtest",
        &cfg.canonical_bytes(),
        Some(cfg.seed),
        json!({ "rows": rows, "n_rejections": rows.iter().filter(|r| r["reject"] == json!(true)).count() }),
    ))
}
