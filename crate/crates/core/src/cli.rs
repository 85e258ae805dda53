//! Batch commands: `track`, `eval`, `sweep` and `synth`.
//!
//! Effective tracker settings are resolved as flags > config file > built-in
//! defaults. Config files and the `config.*` lines of stats files share the
//! same `key=value` vocabulary (see [`config_to_kv`]).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::gating::GateMode;
use crate::io::{self, FeatureStore, MotRow};
use crate::metrics::{self, format_pde, parse_kv, EvalReport};
use crate::synth;
use crate::tracker::{
    run_sequence, FeatureProvider, Frame, MatchConfig, MatchStrategy, NoFeatures, OutputBox,
    RunOutput, RunStats, TrackerConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "smot",
    version,
    about = "Tracking with selective appearance feature extraction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the tracker over a MOTChallenge detection file.
    Track(TrackArgs),
    /// Score a result file against ground truth.
    Eval(EvalArgs),
    /// Sweep the IoU threshold and report extraction ratio against accuracy.
    Sweep(SweepArgs),
    /// Write a synthetic scenario (det.txt, features.feab, gt.txt).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputBoxArg {
    Kalman,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Kv,
}

/// Tracker settings; unset flags fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    /// Extraction mode: selective, base or always [default: selective]
    #[arg(long, value_parser = GateMode::from_str)]
    pub mode: Option<GateMode>,
    /// IoU threshold for candidate tracks [default: 0.2]
    #[arg(long = "iou-th")]
    pub iou_th: Option<f64>,
    /// Threshold on the IoU-blended aspect-ratio similarity [default: 0.6]
    #[arg(long = "ars-th")]
    pub ars_th: Option<f64>,
    /// Disable aspect-ratio screening of candidates [default: enabled]
    #[arg(long = "no-ars")]
    pub no_ars: bool,
    /// Association strategy: cascade, fused or iou [default: cascade]
    #[arg(long = "match", value_parser = MatchStrategy::from_str)]
    pub strategy: Option<MatchStrategy>,
    /// Largest cosine distance for an appearance match [default: 0.4]
    #[arg(long = "appearance-gate")]
    pub appearance_gate: Option<f64>,
    /// Smallest IoU for an IoU match [default: 0.3]
    #[arg(long = "iou-gate")]
    pub iou_gate: Option<f64>,
    /// Weight of the appearance cost in fused matching [default: 0.5]
    #[arg(long = "fused-weight")]
    pub fused_weight: Option<f64>,
    /// Confidence splitting high and low detections [default: 0.6]
    #[arg(long = "conf-high")]
    pub conf_high: Option<f64>,
    /// Associate low-confidence detections by IoU [default: true for fused, false otherwise]
    #[arg(long = "byte")]
    pub byte: Option<bool>,
    /// Matches needed to confirm a track [default: 1]
    #[arg(long = "min-hits")]
    pub min_hits: Option<u32>,
    /// Missed frames before a track is deleted [default: 30]
    #[arg(long = "max-age")]
    pub max_age: Option<u32>,
    /// EMA weight on the existing embedding [default: 0.9]
    #[arg(long = "ema-alpha")]
    pub ema_alpha: Option<f64>,
    /// Disable feature decay across frames without extraction [default: enabled]
    #[arg(long = "no-decay")]
    pub no_decay: bool,
    /// Emitted box: kalman or detection [default: kalman]
    #[arg(long = "output-box", value_enum)]
    pub output_box: Option<OutputBoxArg>,
    /// key=value config file (same keys as the config.* lines of stats files)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    /// MOTChallenge detection file
    #[arg(long)]
    pub det: PathBuf,
    /// Feature file; without it every extraction comes back empty
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Result file
    #[arg(long)]
    pub out: PathBuf,
    /// Stats file [default: <out>.stats]
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground truth file
    #[arg(long)]
    pub gt: PathBuf,
    /// Result file
    #[arg(long = "res")]
    pub res: PathBuf,
    /// Stats file written by `track`, for the PDE line
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// IoU needed for a result box to cover a ground truth box [default: 0.5]
    #[arg(long = "iou-match", default_value_t = metrics::DEFAULT_IOU_MATCH)]
    pub iou_match: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated IoU thresholds
    #[arg(
        long = "iou-th-grid",
        default_value = "0.0,0.1,0.2,0.3,0.4,0.5",
        value_delimiter = ','
    )]
    pub grid: Vec<f64>,
    #[arg(long = "iou-match", default_value_t = metrics::DEFAULT_IOU_MATCH)]
    pub iou_match: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Named scenario: crossing, parade, enter_exit or dense_grid
    #[arg(long, conflicts_with = "random_targets")]
    pub preset: Option<String>,
    /// Generate a random scenario with up to this many targets instead
    #[arg(long = "random-targets")]
    pub random_targets: Option<usize>,
    /// Overrides the scenario seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn config_to_kv(cfg: &TrackerConfig) -> Vec<(String, String)> {
    let m = &cfg.matching;
    let g = &cfg.gate;
    [
        ("gate.mode", g.mode.to_string()),
        ("gate.theta_iou", g.theta_iou.to_string()),
        ("gate.theta_alpha", g.theta_alpha.to_string()),
        ("gate.ars", g.ars_enabled.to_string()),
        ("match.strategy", m.strategy.to_string()),
        ("match.appearance_gate", m.appearance_gate.to_string()),
        ("match.iou_gate", m.iou_gate.to_string()),
        ("match.fused_weight", m.fused_weight.to_string()),
        ("match.conf_high", m.conf_high.to_string()),
        ("match.byte_low", m.byte_low.to_string()),
        ("match.min_hits", m.min_hits.to_string()),
        ("match.max_age", m.max_age.to_string()),
        ("ema.alpha", cfg.ema_alpha.to_string()),
        ("ema.decay", cfg.feature_decay.to_string()),
        (
            "output.box",
            match cfg.output {
                OutputBox::Kalman => "kalman".to_string(),
                OutputBox::Detection => "detection".to_string(),
            },
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("bad value '{value}' for {key}"))
}

/// Applies one config-file setting. Returns whether it set `match.byte_low`.
pub fn apply_setting(cfg: &mut TrackerConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "gate.mode" => cfg.gate.mode = value.parse()?,
        "gate.theta_iou" => cfg.gate.theta_iou = parse_value(key, value)?,
        "gate.theta_alpha" => cfg.gate.theta_alpha = parse_value(key, value)?,
        "gate.ars" => cfg.gate.ars_enabled = parse_value(key, value)?,
        "match.strategy" => cfg.matching.strategy = value.parse()?,
        "match.appearance_gate" => cfg.matching.appearance_gate = parse_value(key, value)?,
        "match.iou_gate" => cfg.matching.iou_gate = parse_value(key, value)?,
        "match.fused_weight" => cfg.matching.fused_weight = parse_value(key, value)?,
        "match.conf_high" => cfg.matching.conf_high = parse_value(key, value)?,
        "match.byte_low" => {
            cfg.matching.byte_low = parse_value(key, value)?;
            return Ok(true);
        }
        "match.min_hits" => cfg.matching.min_hits = parse_value(key, value)?,
        "match.max_age" => cfg.matching.max_age = parse_value(key, value)?,
        "ema.alpha" => cfg.ema_alpha = parse_value(key, value)?,
        "ema.decay" => cfg.feature_decay = parse_value(key, value)?,
        "output.box" => {
            cfg.output = match value {
                "kalman" => OutputBox::Kalman,
                "detection" => OutputBox::Detection,
                _ => bail!("bad value '{value}' for {key}"),
            }
        }
        other => bail!("unknown config key '{other}'"),
    }
    Ok(false)
}

impl TuningArgs {
    pub fn resolve(&self) -> Result<TrackerConfig> {
        let mut cfg = TrackerConfig::default();
        let mut byte_set = None;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_kv(&text) {
                let k = k.strip_prefix("config.").unwrap_or(&k).to_string();
                if apply_setting(&mut cfg, &k, &v).with_context(|| path.display().to_string())? {
                    byte_set = Some(cfg.matching.byte_low);
                }
            }
        }
        if let Some(m) = self.mode {
            cfg.gate.mode = m;
        }
        if let Some(v) = self.iou_th {
            cfg.gate.theta_iou = v;
        }
        if let Some(v) = self.ars_th {
            cfg.gate.theta_alpha = v;
        }
        if self.no_ars {
            cfg.gate.ars_enabled = false;
        }
        if let Some(s) = self.strategy {
            cfg.matching.strategy = s;
        }
        if let Some(v) = self.appearance_gate {
            cfg.matching.appearance_gate = v;
        }
        if let Some(v) = self.iou_gate {
            cfg.matching.iou_gate = v;
        }
        if let Some(v) = self.fused_weight {
            cfg.matching.fused_weight = v;
        }
        if let Some(v) = self.conf_high {
            cfg.matching.conf_high = v;
        }
        if let Some(v) = self.byte {
            byte_set = Some(v);
        }
        if let Some(v) = self.min_hits {
            cfg.matching.min_hits = v;
        }
        if let Some(v) = self.max_age {
            cfg.matching.max_age = v;
        }
        if let Some(v) = self.ema_alpha {
            cfg.ema_alpha = v;
        }
        if self.no_decay {
            cfg.feature_decay = false;
        }
        if let Some(o) = self.output_box {
            cfg.output = match o {
                OutputBoxArg::Kalman => OutputBox::Kalman,
                OutputBoxArg::Detection => OutputBox::Detection,
            };
        }
        cfg.matching.byte_low =
            byte_set.unwrap_or(MatchConfig::for_strategy(cfg.matching.strategy).byte_low);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key=value` stats lines for one run, followed by the effective config.
pub fn format_stats(stats: &RunStats, rows: usize, cfg: &TrackerConfig) -> String {
    let mut out = String::new();
    let total_ms: f64 = stats
        .frame_times
        .iter()
        .map(|d| d.as_secs_f64() * 1e3)
        .sum();
    let _ = writeln!(out, "pde={}", format_pde(stats.pde()));
    let _ = writeln!(out, "fetches={}", stats.fetches);
    let _ = writeln!(out, "detections={}", stats.detections);
    let _ = writeln!(out, "total_detections={}", stats.total_detections);
    let _ = writeln!(out, "frames={}", stats.frames);
    let _ = writeln!(out, "rows={rows}");
    let _ = writeln!(out, "frame_time_ms_total={total_ms:.3}");
    for (k, v) in config_to_kv(cfg) {
        let _ = writeln!(out, "config.{k}={v}");
    }
    out
}

/// Reads the counters back from a stats file.
pub fn parse_stats(text: &str) -> Result<RunStats> {
    let kv = parse_kv(text);
    let get = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| anyhow!("stats file lacks '{k}'"))?
            .parse()
            .map_err(|_| anyhow!("bad '{k}' in stats file"))
    };
    Ok(RunStats {
        fetches: get("fetches")?,
        detections: get("detections")?,
        total_detections: get("total_detections").unwrap_or(0),
        frames: get("frames").unwrap_or(0),
        frame_times: Vec::new(),
    })
}

fn load_provider(path: Option<&Path>) -> Result<Box<dyn FeatureProvider>> {
    Ok(match path {
        Some(p) => Box::new(
            FeatureStore::open(p).with_context(|| format!("reading features {}", p.display()))?,
        ),
        None => Box::new(NoFeatures),
    })
}

fn load_detections(path: &Path) -> Result<Vec<Frame>> {
    io::read_detections(path).with_context(|| format!("reading detections {}", path.display()))
}

pub fn cmd_track(args: &TrackArgs) -> Result<RunOutput> {
    let cfg = args.tuning.resolve()?;
    let frames = load_detections(&args.det)?;
    let provider = load_provider(args.features.as_deref())?;
    let out = run_sequence(&frames, provider.as_ref(), &cfg)?;
    io::write_results(&args.out, &out.rows)?;
    let stats_path = args
        .stats
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.stats", args.out.display())));
    fs::write(&stats_path, format_stats(&out.stats, out.rows.len(), &cfg))
        .with_context(|| format!("writing {}", stats_path.display()))?;
    Ok(out)
}

/// Fails when results cover frames that the ground truth does not.
pub fn check_frame_domain(gt: &[MotRow], pred: &[MotRow]) -> Result<()> {
    let Some(pred_max) = pred.iter().map(|r| r.frame).max() else {
        return Ok(());
    };
    match gt.iter().map(|r| r.frame).max() {
        None => bail!("ground truth is empty but results cover frames up to {pred_max}"),
        Some(gt_max) if pred_max > gt_max => {
            bail!("results reach frame {pred_max} but ground truth ends at frame {gt_max}")
        }
        _ => Ok(()),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let gt = io::read_ground_truth(&args.gt)
        .with_context(|| format!("reading ground truth {}", args.gt.display()))?;
    let pred = io::read_rows(&args.res)
        .with_context(|| format!("reading results {}", args.res.display()))?;
    check_frame_domain(&gt, &pred)?;
    let stats = match &args.stats {
        Some(p) => Some(parse_stats(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let report = EvalReport::compute(&gt, &pred, args.iou_match, stats.as_ref());
    let text = match args.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Kv => report.to_kv(),
    };
    emit(&text, args.out.as_deref())?;
    Ok(text)
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tracker: String,
    pub theta_iou: Option<f64>,
    pub pde: Option<f64>,
    pub idf1: f64,
    pub id_switches: u64,
}

/// Runs the baseline (always extract) and every grid threshold.
pub fn sweep(
    frames: &[Frame],
    provider: &dyn FeatureProvider,
    gt: &[MotRow],
    base: &TrackerConfig,
    grid: &[f64],
    iou_match: f64,
) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::with_capacity(grid.len() + 1);
    let mut always = *base;
    always.gate.mode = GateMode::AlwaysExtract;
    configs.push(("always".to_string(), None, always));
    for &theta in grid {
        let mut cfg = *base;
        if cfg.gate.mode == GateMode::AlwaysExtract {
            cfg.gate.mode = GateMode::Selective;
        }
        cfg.gate.theta_iou = theta;
        configs.push((cfg.gate.mode.to_string(), Some(theta), cfg));
    }
    configs
        .par_iter()
        .map(|(name, theta, cfg)| {
            let out = run_sequence(frames, provider, cfg)?;
            let pred: Vec<MotRow> = out
                .rows
                .iter()
                .map(|r| MotRow {
                    frame: r.frame,
                    id: r.id as i64,
                    bbox: r.bbox,
                    conf: 1.0,
                })
                .collect();
            // score what a result file would contain
            let pred = io::parse_rows(&io::format_results(&out.rows)).unwrap_or(pred);
            let report = EvalReport::compute(gt, &pred, iou_match, Some(&out.stats));
            Ok(SweepRow {
                tracker: name.clone(),
                theta_iou: *theta,
                pde: report.pde,
                idf1: report.idf1,
                id_switches: report.id_switches,
            })
        })
        .collect()
}

fn relative(value: f64, base: f64, decimals: usize) -> String {
    if base == 0.0 {
        return String::new();
    }
    let pct = 100.0 * (value - base) / base;
    let pct = if pct.abs() < 0.5 * 10f64.powi(-(decimals as i32)) {
        0.0
    } else {
        pct
    };
    format!(" ({:+.*}%)", decimals, pct)
}

/// Table with one row per tracker configuration, relative changes against
/// the first (baseline) row in parentheses.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>16} {:>20} {:>11}",
        "tracker", "theta_iou", "pde", "idf1", "id_switches"
    );
    let base = rows.first();
    for r in rows {
        let theta = r
            .theta_iou
            .map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
        let mut pde = format_pde(r.pde);
        let mut idf1 = format!("{:.4}", r.idf1);
        if let Some(b) = base.filter(|b| !std::ptr::eq(*b, r)) {
            if let (Some(p), Some(bp)) = (r.pde, b.pde) {
                pde.push_str(&relative(p, bp, 0));
            }
            idf1.push_str(&relative(r.idf1, b.idf1, 2));
        }
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>16} {:>20} {:>11}",
            r.tracker, theta, pde, idf1, r.id_switches
        );
    }
    out
}

pub fn format_sweep_kv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let theta = r
            .theta_iou
            .map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
        let _ = writeln!(
            out,
            "tracker={} theta_iou={} pde={} idf1={:.6} id_switches={}",
            r.tracker,
            theta,
            format_pde(r.pde),
            r.idf1,
            r.id_switches
        );
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let cfg = args.tuning.resolve()?;
    let frames = load_detections(&args.det)?;
    let provider = load_provider(args.features.as_deref())?;
    let gt = io::read_ground_truth(&args.gt)
        .with_context(|| format!("reading ground truth {}", args.gt.display()))?;
    let rows = sweep(
        &frames,
        provider.as_ref(),
        &gt,
        &cfg,
        &args.grid,
        args.iou_match,
    )?;
    let text = match args.format {
        ReportFormat::Table => format_sweep_table(&rows),
        ReportFormat::Kv => format_sweep_kv(&rows),
    };
    emit(&text, args.out.as_deref())?;
    Ok(text)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut scenario = match (&args.preset, args.random_targets) {
        (Some(name), _) => synth::preset(name)?,
        (None, Some(n)) => synth::random_scenario(args.seed.unwrap_or(0), n),
        (None, None) => bail!(
            "either --preset or --random-targets is required (presets: {})",
            synth::PRESETS.join(", ")
        ),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario.write_to(&args.out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Track(a) => {
            let out = cmd_track(&a)?;
            println!(
                "pde={} fetches={} detections={} rows={}",
                format_pde(out.stats.pde()),
                out.stats.fetches,
                out.stats.detections,
                out.rows.len()
            );
        }
        Command::Eval(a) => {
            cmd_eval(&a)?;
        }
        Command::Sweep(a) => {
            cmd_sweep(&a)?;
        }
        Command::Synth(a) => cmd_synth(&a)?,
    }
    Ok(())
}
