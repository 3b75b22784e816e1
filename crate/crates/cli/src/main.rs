use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hpl_core::config::ExperimentConfig;
use hpl_core::dataset::{tile_image, Dataset};
use hpl_core::eval::{evaluate, preset, run_ablation, AblationRow};
use hpl_core::events::{read_events, read_events_csv, voxel_windows, voxelize};
use hpl_core::formats::write_tensor_file;
use hpl_core::labeling::{make_channel, ReconMode};
use hpl_core::segnet::{load_checkpoint, save_checkpoint};
use hpl_core::trainer::{metrics_csv, Trainer};
use hpl_core::{gradcheck, Error};

#[derive(Parser)]
#[command(name = "hpl", version, about = "Hybrid pseudo-label domain adaptation for event segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the file is parsed. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up and self-train; artifacts go to `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Target)]
        split: Split,
    },
    /// Run an ablation table and write report.csv / report.json.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// table3, table4 or table5.
        #[arg(long, conflicts_with = "rows")]
        preset: Option<String>,
        /// JSON list of {"label", "overrides"} rows.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Number of seeds, counted up from the base seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss term.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Convert an event file to a voxel tensor file.
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        /// Sensor size for CSV input, as WIDTHxHEIGHT.
        #[arg(long)]
        csv_size: Option<String>,
        #[arg(long)]
        events_per_grid: Option<usize>,
        #[arg(long)]
        num_grids: Option<usize>,
        #[arg(long, value_enum)]
        preset: Option<VoxelPreset>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Target,
    Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum VoxelPreset {
    Dsec,
    Ddd17,
}

impl VoxelPreset {
    fn sizes(self) -> (usize, usize) {
        match self {
            VoxelPreset::Dsec => (100_000, 40),
            VoxelPreset::Ddd17 => (32_000, 20),
        }
    }
}

enum Failure {
    Check(String),
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes via a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    seed: u64,
    config: ExperimentConfig,
    artifacts: Vec<String>,
    wall_clock_seconds: f64,
}

fn cmd_gen_data(cfg: &ConfigArgs, out: &Path) -> CmdResult {
    let cfg = load_config(cfg)?.resolved();
    cfg.data.validate()?;
    cfg.recon.validate()?;
    let data = Dataset::generate(&cfg.data)?;
    create_dir(out)?;
    data.save(out, &cfg.recon)?;
    println!(
        "wrote {} source, {} target, {} eval samples to {}",
        data.source.len(),
        data.target.len(),
        data.target_eval.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data_dir: &Path, out: &Path) -> CmdResult {
    let start = Instant::now();
    let mut cfg = load_config(args)?.resolved();
    let data = Dataset::load(data_dir)?;
    // The dataset on disk fixes the data section.
    cfg.data = data.config.clone();
    if cfg.recon.mode == ReconMode::File && cfg.recon.dir.is_none() {
        cfg.recon.dir = Some(data_dir.join("recon"));
    }
    cfg.validate()?;
    let recon = make_channel(&cfg.recon)?;
    let trainer = Trainer::new(&cfg.train, &data, recon.as_ref())?;
    let state = trainer.run(&cfg.segnet_config())?;

    create_dir(out)?;
    let csv = metrics_csv(&state.history);
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let ckpt = out.join("final.segc");
    save_checkpoint(&state.student, &ckpt)?;
    let snapshot = serde_json::to_string_pretty(&cfg).map_err(Error::from)? + "\n";
    write_atomic(&out.join("config.json"), snapshot.as_bytes())?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts: vec!["metrics.csv".into(), "final.segc".into(), "config.json".into()],
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
    write_atomic(&out.join("run.json"), text.as_bytes())?;
    if let Some(last) = state.history.last() {
        println!(
            "iter {}: target accuracy {:.4}, mIoU {:.4}",
            last.iter, last.target_acc, last.target_miou
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: Split) -> CmdResult {
    let params = load_checkpoint(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let c = &params.config;
    if c.in_channels != data.config.num_grids || c.num_classes != data.config.num_classes {
        return Err(Error::ConfigMismatch {
            expected: format!(
                "in_channels={} num_classes={}",
                data.config.num_grids, data.config.num_classes
            ),
            found: format!("in_channels={} num_classes={}", c.in_channels, c.num_classes),
        }
        .into());
    }
    let m = match split {
        Split::Target => evaluate(&params, data.target_eval.iter().map(|t| (&t.voxel, &t.labels)))?,
        Split::Source => {
            let inputs = data
                .source
                .iter()
                .map(|s| tile_image(&s.image, data.config.num_grids))
                .collect::<Result<Vec<_>, _>>()?;
            evaluate(&params, inputs.iter().zip(data.source.iter().map(|s| &s.labels)))?
        }
    };
    println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, preset_name: Option<&str>, rows: Option<&Path>, seeds: u64, out: &Path) -> CmdResult {
    let base = load_config(args)?;
    let rows: Vec<AblationRow> = match (preset_name, rows) {
        (Some(p), _) => preset(p)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("rows file: {e}")))?
        }
        (None, None) => return Err(Failure::Usage("either --preset or --rows is required".into())),
    };
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be ≥ 1".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
    let report = run_ablation(&base, &rows, &seed_list)?;
    report.write(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_grad_check(seed: u64, flip: Option<&str>) -> CmdResult {
    let reports = gradcheck::run_suite(seed, flip)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<10} max_rel_err {:.3e}  worst {} ({})  {}",
            r.term,
            r.max_rel_err,
            r.worst_index,
            r.worst_param,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(format!("{} at parameter {} ({})", r.term, r.worst_index, r.worst_param));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), Error> {
    let bad = || Error::Config(format!("sensor size `{s}` is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn cmd_voxelize(
    events: &Path,
    csv_size: Option<&str>,
    epg: Option<usize>,
    grids: Option<usize>,
    preset: Option<VoxelPreset>,
    out: &Path,
) -> CmdResult {
    let (pe, pg) = preset.map(VoxelPreset::sizes).unzip();
    let (Some(epg), Some(grids)) = (epg.or(pe), grids.or(pg)) else {
        return Err(Failure::Usage(
            "give --preset or both --events-per-grid and --num-grids".into(),
        ));
    };
    let stream = match csv_size {
        Some(s) => {
            let (w, h) = parse_size(s)?;
            read_events_csv(events, w, h)?
        }
        None => read_events(events)?,
    };
    let v = voxelize(&stream, epg, grids)?;
    let windows = voxel_windows(stream.len(), epg, grids)?;
    write_tensor_file(out, v.tensor())?;
    for (g, w) in windows.iter().enumerate() {
        let ch = v.channel(g);
        let pos: f64 = ch.iter().filter(|&&x| x > 0.0).sum();
        let neg: f64 = ch.iter().filter(|&&x| x < 0.0).sum();
        println!(
            "channel {g}: events {}..{} sum {} positive {} negative {} abs {}",
            w.start,
            w.end,
            pos + neg,
            pos,
            neg,
            v.channel_abs_sum(g)
        );
    }
    println!("consumed {} events, abs total {}", epg * grids, v.abs_sum());
    Ok(())
}

fn configure_threads() {
    let n = std::env::var("HPL_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::GenData { cfg, out } => cmd_gen_data(cfg, out),
        Command::Train { cfg, data, out } => cmd_train(cfg, data, out),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(checkpoint, data, *split),
        Command::Ablate {
            cfg,
            preset,
            rows,
            seeds,
            out,
        } => cmd_ablate(cfg, preset.as_deref(), rows.as_deref(), *seeds, out),
        Command::GradCheck {
            seed,
            inject_sign_flip,
        } => cmd_grad_check(*seed, inject_sign_flip.as_deref()),
        Command::Voxelize {
            events,
            csv_size,
            events_per_grid,
            num_grids,
            preset,
            out,
        } => cmd_voxelize(events, csv_size.as_deref(), *events_per_grid, *num_grids, *preset, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
