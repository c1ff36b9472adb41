use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use clickcal::appsense::write_scan_csv;
use clickcal::config::RunConfig;
use clickcal::dataset::{DataFormat, Dataset};
use clickcal::pipeline;
use clickcal::report::{emit_report, Report};
use clickcal::Exec;

#[derive(Parser)]
#[command(
    name = "clickcal",
    version,
    about = "Simulate and calibrate click-counting detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dataset to read (overrides `input` in the config).
    #[arg(long, global = true, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output directory (overrides `output` in the config).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Format of data files written, and of the input when its extension is ambiguous.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Moment order used to extract the response.
    #[arg(long, global = true, value_name = "L")]
    order: Option<usize>,
    /// Fock-space truncation.
    #[arg(long, global = true, value_name = "INT")]
    nmax: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => DataFormat::Csv,
            Format::Json => DataFormat::Json,
        }
    }
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate a click-count dataset from the `[simulate]` section.
    Simulate,
    /// Calibrate every (mode, polarization) response curve of a dataset.
    Calibrate,
    /// Calibrate a polarization sweep and fit η(φ) per mode.
    Polarization,
    /// Tabulate the POVM diagonal from the `[povm]` section.
    Povm,
    /// Recover transmittance moments of a fluctuating channel.
    SenseAtmosphere,
    /// Evaluate the click quasiprobability on a phase-space grid.
    PhaseScan,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Calibrate => "calibrate",
            Command::Polarization => "polarization",
            Command::Povm => "povm",
            Command::SenseAtmosphere => "sense-atmosphere",
            Command::PhaseScan => "phase-scan",
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if let Some(i) = &c.input {
        cfg.input = Some(i.clone());
    }
    if let Some(o) = &c.output {
        cfg.output = o.clone();
    }
    if let Some(l) = c.order {
        cfg.calibration.order = l;
    }
    if let Some(n) = c.nmax {
        cfg.n_max = n;
    }
    cfg.validate()?;
    cfg.check_files()?;
    Ok(cfg)
}

fn load_input(cfg: &RunConfig, format: Option<Format>) -> Result<Dataset> {
    let Some(path) = &cfg.input else {
        bail!("no dataset given; pass --input or set `input` in the config");
    };
    let fmt = format.map_or_else(|| DataFormat::from_path(path), DataFormat::from);
    Dataset::load(path, fmt).with_context(|| format!("reading dataset {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = load_config(c)?;
    let exec = if c.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let fmt: DataFormat = c.format.map_or(DataFormat::Csv, DataFormat::from);
    let out = cfg.output.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut report = Report::new(cli.command.name(), cfg.hash());

    match cli.command {
        Command::Simulate => {
            let seed = cfg.require_seed()?;
            report = report.with_seed("simulate", seed);
            let data = pipeline::simulate_dataset(&cfg.simulate, cfg.calibration.chi, seed, exec)?;
            let name = format!("dataset.{}", fmt.extension());
            data.save(&out.join(&name), fmt)?;
            report.artifacts.push(name);
        }
        Command::Calibrate => {
            let data = load_input(&cfg, c.format)?;
            report.calibration = pipeline::run_calibration(&data, &cfg, exec)?;
        }
        Command::Polarization => {
            let data = load_input(&cfg, c.format)?;
            let (curves, fits) = pipeline::run_polarization_sweep(&data, &cfg, exec)?;
            report.calibration = curves;
            report.polarization = fits;
        }
        Command::Povm => {
            let (povm, summary) = pipeline::run_povm(&cfg.povm, cfg.n_max)?;
            let name = format!("povm.{}", fmt.extension());
            match fmt {
                DataFormat::Csv => povm.write_csv(BufWriter::new(fs::File::create(out.join(&name))?))?,
                DataFormat::Json => {
                    let rows: Vec<&[f64]> = (0..=povm.bins).map(|k| povm.row(k)).collect();
                    write_json(
                        &out.join(&name),
                        &serde_json::json!({ "summary": &summary, "rows": rows }),
                    )?;
                }
            }
            report.povm = Some(summary);
            report.artifacts.push(name);
        }
        Command::SenseAtmosphere => {
            if cfg.atmosphere.events > 0 {
                report = report.with_seed("atmosphere", cfg.require_seed()?);
            }
            let a = pipeline::run_atmosphere(&cfg.atmosphere, cfg.seed, exec)?;
            let name = format!("atmosphere.{}", fmt.extension());
            match fmt {
                DataFormat::Csv => {
                    let mut w = csv::Writer::from_path(out.join(&name))?;
                    w.write_record(["alpha_sq", "moment", "sigma"])?;
                    for p in &a.points {
                        w.write_record([p.alpha_sq.to_string(), p.moment.to_string(), p.sigma.to_string()])?;
                    }
                    w.flush()?;
                }
                DataFormat::Json => write_json(&out.join(&name), &a.points)?,
            }
            report.atmosphere = Some(a);
            report.artifacts.push(name);
        }
        Command::PhaseScan => {
            let (points, summary) = pipeline::run_phase_scan(&cfg.phase_scan, cfg.n_max, exec)?;
            let name = format!("scan.{}", fmt.extension());
            match fmt {
                DataFormat::Csv => write_scan_csv(&points, BufWriter::new(fs::File::create(out.join(&name))?))?,
                DataFormat::Json => write_json(&out.join(&name), &points)?,
            }
            report.scan = Some(summary);
            report.artifacts.push(name);
        }
    }

    emit_report(&report, &out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
