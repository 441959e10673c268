use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pairsat_core::analysis::analyze_scan;
use pairsat_core::analysis::{scans_from_records, write_scan_csv, write_summary_csv};
use pairsat_core::controller::ControllerState;
use pairsat_core::lc_optics::LcCalibration;
use pairsat_core::physics::COINCIDENCE_WINDOW_S;
use pairsat_core::scenarios::{load_profile_csv, run_simulation, write_scan_summary_csv, Scenario};
use pairsat_core::telemetry::{FlashImage, LinkBudget};
use pairsat_core::thermal_power::{PowerLedger, POWER_BUDGET};

#[derive(Parser)]
#[command(name = "pairsat", version, about = "Photon-pair payload simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Lab,
    Leo,
    Thermalvac,
    Balloon,
    Custom,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the flash image and per-scan summary.
    Simulate {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Environment CSV (t_s,temp_c,pressure_mbar,altitude_m,accel_g); required for custom.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Simulated seconds; defaults to the natural length of the scenario.
        #[arg(long)]
        duration: Option<f64>,
        /// Override the source visibility.
        #[arg(long)]
        visibility: Option<f64>,
        #[arg(long)]
        flash_out: PathBuf,
        #[arg(long)]
        summary_out: PathBuf,
    },
    /// Rebuild scans from a flash image and fit them.
    Analyze {
        #[arg(long)]
        flash: PathBuf,
        /// Output directory for summary.csv and one scan_<id>.csv per scan.
        #[arg(long)]
        out: PathBuf,
        /// Dwell per step in seconds.
        #[arg(long, default_value_t = 0.45)]
        dwell: f64,
        /// Rotator calibration CSV (voltage,angle_rad).
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Downlink time for a telemetry volume.
    Linkbudget {
        #[arg(long)]
        volume: u64,
        /// Usable ground-station pass length in seconds.
        #[arg(long, default_value_t = 600.0)]
        pass: f64,
    },
    /// Print the power ledger and worst-case totals per controller state.
    Powerbudget,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            profile,
            seed,
            duration,
            visibility,
            flash_out,
            summary_out,
        } => simulate(
            scenario,
            profile,
            seed,
            duration,
            visibility,
            flash_out,
            summary_out,
        ),
        Command::Analyze {
            flash,
            out,
            dwell,
            calibration,
        } => analyze(flash, out, dwell, calibration),
        Command::Linkbudget { volume, pass } => {
            let budget = LinkBudget::uhf(volume);
            let t = budget.downlink_time();
            println!(
                "{volume} B at {:.2} kB/s: {t:.1} s (pass {pass:.0} s)",
                budget.rate_bytes_per_s / 1000.0
            );
            if t > pass {
                bail!("downlink needs {t:.1} s, longer than one {pass:.0} s pass");
            }
            println!("single pass: yes");
            Ok(())
        }
        Command::Powerbudget => powerbudget(),
    }
}

fn simulate(
    kind: ScenarioArg,
    profile: Option<PathBuf>,
    seed: u64,
    duration: Option<f64>,
    visibility: Option<f64>,
    flash_out: PathBuf,
    summary_out: PathBuf,
) -> Result<()> {
    let mut scenario = match kind {
        ScenarioArg::Lab => Scenario::lab(duration.unwrap_or(480.0)),
        ScenarioArg::Leo => Scenario::leo_cycle(duration.unwrap_or(6000.0)),
        ScenarioArg::Thermalvac => Scenario::thermal_vac(duration.unwrap_or(86_400.0)),
        ScenarioArg::Balloon => {
            let mut s = Scenario::balloon();
            if let Some(d) = duration {
                s.duration_s = d;
            }
            s
        }
        ScenarioArg::Custom => {
            let path = profile
                .as_ref()
                .context("--profile is required for the custom scenario")?;
            let p =
                load_profile_csv(path).with_context(|| format!("reading {}", path.display()))?;
            let d = duration.unwrap_or(p.end_s() - p.start_s());
            Scenario::custom(p, d)
        }
    };
    if profile.is_some() && !matches!(kind, ScenarioArg::Custom) {
        bail!("--profile only applies to the custom scenario");
    }
    if let Some(v) = visibility {
        scenario.true_visibility = v;
    }
    let (flash, summary) = run_simulation(&scenario, seed)?;
    flash
        .save(&flash_out)
        .with_context(|| format!("writing {}", flash_out.display()))?;
    let file = File::create(&summary_out)
        .with_context(|| format!("creating {}", summary_out.display()))?;
    write_scan_summary_csv(BufWriter::new(file), &summary)?;

    let (mean, spread, n) = summary.visibility_between(0, u64::MAX);
    println!(
        "scenario {} seed {seed}: {:.0} s simulated",
        summary.scenario,
        summary.duration_ms as f64 / 1000.0
    );
    println!(
        "completed scans: {} (discarded {})",
        summary.scans.len(),
        summary.discarded_scans
    );
    if n > 0 {
        println!("visibility: mean {mean:.4}, std {spread:.4} over {n} scans");
    }
    println!(
        "housing {:.1}..{:.1} C, environment {:.1}..{:.1} C, peak power {}",
        summary.housing_temp_range.0,
        summary.housing_temp_range.1,
        summary.environment_temp_range.0,
        summary.environment_temp_range.1,
        summary.max_power
    );
    println!("telemetry records: {}", summary.records_written);
    Ok(())
}

fn analyze(flash: PathBuf, out: PathBuf, dwell: f64, calibration: Option<PathBuf>) -> Result<()> {
    if !dwell.is_finite() || dwell <= 0.0 {
        bail!("--dwell must be positive");
    }
    let image = FlashImage::load(&flash).with_context(|| format!("reading {}", flash.display()))?;
    let cal = match calibration {
        Some(p) => {
            LcCalibration::from_csv_path(&p).with_context(|| format!("reading {}", p.display()))?
        }
        None => LcCalibration::default(),
    };
    let (records, report) = image.read_records();
    if report.lost > 0 {
        eprintln!(
            "warning: {} records unreadable in both sectors",
            report.lost
        );
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut rows = Vec::new();
    for scan in scans_from_records(&records, &cal, dwell) {
        let analysis = match analyze_scan(&scan.data, COINCIDENCE_WINDOW_S) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("scan {}: {e}", scan.scan_id);
                continue;
            }
        };
        let path = out.join(format!("scan_{:04}.csv", scan.scan_id));
        write_scan_csv(BufWriter::new(File::create(&path)?), &scan, &analysis)?;
        rows.push((scan.scan_id, scan.pair, analysis.fit));
    }
    write_summary_csv(
        BufWriter::new(File::create(out.join("summary.csv"))?),
        &rows,
    )?;

    let vis: Vec<f64> = rows.iter().map(|r| r.2.visibility).collect();
    let (mean, spread) = pairsat_core::analysis::mean_and_spread(&vis);
    println!(
        "records: {} ({} repaired from sector B)",
        records.len(),
        report.recovered_from_b
    );
    println!("scans analyzed: {}", rows.len());
    if !rows.is_empty() {
        println!("visibility: mean {mean:.4}, std {spread:.4}");
    }
    Ok(())
}

fn powerbudget() -> Result<()> {
    let ledger = PowerLedger::default();
    println!("module                  draw");
    println!("apds                    {}", ledger.apds);
    println!("laser driver            {}", ledger.laser_driver);
    println!("controller and memory   {}", ledger.controller_and_memory);
    println!("liquid crystal          {}", ledger.liquid_crystal);
    println!();
    println!("state               modules   heater cap  worst case");
    for state in ControllerState::all() {
        let active = state.active_modules();
        let worst = ledger.worst_case(active);
        println!(
            "{:<18}  {:>8}  {:>10}  {:>10}",
            state.name(),
            ledger.draw(active).to_string(),
            active.heater_mode().cap().to_string(),
            worst.to_string()
        );
        ledger.total_power(active, active.heater_mode().cap())?;
    }
    println!("budget {POWER_BUDGET}: ok");
    Ok(())
}
