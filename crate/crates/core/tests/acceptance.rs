//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use pairsat_core::analysis::oracle::fit_oracle;
use pairsat_core::analysis::{analyze_scan, fit_sinusoid, mean_and_spread, model};
use pairsat_core::controller::{
    run_scan, CompletedScan, ControllerState, DetectorPair, OpticalBench, ScanConfig, ScanDevices,
};
use pairsat_core::lc_optics::{LcCalibration, DEFAULT_EXTINCTION_RATIO};
use pairsat_core::physics::{accidental_rate, overlap_factor, SourceParams, COINCIDENCE_WINDOW_S};
use pairsat_core::scenarios::{
    balloon_profile, run_simulation, Scenario, SimSummary, BALLOON_PREFIX_S, BURST_ACCEL_G,
    LANDING_ACCEL_G,
};
use pairsat_core::telemetry::{
    session_volume, FlashImage, LinkBudget, TelemetryRecord, MAX_COINC, MAX_STEP, RECORD_RATE_HZ,
};
use pairsat_core::thermal_power::{ActiveModules, Milliwatts, PowerLedger, POWER_BUDGET};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runs {
    lab: (FlashImage, SimSummary),
    lab_again: FlashImage,
    leo: SimSummary,
    thermal_vac: SimSummary,
    balloon: SimSummary,
    balloon_flash: FlashImage,
    balloon_again: FlashImage,
}

fn simulate_all() -> Result<Runs, String> {
    let scenarios = vec![
        Scenario::lab(480.0),
        Scenario::lab(480.0),
        Scenario::leo_cycle(6000.0),
        Scenario::thermal_vac(12_000.0),
        Scenario::balloon(),
        Scenario::balloon(),
    ];
    let mut results = scenarios
        .par_iter()
        .map(|s| run_simulation(s, 1).map_err(|e| format!("{} run failed: {e}", s.name())))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter();
    let mut next = || results.next().expect("six runs");
    let lab = next();
    let lab_again = next().0;
    let leo = next().1;
    let thermal_vac = next().1;
    let (balloon_flash, balloon) = next();
    let balloon_again = next().0;
    Ok(Runs {
        lab,
        lab_again,
        leo,
        thermal_vac,
        balloon,
        balloon_flash,
        balloon_again,
    })
}

fn c1_accidentals() -> Outcome {
    let acc = accidental_rate(360_000.0, 330_000.0, 9e-9);
    // 360000 * 330000 * 9 = 1_069_200_000_000, scaled by 1e-9.
    let exact = 1_069_200_000_000_f64 * 1e-9;
    let corrected = 4500.0 - acc;
    let rel = (corrected - 3600.0).abs() / 3600.0;
    check(
        (acc - exact).abs() < 1e-9
            && (acc - 1069.2).abs() < 1e-9
            && (corrected - 3430.8).abs() < 1e-9
            && rel < 0.10,
        format!(
            "accidentals {acc:.4}/s, corrected {corrected:.4}/s, {:.1} % from 3600",
            rel * 100.0
        ),
    )
}

fn lab_bench(v: f64) -> OpticalBench {
    OpticalBench::new(
        SourceParams::default().with_visibility(v),
        LcCalibration::default(),
        DEFAULT_EXTINCTION_RATIO,
        COINCIDENCE_WINDOW_S,
    )
    .expect("valid bench")
}

fn c2_visibility_recovery() -> (Outcome, Vec<CompletedScan>) {
    let start = Instant::now();
    let config = ScanConfig::default();
    let mut scans = Vec::new();
    let mut vis = Vec::new();
    for seed in 0..100u64 {
        let pair = if seed % 2 == 0 {
            DetectorPair::OneFour
        } else {
            DetectorPair::TwoThree
        };
        let mut devices = ScanDevices::lab(lab_bench(0.95), pair);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = match run_scan(&config, &mut devices, &mut rng) {
            Ok(r) => r,
            Err(e) => return (Err(format!("seed {seed}: {e}")), scans),
        };
        let scan = CompletedScan {
            scan_id: seed as u16,
            pair,
            records,
        };
        match analyze_scan(&scan.to_scan_data(), COINCIDENCE_WINDOW_S) {
            Ok(a) => vis.push(a.fit.visibility),
            Err(e) => return (Err(format!("seed {seed}: {e}")), scans),
        }
        scans.push(scan);
    }
    let (mean, std) = mean_and_spread(&vis);
    let secs = start.elapsed().as_secs_f64();
    (
        check(
            (0.94..=0.96).contains(&mean) && std <= 0.015 && secs < 10.0,
            format!("mean {mean:.4}, std {std:.4} over 100 scans in {secs:.2} s"),
        ),
        scans,
    )
}

fn c3_scan_timing(runs: &Runs, bench_scans: &[CompletedScan]) -> Outcome {
    let mut n = 0;
    let mut longest = 0;
    let sims = [&runs.lab.1, &runs.leo, &runs.thermal_vac, &runs.balloon];
    let all = bench_scans
        .iter()
        .chain(sims.iter().flat_map(|s| s.scans.iter().map(|o| &o.scan)));
    for scan in all {
        n += 1;
        let span = scan.end_ms() - scan.start_ms();
        longest = longest.max(span);
        if span >= 30_000 {
            return Err(format!("scan {} spans {span} ms", scan.scan_id));
        }
        for r in &scan.records {
            if r.dwell_start_ms - r.settle_start_ms != 300 {
                return Err(format!(
                    "scan {} step {}: settle {} ms",
                    scan.scan_id,
                    r.step,
                    r.dwell_start_ms - r.settle_start_ms
                ));
            }
        }
    }
    check(
        n > 0,
        format!(
            "{n} scans, longest {:.2} s, every settle 0.300 s",
            longest as f64 / 1000.0
        ),
    )
}

fn c4_energy() -> Outcome {
    let src = SourceParams::default();
    let m = (1.0 / src.pump_wavelength_nm
        - 1.0 / src.signal_wavelength_nm
        - 1.0 / src.idler_wavelength_nm)
        .abs()
        * src.pump_wavelength_nm;
    check(
        m < 1e-3 && src.energy_mismatch() < 1e-3,
        format!("mismatch {m:.2e}"),
    )
}

fn c5_overlap() -> Outcome {
    let f = overlap_factor(0.5, 0.8);
    check(f == 0.390625, format!("overlap {f}"))
}

fn c6_power(runs: &Runs) -> Outcome {
    let ledger = PowerLedger::default();
    let operating = ledger.total_power(ActiveModules::OPERATING, Milliwatts(0));
    let idle = ledger.total_power(ActiveModules::IDLE, Milliwatts(1700));
    let sims = [&runs.lab.1, &runs.leo, &runs.thermal_vac, &runs.balloon];
    let peak = sims
        .iter()
        .map(|s| s.max_power)
        .max()
        .unwrap_or(Milliwatts(0));
    check(
        operating == Ok(Milliwatts(1300)) && idle == Ok(Milliwatts(2000)) && peak <= POWER_BUDGET,
        format!("operating {operating:?}, idle+heater {idle:?}, peak over all runs {peak}"),
    )
}

fn c7_gating(leo: &SimSummary) -> Outcome {
    let bad: Vec<_> = leo
        .laser_activations
        .iter()
        .filter(|(_, t)| !(20.0..=30.0).contains(t))
        .collect();
    let first_scan = leo.scans.first().map(|s| s.scan.start_ms());
    let first_heat = leo
        .state_changes
        .iter()
        .find(|c| c.state == ControllerState::Heating)
        .map(|c| c.time_ms);
    let heated_first = matches!((first_heat, first_scan), (Some(h), Some(s)) if h < s);
    check(
        bad.is_empty() && heated_first && !leo.laser_activations.is_empty(),
        format!(
            "{} activations, all inside [20, 30] C: {}; heating at {:?} ms before first scan at {:?} ms",
            leo.laser_activations.len(),
            bad.is_empty(),
            first_heat,
            first_scan
        ),
    )
}

fn c8_alternation(balloon: &SimSummary) -> Outcome {
    let pairs: Vec<DetectorPair> = balloon.scans.iter().map(|s| s.scan.pair).collect();
    let violations = pairs.windows(2).filter(|w| w[0] == w[1]).count();
    check(
        pairs.len() >= 2 && violations == 0,
        format!("{} scans, {violations} repeats", pairs.len()),
    )
}

fn c9_storage(runs: &Runs) -> Outcome {
    let (flash, _) = &runs.lab;
    let bytes = flash.bytes_written();
    let volume = session_volume(480.0, RECORD_RATE_HZ);
    let t = LinkBudget::uhf(131_072).downlink_time();
    let identical = flash.sector_a() == flash.sector_b();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut lossless = 0;
    for _ in 0..100_000 {
        let r = TelemetryRecord {
            time_ms: rng.random(),
            scan_id: rng.random(),
            step: rng.random_range(0..=MAX_STEP),
            pair_sel: rng.random_range(0..=1),
            lc_signal_mv: rng.random(),
            lc_idler_mv: rng.random(),
            singles_1: rng.random(),
            singles_2: rng.random(),
            coinc_raw: rng.random_range(0..=MAX_COINC),
            temp_centi_c: rng.random(),
            laser_power_10uw: rng.random(),
            bias_1_decivolt: rng.random(),
            bias_2_decivolt: rng.random(),
            flags: rng.random(),
        };
        if r.encode()
            .ok()
            .and_then(|b| TelemetryRecord::decode(&b).ok())
            == Some(r)
        {
            lossless += 1;
        }
    }
    check(
        (120_000..=131_000).contains(&bytes)
            && bytes == volume
            && (t - 104.9).abs() < 0.05
            && identical
            && lossless == 100_000,
        format!(
            "480 s -> {bytes} B, 131072 B downlink {t:.1} s, sectors identical: {identical}, {lossless} round trips"
        ),
    )
}

fn c10_flight(balloon: &SimSummary) -> Outcome {
    let profile = balloon_profile();
    let peak = profile.peak_altitude();
    let accels: Vec<f64> = profile.samples().iter().map(|s| s.accel_g).collect();
    let burst = accels.contains(&BURST_ACCEL_G);
    let landing = profile.peak_accel() == LANDING_ACCEL_G;
    let (lo, hi) = balloon.environment_temp_range;
    let landing_ms = profile
        .samples()
        .iter()
        .find(|s| s.accel_g == LANDING_ACCEL_G)
        .map_or(u64::MAX, |s| (s.t_s * 1000.0) as u64);
    let (mean, std, n) = balloon.visibility_between((BALLOON_PREFIX_S * 1000.0) as u64, landing_ms);
    check(
        peak == 35_500.0
            && burst
            && landing
            && lo >= 0.0
            && hi <= 15.0
            && (0.90..=0.95).contains(&mean),
        format!(
            "peak {peak} m, accel 20/23 g present: {burst}/{landing}, internal {lo:.2}..{hi:.2} C, \
             in-flight visibility {mean:.4} +/- {std:.4} over {n} scans"
        ),
    )
}

fn c11_fit_vs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let angles: Vec<f64> = (0..12).map(|i| TAU * i as f64 / 12.0).collect();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_recovery: f64 = 0.0;
    for k in 0..20 {
        let a = rng.random_range(500.0..5000.0);
        let v = rng.random_range(0.3..0.99);
        let phi = rng.random_range(0.0..TAU);
        let clean: Vec<f64> = angles.iter().map(|&t| model(a, v, phi, 0.0, t)).collect();

        let exact = fit_sinusoid(&angles, &clean).map_err(|e| format!("scan {k}: {e}"))?;
        let dphi = (exact.phase_rad - phi + TAU / 2.0).rem_euclid(TAU) - TAU / 2.0;
        worst_recovery = worst_recovery
            .max((exact.visibility - v).abs())
            .max(dphi.abs());

        let noise = Normal::new(0.0, 0.03 * a).expect("finite sigma");
        let noisy: Vec<f64> = clean.iter().map(|y| y + noise.sample(&mut rng)).collect();
        let fit = fit_sinusoid(&angles, &noisy).map_err(|e| format!("scan {k}: {e}"))?;
        let grid = fit_oracle(&angles, &noisy, 0.0).map_err(|e| format!("scan {k}: {e}"))?;
        worst_excess = worst_excess.max((fit.sse - grid.sse) / grid.sse.max(f64::MIN_POSITIVE));
    }
    check(
        worst_excess <= 1e-6 && worst_recovery < 1e-6,
        format!("worst relative SSE excess over grid {worst_excess:.3e}, worst noiseless error {worst_recovery:.1e}"),
    )
}

fn c12_determinism(runs: &Runs) -> Outcome {
    let lab = runs.lab.0.to_bytes() == runs.lab_again.to_bytes();
    let balloon = runs.balloon_flash.to_bytes() == runs.balloon_again.to_bytes();
    check(
        lab && balloon,
        format!("lab identical: {lab}, balloon identical: {balloon}"),
    )
}

fn main() -> ExitCode {
    let runs = match simulate_all() {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL  scenario runs: {e}");
            return ExitCode::FAILURE;
        }
    };
    let (c2, bench_scans) = c2_visibility_recovery();
    let results: Vec<(&str, Outcome)> = vec![
        ("accidental arithmetic", c1_accidentals()),
        ("visibility recovery", c2),
        ("scan timing", c3_scan_timing(&runs, &bench_scans)),
        ("energy conservation", c4_energy()),
        ("overlap", c5_overlap()),
        ("power ledger", c6_power(&runs)),
        ("controller gating", c7_gating(&runs.leo)),
        ("pair alternation", c8_alternation(&runs.balloon)),
        ("storage and downlink", c9_storage(&runs)),
        ("flight profile fidelity", c10_flight(&runs.balloon)),
        ("fit vs oracle", c11_fit_vs_oracle()),
        ("determinism", c12_determinism(&runs)),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
