//! Tick loop coupling the controller to the device and environment models.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{EnvironmentProfile, Scenario};
use crate::analysis::{analyze_scan, mean_and_spread, FitResult};
use crate::controller::{
    CompletedScan, Controller, ControllerConfig, ControllerError, ControllerEvent, ControllerState,
    LaserModel, OpticalBench, Sensors,
};
use crate::lc_optics::{LcState, DEFAULT_EXTINCTION_RATIO};
use crate::physics::{
    avalanche_amplitude, sample_counts, CountSample, SourceParams, COINCIDENCE_WINDOW_S,
};
use crate::telemetry::{flags, FlashImage, TelemetryError, TelemetryRecord, RECORD_PERIOD_MS};
use crate::thermal_power::{
    step_thermal, Milliwatts, PowerError, PowerLedger, ThermalParams, ThermalState,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario duration must be positive, got {0} s")]
    Duration(f64),
    #[error("at t = {time_ms} ms: {source}")]
    Power { time_ms: u64, source: PowerError },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("summary output: {0}")]
    Output(String),
}

/// A completed scan and its fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub scan: CompletedScan,
    /// Absent when the fit rejected the data.
    pub fit: Option<FitResult>,
    pub housing_temp_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateChange {
    pub time_ms: u64,
    pub state: ControllerState,
    pub housing_temp_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub scenario: &'static str,
    pub seed: u64,
    pub duration_ms: u64,
    pub ticks: u64,
    pub scans: Vec<ScanOutcome>,
    pub discarded_scans: usize,
    pub state_changes: Vec<StateChange>,
    /// (time, housing temperature) at every laser switch-on.
    pub laser_activations: Vec<(u64, f64)>,
    pub apd_faults: Vec<usize>,
    pub max_power: Milliwatts,
    /// Boundary temperature seen by the housing.
    pub environment_temp_range: (f64, f64),
    pub housing_temp_range: (f64, f64),
    pub peak_altitude_m: f64,
    pub peak_accel_g: f64,
    pub records_written: u64,
}

impl SimSummary {
    pub fn visibilities(&self) -> Vec<f64> {
        self.scans
            .iter()
            .filter_map(|s| s.fit.map(|f| f.visibility))
            .collect()
    }

    /// Mean and spread of fitted visibility over scans that started in
    /// `[from_ms, to_ms)`.
    pub fn visibility_between(&self, from_ms: u64, to_ms: u64) -> (f64, f64, usize) {
        let v: Vec<f64> = self
            .scans
            .iter()
            .filter(|s| (from_ms..to_ms).contains(&s.scan.start_ms()))
            .filter_map(|s| s.fit.map(|f| f.visibility))
            .collect();
        let (mean, spread) = mean_and_spread(&v);
        (mean, spread, v.len())
    }

    /// Intervals during which the laser stayed on.
    pub fn laser_on_intervals(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut since = None;
        for c in &self.state_changes {
            match (c.state.laser_on(), since) {
                (true, None) => since = Some(c.time_ms),
                (false, Some(t0)) => {
                    out.push((t0, c.time_ms));
                    since = None;
                }
                _ => {}
            }
        }
        if let Some(t0) = since {
            out.push((t0, self.duration_ms));
        }
        out
    }
}

/// Counts and tags gathered for the telemetry record being built.
#[derive(Debug, Default)]
struct Slot {
    counts: CountSample,
    collecting: bool,
    scan_id: u16,
    step: u8,
}

fn to_u16(v: f64) -> u16 {
    v.round().clamp(0.0, f64::from(u16::MAX)) as u16
}

fn to_u32(v: u64) -> u32 {
    v.min(u64::from(u32::MAX)) as u32
}

pub fn run_simulation(
    scenario: &Scenario,
    seed: u64,
) -> Result<(FlashImage, SimSummary), SimError> {
    if !(scenario.duration_s > 0.0) || !scenario.duration_s.is_finite() {
        return Err(SimError::Duration(scenario.duration_s));
    }
    let profile: EnvironmentProfile = scenario.profile();
    let config = ControllerConfig::default();
    let tick_ms = config.tick_ms;
    let dt = tick_ms as f64 / 1000.0;
    let apds = config.apds;
    let calibration = config.calibration.clone();
    let setpoint = config.amplitude_setpoint;
    let mut controller = Controller::new(config)?;
    let source = SourceParams::default().with_visibility(scenario.true_visibility);
    let bench = OpticalBench::new(
        source,
        calibration.clone(),
        DEFAULT_EXTINCTION_RATIO,
        COINCIDENCE_WINDOW_S,
    )?;
    let laser = LaserModel {
        nominal_mw: bench.source.pump_power_mw,
        dips: scenario.laser_dips.clone(),
    };
    let ledger = PowerLedger::default();
    let thermal = ThermalParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flash = FlashImage::erased();

    let mut housing = ThermalState {
        housing_temp_c: scenario.initial_housing_c,
        heater_watts: 0.0,
    };
    let mut lc_signal = LcState::settled_at(0.0);
    let mut lc_idler = LcState::settled_at(0.0);
    let mut bias = controller.bias_v();
    let mut laser_was_on = false;
    let mut pending_counts: Option<CountSample> = None;
    let mut slot = Slot::default();
    let mut pending_commit: Option<u16> = None;
    let mut last_state: Option<ControllerState> = None;

    let duration_ms = (scenario.duration_s * 1000.0).round() as u64;
    let mut summary = SimSummary {
        scenario: scenario.name(),
        seed,
        duration_ms,
        ticks: 0,
        scans: Vec::new(),
        discarded_scans: 0,
        state_changes: Vec::new(),
        laser_activations: Vec::new(),
        apd_faults: Vec::new(),
        max_power: Milliwatts(0),
        environment_temp_range: (f64::INFINITY, f64::NEG_INFINITY),
        housing_temp_range: (f64::INFINITY, f64::NEG_INFINITY),
        peak_altitude_m: f64::NEG_INFINITY,
        peak_accel_g: 0.0,
        records_written: 0,
    };
    let widen = |r: &mut (f64, f64), v: f64| {
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    };

    let mut t_ms = 0u64;
    while t_ms < duration_ms {
        let env = profile.at(profile.start_s() + t_ms as f64 / 1000.0);
        let temp = housing.housing_temp_c;
        widen(&mut summary.environment_temp_range, env.temp_c);
        widen(&mut summary.housing_temp_range, temp);
        summary.peak_altitude_m = summary.peak_altitude_m.max(env.altitude_m);
        summary.peak_accel_g = summary.peak_accel_g.max(env.accel_g);

        let sensors = Sensors {
            time_ms: t_ms,
            housing_temp_c: temp,
            laser_power_mw: if laser_was_on {
                laser.power_mw(t_ms)
            } else {
                0.0
            },
            lc_signal_settled: lc_signal.is_settled(),
            lc_idler_settled: lc_idler.is_settled(),
            apd_amplitude: std::array::from_fn(|k| avalanche_amplitude(&apds[k], bias[k], temp)),
            counts: pending_counts.take(),
        };
        let cmd = controller.tick(&sensors);

        if last_state.map(|s| s.name()) != Some(cmd.state.name()) {
            summary.state_changes.push(StateChange {
                time_ms: t_ms,
                state: cmd.state,
                housing_temp_c: temp,
            });
            last_state = Some(cmd.state);
        }
        for event in &cmd.events {
            match *event {
                ControllerEvent::LaserActivated {
                    time_ms,
                    housing_temp_c,
                } => summary.laser_activations.push((time_ms, housing_temp_c)),
                ControllerEvent::ScanCompleted { scan_id, .. } => pending_commit = Some(scan_id),
                ControllerEvent::ScanDiscarded { .. } => summary.discarded_scans += 1,
                ControllerEvent::ApdFault { apd } => summary.apd_faults.push(apd),
                ControllerEvent::LaserDeactivated { .. } | ControllerEvent::ScanStarted { .. } => {}
            }
        }
        for scan in controller.take_completed() {
            let fit = analyze_scan(&scan.to_scan_data(), COINCIDENCE_WINDOW_S)
                .ok()
                .map(|a| a.fit);
            summary.scans.push(ScanOutcome {
                scan,
                fit,
                housing_temp_c: temp,
            });
        }

        let total = ledger
            .total_power(cmd.active, cmd.heater)
            .map_err(|source| SimError::Power {
                time_ms: t_ms,
                source,
            })?;
        summary.max_power = summary.max_power.max(total);

        lc_signal = lc_signal.command(cmd.lc_signal_v);
        lc_idler = lc_idler.command(cmd.lc_idler_v);
        bias = cmd.bias_v;

        if cmd.collect {
            let (s, i) = cmd.pair.apd_indices();
            let relative_eff = |k: usize| {
                let nominal = apds[k]
                    .efficiency_sat_curve
                    .efficiency(setpoint / apds[k].amplitude_gain_per_overvolt);
                apds[k].efficiency(bias[k], temp) / nominal
            };
            let rates = bench.rates(
                cmd.pair,
                cmd.lc_signal_v,
                cmd.lc_idler_v,
                laser.power_mw(t_ms),
                [relative_eff(s), relative_eff(i)],
                [apds[s].dark_rate_hz, apds[i].dark_rate_hz],
            );
            let counts = sample_counts(&rates, dt, &mut rng);
            slot.counts.accumulate(&counts);
            slot.collecting = true;
            slot.scan_id = cmd.scan_id;
            slot.step = cmd.step as u8;
            pending_counts = Some(counts);
        }
        laser_was_on = cmd.laser_on;

        housing.heater_watts = cmd.heater.watts();
        housing = step_thermal(
            &thermal,
            housing,
            ledger.draw(cmd.active).watts(),
            env.temp_c,
            dt,
        );
        lc_signal = lc_signal.step_settle(dt);
        lc_idler = lc_idler.step_settle(dt);

        let next = t_ms + tick_ms;
        let period = u64::from(RECORD_PERIOD_MS);
        if next / period > t_ms / period {
            let (s, i) = cmd.pair.apd_indices();
            let mut f = 0u8;
            let mut set = |flag: u8, on: bool| {
                if on {
                    f |= flag
                }
            };
            set(flags::LASER_ON, cmd.laser_on);
            set(flags::HEATER_ON, cmd.heater > Milliwatts(0));
            set(flags::COLLECTING, slot.collecting);
            set(
                flags::LC_SETTLED,
                lc_signal.is_settled() && lc_idler.is_settled(),
            );
            set(flags::SCAN_COMMIT, pending_commit.is_some());
            set(flags::FAULT, cmd.state == ControllerState::FaultHold);
            set(
                flags::APD_FAULT,
                controller.apd_faulted().iter().any(|&x| x),
            );
            let scan_id = pending_commit.take().unwrap_or(if slot.collecting {
                slot.scan_id
            } else {
                cmd.scan_id
            });
            let record = TelemetryRecord {
                time_ms: to_u32(next / period * period),
                scan_id,
                step: if slot.collecting {
                    slot.step
                } else {
                    cmd.step as u8
                },
                pair_sel: cmd.pair.sel(),
                lc_signal_mv: to_u16(cmd.lc_signal_v * 1000.0),
                lc_idler_mv: to_u16(cmd.lc_idler_v * 1000.0),
                singles_1: to_u32(slot.counts.singles_1),
                singles_2: to_u32(slot.counts.singles_2),
                coinc_raw: slot
                    .counts
                    .coincidences_raw
                    .min(u64::from(crate::telemetry::MAX_COINC)) as u32,
                temp_centi_c: (housing.housing_temp_c * 100.0)
                    .round()
                    .clamp(f64::from(i16::MIN), f64::from(i16::MAX))
                    as i16,
                laser_power_10uw: if cmd.laser_on {
                    to_u16(laser.power_mw(next) * 100.0)
                } else {
                    0
                },
                bias_1_decivolt: to_u16(bias[s] * 10.0),
                bias_2_decivolt: to_u16(bias[i] * 10.0),
                flags: f,
            };
            flash.write_redundant(&[record])?;
            slot = Slot::default();
        }
        summary.ticks += 1;
        t_ms = next;
    }
    summary.records_written = flash.records_written();
    Ok((flash, summary))
}

/// One line per completed scan.
pub fn write_scan_summary_csv<W: Write>(writer: W, summary: &SimSummary) -> Result<(), SimError> {
    let out = |e: csv::Error| SimError::Output(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scan_id",
        "pair",
        "start_s",
        "end_s",
        "housing_temp_c",
        "visibility",
        "visibility_stderr",
        "phase_rad",
        "converged",
    ])
    .map_err(out)?;
    for s in &summary.scans {
        let (vis, err, phase, conv) = match s.fit {
            Some(f) => (
                format!("{:.6}", f.visibility),
                format!("{:.6}", f.visibility_stderr),
                format!("{:.6}", f.phase_rad),
                f.converged.to_string(),
            ),
            None => (String::new(), String::new(), String::new(), "false".into()),
        };
        w.write_record([
            s.scan.scan_id.to_string(),
            s.scan.pair.to_string(),
            format!("{:.3}", s.scan.start_ms() as f64 / 1000.0),
            format!("{:.3}", s.scan.end_ms() as f64 / 1000.0),
            format!("{:.2}", s.housing_temp_c),
            vis,
            err,
            phase,
            conv,
        ])
        .map_err(out)?;
    }
    w.flush().map_err(|e| SimError::Output(e.to_string()))
}
