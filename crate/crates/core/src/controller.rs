//! Autonomous flight-control state machine.
//!
//! The controller is stepped at a fixed tick. Each tick it reads a
//! [`Sensors`] snapshot describing the device at the current simulated time
//! (including any counts integrated during the previous tick) and answers
//! with [`Commands`] that the device models apply over the next tick.
//!
//! Power-up sequence: check the housing temperature against the 20-30 °C
//! window, heat or wait until it is inside, switch the laser on, wait for
//! the pump power and detector bias loops to settle, then step the signal
//! rotator through a full turn while integrating counts. After a scan is
//! stored the detector pair alternates and the thermal gate is re-checked.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::lc_optics::{
    analyzer_transmission, visibility_ceiling, LcCalibration, LcError, LcState,
};
use crate::physics::{
    detected_rates, sample_counts, ApdParams, CountSample, DetectionConditions, PhysicsError,
    Rates, SourceParams,
};
use crate::thermal_power::{ActiveModules, Heater, Milliwatts};

pub const GATE_MIN_C: f64 = 20.0;
pub const GATE_MAX_C: f64 = 30.0;
pub const MAX_SCAN_S: f64 = 30.0;
pub const DEFAULT_TICK_MS: u64 = 50;
pub const DEFAULT_AMPLITUDE_SETPOINT: f64 = 1.0;
/// A bias loop pinned at a rail longer than this marks its detector unservable.
pub const RAIL_FAULT_S: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("scan of {n_steps} steps takes {total_s} s, limit is {MAX_SCAN_S} s")]
    ScanTooLong { n_steps: usize, total_s: f64 },
    #[error("scan needs at least one step")]
    NoSteps,
    #[error("tick of {tick_ms} ms does not divide settle/dwell times")]
    TickMismatch { tick_ms: u64 },
    #[error("true visibility {visibility} exceeds the analyzer ceiling {ceiling}")]
    VisibilityAboveCeiling { visibility: f64, ceiling: f64 },
    #[error("laser unstable during scan step {step}; partial scan discarded")]
    ScanFault { step: usize },
    #[error(transparent)]
    Lc(#[from] LcError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// The two redundant detector pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorPair {
    /// Idler on APD1, signal on APD4.
    OneFour,
    /// Idler on APD3, signal on APD2.
    TwoThree,
}

impl DetectorPair {
    pub fn other(self) -> Self {
        match self {
            DetectorPair::OneFour => DetectorPair::TwoThree,
            DetectorPair::TwoThree => DetectorPair::OneFour,
        }
    }

    pub fn sel(self) -> u8 {
        match self {
            DetectorPair::OneFour => 0,
            DetectorPair::TwoThree => 1,
        }
    }

    pub fn from_sel(sel: u8) -> Self {
        if sel == 0 {
            DetectorPair::OneFour
        } else {
            DetectorPair::TwoThree
        }
    }

    /// Zero-based indices of (signal, idler) detectors.
    pub fn apd_indices(self) -> (usize, usize) {
        match self {
            DetectorPair::OneFour => (3, 0),
            DetectorPair::TwoThree => (1, 2),
        }
    }

    /// Idler rotation that sends horizontal photons to this pair's idler APD.
    pub fn idler_target_rad(self) -> f64 {
        match self {
            DetectorPair::OneFour => 0.0,
            DetectorPair::TwoThree => FRAC_PI_2,
        }
    }

    /// Fringe phase added by detecting the signal on the reflected port.
    pub fn phase_shift_rad(self) -> f64 {
        match self {
            DetectorPair::OneFour => 0.0,
            DetectorPair::TwoThree => PI,
        }
    }
}

impl fmt::Display for DetectorPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorPair::OneFour => "1&4",
            DetectorPair::TwoThree => "2&3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Proceed,
    WaitCool,
    Heat,
}

pub fn thermal_gate(housing_temp_c: f64) -> GateDecision {
    if housing_temp_c > GATE_MAX_C {
        GateDecision::WaitCool
    } else if housing_temp_c < GATE_MIN_C {
        GateDecision::Heat
    } else {
        GateDecision::Proceed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("laser monitor window not yet filled")]
pub struct NotReady;

/// Sliding window of pump power samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserMonitor {
    samples: VecDeque<(f64, f64)>,
    pub stable_threshold_fraction: f64,
    pub window_s: f64,
}

impl Default for LaserMonitor {
    fn default() -> Self {
        Self::new(0.05, 10.0)
    }
}

impl LaserMonitor {
    pub fn new(stable_threshold_fraction: f64, window_s: f64) -> Self {
        Self {
            samples: VecDeque::new(),
            stable_threshold_fraction,
            window_s,
        }
    }

    /// Adds a sample; samples older than the window are dropped. Samples must
    /// arrive in time order.
    pub fn push(&mut self, t_s: f64, power_mw: f64) {
        debug_assert!(self.samples.back().is_none_or(|&(last, _)| t_s >= last));
        self.samples.push_back((t_s, power_mw));
        while let Some(&(t0, _)) = self.samples.front() {
            if t_s - t0 > self.window_s + 1e-9 {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn span_s(&self) -> f64 {
        match (self.samples.front(), self.samples.back()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0.0,
        }
    }

    /// True iff every sample lies within the threshold of the window median.
    pub fn laser_stable(&self) -> Result<bool, NotReady> {
        if self.span_s() + 1e-9 < self.window_s {
            return Err(NotReady);
        }
        let mut powers: Vec<f64> = self.samples.iter().map(|s| s.1).collect();
        powers.sort_by(f64::total_cmp);
        let n = powers.len();
        let median = if n % 2 == 1 {
            powers[n / 2]
        } else {
            0.5 * (powers[n / 2 - 1] + powers[n / 2])
        };
        if !(median > 0.0) {
            return Ok(false);
        }
        let worst = powers
            .iter()
            .map(|p| (p - median).abs())
            .fold(0.0, f64::max);
        Ok(worst / median <= self.stable_threshold_fraction)
    }
}

/// Constant-amplitude bias feedback for one APD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasLoop {
    pub kp: f64,
    pub ki: f64,
    integral_v: f64,
    rail_time_s: f64,
    faulted: bool,
}

impl Default for BiasLoop {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.1,
            integral_v: 0.0,
            rail_time_s: 0.0,
            faulted: false,
        }
    }
}

impl BiasLoop {
    /// Detector pinned at a rail for more than a minute.
    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    /// Next bias given the amplitude measured at `current_bias`.
    pub fn step(
        &mut self,
        params: &ApdParams,
        measured_amplitude: f64,
        setpoint: f64,
        current_bias: f64,
        dt_s: f64,
    ) -> f64 {
        // Amplitude shortfall expressed as overvoltage.
        let err_v = (setpoint - measured_amplitude) / params.amplitude_gain_per_overvolt;
        let integral = self.integral_v + err_v;
        let demanded = current_bias + self.kp * err_v + self.ki * integral;
        let bias = demanded.clamp(params.bias_min_v, params.bias_max_v);
        let railed = bias != demanded;
        if railed {
            // Back-calculate so the integrator sits exactly at the rail.
            self.integral_v = if self.ki > 0.0 {
                (bias - current_bias - self.kp * err_v) / self.ki
            } else {
                0.0
            };
            self.rail_time_s += dt_s;
        } else {
            self.integral_v = integral;
            self.rail_time_s = 0.0;
        }
        if self.rail_time_s > RAIL_FAULT_S {
            self.faulted = true;
        }
        bias
    }
}

/// Stateless single step with fresh loop state, for callers that hold no
/// integrator.
pub fn apd_bias_step(
    params: &ApdParams,
    measured_amplitude: f64,
    setpoint: f64,
    current_bias: f64,
) -> f64 {
    BiasLoop::default().step(params, measured_amplitude, setpoint, current_bias, 0.0)
}

pub fn amplitude_converged(measured: f64, setpoint: f64) -> bool {
    ((measured - setpoint) / setpoint).abs() < 0.01
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    pub n_steps: usize,
    pub dwell_s: f64,
    pub settle_s: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_steps: 36,
            dwell_s: 0.45,
            settle_s: crate::lc_optics::LC_SETTLE_S,
        }
    }
}

impl ScanConfig {
    pub fn duration_s(&self) -> f64 {
        self.n_steps as f64 * (self.settle_s + self.dwell_s)
    }

    pub fn validate(&self, tick_ms: u64) -> Result<(), ControllerError> {
        if self.n_steps == 0 {
            return Err(ControllerError::NoSteps);
        }
        if self.duration_s() >= MAX_SCAN_S {
            return Err(ControllerError::ScanTooLong {
                n_steps: self.n_steps,
                total_s: self.duration_s(),
            });
        }
        let divides = |s: f64| {
            let ms = (s * 1000.0).round() as u64;
            tick_ms > 0
                && ms > 0
                && ms.is_multiple_of(tick_ms)
                && ((s * 1000.0) - ms as f64).abs() < 1e-6
        };
        if !(divides(self.settle_s) && divides(self.dwell_s)) {
            return Err(ControllerError::TickMismatch { tick_ms });
        }
        Ok(())
    }

    pub fn settle_ms(&self) -> u64 {
        (self.settle_s * 1000.0).round() as u64
    }

    pub fn dwell_ms(&self) -> u64 {
        (self.dwell_s * 1000.0).round() as u64
    }

    /// Signal voltages stepped linearly from V_min across the calibrated
    /// range, quantized to the 1 mV DAC resolution.
    pub fn step_voltages(&self, cal: &LcCalibration) -> Vec<f64> {
        let span = cal.v_max() - cal.v_min();
        (0..self.n_steps)
            .map(|i| quantize_mv(cal.v_min() + span * i as f64 / self.n_steps as f64))
            .collect()
    }
}

pub fn quantize_mv(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Idler voltage for the pair, quantized like the signal steps.
pub fn idler_voltage(cal: &LcCalibration, pair: DetectorPair) -> Result<f64, LcError> {
    Ok(quantize_mv(cal.voltage_for_angle(pair.idler_target_rad())?))
}

/// Source, rotators and coincidence electronics as one rate model.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalBench {
    pub source: SourceParams,
    pub calibration: LcCalibration,
    pub extinction_ratio: f64,
    pub window_s: f64,
}

impl OpticalBench {
    pub fn new(
        source: SourceParams,
        calibration: LcCalibration,
        extinction_ratio: f64,
        window_s: f64,
    ) -> Result<Self, ControllerError> {
        source.validate()?;
        let ceiling = visibility_ceiling(extinction_ratio);
        if source.true_visibility > ceiling {
            return Err(ControllerError::VisibilityAboveCeiling {
                visibility: source.true_visibility,
                ceiling,
            });
        }
        Ok(Self {
            source,
            calibration,
            extinction_ratio,
            window_s,
        })
    }

    /// Expected rates with the rotators at the given (in-range) voltages.
    pub fn rates(
        &self,
        pair: DetectorPair,
        v_signal: f64,
        v_idler: f64,
        pump_mw: f64,
        efficiency: [f64; 2],
        dark_hz: [f64; 2],
    ) -> Rates {
        let signal_angle = self.calibration.angle_from_voltage(v_signal).unwrap_or(0.0);
        let idler_angle = self.calibration.angle_from_voltage(v_idler).unwrap_or(0.0);
        let idler_pass =
            analyzer_transmission(idler_angle - pair.idler_target_rad(), self.extinction_ratio);
        detected_rates(
            &self.source,
            &DetectionConditions {
                pump_power_mw: pump_mw,
                analyzer_angle_rad: signal_angle,
                pair_phase_rad: pair.phase_shift_rad(),
                window_s: self.window_s,
                signal_efficiency: efficiency[0],
                idler_efficiency: efficiency[1] * idler_pass,
                signal_dark_hz: dark_hz[0],
                idler_dark_hz: dark_hz[1],
            },
        )
    }
}

/// Counts recorded for one LC step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRecord {
    pub scan_id: u16,
    pub step: usize,
    pub pair: DetectorPair,
    pub signal_voltage_v: f64,
    pub idler_voltage_v: f64,
    pub analyzer_angle_rad: f64,
    pub settle_start_ms: u64,
    pub dwell_start_ms: u64,
    pub dwell_end_ms: u64,
    pub counts: CountSample,
}

/// A scan that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedScan {
    pub scan_id: u16,
    pub pair: DetectorPair,
    pub records: Vec<ScanRecord>,
}

impl CompletedScan {
    pub fn start_ms(&self) -> u64 {
        self.records.first().map_or(0, |r| r.settle_start_ms)
    }

    pub fn end_ms(&self) -> u64 {
        self.records.last().map_or(0, |r| r.dwell_end_ms)
    }

    pub fn to_scan_data(&self) -> crate::analysis::ScanData {
        crate::analysis::ScanData {
            points: self
                .records
                .iter()
                .map(|r| crate::analysis::ScanPoint {
                    analyzer_angle_rad: r.analyzer_angle_rad,
                    dwell_s: r.counts.dwell_s,
                    singles_1: r.counts.singles_1,
                    singles_2: r.counts.singles_2,
                    coinc_raw: r.counts.coincidences_raw,
                })
                .collect(),
        }
    }
}

/// Progress within one LC step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Settling { since_ms: u64 },
    Dwelling { remaining_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerState {
    Init,
    ThermalWaitCool,
    Heating,
    LaserStabilizing,
    Scanning {
        step_index: usize,
        pair: DetectorPair,
    },
    Storing,
    FaultHold,
}

impl ControllerState {
    pub fn laser_on(&self) -> bool {
        matches!(
            self,
            ControllerState::LaserStabilizing
                | ControllerState::Scanning { .. }
                | ControllerState::Storing
        )
    }

    pub fn active_modules(&self) -> ActiveModules {
        if self.laser_on() {
            ActiveModules::OPERATING
        } else {
            ActiveModules::IDLE
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControllerState::Init => "Init",
            ControllerState::ThermalWaitCool => "ThermalWaitCool",
            ControllerState::Heating => "Heating",
            ControllerState::LaserStabilizing => "LaserStabilizing",
            ControllerState::Scanning { .. } => "Scanning",
            ControllerState::Storing => "Storing",
            ControllerState::FaultHold => "FaultHold",
        }
    }

    /// One representative of every state, for budget tables.
    pub fn all() -> [ControllerState; 7] {
        [
            ControllerState::Init,
            ControllerState::ThermalWaitCool,
            ControllerState::Heating,
            ControllerState::LaserStabilizing,
            ControllerState::Scanning {
                step_index: 0,
                pair: DetectorPair::OneFour,
            },
            ControllerState::Storing,
            ControllerState::FaultHold,
        ]
    }
}

/// Device readings at the start of a tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensors {
    pub time_ms: u64,
    pub housing_temp_c: f64,
    pub laser_power_mw: f64,
    pub lc_signal_settled: bool,
    pub lc_idler_settled: bool,
    pub apd_amplitude: [f64; 4],
    /// Counts integrated over the previous tick, present when the previous
    /// commands asked for collection.
    pub counts: Option<CountSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerEvent {
    LaserActivated { time_ms: u64, housing_temp_c: f64 },
    LaserDeactivated { time_ms: u64 },
    ScanStarted { scan_id: u16, pair: DetectorPair },
    ScanCompleted { scan_id: u16, pair: DetectorPair },
    ScanDiscarded { scan_id: u16, step: usize },
    ApdFault { apd: usize },
}

/// Actuator settings for the next tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Commands {
    pub state: ControllerState,
    pub laser_on: bool,
    pub heater: Milliwatts,
    pub active: ActiveModules,
    pub lc_signal_v: f64,
    pub lc_idler_v: f64,
    pub bias_v: [f64; 4],
    pub pair: DetectorPair,
    /// Integrate counts during the next tick.
    pub collect: bool,
    pub scan_id: u16,
    pub step: usize,
    pub events: Vec<ControllerEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub scan: ScanConfig,
    pub tick_ms: u64,
    pub storing_ms: u64,
    pub fault_hold_ms: u64,
    pub amplitude_setpoint: f64,
    pub laser_threshold_fraction: f64,
    pub laser_window_s: f64,
    pub calibration: LcCalibration,
    pub apds: [ApdParams; 4],
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            scan: ScanConfig::default(),
            tick_ms: DEFAULT_TICK_MS,
            storing_ms: 250,
            fault_hold_ms: 10_000,
            amplitude_setpoint: DEFAULT_AMPLITUDE_SETPOINT,
            laser_threshold_fraction: 0.05,
            laser_window_s: 10.0,
            calibration: LcCalibration::default(),
            apds: default_apds(),
        }
    }
}

/// Four detectors with slightly different breakdown voltages.
pub fn default_apds() -> [ApdParams; 4] {
    let base = ApdParams::default();
    [105.0, 106.5, 104.0, 105.5].map(|v| ApdParams {
        breakdown_volts_at_25c: v,
        ..base
    })
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
    pair: DetectorPair,
    heater: Heater,
    monitor: LaserMonitor,
    bias_loops: [BiasLoop; 4],
    bias_v: [f64; 4],
    apd_faulted: [bool; 4],
    step_voltages: Vec<f64>,
    idler_v: f64,
    signal_v: f64,
    scan_id: u16,
    phase: StepPhase,
    step_counts: CountSample,
    scan_records: Vec<ScanRecord>,
    settle_start_ms: u64,
    dwell_start_ms: u64,
    timer_until_ms: u64,
    completed: Vec<CompletedScan>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.scan.validate(config.tick_ms)?;
        let step_voltages = config.scan.step_voltages(&config.calibration);
        let bias_v = config
            .apds
            .map(|p| p.bias_for_amplitude(config.amplitude_setpoint, 25.0));
        let signal_v = step_voltages[0];
        Ok(Self {
            state: ControllerState::Init,
            pair: DetectorPair::OneFour,
            heater: Heater::default(),
            monitor: LaserMonitor::new(config.laser_threshold_fraction, config.laser_window_s),
            bias_loops: [BiasLoop::default(); 4],
            bias_v,
            apd_faulted: [false; 4],
            idler_v: idler_voltage(&config.calibration, DetectorPair::OneFour)?,
            signal_v,
            step_voltages,
            scan_id: 0,
            phase: StepPhase::Settling { since_ms: 0 },
            step_counts: CountSample::default(),
            scan_records: Vec::new(),
            settle_start_ms: 0,
            dwell_start_ms: 0,
            timer_until_ms: 0,
            completed: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> ControllerState {
        self.state
    }

    pub fn pair(&self) -> DetectorPair {
        self.pair
    }

    pub fn bias_v(&self) -> [f64; 4] {
        self.bias_v
    }

    pub fn apd_faulted(&self) -> [bool; 4] {
        self.apd_faulted
    }

    /// Drains scans completed since the last call.
    pub fn take_completed(&mut self) -> Vec<CompletedScan> {
        std::mem::take(&mut self.completed)
    }

    fn gate_transition(&mut self, sensors: &Sensors, events: &mut Vec<ControllerEvent>) {
        let was_on = self.state.laser_on();
        let next = match thermal_gate(sensors.housing_temp_c) {
            GateDecision::Proceed => ControllerState::LaserStabilizing,
            GateDecision::WaitCool => ControllerState::ThermalWaitCool,
            GateDecision::Heat => ControllerState::Heating,
        };
        if next.laser_on() && !was_on {
            events.push(ControllerEvent::LaserActivated {
                time_ms: sensors.time_ms,
                housing_temp_c: sensors.housing_temp_c,
            });
        }
        if !next.laser_on() && was_on {
            events.push(ControllerEvent::LaserDeactivated {
                time_ms: sensors.time_ms,
            });
            self.monitor.clear();
        }
        self.state = next;
    }

    fn enter_fault_hold(&mut self, sensors: &Sensors, events: &mut Vec<ControllerEvent>) {
        if self.state.laser_on() {
            events.push(ControllerEvent::LaserDeactivated {
                time_ms: sensors.time_ms,
            });
        }
        self.monitor.clear();
        self.scan_records.clear();
        self.state = ControllerState::FaultHold;
        self.timer_until_ms = sensors.time_ms + self.config.fault_hold_ms;
    }

    fn start_step(&mut self, step: usize, now_ms: u64) {
        self.signal_v = self.step_voltages[step];
        self.phase = StepPhase::Settling { since_ms: now_ms };
        self.settle_start_ms = now_ms;
        self.step_counts = CountSample::default();
        self.state = ControllerState::Scanning {
            step_index: step,
            pair: self.pair,
        };
    }

    fn active_pair_ready(&self, sensors: &Sensors) -> bool {
        let (s, i) = self.pair.apd_indices();
        [s, i]
            .iter()
            .all(|&k| amplitude_converged(sensors.apd_amplitude[k], self.config.amplitude_setpoint))
    }

    fn run_bias_loops(&mut self, sensors: &Sensors, events: &mut Vec<ControllerEvent>) {
        let (s, i) = self.pair.apd_indices();
        let dt = self.config.tick_ms as f64 / 1000.0;
        for k in [s, i] {
            let loop_ = &mut self.bias_loops[k];
            self.bias_v[k] = loop_.step(
                &self.config.apds[k],
                sensors.apd_amplitude[k],
                self.config.amplitude_setpoint,
                self.bias_v[k],
                dt,
            );
            if loop_.is_faulted() && !self.apd_faulted[k] {
                self.apd_faulted[k] = true;
                events.push(ControllerEvent::ApdFault { apd: k });
            }
        }
    }

    fn pair_servable(&self, pair: DetectorPair) -> bool {
        let (s, i) = pair.apd_indices();
        !self.apd_faulted[s] && !self.apd_faulted[i]
    }

    pub fn tick(&mut self, sensors: &Sensors) -> Commands {
        let mut events = Vec::new();
        let now = sensors.time_ms;
        let mut collect = false;

        if self.state.laser_on() {
            self.monitor
                .push(now as f64 / 1000.0, sensors.laser_power_mw);
            self.run_bias_loops(sensors, &mut events);
        }

        match self.state {
            ControllerState::Init | ControllerState::ThermalWaitCool | ControllerState::Heating => {
                self.gate_transition(sensors, &mut events);
            }
            ControllerState::LaserStabilizing => {
                if thermal_gate(sensors.housing_temp_c) != GateDecision::Proceed {
                    self.gate_transition(sensors, &mut events);
                } else if !self.pair_servable(self.pair) && self.pair_servable(self.pair.other()) {
                    self.pair = self.pair.other();
                } else if self.monitor.laser_stable() == Ok(true) && self.active_pair_ready(sensors)
                {
                    self.scan_id = self.scan_id.wrapping_add(1);
                    self.scan_records.clear();
                    events.push(ControllerEvent::ScanStarted {
                        scan_id: self.scan_id,
                        pair: self.pair,
                    });
                    self.start_step(0, now);
                }
            }
            ControllerState::Scanning { step_index, .. } => {
                if self.monitor.laser_stable() == Ok(false) {
                    events.push(ControllerEvent::ScanDiscarded {
                        scan_id: self.scan_id,
                        step: step_index,
                    });
                    self.enter_fault_hold(sensors, &mut events);
                } else {
                    collect = self.advance_scan(step_index, sensors, &mut events);
                }
            }
            ControllerState::Storing => {
                if now >= self.timer_until_ms {
                    self.pair = self.pair.other();
                    self.gate_transition(sensors, &mut events);
                }
            }
            ControllerState::FaultHold => {
                if now >= self.timer_until_ms {
                    self.gate_transition(sensors, &mut events);
                }
            }
        }

        if self.state == ControllerState::LaserStabilizing
            || matches!(self.state, ControllerState::Scanning { .. })
        {
            self.idler_v =
                idler_voltage(&self.config.calibration, self.pair).unwrap_or(self.idler_v);
        }
        if !matches!(self.state, ControllerState::Scanning { .. }) {
            self.signal_v = self.step_voltages[0];
        }

        let active = self.state.active_modules();
        let heater = self
            .heater
            .command(sensors.housing_temp_c, active.heater_mode());
        let (lc_signal_v, lc_idler_v) = if active.liquid_crystal {
            (self.signal_v, self.idler_v)
        } else {
            (0.0, 0.0)
        };
        let step = match self.state {
            ControllerState::Scanning { step_index, .. } => step_index,
            _ => 0,
        };
        Commands {
            state: self.state,
            laser_on: self.state.laser_on(),
            heater,
            active,
            lc_signal_v,
            lc_idler_v,
            bias_v: self.bias_v,
            pair: self.pair,
            collect,
            scan_id: self.scan_id,
            step,
            events,
        }
    }

    /// Returns whether counts should be integrated during the next tick.
    fn advance_scan(
        &mut self,
        step: usize,
        sensors: &Sensors,
        events: &mut Vec<ControllerEvent>,
    ) -> bool {
        let now = sensors.time_ms;
        match self.phase {
            StepPhase::Settling { since_ms } => {
                let settled_long_enough = now - since_ms >= self.config.scan.settle_ms();
                if settled_long_enough && sensors.lc_signal_settled && sensors.lc_idler_settled {
                    self.dwell_start_ms = now;
                    self.phase = StepPhase::Dwelling {
                        remaining_ms: self.config.scan.dwell_ms(),
                    };
                    true
                } else {
                    false
                }
            }
            StepPhase::Dwelling { remaining_ms } => {
                if let Some(c) = sensors.counts {
                    self.step_counts.accumulate(&c);
                }
                let remaining = remaining_ms.saturating_sub(self.config.tick_ms);
                if remaining > 0 {
                    self.phase = StepPhase::Dwelling {
                        remaining_ms: remaining,
                    };
                    return true;
                }
                let cal = &self.config.calibration;
                self.scan_records.push(ScanRecord {
                    scan_id: self.scan_id,
                    step,
                    pair: self.pair,
                    signal_voltage_v: self.signal_v,
                    idler_voltage_v: self.idler_v,
                    analyzer_angle_rad: cal.angle_from_voltage(self.signal_v).unwrap_or(0.0),
                    settle_start_ms: self.settle_start_ms,
                    dwell_start_ms: self.dwell_start_ms,
                    dwell_end_ms: now,
                    counts: self.step_counts,
                });
                if step + 1 < self.config.scan.n_steps {
                    self.start_step(step + 1, now);
                } else {
                    events.push(ControllerEvent::ScanCompleted {
                        scan_id: self.scan_id,
                        pair: self.pair,
                    });
                    self.completed.push(CompletedScan {
                        scan_id: self.scan_id,
                        pair: self.pair,
                        records: std::mem::take(&mut self.scan_records),
                    });
                    self.state = ControllerState::Storing;
                    self.timer_until_ms = now + self.config.storing_ms;
                }
                false
            }
        }
    }
}

/// Pump laser with optional scheduled power dips.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaserModel {
    pub nominal_mw: f64,
    pub dips: Vec<LaserDip>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserDip {
    pub start_ms: u64,
    pub end_ms: u64,
    /// Fractional power loss during the dip.
    pub depth: f64,
}

impl LaserModel {
    pub fn steady(nominal_mw: f64) -> Self {
        Self {
            nominal_mw,
            dips: Vec::new(),
        }
    }

    pub fn power_mw(&self, t_ms: u64) -> f64 {
        let depth = self
            .dips
            .iter()
            .filter(|d| (d.start_ms..d.end_ms).contains(&t_ms))
            .map(|d| d.depth)
            .fold(0.0, f64::max);
        self.nominal_mw * (1.0 - depth)
    }
}

/// Everything `run_scan` drives: the bench, the laser and its monitor, and
/// the scan clock.
#[derive(Debug, Clone)]
pub struct ScanDevices {
    pub bench: OpticalBench,
    pub pair: DetectorPair,
    pub laser: LaserModel,
    pub monitor: LaserMonitor,
    pub time_ms: u64,
    pub tick_ms: u64,
    pub scan_id: u16,
}

impl ScanDevices {
    /// Lab bench with the monitor window already filled by steady pump light.
    pub fn lab(bench: OpticalBench, pair: DetectorPair) -> Self {
        let laser = LaserModel::steady(bench.source.pump_power_mw);
        let mut monitor = LaserMonitor::default();
        let tick_ms = DEFAULT_TICK_MS;
        let window_ms = (monitor.window_s * 1000.0) as u64;
        for t in (0..=window_ms).step_by(tick_ms as usize) {
            monitor.push(t as f64 / 1000.0, laser.power_mw(t));
        }
        Self {
            bench,
            pair,
            laser,
            monitor,
            time_ms: window_ms,
            tick_ms,
            scan_id: 1,
        }
    }
}

/// One complete scan: for every step command the signal voltage, wait the
/// settle time, then integrate counts for the dwell. A laser fault at any
/// tick discards the whole scan.
pub fn run_scan<R: Rng + ?Sized>(
    config: &ScanConfig,
    devices: &mut ScanDevices,
    rng: &mut R,
) -> Result<Vec<ScanRecord>, ControllerError> {
    config.validate(devices.tick_ms)?;
    let cal = devices.bench.calibration.clone();
    let voltages = config.step_voltages(&cal);
    let idler_v = idler_voltage(&cal, devices.pair)?;
    let mut signal = LcState::settled_at(voltages[0]);
    let idler = LcState::settled_at(idler_v);
    let dt_s = devices.tick_ms as f64 / 1000.0;
    let mut records = Vec::with_capacity(config.n_steps);

    // Advances the clock one tick and checks the pump.
    let tick = |devices: &mut ScanDevices, step: usize| -> Result<f64, ControllerError> {
        devices.time_ms += devices.tick_ms;
        let p = devices.laser.power_mw(devices.time_ms);
        devices.monitor.push(devices.time_ms as f64 / 1000.0, p);
        if devices.monitor.laser_stable() == Ok(false) {
            return Err(ControllerError::ScanFault { step });
        }
        Ok(p)
    };

    for (step, &v) in voltages.iter().enumerate() {
        let settle_start_ms = devices.time_ms;
        signal = signal.command(v);
        if signal.is_settled() {
            // Same voltage as before: the settle time is still honored.
            signal.settle_remaining_s = config.settle_s;
        }
        while !(signal.is_settled() && devices.time_ms - settle_start_ms >= config.settle_ms()) {
            tick(devices, step)?;
            signal = signal.step_settle(dt_s);
        }
        debug_assert!(idler.is_settled());
        let dwell_start_ms = devices.time_ms;
        let mut counts = CountSample::default();
        while devices.time_ms - dwell_start_ms < config.dwell_ms() {
            let pump = devices.laser.power_mw(devices.time_ms);
            let rates = devices
                .bench
                .rates(devices.pair, v, idler_v, pump, [1.0, 1.0], [0.0, 0.0]);
            counts.accumulate(&sample_counts(&rates, dt_s, rng));
            tick(devices, step)?;
        }
        records.push(ScanRecord {
            scan_id: devices.scan_id,
            step,
            pair: devices.pair,
            signal_voltage_v: v,
            idler_voltage_v: idler_v,
            analyzer_angle_rad: cal.angle_from_voltage(v)?,
            settle_start_ms,
            dwell_start_ms,
            dwell_end_ms: devices.time_ms,
            counts,
        });
    }
    devices.scan_id = devices.scan_id.wrapping_add(1);
    Ok(records)
}
