//! Photon statistics for the pair source and the avalanche photodiode response.
//!
//! Rates are counts per second, times are seconds, wavelengths are nanometres.
//! Expected rates are closed-form; measured counts are Poisson draws from an
//! explicit generator so a run is reproducible from its seed alone.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

/// Coincidence window of the counting electronics.
pub const COINCIDENCE_WINDOW_S: f64 = 9e-9;

/// Relative tolerance on `1/pump = 1/signal + 1/idler`.
pub const ENERGY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error(
        "wavelengths must satisfy 0 < pump < signal (pump {pump_nm} nm, signal {signal_nm} nm)"
    )]
    Wavelength { pump_nm: f64, signal_nm: f64 },
    #[error("invalid source parameters: {0}")]
    InvalidSource(&'static str),
    #[error("invalid detector parameters: {0}")]
    InvalidDetector(&'static str),
}

/// Ground truth of the pair source. The analysis pipeline never sees this.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub pump_wavelength_nm: f64,
    pub signal_wavelength_nm: f64,
    pub idler_wavelength_nm: f64,
    pub pump_power_mw: f64,
    /// Detected true pair rate per mW of pump at the peak of the scan.
    pub pair_rate_per_mw: f64,
    pub true_visibility: f64,
    pub phase_offset_rad: f64,
    /// Singles at nominal pump power, dark counts included.
    pub singles_rate_signal_hz: f64,
    pub singles_rate_idler_hz: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            pump_wavelength_nm: 405.0,
            signal_wavelength_nm: 760.0,
            idler_wavelength_nm: 867.0,
            pump_power_mw: 9.0,
            pair_rate_per_mw: 3431.0 / 9.0,
            true_visibility: 0.95,
            phase_offset_rad: 0.3,
            singles_rate_signal_hz: 360_000.0,
            singles_rate_idler_hz: 330_000.0,
        }
    }
}

impl SourceParams {
    pub fn with_visibility(mut self, v: f64) -> Self {
        self.true_visibility = v;
        self
    }

    /// True pair rate at the scan peak for the nominal pump power.
    pub fn peak_pair_rate(&self) -> f64 {
        self.pair_rate_per_mw * self.pump_power_mw
    }

    /// `|1/pump - 1/signal - 1/idler| * pump`.
    pub fn energy_mismatch(&self) -> f64 {
        (1.0 / self.pump_wavelength_nm
            - 1.0 / self.signal_wavelength_nm
            - 1.0 / self.idler_wavelength_nm)
            .abs()
            * self.pump_wavelength_nm
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let wavelengths = [
            self.pump_wavelength_nm,
            self.signal_wavelength_nm,
            self.idler_wavelength_nm,
        ];
        if wavelengths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(PhysicsError::InvalidSource("wavelengths must be positive"));
        }
        if self.energy_mismatch() >= ENERGY_TOLERANCE {
            return Err(PhysicsError::InvalidSource(
                "wavelengths violate energy conservation",
            ));
        }
        if !(0.0..=1.0).contains(&self.true_visibility) {
            return Err(PhysicsError::InvalidSource(
                "true_visibility must lie in [0, 1]",
            ));
        }
        let rates = [
            self.pump_power_mw,
            self.pair_rate_per_mw,
            self.singles_rate_signal_hz,
            self.singles_rate_idler_hz,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(PhysicsError::InvalidSource(
                "rates and pump power must be nonnegative",
            ));
        }
        if !self.phase_offset_rad.is_finite() {
            return Err(PhysicsError::InvalidSource("phase offset must be finite"));
        }
        Ok(())
    }
}

/// Idler wavelength from energy conservation, `1/idler = 1/pump - 1/signal`.
pub fn idler_wavelength(pump_nm: f64, signal_nm: f64) -> Result<f64, PhysicsError> {
    if !(pump_nm > 0.0 && signal_nm > pump_nm && signal_nm.is_finite()) {
        return Err(PhysicsError::Wavelength { pump_nm, signal_nm });
    }
    Ok(1.0 / (1.0 / pump_nm - 1.0 / signal_nm))
}

/// Expected accidental coincidence rate `s1 * s2 * window`.
pub fn accidental_rate(s1_hz: f64, s2_hz: f64, window_s: f64) -> f64 {
    s1_hz * s2_hz * window_s
}

/// Raw coincidence rate at analyzer angle `theta`: the sinusoidal pair term
/// plus accidentals from the nominal singles.
pub fn expected_coincidence_rate(
    src: &SourceParams,
    analyzer_angle_rad: f64,
    window_s: f64,
) -> f64 {
    let pair = pair_term(
        src.peak_pair_rate(),
        src.true_visibility,
        2.0 * analyzer_angle_rad - src.phase_offset_rad,
    );
    pair + accidental_rate(
        src.singles_rate_signal_hz,
        src.singles_rate_idler_hz,
        window_s,
    )
}

fn pair_term(peak: f64, visibility: f64, argument: f64) -> f64 {
    peak * (1.0 + visibility * argument.cos()) / 2.0
}

/// Fraction of the collimated pump mode falling on the detector's active area.
pub fn overlap_factor(detector_dia_mm: f64, beam_dia_mm: f64) -> f64 {
    let ratio = detector_dia_mm / beam_dia_mm;
    (ratio * ratio).min(1.0)
}

/// Expected singles and coincidence rates seen by one detector pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rates {
    pub signal_hz: f64,
    pub idler_hz: f64,
    pub coincidence_hz: f64,
}

/// Instrument state entering the rate model for one integration interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConditions {
    pub pump_power_mw: f64,
    pub analyzer_angle_rad: f64,
    /// Extra fringe phase contributed by the detector-pair routing.
    pub pair_phase_rad: f64,
    pub window_s: f64,
    /// Detection efficiency relative to the efficiency at which the nominal
    /// singles were quoted.
    pub signal_efficiency: f64,
    pub idler_efficiency: f64,
    pub signal_dark_hz: f64,
    pub idler_dark_hz: f64,
}

/// Rates after pump-power scaling, detector efficiency and dark counts.
pub fn detected_rates(src: &SourceParams, cond: &DetectionConditions) -> Rates {
    let pump_scale = if src.pump_power_mw > 0.0 {
        cond.pump_power_mw / src.pump_power_mw
    } else {
        0.0
    };
    let signal_hz = cond.signal_dark_hz
        + (src.singles_rate_signal_hz - cond.signal_dark_hz).max(0.0)
            * pump_scale
            * cond.signal_efficiency;
    let idler_hz = cond.idler_dark_hz
        + (src.singles_rate_idler_hz - cond.idler_dark_hz).max(0.0)
            * pump_scale
            * cond.idler_efficiency;
    let pair = pair_term(
        src.pair_rate_per_mw * cond.pump_power_mw * cond.signal_efficiency * cond.idler_efficiency,
        src.true_visibility,
        2.0 * cond.analyzer_angle_rad - src.phase_offset_rad - cond.pair_phase_rad,
    );
    Rates {
        signal_hz,
        idler_hz,
        coincidence_hz: pair + accidental_rate(signal_hz, idler_hz, cond.window_s),
    }
}

/// Counts integrated over one dwell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CountSample {
    pub singles_1: u64,
    pub singles_2: u64,
    pub coincidences_raw: u64,
    pub dwell_s: f64,
}

impl CountSample {
    pub fn accumulate(&mut self, other: &CountSample) {
        self.singles_1 += other.singles_1;
        self.singles_2 += other.singles_2;
        self.coincidences_raw += other.coincidences_raw;
        self.dwell_s += other.dwell_s;
    }
}

/// Poisson draw of each count for one dwell. Coincidences are clamped so they
/// never exceed either singles count.
pub fn sample_counts<R: Rng + ?Sized>(rates: &Rates, dwell_s: f64, rng: &mut R) -> CountSample {
    let singles_1 = poisson(rates.signal_hz * dwell_s, rng);
    let singles_2 = poisson(rates.idler_hz * dwell_s, rng);
    let coincidences = poisson(rates.coincidence_hz * dwell_s, rng);
    CountSample {
        singles_1,
        singles_2,
        coincidences_raw: coincidences.min(singles_1).min(singles_2),
        dwell_s,
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if !(mean > 0.0) || !mean.is_finite() {
        return 0;
    }
    // Poisson::new only fails for non-positive or non-finite means.
    let dist = Poisson::new(mean).expect("positive finite mean");
    dist.sample(rng) as u64
}

/// Saturating efficiency curve `peak * (1 - exp(-overvoltage / saturation))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyCurve {
    pub peak: f64,
    pub saturation_overvolt: f64,
}

impl EfficiencyCurve {
    pub fn efficiency(&self, overvoltage: f64) -> f64 {
        if overvoltage <= 0.0 {
            return 0.0;
        }
        self.peak * (1.0 - (-overvoltage / self.saturation_overvolt).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApdParams {
    pub breakdown_volts_at_25c: f64,
    pub breakdown_tempco_v_per_c: f64,
    pub amplitude_gain_per_overvolt: f64,
    pub efficiency_sat_curve: EfficiencyCurve,
    pub dark_rate_hz: f64,
    pub bias_min_v: f64,
    pub bias_max_v: f64,
}

impl Default for ApdParams {
    fn default() -> Self {
        Self {
            breakdown_volts_at_25c: 105.0,
            breakdown_tempco_v_per_c: 0.7,
            amplitude_gain_per_overvolt: 0.1,
            efficiency_sat_curve: EfficiencyCurve {
                peak: 0.6,
                saturation_overvolt: 6.0,
            },
            dark_rate_hz: 500.0,
            bias_min_v: 100.0,
            bias_max_v: 130.0,
        }
    }
}

impl ApdParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.bias_min_v < self.bias_max_v) {
            return Err(PhysicsError::InvalidDetector(
                "bias_min_v must be below bias_max_v",
            ));
        }
        if !(self.dark_rate_hz >= 0.0) {
            return Err(PhysicsError::InvalidDetector(
                "dark rate must be nonnegative",
            ));
        }
        if !(self.amplitude_gain_per_overvolt > 0.0) {
            return Err(PhysicsError::InvalidDetector(
                "amplitude gain must be positive",
            ));
        }
        let curve = self.efficiency_sat_curve;
        if !((0.0..=1.0).contains(&curve.peak) && curve.saturation_overvolt > 0.0) {
            return Err(PhysicsError::InvalidDetector(
                "efficiency curve must saturate within [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn breakdown_voltage(&self, temp_c: f64) -> f64 {
        self.breakdown_volts_at_25c + self.breakdown_tempco_v_per_c * (temp_c - 25.0)
    }

    pub fn overvoltage(&self, bias_v: f64, temp_c: f64) -> f64 {
        (bias_v - self.breakdown_voltage(temp_c)).max(0.0)
    }

    pub fn efficiency(&self, bias_v: f64, temp_c: f64) -> f64 {
        self.efficiency_sat_curve
            .efficiency(self.overvoltage(bias_v, temp_c))
    }

    /// Bias that produces `amplitude` at `temp_c`, ignoring the supply rails.
    pub fn bias_for_amplitude(&self, amplitude: f64, temp_c: f64) -> f64 {
        self.breakdown_voltage(temp_c) + amplitude / self.amplitude_gain_per_overvolt
    }
}

/// Avalanche pulse amplitude, linear in overvoltage above the
/// temperature-dependent breakdown.
pub fn avalanche_amplitude(params: &ApdParams, bias_v: f64, temp_c: f64) -> f64 {
    params.amplitude_gain_per_overvolt * params.overvoltage(bias_v, temp_c)
}
