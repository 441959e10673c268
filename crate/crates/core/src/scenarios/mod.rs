//! Environment profiles and the scenarios that drive the simulation.

mod sim;

pub use sim::{
    run_simulation, write_scan_summary_csv, ScanOutcome, SimError, SimSummary, StateChange,
};

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::controller::LaserDip;

/// Thermal cycle period shared by the orbit and chamber profiles.
pub const CYCLE_PERIOD_S: f64 = 6000.0;
pub const ORBIT_ALTITUDE_M: f64 = 400_000.0;
pub const CHAMBER_PRESSURE_MBAR: f64 = 1e-7;
pub const SEA_LEVEL_MBAR: f64 = 1013.25;
pub const SCALE_HEIGHT_M: f64 = 7000.0;

pub const BALLOON_PREFIX_S: f64 = 900.0;
pub const BALLOON_LAUNCH_ALT_M: f64 = 500.0;
pub const BALLOON_CEILING_M: f64 = 35_500.0;
pub const BALLOON_ASCENT_M_PER_S: f64 = 5.0;
pub const BALLOON_PEAK_DESCENT_M_PER_S: f64 = 90.0;
pub const BURST_ACCEL_G: f64 = 20.0;
pub const LANDING_ACCEL_G: f64 = 23.0;

const PROFILE_HEADER: [&str; 5] = ["t_s", "temp_c", "pressure_mbar", "altitude_m", "accel_g"];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("profile has no samples")]
    Empty,
    #[error("sample {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    pub t_s: f64,
    pub temp_c: f64,
    pub pressure_mbar: f64,
    pub altitude_m: f64,
    pub accel_g: f64,
}

/// Time-ordered boundary conditions. Between samples values are linearly
/// interpolated; outside the sampled range the nearest sample holds.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    samples: Vec<ProfileSample>,
}

impl EnvironmentProfile {
    pub fn new(samples: Vec<ProfileSample>) -> Result<Self, ProfileError> {
        if samples.is_empty() {
            return Err(ProfileError::Empty);
        }
        for (index, s) in samples.iter().enumerate() {
            let values = [s.t_s, s.temp_c, s.pressure_mbar, s.altitude_m, s.accel_g];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid(index, "non-finite value"));
            }
            if s.pressure_mbar < 0.0 {
                return Err(invalid(index, "negative pressure"));
            }
            if s.accel_g < 0.0 {
                return Err(invalid(index, "negative acceleration"));
            }
            if index > 0 && s.t_s <= samples[index - 1].t_s {
                return Err(invalid(index, "time not strictly increasing"));
            }
        }
        Ok(Self { samples })
    }

    /// A single condition held forever.
    pub fn constant(temp_c: f64, pressure_mbar: f64, altitude_m: f64, accel_g: f64) -> Self {
        Self {
            samples: vec![ProfileSample {
                t_s: 0.0,
                temp_c,
                pressure_mbar,
                altitude_m,
                accel_g,
            }],
        }
    }

    pub fn samples(&self) -> &[ProfileSample] {
        &self.samples
    }

    pub fn start_s(&self) -> f64 {
        self.samples[0].t_s
    }

    pub fn end_s(&self) -> f64 {
        self.samples[self.samples.len() - 1].t_s
    }

    pub fn at(&self, t_s: f64) -> ProfileSample {
        let s = &self.samples;
        let k = s.partition_point(|p| p.t_s <= t_s);
        if k == 0 {
            return ProfileSample { t_s, ..s[0] };
        }
        if k == s.len() {
            return ProfileSample { t_s, ..s[k - 1] };
        }
        let (a, b) = (s[k - 1], s[k]);
        let f = (t_s - a.t_s) / (b.t_s - a.t_s);
        let lerp = |x: f64, y: f64| x + f * (y - x);
        ProfileSample {
            t_s,
            temp_c: lerp(a.temp_c, b.temp_c),
            pressure_mbar: lerp(a.pressure_mbar, b.pressure_mbar),
            altitude_m: lerp(a.altitude_m, b.altitude_m),
            accel_g: lerp(a.accel_g, b.accel_g),
        }
    }

    fn extreme(&self, f: impl Fn(&ProfileSample) -> f64, max: bool) -> f64 {
        let it = self.samples.iter().map(f);
        if max {
            it.fold(f64::NEG_INFINITY, f64::max)
        } else {
            it.fold(f64::INFINITY, f64::min)
        }
    }

    pub fn temp_range(&self) -> (f64, f64) {
        (
            self.extreme(|s| s.temp_c, false),
            self.extreme(|s| s.temp_c, true),
        )
    }

    pub fn peak_altitude(&self) -> f64 {
        self.extreme(|s| s.altitude_m, true)
    }

    pub fn peak_accel(&self) -> f64 {
        self.extreme(|s| s.accel_g, true)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ProfileError> {
        let mut w = csv::Writer::from_writer(writer);
        let to_io = |e: csv::Error| ProfileError::Io(e.into());
        w.write_record(PROFILE_HEADER).map_err(to_io)?;
        for s in &self.samples {
            w.write_record(
                [s.t_s, s.temp_c, s.pressure_mbar, s.altitude_m, s.accel_g].map(|v| v.to_string()),
            )
            .map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses a profile; line numbers in errors count the header as line 1.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ProfileError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = rdr.records();
        let header = match rows.next() {
            None => return Err(ProfileError::Empty),
            Some(h) => h.map_err(|e| parse_err(1, e))?,
        };
        if header.iter().ne(PROFILE_HEADER) {
            return Err(parse_err(
                1,
                format!("expected header {}", PROFILE_HEADER.join(",")),
            ));
        }
        let mut samples: Vec<ProfileSample> = Vec::new();
        for (i, row) in rows.enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| parse_err(line, e))?;
            if row.len() != PROFILE_HEADER.len() {
                return Err(parse_err(
                    line,
                    format!("expected 5 fields, found {}", row.len()),
                ));
            }
            let mut v = [0.0; 5];
            for (k, field) in row.iter().enumerate() {
                v[k] = field.parse().map_err(|_| {
                    parse_err(
                        line,
                        format!("{}: not a number: {field:?}", PROFILE_HEADER[k]),
                    )
                })?;
            }
            let sample = ProfileSample {
                t_s: v[0],
                temp_c: v[1],
                pressure_mbar: v[2],
                altitude_m: v[3],
                accel_g: v[4],
            };
            if let Some(prev) = samples.last() {
                if !(sample.t_s > prev.t_s) {
                    return Err(parse_err(line, "time not strictly increasing"));
                }
            }
            samples.push(sample);
        }
        Self::new(samples).map_err(|e| match e {
            ProfileError::Invalid { index, message } => parse_err(index as u64 + 2, message),
            other => other,
        })
    }
}

pub fn load_profile_csv(path: impl AsRef<Path>) -> Result<EnvironmentProfile, ProfileError> {
    EnvironmentProfile::read_csv(std::fs::File::open(path)?)
}

fn parse_err(line: u64, message: impl ToString) -> ProfileError {
    ProfileError::Parse {
        line,
        message: message.to_string(),
    }
}

fn invalid(index: usize, message: &str) -> ProfileError {
    ProfileError::Invalid {
        index,
        message: message.into(),
    }
}

fn cycle_profile(
    duration_s: f64,
    step_s: f64,
    mean: f64,
    amplitude: f64,
    pressure: f64,
    altitude: f64,
) -> EnvironmentProfile {
    let n = (duration_s / step_s).ceil().max(1.0) as usize;
    let samples = (0..=n)
        .map(|i| {
            let t = i as f64 * step_s;
            ProfileSample {
                t_s: t,
                temp_c: mean + amplitude * (TAU * t / CYCLE_PERIOD_S).cos(),
                pressure_mbar: pressure,
                altitude_m: altitude,
                accel_g: 0.0,
            }
        })
        .collect();
    EnvironmentProfile { samples }
}

/// Orbital thermal cycle between -5 and 20 °C, warmest at t = 0.
pub fn leo_cycle_profile(duration_s: f64) -> EnvironmentProfile {
    cycle_profile(duration_s, 10.0, 7.5, 12.5, 0.0, ORBIT_ALTITUDE_M)
}

/// Chamber cycle between -10 and 40 °C under vacuum.
pub fn thermal_vac_profile(duration_s: f64) -> EnvironmentProfile {
    cycle_profile(duration_s, 10.0, 15.0, 25.0, CHAMBER_PRESSURE_MBAR, 0.0)
}

pub fn pressure_at(altitude_m: f64) -> f64 {
    SEA_LEVEL_MBAR * (-altitude_m / SCALE_HEIGHT_M).exp()
}

/// Temperature inside the flight package around the payload. Warmest on
/// the ground, coldest around the tropopause, recovering slightly in the
/// stratosphere.
fn package_temp_c(altitude_m: f64) -> f64 {
    const TROPOPAUSE_M: f64 = 12_000.0;
    if altitude_m <= TROPOPAUSE_M {
        7.5 + 7.5 * (std::f64::consts::PI * altitude_m.max(0.0) / TROPOPAUSE_M).cos()
    } else {
        6.0 * (altitude_m - TROPOPAUSE_M) / (BALLOON_CEILING_M - TROPOPAUSE_M)
    }
}

/// Gondola sway, well below the burst and landing shocks.
fn flight_wobble_g(t_s: f64) -> f64 {
    1.0 + 0.25 * (t_s / 7.0).sin() * (t_s / 53.0).cos()
}

/// Ground pre-activation, ascent, burst, parachute descent and landing at
/// 1 s resolution. The temperature column is the package interior seen by
/// the payload housing.
pub fn balloon_profile() -> EnvironmentProfile {
    const G: f64 = 9.81;
    let mut samples = Vec::new();
    let mut push = |t: f64, h: f64, accel: f64| {
        samples.push(ProfileSample {
            t_s: t,
            temp_c: package_temp_c(h),
            pressure_mbar: pressure_at(h),
            altitude_m: h,
            accel_g: accel,
        })
    };

    let ascent_s = (BALLOON_CEILING_M - BALLOON_LAUNCH_ALT_M) / BALLOON_ASCENT_M_PER_S;
    let burst_t = BALLOON_PREFIX_S + ascent_s;
    let mut t = 0.0;
    while t < BALLOON_PREFIX_S {
        push(t, BALLOON_LAUNCH_ALT_M, 1.0);
        t += 1.0;
    }
    while t < burst_t {
        let h = BALLOON_LAUNCH_ALT_M + BALLOON_ASCENT_M_PER_S * (t - BALLOON_PREFIX_S);
        push(t, h, flight_wobble_g(t));
        t += 1.0;
    }
    push(burst_t, BALLOON_CEILING_M, BURST_ACCEL_G);

    // Drag-limited descent speed scales as exp(h / 2H), pinned to the peak
    // speed at the ceiling.
    let v_ground =
        BALLOON_PEAK_DESCENT_M_PER_S / (BALLOON_CEILING_M / (2.0 * SCALE_HEIGHT_M)).exp();
    let terminal = |h: f64| v_ground * (h / (2.0 * SCALE_HEIGHT_M)).exp();
    let mut h = BALLOON_CEILING_M;
    let mut t = burst_t;
    loop {
        t += 1.0;
        let v = terminal(h).min(G * (t - burst_t));
        h -= v;
        if h <= BALLOON_LAUNCH_ALT_M {
            break;
        }
        push(t, h, flight_wobble_g(t));
    }
    push(t, BALLOON_LAUNCH_ALT_M, LANDING_ACCEL_G);
    let landed = t;
    while t < landed + 300.0 {
        t += 1.0;
        push(t, BALLOON_LAUNCH_ALT_M, 1.0);
    }
    EnvironmentProfile { samples }
}

/// Which boundary conditions drive a run.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    Lab,
    LeoCycle,
    ThermalVac,
    Balloon,
    Custom(EnvironmentProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration_s: f64,
    /// Visibility of the simulated source.
    pub true_visibility: f64,
    pub initial_housing_c: f64,
    pub laser_dips: Vec<LaserDip>,
}

pub const LAB_TEMP_C: f64 = 22.0;

impl Scenario {
    pub fn lab(duration_s: f64) -> Self {
        Self {
            kind: ScenarioKind::Lab,
            duration_s,
            true_visibility: 0.95,
            initial_housing_c: LAB_TEMP_C,
            laser_dips: Vec::new(),
        }
    }

    /// Starts cold, at the bottom of the orbital range.
    pub fn leo_cycle(duration_s: f64) -> Self {
        Self {
            kind: ScenarioKind::LeoCycle,
            duration_s,
            true_visibility: 0.93,
            initial_housing_c: -5.0,
            laser_dips: Vec::new(),
        }
    }

    pub fn thermal_vac(duration_s: f64) -> Self {
        Self {
            kind: ScenarioKind::ThermalVac,
            duration_s,
            true_visibility: 0.93,
            initial_housing_c: 15.0,
            laser_dips: Vec::new(),
        }
    }

    /// Whole flight, from power-on to 5 minutes after landing.
    pub fn balloon() -> Self {
        let profile = balloon_profile();
        Self {
            kind: ScenarioKind::Balloon,
            duration_s: profile.end_s(),
            true_visibility: 0.93,
            initial_housing_c: profile.samples()[0].temp_c,
            laser_dips: Vec::new(),
        }
    }

    pub fn custom(profile: EnvironmentProfile, duration_s: f64) -> Self {
        let initial_housing_c = profile.samples()[0].temp_c;
        Self {
            kind: ScenarioKind::Custom(profile),
            duration_s,
            true_visibility: 0.93,
            initial_housing_c,
            laser_dips: Vec::new(),
        }
    }

    pub fn profile(&self) -> EnvironmentProfile {
        match &self.kind {
            ScenarioKind::Lab => EnvironmentProfile::constant(LAB_TEMP_C, SEA_LEVEL_MBAR, 0.0, 1.0),
            ScenarioKind::LeoCycle => leo_cycle_profile(self.duration_s),
            ScenarioKind::ThermalVac => thermal_vac_profile(self.duration_s),
            ScenarioKind::Balloon => balloon_profile(),
            ScenarioKind::Custom(p) => p.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScenarioKind::Lab => "lab",
            ScenarioKind::LeoCycle => "leo",
            ScenarioKind::ThermalVac => "thermalvac",
            ScenarioKind::Balloon => "balloon",
            ScenarioKind::Custom(_) => "custom",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn leo_examples() {
        let p = leo_cycle_profile(CYCLE_PERIOD_S);
        assert_eq!(p.at(0.0).temp_c, 20.0);
        assert_eq!(p.at(3000.0).temp_c, -5.0);
        assert_eq!(p.temp_range(), (-5.0, 20.0));
        assert!(p
            .samples()
            .iter()
            .all(|s| s.pressure_mbar == 0.0 && s.altitude_m == ORBIT_ALTITUDE_M));
    }

    #[test]
    fn thermal_vac_examples() {
        let p = thermal_vac_profile(86_400.0);
        assert_eq!(p.temp_range(), (-10.0, 40.0));
        assert_relative_eq!(p.end_s() / CYCLE_PERIOD_S, 14.4, epsilon = 1e-12);
        assert!(p.samples().iter().all(|s| s.pressure_mbar == 1e-7));
    }

    proptest! {
        #[test]
        fn cycle_bounds_over_any_full_period(periods in 1usize..5) {
            let d = periods as f64 * CYCLE_PERIOD_S;
            prop_assert_eq!(leo_cycle_profile(d).temp_range(), (-5.0, 20.0));
            prop_assert_eq!(thermal_vac_profile(d).temp_range(), (-10.0, 40.0));
        }

        #[test]
        fn interpolation_stays_between_neighbours(t in 0.0f64..12_000.0) {
            let p = leo_cycle_profile(12_000.0);
            let v = p.at(t).temp_c;
            prop_assert!((-5.0..=20.0).contains(&v));
        }
    }

    #[test]
    fn balloon_extremes() {
        let p = balloon_profile();
        assert_eq!(p.peak_altitude(), BALLOON_CEILING_M);
        let (lo, hi) = p.temp_range();
        assert!(lo >= 0.0 && hi <= 15.0, "{lo} {hi}");
        let accels: Vec<f64> = p.samples().iter().map(|s| s.accel_g).collect();
        assert_eq!(accels.iter().filter(|&&a| a == BURST_ACCEL_G).count(), 1);
        assert_eq!(p.peak_accel(), LANDING_ACCEL_G);
        let others = accels
            .iter()
            .filter(|&&a| a != BURST_ACCEL_G && a != LANDING_ACCEL_G);
        assert!(others.into_iter().all(|&a| a < BURST_ACCEL_G));
    }

    #[test]
    fn balloon_timeline() {
        let p = balloon_profile();
        let s = p.samples();
        let burst = s.iter().find(|x| x.accel_g == BURST_ACCEL_G).unwrap();
        let landing = s.iter().find(|x| x.accel_g == LANDING_ACCEL_G).unwrap();
        assert_relative_eq!(
            (burst.t_s - BALLOON_PREFIX_S) / 60.0,
            116.67,
            epsilon = 0.01
        );
        let flight_min = (landing.t_s - BALLOON_PREFIX_S) / 60.0;
        assert!((140.0..160.0).contains(&flight_min), "{flight_min}");
        let speeds: Vec<f64> = s
            .windows(2)
            .filter(|w| w[0].t_s >= burst.t_s)
            .map(|w| (w[0].altitude_m - w[1].altitude_m) / (w[1].t_s - w[0].t_s))
            .collect();
        let peak = speeds.iter().copied().fold(0.0, f64::max);
        assert!((85.0..=90.0).contains(&peak), "{peak}");
        let near_ground = s
            .windows(2)
            .filter(|w| w[0].t_s > burst.t_s && w[1].altitude_m < 2000.0 && w[1].t_s <= landing.t_s)
            .map(|w| w[0].altitude_m - w[1].altitude_m);
        assert!(near_ground.into_iter().all(|v| v < 10.0));
    }

    #[test]
    fn exponential_atmosphere() {
        assert_relative_eq!(pressure_at(0.0), 1013.25);
        assert!((pressure_at(35_500.0) - 6.4).abs() < 0.05);
    }

    #[test]
    fn balloon_round_trips_through_csv() {
        let p = balloon_profile();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(EnvironmentProfile::read_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn out_of_order_row_reports_its_line() {
        let text = "t_s,temp_c,pressure_mbar,altitude_m,accel_g\n0,1,1,0,1\n2,1,1,0,1\n1,1,1,0,1\n";
        match EnvironmentProfile::read_csv(text.as_bytes()) {
            Err(ProfileError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_rejected() {
        for (text, want) in [
            (
                "t_s,temp_c,pressure_mbar,altitude_m,accel_g\n0,1,x,0,1\n",
                2,
            ),
            (
                "t_s,temp_c,pressure_mbar,altitude_m,accel_g\n0,1,1,0,1\n1,1,-1,0,1\n",
                3,
            ),
            ("t,temp\n", 1),
        ] {
            match EnvironmentProfile::read_csv(text.as_bytes()) {
                Err(ProfileError::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            EnvironmentProfile::read_csv("".as_bytes()),
            Err(ProfileError::Empty)
        ));
        let header_only = "t_s,temp_c,pressure_mbar,altitude_m,accel_g\n";
        assert!(matches!(
            EnvironmentProfile::read_csv(header_only.as_bytes()),
            Err(ProfileError::Empty)
        ));
    }
}
