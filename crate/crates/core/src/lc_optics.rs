//! Liquid-crystal polarization rotator: voltage to rotation calibration,
//! settling after a voltage step, and the transmission of the analyzing PBS.

use std::f64::consts::TAU;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

/// Time the rotator is given to stabilize after every new voltage.
pub const LC_SETTLE_S: f64 = 0.3;

/// Extinction ratio of the wavelength-matched rotators.
pub const DEFAULT_EXTINCTION_RATIO: f64 = 100.0;

const SETTLE_EPS_S: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcError {
    #[error("calibration needs at least two knots")]
    TooFewKnots,
    #[error("knot {index}: voltages and angles must be strictly increasing")]
    NotMonotone { index: usize },
    #[error("calibration must map V_min to 0 and V_max to 2π (got {first} .. {last} rad)")]
    BadSpan { first: f64, last: f64 },
    #[error("voltage {0} V outside calibrated range")]
    VoltageOutOfRange(f64),
    #[error("angle {0} rad outside [0, 2π]")]
    AngleOutOfRange(f64),
    #[error("calibration csv line {line}: {message}")]
    Csv { line: u64, message: String },
}

/// Monotone piecewise-cubic (Fritsch-Carlson) map from drive voltage to
/// polarization rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LcCalibration {
    voltages: Vec<f64>,
    angles: Vec<f64>,
    slopes: Vec<f64>,
}

impl LcCalibration {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self, LcError> {
        if knots.len() < 2 {
            return Err(LcError::TooFewKnots);
        }
        for (i, pair) in knots.windows(2).enumerate() {
            if !(pair[1].0 > pair[0].0 && pair[1].1 > pair[0].1) {
                return Err(LcError::NotMonotone { index: i + 1 });
            }
        }
        let first = knots[0].1;
        let last = knots[knots.len() - 1].1;
        if first.abs() > 1e-9 || (last - TAU).abs() > 1e-9 {
            return Err(LcError::BadSpan { first, last });
        }
        let voltages: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let mut angles: Vec<f64> = knots.iter().map(|k| k.1).collect();
        angles[0] = 0.0;
        *angles.last_mut().unwrap() = TAU;
        let slopes = pchip_slopes(&voltages, &angles);
        Ok(Self {
            voltages,
            angles,
            slopes,
        })
    }

    /// Linear two-knot calibration, mostly useful in tests.
    pub fn linear(v_min: f64, v_max: f64) -> Result<Self, LcError> {
        Self::new(&[(v_min, 0.0), (v_max, TAU)])
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.voltages
            .iter()
            .copied()
            .zip(self.angles.iter().copied())
    }

    pub fn v_min(&self) -> f64 {
        self.voltages[0]
    }

    pub fn v_max(&self) -> f64 {
        self.voltages[self.voltages.len() - 1]
    }

    pub fn angle_from_voltage(&self, v: f64) -> Result<f64, LcError> {
        if !(v >= self.v_min() && v <= self.v_max()) {
            return Err(LcError::VoltageOutOfRange(v));
        }
        Ok(self.eval(v))
    }

    pub fn voltage_for_angle(&self, theta: f64) -> Result<f64, LcError> {
        if !(0.0..=TAU).contains(&theta) {
            return Err(LcError::AngleOutOfRange(theta));
        }
        let k = match self.angles.iter().position(|&a| a == theta) {
            Some(i) => return Ok(self.voltages[i]),
            None => self.angles.partition_point(|&a| a < theta) - 1,
        };
        // Bisection within the bracketing segment; the cubic is monotone there.
        let (mut lo, mut hi) = (self.voltages[k], self.voltages[k + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < theta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    fn eval(&self, v: f64) -> f64 {
        let n = self.voltages.len();
        if v >= self.voltages[n - 1] {
            return self.angles[n - 1];
        }
        let k = self.voltages.partition_point(|&x| x <= v).saturating_sub(1);
        let h = self.voltages[k + 1] - self.voltages[k];
        let t = (v - self.voltages[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.angles[k]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * self.angles[k + 1]
            + (t3 - t2) * h * self.slopes[k + 1]
    }

    /// Reads `voltage,angle_rad` rows. A non-numeric first row is treated as
    /// a header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, LcError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut knots = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i as u64 + 1;
            let row = row.map_err(|e| LcError::Csv {
                line,
                message: e.to_string(),
            })?;
            if row.len() != 2 {
                return Err(LcError::Csv {
                    line,
                    message: format!("expected 2 fields, found {}", row.len()),
                });
            }
            let parsed = (row[0].parse::<f64>(), row[1].parse::<f64>());
            match parsed {
                (Ok(v), Ok(a)) => knots.push((v, a)),
                _ if i == 0 => continue,
                _ => {
                    return Err(LcError::Csv {
                        line,
                        message: "non-numeric field".into(),
                    })
                }
            }
        }
        Self::new(&knots)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, LcError> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| LcError::Csv {
            line: 0,
            message: e.to_string(),
        })?;
        Self::from_csv_reader(file)
    }
}

impl Default for LcCalibration {
    /// Eight knots on a logistic curve over 0..8 V.
    fn default() -> Self {
        let n = 8;
        let steepness = 0.9;
        let logistic = |v: f64| 1.0 / (1.0 + (-steepness * (v - 4.0)).exp());
        let (lo, hi) = (logistic(0.0), logistic(8.0));
        let knots: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v = 8.0 * i as f64 / (n - 1) as f64;
                (v, TAU * (logistic(v) - lo) / (hi - lo))
            })
            .collect();
        Self::new(&knots).expect("default calibration is monotone")
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] <= 0.0 {
            d[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d[0] = pchip_end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = pchip_end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn pchip_end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > (3.0 * d0).abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Settling state of one rotator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcState {
    pub commanded_voltage: f64,
    pub settle_remaining_s: f64,
}

impl LcState {
    pub fn settled_at(voltage: f64) -> Self {
        Self {
            commanded_voltage: voltage,
            settle_remaining_s: 0.0,
        }
    }

    pub fn is_settled(&self) -> bool {
        self.settle_remaining_s == 0.0
    }

    /// Issues a voltage; any change restarts the settle timer.
    pub fn command(self, voltage: f64) -> Self {
        if voltage == self.commanded_voltage {
            return self;
        }
        Self {
            commanded_voltage: voltage,
            settle_remaining_s: LC_SETTLE_S,
        }
    }

    pub fn step_settle(self, dt: f64) -> Self {
        debug_assert!(dt > 0.0);
        let mut remaining = self.settle_remaining_s - dt;
        if remaining < SETTLE_EPS_S {
            remaining = 0.0;
        }
        Self {
            settle_remaining_s: remaining,
            ..self
        }
    }
}

/// Transmission of a polarization analyzer with finite extinction ratio.
pub fn analyzer_transmission(theta_rel: f64, extinction_ratio: f64) -> f64 {
    let leak = 1.0 / (1.0 + extinction_ratio);
    let c = theta_rel.cos();
    (1.0 - leak) * c * c + leak
}

/// Highest fringe contrast an analyzer with this extinction ratio can show.
pub fn visibility_ceiling(extinction_ratio: f64) -> f64 {
    let max = analyzer_transmission(0.0, extinction_ratio);
    let min = analyzer_transmission(std::f64::consts::FRAC_PI_2, extinction_ratio);
    (max - min) / (max + min)
}
