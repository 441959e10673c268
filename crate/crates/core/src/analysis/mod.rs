//! Ground-side analysis: accidental correction, sinusoid fitting in the
//! analyzer-angle domain and visibility extraction.

mod flash;
mod linalg;
pub mod oracle;

use std::f64::consts::{PI, TAU};

use thiserror::Error;

pub use flash::{scans_from_records, write_scan_csv, write_summary_csv, FlashScan, ScanStep};

use crate::physics::accidental_rate;

pub const MIN_FIT_POINTS: usize = 6;
pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("fit needs at least {MIN_FIT_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("analyzer angles span {0} rad; more than π is required")]
    InsufficientSpan(f64),
    #[error("angle and rate slices differ in length ({angles} vs {rates})")]
    LengthMismatch { angles: usize, rates: usize },
    #[error("visibility undefined for max {max} and min {min}")]
    Domain { max: f64, min: f64 },
    #[error("csv output: {0}")]
    Output(String),
}

/// One LC step of a scan as seen by the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub analyzer_angle_rad: f64,
    pub dwell_s: f64,
    pub singles_1: u64,
    pub singles_2: u64,
    pub coinc_raw: u64,
}

impl ScanPoint {
    pub fn raw_rate(&self) -> f64 {
        self.coinc_raw as f64 / self.dwell_s
    }

    /// `coinc/dwell - (s1/dwell)(s2/dwell) window`; negative values are kept.
    pub fn corrected_rate(&self, window_s: f64) -> f64 {
        self.raw_rate()
            - accidental_rate(
                self.singles_1 as f64 / self.dwell_s,
                self.singles_2 as f64 / self.dwell_s,
                window_s,
            )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanData {
    pub points: Vec<ScanPoint>,
}

impl ScanData {
    pub fn angles(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.analyzer_angle_rad).collect()
    }
}

/// Accidental-corrected coincidence rate of every step.
pub fn correct_accidentals(scan: &ScanData, window_s: f64) -> Vec<f64> {
    scan.points
        .iter()
        .map(|p| p.corrected_rate(window_s))
        .collect()
}

/// `(max - min) / (max + min)`.
pub fn visibility(max_rate: f64, min_rate: f64) -> Result<f64, AnalysisError> {
    let denom = max_rate + min_rate;
    if !(denom > 0.0) {
        return Err(AnalysisError::Domain {
            max: max_rate,
            min: min_rate,
        });
    }
    Ok((max_rate - min_rate) / denom)
}

/// Fitted `r(θ) = A (1 + v cos(2θ - φ)) / 2 + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    /// `A`, the pair rate at the fringe maximum above the baseline.
    pub pair_rate: f64,
    /// Half peak-to-peak modulation, `A v / 2`.
    pub amplitude: f64,
    /// Contrast of the whole fitted curve, `v A / (A + 2 b)`.
    pub visibility: f64,
    /// `v` itself. Not clamped; may exceed 1 on noisy data.
    pub raw_visibility: f64,
    /// Standard error of `visibility` from the fit covariance.
    pub visibility_stderr: f64,
    pub phase_rad: f64,
    pub baseline: f64,
    pub sse: f64,
    pub rms_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn evaluate(&self, theta: f64) -> f64 {
        model(
            self.pair_rate,
            self.raw_visibility,
            self.phase_rad,
            self.baseline,
            theta,
        )
    }

    /// True when noise pushed the estimator above physical contrast.
    pub fn is_unphysical(&self) -> bool {
        self.visibility > 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Flat background `b`, held fixed during the fit. Zero for
    /// accidental-corrected data.
    pub baseline: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            baseline: 0.0,
            max_iterations: MAX_ITERATIONS,
            step_tolerance: STEP_TOLERANCE,
        }
    }
}

pub fn model(pair_rate: f64, v: f64, phase: f64, baseline: f64, theta: f64) -> f64 {
    pair_rate * (1.0 + v * (2.0 * theta - phase).cos()) / 2.0 + baseline
}

/// Sum of squared residuals of the model against `(angles, rates)`.
pub fn objective(
    angles: &[f64],
    rates: &[f64],
    pair_rate: f64,
    v: f64,
    phase: f64,
    baseline: f64,
) -> f64 {
    angles
        .iter()
        .zip(rates)
        .map(|(&t, &r)| {
            let e = r - model(pair_rate, v, phase, baseline, t);
            e * e
        })
        .sum()
}

fn check_input(angles: &[f64], rates: &[f64]) -> Result<(), AnalysisError> {
    if angles.len() != rates.len() {
        return Err(AnalysisError::LengthMismatch {
            angles: angles.len(),
            rates: rates.len(),
        });
    }
    if angles.len() < MIN_FIT_POINTS {
        return Err(AnalysisError::TooFewPoints(angles.len()));
    }
    let lo = angles.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > PI) {
        return Err(AnalysisError::InsufficientSpan(hi - lo));
    }
    Ok(())
}

fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn fit_sinusoid(angles: &[f64], rates: &[f64]) -> Result<FitResult, AnalysisError> {
    fit_sinusoid_with(angles, rates, &FitOptions::default())
}

/// Damped Gauss-Newton (Levenberg-Marquardt) fit of `(A, v, φ)` with the
/// baseline held at `opts.baseline`.
pub fn fit_sinusoid_with(
    angles: &[f64],
    rates: &[f64],
    opts: &FitOptions,
) -> Result<FitResult, AnalysisError> {
    check_input(angles, rates)?;
    let b = opts.baseline;
    let n = rates.len();
    let (imax, &ymax) = rates
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty");
    let ymin = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = rates.iter().sum::<f64>() / n as f64;

    if ymax - ymin <= 1e-12 * ymax.abs().max(1.0) {
        return Ok(finish(
            angles,
            rates,
            [2.0 * (mean - b), 0.0, 0.0],
            b,
            true,
            0,
        ));
    }

    let mut p = {
        let a0 = (ymax - b) + (ymin - b);
        let v0 = if a0 > 0.0 {
            ((ymax - ymin) / a0).min(1.0)
        } else {
            0.5
        };
        let a0 = if a0 > 0.0 { a0 } else { ymax - ymin };
        [a0, v0, wrap_phase(2.0 * angles[imax])]
    };
    let mut sse = objective(angles, rates, p[0], p[1], p[2], b);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = normal_equations(angles, rates, &p, b);
        let mut damped = jtj;
        for i in 0..3 {
            damped[i][i] += lambda * jtj[i][i].max(1e-12);
        }
        let Some(step) = linalg::solve3(damped, jtr) else {
            lambda *= 10.0;
            continue;
        };
        let scale = [p[0].abs().max(1e-12), 1.0, 1.0];
        let rel = (0..3).map(|i| step[i].abs() / scale[i]).fold(0.0, f64::max);
        let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
        let trial_sse = objective(angles, rates, trial[0], trial[1], trial[2], b);
        if trial_sse <= sse {
            p = trial;
            sse = trial_sse;
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
        }
        if rel < opts.step_tolerance {
            converged = true;
            break;
        }
    }

    // Canonical form: v >= 0, φ in [0, 2π).
    if p[1] < 0.0 {
        p[1] = -p[1];
        p[2] += PI;
    }
    p[2] = wrap_phase(p[2]);
    Ok(finish(angles, rates, p, b, converged, iterations))
}

fn normal_equations(
    angles: &[f64],
    rates: &[f64],
    p: &[f64; 3],
    b: f64,
) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut jtj = [[0.0; 3]; 3];
    let mut jtr = [0.0; 3];
    for (&t, &y) in angles.iter().zip(rates) {
        let x = 2.0 * t - p[2];
        let (s, c) = x.sin_cos();
        let row = [
            (1.0 + p[1] * c) / 2.0,
            p[0] * c / 2.0,
            p[0] * p[1] * s / 2.0,
        ];
        let r = y - (p[0] * (1.0 + p[1] * c) / 2.0 + b);
        for i in 0..3 {
            jtr[i] += row[i] * r;
            for j in 0..3 {
                jtj[i][j] += row[i] * row[j];
            }
        }
    }
    (jtj, jtr)
}

fn finish(
    angles: &[f64],
    rates: &[f64],
    p: [f64; 3],
    b: f64,
    converged: bool,
    iterations: usize,
) -> FitResult {
    let n = rates.len();
    let sse = objective(angles, rates, p[0], p[1], p[2], b);
    let denom = p[0] + 2.0 * b;
    let visibility = if denom != 0.0 {
        p[1] * p[0] / denom
    } else {
        0.0
    };

    let stderr = if p[1] != 0.0 && n > 3 {
        let (jtj, _) = normal_equations(angles, rates, &p, b);
        linalg::inverse3(jtj)
            .map(|cov| {
                let sigma2 = sse / (n - 3) as f64;
                // Delta method on v A / (A + 2 b).
                let g = if denom != 0.0 {
                    [p[1] * 2.0 * b / (denom * denom), p[0] / denom, 0.0]
                } else {
                    [0.0; 3]
                };
                let mut var = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        var += g[i] * cov[i][j] * g[j];
                    }
                }
                (sigma2 * var).max(0.0).sqrt()
            })
            .unwrap_or(f64::NAN)
    } else {
        0.0
    };

    FitResult {
        pair_rate: p[0],
        amplitude: (p[0] * p[1] / 2.0).abs(),
        visibility,
        raw_visibility: p[1],
        visibility_stderr: stderr,
        phase_rad: p[2],
        baseline: b,
        sse,
        rms_residual: (sse / n as f64).sqrt(),
        converged,
        iterations,
    }
}

/// Fitted result for one scan together with its corrected rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanAnalysis {
    pub corrected: Vec<f64>,
    pub fit: FitResult,
}

/// Corrects accidentals and fits the corrected rates.
pub fn analyze_scan(scan: &ScanData, window_s: f64) -> Result<ScanAnalysis, AnalysisError> {
    let corrected = correct_accidentals(scan, window_s);
    let fit = fit_sinusoid(&scan.angles(), &corrected)?;
    Ok(ScanAnalysis { corrected, fit })
}

/// Mean and sample standard deviation.
pub fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{sample_counts, Rates, COINCIDENCE_WINDOW_S};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| TAU * i as f64 / n as f64).collect()
    }

    fn synthetic(angles: &[f64], a: f64, v: f64, phi: f64, b: f64) -> Vec<f64> {
        angles.iter().map(|&t| model(a, v, phi, b, t)).collect()
    }

    #[test]
    fn correction_at_nominal_rates() {
        let p = ScanPoint {
            analyzer_angle_rad: 0.0,
            dwell_s: 1.0,
            singles_1: 360_000,
            singles_2: 330_000,
            coinc_raw: 4500,
        };
        assert_relative_eq!(p.corrected_rate(9e-9), 3430.8, epsilon = 1e-6);
        let dark = ScanPoint { singles_1: 0, ..p };
        assert_eq!(dark.corrected_rate(9e-9), 4500.0);
        let low = ScanPoint {
            coinc_raw: 1000,
            ..p
        };
        assert!(low.corrected_rate(9e-9) < 0.0);
    }

    #[test]
    fn visibility_examples() {
        assert!((visibility(3600.0, 92.3).unwrap() - 0.950).abs() < 5e-5);
        assert_eq!(visibility(17.0, 17.0).unwrap(), 0.0);
        assert_eq!(visibility(17.0, 0.0).unwrap(), 1.0);
        assert!(visibility(0.0, 0.0).is_err());
        assert!(visibility(-3.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_recovery() {
        let angles = grid(36);
        for phi in [0.0, 0.3, 1.7, 3.5, 6.0] {
            let rates = synthetic(&angles, 3431.0, 0.95, phi, 0.0);
            let fit = fit_sinusoid(&angles, &rates).unwrap();
            assert!(fit.converged);
            assert!((fit.visibility - 0.95).abs() < 1e-6, "phi {phi}: {fit:?}");
            assert!((fit.phase_rad - phi).abs() < 1e-6);
            assert!(fit.rms_residual < 1e-6);
        }
    }

    #[test]
    fn flat_data_gives_zero_visibility() {
        let angles = grid(12);
        let fit = fit_sinusoid(&angles, &[250.0; 12]).unwrap();
        assert_eq!(fit.visibility, 0.0);
        assert_eq!(fit.amplitude, 0.0);
        assert_eq!(fit.rms_residual, 0.0);
    }

    #[test]
    fn baseline_separates_pair_and_curve_visibility() {
        let angles = grid(24);
        let rates = synthetic(&angles, 3000.0, 0.9, 0.4, 500.0);
        let opts = FitOptions {
            baseline: 500.0,
            ..FitOptions::default()
        };
        let fit = fit_sinusoid_with(&angles, &rates, &opts).unwrap();
        assert!((fit.raw_visibility - 0.9).abs() < 1e-6);
        assert!((fit.visibility - 0.9 * 3000.0 / 4000.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            fit_sinusoid(&grid(5), &[1.0; 5]),
            Err(AnalysisError::TooFewPoints(5))
        ));
        let narrow: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        assert!(matches!(
            fit_sinusoid(&narrow, &[1.0; 10]),
            Err(AnalysisError::InsufficientSpan(_))
        ));
        assert!(matches!(
            fit_sinusoid(&grid(8), &[1.0; 7]),
            Err(AnalysisError::LengthMismatch { .. })
        ));
    }

    fn noisy_scan(seed: u64, dwell: f64) -> ScanData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = grid(36)
            .into_iter()
            .map(|theta| {
                let rates = Rates {
                    signal_hz: 360_000.0,
                    idler_hz: 330_000.0,
                    coincidence_hz: model(3431.0, 0.95, 0.3, 0.0, theta) + 1069.2,
                };
                let s = sample_counts(&rates, dwell, &mut rng);
                ScanPoint {
                    analyzer_angle_rad: theta,
                    dwell_s: dwell,
                    singles_1: s.singles_1,
                    singles_2: s.singles_2,
                    coinc_raw: s.coincidences_raw,
                }
            })
            .collect();
        ScanData { points }
    }

    #[test]
    fn nominal_rate_noisy_scans_recover_visibility() {
        let fits: Vec<f64> = (0..100)
            .map(|seed| {
                analyze_scan(&noisy_scan(seed, 0.45), COINCIDENCE_WINDOW_S)
                    .unwrap()
                    .fit
                    .visibility
            })
            .collect();
        let (mean, _) = mean_and_spread(&fits);
        assert!((mean - 0.95).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn error_shrinks_with_dwell() {
        let mean_err = |dwell: f64| {
            let errs: Vec<f64> = (0..40)
                .map(|seed| {
                    let fit = analyze_scan(&noisy_scan(1000 + seed, dwell), COINCIDENCE_WINDOW_S)
                        .unwrap()
                        .fit;
                    (fit.visibility - 0.95).abs()
                })
                .collect();
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        let short = mean_err(0.45);
        let long = mean_err(0.45 * 64.0);
        // 64x the counts: expect roughly 8x less error; require at least 3x.
        assert!(long * 3.0 < short, "short {short} long {long}");
    }

    #[test]
    fn stderr_is_reported() {
        let fit = analyze_scan(&noisy_scan(5, 0.45), COINCIDENCE_WINDOW_S)
            .unwrap()
            .fit;
        assert!(
            fit.visibility_stderr > 0.001 && fit.visibility_stderr < 0.05,
            "{fit:?}"
        );
    }

    proptest! {
        #[test]
        fn phase_offset_invariance(shift in -3.0f64..3.0, seed in 0u64..1000) {
            let scan = noisy_scan(seed, 0.45);
            let corrected = correct_accidentals(&scan, COINCIDENCE_WINDOW_S);
            let angles = scan.angles();
            let shifted: Vec<f64> = angles.iter().map(|a| a + shift).collect();
            let a = fit_sinusoid(&angles, &corrected).unwrap();
            let b = fit_sinusoid(&shifted, &corrected).unwrap();
            prop_assert!((a.visibility - b.visibility).abs() < 1e-6);
        }

        #[test]
        fn correction_scales_with_dwell(
            s1 in 0u64..1_000_000, s2 in 0u64..1_000_000, c in 0u64..10_000,
            dwell in 0.01f64..2.0, k in 1u64..50
        ) {
            let p = ScanPoint { analyzer_angle_rad: 0.0, dwell_s: dwell, singles_1: s1, singles_2: s2, coinc_raw: c };
            let scaled = ScanPoint {
                dwell_s: dwell * k as f64,
                singles_1: s1 * k,
                singles_2: s2 * k,
                coinc_raw: c * k,
                ..p
            };
            let (x, y) = (p.corrected_rate(9e-9), scaled.corrected_rate(9e-9));
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
