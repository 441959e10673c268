//! Rebuilding scans from downlinked telemetry records and writing the CSV
//! products of the `analyze` command.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use super::{AnalysisError, FitResult, ScanAnalysis, ScanData, ScanPoint};
use crate::controller::DetectorPair;
use crate::lc_optics::LcCalibration;
use crate::telemetry::{flags, TelemetryRecord};

/// Per-step totals of one scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanStep {
    pub step: u8,
    pub lc_signal_mv: u16,
    pub singles_1: u64,
    pub singles_2: u64,
    pub coinc_raw: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlashScan {
    pub scan_id: u16,
    pub pair: DetectorPair,
    pub steps: Vec<ScanStep>,
    pub data: ScanData,
}

/// Groups committed scans by `scan_id`, summing the 125 ms sub-samples of
/// every step. Scans with missing steps (overwritten by the ring buffer or
/// never committed) are dropped.
pub fn scans_from_records(
    records: &[TelemetryRecord],
    calibration: &LcCalibration,
    dwell_s: f64,
) -> Vec<FlashScan> {
    let committed: BTreeSet<u16> = records
        .iter()
        .filter(|r| r.has_flag(flags::SCAN_COMMIT))
        .map(|r| r.scan_id)
        .collect();

    let mut grouped: BTreeMap<u16, (u8, BTreeMap<u8, ScanStep>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.has_flag(flags::COLLECTING)) {
        if !committed.contains(&r.scan_id) {
            continue;
        }
        let (_, steps) = grouped
            .entry(r.scan_id)
            .or_insert_with(|| (r.pair_sel, BTreeMap::new()));
        let entry = steps.entry(r.step).or_insert(ScanStep {
            step: r.step,
            lc_signal_mv: r.lc_signal_mv,
            singles_1: 0,
            singles_2: 0,
            coinc_raw: 0,
        });
        entry.singles_1 += u64::from(r.singles_1);
        entry.singles_2 += u64::from(r.singles_2);
        entry.coinc_raw += u64::from(r.coinc_raw);
    }

    grouped
        .into_iter()
        .filter_map(|(scan_id, (pair_sel, steps))| {
            let contiguous = steps.keys().enumerate().all(|(i, &s)| usize::from(s) == i);
            if !contiguous {
                return None;
            }
            let steps: Vec<ScanStep> = steps.into_values().collect();
            let points = steps
                .iter()
                .map(|s| {
                    let v = f64::from(s.lc_signal_mv) / 1000.0;
                    let angle = calibration.angle_from_voltage(v).ok()?;
                    Some(ScanPoint {
                        analyzer_angle_rad: angle,
                        dwell_s,
                        singles_1: s.singles_1,
                        singles_2: s.singles_2,
                        coinc_raw: s.coinc_raw,
                    })
                })
                .collect::<Option<Vec<_>>>()?;
            Some(FlashScan {
                scan_id,
                pair: DetectorPair::from_sel(pair_sel),
                steps,
                data: ScanData { points },
            })
        })
        .collect()
}

fn out_err(e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Output(e.to_string())
}

/// Per-step table: angle, raw and corrected rates and the fitted curve.
pub fn write_scan_csv<W: Write>(
    writer: W,
    scan: &FlashScan,
    analysis: &ScanAnalysis,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "step",
        "voltage_v",
        "angle_rad",
        "singles_1",
        "singles_2",
        "coinc_raw",
        "raw_rate_hz",
        "corrected_rate_hz",
        "fit_rate_hz",
    ])
    .map_err(out_err)?;
    for ((step, point), corrected) in scan
        .steps
        .iter()
        .zip(&scan.data.points)
        .zip(&analysis.corrected)
    {
        w.write_record([
            step.step.to_string(),
            format!("{:.3}", f64::from(step.lc_signal_mv) / 1000.0),
            format!("{:.6}", point.analyzer_angle_rad),
            point.singles_1.to_string(),
            point.singles_2.to_string(),
            point.coinc_raw.to_string(),
            format!("{:.3}", point.raw_rate()),
            format!("{:.3}", corrected),
            format!("{:.3}", analysis.fit.evaluate(point.analyzer_angle_rad)),
        ])
        .map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}

/// One line per scan.
pub fn write_summary_csv<W: Write>(
    writer: W,
    rows: &[(u16, DetectorPair, FitResult)],
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scan_id",
        "pair",
        "visibility",
        "raw_visibility",
        "visibility_stderr",
        "phase_rad",
        "rms_residual_hz",
        "converged",
    ])
    .map_err(out_err)?;
    for (scan_id, pair, fit) in rows {
        w.write_record([
            scan_id.to_string(),
            pair.to_string(),
            format!("{:.6}", fit.visibility),
            format!("{:.6}", fit.raw_visibility),
            format!("{:.6}", fit.visibility_stderr),
            format!("{:.6}", fit.phase_rad),
            format!("{:.3}", fit.rms_residual),
            fit.converged.to_string(),
        ])
        .map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}
