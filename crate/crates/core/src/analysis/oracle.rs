//! Brute-force reference fit used to check the iterative fitter.
//!
//! Exhaustive search of `(A, v, φ)` on a lattice derived from the data range
//! with the baseline held at the caller's value, followed by a few zooms
//! around the best node. Slow and approximate by construction; verification
//! only.

use std::f64::consts::TAU;

use super::{check_input, objective, AnalysisError, FitResult};

const COARSE: [usize; 3] = [61, 49, 96];
const FINE: usize = 11;
const ZOOMS: usize = 3;

struct Axis {
    lo: f64,
    step: f64,
    n: usize,
}

impl Axis {
    fn value(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }
}

pub fn fit_oracle(
    angles: &[f64],
    rates: &[f64],
    baseline: f64,
) -> Result<FitResult, AnalysisError> {
    check_input(angles, rates)?;
    let ymax = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = (ymax - baseline).max(1e-9 * ymax.abs().max(1.0));

    let mut axes = [
        Axis {
            lo: 0.0,
            step: 2.5 * top / (COARSE[0] - 1) as f64,
            n: COARSE[0],
        },
        Axis {
            lo: 0.0,
            step: 1.2 / (COARSE[1] - 1) as f64,
            n: COARSE[1],
        },
        Axis {
            lo: 0.0,
            step: TAU / COARSE[2] as f64,
            n: COARSE[2],
        },
    ];
    let mut best = search(angles, rates, baseline, &axes);
    for _ in 0..ZOOMS {
        axes = std::array::from_fn(|k| Axis {
            lo: best[k] - axes[k].step,
            step: 2.0 * axes[k].step / (FINE - 1) as f64,
            n: FINE,
        });
        best = search(angles, rates, baseline, &axes);
    }
    let [a, v, phi] = best;

    let sse = objective(angles, rates, a, v, phi, baseline);
    let denom = a + 2.0 * baseline;
    Ok(FitResult {
        pair_rate: a,
        amplitude: (a * v / 2.0).abs(),
        visibility: if denom != 0.0 { v * a / denom } else { 0.0 },
        raw_visibility: v,
        visibility_stderr: f64::NAN,
        phase_rad: phi.rem_euclid(TAU),
        baseline,
        sse,
        rms_residual: (sse / rates.len() as f64).sqrt(),
        converged: true,
        iterations: 1 + ZOOMS,
    })
}

fn search(angles: &[f64], rates: &[f64], b: f64, axes: &[Axis; 3]) -> [f64; 3] {
    // cos(2θ - φ) for every phase node and angle.
    let cos_table: Vec<Vec<f64>> = (0..axes[2].n)
        .map(|k| {
            let phi = axes[2].value(k);
            angles.iter().map(|t| (2.0 * t - phi).cos()).collect()
        })
        .collect();
    let mut best = (f64::INFINITY, [0.0; 3]);
    for ia in 0..axes[0].n {
        let a = axes[0].value(ia);
        for iv in 0..axes[1].n {
            let v = axes[1].value(iv);
            for (k, cosines) in cos_table.iter().enumerate() {
                let sse: f64 = cosines
                    .iter()
                    .zip(rates)
                    .map(|(c, y)| {
                        let e = y - (a * (1.0 + v * c) / 2.0 + b);
                        e * e
                    })
                    .sum();
                if sse < best.0 {
                    best = (sse, [a, v, axes[2].value(k)]);
                }
            }
        }
    }
    best.1
}
