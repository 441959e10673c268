//! Lumped housing thermal model, heater actuation and the power ledger.
//!
//! Electrical power is carried as integer milliwatts so ledger sums are exact.

use std::fmt;

use thiserror::Error;

/// Continuous payload power budget.
pub const POWER_BUDGET: Milliwatts = Milliwatts(2000);
/// Heater allowance while the optical chain is running.
pub const HEATER_CAP_OPERATING: Milliwatts = Milliwatts(700);
/// Heater allowance while only the micro-controller is active.
pub const HEATER_CAP_IDLE: Milliwatts = Milliwatts(1700);

/// Heater switches on below this housing temperature...
pub const HEATER_ON_BELOW_C: f64 = 20.0;
/// ...and off above this one.
pub const HEATER_OFF_ABOVE_C: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct Milliwatts(pub u32);

impl Milliwatts {
    pub fn watts(self) -> f64 {
        f64::from(self.0) / 1000.0
    }
}

impl std::ops::Add for Milliwatts {
    type Output = Milliwatts;
    fn add(self, rhs: Self) -> Self {
        Milliwatts(self.0 + rhs.0)
    }
}

impl fmt::Display for Milliwatts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} W", self.watts())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PowerError {
    #[error("power budget exceeded: {total} > {budget}")]
    BudgetExceeded {
        total: Milliwatts,
        budget: Milliwatts,
    },
    #[error("heater request {requested} exceeds the {cap} cap for {mode:?} mode")]
    HeaterOverCap {
        requested: Milliwatts,
        cap: Milliwatts,
        mode: HeaterMode,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaterMode {
    Operating,
    Idle,
}

impl HeaterMode {
    pub fn cap(self) -> Milliwatts {
        match self {
            HeaterMode::Operating => HEATER_CAP_OPERATING,
            HeaterMode::Idle => HEATER_CAP_IDLE,
        }
    }
}

/// Which electrical modules are drawing power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveModules {
    pub apds: bool,
    pub laser_driver: bool,
    pub controller_and_memory: bool,
    pub liquid_crystal: bool,
}

impl ActiveModules {
    pub const IDLE: ActiveModules = ActiveModules {
        apds: false,
        laser_driver: false,
        controller_and_memory: true,
        liquid_crystal: false,
    };
    pub const OPERATING: ActiveModules = ActiveModules {
        apds: true,
        laser_driver: true,
        controller_and_memory: true,
        liquid_crystal: true,
    };

    /// The reduced heater allowance applies whenever the laser driver runs.
    pub fn heater_mode(&self) -> HeaterMode {
        if self.laser_driver {
            HeaterMode::Operating
        } else {
            HeaterMode::Idle
        }
    }
}

/// Per-module electrical draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowerLedger {
    /// Both APDs of the selected pair together.
    pub apds: Milliwatts,
    pub laser_driver: Milliwatts,
    pub controller_and_memory: Milliwatts,
    pub liquid_crystal: Milliwatts,
}

impl Default for PowerLedger {
    fn default() -> Self {
        Self {
            apds: Milliwatts(500),
            laser_driver: Milliwatts(450),
            controller_and_memory: Milliwatts(300),
            liquid_crystal: Milliwatts(50),
        }
    }
}

impl PowerLedger {
    pub fn draw(&self, active: ActiveModules) -> Milliwatts {
        let pick = |on: bool, w: Milliwatts| if on { w } else { Milliwatts(0) };
        pick(active.apds, self.apds)
            + pick(active.laser_driver, self.laser_driver)
            + pick(active.controller_and_memory, self.controller_and_memory)
            + pick(active.liquid_crystal, self.liquid_crystal)
    }

    /// Exact sum of the active draws and the heater, checked against the
    /// heater cap for the mode and the 2 W budget.
    pub fn total_power(
        &self,
        active: ActiveModules,
        heater: Milliwatts,
    ) -> Result<Milliwatts, PowerError> {
        let mode = active.heater_mode();
        if heater > mode.cap() {
            return Err(PowerError::HeaterOverCap {
                requested: heater,
                cap: mode.cap(),
                mode,
            });
        }
        let total = self.draw(active) + heater;
        if total > POWER_BUDGET {
            return Err(PowerError::BudgetExceeded {
                total,
                budget: POWER_BUDGET,
            });
        }
        Ok(total)
    }

    /// Draw plus the largest heater allowance for the mode.
    pub fn worst_case(&self, active: ActiveModules) -> Milliwatts {
        self.draw(active) + active.heater_mode().cap()
    }
}

/// Bang-bang heater with a 20/22 °C hysteresis band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Heater {
    on: bool,
}

impl Heater {
    pub fn is_on(&self) -> bool {
        self.on
    }

    pub fn command(&mut self, housing_temp_c: f64, mode: HeaterMode) -> Milliwatts {
        if housing_temp_c < HEATER_ON_BELOW_C {
            self.on = true;
        } else if housing_temp_c > HEATER_OFF_ABOVE_C {
            self.on = false;
        }
        if self.on {
            mode.cap()
        } else {
            Milliwatts(0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalParams {
    pub heat_capacity_j_per_c: f64,
    pub conductance_w_per_c: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            heat_capacity_j_per_c: 225.0,
            conductance_w_per_c: 0.05,
        }
    }
}

impl ThermalParams {
    /// Housing temperature the update converges to for constant inputs.
    pub fn steady_state(&self, external_temp_c: f64, heater_w: f64, dissipation_w: f64) -> f64 {
        external_temp_c + (heater_w + dissipation_w) / self.conductance_w_per_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalState {
    pub housing_temp_c: f64,
    pub heater_watts: f64,
}

/// One explicit Euler step. All electrical draw of the active modules is
/// dissipated inside the housing.
pub fn step_thermal(
    params: &ThermalParams,
    state: ThermalState,
    internal_dissipation_w: f64,
    external_temp_c: f64,
    dt: f64,
) -> ThermalState {
    let flow = state.heater_watts + internal_dissipation_w
        - params.conductance_w_per_c * (state.housing_temp_c - external_temp_c);
    ThermalState {
        housing_temp_c: state.housing_temp_c + dt * flow / params.heat_capacity_j_per_c,
        ..state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn table_totals() {
        let ledger = PowerLedger::default();
        assert_eq!(
            ledger.total_power(ActiveModules::OPERATING, Milliwatts(0)),
            Ok(Milliwatts(1300))
        );
        assert_eq!(
            ledger.total_power(ActiveModules::IDLE, Milliwatts(1700)),
            Ok(Milliwatts(2000))
        );
        assert_eq!(
            ledger.total_power(ActiveModules::OPERATING, Milliwatts(700)),
            Ok(Milliwatts(2000))
        );
        assert_eq!(Milliwatts(1300).watts(), 1.3);
    }

    #[test]
    fn over_budget_and_over_cap_are_errors() {
        let ledger = PowerLedger::default();
        assert!(matches!(
            ledger.total_power(ActiveModules::OPERATING, Milliwatts(800)),
            Err(PowerError::HeaterOverCap { .. })
        ));
        let heavy = PowerLedger {
            apds: Milliwatts(900),
            ..ledger
        };
        assert!(matches!(
            heavy.total_power(ActiveModules::OPERATING, Milliwatts(700)),
            Err(PowerError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn worst_case_is_at_budget() {
        let ledger = PowerLedger::default();
        assert_eq!(ledger.worst_case(ActiveModules::IDLE), POWER_BUDGET);
        assert_eq!(ledger.worst_case(ActiveModules::OPERATING), POWER_BUDGET);
    }

    #[test]
    fn heater_examples() {
        assert_eq!(
            Heater::default().command(15.0, HeaterMode::Idle),
            Milliwatts(1700)
        );
        assert_eq!(
            Heater::default().command(25.0, HeaterMode::Operating),
            Milliwatts(0)
        );
        assert_eq!(
            Heater::default().command(15.0, HeaterMode::Operating),
            Milliwatts(700)
        );
    }

    #[test]
    fn heater_holds_inside_band() {
        let mut h = Heater::default();
        assert_eq!(h.command(21.0, HeaterMode::Idle), Milliwatts(0));
        h.command(19.0, HeaterMode::Idle);
        assert_eq!(h.command(21.5, HeaterMode::Idle), Milliwatts(1700));
        assert_eq!(h.command(22.5, HeaterMode::Idle), Milliwatts(0));
        assert_eq!(h.command(20.5, HeaterMode::Idle), Milliwatts(0));
    }

    #[test]
    fn equilibrium_is_unchanged() {
        let p = ThermalParams::default();
        let s = ThermalState {
            housing_temp_c: 12.0,
            heater_watts: 0.0,
        };
        assert_eq!(step_thermal(&p, s, 0.0, 12.0, 1.0), s);
    }

    #[test]
    fn heater_offset_at_steady_state() {
        let p = ThermalParams::default();
        assert_relative_eq!(p.steady_state(5.0, 0.7, 0.0) - 5.0, 14.0, epsilon = 1e-12);
        let mut s = ThermalState {
            housing_temp_c: 5.0,
            heater_watts: 0.7,
        };
        for _ in 0..200_000 {
            s = step_thermal(&p, s, 0.0, 5.0, 1.0);
        }
        assert_relative_eq!(s.housing_temp_c, 19.0, epsilon = 1e-9);
    }

    #[test]
    fn newton_cooling_without_heater() {
        let p = ThermalParams::default();
        let s = ThermalState {
            housing_temp_c: 30.0,
            heater_watts: 0.0,
        };
        assert!(step_thermal(&p, s, 0.0, 10.0, 0.05).housing_temp_c < 30.0);
    }

    proptest! {
        #[test]
        fn heater_switches_once_per_monotone_ramp(start in -20.0f64..10.0, end in 25.0f64..50.0, steps in 10usize..2000) {
            let mut h = Heater::default();
            let mut changes = 0;
            let mut last = h.command(start, HeaterMode::Idle);
            for i in 1..=steps {
                let t = start + (end - start) * i as f64 / steps as f64;
                let cmd = h.command(t, HeaterMode::Idle);
                if cmd != last {
                    changes += 1;
                }
                last = cmd;
            }
            prop_assert_eq!(changes, 1);
        }

        #[test]
        fn converges_to_fixed_point(t0 in -20.0f64..60.0, ext in -20.0f64..40.0, heater in 0.0f64..1.7) {
            let p = ThermalParams::default();
            let target = p.steady_state(ext, heater, 0.3);
            let mut s = ThermalState { housing_temp_c: t0, heater_watts: heater };
            let mut gap = (s.housing_temp_c - target).abs();
            for _ in 0..100 {
                s = step_thermal(&p, s, 0.3, ext, 10.0);
                let next = (s.housing_temp_c - target).abs();
                prop_assert!(next <= gap + 1e-12);
                gap = next;
            }
        }
    }
}
