//! Physical node model: battery and hot-water-tank dynamics, nodal energy
//! balance, stage cost and the terminal tank penalty.
//!
//! Unit convention, fixed once for the whole crate: controls are powers
//! (kW), stocks and demands are energies (kWh), `dt` is the step length in
//! hours. Node flows `f` and edge flows `q` are powers. Dynamics are never
//! clamped; infeasible controls are screened out by the DP layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    /// Auto-discharge factor per step, in (0, 1].
    pub auto_discharge: f64,
    /// Charge yield rho_c, in (0, 1].
    pub charge_yield: f64,
    /// Discharge yield rho_d, in (0, 1].
    pub discharge_yield: f64,
    pub level_min: f64,
    pub level_max: f64,
    /// Signed power bounds: charging positive, discharging negative.
    pub power_min: f64,
    pub power_max: f64,
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.charge_yield > 0.0 && self.charge_yield <= 1.0) {
            return Err(Error::InvalidParameter("battery charge yield not in (0,1]".into()));
        }
        if !(self.discharge_yield > 0.0 && self.discharge_yield <= 1.0) {
            return Err(Error::InvalidParameter("battery discharge yield not in (0,1]".into()));
        }
        if !(self.auto_discharge > 0.0 && self.auto_discharge <= 1.0) {
            return Err(Error::InvalidParameter("battery auto-discharge not in (0,1]".into()));
        }
        if !(self.level_min >= 0.0 && self.level_min < self.level_max) {
            return Err(Error::InvalidParameter("battery capacity bounds invalid".into()));
        }
        if !(self.power_min < 0.0 && self.power_max > 0.0) {
            return Err(Error::InvalidParameter(
                "battery power bounds must straddle 0 (signed charge/discharge)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankParams {
    /// Conduction-loss factor per step, in (0, 1].
    pub conduction_loss: f64,
    /// Heating conversion coefficient, > 0.
    pub conversion: f64,
    pub level_min: f64,
    pub level_max: f64,
    /// Heating power bound, >= 0.
    pub heat_power_max: f64,
    /// Terminal reference level; levels below it are penalised.
    pub level_ref: f64,
    /// Terminal penalty rate per unit of missing energy, >= 0.
    pub penalty_rate: f64,
}

impl TankParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.conduction_loss > 0.0 && self.conduction_loss <= 1.0) {
            return Err(Error::InvalidParameter("tank conduction loss not in (0,1]".into()));
        }
        if !(self.conversion > 0.0) {
            return Err(Error::InvalidParameter("tank conversion must be > 0".into()));
        }
        if !(0.0 <= self.level_min && self.level_min <= self.level_ref && self.level_ref <= self.level_max)
        {
            return Err(Error::InvalidParameter(
                "tank levels must satisfy 0 <= min <= ref <= max".into(),
            ));
        }
        if self.heat_power_max < 0.0 {
            return Err(Error::InvalidParameter("tank heating power bound must be >= 0".into()));
        }
        if self.penalty_rate < 0.0 {
            return Err(Error::InvalidParameter("tank penalty rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-building model. State is `[battery, tank]` when a battery is present,
/// `[tank]` otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeModel {
    pub battery: Option<BatteryParams>,
    pub tank: TankParams,
    /// External grid import bound, >= 0.
    pub import_max: f64,
    /// Hours per time step.
    pub dt: f64,
    /// Import price per kWh, one entry per stage.
    pub import_price: Vec<f64>,
}

impl NodeModel {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if let Some(b) = &self.battery {
            b.validate()?;
        }
        self.tank.validate()?;
        if self.import_max < 0.0 {
            return Err(Error::InvalidParameter("import bound must be >= 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        if self.import_price.len() != horizon {
            return Err(Error::DimensionMismatch {
                expected: horizon,
                got: self.import_price.len(),
                context: "import price vector".into(),
            });
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        if self.battery.is_some() { 2 } else { 1 }
    }

    /// Index of the tank component in the state vector.
    pub fn tank_index(&self) -> usize {
        self.state_dim() - 1
    }

    pub fn state_in_bounds(&self, x: &[f64]) -> bool {
        let eps = 1e-9;
        if let Some(b) = &self.battery {
            if x[0] < b.level_min - eps || x[0] > b.level_max + eps {
                return false;
            }
        }
        let h = x[self.tank_index()];
        h >= self.tank.level_min - eps && h <= self.tank.level_max + eps
    }
}

/// One noise realisation at a node: hot-water demand (energy per step, >= 0)
/// and residual electricity demand (energy per step, may be negative when
/// solar production is aggregated in).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeNoise {
    pub hot_water: f64,
    pub electricity: f64,
}

/// Battery level after one step under charging/discharging power `u_b`.
pub fn battery_step(params: &BatteryParams, level: f64, u_b: f64, dt: f64) -> f64 {
    let charge = u_b.max(0.0);
    let discharge = (-u_b).max(0.0);
    params.auto_discharge * level
        + dt * (params.charge_yield * charge - discharge / params.discharge_yield)
}

/// Tank level after one step under heating power `u_t` and hot-water
/// demand `d_hw` (an energy over the step).
pub fn tank_step(params: &TankParams, level: f64, u_t: f64, d_hw: f64, dt: f64) -> f64 {
    params.conduction_loss * level + dt * params.conversion * u_t - d_hw
}

/// Nodal balance: injection into the network, as a power. Positive means
/// the node feeds the network.
pub fn node_balance(u_ne: f64, d_el: f64, u_b: f64, u_t: f64, dt: f64) -> f64 {
    u_ne - d_el / dt - u_b - u_t
}

/// Import cost over one step.
pub fn stage_cost(p_el_t: f64, u_ne: f64, dt: f64) -> f64 {
    p_el_t * u_ne * dt
}

/// Linear hinge penalty on the terminal tank level; the battery component
/// (if any) is unpenalised.
pub fn terminal_cost(params: &TankParams, x_terminal: &[f64]) -> f64 {
    let h = x_terminal[x_terminal.len() - 1];
    params.penalty_rate * (params.level_ref - h).max(0.0)
}
