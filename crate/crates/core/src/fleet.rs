//! Vehicles with virtually partitioned batteries and the cost-ordered
//! fleet pre-filter.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("vehicle {id}: {reason}")]
    InvalidVehicle { id: VehicleId, reason: String },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(VehicleId),
    #[error("failed to access fleet file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed fleet file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One physical battery split into a mobility partition and a grid-support
/// partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualBattery {
    pub total_capacity_kwh: f64,
    pub gss_fraction: f64,
    pub e_mob_kwh: f64,
    pub e_gss_kwh: f64,
}

impl VirtualBattery {
    pub fn gss_capacity_kwh(&self) -> f64 {
        self.gss_fraction * self.total_capacity_kwh
    }

    pub fn mob_capacity_kwh(&self) -> f64 {
        self.total_capacity_kwh - self.gss_capacity_kwh()
    }

    pub fn with_charges(mut self, e_mob_kwh: f64, e_gss_kwh: f64) -> Self {
        self.e_mob_kwh = e_mob_kwh;
        self.e_gss_kwh = e_gss_kwh;
        self
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.total_capacity_kwh > 0.0) {
            return Err("total capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gss_fraction) {
            return Err("GSS fraction must lie in [0, 1]".into());
        }
        let tol = 1e-9 * self.total_capacity_kwh;
        if !(self.e_mob_kwh >= 0.0 && self.e_mob_kwh <= self.mob_capacity_kwh() + tol) {
            return Err(format!(
                "mobility charge {} outside [0, {}]",
                self.e_mob_kwh,
                self.mob_capacity_kwh()
            ));
        }
        if !(self.e_gss_kwh >= 0.0 && self.e_gss_kwh <= self.gss_capacity_kwh() + tol) {
            return Err(format!(
                "GSS charge {} outside [0, {}]",
                self.e_gss_kwh,
                self.gss_capacity_kwh()
            ));
        }
        Ok(())
    }
}

/// An empty battery of `total_kwh` with `gss_fraction` reserved for grid support.
pub fn make_partition(total_kwh: f64, gss_fraction: f64) -> VirtualBattery {
    debug_assert!(total_kwh > 0.0 && (0.0..=1.0).contains(&gss_fraction));
    VirtualBattery {
        total_capacity_kwh: total_kwh,
        gss_fraction,
        e_mob_kwh: 0.0,
        e_gss_kwh: 0.0,
    }
}

/// Rolling-resistance and drag coefficients of the discharge model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    /// kW per km/h.
    pub eta1: f64,
    /// kW per (km/h)^2.
    pub eta2: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients {
            eta1: 0.076,
            eta2: 1.35e-4,
        }
    }
}

impl EnergyCoefficients {
    /// Traction power at constant speed (kW).
    pub fn power_kw(&self, speed_kmh: f64) -> f64 {
        self.eta1 * speed_kmh + self.eta2 * speed_kmh * speed_kmh
    }
}

/// Mobility energy after driving `dt_h` at constant `speed_kmh`. The result
/// may be negative; callers decide what depletion means.
pub fn discharge_step(e_mob_kwh: f64, speed_kmh: f64, dt_h: f64, coeffs: &EnergyCoefficients) -> f64 {
    e_mob_kwh - coeffs.power_kw(speed_kmh) * dt_h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caev {
    pub id: VehicleId,
    /// Last node reached.
    pub current_node: NodeId,
    pub battery: VirtualBattery,
    /// Normalized position along the assigned path.
    pub progress: f64,
    pub traveled_km: f64,
    /// Free of mobility tasks over the dispatch window.
    pub available: bool,
}

impl Caev {
    pub fn new(id: u32, node: NodeId, battery: VirtualBattery) -> Self {
        Caev {
            id: VehicleId(id),
            current_node: node,
            battery,
            progress: 0.0,
            traveled_km: 0.0,
            available: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetRecord {
    pub id: VehicleId,
    pub node: NodeId,
    pub total_capacity_kwh: f64,
    pub gss_fraction: f64,
    pub e_mob_kwh: f64,
    pub e_gss_kwh: f64,
}

impl From<&Caev> for FleetRecord {
    fn from(c: &Caev) -> Self {
        FleetRecord {
            id: c.id,
            node: c.current_node,
            total_capacity_kwh: c.battery.total_capacity_kwh,
            gss_fraction: c.battery.gss_fraction,
            e_mob_kwh: c.battery.e_mob_kwh,
            e_gss_kwh: c.battery.e_gss_kwh,
        }
    }
}

pub fn fleet_from_records(records: &[FleetRecord]) -> Result<Vec<Caev>, FleetError> {
    let mut seen = std::collections::BTreeSet::new();
    records
        .iter()
        .map(|r| {
            if !seen.insert(r.id) {
                return Err(FleetError::DuplicateVehicle(r.id));
            }
            let battery = make_partition_checked(r)?;
            Ok(Caev::new(r.id.0, r.node, battery))
        })
        .collect()
}

fn make_partition_checked(r: &FleetRecord) -> Result<VirtualBattery, FleetError> {
    let b = VirtualBattery {
        total_capacity_kwh: r.total_capacity_kwh,
        gss_fraction: r.gss_fraction,
        e_mob_kwh: r.e_mob_kwh,
        e_gss_kwh: r.e_gss_kwh,
    };
    b.check()
        .map_err(|reason| FleetError::InvalidVehicle { id: r.id, reason })?;
    Ok(b)
}

pub fn load_fleet(path: &Path) -> Result<Vec<Caev>, FleetError> {
    let text = fs::read_to_string(path).map_err(|source| FleetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let records: Vec<FleetRecord> = serde_json::from_str(&text)?;
    fleet_from_records(&records)
}

pub fn write_fleet(fleet: &[Caev], path: &Path) -> Result<(), FleetError> {
    let records: Vec<FleetRecord> = fleet.iter().map(FleetRecord::from).collect();
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(path, text).map_err(|source| FleetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A vehicle that passed the free-flow feasibility check, with its cost (h).
#[derive(Debug, Clone, PartialEq)]
pub struct FleetCandidate {
    pub vehicle: Caev,
    pub free_flow_cost_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSelection {
    pub selected: Vec<FleetCandidate>,
    /// Requested energy not covered by the selection (kWh); 0 when met.
    pub shortfall_kwh: f64,
}

impl FleetSelection {
    pub fn request_met(&self) -> bool {
        self.shortfall_kwh <= 0.0
    }

    pub fn gss_total_kwh(&self) -> f64 {
        self.selected.iter().map(|c| c.vehicle.battery.e_gss_kwh).sum()
    }
}

/// Smallest cost-ordered prefix of `candidates` whose GSS energy covers
/// `request_kwh`. Ties in cost are broken by ascending vehicle id. When the
/// whole list falls short, all of it is returned with the shortfall.
pub fn select_fleet(mut candidates: Vec<FleetCandidate>, request_kwh: f64) -> FleetSelection {
    candidates.sort_by(|a, b| {
        a.free_flow_cost_h
            .total_cmp(&b.free_flow_cost_h)
            .then(a.vehicle.id.cmp(&b.vehicle.id))
    });
    let mut total = 0.0;
    let mut take = 0;
    while total < request_kwh && take < candidates.len() {
        total += candidates[take].vehicle.battery.e_gss_kwh;
        take += 1;
    }
    candidates.truncate(take);
    FleetSelection {
        selected: candidates,
        shortfall_kwh: (request_kwh - total).max(0.0),
    }
}
