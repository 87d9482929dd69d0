//! Scenario configuration, seeded fleet initialization, the multi-rate
//! simulation loop and output files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    prefilter_fleet, run_dispatch, DispatchConfig, DispatchRun, DispatchSettings, TargetFailure,
    TrackStatus, TrafficFeed,
};
use crate::fleet::{load_fleet, make_partition, Caev, EnergyCoefficients, FleetError, VehicleId};
use crate::mpc::{write_mpc_trace_csv, MpcController, MpcSettings, MpcTraceRow};
use crate::network::{
    compute_turning_rates, load_graph_with, DistrictId, GraphError, GraphOptions, LinkId, NodeId,
    SignalTiming, TurningRateMap, UrbanGraph,
};
use crate::traffic::{
    step, write_flow_csv, write_flow_csv_header, BoundaryInflow, TrafficState,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dispatch request settings; the planning period lives at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchSection {
    pub t_disp_h: f64,
    pub t_pr_h: f64,
    pub t_pr_horizon_h: f64,
    pub request_kwh: f64,
    pub district: DistrictId,
    pub replan_on_node_arrival: bool,
}

impl Default for DispatchSection {
    fn default() -> Self {
        let d = DispatchConfig::default();
        DispatchSection {
            t_disp_h: d.t_disp_h,
            t_pr_h: d.t_pr_h,
            t_pr_horizon_h: d.t_pr_horizon_h,
            request_kwh: d.request_kwh,
            district: d.district,
            replan_on_node_arrival: d.replan_on_node_arrival,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetInit {
    pub n_vehicles: usize,
    pub total_capacity_kwh: f64,
    pub gss_capacity_kwh: f64,
    /// Fractions of the mobility partition's capacity.
    pub e_mob_range_fraction: [f64; 2],
    /// Fractions of the GSS partition's capacity.
    pub e_gss_range_fraction: [f64; 2],
    pub rng_seed: u64,
}

impl Default for FleetInit {
    fn default() -> Self {
        FleetInit {
            n_vehicles: 20,
            total_capacity_kwh: 82.0,
            gss_capacity_kwh: 20.0,
            e_mob_range_fraction: [0.15, 0.60],
            e_gss_range_fraction: [0.25, 0.95],
            rng_seed: 1,
        }
    }
}

/// Sets the listed links to a fraction of their capacity at `at_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionPulse {
    pub at_h: f64,
    pub links: Vec<[u32; 2]>,
    pub occupancy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub sim_horizon_h: f64,
    pub traffic_dt_h: f64,
    pub plan_period_h: f64,
    pub mpc_dt_h: f64,
    pub dispatch: DispatchSection,
    pub boundary_inflow_vph: f64,
    pub saturation_flow_vph: f64,
    pub initial_occupancy_fraction: f64,
    pub spacing_km: f64,
    pub energy_rate_kwh_per_km: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// Discharge model assumed by the speed controller, when it differs
    /// from the vehicles' actual one.
    pub mpc_coefficients: Option<EnergyCoefficients>,
    pub energy_floor_kwh: f64,
    pub turning_smoothing_km: f64,
    pub signal_timing: SignalTiming,
    pub fleet_init: FleetInit,
    pub congestion_pulses: Vec<CongestionPulse>,
    /// Adds wall-clock solve times to the controller traces. Makes those
    /// files differ between otherwise identical runs.
    pub record_solve_times: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let coeffs = EnergyCoefficients::default();
        ScenarioConfig {
            sim_horizon_h: 1.0,
            traffic_dt_h: 0.00027,
            plan_period_h: 180.0 / 3600.0,
            mpc_dt_h: 18.0 / 3600.0,
            dispatch: DispatchSection::default(),
            boundary_inflow_vph: 1500.0,
            saturation_flow_vph: 1500.0,
            initial_occupancy_fraction: 0.5,
            spacing_km: 0.007,
            energy_rate_kwh_per_km: 0.12,
            eta1: coeffs.eta1,
            eta2: coeffs.eta2,
            mpc_coefficients: None,
            energy_floor_kwh: 0.0,
            turning_smoothing_km: 0.1,
            signal_timing: SignalTiming::default(),
            fleet_init: FleetInit::default(),
            congestion_pulses: Vec::new(),
            record_solve_times: false,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| ScenarioError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn dispatch_config(&self) -> DispatchConfig {
        let d = &self.dispatch;
        DispatchConfig {
            t_disp_h: d.t_disp_h,
            t_pr_h: d.t_pr_h,
            t_pr_horizon_h: d.t_pr_horizon_h,
            plan_period_h: self.plan_period_h,
            request_kwh: d.request_kwh,
            district: d.district,
            replan_on_node_arrival: d.replan_on_node_arrival,
        }
    }

    pub fn plant_coefficients(&self) -> EnergyCoefficients {
        EnergyCoefficients {
            eta1: self.eta1,
            eta2: self.eta2,
        }
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            spacing_km: self.spacing_km,
            energy_rate_kwh_per_km: self.energy_rate_kwh_per_km,
            saturation_flow_vph: self.saturation_flow_vph,
            signal_timing: self.signal_timing,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |s: String| Err(ScenarioError::Config(s));
        let dispatch = self.dispatch_config();
        dispatch
            .validate()
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        if !(self.traffic_dt_h > 0.0
            && self.traffic_dt_h < self.mpc_dt_h
            && self.mpc_dt_h < self.plan_period_h
            && self.plan_period_h < dispatch.window_h())
        {
            return bad(format!(
                "periods must satisfy 0 < traffic {} < control {} < planning {} < window {} (h)",
                self.traffic_dt_h,
                self.mpc_dt_h,
                self.plan_period_h,
                dispatch.window_h()
            ));
        }
        if self.sim_horizon_h < dispatch.t_pr_h {
            return bad(format!(
                "horizon {} h ends before the deadline {} h",
                self.sim_horizon_h, dispatch.t_pr_h
            ));
        }
        if !(0.0..=1.0).contains(&self.initial_occupancy_fraction) {
            return bad("initial occupancy must lie in [0, 1]".into());
        }
        if !(self.boundary_inflow_vph >= 0.0 && self.saturation_flow_vph > 0.0) {
            return bad("flows must be non-negative, saturation flow positive".into());
        }
        if !(self.eta1 >= 0.0 && self.eta2 > 0.0) {
            return bad("discharge coefficients must be non-negative (eta2 positive)".into());
        }
        let f = &self.fleet_init;
        for (name, [lo, hi]) in [
            ("e_mob_range_fraction", f.e_mob_range_fraction),
            ("e_gss_range_fraction", f.e_gss_range_fraction),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must be an ordered range within [0, 1]"));
            }
        }
        if !(f.gss_capacity_kwh >= 0.0 && f.gss_capacity_kwh <= f.total_capacity_kwh) {
            return bad("GSS capacity must lie within the total capacity".into());
        }
        for p in &self.congestion_pulses {
            if !(0.0..=1.0).contains(&p.occupancy_fraction) || p.at_h < 0.0 {
                return bad(format!("invalid congestion pulse at {} h", p.at_h));
            }
        }
        Ok(())
    }

    /// Checks the config against a graph: district and pulse links.
    pub fn validate_with_graph(&self, graph: &UrbanGraph) -> Result<(), ScenarioError> {
        self.validate()?;
        if graph.district_v2g(self.dispatch.district).is_empty() {
            return Err(ScenarioError::Config(format!(
                "district {} has no V2G node",
                self.dispatch.district.0
            )));
        }
        for p in &self.congestion_pulses {
            resolve_links(graph, &p.links)?;
        }
        Ok(())
    }
}

fn resolve_links(graph: &UrbanGraph, pairs: &[[u32; 2]]) -> Result<Vec<LinkId>, ScenarioError> {
    pairs
        .iter()
        .map(|&[a, b]| {
            graph
                .find_link(NodeId(a), NodeId(b))
                .ok_or_else(|| ScenarioError::Config(format!("no link {a} -> {b}")))
        })
        .collect()
}

fn non_terminal_nodes(graph: &UrbanGraph) -> Vec<NodeId> {
    graph
        .nodes()
        .iter()
        .filter(|n| !n.is_terminal)
        .map(|n| n.id)
        .collect()
}

/// Seeded fleet: distinct non-terminal start nodes, charges drawn uniformly
/// from the configured fractions of each partition.
pub fn init_fleet(init: &FleetInit, graph: &UrbanGraph) -> Result<Vec<Caev>, ScenarioError> {
    let spots = non_terminal_nodes(graph);
    if init.n_vehicles > spots.len() {
        return Err(ScenarioError::Config(format!(
            "{} vehicles do not fit on {} non-terminal nodes",
            init.n_vehicles,
            spots.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init.rng_seed);
    let alpha = if init.total_capacity_kwh > 0.0 {
        init.gss_capacity_kwh / init.total_capacity_kwh
    } else {
        0.0
    };
    let partition = make_partition(init.total_capacity_kwh, alpha);
    let mut draw = |[lo, hi]: [f64; 2], cap: f64| {
        if lo == hi {
            lo * cap
        } else {
            rng.gen_range(lo..=hi) * cap
        }
    };
    let mut charges = Vec::with_capacity(init.n_vehicles);
    for _ in 0..init.n_vehicles {
        let e_mob = draw(init.e_mob_range_fraction, partition.mob_capacity_kwh());
        let e_gss = draw(init.e_gss_range_fraction, partition.gss_capacity_kwh());
        charges.push((e_mob, e_gss));
    }
    let picks = sample(&mut rng, spots.len(), init.n_vehicles);
    Ok(picks
        .iter()
        .zip(charges)
        .enumerate()
        .map(|(i, (ix, (e_mob, e_gss)))| {
            Caev::new(i as u32 + 1, spots[ix], partition.with_charges(e_mob, e_gss))
        })
        .collect())
}

/// Store-and-forward simulation driven as a [`TrafficFeed`], with scripted
/// congestion pulses and optional per-step flow dump.
pub struct TrafficSim<'a> {
    graph: &'a UrbanGraph,
    rates: TurningRateMap,
    inflow: BoundaryInflow,
    state: TrafficState,
    pulses: Vec<(f64, Vec<LinkId>, f64)>,
    next_pulse: usize,
    flow_out: Option<Box<dyn Write + 'a>>,
    flow_error: Option<io::Error>,
}

impl<'a> TrafficSim<'a> {
    pub fn new(
        graph: &'a UrbanGraph,
        config: &ScenarioConfig,
        flow_out: Option<Box<dyn Write + 'a>>,
    ) -> Result<Self, ScenarioError> {
        let mut pulses = config
            .congestion_pulses
            .iter()
            .map(|p| Ok((p.at_h, resolve_links(graph, &p.links)?, p.occupancy_fraction)))
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        pulses.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut sim = TrafficSim {
            graph,
            rates: compute_turning_rates(graph, config.turning_smoothing_km),
            inflow: BoundaryInflow::from_sources(graph, config.boundary_inflow_vph),
            state: TrafficState::uniform_occupancy(
                graph,
                config.initial_occupancy_fraction,
                config.traffic_dt_h,
            ),
            pulses,
            next_pulse: 0,
            flow_out,
            flow_error: None,
        };
        if let Some(w) = sim.flow_out.as_mut() {
            write_flow_csv_header(w).map_err(|e| ScenarioError::Config(e.to_string()))?;
        }
        sim.apply_pulses();
        Ok(sim)
    }

    pub fn state(&self) -> &TrafficState {
        &self.state
    }

    fn apply_pulses(&mut self) {
        let now = self.state.time_h();
        while let Some((at, links, frac)) = self.pulses.get(self.next_pulse) {
            if *at > now + 1e-12 {
                break;
            }
            for l in links {
                self.state.x[l.0] = frac * self.graph.link(*l).capacity_veh;
            }
            info!("t={now:.4} h: congestion pulse on {} link(s)", links.len());
            self.next_pulse += 1;
        }
    }

    /// Error from the flow dump, if writing it failed.
    pub fn take_flow_error(&mut self) -> Option<io::Error> {
        self.flow_error.take()
    }

    pub fn finish(mut self) -> Result<TrafficState, io::Error> {
        if let Some(e) = self.flow_error.take() {
            return Err(e);
        }
        if let Some(w) = self.flow_out.as_mut() {
            w.flush()?;
        }
        Ok(self.state)
    }
}

impl TrafficFeed for TrafficSim<'_> {
    fn advance_to(&mut self, t_h: f64) -> &TrafficState {
        let dt = self.state.sample_time_h;
        while (self.state.k + 1) as f64 * dt <= t_h + 1e-12 {
            let (next, flows) = step(&self.state, self.graph, &self.rates, &self.inflow);
            if let (Some(w), None) = (self.flow_out.as_mut(), &self.flow_error) {
                if let Err(e) = write_flow_csv(w, self.graph, &self.state, &flows) {
                    self.flow_error = Some(e);
                }
            }
            self.state = next;
            self.apply_pulses();
        }
        &self.state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub id: VehicleId,
    pub start_node: NodeId,
    pub status: TrackStatus,
    pub target: Option<NodeId>,
    pub arrival_time_h: Option<f64>,
    pub path_changes: u32,
    pub final_e_mob_kwh: f64,
    pub e_gss_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedVehicle {
    pub id: VehicleId,
    pub failures: Vec<TargetFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub request_kwh: f64,
    pub delivered_kwh: f64,
    pub request_met: bool,
    pub max_arrival_time_h: Option<f64>,
    pub fleet_size: usize,
    /// GSS energy of the selected vehicles (kWh).
    pub selected_gss_kwh: f64,
    pub selection_shortfall_kwh: f64,
    pub rejected: Vec<RejectedVehicle>,
    pub vehicles: Vec<VehicleMetrics>,
    pub plan_ticks: usize,
    pub traffic_steps: u64,
    pub traffic_clamped: u64,
    pub traffic_total_end_veh: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub metrics: RunMetrics,
    pub dispatch: DispatchRun,
    pub mpc_traces: BTreeMap<VehicleId, Vec<MpcTraceRow>>,
    pub link_ends: Vec<(NodeId, NodeId)>,
}

/// Runs a scenario on a loaded graph. Without an explicit fleet one is drawn
/// from `config.fleet_init`. `flow_out` receives the per-step flow CSV.
pub fn run_scenario<'a>(
    config: &ScenarioConfig,
    graph: &'a UrbanGraph,
    fleet: Option<Vec<Caev>>,
    flow_out: Option<Box<dyn Write + 'a>>,
) -> Result<ScenarioRun, ScenarioError> {
    config.validate_with_graph(graph)?;
    let timing = graph.signal_timing();
    if config.traffic_dt_h <= timing.cycle_time_h {
        warn!(
            "traffic step {} h does not exceed the signal cycle {} h; signalized outflow is applied as a cycle average",
            config.traffic_dt_h, timing.cycle_time_h
        );
    }
    let fleet = match fleet {
        Some(f) => f,
        None => init_fleet(&config.fleet_init, graph)?,
    };
    let dispatch = config.dispatch_config();
    let fleet_size = fleet.len();
    let (selection, rejected) = prefilter_fleet(graph, &fleet, &dispatch);
    if !selection.request_met() {
        warn!(
            "selected fleet falls {:.2} kWh short of the request",
            selection.shortfall_kwh
        );
    }
    let selected_gss_kwh = selection.gss_total_kwh();
    let selection_shortfall_kwh = selection.shortfall_kwh;

    let mut sim = TrafficSim::new(graph, config, flow_out)?;
    sim.advance_to(dispatch.t_disp_h);
    let settings = DispatchSettings {
        control_period_h: config.mpc_dt_h,
        coeffs: config.plant_coefficients(),
    };
    let mut controller = MpcController::new(MpcSettings {
        coeffs: config
            .mpc_coefficients
            .unwrap_or_else(|| config.plant_coefficients()),
        energy_floor_kwh: config.energy_floor_kwh,
    });
    controller.record_solve_times = config.record_solve_times;

    let run = run_dispatch(
        &dispatch,
        &settings,
        graph,
        selection.selected.into_iter().map(|c| c.vehicle).collect(),
        &mut sim,
        &mut controller,
    );
    // Background traffic keeps evolving to the end of the horizon.
    sim.advance_to(config.sim_horizon_h);
    let final_state = sim.finish().map_err(|source| ScenarioError::Io {
        path: PathBuf::from("<flow output>"),
        source,
    })?;

    let vehicles: Vec<VehicleMetrics> = run
        .tracks
        .iter()
        .map(|t| VehicleMetrics {
            id: t.caev.id,
            start_node: fleet
                .iter()
                .find(|c| c.id == t.caev.id)
                .map_or(t.caev.current_node, |c| c.current_node),
            status: t.status,
            target: t.route.as_ref().map(|r| r.target),
            arrival_time_h: t.arrival_time_h,
            path_changes: t.path_changes,
            final_e_mob_kwh: t.caev.battery.e_mob_kwh,
            e_gss_kwh: t.caev.battery.e_gss_kwh,
        })
        .collect();
    let metrics = RunMetrics {
        request_kwh: dispatch.request_kwh,
        delivered_kwh: run.delivered_kwh,
        request_met: run.request_met(),
        max_arrival_time_h: vehicles
            .iter()
            .filter_map(|v| v.arrival_time_h)
            .max_by(f64::total_cmp),
        fleet_size,
        selected_gss_kwh,
        selection_shortfall_kwh,
        rejected: rejected
            .into_iter()
            .map(|(id, failures)| RejectedVehicle { id, failures })
            .collect(),
        vehicles,
        plan_ticks: run.plan_times.len(),
        traffic_steps: final_state.k,
        traffic_clamped: final_state.clamped,
        traffic_total_end_veh: final_state.total(),
    };
    Ok(ScenarioRun {
        metrics,
        dispatch: run,
        mpc_traces: controller.traces,
        link_ends: graph.links().iter().map(|l| (l.from, l.to)).collect(),
    })
}

/// Loads the graph (and fleet, if given), runs the scenario and writes every
/// output file to `out_dir`.
pub fn run(
    config: &ScenarioConfig,
    graph_path: &Path,
    fleet_path: Option<&Path>,
    out_dir: &Path,
    write_flows: bool,
) -> Result<RunMetrics, ScenarioError> {
    let graph = load_graph_with(graph_path, &config.graph_options())?;
    let fleet = fleet_path.map(load_fleet).transpose()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let flow_out: Option<Box<dyn Write>> = if write_flows {
        let path = out_dir.join("flows.csv");
        let file = File::create(&path).map_err(io_err(&path))?;
        Some(Box::new(BufWriter::new(file)))
    } else {
        None
    };
    let run = run_scenario(config, &graph, fleet, flow_out)?;
    emit_outputs(&run, out_dir)?;
    Ok(run.metrics)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn series_csv(header: &str, samples: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (t, v) in samples {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

/// One occupancy snapshot as CSV rows `from,to,x`.
pub fn occupancy_csv(link_ends: &[(NodeId, NodeId)], x: &[f64]) -> String {
    let mut s = String::from("from,to,x\n");
    for ((from, to), x) in link_ends.iter().zip(x) {
        s.push_str(&format!("{from},{to},{x}\n"));
    }
    s
}

/// Writes `metrics.json`, `dispatch_log.jsonl`, per-vehicle `speed_v*.csv`,
/// `distance_v*.csv` and `mpc_v*.csv`, and `occupancy_tick*.csv` per
/// planning tick.
pub fn emit_outputs(run: &ScenarioRun, out_dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics = serde_json::to_string_pretty(&run.metrics).expect("metrics serialize");
    write_file(&out_dir.join("metrics.json"), metrics.as_bytes())?;
    write_file(
        &out_dir.join("dispatch_log.jsonl"),
        run.dispatch.log.to_jsonl().as_bytes(),
    )?;
    for s in &run.dispatch.speed_series {
        let path = out_dir.join(format!("speed_v{}.csv", s.vehicle));
        write_file(&path, series_csv("t_h,speed_kmh", &s.samples).as_bytes())?;
    }
    for s in &run.dispatch.distance_series {
        let path = out_dir.join(format!("distance_v{}.csv", s.vehicle));
        write_file(&path, series_csv("t_h,distance_km", &s.samples).as_bytes())?;
    }
    for (vehicle, rows) in &run.mpc_traces {
        let path = out_dir.join(format!("mpc_v{vehicle}.csv"));
        let mut buf = Vec::new();
        write_mpc_trace_csv(&mut buf, rows).map_err(io_err(&path))?;
        write_file(&path, &buf)?;
    }
    for (i, snap) in run.dispatch.snapshots.iter().enumerate() {
        let path = out_dir.join(format!("occupancy_tick{i}.csv"));
        let mut body = format!("# t_h={}\n", snap.t_h);
        body.push_str(&occupancy_csv(&run.link_ends, &snap.x));
        write_file(&path, body.as_bytes())?;
    }
    Ok(())
}

/// First seed in `base, base + 1, ...` (at most `tries`) whose drawn fleet
/// passes the free-flow filter with enough GSS energy for the request.
pub fn feasible_fleet_seed(
    config: &ScenarioConfig,
    graph: &UrbanGraph,
    base: u64,
    tries: u64,
) -> Option<u64> {
    (0..tries).map(|i| base.wrapping_add(i)).find(|&seed| {
        let init = FleetInit {
            rng_seed: seed,
            ..config.fleet_init
        };
        init_fleet(&init, graph).is_ok_and(|fleet| {
            prefilter_fleet(graph, &fleet, &config.dispatch_config())
                .0
                .request_met()
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{gen_city, CitySpec};
    use crate::network::{GraphBuilder, Node};

    fn city() -> UrbanGraph {
        gen_city(&CitySpec::new(100, 4, 3), &GraphOptions::default()).unwrap()
    }

    #[test]
    fn defaults_validate() {
        assert!(ScenarioConfig::default().validate().is_ok());
        let text = serde_json::to_string(&ScenarioConfig::default()).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ScenarioConfig::default());
        let partial: ScenarioConfig = serde_json::from_str(r#"{"dispatch":{"request_kwh":50}}"#).unwrap();
        assert_eq!(partial.dispatch.request_kwh, 50.0);
        assert_eq!(partial.dispatch.t_pr_h, ScenarioConfig::default().dispatch.t_pr_h);
    }

    #[test]
    fn planning_period_beyond_window_is_rejected() {
        let c = ScenarioConfig {
            plan_period_h: 0.2,
            ..ScenarioConfig::default()
        };
        assert!(matches!(c.validate(), Err(ScenarioError::Config(_))));
        let c = ScenarioConfig {
            mpc_dt_h: 0.0001,
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            sim_horizon_h: 0.1,
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fleet_charges_follow_ranges() {
        let g = city();
        let fleet = init_fleet(&FleetInit::default(), &g).unwrap();
        assert_eq!(fleet.len(), 20);
        for c in &fleet {
            assert!((9.3 - 1e-9..=37.2 + 1e-9).contains(&c.battery.e_mob_kwh));
            assert!((5.0 - 1e-9..=19.0 + 1e-9).contains(&c.battery.e_gss_kwh));
            assert!(!g.node(c.current_node).unwrap().is_terminal);
        }
        let mut nodes: Vec<_> = fleet.iter().map(|c| c.current_node).collect();
        nodes.sort();
        nodes.dedup();
        assert_eq!(nodes.len(), 20);
        assert_eq!(init_fleet(&FleetInit::default(), &g).unwrap(), fleet);
    }

    #[test]
    fn degenerate_ranges_give_half_capacity() {
        let g = city();
        let init = FleetInit {
            e_mob_range_fraction: [0.5, 0.5],
            e_gss_range_fraction: [0.5, 0.5],
            ..FleetInit::default()
        };
        for c in init_fleet(&init, &g).unwrap() {
            assert_eq!(c.battery.e_mob_kwh, 31.0);
            assert_eq!(c.battery.e_gss_kwh, 10.0);
        }
    }

    #[test]
    fn too_many_vehicles_is_an_error() {
        let g = city();
        let init = FleetInit {
            n_vehicles: 101,
            ..FleetInit::default()
        };
        assert!(init_fleet(&init, &g).is_err());
    }

    fn toy_city() -> UrbanGraph {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0)).node(Node::plain(1)).node(Node {
            is_v2g: true,
            district: Some(DistrictId(1)),
            ..Node::plain(2)
        });
        b.two_way(0, 1, 0.3, 30.0).two_way(1, 2, 0.3, 30.0);
        b.build(&GraphOptions::default()).unwrap()
    }

    #[test]
    fn toy_city_run_meets_request() {
        let g = toy_city();
        let partition = make_partition(82.0, 20.0 / 82.0);
        let fleet = vec![
            Caev::new(1, NodeId(0), partition.with_charges(20.0, 10.0)),
            Caev::new(2, NodeId(1), partition.with_charges(20.0, 10.0)),
        ];
        let config = ScenarioConfig {
            initial_occupancy_fraction: 0.0,
            dispatch: DispatchSection {
                request_kwh: 20.0,
                ..DispatchSection::default()
            },
            ..ScenarioConfig::default()
        };
        let run = run_scenario(&config, &g, Some(fleet), None).unwrap();
        assert!(run.metrics.request_met);
        assert_eq!(run.metrics.delivered_kwh, 20.0);
        assert!(run.metrics.vehicles.iter().all(|v| v.arrival_time_h.unwrap() <= config.dispatch.t_pr_h));
        assert_eq!(run.metrics.traffic_clamped, 0);
    }

    #[test]
    fn empty_fleet_run() {
        let g = toy_city();
        let run = run_scenario(&ScenarioConfig::default(), &g, Some(Vec::new()), None).unwrap();
        assert_eq!(run.metrics.delivered_kwh, 0.0);
        assert!(!run.metrics.request_met);
        assert_eq!(run.dispatch.snapshots.len(), 4);
    }
}
