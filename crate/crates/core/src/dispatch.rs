//! Periodic traffic-aware re-planning of the dispatched fleet.
//!
//! Every planning period the dispatcher rebuilds link travel times from the
//! live traffic state, solves a resource-constrained shortest path from each
//! vehicle to every V2G node of the district and keeps the cheapest one.
//! Between planning ticks the vehicles follow their latest route at the
//! speed chosen by a [`SpeedControl`] at every control tick.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{Caev, EnergyCoefficients, FleetCandidate, FleetSelection, VehicleId};
use crate::fleet::{discharge_step, select_fleet};
use crate::mpc::MpcMeasurement;
use crate::network::{DistrictId, LinkId, NodeId, UrbanGraph};
use crate::rcsp::{select_target, Budgets, EdgeWeights, Infeasibility, PathSolution};
use crate::traffic::{max_speed, TrafficState};

/// Two clock instants closer than this (h) are the same tick.
pub const TICK_TOLERANCE_H: f64 = 1e-9;
/// Positions closer than this (km) to a node are at the node.
const NODE_TOLERANCE_KM: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchConfig {
    /// Instant the request is issued (h).
    pub t_disp_h: f64,
    /// Deadline by which vehicles must be parked (h).
    pub t_pr_h: f64,
    /// Length of the service window that follows the deadline (h).
    pub t_pr_horizon_h: f64,
    pub plan_period_h: f64,
    pub request_kwh: f64,
    pub district: DistrictId,
    /// Also re-plan a vehicle whenever it reaches a node.
    #[serde(default)]
    pub replan_on_node_arrival: bool,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            t_disp_h: 0.0,
            t_pr_h: 10.0 / 60.0,
            t_pr_horizon_h: 0.25,
            plan_period_h: 180.0 / 3600.0,
            request_kwh: 200.0,
            district: DistrictId(1),
            replan_on_node_arrival: false,
        }
    }
}

impl DispatchConfig {
    pub fn window_h(&self) -> f64 {
        self.t_pr_h - self.t_disp_h
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Invalid(s));
        if !(self.t_disp_h < self.t_pr_h) {
            return bad(format!(
                "dispatch start {} h must precede the deadline {} h",
                self.t_disp_h, self.t_pr_h
            ));
        }
        if !(self.plan_period_h > 0.0 && self.plan_period_h < self.window_h()) {
            return bad(format!(
                "planning period {} h must lie in (0, {}) h",
                self.plan_period_h,
                self.window_h()
            ));
        }
        if !(self.request_kwh >= 0.0) {
            return bad("energy request must be non-negative".into());
        }
        if !(self.t_pr_horizon_h >= 0.0) {
            return bad("service window must be non-negative".into());
        }
        Ok(())
    }

    /// Planning instants `t_disp + i T_plan` strictly before the deadline.
    pub fn plan_times(&self) -> Vec<f64> {
        let count = (self.window_h() / self.plan_period_h - TICK_TOLERANCE_H).ceil() as usize;
        (0..count.max(1))
            .map(|i| self.t_disp_h + i as f64 * self.plan_period_h)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    EnRoute,
    Arrived,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFailure {
    pub target: NodeId,
    pub reason: Infeasibility,
}

/// Where a vehicle stands at a planning tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    pub vehicle: VehicleId,
    /// Planning node: the vehicle's node, or the head of its current link.
    pub node: NodeId,
    /// Link the vehicle is still finishing, if it is mid-link.
    pub current_link: Option<LinkId>,
    pub e_mob_kwh: f64,
    pub e_gss_kwh: f64,
    pub arrived: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub vehicle: VehicleId,
    pub origin: NodeId,
    pub target: Option<NodeId>,
    pub path: PathSolution,
    pub planned_at_h: f64,
    /// Speed limit of the vehicle's current (or first) link at planning time.
    pub speed_cap_kmh: f64,
    pub time_budget_h: f64,
    pub energy_budget_kwh: f64,
    pub status: PlanStatus,
    pub failures: Vec<TargetFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    /// One plan per non-arrived request, in request order.
    pub plans: Vec<DispatchPlan>,
    /// GSS energy of arrived and still-feasible vehicles (kWh).
    pub projected_delivery_kwh: f64,
}

/// One planning tick over the given vehicles.
pub fn plan_tick(
    t_k: f64,
    requests: &[PlanRequest],
    traffic: &TrafficState,
    graph: &UrbanGraph,
    config: &DispatchConfig,
) -> TickOutcome {
    let weights = EdgeWeights::from_traffic(graph, &traffic.x);
    plan_with_weights(t_k, requests, &traffic.x, &weights, graph, config)
}

fn plan_with_weights(
    t_k: f64,
    requests: &[PlanRequest],
    x: &[f64],
    weights: &EdgeWeights,
    graph: &UrbanGraph,
    config: &DispatchConfig,
) -> TickOutcome {
    let candidates = graph.district_v2g(config.district);
    let time_budget_h = config.window_h() - (t_k - config.t_disp_h);

    let plans: Vec<DispatchPlan> = requests
        .par_iter()
        .filter(|r| !r.arrived)
        .map(|r| {
            let budgets = Budgets::new(time_budget_h, r.e_mob_kwh.max(0.0));
            let cap_of = |l: LinkId| max_speed(graph.link(l), x[l.0]);
            match select_target(graph, weights, r.node, &candidates, budgets) {
                Ok((target, path)) => {
                    let cap_link = r.current_link.or_else(|| path.edges.first().copied());
                    let status = if path.edges.is_empty() && r.current_link.is_none() {
                        PlanStatus::Arrived
                    } else {
                        PlanStatus::EnRoute
                    };
                    DispatchPlan {
                        vehicle: r.vehicle,
                        origin: r.node,
                        target: Some(target),
                        path,
                        planned_at_h: t_k,
                        speed_cap_kmh: cap_link.map_or(0.0, cap_of),
                        time_budget_h,
                        energy_budget_kwh: budgets.energy_budget_kwh,
                        status,
                        failures: Vec::new(),
                    }
                }
                Err(failures) => DispatchPlan {
                    vehicle: r.vehicle,
                    origin: r.node,
                    target: None,
                    path: PathSolution::empty(r.node),
                    planned_at_h: t_k,
                    speed_cap_kmh: r.current_link.map_or(0.0, cap_of),
                    time_budget_h,
                    energy_budget_kwh: budgets.energy_budget_kwh,
                    status: PlanStatus::Infeasible,
                    failures: failures
                        .into_iter()
                        .map(|(target, reason)| TargetFailure { target, reason })
                        .collect(),
                },
            }
        })
        .collect();

    let mut projected = requests.iter().filter(|r| r.arrived).map(|r| r.e_gss_kwh).sum::<f64>();
    for plan in &plans {
        let req = requests.iter().find(|r| r.vehicle == plan.vehicle).unwrap();
        if plan.status == PlanStatus::Infeasible {
            warn!(
                "t={t_k:.4} h: vehicle {} has no feasible V2G target; dropping {:.2} kWh",
                plan.vehicle, req.e_gss_kwh
            );
        } else {
            projected += req.e_gss_kwh;
        }
    }
    if projected < config.request_kwh {
        warn!(
            "t={t_k:.4} h: projected delivery {projected:.2} kWh is below the request {:.2} kWh",
            config.request_kwh
        );
    }
    TickOutcome {
        plans,
        projected_delivery_kwh: projected,
    }
}

/// Free-flow feasibility filter at dispatch start followed by the
/// cost-ordered minimal selection. Also returns the rejected vehicles.
pub fn prefilter_fleet(
    graph: &UrbanGraph,
    fleet: &[Caev],
    config: &DispatchConfig,
) -> (FleetSelection, Vec<(VehicleId, Vec<TargetFailure>)>) {
    let weights = EdgeWeights::free_flow(graph);
    let candidates_nodes = graph.district_v2g(config.district);
    let outcomes: Vec<_> = fleet
        .par_iter()
        .filter(|c| c.available)
        .map(|c| {
            let budgets = Budgets::new(config.window_h(), c.battery.e_mob_kwh.max(0.0));
            (c, select_target(graph, &weights, c.current_node, &candidates_nodes, budgets))
        })
        .collect();
    let mut candidates = Vec::new();
    let mut rejected = Vec::new();
    for (c, outcome) in outcomes {
        match outcome {
            Ok((_, path)) => candidates.push(FleetCandidate {
                vehicle: c.clone(),
                free_flow_cost_h: path.cost_h,
            }),
            Err(f) => rejected.push((
                c.id,
                f.into_iter()
                    .map(|(target, reason)| TargetFailure { target, reason })
                    .collect(),
            )),
        }
    }
    (select_fleet(candidates, config.request_kwh), rejected)
}

/// The route a vehicle follows: the rest of its current link, if it was
/// mid-link at planning time, then the planned path.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub target: NodeId,
    pub path: PathSolution,
    pub planned_at_h: f64,
    pub speed_cap_kmh: f64,
    segments: Vec<Segment>,
    total_km: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    link: LinkId,
    /// Offset along the link where this segment starts (km).
    link_offset_km: f64,
    /// Route position at the end of the segment (km).
    end_km: f64,
    end_node: NodeId,
}

impl Route {
    fn new(
        graph: &UrbanGraph,
        plan: &DispatchPlan,
        lead_in: Option<(LinkId, f64)>,
    ) -> Option<Self> {
        let target = plan.target?;
        let mut segments = Vec::with_capacity(plan.path.edges.len() + 1);
        let mut pos = 0.0;
        if let Some((link, offset)) = lead_in {
            let l = graph.link(link);
            pos += l.length_km - offset;
            segments.push(Segment {
                link,
                link_offset_km: offset,
                end_km: pos,
                end_node: l.to,
            });
        }
        for &link in &plan.path.edges {
            let l = graph.link(link);
            pos += l.length_km;
            segments.push(Segment {
                link,
                link_offset_km: 0.0,
                end_km: pos,
                end_node: l.to,
            });
        }
        Some(Route {
            target,
            path: plan.path.clone(),
            planned_at_h: plan.planned_at_h,
            speed_cap_kmh: plan.speed_cap_kmh,
            segments,
            total_km: pos,
        })
    }

    pub fn total_km(&self) -> f64 {
        self.total_km
    }

    /// Link under the vehicle at route position `s` and the offset along it.
    /// `None` when `s` sits on a node (or past the end).
    fn locate(&self, s: f64) -> Option<(LinkId, f64)> {
        let mut start = 0.0;
        for seg in &self.segments {
            if s < seg.end_km - NODE_TOLERANCE_KM {
                if s <= start + NODE_TOLERANCE_KM && seg.link_offset_km == 0.0 {
                    return None;
                }
                return Some((seg.link, seg.link_offset_km + (s - start)));
            }
            start = seg.end_km;
        }
        None
    }

    /// Links entirely ahead of route position `s`.
    fn links_ahead(&self, s: f64) -> Vec<LinkId> {
        let mut start = 0.0;
        let mut out = Vec::new();
        for seg in &self.segments {
            if start >= s - NODE_TOLERANCE_KM {
                out.push(seg.link);
            }
            start = seg.end_km;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Unplanned,
    EnRoute,
    Arrived,
    Infeasible,
}

/// Dispatcher-side state of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrack {
    pub caev: Caev,
    pub status: TrackStatus,
    pub route: Option<Route>,
    pub speed_kmh: f64,
    pub arrival_time_h: Option<f64>,
    pub path_changes: u32,
    /// The controller could not satisfy its constraints at the last tick.
    pub control_flagged: bool,
    crossed_node: bool,
}

impl VehicleTrack {
    pub fn new(caev: Caev) -> Self {
        VehicleTrack {
            caev,
            status: TrackStatus::Unplanned,
            route: None,
            speed_kmh: 0.0,
            arrival_time_h: None,
            path_changes: 0,
            control_flagged: false,
            crossed_node: false,
        }
    }

    /// `(1 - p) * route length`, or 0 once arrived.
    pub fn distance_to_target_km(&self) -> Option<f64> {
        match (&self.status, &self.route) {
            (TrackStatus::Arrived, _) => Some(0.0),
            (_, Some(r)) => Some((r.total_km - self.caev.traveled_km).max(0.0)),
            _ => None,
        }
    }

    fn planning_point(&self, graph: &UrbanGraph) -> (NodeId, Option<(LinkId, f64)>) {
        match &self.route {
            Some(r) => match r.locate(self.caev.traveled_km) {
                Some((link, offset)) => (graph.link(link).to, Some((link, offset))),
                None => (self.caev.current_node, None),
            },
            None => (self.caev.current_node, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum DispatchEvent {
    Planned {
        origin: NodeId,
        target: NodeId,
        nodes: Vec<NodeId>,
        cost_h: f64,
        path_length_km: f64,
        lead_in_km: f64,
        speed_cap_kmh: f64,
        time_budget_h: f64,
        energy_budget_kwh: f64,
    },
    NodeReached {
        node: NodeId,
        at_h: f64,
    },
    PathChanged {
        previous_target: NodeId,
        target: NodeId,
        previous_remaining_km: f64,
        new_remaining_km: f64,
    },
    Arrived {
        node: NodeId,
        at_h: f64,
        e_gss_kwh: f64,
    },
    Infeasible {
        failures: Vec<TargetFailure>,
        stop_node: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Tick at which the event was recorded (h).
    pub t: f64,
    pub vehicle: VehicleId,
    #[serde(flatten)]
    pub event: DispatchEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchLog {
    pub records: Vec<LogRecord>,
}

impl DispatchLog {
    fn push(&mut self, t: f64, vehicle: VehicleId, event: DispatchEvent) {
        self.records.push(LogRecord { t, vehicle, event });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(DispatchLog { records })
    }

    pub fn for_vehicle(&self, v: VehicleId) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.vehicle == v)
    }
}

/// Source of traffic states as the clock advances.
pub trait TrafficFeed {
    /// Latest state whose time does not exceed `t_h`.
    fn advance_to(&mut self, t_h: f64) -> &TrafficState;
}

/// A frozen traffic state.
pub struct StaticTraffic(pub TrafficState);

impl TrafficFeed for StaticTraffic {
    fn advance_to(&mut self, _t_h: f64) -> &TrafficState {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub speed_kmh: f64,
    /// The controller fell back because its problem had no solution.
    pub infeasible: bool,
}

pub trait SpeedControl {
    fn control(&mut self, vehicle: VehicleId, measurement: &MpcMeasurement) -> ControlDecision;
}

/// Always drives at the planning-time speed cap.
pub struct CapSpeed;

impl SpeedControl for CapSpeed {
    fn control(&mut self, _vehicle: VehicleId, m: &MpcMeasurement) -> ControlDecision {
        ControlDecision {
            speed_kmh: m.speed_cap_kmh,
            infeasible: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub vehicle: VehicleId,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySnapshot {
    pub t_h: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRun {
    pub log: DispatchLog,
    pub tracks: Vec<VehicleTrack>,
    pub plan_times: Vec<f64>,
    /// Time budget handed to the path solver at each planning tick.
    pub time_budgets: Vec<f64>,
    pub speed_series: Vec<TimeSeries>,
    pub distance_series: Vec<TimeSeries>,
    pub snapshots: Vec<OccupancySnapshot>,
    pub delivered_kwh: f64,
    pub request_kwh: f64,
}

impl DispatchRun {
    pub fn request_met(&self) -> bool {
        self.delivered_kwh >= self.request_kwh
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchSettings {
    pub control_period_h: f64,
    /// Discharge model of the vehicles (the plant).
    pub coeffs: EnergyCoefficients,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tick {
    Plan,
    Control,
    Close,
}

/// Runs the dispatch window for an already selected fleet: planning ticks
/// every `plan_period_h` from `t_disp`, control ticks every
/// `control_period_h`, and exact constant-speed motion in between.
pub fn run_dispatch(
    config: &DispatchConfig,
    settings: &DispatchSettings,
    graph: &UrbanGraph,
    fleet: Vec<Caev>,
    feed: &mut dyn TrafficFeed,
    control: &mut dyn SpeedControl,
) -> DispatchRun {
    let plan_times = config.plan_times();
    let schedule = build_schedule(config, &plan_times, settings.control_period_h);

    let mut d = Dispatcher {
        graph,
        config,
        settings,
        log: DispatchLog::default(),
        speed_series: fleet
            .iter()
            .map(|c| TimeSeries {
                vehicle: c.id,
                samples: Vec::new(),
            })
            .collect(),
        distance_series: fleet
            .iter()
            .map(|c| TimeSeries {
                vehicle: c.id,
                samples: Vec::new(),
            })
            .collect(),
        tracks: fleet.into_iter().map(VehicleTrack::new).collect(),
        clock_h: config.t_disp_h,
    };
    let mut time_budgets = Vec::new();
    let mut snapshots = Vec::new();

    for (t, kinds) in schedule {
        let stamp = t;
        let move_until = if kinds.contains(&Tick::Close) { config.t_pr_h } else { t };
        d.advance_all(move_until, stamp);
        let traffic = feed.advance_to(t);
        if kinds.contains(&Tick::Plan) {
            snapshots.push(OccupancySnapshot {
                t_h: t,
                x: traffic.x.clone(),
            });
            d.record_distances(t);
            time_budgets.push(config.window_h() - (t - config.t_disp_h));
            let all: Vec<usize> = (0..d.tracks.len()).collect();
            d.replan(t, &all, traffic);
        }
        if kinds.contains(&Tick::Control) {
            if config.replan_on_node_arrival && !kinds.contains(&Tick::Plan) {
                let crossed: Vec<usize> = (0..d.tracks.len())
                    .filter(|&i| d.tracks[i].crossed_node && d.tracks[i].status == TrackStatus::EnRoute)
                    .collect();
                if !crossed.is_empty() {
                    d.replan(t, &crossed, traffic);
                }
            }
            d.apply_control(t, control);
            d.record_distances(t);
        }
        if kinds.contains(&Tick::Close) {
            for track in &mut d.tracks {
                track.speed_kmh = 0.0;
            }
            d.record_distances(t);
        }
        for track in &mut d.tracks {
            track.crossed_node = false;
        }
    }

    let delivered_kwh = d
        .tracks
        .iter()
        .filter(|t| t.arrival_time_h.is_some_and(|a| a <= config.t_pr_h + TICK_TOLERANCE_H))
        .map(|t| t.caev.battery.e_gss_kwh)
        .sum();
    DispatchRun {
        log: d.log,
        tracks: d.tracks,
        plan_times,
        time_budgets,
        speed_series: d.speed_series,
        distance_series: d.distance_series,
        snapshots,
        delivered_kwh,
        request_kwh: config.request_kwh,
    }
}

fn build_schedule(
    config: &DispatchConfig,
    plan_times: &[f64],
    control_period_h: f64,
) -> Vec<(f64, Vec<Tick>)> {
    let mut events: Vec<(f64, Tick)> = plan_times.iter().map(|&t| (t, Tick::Plan)).collect();
    let mut j = 0usize;
    loop {
        let t = config.t_disp_h + j as f64 * control_period_h;
        if t < config.t_pr_h - TICK_TOLERANCE_H {
            events.push((t, Tick::Control));
            j += 1;
        } else {
            // First control instant at or after the deadline closes the window.
            events.push((t, Tick::Close));
            break;
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, Vec<Tick>)> = Vec::new();
    for (t, kind) in events {
        match merged.last_mut() {
            Some((t0, kinds)) if (t - *t0).abs() <= TICK_TOLERANCE_H => kinds.push(kind),
            _ => merged.push((t, vec![kind])),
        }
    }
    merged
}

struct Dispatcher<'a> {
    graph: &'a UrbanGraph,
    config: &'a DispatchConfig,
    settings: &'a DispatchSettings,
    log: DispatchLog,
    tracks: Vec<VehicleTrack>,
    speed_series: Vec<TimeSeries>,
    distance_series: Vec<TimeSeries>,
    clock_h: f64,
}

impl Dispatcher<'_> {
    fn record_distances(&mut self, t: f64) {
        for (track, series) in self.tracks.iter().zip(&mut self.distance_series) {
            if let Some(d) = track.distance_to_target_km() {
                series.samples.push((t, d));
            }
        }
    }

    fn advance_all(&mut self, until_h: f64, stamp_h: f64) {
        let from = self.clock_h;
        if until_h > from {
            for i in 0..self.tracks.len() {
                self.advance(i, from, until_h, stamp_h);
            }
            self.clock_h = until_h;
        }
    }

    /// Constant-speed motion over `[from, to]`, recording node crossings and
    /// arrival at their exact times.
    fn advance(&mut self, i: usize, from: f64, to: f64, stamp_h: f64) {
        let coeffs = self.settings.coeffs;
        let track = &mut self.tracks[i];
        let moving = matches!(track.status, TrackStatus::EnRoute | TrackStatus::Infeasible);
        let Some(route) = track.route.as_ref() else { return };
        if !moving || track.speed_kmh <= 0.0 {
            return;
        }
        let u = track.speed_kmh;
        let s0 = track.caev.traveled_km;
        let remaining = route.total_km - s0;
        let reach = u * (to - from);
        let (s1, drive_h, finished) = if reach >= remaining - NODE_TOLERANCE_KM {
            (route.total_km, (remaining / u).max(0.0), true)
        } else {
            (s0 + reach, to - from, false)
        };

        let vehicle = track.caev.id;
        for seg in &route.segments {
            if seg.end_km > s0 + NODE_TOLERANCE_KM && seg.end_km <= s1 + NODE_TOLERANCE_KM {
                let at_h = from + (seg.end_km - s0) / u;
                track.caev.current_node = seg.end_node;
                track.crossed_node = true;
                self.log.push(
                    stamp_h,
                    vehicle,
                    DispatchEvent::NodeReached {
                        node: seg.end_node,
                        at_h,
                    },
                );
            }
        }
        track.caev.battery.e_mob_kwh = discharge_step(track.caev.battery.e_mob_kwh, u, drive_h, &coeffs);
        track.caev.traveled_km = s1;
        track.caev.progress = if route.total_km > 0.0 { s1 / route.total_km } else { 1.0 };

        if finished {
            track.speed_kmh = 0.0;
            if track.status == TrackStatus::EnRoute {
                let at_h = from + drive_h;
                track.status = TrackStatus::Arrived;
                track.arrival_time_h = Some(at_h);
                track.caev.current_node = route.target;
                self.log.push(
                    stamp_h,
                    vehicle,
                    DispatchEvent::Arrived {
                        node: route.target,
                        at_h,
                        e_gss_kwh: track.caev.battery.e_gss_kwh,
                    },
                );
            }
        }
    }

    fn replan(&mut self, t: f64, which: &[usize], traffic: &TrafficState) {
        let graph = self.graph;
        let mut requests = Vec::new();
        let mut lead_ins = Vec::new();
        for (i, track) in self.tracks.iter().enumerate() {
            let arrived = track.status == TrackStatus::Arrived;
            let wanted = which.contains(&i)
                && matches!(track.status, TrackStatus::Unplanned | TrackStatus::EnRoute);
            if !(arrived || wanted) {
                continue;
            }
            let (node, lead_in) = track.planning_point(graph);
            requests.push(PlanRequest {
                vehicle: track.caev.id,
                node,
                current_link: lead_in.map(|(l, _)| l),
                e_mob_kwh: track.caev.battery.e_mob_kwh,
                e_gss_kwh: track.caev.battery.e_gss_kwh,
                arrived,
            });
            lead_ins.push((i, lead_in));
        }
        let outcome = plan_tick(t, &requests, traffic, graph, self.config);
        debug!(
            "t={t:.4} h: planned {} vehicle(s), projected delivery {:.2} kWh",
            outcome.plans.len(),
            outcome.projected_delivery_kwh
        );

        for plan in outcome.plans {
            let (i, lead_in) = *lead_ins
                .iter()
                .find(|(i, _)| self.tracks[*i].caev.id == plan.vehicle)
                .unwrap();
            self.apply_plan(t, i, &plan, lead_in);
        }
    }

    fn apply_plan(&mut self, t: f64, i: usize, plan: &DispatchPlan, lead_in: Option<(LinkId, f64)>) {
        let graph = self.graph;
        let track = &mut self.tracks[i];
        let vehicle = track.caev.id;
        let lead_in_km = lead_in.map_or(0.0, |(l, off)| graph.link(l).length_km - off);

        if plan.status == PlanStatus::Infeasible {
            warn!(
                "t={t:.4} h: vehicle {vehicle} marked infeasible; it stops at node {}",
                plan.origin
            );
            track.status = TrackStatus::Infeasible;
            // Finish the current link at its speed cap, then stop.
            track.route = lead_in.map(|(link, offset)| {
                let mut stop = plan.clone();
                stop.target = Some(plan.origin);
                let mut r = Route::new(graph, &stop, Some((link, offset))).unwrap();
                r.speed_cap_kmh = plan.speed_cap_kmh;
                r
            });
            track.caev.traveled_km = 0.0;
            track.caev.progress = 0.0;
            track.speed_kmh = if lead_in.is_some() { plan.speed_cap_kmh } else { 0.0 };
            self.log.push(
                t,
                vehicle,
                DispatchEvent::Infeasible {
                    failures: plan.failures.clone(),
                    stop_node: plan.origin,
                },
            );
            return;
        }

        let target = plan.target.expect("feasible plan has a target");
        let previous = track.route.as_ref().map(|r| {
            (
                r.target,
                r.links_ahead(track.caev.traveled_km),
                (r.total_km - track.caev.traveled_km).max(0.0),
            )
        });
        let route = Route::new(graph, plan, lead_in).expect("feasible plan has a target");

        self.log.push(
            t,
            vehicle,
            DispatchEvent::Planned {
                origin: plan.origin,
                target,
                nodes: plan.path.nodes(graph),
                cost_h: plan.path.cost_h,
                path_length_km: plan.path.length_km,
                lead_in_km,
                speed_cap_kmh: plan.speed_cap_kmh,
                time_budget_h: plan.time_budget_h,
                energy_budget_kwh: plan.energy_budget_kwh,
            },
        );
        if let Some((previous_target, ahead, previous_remaining_km)) = previous {
            if previous_target != target || ahead != plan.path.edges {
                track.path_changes += 1;
                self.log.push(
                    t,
                    vehicle,
                    DispatchEvent::PathChanged {
                        previous_target,
                        target,
                        previous_remaining_km,
                        new_remaining_km: route.total_km,
                    },
                );
            }
        }

        track.caev.traveled_km = 0.0;
        track.caev.progress = 0.0;
        if plan.status == PlanStatus::Arrived {
            track.status = TrackStatus::Arrived;
            track.arrival_time_h = Some(t);
            track.speed_kmh = 0.0;
            track.caev.progress = 1.0;
            track.route = Some(route);
            self.log.push(
                t,
                vehicle,
                DispatchEvent::Arrived {
                    node: target,
                    at_h: t,
                    e_gss_kwh: track.caev.battery.e_gss_kwh,
                },
            );
        } else {
            track.status = TrackStatus::EnRoute;
            track.route = Some(route);
        }
    }

    fn apply_control(&mut self, t: f64, control: &mut dyn SpeedControl) {
        for (track, series) in self.tracks.iter_mut().zip(&mut self.speed_series) {
            if track.status == TrackStatus::EnRoute {
                let route = track.route.as_ref().expect("en-route vehicle has a route");
                let m = MpcMeasurement {
                    t_j_h: t,
                    t_pr_h: self.config.t_pr_h,
                    dt_h: self.settings.control_period_h,
                    p_hat: track.caev.traveled_km / route.total_km,
                    e_mob_kwh: track.caev.battery.e_mob_kwh,
                    path_length_km: route.total_km,
                    speed_cap_kmh: route.speed_cap_kmh,
                };
                let decision = control.control(track.caev.id, &m);
                track.speed_kmh = decision.speed_kmh.max(0.0);
                track.control_flagged = decision.infeasible;
            } else if track.status != TrackStatus::Infeasible {
                track.speed_kmh = 0.0;
            }
            if track.status != TrackStatus::Unplanned {
                series.samples.push((t, track.speed_kmh));
            }
        }
    }
}
