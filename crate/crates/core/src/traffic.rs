//! Macroscopic store-and-forward link dynamics and congestion-dependent
//! link speeds.

use std::io::{self, Write};

use crate::network::{Link, LinkId, UrbanGraph};

/// Occupancy above which speeds are clamped and links are treated as jammed.
pub const OCCUPANCY_CAP: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    /// Step index.
    pub k: u64,
    /// Sampling time T (h).
    pub sample_time_h: f64,
    /// Vehicles on each link, indexed by `LinkId`.
    pub x: Vec<f64>,
    /// Number of negative link counts clamped to zero so far.
    pub clamped: u64,
}

impl TrafficState {
    pub fn new(x: Vec<f64>, sample_time_h: f64) -> Self {
        TrafficState {
            k: 0,
            sample_time_h,
            x,
            clamped: 0,
        }
    }

    pub fn empty(graph: &UrbanGraph, sample_time_h: f64) -> Self {
        Self::new(vec![0.0; graph.link_count()], sample_time_h)
    }

    /// Every link filled to `fraction` of its capacity.
    pub fn uniform_occupancy(graph: &UrbanGraph, fraction: f64, sample_time_h: f64) -> Self {
        let x = graph.links().iter().map(|l| fraction * l.capacity_veh).collect();
        Self::new(x, sample_time_h)
    }

    pub fn time_h(&self) -> f64 {
        self.k as f64 * self.sample_time_h
    }

    pub fn occupancy(&self, graph: &UrbanGraph, link: LinkId) -> f64 {
        self.x[link.0] / graph.link(link).capacity_veh
    }

    pub fn total(&self) -> f64 {
        self.x.iter().sum()
    }
}

/// Exogenous inflow (veh/h) entering links from outside the network.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryInflow {
    pub d: Vec<f64>,
}

impl BoundaryInflow {
    pub fn zero(graph: &UrbanGraph) -> Self {
        BoundaryInflow {
            d: vec![0.0; graph.link_count()],
        }
    }

    /// `vph` on every link leaving a source node, zero elsewhere.
    pub fn from_sources(graph: &UrbanGraph, vph: f64) -> Self {
        let d = graph
            .link_ids()
            .map(|l| {
                let (tail, _) = graph.ends(l);
                if graph.node_at(tail).is_source {
                    vph
                } else {
                    0.0
                }
            })
            .collect();
        BoundaryInflow { d }
    }
}

/// Per-link flows (veh/h) computed during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBreakdown {
    /// Entering flow.
    pub q: Vec<f64>,
    /// Exit flow leaving the network from the link.
    pub s: Vec<f64>,
    /// Flow leaving toward the downstream junction.
    pub l: Vec<f64>,
}

/// Outflow of a link into a right-of-way junction.
pub fn outflow_row(x_link: f64, sample_time_h: f64, saturation_flow_vph: f64) -> f64 {
    (x_link / sample_time_h).min(saturation_flow_vph)
}

/// Cycle-averaged outflow of a link into a signalized junction.
pub fn outflow_tl(
    x_link: f64,
    sample_time_h: f64,
    saturation_flow_vph: f64,
    stages_with_row: usize,
    green_h: f64,
    cycle_h: f64,
) -> f64 {
    let green_capacity = saturation_flow_vph * stages_with_row as f64 * green_h / cycle_h;
    (x_link / sample_time_h).min(green_capacity)
}

/// Leaving flow of every link, by downstream junction class.
pub fn leaving_flows(state: &TrafficState, graph: &UrbanGraph) -> Vec<f64> {
    let t = state.sample_time_h;
    let timing = graph.signal_timing();
    graph
        .link_ids()
        .map(|id| {
            let link = graph.link(id);
            let x = state.x[id.0];
            match graph.stages_with_row(id) {
                None => outflow_row(x, t, link.saturation_flow_vph),
                Some(n) => outflow_tl(
                    x,
                    t,
                    link.saturation_flow_vph,
                    n,
                    timing.green_time_h,
                    timing.cycle_time_h,
                ),
            }
        })
        .collect()
}

/// Advances the link counts by one sampling period.
pub fn step(
    state: &TrafficState,
    graph: &UrbanGraph,
    rates: &crate::network::TurningRateMap,
    inflow: &BoundaryInflow,
) -> (TrafficState, FlowBreakdown) {
    let t = state.sample_time_h;
    let l = leaving_flows(state, graph);

    let mut q = vec![0.0; graph.link_count()];
    for incoming in graph.link_ids() {
        let out = l[incoming.0];
        if out == 0.0 {
            continue;
        }
        for &(next, rate) in rates.row(incoming) {
            q[next.0] += rate * out;
        }
    }

    let s: Vec<f64> = graph
        .links()
        .iter()
        .zip(&q)
        .map(|(link, q)| link.exit_rate * q)
        .collect();

    let mut clamped = state.clamped;
    let x = (0..graph.link_count())
        .map(|i| {
            // l <= x / T, so at most x leaves; the min absorbs rounding when
            // a link drains completely.
            let departed = (t * l[i]).min(state.x[i]);
            let next = (state.x[i] - departed) + t * (q[i] - s[i] + inflow.d[i]);
            if next < 0.0 {
                clamped += 1;
                0.0
            } else {
                next
            }
        })
        .collect();

    (
        TrafficState {
            k: state.k + 1,
            sample_time_h: t,
            x,
            clamped,
        },
        FlowBreakdown { q, s, l },
    )
}

/// Congestion-dependent speed limit of a link (km/h); occupancy is capped at
/// [`OCCUPANCY_CAP`] so the result stays positive.
pub fn max_speed(link: &Link, x_link: f64) -> f64 {
    let occupancy = (x_link / link.capacity_veh).min(OCCUPANCY_CAP);
    link.free_flow_speed_kmh * (1.0 - occupancy)
}

/// Travel time of a link at its congestion-dependent speed (h).
pub fn travel_time(link: &Link, x_link: f64) -> f64 {
    link.length_km / max_speed(link, x_link)
}

pub fn write_flow_csv_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "k,from,to,x,q,s,l")
}

/// One CSV row per link: the counts at step `state.k` and the flows that
/// carried them to step `k + 1`.
pub fn write_flow_csv<W: Write>(
    w: &mut W,
    graph: &UrbanGraph,
    state: &TrafficState,
    flows: &FlowBreakdown,
) -> io::Result<()> {
    for id in graph.link_ids() {
        let link = graph.link(id);
        let i = id.0;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            state.k, link.from, link.to, state.x[i], flows.q[i], flows.s[i], flows.l[i]
        )?;
    }
    Ok(())
}
