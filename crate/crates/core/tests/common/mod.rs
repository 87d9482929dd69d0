//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2g_dispatch::citygen::{gen_city, CitySpec};
use v2g_dispatch::fleet::{FleetCandidate, VehicleId};
use v2g_dispatch::network::{GraphBuilder, GraphOptions, LinkSpec, Node, NodeId, UrbanGraph};
use v2g_dispatch::scenario::{feasible_fleet_seed, ScenarioConfig};

/// Random directed graph with distinct endpoints and no duplicate links.
pub struct RandomGraph {
    pub graph: UrbanGraph,
    pub time: Vec<f64>,
    pub energy: Vec<f64>,
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: u32, max_edges: usize) -> RandomGraph {
    let n = rng.gen_range(2..=max_nodes);
    let wanted = rng.gen_range(1..=max_edges.min((n * (n - 1)) as usize));
    let mut pairs = Vec::new();
    while pairs.len() < wanted {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !pairs.contains(&(a, b)) {
            pairs.push((a, b));
        }
    }
    let mut b = GraphBuilder::new();
    for i in 0..n {
        b.node(Node::plain(i));
    }
    for &(from, to) in &pairs {
        b.link(LinkSpec::new(from, to, 1.0, 30.0));
    }
    let graph = b.build(&GraphOptions::default()).unwrap();
    let time = (0..pairs.len()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let energy = (0..pairs.len()).map(|_| rng.gen_range(0.05..1.0)).collect();
    RandomGraph { graph, time, energy }
}

/// Cheapest simple path by exhaustive enumeration: `(time, energy, links)`.
/// Sums accumulate along the path in travel order.
pub fn brute_force_rcsp(
    g: &RandomGraph,
    origin: NodeId,
    target: NodeId,
    time_budget: f64,
    energy_budget: f64,
) -> Option<(f64, f64, Vec<usize>)> {
    let graph = &g.graph;
    let src = graph.node_index(origin)?;
    let dst = graph.node_index(target)?;
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    let mut visited = vec![false; graph.node_count()];
    let mut path = Vec::new();

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        g: &RandomGraph,
        node: usize,
        dst: usize,
        t: f64,
        e: f64,
        budgets: (f64, f64),
        visited: &mut Vec<bool>,
        path: &mut Vec<usize>,
        best: &mut Option<(f64, f64, Vec<usize>)>,
    ) {
        if node == dst {
            if t <= budgets.0 && e <= budgets.1 && best.as_ref().is_none_or(|b| t < b.0) {
                *best = Some((t, e, path.clone()));
            }
            return;
        }
        visited[node] = true;
        for l in g.graph.outgoing(node) {
            let (_, next) = g.graph.ends(*l);
            if !visited[next] {
                path.push(l.0);
                dfs(
                    g,
                    next,
                    dst,
                    t + g.time[l.0],
                    e + g.energy[l.0],
                    budgets,
                    visited,
                    path,
                    best,
                );
                path.pop();
            }
        }
        visited[node] = false;
    }

    dfs(
        g,
        src,
        dst,
        0.0,
        0.0,
        (time_budget, energy_budget),
        &mut visited,
        &mut path,
        &mut best,
    );
    best
}

/// MPC instance with speeds on a 0.5 km/h grid.
#[derive(Debug, Clone, Copy)]
pub struct GridInstance {
    pub steps: usize,
    pub dt: f64,
    pub cap: f64,
    pub length: f64,
    pub p0: f64,
    pub e0: f64,
    pub floor: f64,
    pub eta1: f64,
    pub eta2: f64,
}

pub const GRID_STEP_KMH: f64 = 0.5;

/// Exhaustive search over gridded speeds for the first `N - 1` steps; the
/// last speed is fixed by the terminal condition. Returns the best cost, or
/// `None` when no grid point satisfies the constraints.
pub fn grid_oracle(inst: &GridInstance) -> Option<f64> {
    let n = inst.steps;
    let levels = (inst.cap / GRID_STEP_KMH).round() as usize;
    let remaining = inst.length * (1.0 - inst.p0);
    let mut idx = vec![0usize; n - 1];
    let mut best: Option<f64> = None;
    loop {
        let mut speeds: Vec<f64> = idx.iter().map(|&i| i as f64 * GRID_STEP_KMH).collect();
        let covered: f64 = speeds.iter().map(|u| u * inst.dt).sum();
        let last = (remaining - covered) / inst.dt;
        if last >= -1e-9 && last <= inst.cap + 1e-9 {
            speeds.push(last.clamp(0.0, inst.cap));
            let (p, e) = substitute(inst, &speeds);
            if e[n] >= inst.floor - 1e-9 {
                let cost: f64 = p[..n].iter().map(|p| 1.0 - p).sum();
                if best.is_none_or(|b| cost < b) {
                    best = Some(cost);
                }
            }
        }
        // Odometer increment over the grid.
        let mut k = 0;
        loop {
            if k == n - 1 {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= levels {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Progress and energy trajectories by direct substitution into the
/// dynamics.
pub fn substitute(inst: &GridInstance, speeds: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![inst.p0];
    let mut e = vec![inst.e0];
    for u in speeds {
        p.push(p.last().unwrap() + u * inst.dt / inst.length);
        e.push(e.last().unwrap() - (inst.eta1 * u + inst.eta2 * u * u) * inst.dt);
    }
    (p, e)
}

/// Smallest prefix of the (cost, id) ordering whose GSS energy meets the
/// request, found by trying every prefix length.
pub fn brute_force_prefix(candidates: &[FleetCandidate], request: f64) -> (Vec<VehicleId>, f64) {
    let mut order: Vec<&FleetCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        a.free_flow_cost_h
            .partial_cmp(&b.free_flow_cost_h)
            .unwrap()
            .then(a.vehicle.id.cmp(&b.vehicle.id))
    });
    for k in 0..=order.len() {
        let total: f64 = order[..k].iter().map(|c| c.vehicle.battery.e_gss_kwh).sum();
        if total >= request {
            return (order[..k].iter().map(|c| c.vehicle.id).collect(), 0.0);
        }
    }
    let total: f64 = order.iter().map(|c| c.vehicle.battery.e_gss_kwh).sum();
    (order.iter().map(|c| c.vehicle.id).collect(), request - total)
}

/// The desk-scale city run: 100-node grid with 4 V2G nodes and default
/// parameters, fleet seed moved forward until the free-flow filter can meet
/// the request.
pub fn desk_scale(seed: u64) -> (ScenarioConfig, UrbanGraph, u64) {
    let mut config = ScenarioConfig::default();
    let graph = gen_city(&CitySpec::new(100, 4, seed), &config.graph_options()).unwrap();
    let fleet_seed = feasible_fleet_seed(&config, &graph, seed, 1000).expect("a feasible fleet seed");
    config.fleet_init.rng_seed = fleet_seed;
    (config, graph, fleet_seed)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
