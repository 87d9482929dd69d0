//! Resource-constrained shortest paths: minimum travel time subject to a
//! time budget and a mobility-energy budget, solved by A*-guided
//! label setting with Pareto dominance at nodes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::network::{distances_to, LinkId, NodeId, UrbanGraph};
use crate::traffic::{travel_time, OCCUPANCY_CAP};

/// Search weights frozen at a planning instant, indexed by `LinkId`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    pub time_h: Vec<f64>,
    pub energy_kwh: Vec<f64>,
    pub length_km: Vec<f64>,
    /// Jammed links removed from the search graph.
    pub excluded: Vec<bool>,
}

impl EdgeWeights {
    /// Congestion-dependent travel times from link counts `x`.
    pub fn from_traffic(graph: &UrbanGraph, x: &[f64]) -> Self {
        let links = graph.links();
        EdgeWeights {
            time_h: links.iter().zip(x).map(|(l, &x)| travel_time(l, x)).collect(),
            energy_kwh: links.iter().map(|l| l.energy_cost_kwh).collect(),
            length_km: links.iter().map(|l| l.length_km).collect(),
            excluded: links
                .iter()
                .zip(x)
                .map(|(l, &x)| x / l.capacity_veh >= OCCUPANCY_CAP)
                .collect(),
        }
    }

    /// Weights of an empty network.
    pub fn free_flow(graph: &UrbanGraph) -> Self {
        Self::from_traffic(graph, &vec![0.0; graph.link_count()])
    }

    /// Arbitrary time and energy weights; lengths come from the graph.
    pub fn custom(graph: &UrbanGraph, time_h: Vec<f64>, energy_kwh: Vec<f64>) -> Self {
        assert_eq!(time_h.len(), graph.link_count());
        assert_eq!(energy_kwh.len(), graph.link_count());
        EdgeWeights {
            time_h,
            energy_kwh,
            length_km: graph.links().iter().map(|l| l.length_km).collect(),
            excluded: vec![false; graph.link_count()],
        }
    }

    fn usable(&self, l: LinkId) -> bool {
        !self.excluded[l.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub time_budget_h: f64,
    pub energy_budget_kwh: f64,
}

impl Budgets {
    pub fn new(time_budget_h: f64, energy_budget_kwh: f64) -> Self {
        Budgets {
            time_budget_h,
            energy_budget_kwh,
        }
    }

    pub fn unbounded() -> Self {
        Self::new(f64::INFINITY, f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSolution {
    pub origin: NodeId,
    pub edges: Vec<LinkId>,
    /// Total travel time (h), the minimized cost.
    pub cost_h: f64,
    pub energy_kwh: f64,
    pub length_km: f64,
}

impl PathSolution {
    pub fn empty(origin: NodeId) -> Self {
        PathSolution {
            origin,
            edges: Vec::new(),
            cost_h: 0.0,
            energy_kwh: 0.0,
            length_km: 0.0,
        }
    }

    pub fn target(&self, graph: &UrbanGraph) -> NodeId {
        self.edges.last().map_or(self.origin, |l| graph.link(*l).to)
    }

    pub fn nodes(&self, graph: &UrbanGraph) -> Vec<NodeId> {
        std::iter::once(self.origin)
            .chain(self.edges.iter().map(|l| graph.link(*l).to))
            .collect()
    }
}

/// Why no budget-feasible path exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    UnknownNode,
    /// No path at all over non-excluded links.
    Disconnected,
    /// Even the fastest path exceeds the time budget.
    TimeBudget,
    /// Even the least-energy path exceeds the energy budget.
    EnergyBudget,
    /// Each budget is satisfiable alone but not together.
    JointBudgets,
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Infeasibility::UnknownNode => "unknown node",
            Infeasibility::Disconnected => "disconnected",
            Infeasibility::TimeBudget => "time budget",
            Infeasibility::EnergyBudget => "energy budget",
            Infeasibility::JointBudgets => "joint budgets",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RcspOptions {
    /// Prune labels dominated at their node. When off, labels are only kept
    /// elementary (no node repeats) so the search still terminates.
    pub dominance: bool,
    /// Prune with a backward least-energy bound in addition to the time bound.
    pub energy_bound: bool,
}

impl Default for RcspOptions {
    fn default() -> Self {
        RcspOptions {
            dominance: true,
            energy_bound: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RcspStats {
    pub labels_created: usize,
    pub labels_expanded: usize,
    pub pruned_by_budget: usize,
    pub pruned_by_dominance: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub node: NodeId,
    pub time_h: f64,
    pub energy_kwh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcspOutcome {
    pub result: Result<PathSolution, Infeasibility>,
    pub stats: RcspStats,
    /// Non-dominated labels left at every node when the search stopped.
    pub frontier: Vec<FrontierPoint>,
}

/// Exact remaining travel time from every node (dense index) to `target`
/// over non-excluded links; `+inf` where the target is unreachable.
pub fn heuristic_bound(graph: &UrbanGraph, weights: &EdgeWeights, target: NodeId) -> Vec<f64> {
    let Some(t) = graph.node_index(target) else {
        return vec![f64::INFINITY; graph.node_count()];
    };
    distances_to(graph, &[t], |l| weights.usable(l).then(|| weights.time_h[l.0]))
}

fn least_energy_bound(graph: &UrbanGraph, weights: &EdgeWeights, target: usize) -> Vec<f64> {
    distances_to(graph, &[target], |l| {
        weights.usable(l).then(|| weights.energy_kwh[l.0])
    })
}

#[derive(Debug, Clone)]
struct Label {
    node: usize,
    time_h: f64,
    energy_kwh: f64,
    dist_km: f64,
    parent: Option<usize>,
    via: Option<LinkId>,
    alive: bool,
}

struct QueueEntry {
    key: f64,
    energy: f64,
    node: NodeId,
    label: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    // Reversed for a min-heap: key, then energy, then node id, then age.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.energy.total_cmp(&self.energy))
            .then_with(|| other.node.cmp(&self.node))
            .then_with(|| other.label.cmp(&self.label))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn visits(labels: &[Label], mut at: usize, node: usize) -> bool {
    loop {
        if labels[at].node == node {
            return true;
        }
        match labels[at].parent {
            Some(p) => at = p,
            None => return false,
        }
    }
}

/// Fastest `origin -> target` path within both budgets.
pub fn solve_rcsp(
    graph: &UrbanGraph,
    weights: &EdgeWeights,
    origin: NodeId,
    target: NodeId,
    budgets: Budgets,
) -> Result<PathSolution, Infeasibility> {
    solve_rcsp_with(graph, weights, origin, target, budgets, RcspOptions::default()).result
}

pub fn solve_rcsp_with(
    graph: &UrbanGraph,
    weights: &EdgeWeights,
    origin: NodeId,
    target: NodeId,
    budgets: Budgets,
    opts: RcspOptions,
) -> RcspOutcome {
    let mut stats = RcspStats::default();
    let (Some(src), Some(dst)) = (graph.node_index(origin), graph.node_index(target)) else {
        return RcspOutcome {
            result: Err(Infeasibility::UnknownNode),
            stats,
            frontier: Vec::new(),
        };
    };
    if src == dst {
        return RcspOutcome {
            result: Ok(PathSolution::empty(origin)),
            stats,
            frontier: vec![FrontierPoint {
                node: origin,
                time_h: 0.0,
                energy_kwh: 0.0,
            }],
        };
    }

    let h_time = heuristic_bound(graph, weights, target);
    let h_energy = opts.energy_bound.then(|| least_energy_bound(graph, weights, dst));
    // The bound test only discards; a tiny slack keeps rounding in `time + h`
    // from cutting a path that sits exactly on the budget.
    let slack = |b: f64| 1e-12 * b.abs().max(1.0);
    let time_cap = budgets.time_budget_h + slack(budgets.time_budget_h);
    let energy_cap = budgets.energy_budget_kwh + slack(budgets.energy_budget_kwh);

    let mut labels: Vec<Label> = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new(); graph.node_count()];
    let mut heap = BinaryHeap::new();

    let mut found = None;
    if h_time[src] <= time_cap && budgets.energy_budget_kwh >= 0.0 && budgets.time_budget_h >= 0.0 {
        labels.push(Label {
            node: src,
            time_h: 0.0,
            energy_kwh: 0.0,
            dist_km: 0.0,
            parent: None,
            via: None,
            alive: true,
        });
        frontier[src].push(0);
        heap.push(QueueEntry {
            key: h_time[src],
            energy: 0.0,
            node: origin,
            label: 0,
        });
        stats.labels_created = 1;
    }

    while let Some(entry) = heap.pop() {
        let current = labels[entry.label].clone();
        if !current.alive {
            continue;
        }
        if current.node == dst {
            found = Some(entry.label);
            break;
        }
        stats.labels_expanded += 1;
        for &link in graph.outgoing(current.node) {
            if !weights.usable(link) {
                continue;
            }
            let (_, next) = graph.ends(link);
            let time_h = current.time_h + weights.time_h[link.0];
            let energy_kwh = current.energy_kwh + weights.energy_kwh[link.0];
            if time_h > budgets.time_budget_h
                || energy_kwh > budgets.energy_budget_kwh
                || !(time_h + h_time[next] <= time_cap)
                || h_energy
                    .as_ref()
                    .is_some_and(|he| !(energy_kwh + he[next] <= energy_cap))
            {
                stats.pruned_by_budget += 1;
                continue;
            }
            if opts.dominance {
                let dominated = frontier[next].iter().any(|&o| {
                    let other = &labels[o];
                    other.time_h <= time_h && other.energy_kwh <= energy_kwh
                });
                if dominated {
                    stats.pruned_by_dominance += 1;
                    continue;
                }
                let mut kept = Vec::with_capacity(frontier[next].len() + 1);
                for &o in &frontier[next] {
                    let other = &mut labels[o];
                    if time_h <= other.time_h && energy_kwh <= other.energy_kwh {
                        other.alive = false;
                        stats.pruned_by_dominance += 1;
                    } else {
                        kept.push(o);
                    }
                }
                frontier[next] = kept;
            } else if visits(&labels, entry.label, next) {
                continue;
            }
            let id = labels.len();
            labels.push(Label {
                node: next,
                time_h,
                energy_kwh,
                dist_km: current.dist_km + weights.length_km[link.0],
                parent: Some(entry.label),
                via: Some(link),
                alive: true,
            });
            if opts.dominance {
                frontier[next].push(id);
            }
            stats.labels_created += 1;
            heap.push(QueueEntry {
                key: time_h + h_time[next],
                energy: energy_kwh,
                node: graph.node_at(next).id,
                label: id,
            });
        }
    }

    let frontier_points = frontier
        .iter()
        .enumerate()
        .flat_map(|(n, ls)| {
            let labels = &labels;
            ls.iter().map(move |&l| FrontierPoint {
                node: graph.node_at(n).id,
                time_h: labels[l].time_h,
                energy_kwh: labels[l].energy_kwh,
            })
        })
        .collect();

    let result = match found {
        Some(l) => Ok(reconstruct(&labels, l, origin)),
        None => Err(diagnose(graph, weights, src, dst, &h_time, budgets)),
    };
    RcspOutcome {
        result,
        stats,
        frontier: frontier_points,
    }
}

fn reconstruct(labels: &[Label], end: usize, origin: NodeId) -> PathSolution {
    let mut edges = Vec::new();
    let mut at = end;
    while let (Some(p), Some(via)) = (labels[at].parent, labels[at].via) {
        edges.push(via);
        at = p;
    }
    edges.reverse();
    let last = &labels[end];
    PathSolution {
        origin,
        edges,
        cost_h: last.time_h,
        energy_kwh: last.energy_kwh,
        length_km: last.dist_km,
    }
}

fn diagnose(
    graph: &UrbanGraph,
    weights: &EdgeWeights,
    src: usize,
    dst: usize,
    h_time: &[f64],
    budgets: Budgets,
) -> Infeasibility {
    if h_time[src].is_infinite() {
        Infeasibility::Disconnected
    } else if h_time[src] > budgets.time_budget_h {
        Infeasibility::TimeBudget
    } else if least_energy_bound(graph, weights, dst)[src] > budgets.energy_budget_kwh {
        Infeasibility::EnergyBudget
    } else {
        Infeasibility::JointBudgets
    }
}

/// Best V2G target among `candidates`: minimum path cost, ties to the
/// lower node id. On failure every candidate's reason is returned.
pub fn select_target(
    graph: &UrbanGraph,
    weights: &EdgeWeights,
    origin: NodeId,
    candidates: &[NodeId],
    budgets: Budgets,
) -> Result<(NodeId, PathSolution), Vec<(NodeId, Infeasibility)>> {
    let mut sorted = candidates.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut best: Option<(NodeId, PathSolution)> = None;
    let mut failures = Vec::new();
    for target in sorted {
        match solve_rcsp(graph, weights, origin, target, budgets) {
            Ok(path) => {
                if best.as_ref().is_none_or(|(_, b)| path.cost_h < b.cost_h) {
                    best = Some((target, path));
                }
            }
            Err(reason) => failures.push((target, reason)),
        }
    }
    best.ok_or(failures)
}

pub fn write_frontier_csv<W: Write>(w: &mut W, frontier: &[FrontierPoint]) -> io::Result<()> {
    writeln!(w, "node,time_h,energy_kwh")?;
    for p in frontier {
        writeln!(w, "{},{},{}", p.node, p.time_h, p.energy_kwh)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{GraphBuilder, GraphOptions, LinkSpec, Node};

    fn graph(n: u32, edges: &[(u32, u32)]) -> UrbanGraph {
        let mut b = GraphBuilder::new();
        for i in 0..n {
            b.node(Node::plain(i));
        }
        for &(u, v) in edges {
            b.link(LinkSpec::new(u, v, 1.0, 50.0));
        }
        b.build(&GraphOptions::default()).unwrap()
    }

    #[test]
    fn origin_equals_target() {
        let g = graph(2, &[(0, 1)]);
        let w = EdgeWeights::free_flow(&g);
        let p = solve_rcsp(&g, &w, NodeId(1), NodeId(1), Budgets::new(0.0, 0.0)).unwrap();
        assert!(p.edges.is_empty());
        assert_eq!((p.cost_h, p.energy_kwh), (0.0, 0.0));
    }

    #[test]
    fn chain_heuristic() {
        let g = graph(4, &[(0, 1), (1, 2)]);
        let w = EdgeWeights::custom(&g, vec![0.02, 0.03], vec![1.0, 1.0]);
        let h = heuristic_bound(&g, &w, NodeId(2));
        assert_eq!(h[2], 0.0);
        assert!((h[0] - 0.05).abs() < 1e-15);
        assert!(h[3].is_infinite());
    }

    #[test]
    fn triangle_budget_examples() {
        // A=0, B=1, C=2; links A->B, B->C, A->C.
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let w = EdgeWeights::custom(&g, vec![0.01, 0.01, 0.015], vec![5.0, 5.0, 2.0]);
        let p = solve_rcsp(&g, &w, NodeId(0), NodeId(2), Budgets::new(0.03, 6.0)).unwrap();
        assert_eq!(p.edges, vec![LinkId(2)]);
        assert_eq!(p.cost_h, 0.015);

        // A slower direct link is still forced by the energy budget.
        let w = EdgeWeights::custom(&g, vec![0.01, 0.01, 0.025], vec![5.0, 5.0, 2.0]);
        let p = solve_rcsp(&g, &w, NodeId(0), NodeId(2), Budgets::new(0.03, 6.0)).unwrap();
        assert_eq!(p.edges, vec![LinkId(2)]);
        assert_eq!(p.cost_h, 0.025);
        // With room for both, the two-hop path wins on time.
        let p = solve_rcsp(&g, &w, NodeId(0), NodeId(2), Budgets::new(0.03, 10.0)).unwrap();
        assert_eq!(p.edges, vec![LinkId(0), LinkId(1)]);
        assert_eq!(p.cost_h, 0.02);
    }

    #[test]
    fn reason_codes() {
        let g = graph(4, &[(0, 1), (1, 2), (0, 2)]);
        let w = EdgeWeights::custom(&g, vec![0.01, 0.01, 0.05], vec![5.0, 5.0, 2.0]);
        let solve = |t, b| solve_rcsp(&g, &w, NodeId(0), NodeId(t), b);
        assert_eq!(solve(3, Budgets::unbounded()), Err(Infeasibility::Disconnected));
        assert_eq!(solve(2, Budgets::new(0.01, 100.0)), Err(Infeasibility::TimeBudget));
        assert_eq!(solve(2, Budgets::new(1.0, 1.0)), Err(Infeasibility::EnergyBudget));
        assert_eq!(solve(2, Budgets::new(0.03, 3.0)), Err(Infeasibility::JointBudgets));
        assert_eq!(
            solve_rcsp(&g, &w, NodeId(0), NodeId(9), Budgets::unbounded()),
            Err(Infeasibility::UnknownNode)
        );
    }

    #[test]
    fn excluded_links_are_skipped() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let mut w = EdgeWeights::custom(&g, vec![0.01, 0.01, 0.05], vec![1.0, 1.0, 1.0]);
        w.excluded[1] = true;
        let p = solve_rcsp(&g, &w, NodeId(0), NodeId(2), Budgets::unbounded()).unwrap();
        assert_eq!(p.edges, vec![LinkId(2)]);
    }

    #[test]
    fn jammed_links_are_excluded_from_traffic_weights() {
        let g = graph(2, &[(0, 1)]);
        let cap = g.link(LinkId(0)).capacity_veh;
        assert!(EdgeWeights::from_traffic(&g, &[cap]).excluded[0]);
        assert!(!EdgeWeights::from_traffic(&g, &[0.5 * cap]).excluded[0]);
    }

    #[test]
    fn target_selection_argmin_and_ties() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let w = EdgeWeights::custom(&g, vec![0.05, 0.04, 0.04], vec![1.0, 1.0, 1.0]);
        let (t, p) = select_target(&g, &w, NodeId(0), &[NodeId(1), NodeId(3), NodeId(2)], Budgets::unbounded())
            .unwrap();
        assert_eq!(t, NodeId(2));
        assert_eq!(p.cost_h, 0.04);
        let (t, _) = select_target(&g, &w, NodeId(0), &[NodeId(1)], Budgets::unbounded()).unwrap();
        assert_eq!(t, NodeId(1));
        let err = select_target(&g, &w, NodeId(0), &[NodeId(1), NodeId(2)], Budgets::new(0.01, 9.0))
            .unwrap_err();
        assert_eq!(err.len(), 2);
        assert!(err.iter().all(|(_, r)| *r == Infeasibility::TimeBudget));
    }

    #[test]
    fn frontier_holds_nondominated_labels() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let w = EdgeWeights::custom(&g, vec![0.01, 0.01, 0.025], vec![5.0, 5.0, 2.0]);
        let out = solve_rcsp_with(&g, &w, NodeId(0), NodeId(2), Budgets::new(1.0, 100.0), RcspOptions::default());
        let at_target: Vec<_> = out.frontier.iter().filter(|p| p.node == NodeId(2)).collect();
        assert_eq!(at_target.len(), 2);
        let mut buf = Vec::new();
        write_frontier_csv(&mut buf, &out.frontier).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("node,time_h,energy_kwh\n"));
    }
}
