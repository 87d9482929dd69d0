//! Urban road graph: junctions, directed links, V2G nodes, districts and
//! signal plans, plus the sink-directed turning-rate map.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default vehicle spacing used to derive link capacity (km).
pub const DEFAULT_SPACING_KM: f64 = 7e-3;
/// Default per-km energy consumption rate (kWh/km).
pub const DEFAULT_ENERGY_RATE_KWH_PER_KM: f64 = 0.12;
/// Default saturation flow (veh/h).
pub const DEFAULT_SATURATION_FLOW_VPH: f64 = 1500.0;
/// Default smoothing constant of the inverse-distance turning weights (km).
pub const DEFAULT_TURN_SMOOTHING_KM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistrictId(pub u32);

impl fmt::Display for DistrictId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense index of a link inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub is_v2g: bool,
    pub district: Option<DistrictId>,
    pub is_source: bool,
    pub is_terminal: bool,
    pub is_sink_attractor: bool,
}

impl Node {
    pub fn plain(id: u32) -> Self {
        Node {
            id: NodeId(id),
            is_v2g: false,
            district: None,
            is_source: false,
            is_terminal: false,
            is_sink_attractor: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub length_km: f64,
    pub free_flow_speed_kmh: f64,
    pub capacity_veh: f64,
    pub saturation_flow_vph: f64,
    /// Fraction of the entering flow that leaves the network on this link.
    pub exit_rate: f64,
    pub energy_cost_kwh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JunctionClass {
    RightOfWay,
    /// Each stage lists the incoming links holding the right of way.
    TrafficLight { stages: Vec<Vec<LinkId>> },
}

/// Signal timing shared by every signalized junction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalTiming {
    pub cycle_time_h: f64,
    pub lost_time_h: f64,
    pub green_time_h: f64,
}

impl Default for SignalTiming {
    fn default() -> Self {
        // 90 s cycle, 30 s effective green, 6 s lost time.
        SignalTiming {
            cycle_time_h: 90.0 / 3600.0,
            lost_time_h: 6.0 / 3600.0,
            green_time_h: 30.0 / 3600.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to read graph file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed graph file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("link {from}->{to} references unknown node {missing}")]
    DanglingEndpoint { from: NodeId, to: NodeId, missing: NodeId },
    #[error("self-loop link at node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate link {0}->{1}")]
    DuplicateLink(NodeId, NodeId),
    #[error("link {from}->{to}: {reason}")]
    InvalidLink { from: NodeId, to: NodeId, reason: String },
    #[error("district {0} has no V2G node")]
    DistrictWithoutV2g(DistrictId),
    #[error("V2G node {0} belongs to no district")]
    V2gWithoutDistrict(NodeId),
    #[error("sink attractor {0} is not a terminal node")]
    SinkNotTerminal(NodeId),
    #[error("junction {node}: {reason}")]
    InvalidStages { node: NodeId, reason: String },
    #[error("invalid signal timing: {0}")]
    InvalidSignalTiming(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Link capacity from its length and the average vehicle spacing.
pub fn derive_capacity(length_km: f64, spacing_km: f64) -> f64 {
    debug_assert!(length_km > 0.0 && spacing_km > 0.0);
    length_km / spacing_km
}

/// Defaults applied to attributes a graph description leaves out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    pub spacing_km: f64,
    pub energy_rate_kwh_per_km: f64,
    pub saturation_flow_vph: f64,
    pub signal_timing: SignalTiming,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            spacing_km: DEFAULT_SPACING_KM,
            energy_rate_kwh_per_km: DEFAULT_ENERGY_RATE_KWH_PER_KM,
            saturation_flow_vph: DEFAULT_SATURATION_FLOW_VPH,
            signal_timing: SignalTiming::default(),
        }
    }
}

/// Link description before defaults are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub length_km: f64,
    pub free_flow_speed_kmh: f64,
    pub saturation_flow_vph: Option<f64>,
    pub capacity_veh: Option<f64>,
    pub exit_rate: Option<f64>,
}

impl LinkSpec {
    pub fn new(from: u32, to: u32, length_km: f64, free_flow_speed_kmh: f64) -> Self {
        LinkSpec {
            from: NodeId(from),
            to: NodeId(to),
            length_km,
            free_flow_speed_kmh,
            saturation_flow_vph: None,
            capacity_veh: None,
            exit_rate: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    links: Vec<LinkSpec>,
    stages: Vec<(NodeId, Vec<Vec<NodeId>>)>,
    signal_timing: Option<SignalTiming>,
    energy_rate: Option<f64>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn link(&mut self, spec: LinkSpec) -> &mut Self {
        self.links.push(spec);
        self
    }

    /// Adds `a -> b` and `b -> a` with identical attributes.
    pub fn two_way(&mut self, a: u32, b: u32, length_km: f64, free_flow_speed_kmh: f64) -> &mut Self {
        self.link(LinkSpec::new(a, b, length_km, free_flow_speed_kmh));
        self.link(LinkSpec::new(b, a, length_km, free_flow_speed_kmh))
    }

    /// Declares `node` signalized; each stage lists upstream node ids.
    pub fn traffic_light(&mut self, node: NodeId, stages: Vec<Vec<NodeId>>) -> &mut Self {
        self.stages.push((node, stages));
        self
    }

    pub fn signal_timing(&mut self, timing: SignalTiming) -> &mut Self {
        self.signal_timing = Some(timing);
        self
    }

    pub fn energy_rate(&mut self, rate_kwh_per_km: f64) -> &mut Self {
        self.energy_rate = Some(rate_kwh_per_km);
        self
    }

    pub fn build(&self, opts: &GraphOptions) -> Result<UrbanGraph, GraphError> {
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(GraphError::DuplicateNode(n.id));
            }
        }

        let energy_rate = self.energy_rate.unwrap_or(opts.energy_rate_kwh_per_km);
        let mut links = Vec::with_capacity(self.links.len());
        let mut ends = Vec::with_capacity(self.links.len());
        let mut pair_index = HashMap::with_capacity(self.links.len());
        for spec in &self.links {
            let lookup = |id: NodeId| {
                index.get(&id).copied().ok_or(GraphError::DanglingEndpoint {
                    from: spec.from,
                    to: spec.to,
                    missing: id,
                })
            };
            let (u, v) = (lookup(spec.from)?, lookup(spec.to)?);
            if u == v {
                return Err(GraphError::SelfLoop(spec.from));
            }
            if pair_index.insert((u, v), LinkId(links.len())).is_some() {
                return Err(GraphError::DuplicateLink(spec.from, spec.to));
            }
            let invalid = |reason: &str| GraphError::InvalidLink {
                from: spec.from,
                to: spec.to,
                reason: reason.to_string(),
            };
            if !(spec.length_km > 0.0 && spec.length_km.is_finite()) {
                return Err(invalid("length must be positive"));
            }
            if !(spec.free_flow_speed_kmh > 0.0 && spec.free_flow_speed_kmh.is_finite()) {
                return Err(invalid("free-flow speed must be positive"));
            }
            let capacity_veh = spec
                .capacity_veh
                .unwrap_or_else(|| derive_capacity(spec.length_km, opts.spacing_km));
            if !(capacity_veh > 0.0 && capacity_veh.is_finite()) {
                return Err(invalid("capacity must be positive"));
            }
            let saturation_flow_vph = spec.saturation_flow_vph.unwrap_or(opts.saturation_flow_vph);
            if !(saturation_flow_vph >= 0.0 && saturation_flow_vph.is_finite()) {
                return Err(invalid("saturation flow must be non-negative"));
            }
            let exit_rate = spec
                .exit_rate
                .unwrap_or(if self.nodes[v].is_terminal { 1.0 } else { 0.0 });
            if !(0.0..=1.0).contains(&exit_rate) {
                return Err(invalid("exit rate must lie in [0, 1]"));
            }
            links.push(Link {
                from: spec.from,
                to: spec.to,
                length_km: spec.length_km,
                free_flow_speed_kmh: spec.free_flow_speed_kmh,
                capacity_veh,
                saturation_flow_vph,
                exit_rate,
                energy_cost_kwh: energy_rate * spec.length_km,
            });
            ends.push((u, v));
        }

        let n = self.nodes.len();
        let mut out_links = vec![Vec::new(); n];
        let mut in_links = vec![Vec::new(); n];
        for (i, &(u, v)) in ends.iter().enumerate() {
            out_links[u].push(LinkId(i));
            in_links[v].push(LinkId(i));
        }

        let mut junctions = vec![JunctionClass::RightOfWay; n];
        for (node, stages) in &self.stages {
            let j = *index.get(node).ok_or(GraphError::UnknownNode(*node))?;
            let bad = |reason: String| GraphError::InvalidStages { node: *node, reason };
            if stages.is_empty() {
                return Err(bad("signalized junction without stages".into()));
            }
            let mut resolved = Vec::with_capacity(stages.len());
            for stage in stages {
                if stage.is_empty() {
                    return Err(bad("empty stage".into()));
                }
                let mut links_in_stage = Vec::with_capacity(stage.len());
                for pred in stage {
                    let u = *index.get(pred).ok_or(GraphError::UnknownNode(*pred))?;
                    let l = pair_index
                        .get(&(u, j))
                        .ok_or_else(|| bad(format!("no incoming link from {pred}")))?;
                    links_in_stage.push(*l);
                }
                resolved.push(links_in_stage);
            }
            for l in &in_links[j] {
                if !resolved.iter().any(|s| s.contains(l)) {
                    let from = links[l.0].from;
                    return Err(bad(format!("incoming link from {from} is in no stage")));
                }
            }
            junctions[j] = JunctionClass::TrafficLight { stages: resolved };
        }

        let signal_timing = self.signal_timing.unwrap_or(opts.signal_timing);
        let st = signal_timing;
        if !(st.cycle_time_h > 0.0 && st.green_time_h > 0.0 && st.lost_time_h >= 0.0) {
            return Err(GraphError::InvalidSignalTiming("times must be positive".into()));
        }
        if st.green_time_h >= st.cycle_time_h {
            return Err(GraphError::InvalidSignalTiming(
                "green time must be shorter than the cycle".into(),
            ));
        }

        // District cover: every V2G node has a district, every district has a V2G node.
        let mut districts: BTreeMap<DistrictId, Vec<usize>> = BTreeMap::new();
        let mut referenced: BTreeSet<DistrictId> = BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(d) = node.district {
                referenced.insert(d);
                if node.is_v2g {
                    districts.entry(d).or_default().push(i);
                }
            } else if node.is_v2g {
                return Err(GraphError::V2gWithoutDistrict(node.id));
            }
            if node.is_sink_attractor && !node.is_terminal {
                return Err(GraphError::SinkNotTerminal(node.id));
            }
        }
        if let Some(d) = referenced.iter().find(|d| !districts.contains_key(d)) {
            return Err(GraphError::DistrictWithoutV2g(*d));
        }

        Ok(UrbanGraph {
            nodes: self.nodes.clone(),
            index,
            links,
            ends,
            pair_index,
            out_links,
            in_links,
            junctions,
            signal_timing,
            energy_rate_kwh_per_km: energy_rate,
            districts,
        })
    }
}

/// Directed urban road network. Immutable once built apart from the
/// per-km energy rate, which rescales every link's energy weight.
#[derive(Debug, Clone, PartialEq)]
pub struct UrbanGraph {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    links: Vec<Link>,
    ends: Vec<(usize, usize)>,
    pair_index: HashMap<(usize, usize), LinkId>,
    out_links: Vec<Vec<LinkId>>,
    in_links: Vec<Vec<LinkId>>,
    junctions: Vec<JunctionClass>,
    signal_timing: SignalTiming,
    energy_rate_kwh_per_km: f64,
    districts: BTreeMap<DistrictId, Vec<usize>>,
}

impl UrbanGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> {
        (0..self.links.len()).map(LinkId)
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node_at(&self, ix: usize) -> &Node {
        &self.nodes[ix]
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.node_index(id).map(|i| &self.nodes[i])
    }

    /// Dense (tail, head) node indices of a link.
    pub fn ends(&self, id: LinkId) -> (usize, usize) {
        self.ends[id.0]
    }

    pub fn outgoing(&self, node_ix: usize) -> &[LinkId] {
        &self.out_links[node_ix]
    }

    pub fn incoming(&self, node_ix: usize) -> &[LinkId] {
        &self.in_links[node_ix]
    }

    pub fn find_link(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        let (u, v) = (self.node_index(from)?, self.node_index(to)?);
        self.pair_index.get(&(u, v)).copied()
    }

    /// The opposite-direction link, if the road is two-way.
    pub fn reverse(&self, id: LinkId) -> Option<LinkId> {
        let (u, v) = self.ends[id.0];
        self.pair_index.get(&(v, u)).copied()
    }

    pub fn junction(&self, node_ix: usize) -> &JunctionClass {
        &self.junctions[node_ix]
    }

    pub fn signal_timing(&self) -> SignalTiming {
        self.signal_timing
    }

    pub fn energy_rate_kwh_per_km(&self) -> f64 {
        self.energy_rate_kwh_per_km
    }

    pub fn set_energy_rate(&mut self, rate_kwh_per_km: f64) {
        self.energy_rate_kwh_per_km = rate_kwh_per_km;
        for l in &mut self.links {
            l.energy_cost_kwh = rate_kwh_per_km * l.length_km;
        }
    }

    pub fn districts(&self) -> impl Iterator<Item = DistrictId> + '_ {
        self.districts.keys().copied()
    }

    /// V2G nodes of a district in ascending id order.
    pub fn district_v2g(&self, district: DistrictId) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .districts
            .get(&district)
            .map(|v| v.iter().map(|&i| self.nodes[i].id).collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    pub fn v2g_nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.nodes.iter().filter(|n| n.is_v2g).map(|n| n.id).collect();
        ids.sort();
        ids
    }

    pub fn sink_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_sink_attractor).collect()
    }

    /// Link count of signalized stages in which `link` holds the right of way,
    /// or `None` when its downstream junction is not signalized.
    pub fn stages_with_row(&self, link: LinkId) -> Option<usize> {
        let (_, head) = self.ends[link.0];
        match &self.junctions[head] {
            JunctionClass::RightOfWay => None,
            JunctionClass::TrafficLight { stages } => {
                Some(stages.iter().filter(|s| s.contains(&link)).count())
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-target backward Dijkstra: for every node, the minimum sum of
/// `weight` over a path from that node to any of `targets`. Links for which
/// `weight` returns `None` are skipped; unreachable nodes get `+inf`.
pub fn distances_to<F>(graph: &UrbanGraph, targets: &[usize], weight: F) -> Vec<f64>
where
    F: Fn(LinkId) -> Option<f64>,
{
    let mut dist = vec![f64::INFINITY; graph.node_count()];
    let mut heap = BinaryHeap::new();
    for &t in targets {
        dist[t] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: t });
    }
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &l in graph.incoming(node) {
            let Some(w) = weight(l) else { continue };
            let (tail, _) = graph.ends(l);
            let nd = w + d;
            if nd < dist[tail] {
                dist[tail] = nd;
                heap.push(HeapEntry { dist: nd, node: tail });
            }
        }
    }
    dist
}

/// Turning rates: for each incoming link, the fraction of its outflow sent
/// to each outgoing link of its downstream junction. Pairs not stored are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TurningRateMap {
    rows: Vec<Vec<(LinkId, f64)>>,
}

impl TurningRateMap {
    /// Builds a map from explicit per-incoming-link rows.
    pub fn from_rows(rows: Vec<Vec<(LinkId, f64)>>) -> Self {
        TurningRateMap { rows }
    }

    pub fn row(&self, incoming: LinkId) -> &[(LinkId, f64)] {
        &self.rows[incoming.0]
    }

    pub fn rate(&self, incoming: LinkId, outgoing: LinkId) -> f64 {
        self.rows[incoming.0]
            .iter()
            .find(|(l, _)| *l == outgoing)
            .map_or(0.0, |(_, r)| *r)
    }
}

/// Sink-directed turning rates with u-turns forbidden. Each candidate
/// outgoing link `(j, w)` is weighted `1 / (delta(w) + smoothing_km)`, with
/// `delta` the length-weighted distance from `w` to the nearest sink.
pub fn compute_turning_rates(graph: &UrbanGraph, smoothing_km: f64) -> TurningRateMap {
    let sinks = graph.sink_indices();
    if sinks.is_empty() {
        warn!("no sink attractors: turning rates fall back to uniform");
    }
    let delta = distances_to(graph, &sinks, |l| Some(graph.link(l).length_km));

    let mut rows = Vec::with_capacity(graph.link_count());
    let mut empty_rows = 0usize;
    for incoming in graph.link_ids() {
        let (upstream, j) = graph.ends(incoming);
        let candidates: Vec<LinkId> = graph
            .outgoing(j)
            .iter()
            .copied()
            .filter(|&out| graph.ends(out).1 != upstream)
            .collect();
        if candidates.is_empty() {
            empty_rows += 1;
            rows.push(Vec::new());
            continue;
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&out| 1.0 / (delta[graph.ends(out).1] + smoothing_km))
            .collect();
        let total: f64 = weights.iter().sum();
        let row = if total > 0.0 {
            candidates.into_iter().zip(weights.iter().map(|w| w / total)).collect()
        } else {
            let share = 1.0 / candidates.len() as f64;
            candidates.into_iter().map(|c| (c, share)).collect()
        };
        rows.push(row);
    }
    if empty_rows > 0 {
        warn!("{empty_rows} incoming link(s) have no admissible turn; their outflow leaves the network");
    }
    TurningRateMap { rows }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signal_timing: Option<SignalTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_rate_kwh_per_km: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: NodeId,
    #[serde(default)]
    is_v2g: bool,
    #[serde(default)]
    district: Option<DistrictId>,
    #[serde(default)]
    is_source: bool,
    #[serde(default)]
    is_terminal: bool,
    #[serde(default)]
    is_sink_attractor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tl_stages: Option<Vec<Vec<NodeId>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    from: NodeId,
    to: NodeId,
    length_km: f64,
    v_ff_kmh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sat_flow_vph: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity_veh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exit_rate: Option<f64>,
}

pub fn parse_graph(json: &str, opts: &GraphOptions) -> Result<UrbanGraph, GraphError> {
    let file: GraphFile = serde_json::from_str(json)?;
    let mut b = GraphBuilder::new();
    for n in &file.nodes {
        b.node(Node {
            id: n.id,
            is_v2g: n.is_v2g,
            district: n.district,
            is_source: n.is_source,
            is_terminal: n.is_terminal,
            is_sink_attractor: n.is_sink_attractor,
        });
        if let Some(stages) = &n.tl_stages {
            b.traffic_light(n.id, stages.clone());
        }
    }
    for e in file.edges {
        b.link(LinkSpec {
            from: e.from,
            to: e.to,
            length_km: e.length_km,
            free_flow_speed_kmh: e.v_ff_kmh,
            saturation_flow_vph: e.sat_flow_vph,
            capacity_veh: e.capacity_veh,
            exit_rate: e.exit_rate,
        });
    }
    if let Some(t) = file.signal_timing {
        b.signal_timing(t);
    }
    if let Some(r) = file.energy_rate_kwh_per_km {
        b.energy_rate(r);
    }
    b.build(opts)
}

pub fn load_graph_with(path: &Path, opts: &GraphOptions) -> Result<UrbanGraph, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_graph(&text, opts)
}

pub fn load_graph(path: &Path) -> Result<UrbanGraph, GraphError> {
    load_graph_with(path, &GraphOptions::default())
}

/// Serializes a graph with every derived attribute written out, so that
/// parsing the result reproduces the graph exactly.
pub fn graph_to_json(graph: &UrbanGraph) -> String {
    let nodes = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeRecord {
            id: n.id,
            is_v2g: n.is_v2g,
            district: n.district,
            is_source: n.is_source,
            is_terminal: n.is_terminal,
            is_sink_attractor: n.is_sink_attractor,
            tl_stages: match &graph.junctions[i] {
                JunctionClass::RightOfWay => None,
                JunctionClass::TrafficLight { stages } => Some(
                    stages
                        .iter()
                        .map(|s| s.iter().map(|l| graph.link(*l).from).collect())
                        .collect(),
                ),
            },
        })
        .collect();
    let edges = graph
        .links
        .iter()
        .map(|l| EdgeRecord {
            from: l.from,
            to: l.to,
            length_km: l.length_km,
            v_ff_kmh: l.free_flow_speed_kmh,
            sat_flow_vph: Some(l.saturation_flow_vph),
            capacity_veh: Some(l.capacity_veh),
            exit_rate: Some(l.exit_rate),
        })
        .collect();
    let file = GraphFile {
        nodes,
        edges,
        signal_timing: Some(graph.signal_timing),
        energy_rate_kwh_per_km: Some(graph.energy_rate_kwh_per_km),
    };
    serde_json::to_string_pretty(&file).expect("graph serialization cannot fail")
}

pub fn write_graph(graph: &UrbanGraph, path: &Path) -> Result<(), GraphError> {
    fs::write(path, graph_to_json(graph)).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> UrbanGraph {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0))
            .node(Node {
                is_v2g: true,
                district: Some(DistrictId(1)),
                ..Node::plain(1)
            })
            .node(Node::plain(2))
            .link(LinkSpec::new(0, 1, 0.7, 50.0))
            .link(LinkSpec::new(1, 2, 1.4, 50.0));
        b.build(&GraphOptions::default()).unwrap()
    }

    #[test]
    fn three_node_file_loads() {
        let json = r#"{
            "nodes": [
                {"id": 0, "is_v2g": false, "district": null, "is_source": false, "is_terminal": false, "is_sink_attractor": false},
                {"id": 1, "is_v2g": true, "district": 1, "is_source": false, "is_terminal": false, "is_sink_attractor": false},
                {"id": 2, "is_v2g": false, "district": null, "is_source": false, "is_terminal": false, "is_sink_attractor": false}
            ],
            "edges": [
                {"from": 0, "to": 1, "length_km": 0.7, "v_ff_kmh": 50},
                {"from": 1, "to": 2, "length_km": 1.4, "v_ff_kmh": 50}
            ]
        }"#;
        let g = parse_graph(json, &GraphOptions::default()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.link_count(), 2);
        assert_eq!(g.district_v2g(DistrictId(1)), vec![NodeId(1)]);
        assert_eq!(g, chain());
    }

    #[test]
    fn capacity_is_derived_from_spacing() {
        let g = chain();
        assert!((g.link(LinkId(0)).capacity_veh - 100.0).abs() < 1e-9);
        assert!((g.link(LinkId(1)).capacity_veh - 200.0).abs() < 1e-9);
        assert!((derive_capacity(0.007, 0.007) - 1.0).abs() < 1e-12);
        assert!((g.link(LinkId(0)).energy_cost_kwh - 0.084).abs() < 1e-12);
    }

    #[test]
    fn explicit_capacity_overrides_derivation() {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0)).node(Node::plain(1)).link(LinkSpec {
            capacity_veh: Some(12.0),
            ..LinkSpec::new(0, 1, 0.7, 50.0)
        });
        let g = b.build(&GraphOptions::default()).unwrap();
        assert_eq!(g.link(LinkId(0)).capacity_veh, 12.0);
    }

    #[test]
    fn dangling_endpoint_is_rejected() {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0)).link(LinkSpec::new(0, 25, 1.0, 50.0));
        match b.build(&GraphOptions::default()) {
            Err(GraphError::DanglingEndpoint { missing, .. }) => assert_eq!(missing, NodeId(25)),
            other => panic!("expected dangling endpoint, got {other:?}"),
        }
    }

    #[test]
    fn self_loop_is_rejected() {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0)).link(LinkSpec::new(0, 0, 1.0, 50.0));
        assert!(matches!(b.build(&GraphOptions::default()), Err(GraphError::SelfLoop(_))));
    }

    #[test]
    fn district_without_v2g_is_rejected() {
        let mut b = GraphBuilder::new();
        b.node(Node {
            district: Some(DistrictId(3)),
            ..Node::plain(0)
        });
        assert!(matches!(
            b.build(&GraphOptions::default()),
            Err(GraphError::DistrictWithoutV2g(DistrictId(3)))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"nodes": [{"id": 0, "colour": "red"}], "edges": []}"#;
        assert!(matches!(
            parse_graph(json, &GraphOptions::default()),
            Err(GraphError::Parse(_))
        ));
    }

    #[test]
    fn every_incoming_link_must_have_a_stage() {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0))
            .node(Node::plain(1))
            .node(Node::plain(2))
            .link(LinkSpec::new(0, 1, 0.5, 50.0))
            .link(LinkSpec::new(2, 1, 0.5, 50.0))
            .traffic_light(NodeId(1), vec![vec![NodeId(0)]]);
        assert!(matches!(
            b.build(&GraphOptions::default()),
            Err(GraphError::InvalidStages { .. })
        ));
    }

    #[test]
    fn terminal_links_default_to_full_exit() {
        let mut b = GraphBuilder::new();
        b.node(Node::plain(0)).node(Node {
            is_terminal: true,
            ..Node::plain(1)
        });
        b.two_way(0, 1, 0.3, 50.0);
        let g = b.build(&GraphOptions::default()).unwrap();
        let into_terminal = g.find_link(NodeId(0), NodeId(1)).unwrap();
        let out_of_terminal = g.find_link(NodeId(1), NodeId(0)).unwrap();
        assert_eq!(g.link(into_terminal).exit_rate, 1.0);
        assert_eq!(g.link(out_of_terminal).exit_rate, 0.0);
    }

    fn star(delta_near: f64, delta_far: f64) -> UrbanGraph {
        // 0 -> 1, then 1 -> 2 (near sink 4) and 1 -> 3 (far sink 5); also 1 -> 0.
        let mut b = GraphBuilder::new();
        for i in 0..4 {
            b.node(Node::plain(i));
        }
        for i in [4, 5] {
            b.node(Node {
                is_terminal: true,
                is_sink_attractor: true,
                ..Node::plain(i)
            });
        }
        b.two_way(0, 1, 0.5, 50.0)
            .link(LinkSpec::new(1, 2, 0.5, 50.0))
            .link(LinkSpec::new(1, 3, 0.5, 50.0))
            .link(LinkSpec::new(2, 4, delta_near, 50.0))
            .link(LinkSpec::new(3, 5, delta_far, 50.0));
        b.build(&GraphOptions::default()).unwrap()
    }

    #[test]
    fn inverse_distance_turning_rates() {
        let g = star(1.0, 3.0);
        let rates = compute_turning_rates(&g, 0.1);
        let inc = g.find_link(NodeId(0), NodeId(1)).unwrap();
        let near = g.find_link(NodeId(1), NodeId(2)).unwrap();
        let far = g.find_link(NodeId(1), NodeId(3)).unwrap();
        let back = g.find_link(NodeId(1), NodeId(0)).unwrap();
        // 1/1.1 and 1/3.1, normalized.
        let (a, b) = (1.0 / 1.1, 1.0 / 3.1);
        assert!((rates.rate(inc, near) - a / (a + b)).abs() < 1e-12);
        assert!((rates.rate(inc, far) - b / (a + b)).abs() < 1e-12);
        assert!((rates.rate(inc, near) - 0.738).abs() < 5e-4);
        assert_eq!(rates.rate(inc, back), 0.0);
    }

    #[test]
    fn u_turn_is_banned_and_single_candidate_takes_all() {
        let mut b = GraphBuilder::new();
        for i in 0..3 {
            b.node(Node::plain(i));
        }
        b.node(Node {
            is_terminal: true,
            is_sink_attractor: true,
            ..Node::plain(3)
        });
        b.two_way(0, 1, 0.5, 50.0).two_way(1, 2, 0.5, 50.0).link(LinkSpec::new(2, 3, 0.2, 50.0));
        let g = b.build(&GraphOptions::default()).unwrap();
        let rates = compute_turning_rates(&g, 0.1);
        let inc = g.find_link(NodeId(0), NodeId(1)).unwrap();
        let fwd = g.find_link(NodeId(1), NodeId(2)).unwrap();
        let back = g.find_link(NodeId(1), NodeId(0)).unwrap();
        assert_eq!(rates.rate(inc, back), 0.0);
        assert_eq!(rates.rate(inc, fwd), 1.0);
    }

    #[test]
    fn unreachable_sinks_give_uniform_rates() {
        let mut b = GraphBuilder::new();
        for i in 0..4 {
            b.node(Node::plain(i));
        }
        b.link(LinkSpec::new(0, 1, 0.5, 50.0))
            .link(LinkSpec::new(1, 2, 0.5, 50.0))
            .link(LinkSpec::new(1, 3, 0.9, 50.0));
        let g = b.build(&GraphOptions::default()).unwrap();
        let rates = compute_turning_rates(&g, 0.1);
        let row = rates.row(LinkId(0));
        assert_eq!(row.len(), 2);
        assert!(row.iter().all(|(_, r)| (*r - 0.5).abs() < 1e-15));
    }

    #[test]
    fn round_trip_through_json() {
        let mut b = GraphBuilder::new();
        b.node(Node {
            is_source: true,
            ..Node::plain(0)
        })
        .node(Node {
            is_v2g: true,
            district: Some(DistrictId(2)),
            ..Node::plain(1)
        })
        .node(Node {
            is_terminal: true,
            is_sink_attractor: true,
            ..Node::plain(2)
        })
        .two_way(0, 1, 0.123456789, 47.3)
        .two_way(1, 2, 0.3, 30.0)
        .traffic_light(NodeId(1), vec![vec![NodeId(0)], vec![NodeId(2), NodeId(0)]])
        .energy_rate(0.15);
        let g = b.build(&GraphOptions::default()).unwrap();
        let back = parse_graph(&graph_to_json(&g), &GraphOptions::default()).unwrap();
        assert_eq!(g, back);
    }
}
