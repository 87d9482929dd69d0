//! Synthetic grid cities for tests and demos.
//!
//! Nodes sit on a `rows x cols` grid joined by two-way links. Traffic enters
//! on the west edge and leaves on the east edge; the two south-east corner
//! nodes attract traffic. One central district holds the V2G nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{DistrictId, GraphBuilder, GraphError, GraphOptions, Node, NodeId, UrbanGraph};

/// District holding every generated V2G node.
pub const CITY_DISTRICT: DistrictId = DistrictId(1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CitySpec {
    pub nodes: usize,
    pub v2g: usize,
    pub seed: u64,
}

impl CitySpec {
    pub fn new(nodes: usize, v2g: usize, seed: u64) -> Self {
        CitySpec { nodes, v2g, seed }
    }

    /// Grid shape: as square as possible with at least `nodes` nodes.
    pub fn shape(&self) -> (usize, usize) {
        let rows = ((self.nodes as f64).sqrt().round() as usize).max(3);
        let cols = self.nodes.div_ceil(rows).max(3);
        (rows, cols)
    }
}

pub fn gen_city(spec: &CitySpec, opts: &GraphOptions) -> Result<UrbanGraph, GraphError> {
    let (rows, cols) = spec.shape();
    let id = |r: usize, c: usize| (r * cols + c) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let v2g = v2g_positions(rows, cols, spec.v2g);
    let mut b = GraphBuilder::new();
    for r in 0..rows {
        for c in 0..cols {
            let is_v2g = v2g.contains(&(r, c));
            let east = c + 1 == cols;
            b.node(Node {
                is_v2g,
                district: is_v2g.then_some(CITY_DISTRICT),
                is_source: c == 0,
                is_terminal: east,
                is_sink_attractor: east && r + 2 >= rows,
                ..Node::plain(id(r, c))
            });
        }
    }

    // Every third row and column is an arterial.
    let speed = |k: usize| if k % 3 == 1 { 50.0 } else { 30.0 };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                b.two_way(id(r, c), id(r, c + 1), rng.gen_range(0.12..=0.30), speed(r));
            }
            if r + 1 < rows {
                b.two_way(id(r, c), id(r + 1, c), rng.gen_range(0.12..=0.30), speed(c));
            }
        }
    }

    // Two-stage signals where arterials cross, away from the boundary.
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            if r % 3 == 1 && c % 3 == 1 {
                let horizontal = vec![NodeId(id(r, c - 1)), NodeId(id(r, c + 1))];
                let vertical = vec![NodeId(id(r - 1, c)), NodeId(id(r + 1, c))];
                b.traffic_light(NodeId(id(r, c)), vec![horizontal, vertical]);
            }
        }
    }
    b.build(opts)
}

/// V2G nodes spread over the central third of the grid: the corners of the
/// central box first, then its edge midpoints and centre.
fn v2g_positions(rows: usize, cols: usize, k: usize) -> Vec<(usize, usize)> {
    let (r1, r2) = (rows / 3, (2 * rows) / 3);
    let (c1, c2) = ((cols / 3).max(1), ((2 * cols) / 3).min(cols - 2));
    let (rm, cm) = ((r1 + r2) / 2, (c1 + c2) / 2);
    let mut candidates = vec![
        (r1, c1),
        (r2, c2),
        (r1, c2),
        (r2, c1),
        (rm, cm),
        (r1, cm),
        (r2, cm),
        (rm, c1),
        (rm, c2),
    ];
    // Any further nodes come from the central box in row-major order.
    for r in r1..=r2 {
        for c in c1..=c2 {
            candidates.push((r, c));
        }
    }
    let mut out = Vec::with_capacity(k);
    for p in candidates {
        if out.len() == k {
            break;
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}
