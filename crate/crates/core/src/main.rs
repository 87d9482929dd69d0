#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use v2g_dispatch::citygen::{gen_city, CitySpec};
use v2g_dispatch::network::{load_graph_with, write_graph, GraphOptions, NodeId};
use v2g_dispatch::rcsp::{solve_rcsp_with, write_frontier_csv, Budgets, EdgeWeights, RcspOptions};
use v2g_dispatch::scenario::{self, init_fleet, ScenarioConfig};
use v2g_dispatch::traffic::TrafficState;

#[derive(Parser)]
#[command(version, about = "Traffic-aware V2G fleet dispatch simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a dispatch scenario and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Fleet file; drawn from the config's fleet_init when absent.
        #[arg(long)]
        fleet: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides fleet_init.rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-step link flows to flows.csv.
        #[arg(long)]
        flow_csv: bool,
    },
    /// Check a config and graph without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Write a synthetic grid city.
    GenCity {
        #[arg(long, default_value_t = 100)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        v2g: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "city.json")]
        out: PathBuf,
    },
    /// Solve one constrained shortest path on a graph.
    Route {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        from: u32,
        #[arg(long)]
        to: u32,
        #[arg(long, default_value_t = f64::INFINITY)]
        time_budget_h: f64,
        #[arg(long, default_value_t = f64::INFINITY)]
        energy_budget_kwh: f64,
        /// Uniform occupancy fraction used for travel times.
        #[arg(long, default_value_t = 0.0)]
        occupancy: f64,
        /// Write the per-node Pareto frontier to this CSV file.
        #[arg(long)]
        frontier: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            graph,
            fleet,
            out,
            seed,
            flow_csv,
        } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.fleet_init.rng_seed = seed;
            }
            let metrics = scenario::run(&cfg, &graph, fleet.as_deref(), &out, flow_csv)
                .with_context(|| format!("running {}", config.display()))?;
            println!(
                "delivered {:.3} of {:.3} kWh (request {}), {} vehicle(s) dispatched; outputs in {}",
                metrics.delivered_kwh,
                metrics.request_kwh,
                if metrics.request_met { "met" } else { "not met" },
                metrics.vehicles.len(),
                out.display()
            );
        }
        Command::Validate { config, graph } => {
            let cfg = ScenarioConfig::load(&config)?;
            let g = load_graph_with(&graph, &cfg.graph_options())
                .with_context(|| format!("loading {}", graph.display()))?;
            cfg.validate_with_graph(&g)?;
            init_fleet(&cfg.fleet_init, &g)?;
            println!(
                "ok: {} nodes, {} links, {} V2G node(s) in district {}",
                g.node_count(),
                g.link_count(),
                g.district_v2g(cfg.dispatch.district).len(),
                cfg.dispatch.district.0
            );
        }
        Command::GenCity {
            nodes,
            v2g,
            seed,
            out,
        } => {
            let g = gen_city(&CitySpec::new(nodes, v2g, seed), &GraphOptions::default())?;
            write_graph(&g, &out)?;
            println!("wrote {} nodes, {} links to {}", g.node_count(), g.link_count(), out.display());
        }
        Command::Route {
            graph,
            from,
            to,
            time_budget_h,
            energy_budget_kwh,
            occupancy,
            frontier,
        } => {
            if !(0.0..=1.0).contains(&occupancy) {
                bail!("occupancy must lie in [0, 1]");
            }
            let g = load_graph_with(&graph, &GraphOptions::default())?;
            let state = TrafficState::uniform_occupancy(&g, occupancy, 1.0);
            let weights = EdgeWeights::from_traffic(&g, &state.x);
            let outcome = solve_rcsp_with(
                &g,
                &weights,
                NodeId(from),
                NodeId(to),
                Budgets::new(time_budget_h, energy_budget_kwh),
                RcspOptions::default(),
            );
            if let Some(path) = frontier {
                let mut w = BufWriter::new(File::create(&path)?);
                write_frontier_csv(&mut w, &outcome.frontier)?;
            }
            match outcome.result {
                Ok(p) => {
                    let nodes: Vec<String> = p.nodes(&g).iter().map(|n| n.to_string()).collect();
                    println!(
                        "{} | {:.6} h, {:.6} kWh, {:.3} km",
                        nodes.join(" -> "),
                        p.cost_h,
                        p.energy_kwh,
                        p.length_km
                    );
                }
                Err(reason) => bail!("no feasible path: {reason}"),
            }
        }
    }
    Ok(())
}
