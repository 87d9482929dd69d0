//! Receding-horizon speed control along a planned path.
//!
//! Over a horizon of `N` steps the controller picks speeds `u_0..u_{N-1}`
//! minimizing `sum_{h<N} (1 - p_h)` subject to
//!
//! * progress `p_{h+1} = p_h + u_h dt_h / L` with `p_0` measured and `p_N = 1`,
//! * discharge `E_{h+1} = E_h - (eta1 u_h + eta2 u_h^2) dt_h` with `E_N >= floor`,
//! * `0 <= u_h <= v_cap`.
//!
//! Writing `d = L (1 - p_0)` for the remaining distance, the cost equals a
//! constant minus `(1/L) sum_h (N - 1 - h) u_h dt_h`, the linear part of the
//! energy budget is fixed at `eta1 d`, and what remains is a linear program
//! with one convex quadratic constraint `eta2 sum u_h^2 dt_h <= Q`. When the
//! front-loaded (greedy) profile meets it, that profile is optimal; otherwise
//! the optimum has the KKT form `u_h = clip((N - 1 - h - mu) / kappa, 0, v_cap)`,
//! found by bisection on `kappa` with `mu` solved exactly for each trial.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::time::Instant;

use crate::dispatch::{ControlDecision, SpeedControl};
use crate::fleet::{discharge_step, EnergyCoefficients, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcProblem {
    pub horizon_steps: usize,
    /// Duration of every step but the last (h).
    pub dt_h: f64,
    /// Duration of the last step (h); absorbs any remainder of the window.
    pub final_dt_h: f64,
    pub path_length_km: f64,
    pub speed_cap_kmh: f64,
    pub p0: f64,
    pub e0_kwh: f64,
    pub coeffs: EnergyCoefficients,
    pub energy_floor_kwh: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC problem: {0}")]
    InvalidProblem(String),
}

impl MpcProblem {
    /// Problem over the window `[t_j, t_pr]` sampled every `dt_h`. The
    /// horizon is `round((t_pr - t_j) / dt_h)`, at least one step, with the
    /// last step stretched or shortened to end exactly at `t_pr`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_window(
        t_j_h: f64,
        t_pr_h: f64,
        dt_h: f64,
        path_length_km: f64,
        speed_cap_kmh: f64,
        p0: f64,
        e0_kwh: f64,
        coeffs: EnergyCoefficients,
        energy_floor_kwh: f64,
    ) -> Self {
        let window = t_pr_h - t_j_h;
        let steps = ((window / dt_h).round() as usize).max(1);
        let final_dt_h = window - (steps - 1) as f64 * dt_h;
        MpcProblem {
            horizon_steps: steps,
            dt_h,
            final_dt_h,
            path_length_km,
            speed_cap_kmh,
            p0,
            e0_kwh,
            coeffs,
            energy_floor_kwh,
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |s: &str| Err(MpcError::InvalidProblem(s.to_string()));
        if self.horizon_steps == 0 {
            return bad("horizon must have at least one step");
        }
        if !(self.dt_h > 0.0 && self.final_dt_h > 0.0) {
            return bad("step durations must be positive");
        }
        if !(self.path_length_km > 0.0) {
            return bad("path length must be positive");
        }
        if !(self.speed_cap_kmh >= 0.0) {
            return bad("speed cap must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return bad("initial progress must lie in [0, 1]");
        }
        if !(self.energy_floor_kwh >= 0.0) {
            return bad("energy floor must be non-negative");
        }
        Ok(())
    }

    pub fn step_duration(&self, h: usize) -> f64 {
        if h + 1 == self.horizon_steps {
            self.final_dt_h
        } else {
            self.dt_h
        }
    }

    pub fn durations(&self) -> Vec<f64> {
        (0..self.horizon_steps).map(|h| self.step_duration(h)).collect()
    }

    pub fn remaining_km(&self) -> f64 {
        self.path_length_km * (1.0 - self.p0)
    }

    /// Progress trajectory `p_0..p_N` driven by `speeds`.
    pub fn progress_trajectory(&self, speeds: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(speeds.len() + 1);
        p.push(self.p0);
        for (h, u) in speeds.iter().enumerate() {
            let last = *p.last().unwrap();
            p.push(last + u * self.step_duration(h) / self.path_length_km);
        }
        p
    }

    /// Mobility-energy trajectory `E_0..E_N` driven by `speeds`.
    pub fn energy_trajectory(&self, speeds: &[f64]) -> Vec<f64> {
        let mut e = Vec::with_capacity(speeds.len() + 1);
        e.push(self.e0_kwh);
        for (h, u) in speeds.iter().enumerate() {
            let last = *e.last().unwrap();
            e.push(discharge_step(last, *u, self.step_duration(h), &self.coeffs));
        }
        e
    }

    /// `sum_{h<N} (1 - p_h)` of a progress trajectory.
    pub fn cost_of(progress: &[f64]) -> f64 {
        progress[..progress.len() - 1].iter().map(|p| 1.0 - p).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub speeds_kmh: Vec<f64>,
    /// `p_0..p_N`.
    pub predicted_progress: Vec<f64>,
    /// `E_0..E_N`.
    pub predicted_energy: Vec<f64>,
    pub cost: f64,
}

impl SpeedProfile {
    pub fn first_speed(&self) -> f64 {
        self.speeds_kmh.first().copied().unwrap_or(0.0)
    }
}

/// The constraint that rules out every speed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "binding", rename_all = "snake_case")]
pub enum InfeasibleCertificate {
    /// Driving at the cap for the whole window falls short of the target.
    Deadline { reachable_km: f64, remaining_km: f64 },
    /// The least-energy traversal (uniform speed) needs more than is available.
    Energy { min_energy_kwh: f64, available_kwh: f64 },
}

fn rel_tol(x: f64) -> f64 {
    1e-12 * x.abs().max(1.0)
}

/// Optimal speed profile, or the binding constraint when none exists.
pub fn solve_mpc(problem: &MpcProblem) -> Result<SpeedProfile, InfeasibleCertificate> {
    let n = problem.horizon_steps;
    let durations = problem.durations();
    let window: f64 = durations.iter().sum();
    let remaining = problem.remaining_km();
    let cap = problem.speed_cap_kmh;

    let finish = |speeds: Vec<f64>| {
        let predicted_progress = problem.progress_trajectory(&speeds);
        let predicted_energy = problem.energy_trajectory(&speeds);
        let cost = MpcProblem::cost_of(&predicted_progress);
        SpeedProfile {
            speeds_kmh: speeds,
            predicted_progress,
            predicted_energy,
            cost,
        }
    };

    if remaining <= 0.0 {
        return Ok(finish(vec![0.0; n]));
    }

    let reachable = cap * window;
    if reachable < remaining - rel_tol(remaining) {
        return Err(InfeasibleCertificate::Deadline {
            reachable_km: reachable,
            remaining_km: remaining,
        });
    }

    let eta1 = problem.coeffs.eta1;
    let eta2 = problem.coeffs.eta2;
    let available = problem.e0_kwh - problem.energy_floor_kwh;
    let uniform = (remaining / window).min(cap);
    let min_energy = eta1 * remaining + eta2 * uniform * uniform * window;
    if min_energy > available + rel_tol(available) {
        return Err(InfeasibleCertificate::Energy {
            min_energy_kwh: min_energy,
            available_kwh: available,
        });
    }
    // Budget left for the quadratic term.
    let quad_budget = (available - eta1 * remaining) / eta2;
    let quad = |speeds: &[f64]| -> f64 {
        speeds.iter().zip(&durations).map(|(u, dt)| u * u * dt).sum()
    };

    let greedy = front_loaded(&durations, cap, remaining);
    if quad(&greedy) <= quad_budget {
        return Ok(finish(greedy));
    }

    let weights: Vec<f64> = (0..n).map(|h| (n - 1 - h) as f64).collect();
    let profile = |kappa: f64| kkt_profile(&weights, &durations, cap, remaining, kappa);

    // Energy use falls as kappa grows (profiles flatten toward uniform).
    let (mut lo, mut hi) = (1e-12f64.ln(), 1e12f64.ln());
    if quad(&profile(hi.exp())) > quad_budget {
        let mut flat = vec![uniform; n];
        close_distance(&mut flat, &durations, cap, remaining);
        return Ok(finish(flat));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if quad(&profile(mid.exp())) > quad_budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(finish(profile(hi.exp())))
}

/// Cap speed from the first step until the distance is covered.
fn front_loaded(durations: &[f64], cap: f64, remaining: f64) -> Vec<f64> {
    let mut left = remaining;
    let mut speeds = Vec::with_capacity(durations.len());
    for &dt in durations {
        let u = if left <= 0.0 { 0.0 } else { (left / dt).min(cap) };
        left -= u * dt;
        speeds.push(u);
    }
    close_distance(&mut speeds, durations, cap, remaining);
    speeds
}

/// `clip((w_h - mu) / kappa, 0, cap)` with `mu` chosen so the profile covers
/// `remaining` exactly.
fn kkt_profile(weights: &[f64], durations: &[f64], cap: f64, remaining: f64, kappa: f64) -> Vec<f64> {
    let speeds_at = |mu: f64| -> Vec<f64> {
        weights.iter().map(|w| ((w - mu) / kappa).clamp(0.0, cap)).collect()
    };
    let covered = |mu: f64| -> f64 {
        weights
            .iter()
            .zip(durations)
            .map(|(w, dt)| ((w - mu) / kappa).clamp(0.0, cap) * dt)
            .sum()
    };

    // covered(mu) is piecewise linear and non-increasing; its breakpoints are
    // where a step leaves zero or reaches the cap.
    let mut breaks: Vec<f64> = weights
        .iter()
        .flat_map(|w| [*w, w - kappa * cap])
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    // Find adjacent breakpoints bracketing the target distance.
    let mut lo = breaks[0];
    let mut hi = *breaks.last().unwrap();
    for pair in breaks.windows(2) {
        if covered(pair[0]) >= remaining && covered(pair[1]) <= remaining {
            lo = pair[0];
            hi = pair[1];
            break;
        }
    }
    let (c_lo, c_hi) = (covered(lo), covered(hi));
    let mu = if (c_lo - c_hi).abs() > 0.0 {
        lo + (c_lo - remaining) / (c_lo - c_hi) * (hi - lo)
    } else {
        lo
    };
    let mut speeds = speeds_at(mu);
    close_distance(&mut speeds, durations, cap, remaining);
    speeds
}

/// Absorbs rounding so the profile covers exactly `remaining`: the residual
/// goes to the latest step with room to take it.
fn close_distance(speeds: &mut [f64], durations: &[f64], cap: f64, remaining: f64) {
    let covered: f64 = speeds.iter().zip(durations).map(|(u, dt)| u * dt).sum();
    let mut residual = remaining - covered;
    if residual == 0.0 {
        return;
    }
    for h in (0..speeds.len()).rev() {
        let adjusted = (speeds[h] + residual / durations[h]).clamp(0.0, cap);
        if speeds[h] > 0.0 || residual > 0.0 {
            residual -= (adjusted - speeds[h]) * durations[h];
            speeds[h] = adjusted;
        }
        if residual.abs() <= f64::EPSILON * remaining {
            break;
        }
    }
}

/// What the controller observes about one vehicle at a control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcMeasurement {
    pub t_j_h: f64,
    pub t_pr_h: f64,
    pub dt_h: f64,
    /// Measured progress along the current route.
    pub p_hat: f64,
    pub e_mob_kwh: f64,
    pub path_length_km: f64,
    pub speed_cap_kmh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSettings {
    /// Discharge model used for prediction.
    pub coeffs: EnergyCoefficients,
    pub energy_floor_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolverStatus {
    Solved,
    AtTarget,
    Infeasible(InfeasibleCertificate),
}

impl SolverStatus {
    pub fn label(&self) -> &'static str {
        match self {
            SolverStatus::Solved => "solved",
            SolverStatus::AtTarget => "at_target",
            SolverStatus::Infeasible(InfeasibleCertificate::Deadline { .. }) => "infeasible_deadline",
            SolverStatus::Infeasible(InfeasibleCertificate::Energy { .. }) => "infeasible_energy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecedingStep {
    pub applied_kmh: f64,
    pub status: SolverStatus,
    pub profile: Option<SpeedProfile>,
}

/// One receding-horizon step: solve over `[t_j, t_pr]` and apply the first
/// speed. Without a solution the vehicle drives at its cap.
pub fn receding_step(m: &MpcMeasurement, settings: &MpcSettings) -> RecedingStep {
    let mut p0 = m.p_hat;
    if p0 > 1.0 {
        log::debug!("progress overshoot {p0} clamped to 1");
        p0 = 1.0;
    }
    if p0 >= 1.0 || m.path_length_km <= 0.0 {
        return RecedingStep {
            applied_kmh: 0.0,
            status: SolverStatus::AtTarget,
            profile: None,
        };
    }
    let problem = MpcProblem::for_window(
        m.t_j_h,
        m.t_pr_h,
        m.dt_h,
        m.path_length_km,
        m.speed_cap_kmh,
        p0.max(0.0),
        m.e_mob_kwh,
        settings.coeffs,
        settings.energy_floor_kwh,
    );
    match solve_mpc(&problem) {
        Ok(profile) => RecedingStep {
            applied_kmh: profile.first_speed(),
            status: SolverStatus::Solved,
            profile: Some(profile),
        },
        Err(cert) => {
            log::warn!("t={:.4} h: speed control infeasible ({cert:?}); driving at cap", m.t_j_h);
            RecedingStep {
                applied_kmh: m.speed_cap_kmh,
                status: SolverStatus::Infeasible(cert),
                profile: None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcTraceRow {
    pub t_h: f64,
    pub p_hat: f64,
    pub e_mob_kwh: f64,
    pub applied_kmh: f64,
    pub status: SolverStatus,
    /// Wall-clock solve time (s), when recorded.
    pub solve_time_s: Option<f64>,
}

/// Receding-horizon controller for a whole fleet, keeping a per-vehicle trace.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub settings: MpcSettings,
    pub record_solve_times: bool,
    pub traces: BTreeMap<VehicleId, Vec<MpcTraceRow>>,
}

impl MpcController {
    pub fn new(settings: MpcSettings) -> Self {
        MpcController {
            settings,
            record_solve_times: false,
            traces: BTreeMap::new(),
        }
    }
}

impl SpeedControl for MpcController {
    fn control(&mut self, vehicle: VehicleId, m: &MpcMeasurement) -> ControlDecision {
        let started = Instant::now();
        let step = receding_step(m, &self.settings);
        let solve_time_s = self.record_solve_times.then(|| started.elapsed().as_secs_f64());
        self.traces.entry(vehicle).or_default().push(MpcTraceRow {
            t_h: m.t_j_h,
            p_hat: m.p_hat,
            e_mob_kwh: m.e_mob_kwh,
            applied_kmh: step.applied_kmh,
            status: step.status,
            solve_time_s,
        });
        ControlDecision {
            speed_kmh: step.applied_kmh,
            infeasible: matches!(step.status, SolverStatus::Infeasible(_)),
        }
    }
}

pub fn write_mpc_trace_csv<W: Write>(w: &mut W, rows: &[MpcTraceRow]) -> io::Result<()> {
    writeln!(w, "t_h,p_hat,e_mob_kwh,applied_kmh,status,solve_time_s")?;
    for r in rows {
        let solve = r.solve_time_s.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t_h,
            r.p_hat,
            r.e_mob_kwh,
            r.applied_kmh,
            r.status.label(),
            solve
        )?;
    }
    Ok(())
}
