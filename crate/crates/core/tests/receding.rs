use v2g_dispatch::fleet::{discharge_step, EnergyCoefficients};
use v2g_dispatch::mpc::{receding_step, MpcMeasurement, MpcProblem, MpcSettings, SolverStatus};

const DT: f64 = 0.005;

fn settings() -> MpcSettings {
    MpcSettings {
        coeffs: EnergyCoefficients::default(),
        energy_floor_kwh: 0.0,
    }
}

/// Applies the controller at every step and integrates the plant exactly.
fn closed_loop(mut m: MpcMeasurement, steps: usize) -> Vec<f64> {
    let mut applied = Vec::new();
    for _ in 0..steps {
        let s = receding_step(&m, &settings());
        assert_eq!(s.status, SolverStatus::Solved);
        applied.push(s.applied_kmh);
        m.p_hat += s.applied_kmh * DT / m.path_length_km;
        m.e_mob_kwh = discharge_step(m.e_mob_kwh, s.applied_kmh, DT, &settings().coeffs);
        m.t_j_h += DT;
    }
    applied
}

#[test]
fn on_schedule_at_the_cap_keeps_constant_speed() {
    // 2 km in 0.1 h needs exactly the 20 km/h cap.
    let m = MpcMeasurement {
        t_j_h: 0.0,
        t_pr_h: 0.1,
        dt_h: DT,
        p_hat: 0.0,
        e_mob_kwh: 20.0,
        path_length_km: 2.0,
        speed_cap_kmh: 20.0,
    };
    for u in closed_loop(m, 15) {
        assert!((u - 20.0).abs() < 1e-9, "{u}");
    }
}

#[test]
fn on_schedule_with_least_energy_keeps_constant_speed() {
    // Energy for exactly the uniform 20 km/h profile.
    let c = EnergyCoefficients::default();
    let e0 = (c.eta1 * 20.0 + c.eta2 * 400.0) * 0.1 * (1.0 + 1e-13);
    let m = MpcMeasurement {
        t_j_h: 0.0,
        t_pr_h: 0.1,
        dt_h: DT,
        p_hat: 0.0,
        e_mob_kwh: e0,
        path_length_km: 2.0,
        speed_cap_kmh: 50.0,
    };
    // Speed deviations scale with the square root of the energy slack.
    for u in closed_loop(m, 15) {
        assert!((u - 20.0).abs() < 1e-3, "{u}");
    }
}

#[test]
fn progress_jump_never_speeds_up_the_plan() {
    let m = MpcMeasurement {
        t_j_h: 0.0,
        t_pr_h: 0.05,
        dt_h: DT,
        p_hat: 0.0,
        e_mob_kwh: 20.0,
        path_length_km: 1.2,
        speed_cap_kmh: 30.0,
    };
    let first = receding_step(&m, &settings()).profile.unwrap();
    let next = MpcMeasurement {
        t_j_h: DT,
        p_hat: first.predicted_progress[1] + 0.1,
        e_mob_kwh: first.predicted_energy[1],
        ..m
    };
    let second = receding_step(&next, &settings()).profile.unwrap();
    assert_eq!(second.speeds_kmh.len(), first.speeds_kmh.len() - 1);
    for (h, u) in second.speeds_kmh.iter().enumerate() {
        assert!(*u <= first.speeds_kmh[h + 1] + 1e-9, "step {h}: {u} > {}", first.speeds_kmh[h + 1]);
    }
    assert!(second.speeds_kmh.iter().sum::<f64>() < first.speeds_kmh[1..].iter().sum::<f64>());
}

#[test]
fn short_remaining_window_uses_one_step() {
    let p = MpcProblem::for_window(
        0.1,
        0.1 + 0.3 * DT,
        DT,
        1.0,
        30.0,
        0.99,
        10.0,
        EnergyCoefficients::default(),
        0.0,
    );
    assert_eq!(p.horizon_steps, 1);
    assert!((p.final_dt_h - 0.3 * DT).abs() < 1e-15);
}

#[test]
fn finished_route_stops_the_vehicle() {
    let m = MpcMeasurement {
        t_j_h: 0.01,
        t_pr_h: 0.1,
        dt_h: DT,
        p_hat: 1.0 + 1e-12,
        e_mob_kwh: 5.0,
        path_length_km: 1.0,
        speed_cap_kmh: 30.0,
    };
    let s = receding_step(&m, &settings());
    assert_eq!(s.applied_kmh, 0.0);
    assert_eq!(s.status, SolverStatus::AtTarget);
}
