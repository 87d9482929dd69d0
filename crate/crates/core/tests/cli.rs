use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_v2g-dispatch"))
}

#[test]
fn gen_city_validate_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city.json");
    let config = dir.path().join("config.json");
    let out = dir.path().join("out");
    fs::write(&config, "{}").unwrap();

    let status = bin()
        .args(["gen-city", "--nodes", "100", "--v2g", "4", "--seed", "2", "--out"])
        .arg(&city)
        .status()
        .unwrap();
    assert!(status.success());

    let output = bin()
        .args(["validate", "--config"])
        .arg(&config)
        .arg("--graph")
        .arg(&city)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("4 V2G node(s)"));

    let output = bin()
        .args(["run", "--seed", "9", "--flow-csv", "--config"])
        .arg(&config)
        .arg("--graph")
        .arg(&city)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for f in ["metrics.json", "dispatch_log.jsonl", "flows.csv", "occupancy_tick0.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let flows = fs::read_to_string(out.join("flows.csv")).unwrap();
    assert!(flows.starts_with("k,from,to,x,q,s,l\n"));
}

#[test]
fn validate_rejects_bad_periods() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city.json");
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"plan_period_h": 0.5}"#).unwrap();
    assert!(bin().args(["gen-city", "--out"]).arg(&city).status().unwrap().success());
    let output = bin()
        .args(["validate", "--config"])
        .arg(&config)
        .arg("--graph")
        .arg(&city)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("planning period"));
}

#[test]
fn route_dumps_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city.json");
    let frontier = dir.path().join("frontier.csv");
    assert!(bin().args(["gen-city", "--nodes", "25", "--out"]).arg(&city).status().unwrap().success());
    let output = bin()
        .args(["route", "--from", "0", "--to", "24", "--occupancy", "0.5", "--graph"])
        .arg(&city)
        .arg("--frontier")
        .arg(&frontier)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).starts_with("0 -> "));
    let csv = fs::read_to_string(&frontier).unwrap();
    assert!(csv.starts_with("node,time_h,energy_kwh\n"));
    assert!(csv.lines().count() > 2);
}
