use std::path::Path;
use std::process::{Command, Output};

use infolqg::test_support::random_spec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infolqg"))
        .args(args)
        .current_dir(dir)
        .env("INFOLQG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("readable")).expect("valid json")
}

fn workspace(seed: u64) -> tempfile::TempDir {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, 2, 4);
    let dir = tempfile::tempdir().expect("tempdir");
    std::fs::write(dir.path().join("problem.json"), spec.to_json_value().to_string()).expect("write");
    dir
}

#[test]
fn singular_noise_is_rejected_with_its_step() {
    let dir = workspace(1);
    let path = dir.path().join("problem.json");
    let mut v = read_json(&path);
    for row in v["W"][0].as_array_mut().unwrap() {
        for x in row.as_array_mut().unwrap() {
            *x = Value::from(0.0);
        }
    }
    std::fs::write(&path, v.to_string()).unwrap();
    let out = run(dir.path(), &["synthesize", "problem.json", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("W_1"), "{}", stderr(&out));
    assert!(!dir.path().join("o").join("policy.json").exists());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["riccati", "nope.json", "--out", "o"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn empty_scale_list_is_invalid() {
    let dir = workspace(2);
    let out = run(dir.path(), &["sweep", "problem.json", "--scales", " , ", "--out", "o"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn iteration_budget_exhaustion_exits_3() {
    let dir = workspace(3);
    let out = run(dir.path(), &["synthesize", "problem.json", "--out", "o", "--max-iterations", "3"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn policy_for_another_problem_is_a_mismatch() {
    let dir = workspace(4);
    assert_eq!(code(&run(dir.path(), &["synthesize", "problem.json", "--out", "syn"])), 0);
    let other = workspace(5);
    std::fs::copy(other.path().join("problem.json"), dir.path().join("other.json")).unwrap();
    let out = run(dir.path(), &["simulate", "--problem", "other.json", "--policy", "syn", "--out", "sim", "--trials", "10"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn simulate_is_reproducible_from_the_seed() {
    let dir = workspace(6);
    assert_eq!(code(&run(dir.path(), &["synthesize", "problem.json", "--out", "syn"])), 0);
    let mut csv = Vec::new();
    for name in ["a", "b"] {
        let args = ["simulate", "--problem", "problem.json", "--policy", "syn", "--out", name, "--trials", "1", "--seed", "7"];
        assert_eq!(code(&run(dir.path(), &args)), 0);
        csv.push(std::fs::read(dir.path().join(name).join("trajectories.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv.swap_remove(0)).unwrap();
    assert!(text.starts_with("trial,t,x_1,x_2,xhat_1,xhat_2,u_"));
    // T = 4 steps plus the final state.
    assert_eq!(text.lines().count(), 1 + 5);

    let report = read_json(&dir.path().join("a").join("report.json"));
    assert_eq!(report["schema_version"], "1.0");
    assert_eq!(report["master_seed"], 7);
}

#[test]
fn huge_information_price_turns_sensing_off() {
    let dir = workspace(7);
    let out = run(dir.path(), &["synthesize", "problem.json", "--out", "o", "--gamma-scale", "1e9"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let policy = read_json(&dir.path().join("o").join("policy.json"));
    assert!(policy["r"].as_array().unwrap().iter().all(|r| r == 0), "{}", policy["r"]);
}

#[test]
fn single_scale_sweep_matches_synthesize() {
    let dir = workspace(8);
    assert_eq!(code(&run(dir.path(), &["synthesize", "problem.json", "--out", "syn", "--gamma-scale", "2"])), 0);
    assert_eq!(code(&run(dir.path(), &["sweep", "problem.json", "--scales", "2", "--out", "sw"])), 0);
    let schedule = read_json(&dir.path().join("syn").join("schedule.json"));
    let csv = std::fs::read_to_string(dir.path().join("sw").join("tradeoff.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "scale,J_info_nats,J_cont_predicted,total,J_info_bits,status");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let info: f64 = row[1].parse().unwrap();
    let control: f64 = row[2].parse().unwrap();
    // The schedule reports the scaled price; the sweep reports base prices.
    let scaled_info = schedule["info_cost_nats"].as_f64().unwrap();
    assert_eq!(2.0 * info, scaled_info);
    assert_eq!(control, schedule["control_cost_predicted"].as_f64().unwrap());
    assert_eq!(row[5], "ok");
    let manifest = read_json(&dir.path().join("sw").join("manifest.json"));
    assert_eq!(manifest["outputs"][0], "tradeoff.csv");
}

#[test]
fn riccati_writes_full_precision_tables() {
    let dir = workspace(9);
    assert_eq!(code(&run(dir.path(), &["riccati", "problem.json", "--out", "r"])), 0);
    let csv = std::fs::read_to_string(dir.path().join("r").join("riccati.csv")).unwrap();
    assert!(csv.starts_with("t,matrix,row,col,value\n"));
    for name in ["S", "M", "N", "K", "Theta"] {
        assert!(csv.contains(&format!("1,{name},1,1,")));
    }
    let manifest = read_json(&dir.path().join("r").join("manifest.json"));
    assert_eq!(manifest["spec_hash"].as_str().unwrap().len(), 64);
}
