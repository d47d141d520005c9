use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nvgslac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvgslac"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn transition_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("b_mt,freq_mhz,intensity,label_from,label_to"));
    lines
        .map(|l| l.split(',').map(|s| s.trim_matches('"').to_string()).collect())
        .collect()
}

#[test]
fn simulate_hi_at_95_gives_three_equal_lines() {
    let tmp = TempDir::new().unwrap();
    let o = nvgslac(tmp.path(), &["simulate", "--b-mt", "95", "--beta", "0", "--mode", "hi", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = transition_rows(&tmp.path().join("run/transitions.csv"));
    assert_eq!(rows.len(), 3);
    let w: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    for x in &w {
        assert!((x / w[0] - 1.0).abs() < 1e-3, "{w:?}");
    }
    let spec = fs::read_to_string(tmp.path().join("run/spectrum.csv")).unwrap();
    assert!(spec.starts_with("# b_mt=95\nfreq_mhz,value\n"), "{}", &spec[..40]);
}

#[test]
fn simulate_lo_near_crossing_has_more_than_three_lines() {
    let tmp = TempDir::new().unwrap();
    let o = nvgslac(tmp.path(), &["simulate", "--b-mt", "102.4", "--mode", "lo", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(transition_rows(&tmp.path().join("run/transitions.csv")).len() > 3);
}

#[test]
fn simulate_sweep_writes_one_spectrum_per_field() {
    let tmp = TempDir::new().unwrap();
    let args = ["simulate", "--b-start", "101", "--b-stop", "101.5", "--b-step", "0.25", "--out", "run"];
    let o = nvgslac(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 0..3 {
        assert!(tmp.path().join(format!("run/spectrum_{k:04}.csv")).exists());
    }
    let rows = transition_rows(&tmp.path().join("run/transitions.csv"));
    let fields: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(fields.len(), 3);
}

#[test]
fn validation_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let step0 = ["simulate", "--b-start", "100", "--b-stop", "101", "--b-step", "0"];
    for args in [
        &step0[..],
        &["simulate"][..],
        &["simulate", "--b-mt", "95", "--mode", "all"][..],
        &["simulate", "--b-mt", "95", "--mode", "sideways"][..],
        &["simulate", "--b-mt", "95", "--width-mhz", "-1"][..],
        &["simulate", "--b-mt", "95", "--beta", "400"][..],
    ] {
        let o = nvgslac(tmp.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"));
    }
}

#[test]
fn fit_round_trip_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = nvgslac(d, &["simulate", "--b-mt", "101.5", "--beta", "0.6", "--width-mhz", "1.2", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let input = d.join("s/spectrum.csv");
    let before = fs::read(&input).unwrap();
    for name in ["a.json", "b.json"] {
        let o = nvgslac(d, &["fit", "s/spectrum.csv", "--width-mhz", "1.0", "--seed", "7", "--out", name]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b.json")).unwrap());
    assert_eq!(before, fs::read(&input).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let p = &report["params"];
    assert!((p["beta"].as_f64().unwrap() - 0.6).abs() < 0.03, "{p}");
    assert!((p["b_mt"].as_f64().unwrap() - 101.5).abs() < 0.01, "{p}");
    assert!((p["width_mhz"].as_f64().unwrap() - 1.2).abs() < 0.06, "{p}");
    assert!(report["chi2_red"].as_f64().unwrap() < 1e-8);
    assert_eq!(report["peak_areas"].as_array().unwrap().len(), 3);
    let prov = &report["provenance"];
    assert_eq!(prov["seed"], 7);
    assert_eq!(prov["input_file"], "s/spectrum.csv");
    assert_eq!(prov["constants_hash"].as_str().unwrap().len(), 64);
    assert_eq!(prov["config"]["width_mhz"], 1.0);
}

#[test]
fn fit_error_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("empty.csv"), "").unwrap();
    let o = nvgslac(d, &["fit", "empty.csv", "--b-mt", "102"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    fs::write(d.join("bad.csv"), "freq_mhz,value\n5700,0.1\n5700.1,abc\n").unwrap();
    let o = nvgslac(d, &["fit", "bad.csv", "--b-mt", "102"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    nvgslac(d, &["simulate", "--b-mt", "95", "--out", "s95"]);
    let o = nvgslac(d, &["fit", "s95/spectrum.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("5600..5900"), "{}", stderr(&o));

    nvgslac(d, &["simulate", "--b-mt", "101", "--beta", "0.5", "--out", "s"]);
    let o = nvgslac(d, &["fit", "s/spectrum.csv", "--max-evaluations", "5", "--out", "nc.json"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("nc.json")).unwrap()).unwrap();
    assert!(report["flags"].as_array().unwrap().iter().any(|f| f == "not_converged"));
}

#[test]
fn constants_dump_and_override() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = nvgslac(d, &["constants"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l == "d_g = 2870"));

    fs::write(d.join("c.txt"), "# lab value\nd_g = 2871.5\n").unwrap();
    let o = nvgslac(d, &["constants", "--constants", "c.txt", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["d_g"], 2871.5);

    fs::write(d.join("bad.txt"), "d_g = 2870\nwhat = 1\n").unwrap();
    let o = nvgslac(d, &["constants", "--constants", "bad.txt"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn config_file_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.toml"), "b_mt = 95.0\nbeta = 0.4\nwidth_mhz = 0.7\n").unwrap();
    let o = nvgslac(d, &["simulate", "--config", "run.toml", "--beta", "0", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config"]["b_mt"], 95.0);
    assert_eq!(prov["config"]["beta"], 0.0);
    assert_eq!(prov["config"]["width_mhz"], 0.7);

    fs::write(d.join("bad.toml"), "b_mt = 95.0\nspeed = 3\n").unwrap();
    let o = nvgslac(d, &["simulate", "--config", "bad.toml"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn mc13_with_zero_occupancy_matches_simulate() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let common = ["--b-mt", "102", "--beta", "0.3", "--width-mhz", "0.9"];
    let o = nvgslac(d, &[&["simulate"][..], &common, &["--out", "sim"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = nvgslac(d, &[&["mc13"][..], &common, &["--occupancy", "0", "--iterations", "5", "--out", "mc"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(d.join("sim/spectrum.csv")).unwrap(), fs::read(d.join("mc/spectrum.csv")).unwrap());
    assert!(d.join("mc/stderr.csv").exists());
}

#[test]
fn mc13_is_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_nvgslac"))
            .current_dir(d)
            .env("NVGSLAC_THREADS", threads)
            .args(["mc13", "--b-mt", "102", "--iterations", "12", "--occupancy", "0.05", "--seed", "3", "--out", out])
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1", "one")), 0);
    assert_eq!(code(&run("4", "four")), 0);
    for f in ["spectrum.csv", "stderr.csv"] {
        assert_eq!(fs::read(d.join("one").join(f)).unwrap(), fs::read(d.join("four").join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&run("zero", "bad")), 2);
}

#[test]
fn mc13_resource_cap_exits_5() {
    let tmp = TempDir::new().unwrap();
    let o = nvgslac(tmp.path(), &["mc13", "--b-mt", "102", "--occupancy", "1", "--iterations", "2", "--out", "mc"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn calibrate_recovers_line_and_skips_crossing() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut csv = String::from("current_a,b_mt\n");
    for k in 0..10 {
        let i = 20.0 + k as f64;
        csv.push_str(&format!("{i},{}\n", 2.9 * i + 1.0));
    }
    csv.push_str("35.0,102.4\n");
    fs::write(d.join("cal.csv"), csv).unwrap();
    let o = nvgslac(d, &["calibrate", "cal.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["slope_mt_per_a"].as_f64().unwrap() - 2.9).abs() < 1e-9);
    assert_eq!(v["excluded_near_gslac"], 1);

    fs::write(d.join("hdr.csv"), "amps,field\n1,2\n").unwrap();
    assert_eq!(code(&nvgslac(d, &["calibrate", "hdr.csv"])), 3);
    fs::write(d.join("one.csv"), "current_a,b_mt\n1,2\n").unwrap();
    assert_eq!(code(&nvgslac(d, &["calibrate", "one.csv"])), 2);
}

#[test]
fn polarization_of_unpolarized_sweep_is_zero() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = nvgslac(d, &["simulate", "--b-start", "101", "--b-stop", "103", "--b-step", "1", "--beta", "0", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = nvgslac(
        d,
        &["polarization", "s/spectrum_0000.csv", "s/spectrum_0001.csv", "s/spectrum_0002.csv", "--out", "pol.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(d.join("pol.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("b_mt,orientation,alignment,n_plus1,n_0,n_minus1,low_confidence")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let orientation: f64 = r[1].parse().unwrap();
        assert!(orientation.abs() < 0.02, "{r:?}");
    }
}
