use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfm_core::metrics::{ChannelScores, CrpsEstimator, SkillReport};

fn lab(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfm-lab"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .expect("sfm-lab runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = lab(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SIM: [&str; 12] = [
    "simulate", "--tau", "5", "--n-seeds", "2", "--grid-n", "32", "--n-steps", "2500", "--save-every", "0.05", "--spinup-time",
];

fn small_sims(root: &Path) {
    let mut a = SIM.to_vec();
    a.push("1");
    ok(root, &a);
}

#[test]
fn zero_snapshots_is_a_config_error_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(tmp.path(), &["simulate", "--tau", "5", "--n-steps", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("snapshot"));
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn bad_arguments_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lab(tmp.path(), &["train", "--tau", "5", "--scheme", "gan"]).status.code(), Some(2));
    assert_eq!(lab(tmp.path(), &["simulate", "--tau", "5", "--threads", "0"]).status.code(), Some(2));
    // Reading a dataset that is not there.
    let code = lab(tmp.path(), &["train", "--tau", "5", "--scheme", "sfm"]).status.code();
    assert_eq!(code, Some(3));
}

#[test]
fn end_to_end_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_sims(root);
    ok(root, &["build", "--tau", "5", "--n-train", "60", "--n-test", "12", "--gap", "2"]);
    ok(root, &["train", "--tau", "5", "--scheme", "sfm", "--steps", "200", "--hidden", "8", "--blocks", "1"]);
    ok(root, &["sample", "--tau", "5", "--scheme", "sfm", "--members", "4"]);
    ok(root, &["evaluate", "--tau", "5", "--scheme", "sfm"]);
    let run = root.join("runs/tau5/sfm");
    for f in ["config.json", "train_log.csv", "validation.csv", "timing.json", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let rep: SkillReport = serde_json::from_str(&fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!((rep.n_cases, rep.m), (12, 4));
    let c = &rep.channels[0];
    assert!(c.rmse.is_finite() && c.crps.is_finite() && c.mae.is_finite());
    assert!(c.crps <= c.mae);
    assert!(c.ssr.unwrap() > 0.0);
    assert!(run.join("eval/report.csv").is_file() && run.join("eval/spectra.csv").is_file());

    let table = ok(root, &["table"]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.starts_with("variable,metric,tau=5:SFM,"), "{text}");
}

#[test]
fn complete_outputs_are_kept_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_sims(root);
    let manifest = root.join("sims/tau5/seed0/manifest.json");
    let before = fs::metadata(&manifest).unwrap().modified().unwrap();
    let mut again = SIM.to_vec();
    again.push("1");
    let out = ok(root, &again);
    assert!(String::from_utf8_lossy(&out.stderr).contains("already complete"));
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), before);

    let snap = root.join("sims/tau5/seed0");
    let data_before: BTreeMap<_, _> = fs::read_dir(&snap)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "npy"))
        .map(|p| (p.clone(), fs::read(&p).unwrap()))
        .collect();
    again.push("--force");
    ok(root, &again);
    assert!(fs::metadata(&manifest).unwrap().modified().unwrap() >= before);
    for (p, bytes) in data_before {
        assert_eq!(fs::read(&p).unwrap(), bytes, "{}", p.display());
    }
    assert!(!root.join("sims/tau5/.seed0.partial").exists());
}

#[test]
fn incomplete_destination_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dest = tmp.path().join("sims/tau5/seed0");
    fs::create_dir_all(&dest).unwrap();
    fs::write(dest.join("stray.txt"), "x").unwrap();
    let mut a = SIM.to_vec();
    a.extend(["1", "--n-seeds", "1"]);
    let out = lab(tmp.path(), &a);
    assert!(!out.status.success());
    assert!(dest.join("stray.txt").exists());
}

fn report(scheme: &str, tau: f64, x: f64) -> SkillReport {
    let deterministic = scheme == "Regression";
    SkillReport {
        scheme: scheme.into(),
        n_cases: 4,
        m: if deterministic { 1 } else { 8 },
        crps_estimator: CrpsEstimator::Biased,
        spread_normalization: "m-1".into(),
        aggregation: "mean".into(),
        channels: vec![ChannelScores {
            variable: "vorticity".into(),
            rmse: x,
            mae: 0.8 * x,
            crps: if deterministic { 0.8 * x } else { 0.6 * x },
            spread: if deterministic { 0.0 } else { x },
            ssr: (!deterministic).then_some(0.9),
        }],
        spectra: vec![],
        metadata: BTreeMap::from([("tau".to_string(), tau.to_string())]),
    }
}

#[test]
fn table_covers_every_scheme_and_tau() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let schemes = ["SFM", "CFM", "CDM", "CorrDiff", "Regression"];
    for (ti, tau) in [3.0, 5.0, 10.0].into_iter().enumerate() {
        for (si, s) in schemes.iter().enumerate() {
            let dir = root.join(format!("runs/tau{tau}/{}/eval", s.to_lowercase()));
            fs::create_dir_all(&dir).unwrap();
            let r = report(s, tau, 1.0 + ti as f64 + 0.1 * si as f64);
            fs::write(dir.join("report.json"), serde_json::to_string(&r).unwrap()).unwrap();
        }
    }
    let out_path = root.join("table.csv");
    ok(root, &["table", "--out", out_path.to_str().unwrap()]);
    let text = fs::read_to_string(&out_path).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].len(), 2 + 15);
    assert_eq!(rows[0][2], "tau=3:SFM");
    assert_eq!(rows[0][16], "tau=10:Regression");
    let metrics: Vec<&str> = rows[1..].iter().map(|r| r[1]).collect();
    assert_eq!(metrics, ["RMSE", "CRPS", "MAE", "SSR"]);
    assert_eq!(rows[1][2], "1.0000");
    // Deterministic columns have no CRPS or SSR.
    assert_eq!(rows[2][6], "-");
    assert_eq!(rows[4][6], "-");
    assert_eq!(rows[3][6], "1.1200");
}
