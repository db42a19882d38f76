use std::fs;
use std::path::Path;
use std::process::Command;

use dpcam::config::{resolve, ConfigFile, Overrides};
use dpcam::pipeline::{run_flux_sweep, run_pipeline, run_steering, steering_pair};
use dpcam::presets::preset;
use dpcam::ExperimentConfig;
use dpcam_core::model::read_joint;
use dpcam_core::recon::Tau;

fn small(out: &Path) -> ExperimentConfig {
    let mut c = preset("desk-steering").unwrap();
    c.m = 600;
    c.replicas = 2;
    c.out_dir = out.to_path_buf();
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpcam"))
}

#[test]
fn identical_seeds_give_identical_manifests_and_artifacts() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (r1, m1) = run_pipeline(&small(d1.path())).unwrap();
    let mut c2 = small(d2.path());
    c2.out_dir = d1.path().to_path_buf();
    // same config (so the same hash), written elsewhere afterwards
    let (r2, m2) = run_pipeline(&c2).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1.without_timings(), m2.without_timings());
    assert!(!m1.timings.is_empty());

    let (_, m3) = run_pipeline(&small(d2.path())).unwrap();
    for a in &m3.artifacts {
        assert_eq!(fs::read(d1.path().join(a)).unwrap(), fs::read(d2.path().join(a)).unwrap(), "{a:?}");
    }
    assert_eq!(m3.seeds, m1.seeds);
    assert_ne!(m1.seeds[0].seeds, m1.seeds[2].seeds, "replicas draw different seeds");
}

#[test]
fn artifacts_parse_back() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.replicas = 1;
    c.save_patterns = true;
    let (report, manifest) = run_pipeline(&c).unwrap();
    assert!(manifest.is_clean(), "{manifest:?}");
    let recon = d.path().join("replica-000/position/recon.txt");
    let (joint, _) = read_joint(std::io::BufReader::new(fs::File::open(recon).unwrap())).unwrap();
    assert_eq!(joint.side(), 8);
    let patterns = fs::read_to_string(d.path().join("replica-000/momentum/patterns.txt")).unwrap();
    assert!(patterns.starts_with("# m: 600"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["replicas"][0]["bases"].as_array().unwrap().len(), 2);
    let flat = &report.replicas[0].analysis;
    assert!(flat.mi_x.is_some() && flat.mi_k.is_some() && flat.bound.is_some());
}

#[test]
fn degenerate_widths_do_not_steer() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.sigma_p = 1.0;
    c.sigma_c = 1.0;
    c.momentum_pitch = 1.0 / (4.0 * c.sigma_p * c.sigma_c);
    c.replicas = 1;
    let (x, k) = steering_pair(&c).unwrap();
    let (report, _) = run_steering(&x, &k).unwrap();
    let fitted = report.fitted.unwrap();
    assert!(!fitted.verdict.violated, "{fitted:?}");
}

#[test]
fn steering_rejects_mismatched_inputs() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    let (x, mut k) = steering_pair(&c).unwrap();
    assert!(run_steering(&k, &x).is_err());
    k.side = 9;
    assert!(run_steering(&x, &k).is_err());
    assert!(steering_pair(&c.for_basis(dpcam_core::model::Basis::Position)).is_err());
}

#[test]
fn sweep_writes_csv() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.tau = Tau::Value(20.0);
    let (result, manifest) = run_flux_sweep(&c, &[100.0, 1000.0]).unwrap();
    assert_eq!(result.mse.len(), 2);
    assert_eq!(manifest.artifacts, vec![std::path::PathBuf::from("sweep.csv")]);
    let csv = fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn toml_file_round_trip_through_resolve() {
    let file = ConfigFile::parse("preset = \"paper-16x16-position\"\nreplicas = 3\n[solver]\nmax_iters = 10\nrel_obj_tol = 1e-4\ndebias = false\n").unwrap();
    let c = resolve(None, Some(file), &Overrides::default()).unwrap();
    assert_eq!(c.replicas, 3);
    assert_eq!(c.solver.max_iters, 10);
    assert!(!c.solver_config(false).debias);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("ok");
    let ok = bin()
        .args(["run", "--preset", "desk-steering", "--replicas", "1", "--m", "400", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(out.join("manifest.json").exists());

    let bad = bin().args(["run", "--preset", "no-such-thing"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let bad_flag = bin().args(["run", "--tau", "-3"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));

    let blocker = d.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let io = bin()
        .args(["run", "--preset", "desk-steering", "--replicas", "1", "--m", "200", "--out"])
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(io.status.code(), Some(4), "{}", String::from_utf8_lossy(&io.stderr));

    let cfg = d.path().join("short.toml");
    fs::write(&cfg, "preset = \"desk-steering\"\nreplicas = 1\nm = 400\n[solver]\nmax_iters = 2\nrel_obj_tol = 1e-9\ndebias = false\n").unwrap();
    let nc_out = d.path().join("nc");
    let nc = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&nc_out).output().unwrap();
    assert_eq!(nc.status.code(), Some(3), "{}", String::from_utf8_lossy(&nc.stderr));
    assert!(nc_out.join("replica-000/position/recon.txt").exists());

    let list = bin().arg("presets").output().unwrap();
    assert!(String::from_utf8_lossy(&list.stdout).contains("paper-32x32"));
}

#[test]
fn workers_env_must_be_positive() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .env("DPCAM_WORKERS", "zero")
        .args(["run", "--preset", "desk-steering", "--replicas", "1", "--m", "200", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .env("DPCAM_WORKERS", "1")
        .args(["run", "--preset", "desk-steering", "--replicas", "1", "--m", "200", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
