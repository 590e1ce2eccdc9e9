use std::path::Path;
use std::process::{Command, Output};

use qnav::cli::RunConfig;
use qnav::harness;

fn qnav(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnav"))
        .args(args)
        .env("QNAV_OUT_DIR", out_root)
        .output()
        .expect("qnav runs")
}

#[test]
fn help_for_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["gen-terrain", "train", "eval", "ablate", "verify", "embed-train", "plot"] {
        let out = qnav(&[sub, "--help"], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = qnav(&["train", "--no-such-flag"], tmp.path());
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--no-such-flag"));
    let missing = qnav(&["verify"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    let bad_value = qnav(&["train", "--scenario", "moon"], tmp.path());
    assert_eq!(bad_value.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = qnav(&["eval", "--ckpt", "/nonexistent/policy.ckpt"], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
    let few_seeds = qnav(&["ablate", "--seeds", "2", "--steps", "100"], tmp.path());
    assert_eq!(few_seeds.status.code(), Some(1));
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\"seed\": 1, \"unknown_key\": true}").unwrap();
    let bad = qnav(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn verify_reports_all_random_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qnav(&["verify", "--random", "20", "--size", "8", "--seed", "7"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "prop1: 20/20 OK");
}

#[test]
fn verify_reads_cmdp_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("example.cmdp");
    std::fs::write(&path, qnav::oracle::example_cmdp().to_text()).unwrap();
    let out = qnav(&["verify", "--cmdp", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "prop1: 1/1 OK");
}

#[test]
fn train_writes_curve_and_resolved_config_under_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qnav(&["train", "--scenario", "hill", "--algo", "lagrangian", "--seed", "1", "--steps", "1500"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("train");
    let curve = std::fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with(&format!("# {}", harness::CSV_VERSION)));
    assert!(!harness::parse_curve_csv(&curve).unwrap().is_empty());
    let cfg = RunConfig::read(&dir.join("config.json")).unwrap();
    assert_eq!(cfg.train.total_steps, 1500);
    assert_eq!(cfg.train.algorithm, qnav::cpo::Algorithm::Lagrangian);
    for f in ["policy.ckpt", "replay.csv", "learning_curves.svg"] {
        assert!(dir.join(f).metadata().unwrap().len() > 0, "{f}");
    }
    // the replay feeds embed-train
    let ckpt = tmp.path().join("embed/e.ckpt");
    let replay = dir.join("replay.csv");
    let embed = qnav(
        &["embed-train", "--replay", replay.to_str().unwrap(), "--out", ckpt.to_str().unwrap(), "--epochs", "1"],
        tmp.path(),
    );
    assert_eq!(embed.status.code(), Some(0), "{}", String::from_utf8_lossy(&embed.stderr));
    assert!(ckpt.exists());
}

#[test]
fn gen_terrain_exports_rasters_and_plot_renders_them() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qnav(&["gen-terrain", "--scenario", "directional", "--seed", "4"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let terrain = tmp.path().join("gen-terrain/terrain");
    let grid = qnav::terrain::TerrainGrid::read_dir(&terrain).unwrap();
    assert_eq!(grid.distinct_classes().len(), 4);
    let eval = qnav(
        &["eval", "--baseline", "straight", "--scenario", "directional", "--seed", "4", "--episodes", "1", "--seeds", "3"],
        tmp.path(),
    );
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let traj = tmp.path().join("eval/trajectories/seed3_ep000.csv");
    let plot = qnav(
        &["plot", "--trajectories", traj.to_str().unwrap(), "--terrain", terrain.to_str().unwrap(), "--out", tmp.path().join("p").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(plot.status.code(), Some(0), "{}", String::from_utf8_lossy(&plot.stderr));
    let svg = std::fs::read_to_string(tmp.path().join("p/paths.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let first = qnav(&["eval", "--baseline", "stop", "--scenario", "hill", "--episodes", "1", "--seeds", "1"], tmp.path());
    assert_eq!(first.status.code(), Some(0));
    let saved = tmp.path().join("saved.json");
    std::fs::copy(tmp.path().join("eval/config.json"), &saved).unwrap();
    let out_dir = tmp.path().join("second");
    let second = qnav(
        &["eval", "--config", saved.to_str().unwrap(), "--episodes", "2", "--out", out_dir.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(second.status.code(), Some(0));
    let cfg = RunConfig::read(&out_dir.join("config.json")).unwrap();
    assert_eq!(cfg.eval.episodes, 2);
    assert_eq!(cfg.out_dir, out_dir);
    let episodes = harness::parse_episodes_csv(&std::fs::read_to_string(out_dir.join("episodes.csv")).unwrap()).unwrap();
    assert_eq!(episodes.len(), 2);
    assert!(episodes.iter().all(|e| e.path_length == 0.0 && !e.reached_goal));
}
