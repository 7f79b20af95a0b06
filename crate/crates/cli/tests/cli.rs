use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neighbor_forcing::io::{load_checkpoint, load_latents};
use neighbor_forcing::model::{BlockPlan, DenoiserConfig, DenoiserParams};
use neighbor_forcing::schedule::SamplerConfig;
use neighbor_forcing::streaming::generate_full_recompute;
use neighbor_forcing::synthdata::{LatentSequence, SequenceRecord};
use neighbor_forcing::training::window;

fn nbf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nbf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_data(dir: &Path) {
    ok(dir, &["data", "--out", "data", "--seed", "3", "--sequences", "3", "--frames", "60"]);
}

fn first_sequence(dir: &Path) -> SequenceRecord {
    let load = |what: &str| load_latents(&dir.join(format!("data/seq0000.{what}.lat"))).unwrap().0;
    SequenceRecord {
        latents: LatentSequence::new(load("latents")).unwrap(),
        reference: load("reference"),
        condition: load("condition"),
        states: load("states"),
    }
}

#[test]
fn data_is_deterministic_and_records_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["data", "--out", "a", "--seed", "7", "--sequences", "8"]);
    ok(d, &["data", "--out", "b", "--seed", "7", "--sequences", "8"]);
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8 * 4 + 2);
    for name in names {
        assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap());
    }

    ok(d, &["data", "--out", "still", "--delta-u", "0", "--sequences", "2"]);
    let manifest = fs::read_to_string(d.join("still/manifest.txt")).unwrap();
    let get = |k: &str| -> f64 {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("delta_u"), 0.0);
    let expected = 2.0 * get("l_e") * get("eps_r");
    assert!((get("prop1_bound") - expected).abs() <= 1e-12 * expected);

    let out = ok(d, &["verify", "prop1", "--data", "a"]);
    assert!(out.starts_with("CHECK prop1 PASS"), "{out}");
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "s1", "--stage", "1", "--steps", "0", "--seed", "4"]);
    let ckpt = load_checkpoint(&d.join("s1/model.ckpt")).unwrap();
    let cfg = DenoiserConfig {
        d_latent: 16,
        d_cond: 8,
        ..Default::default()
    };
    assert_eq!(ckpt.params, DenoiserParams::init(cfg, 4).unwrap());
    assert_eq!(ckpt.meta["mask"], "block-causal");
    assert!(d.join("s1/config.txt").exists());
    let csv = fs::read_to_string(d.join("s1/loss.csv")).unwrap();
    assert_eq!(csv.trim(), "step,loss,t_mean");
}

#[test]
fn short_training_logs_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "s1", "--steps", "5", "--seed", "1"]);
    let csv = fs::read_to_string(d.join("s1/loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
    }
    ok(d, &["train", "--data", "data", "--out", "s2", "--stage", "2", "--steps", "3", "--init", "s1/model.ckpt"]);
    let s2 = load_checkpoint(&d.join("s2/model.ckpt")).unwrap();
    assert_eq!(s2.meta["stage"], "2");
    assert_eq!(s2.meta["stage1_steps"], "5");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    let out = nbf(d, &["train", "--data", "data", "--out", "x", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
    assert_eq!(nbf(d, &["verify", "nonsense"]).status.code(), Some(2));

    fs::write(d.join("bad.cfg"), "steps = 3\nlearning_rate = 1\n").unwrap();
    let out = nbf(d, &["--config", "bad.cfg", "config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn config_file_is_applied_and_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    fs::write(d.join("run.cfg"), "# quick run\nsteps = 2\nbatch_size = 2\n").unwrap();
    ok(d, &["--config", "run.cfg", "train", "--data", "data", "--out", "s1", "--batch-size", "3"]);
    let echoed = fs::read_to_string(d.join("s1/config.txt")).unwrap();
    assert!(echoed.contains("steps = 2\n"));
    assert!(echoed.contains("batch_size = 3\n"));
    let csv = fs::read_to_string(d.join("s1/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    // the echo is itself a valid config
    ok(d, &["--config", "s1/config.txt", "config"]);
}

#[test]
fn generation_matches_the_recompute_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "s1", "--steps", "3"]);
    let params = load_checkpoint(&d.join("s1/model.ckpt")).unwrap().params;
    let seq = first_sequence(d);
    let sampler = SamplerConfig::uniform(3).unwrap();

    ok(d, &["generate", "--ckpt", "s1/model.ckpt", "--data", "data", "--out", "g1", "--blocks", "1", "--seed", "9"]);
    let (z, _) = load_latents(&d.join("g1/latents.lat")).unwrap();
    let plan = BlockPlan::standard(1).unwrap();
    let w = window(&seq, 0, plan.n_chunks()).unwrap();
    let oracle = generate_full_recompute(&params, &w.reference, &w.cond, &plan, &sampler, 9).unwrap();
    assert_eq!(z, oracle);

    ok(
        d,
        &["generate", "--ckpt", "s1/model.ckpt", "--data", "data", "--out", "g4", "--blocks", "4", "--convkv", "off", "--seed", "2"],
    );
    let (z, _) = load_latents(&d.join("g4/latents.lat")).unwrap();
    let plan = BlockPlan::standard(4).unwrap();
    let w = window(&seq, 0, plan.n_chunks()).unwrap();
    let oracle = generate_full_recompute(&params, &w.reference, &w.cond, &plan, &sampler, 2).unwrap();
    assert!(z.max_abs_diff(&oracle).unwrap() <= 1e-10);
}

#[test]
fn long_generation_keeps_six_context_chunks() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "s1", "--steps", "0"]);
    let out = ok(
        d,
        &["generate", "--ckpt", "s1/model.ckpt", "--data", "data", "--out", "g", "--blocks", "50", "--convkv", "on"],
    );
    let series: Vec<usize> = out
        .lines()
        .find_map(|l| l.strip_prefix("context chunks per block: "))
        .unwrap()
        .split(' ')
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(series.len(), 50);
    assert_eq!(&series[..2], &[2, 4]);
    assert!(series[2..].iter().all(|&c| c == 6));
    let report = fs::read_to_string(d.join("g/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 51);
}

#[test]
fn bench_writes_one_row_per_block() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "s1", "--steps", "0"]);
    let out = ok(d, &["bench", "--ckpt", "s1/model.ckpt", "--data", "data", "--out", "b", "--blocks", "50", "--reps", "1"]);
    assert!(out.contains("compression overhead"));
    let csv = fs::read_to_string(d.join("b/bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "block,convkv_seconds,nocompress_seconds,unbounded_seconds"
    );
    assert_eq!(lines.count(), 50);
}

#[test]
fn zero_shot_requires_a_non_causal_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(d, &["train", "--data", "data", "--out", "causal", "--steps", "0"]);
    let out = nbf(d, &["experiment", "zeroshot", "--ckpt", "causal/model.ckpt", "--data", "data", "--out", "z"]);
    assert_eq!(out.status.code(), Some(2));

    ok(d, &["train", "--data", "data", "--out", "full", "--steps", "2", "--mask", "none", "--train-blocks", "3"]);
    let args = [
        "experiment", "zeroshot", "--ckpt", "full/model.ckpt", "--data", "data", "--out", "z", "--seeds", "3",
        "--blocks", "3",
    ];
    let first = ok(d, &args);
    let rows: Vec<&str> = first.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let csv_a = fs::read_to_string(d.join("z/zeroshot.csv")).unwrap();
    assert_eq!(ok(d, &args), first);
    assert_eq!(fs::read_to_string(d.join("z/zeroshot.csv")).unwrap(), csv_a);
}

#[test]
fn verify_reports_check_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for check in ["mask", "ledger", "cache-equivalence"] {
        let out = ok(d, &["verify", check]);
        assert!(out.starts_with(&format!("CHECK {check} PASS ")), "{out}");
    }
}
