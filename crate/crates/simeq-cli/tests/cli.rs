//! Contract tests for the `simeq` binary: exit codes, determinism, file
//! round trips, and the deployment-pipeline equivariance oracle.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn simeq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simeq"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("simeq-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_small(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = dir.join("data");
    let out = run(simeq()
        .args(["gen", "--n", &n.to_string(), "--seed", &seed.to_string(), "--n-in", "48", "--n-out", "128", "--out"])
        .arg(&data));
    assert_code(&out, 0);
    data
}

fn train_tiny(dir: &Path, data: &Path, epochs: usize, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join(format!("ckpt-{epochs}-{}", extra.join("_").replace('-', "")));
    let out = run(simeq()
        .args(["train", "--preset", "tiny", "--epochs", &epochs.to_string(), "--batch-size", "4", "--seed", "5", "--data"])
        .arg(data)
        .arg("--out")
        .arg(&ckpt)
        .args(extra));
    assert_code(&out, 0);
    ckpt
}

#[test]
fn gen_is_deterministic_and_rejects_zero() {
    let dir = workdir("gen");
    let a = gen_small(&dir.join("a"), 6, 11);
    let b = gen_small(&dir.join("b"), 6, 11);
    for i in 0..6 {
        for side in ["partial", "gt"] {
            let fa = fs::read(a.join(format!("pair_{i:05}_{side}.xyz"))).unwrap();
            let fb = fs::read(b.join(format!("pair_{i:05}_{side}.xyz"))).unwrap();
            assert_eq!(fa, fb, "pair {i} {side} differs between identical runs");
        }
    }
    let out = run(simeq().args(["gen", "--n", "0", "--out"]).arg(dir.join("z")));
    assert_code(&out, 2);
}

#[test]
fn train_zero_lr_keeps_parameters_and_logs() {
    let dir = workdir("lr0");
    let data = gen_small(&dir, 8, 3);
    let ckpt = train_tiny(&dir, &data, 1, &["--lr", "0"]);
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(rec["train_loss"].as_f64().unwrap().is_finite());

    // an untouched model from the same seed has identical parameters
    let fresh = dir.join("fresh");
    let model = simeq_core::model::AnyModel::<f64>::build(
        simeq_core::model::ModelKind::Equivariant,
        simeq_core::model::ModelConfig::tiny().with_seed(5),
    )
    .unwrap();
    simeq_core::io::save_checkpoint(&fresh, &model).unwrap();
    assert_eq!(
        fs::read(ckpt.join("params.bin")).unwrap(),
        fs::read(fresh.join("params.bin")).unwrap()
    );
}

#[test]
fn complete_respects_formats_and_counts() {
    let dir = workdir("complete");
    let data = gen_small(&dir, 6, 4);
    let ckpt = train_tiny(&dir, &data, 1, &[]);
    let dense = dir.join("dense.xyz");
    let coarse = dir.join("coarse.ply");
    let out = run(simeq()
        .args(["complete", "--ckpt"])
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("pair_00000_partial.xyz"))
        .arg("--out")
        .arg(&dense)
        .arg("--coarse-out")
        .arg(&coarse));
    assert_code(&out, 0);
    let cloud = simeq_core::io::read_xyz::<f64>(&dense).unwrap();
    assert_eq!(cloud.len(), 128);
    let coarse_cloud = simeq_core::io::read_ply::<f64>(&coarse).unwrap();
    assert_eq!(coarse_cloud.len(), 16);

    // xyz writing round-trips bitwise
    let rewritten = dir.join("rewrite.xyz");
    simeq_core::io::write_xyz(&rewritten, &cloud).unwrap();
    let again = simeq_core::io::read_xyz::<f64>(&rewritten).unwrap();
    assert_eq!(cloud.points, again.points);

    // malformed input: exit 2
    let bad = dir.join("bad.xyz");
    fs::write(&bad, "not a point\n").unwrap();
    let out = run(simeq()
        .args(["complete", "--ckpt"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("x.xyz")));
    assert_code(&out, 2);
}

#[test]
fn complete_commutes_with_input_transforms() {
    let dir = workdir("equiv");
    let data = gen_small(&dir, 6, 9);
    let ckpt = train_tiny(&dir, &data, 1, &[]);
    let input = simeq_core::io::read_xyz::<f64>(&data.join("pair_00001_partial.xyz")).unwrap();

    let g = simeq_core::geometry::sample_transform::<f64>(
        &simeq_core::geometry::TransformDistribution::sim3(42),
        0,
    );
    let moved = simeq_core::geometry::apply_transform(&g, &input);
    let moved_path = dir.join("moved.xyz");
    simeq_core::io::write_xyz(&moved_path, &moved).unwrap();
    let base_path = dir.join("base.xyz");
    simeq_core::io::write_xyz(&base_path, &input).unwrap();

    for (inp, outp) in [(&base_path, "out_base.xyz"), (&moved_path, "out_moved.xyz")] {
        let out = run(simeq()
            .args(["complete", "--ckpt"])
            .arg(&ckpt)
            .arg("--input")
            .arg(inp)
            .arg("--out")
            .arg(dir.join(outp)));
        assert_code(&out, 0);
    }
    let base = simeq_core::io::read_xyz::<f64>(&dir.join("out_base.xyz")).unwrap();
    let moved_out = simeq_core::io::read_xyz::<f64>(&dir.join("out_moved.xyz")).unwrap();
    let undone = simeq_core::geometry::apply_transform(&g.inverse(), &moved_out);
    let err = undone
        .to_tensor()
        .relative_error(&base.to_tensor(), 1e-12);
    assert!(err < 1e-5, "deployment pipeline equivariance error {err:e}");
}

#[test]
fn eval_and_audit_gates_and_missing_checkpoints() {
    let dir = workdir("gates");
    let data = gen_small(&dir, 8, 6);
    let ckpt = train_tiny(&dir, &data, 1, &[]);

    // missing checkpoint: exit 2
    let out = run(simeq()
        .args(["eval", "--ckpt"])
        .arg(dir.join("nope"))
        .arg("--data")
        .arg(&data));
    assert_code(&out, 2);
    let out = run(simeq()
        .args(["audit", "--ckpt"])
        .arg(dir.join("nope"))
        .args(["--trials", "2"]));
    assert_code(&out, 2);

    // audit passes a loose gate, fails an impossible one (exit 4)
    let out = run(simeq()
        .args(["audit", "--trials", "10", "--max-error", "1e-6", "--ckpt"])
        .arg(&ckpt));
    assert_code(&out, 0);
    let out = run(simeq()
        .args(["audit", "--trials", "10", "--max-error", "1e-30", "--ckpt"])
        .arg(&ckpt));
    assert_code(&out, 4);

    // eval writes reports and enforces CD gates
    let report = dir.join("report.json");
    let csv = dir.join("per_sample.csv");
    let out = run(simeq()
        .args(["eval", "--group", "identity", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&report)
        .arg("--csv")
        .arg(&csv));
    assert_code(&out, 0);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["cd_l1_x1000"].as_f64().unwrap() > 0.0);
    assert!(csv.is_file());
    let out = run(simeq()
        .args(["eval", "--group", "identity", "--max-cd", "1e-9", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data));
    assert_code(&out, 4);
}

#[test]
fn diverging_training_exits_3_and_keeps_last_good_checkpoint() {
    let dir = workdir("diverge");
    let data = gen_small(&dir, 6, 13);
    let ckpt = dir.join("ckpt");
    let out = run(simeq()
        .args(["train", "--preset", "tiny", "--epochs", "40", "--batch-size", "2", "--seed", "5", "--lr", "1e18", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt));
    // either the step overflows (exit 3) or extreme steps stay finite; in
    // the divergent case a loadable checkpoint must remain on disk
    match out.status.code() {
        Some(3) => {
            let model = simeq_core::io::load_checkpoint::<f64>(&ckpt).unwrap();
            assert!(!model.params().any_non_finite(), "kept checkpoint must be finite");
        }
        Some(0) => {}
        other => panic!("unexpected exit {other:?}"),
    }
}

#[test]
fn training_twice_and_resume_are_bitwise_identical() {
    let dir = workdir("determinism");
    let data = gen_small(&dir, 10, 8);
    let a = train_tiny(&dir.join("a"), &data, 3, &[]);
    let b = train_tiny(&dir.join("b"), &data, 3, &[]);
    for file in ["params.bin", "manifest.json", "model.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }

    // interrupted + resumed run matches the uninterrupted one
    let c = train_tiny(&dir.join("c"), &data, 2, &[]);
    let out = run(simeq()
        .args(["train", "--preset", "tiny", "--epochs", "3", "--batch-size", "4", "--seed", "5", "--resume", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&c));
    assert_code(&out, 0);
    assert_eq!(
        fs::read(a.join("params.bin")).unwrap(),
        fs::read(c.join("params.bin")).unwrap(),
        "resumed run must match uninterrupted run"
    );
    // resumed log holds all three epochs
    let log = fs::read_to_string(c.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}
