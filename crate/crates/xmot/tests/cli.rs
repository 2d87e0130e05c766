//! End-to-end tests of the `xmot` binary: subcommand round trips, config
//! layering, exit codes, and bitwise determinism of generation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;

const BIN: &str = env!("CARGO_BIN_EXE_xmot");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process should exit normally")
}

/// Corpus + checkpoint shared by the read-only tests below.
struct Fixture {
    data: PathBuf,
    checkpoint: PathBuf,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
    if root.exists() {
        std::fs::remove_dir_all(&root).unwrap();
    }
    std::fs::create_dir_all(&root).unwrap();
    let data = root.join("data");
    let train = root.join("run");
    run_ok(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--num-sequences",
        "10",
        "--len-min",
        "128",
        "--len-max",
        "144",
        "--eval-sequences",
        "2",
        "--eval-len",
        "192",
        "--seed",
        "5",
    ]);
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        train.to_str().unwrap(),
        "--d-model",
        "16",
        "--num-layers",
        "1",
        "--num-heads",
        "2",
        "--chunk-size",
        "16",
        "--max-context",
        "48",
        "--batch-tokens",
        "64",
        "--total-steps",
        "30",
        "--val-every",
        "30",
        "--num-diffusion-steps",
        "50",
        "--seed",
        "1",
    ]);
    Fixture {
        data,
        checkpoint: train.join("checkpoint.xckp"),
    }
});

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("cli_scratch")
        .join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn generate_and_eval_round_trip() {
    let f = &*FIXTURE;
    let dir = scratch("round_trip");
    let gen_dir = dir.join("gen");
    std::fs::create_dir_all(&gen_dir).unwrap();
    for id in ["eval_0000", "eval_0001"] {
        run_ok(&[
            "generate",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--cond",
            f.data.join("eval").join(format!("{id}.xcnd")).to_str().unwrap(),
            "--out",
            gen_dir.join(format!("{id}.xmot")).to_str().unwrap(),
            "--ddim-steps",
            "4",
            "--seed",
            "9",
        ]);
    }
    let csv = dir.join("eval.csv");
    let stdout = run_ok(&[
        "eval",
        "--generated",
        gen_dir.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--chunk-size",
        "16",
    ]);
    assert!(stdout.contains("scored 2 sequences"), "stdout: {stdout}");
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next(),
        Some("sequence,sync_c,sync_d,glo,exp,dglo,dexp,regime_acc,drift_auc")
    );
    assert_eq!(lines.count(), 2);
    // every run directory carries its effective configuration
    let echo = gen_dir.join("eval_0000.cfg");
    let echo_body = std::fs::read_to_string(&echo).unwrap();
    assert!(echo_body.contains("ddim_steps=4"), "echo: {echo_body}");
    assert!(echo_body.contains("seed=9"), "echo: {echo_body}");
}

#[test]
fn generation_is_bitwise_deterministic_and_handles_ragged_lengths() {
    let f = &*FIXTURE;
    let dir = scratch("determinism");
    // 100 frames is not a multiple of the 16-frame chunk: the final chunk
    // is ragged and the output must still match the conditioning length.
    let cond_src = f.data.join("eval").join("eval_0000.xcnd");
    let cond = xmot::formats::read_cond(&cond_src).unwrap();
    let short = xmot::types::ConditioningSequence::new(
        cond.data().slice(ndarray::s![..100, ..]).to_owned(),
        cond.frame_rate(),
    )
    .unwrap();
    let short_path = dir.join("short.xcnd");
    xmot::formats::write_cond(&short_path, &short).unwrap();

    let out_a = dir.join("a.xmot");
    let out_b = dir.join("b.xmot");
    for out in [&out_a, &out_b] {
        run_ok(&[
            "generate",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--cond",
            short_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--ddim-steps",
            "4",
            "--seed",
            "123",
        ]);
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "same seed must reproduce the file byte for byte");
    let motion = xmot::formats::read_motion(&out_a).unwrap();
    assert_eq!(motion.len(), 100);
    // a different seed must actually change the samples
    let out_c = dir.join("c.xmot");
    run_ok(&[
        "generate",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--cond",
        short_path.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--ddim-steps",
        "4",
        "--seed",
        "124",
    ]);
    assert_ne!(a, std::fs::read(&out_c).unwrap());
}

#[test]
fn config_file_layering_flags_win() {
    let f = &*FIXTURE;
    let dir = scratch("layering");
    let cfg = dir.join("train.cfg");
    std::fs::write(
        &cfg,
        "total_steps=25\nd_model=16\nnum_layers=1\nnum_heads=2\nchunk_size=16\nmax_context=48\nbatch_tokens=64\nnum_diffusion_steps=50\nval_every=100\n",
    )
    .unwrap();
    let out = dir.join("run");
    let stdout = run_ok(&[
        "train",
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--total-steps",
        "12",
    ]);
    assert!(
        stdout.contains("trained 12 steps"),
        "flag should override the file: {stdout}"
    );
    let echo = std::fs::read_to_string(out.join("effective.cfg")).unwrap();
    assert!(echo.contains("total_steps=12"), "echo: {echo}");
    assert!(echo.contains("d_model=16"), "echo: {echo}");
}

#[test]
fn malformed_input_exits_65() {
    let f = &*FIXTURE;
    let dir = scratch("bad_magic");
    let bad = dir.join("bad.xmot");
    std::fs::write(&bad, b"XMOXaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
    let out = run(&[
        "eval",
        "--generated",
        bad.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        dir.join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 65, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_input_exits_66() {
    let f = &*FIXTURE;
    let dir = scratch("missing");
    let out = run(&[
        "generate",
        "--checkpoint",
        dir.join("nowhere.xckp").to_str().unwrap(),
        "--cond",
        f.data.join("eval").join("eval_0000.xcnd").to_str().unwrap(),
        "--out",
        dir.join("y.xmot").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 66, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2_and_other_errors_exit_1() {
    let f = &*FIXTURE;
    let dir = scratch("usage");
    let bad_flag = run(&["train", "--data", "x", "--out", "y", "--bogus"]);
    assert_eq!(code(&bad_flag), 2);

    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "zzz=1\n").unwrap();
    let unknown_key = run(&[
        "train",
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        dir.join("r").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&unknown_key),
        1,
        "{}",
        String::from_utf8_lossy(&unknown_key.stderr)
    );
    assert!(String::from_utf8_lossy(&unknown_key.stderr).contains("zzz"));
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    for sub in ["gen-data", "train", "generate", "eval", "ablate"] {
        assert!(
            String::from_utf8_lossy(&out.stdout).contains(sub),
            "help should list {sub}"
        );
    }
}
