use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpdenoise"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fpdenoise")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, count: &str, size: &str) -> Output {
    run(&["generate", "--out", s(dir), "--count", count, "--size", size, "--seed", "7"])
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!("# small model\nmodel.base_channels = 4\ntrain.batch_size = 4\ntrain.max_epochs = 2\n{extra}"),
    )
    .unwrap();
    path
}

#[test]
fn generate_writes_expected_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = generate(&a, "100", "64x64");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("train 80, val 10, test 10"), "{}", stdout(&out));
    assert!(stdout(&out).contains("noisy baseline: mean PSNR"));
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    for (split, n) in [("train", 80), ("val", 10), ("test", 10)] {
        assert_eq!(manifest.lines().filter(|l| l.ends_with(&format!(",{split}"))).count(), n);
    }
    assert_eq!(code(&generate(&b, "100", "64x64")), 0);
    for name in ["manifest.txt", "clean/00042.pgm", "noisy/00099.pgm"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(code(&generate(&a, "100", "64x64")), 2);
    assert_eq!(code(&run(&["generate", "--out", s(&a), "--count", "4", "--force"])), 0);
}

#[test]
fn generate_rejects_bad_sizes_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = generate(tmp.path(), "10", "60x60");
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 8"));
    assert_eq!(code(&generate(tmp.path(), "10", "sixty")), 2);
    assert_eq!(code(&run(&["generate", "--out", s(tmp.path()), "--bogus"])), 2);
    assert_eq!(code(&generate(tmp.path(), "0", "16x16")), 2);
}

#[test]
fn help_lists_flags_with_defaults() {
    let out = run(&["train", "--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for flag in ["--data", "--out", "--config", "--max-epochs", "--seed", "--log", "--resume", "--force"] {
        assert!(text.contains(flag), "{flag} missing from\n{text}");
    }
    assert!(text.contains("[default: 30"));
    let top = stdout(&run(&["--help"]));
    assert!(top.contains("Exit status"));
    let eval = stdout(&run(&["eval", "--help"]));
    assert!(eval.contains("[default: test]"));
    let keys = stdout(&run(&["config"]));
    assert!(keys.contains("train.initial_lr = 0.001"));
    assert!(keys.contains("train.lr_halve_every = 3"));
}

#[test]
fn train_eval_denoise_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, "30", "32x32")), 0);
    let cfg = small_config(tmp.path(), "");
    let ckpt = tmp.path().join("model.ckpt");

    let args = ["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg)];
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(tmp.path().join("model.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,train_mse,val_mse,val_psnr,val_ssim,stopped");
    assert_eq!(log.lines().count(), 3);
    assert!(ckpt.exists());

    assert_eq!(code(&run(&args)), 2, "refuses to overwrite");
    let mut resumed: Vec<&str> = args.to_vec();
    resumed.extend(["--resume", "--max-epochs", "3"]);
    let out = run(&resumed);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("resuming after epoch"));

    let out = run(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("denoised") && stdout(&out).contains("delta"));
    let csv = std::fs::read_to_string(tmp.path().join("model.test.csv")).unwrap();
    assert!(csv.starts_with("id,psnr,ssim,mse,baseline_psnr,baseline_ssim,baseline_mse\n"));

    let wide = small_config(&tmp.path().join("data"), "model.base_channels = 8\n");
    assert_eq!(code(&run(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--config", s(&wide)])), 5);

    let img = tmp.path().join("odd.pgm");
    let mut bytes = b"P5\n30 22\n255\n".to_vec();
    bytes.extend((0..30 * 22).map(|i| (i * 7 % 256) as u8));
    std::fs::write(&img, bytes).unwrap();
    let den = tmp.path().join("odd_out.pgm");
    let out = run(&["denoise", "--ckpt", s(&ckpt), "--in", s(&img), "--out", s(&den)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written = std::fs::read(&den).unwrap();
    assert!(written.starts_with(b"P5\n30 22\n255\n"));
    assert_eq!(written.len(), b"P5\n30 22\n255\n".len() + 30 * 22);

    let mut bad = std::fs::read(&ckpt).unwrap();
    bad[4] = 99;
    let bad_ckpt = tmp.path().join("v99.ckpt");
    std::fs::write(&bad_ckpt, &bad).unwrap();
    assert_eq!(code(&run(&["denoise", "--ckpt", s(&bad_ckpt), "--in", s(&img), "--out", s(&den)])), 5);
    std::fs::write(&bad_ckpt, &bad[..bad.len() / 2]).unwrap();
    assert_eq!(code(&run(&["eval", "--data", s(&data), "--ckpt", s(&bad_ckpt)])), 5);
    let missing = tmp.path().join("missing.pgm");
    assert_eq!(code(&run(&["denoise", "--ckpt", s(&ckpt), "--in", s(&missing), "--out", s(&den)])), 3);
}

#[test]
fn eval_identity_reports_baseline_and_rejects_empty_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, "5", "32x32")), 0);
    let out = run(&["eval", "--data", s(&data), "--identity", "--split", "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let delta = stdout(&out).lines().find(|l| l.starts_with("delta")).unwrap().to_string();
    assert_eq!(delta.split_whitespace().skip(1).collect::<Vec<_>>(), ["+0.0000", "+0.0000", "+0.000000"]);
    let out = run(&["eval", "--data", s(&data), "--identity", "--split", "val"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn train_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, "12", "16x16")), 0);
    let ckpt = tmp.path().join("m.ckpt");
    let out = run(&["train", "--data", s(&data), "--out", s(&ckpt), "--max-epochs", "0"]);
    assert_eq!(code(&out), 2);
    let typo = small_config(tmp.path(), "train.epochs = 3\n");
    let out = run(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&typo)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));
    let nowhere = tmp.path().join("nowhere");
    assert_eq!(code(&run(&["train", "--data", s(&nowhere), "--out", s(&ckpt)])), 3);
    assert!(!ckpt.exists());
}

#[test]
fn diverging_training_exits_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&generate(&data, "12", "16x16")), 0);
    let cfg = small_config(tmp.path(), "train.initial_lr = 1e38\n");
    let out = run(&["train", "--data", s(&data), "--out", s(&tmp.path().join("m.ckpt")), "--config", s(&cfg)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("all ") && text.contains("checks passed"));
    assert!(text.lines().filter(|l| l.contains("max rel err")).count() > 20);
}
