use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmm")).args(args).env("PMM_THREADS", "1").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&pmm(&[])), 1);
    assert_eq!(code(&pmm(&["frobnicate"])), 1);
    assert_eq!(code(&pmm(&["train-vq"])), 1, "missing --manifest");
    assert_eq!(code(&pmm(&["train-vq", "--manifest", "m.tsv", "--set", "nonsense"])), 1);
    assert_eq!(code(&pmm(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmm(&["train-vq", "--manifest", p(&dir.path().join("absent.tsv")), "--out", p(&dir.path().join("vq"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.tsv"));
}

#[test]
fn injected_fault_fails_selftest_with_exit_3() {
    let o = pmm(&["selftest", "--seeds", "1", "--inject-fault", "gelu"]);
    assert_eq!(code(&o), 3);
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("grad.gelu") && l.contains("FAIL")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("grad.matmul ") && l.contains(" ok ")), "{table}");
    assert_eq!(code(&pmm(&["selftest", "--inject-fault", "teleport"])), 1);
}

#[test]
fn clean_selftest_passes() {
    let o = pmm(&["selftest", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let o = pmm(&["gen-synthetic", "--out", p(&data), "--train", "12", "--heldout", "6", "--docs", "6", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = data.join("manifest.tsv");
    assert!(manifest.exists() && data.join("heldout_manifest.tsv").exists());

    // tokenizer training is a pure function of the seed
    let vq_a = root.join("vq_a");
    let vq_b = root.join("vq_b");
    for out in [&vq_a, &vq_b] {
        let o = pmm(&["train-vq", "--manifest", p(&manifest), "--out", p(out), "--steps", "4", "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("final_mse="));
    }
    assert_eq!(fs::read(vq_a.join("vq.ckpt")).unwrap(), fs::read(vq_b.join("vq.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(vq_a.join("vq_log.txt")).unwrap().lines().count(), 4);
    let frozen = fs::read_to_string(vq_a.join("config.ini")).unwrap();
    assert!(frozen.contains("steps=4") || frozen.contains("steps = 4"), "{frozen}");
    assert!(frozen.contains("seed"), "{frozen}");

    let vocab_dir = root.join("vocab");
    let o = pmm(&["build-vocab", "--manifest", p(&manifest), "--out", p(&vocab_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let vocab = vocab_dir.join("vocab.txt");
    let vq = vq_a.join("vq.ckpt");

    // a conflicting request is refused before anything is trained
    let bad_out = root.join("bad");
    let o = pmm(&[
        "train", "--manifest", p(&manifest), "--vocab", p(&vocab), "--vq", p(&vq), "--out", p(&bad_out),
        "--objectives", "plm", "--mask-strategy", "mim",
    ]);
    assert_eq!(code(&o), 1);
    assert!(!bad_out.join("model.ckpt").exists());

    let run = root.join("run");
    let o = pmm(&[
        "train", "--manifest", p(&manifest), "--vocab", p(&vocab), "--vq", p(&vq), "--out", p(&run),
        "--steps", "3", "--batch-size", "2", "--set", "train.text_batch_size=2", "--seed", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(metrics.lines().all(|l| l.contains("total=")));
    assert!(run.join("config.ini").exists() && run.join("model.ckpt").exists());
    let ckpt = run.join("model.ckpt");

    let image = fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let o = pmm(&["caption", "--checkpoint", p(&ckpt), "--image", p(&image)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let painted = root.join("painted.ppm");
    let o = pmm(&["paint", "--checkpoint", p(&ckpt), "--caption", "a red circle", "--out", p(&painted)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(painted.exists());

    let o = pmm(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&data.join("heldout_manifest.tsv"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("text_accuracy="), "{}", stdout(&o));

    // an exploding learning rate ends in a numeric failure
    let o = pmm(&[
        "train", "--manifest", p(&manifest), "--vocab", p(&vocab), "--vq", p(&vq), "--out", p(&root.join("nan")),
        "--steps", "6", "--batch-size", "2", "--lr", "1e200", "--set", "train.warmup_fraction=0.5",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("nan/model.ckpt").exists());
}
