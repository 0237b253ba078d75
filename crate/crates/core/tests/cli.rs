use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defog2refog::cli::{RunManifest, CHECKPOINT_DIR_ENV};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_defog2refog"));
    c.env_remove(CHECKPOINT_DIR_ENV).env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn toy(dir: &Path, scenes: usize) -> PathBuf {
    let root = dir.join("toy");
    let out = run(bin().args(["make-toy-data", "--scenes", &scenes.to_string(), "--size", "32", "--seed", "1", "--output"]).arg(&root));
    assert!(out.status.success());
    root
}

fn config(dir: &Path, iterations: u64) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(
        &p,
        format!(
            "[data]\nfoggy_dir = \"toy/foggy\"\nclear_dir = \"toy/clear\"\n\n[output]\ndir = \"out\"\n\n\
             [train]\nimage_size = 32\niterations = {iterations}\ncheckpoint_every = 2\nseed = 5\n"
        ),
    )
    .unwrap();
    p
}

/// CSV lines with the trailing wall-clock column removed.
fn loss_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn toy_training_completes_and_resume_appends() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 3);
    let cfg = config(dir.path(), 4);
    let out_dir = dir.path().join("out");

    assert!(run(bin().arg("train").arg("--config").arg(&cfg).args(["--iterations", "2"])).status.success());
    let csv = out_dir.join("losses.csv");
    let first = std::fs::read(&csv).unwrap();
    assert_eq!(loss_lines(&csv).len(), 1 + 2 * 2);
    let manifest = RunManifest::read(&out_dir.join(RunManifest::FILE)).unwrap();
    assert_eq!((manifest.command.as_str(), manifest.seed), ("train", Some(5)));
    assert!(manifest.finished_at.is_some());
    assert_eq!(manifest.config["train"]["iterations"], 2);

    assert!(run(bin().arg("train").arg("--config").arg(&cfg).arg("--resume-latest")).status.success());
    let resumed = std::fs::read(&csv).unwrap();
    assert_eq!(&resumed[..first.len()], &first[..]);
    assert_eq!(loss_lines(&csv).len(), 1 + 4 * 2);
    assert!(out_dir.join("checkpoints/iter_000004.ckpt").is_file());

    let straight = dir.path().join("straight");
    assert!(run(bin().arg("train").arg("--config").arg(&cfg).arg("--output").arg(&straight)).status.success());
    assert_eq!(loss_lines(&csv), loss_lines(&straight.join("losses.csv")));
}

#[test]
fn missing_dataset_directory_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let out = run(bin().arg("train").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&dir.path().join("toy/foggy").display().to_string()), "{err}");
    assert!(err.contains(&dir.path().join("toy/clear").display().to_string()), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(bin().arg("defog")).status.code(), Some(2));
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
}

#[test]
fn defog_uses_checkpoint_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 2);
    let cfg = config(dir.path(), 1);
    let ckpts = dir.path().join("ckpts");
    assert!(run(bin().arg("train").arg("--config").arg(&cfg).env(CHECKPOINT_DIR_ENV, &ckpts)).status.success());
    assert!(ckpts.join("iter_000001.ckpt").is_file());

    let out = dir.path().join("defogged");
    assert!(run(bin().arg("defog").arg("--input").arg(root.join("foggy")).arg("--output").arg(&out).env(CHECKPOINT_DIR_ENV, &ckpts))
        .status
        .success());
    let pngs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"));
    assert_eq!(pngs.count(), 2);

    let nothing = run(bin().arg("defog").arg("--input").arg(root.join("foggy")).arg("--output").arg(&out));
    assert_eq!(nothing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&nothing.stderr).contains(CHECKPOINT_DIR_ENV));
}

#[test]
fn strict_mode_flags_skipped_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 2);
    std::fs::remove_file(root.join("clear/scene_001.png")).unwrap();
    let eval = |strict: bool| {
        let mut c = bin();
        c.arg("eval")
            .arg("--before")
            .arg(root.join("foggy"))
            .arg("--after")
            .arg(root.join("clear"))
            .arg("--report")
            .arg(dir.path().join("r.csv"));
        if strict {
            c.arg("--strict");
        }
        run(&mut c)
    };
    let lax = eval(false);
    assert_eq!(lax.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&lax.stdout).contains("skipped 1"));
    assert_eq!(eval(true).status.code(), Some(3));
    let m = RunManifest::read(&dir.path().join("r.manifest.json")).unwrap();
    assert_eq!(m.skipped, Some(1));
}

#[test]
fn synth_reruns_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 2);
    let out = dir.path().join("fogged");
    assert!(run(bin().arg("synth").arg("--clear").arg(root.join("clear")).args(["--beta", "0.7", "--airlight", "0.9,0.8,0.85", "--output"]).arg(&out))
        .status
        .success());
    let m = RunManifest::read(&out.join(RunManifest::FILE)).unwrap();
    let before = std::fs::read(out.join("scene_000.png")).unwrap();
    std::fs::remove_file(out.join("scene_000.png")).unwrap();
    assert!(run(bin().args(&m.args[1..])).status.success());
    assert_eq!(std::fs::read(out.join("scene_000.png")).unwrap(), before);
    assert!(out.join("sidecars/scene_001.t.dpth").is_file());
}
