use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sphere_core::data::{save_png, synth_generate, DatasetSpec};

fn sphere(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphere"))
        .args(args)
        .env_remove("SPHERE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sphere(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    sphere(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One tiny trained checkpoint shared by every test in this file.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["train", "--preset", "tiny", "--total-epochs", "2", "--seed", "3", "--out", s(dir.path())]);
        dir
    })
    .path()
}

fn checkpoint() -> PathBuf {
    trained().join("final.ckpt")
}

#[test]
fn train_writes_run_outputs() {
    let dir = trained();
    for f in ["final.ckpt", "config.toml", "metrics.csv"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let cfg = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.contains("total_epochs = 2"));
    // 2 classes x 4 images, batch 4, 2 epochs.
    assert_eq!(std::fs::read_to_string(dir.join("metrics.csv")).unwrap().lines().count(), 1 + 4);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let partial = dir.path().join("partial.toml");
    std::fs::write(&partial, "image_size = 8\nbatch_size = 4\n").unwrap();
    let out = sphere(&["train", "--config", s(&partial), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing field"));

    let unknown = dir.path().join("unknown.toml");
    let mut text = sphere_core::config::RunConfig::preset("tiny").unwrap().to_toml();
    text.push_str("\nlearning_rat = 0.1\n");
    std::fs::write(&unknown, text).unwrap();
    assert_eq!(code(&["train", "--config", s(&unknown), "--out", s(dir.path())]), 2);

    assert_eq!(code(&["train", "--preset", "tiny", "--set", "noequals", "--out", s(dir.path())]), 2);
    assert_eq!(code(&["train", "--preset", "huge", "--out", s(dir.path())]), 2);
    assert_eq!(
        code(&["train", "--preset", "tiny", "--set", "angle_jitter_range=[0, 95]", "--out", s(dir.path())]),
        2
    );
}

#[test]
fn generate_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    ok(&["generate", "--checkpoint", s(&ck), "--n", "3", "--steps", "2", "--out", s(dir.path())]);
    for f in ["sample_0000.png", "sample_0002.png", "grid.png", "manifest.csv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("sample_0000.png,0,"));
    assert!(rows[2].starts_with("sample_0001.png,1,"));

    assert_eq!(code(&["generate", "--checkpoint", s(&ck), "--class", "7", "--out", s(dir.path())]), 2);
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&["generate", "--checkpoint", s(&missing), "--out", s(dir.path())]), 4);
    let corrupt = dir.path().join("bad.ckpt");
    std::fs::write(&corrupt, b"garbage").unwrap();
    assert_eq!(code(&["generate", "--checkpoint", s(&corrupt), "--out", s(dir.path())]), 4);
}

#[test]
fn latent_viz_rows_are_unit_vectors() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["latent-viz", "--checkpoint", s(&checkpoint()), "--per-class", "5", "--out", s(dir.path())]);
    let mut reader = csv::Reader::from_path(dir.path().join("latents_3d.csv")).unwrap();
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let p: Vec<f64> = (1..4).map(|i| rec[i].parse().unwrap()).collect();
        assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-9);
        n += 1;
    }
    assert_eq!(n, 10);
}

#[test]
fn edit_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&DatasetSpec::synthetic(8, 3, 2, 1), 0).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    save_png(ds.images.image(0), 8, 8, 3, &a).unwrap();
    save_png(ds.images.image(1), 8, 8, 3, &b).unwrap();
    let ck = checkpoint();

    let out = dir.path().join("m");
    ok(&["edit", "--checkpoint", s(&ck), "--mode", "manipulate", "--input", s(&a), "--target-class", "1", "--out", s(&out)]);
    assert!(out.join("edited.png").exists());
    let summary = std::fs::read_to_string(out.join("edit.txt")).unwrap();
    assert!(summary.contains("steps = 1") && summary.contains("r = 1"));

    let out = dir.path().join("c");
    ok(&["edit", "--checkpoint", s(&ck), "--mode", "crossover", "--input", s(&a), "--input-b", s(&b), "--steps", "2", "--out", s(&out)]);
    assert!(out.join("edited.png").exists() && out.join("composite.png").exists());
    let summary = std::fs::read_to_string(out.join("edit.txt")).unwrap();
    assert!(summary.contains("r = 0.25") && summary.contains("gamma = 1"));

    assert_eq!(code(&["edit", "--checkpoint", s(&ck), "--mode", "manipulate", "--input", s(&a), "--out", s(&out)]), 2);
    assert_eq!(code(&["edit", "--checkpoint", s(&ck), "--mode", "crossover", "--input", s(&a), "--out", s(&out)]), 2);
}

#[test]
fn reconstruct_interpolate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    let out = dir.path().join("r");
    ok(&["reconstruct", "--checkpoint", s(&ck), "--per-class", "2", "--out", s(&out)]);
    assert!(out.join("recon_0003.png").exists() && out.join("summary.txt").exists());

    let out = dir.path().join("i");
    ok(&["interpolate", "--checkpoint", s(&ck), "--classes", "0,1,null,1", "--grid-n", "3", "--out", s(&out)]);
    let img = image::open(out.join("interpolation.png")).unwrap();
    assert_eq!((img.width(), img.height()), (3 * 9 - 1, 3 * 9 - 1));
    assert_eq!(code(&["interpolate", "--checkpoint", s(&ck), "--classes", "0,1,9,1", "--out", s(&out)]), 2);
    assert_eq!(code(&["interpolate", "--checkpoint", s(&ck), "--classes", "0,1", "--out", s(&out)]), 2);

    let out = dir.path().join("e");
    ok(&["eval", "--checkpoint", s(&ck), "--n-samples", "8", "--per-class", "4", "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    for key in ["frechet_distance,all,", "noise_baseline,all,", "swd_to_uniform,pooled,", "median_recon_l1,all,"] {
        assert!(csv.contains(key), "missing {key}");
    }
}
