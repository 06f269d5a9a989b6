use std::path::Path;
use std::process::{Command, Output};

use slicevol::geometry::{read_pose_table, Pose};
use slicevol::loss::{SsimConfig, SsimWorkspace};
use slicevol::volume::{load_image_raw, load_volume};
use tempfile::TempDir;

fn slicevol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicevol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slicevol(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, dims: &str, sweep: &str, n: usize, noise: f64) {
    ok(&[
        "simulate",
        "--phantom-seed",
        "7",
        "--dims",
        dims,
        "--sweep",
        sweep,
        "--n",
        &n.to_string(),
        "--noise",
        &noise.to_string(),
        "--out",
        s(dir),
    ]);
}

fn count_images(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("images")).unwrap().count()
}

#[test]
fn simulate_axial_counts() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "16", "axial", 64, 0.0);
    assert_eq!(count_images(tmp.path()), 64);
    let text = std::fs::read_to_string(tmp.path().join("poses.txt")).unwrap();
    let lines = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(lines, 64);
    assert!(!tmp.path().join("poses_true.txt").exists());
    assert!(tmp.path().join("resolved.cfg").exists());
    let vol = load_volume(tmp.path().join("volume.raw")).unwrap();
    assert_eq!(vol.dims(), [16, 16, 16]);
}

#[test]
fn simulate_coronal_sweep_step() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "8", "coronal360", 128, 0.0);
    let poses = read_pose_table(tmp.path().join("poses.txt")).unwrap();
    assert_eq!(poses.len(), 128);
    for w in poses.windows(2) {
        assert!((w[1].euler[0] - w[0].euler[0] - 2.8125).abs() < 1e-12);
    }
}

#[test]
fn simulate_noise_is_bounded() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "8x10x12", "axial", 20, 3.0);
    let noisy = read_pose_table(tmp.path().join("poses.txt")).unwrap();
    let truth = read_pose_table(tmp.path().join("poses_true.txt")).unwrap();
    assert_eq!(noisy.len(), truth.len());
    let dims = [8.0, 10.0, 12.0];
    let mut max_diff: f64 = 0.0;
    for (a, b) in noisy.iter().zip(&truth) {
        for k in 0..3 {
            let de = (a.euler[k] - b.euler[k]).abs();
            let voxels = (a.trans[k] - b.trans[k]).abs() * (dims[k] - 1.0) / 2.0;
            assert!(de <= 3.0 && voxels <= 3.0 + 1e-9, "{de} {voxels}");
            max_diff = max_diff.max(de);
        }
    }
    assert!(max_diff > 0.0);
}

#[test]
fn simulate_needs_a_source() {
    let tmp = TempDir::new().unwrap();
    let out = slicevol(&["simulate", "--n", "4", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    let out = slicevol(&["simulate", "--phantom-seed", "1", "--bogus", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
}

fn train(dir: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let images = dir.join("images");
    let poses = dir.join("poses.txt");
    let mut args = vec![
        "reconstruct",
        "--images",
        s(&images),
        "--poses",
        s(&poses),
        "--out",
        s(ckpt),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn report_without_seconds(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(1);
            f.join(",")
        })
        .collect()
}

#[test]
fn reconstruct_writes_checkpoint_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "12", "axial", 12, 0.0);
    let gt = tmp.path().join("volume.raw");
    let args = [
        "--set",
        "epochs=6",
        "--set",
        "eval_every=2",
        "--gt",
        s(&gt),
        "--eval-views",
        "4",
    ];
    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    train(tmp.path(), &a, &args);
    train(tmp.path(), &b, &args);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], b"RFLDv001");
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let ra = report_without_seconds(&tmp.path().join("a.ckpt.report.csv"));
    let rb = report_without_seconds(&tmp.path().join("b.ckpt.report.csv"));
    assert_eq!(ra.len(), 5);
    assert_eq!(ra, rb);

    // The resolved config alone reproduces the run.
    let cfg = tmp.path().join("a.ckpt.cfg");
    let c = tmp.path().join("c.ckpt");
    train(
        tmp.path(),
        &c,
        &["--config", s(&cfg), "--gt", s(&gt), "--eval-views", "4"],
    );
    assert_eq!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn reconstruct_count_mismatch_names_both_counts() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "8", "axial", 6, 0.0);
    let other = tmp.path().join("other");
    simulate(&other, "8", "axial", 9, 0.0);
    let out = slicevol(&[
        "reconstruct",
        "--images",
        s(&tmp.path().join("images")),
        "--poses",
        s(&other.join("poses.txt")),
        "--out",
        s(&tmp.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('6') && err.contains('9'), "{err}");
}

#[test]
fn reconstruct_rejects_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "12", "axial", 4, 0.0);
    let images = tmp.path().join("images");
    let ckpt = tmp.path().join("m.ckpt");
    let poses = tmp.path().join("nan.txt");
    std::fs::write(&poses, "0 0 0 0 0 -1\n0 0 0 0 0 0\nnan 0 0 0 0 0.5\n0 0 0 0 0 1\n").unwrap();
    let out = slicevol(&[
        "reconstruct",
        "--images",
        s(&images),
        "--poses",
        s(&poses),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&out), 4);
    let good = tmp.path().join("poses.txt");
    let out = slicevol(&[
        "reconstruct",
        "--images",
        s(&images),
        "--poses",
        s(&good),
        "--set",
        "no_such_key=1",
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&out), 2);
    let out = slicevol(&["reconstruct", "--images", s(&images), "--poses", s(&good)]);
    assert_eq!(code(&out), 2);
}

fn ssim(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    SsimWorkspace::new(SsimConfig::default(), rows, cols)
        .unwrap()
        .value(a, b)
        .unwrap()
}

#[test]
fn render_identity_matches_central_axial_slice() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "32", "axial", 32, 0.0);
    let ckpt = tmp.path().join("m.ckpt");
    let gt = tmp.path().join("volume.raw");
    train(
        tmp.path(),
        &ckpt,
        &[
            "--set",
            "epochs=120",
            "--set",
            "lr_field=5",
            "--set",
            "lr_decoder=0.01",
            "--set",
            "eval_every=10",
            "--set",
            "stop_at_ssim=0.93",
            "--gt",
            s(&gt),
            "--eval-views",
            "8",
        ],
    );
    let before = std::fs::read(&ckpt).unwrap();
    let img = tmp.path().join("mid.raw");
    ok(&[
        "render",
        "--ckpt",
        s(&ckpt),
        "--pose",
        "0,0,0,0,0,0",
        "--size",
        "32x32",
        "--out",
        s(&img),
    ]);
    let rendered = load_image_raw(&img).unwrap().to_f64();
    let vol = load_volume(&gt).unwrap();
    let truth: Vec<f64> = {
        let g = slicevol::geometry::pose_to_grid(&Pose::new([0.0; 3], [0.0; 3]), 32, 32, 1.0).unwrap();
        g.coords.iter().map(|&c| vol.sample_trilinear(c)).collect()
    };
    let score = ssim(&rendered, &truth, 32, 32);
    assert!(score >= 0.9, "identity render SSIM {score}");

    let big = tmp.path().join("big.pgm");
    ok(&[
        "render",
        "--ckpt",
        s(&ckpt),
        "--pose",
        "10,-5,3,0,0.1,-0.2",
        "--size",
        "256x256",
        "--out",
        s(&big),
    ]);
    let pgm = slicevol::volume::load_pgm(&big).unwrap();
    assert_eq!((pgm.rows(), pgm.cols()), (256, 256));
    assert!(tmp.path().join("big.pgm.cfg").exists());
    assert_eq!(
        before,
        std::fs::read(&ckpt).unwrap(),
        "render must not touch the checkpoint"
    );
}

#[test]
fn render_usage_errors() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "12", "axial", 4, 0.0);
    let ckpt = tmp.path().join("m.ckpt");
    train(tmp.path(), &ckpt, &["--set", "epochs=1"]);
    let out_img = tmp.path().join("x.raw");
    for (pose, size) in [
        ("1,2", "12x12"),
        ("a,0,0,0,0,0", "12x12"),
        ("0,0,0,0,0,0", "8"),
        ("0,0,0,0,0,0", "1x8"),
    ] {
        let out = slicevol(&[
            "render",
            "--ckpt",
            s(&ckpt),
            "--pose",
            pose,
            "--size",
            size,
            "--out",
            s(&out_img),
        ]);
        assert_eq!(code(&out), 2, "{pose} {size}");
    }
    assert!(!out_img.exists());
    let missing = tmp.path().join("missing.ckpt");
    let out = slicevol(&[
        "render",
        "--ckpt",
        s(&missing),
        "--pose",
        "0,0,0,0,0,0",
        "--out",
        s(&out_img),
    ]);
    assert_eq!(code(&out), 3);
    std::fs::write(&missing, b"NOTACKPT and some more bytes").unwrap();
    let out = slicevol(&[
        "render",
        "--ckpt",
        s(&missing),
        "--pose",
        "0,0,0,0,0,0",
        "--out",
        s(&out_img),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn evaluate_bench_ablate_and_atlas_write_outputs() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "12", "axial", 8, 0.0);
    let ckpt = tmp.path().join("m.ckpt");
    train(tmp.path(), &ckpt, &["--set", "epochs=2"]);
    let gt = tmp.path().join("volume.raw");
    let images = tmp.path().join("images");
    let poses = tmp.path().join("poses.txt");

    let ev = tmp.path().join("ev");
    let out = ok(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--gt",
        s(&gt),
        "--poses",
        s(&poses),
        "--n",
        "4",
        "--out",
        s(&ev),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("coronal") && table.contains('±'), "{table}");
    let csv = std::fs::read_to_string(ev.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(ev.join("resolved.cfg").exists());

    // An axial test view on a training plane is refused.
    let clash = tmp.path().join("clash.txt");
    std::fs::write(&clash, "0 0 0 0 0 0.25\n").unwrap();
    let out = slicevol(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--gt",
        s(&gt),
        "--poses",
        s(&clash),
        "--n",
        "4",
        "--out",
        s(&ev),
    ]);
    assert_eq!(code(&out), 3);

    let bench = tmp.path().join("bench");
    ok(&[
        "bench",
        "--images",
        s(&images),
        "--poses",
        s(&poses),
        "--gt",
        s(&gt),
        "--set",
        "epochs=2",
        "--set",
        "implicit_width=16",
        "--set",
        "implicit_layers=2",
        "--eval-views",
        "2",
        "--out",
        s(&bench),
    ]);
    let summary = std::fs::read_to_string(bench.join("summary.txt")).unwrap();
    assert!(summary.contains("implicit / triplanar"), "{summary}");
    assert!(bench.join("curves.dat").exists() && bench.join("curves.csv").exists());

    let ablate = tmp.path().join("ablate");
    ok(&[
        "ablate",
        "--images",
        s(&images),
        "--poses",
        s(&poses),
        "--gt",
        s(&gt),
        "--set",
        "epochs=1",
        "--set",
        "field_resolution=4x4x4",
        "--set",
        "channels=2",
        "--set",
        "rank=1",
        "--eval-views",
        "2",
        "--out",
        s(&ablate),
    ]);
    let csv = std::fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 98);

    let atlas = tmp.path().join("atlas.ckpt");
    let out = slicevol(&[
        "atlas-fit",
        "--phantom-seed",
        "3",
        "--dims",
        "12",
        "--set",
        "epochs=1",
        "--held-out",
        "2",
        "--out",
        s(&atlas),
    ]);
    // One epoch at the default learning rates cannot reach the minimum fit.
    assert_eq!(code(&out), 3);
    assert!(tmp.path().join("atlas.ckpt.cfg").exists());
}
