use std::path::Path;
use std::process::{Command, Output};

fn pgcam(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgcam"))
        .env("PGCAM_OUT_DIR", out_dir)
        .args(args)
        .output()
        .expect("spawn pgcam")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) {
    ok(&pgcam(
        dir,
        &[
            "gen-data", "--out", s(&dir.join("data")), "--train-n", "24", "--val-n", "8", "--loc-n", "4", "--size", "32",
            "--prevalence", "0.5",
        ],
    ));
}

fn small_train(dir: &Path, model: &str, ckpt: &str, extra: &[&str]) -> String {
    let data = dir.join("data");
    let ckpt = dir.join(ckpt);
    let mut args = vec![
        "train", "--model", model, "--data", s(&data), "--iters", "3", "--batch", "4", "--scales", "3", "--base-channels",
        "2", "--out-checkpoint", s(&ckpt),
    ];
    args.extend_from_slice(extra);
    ok(&pgcam(dir, &args))
}

#[test]
fn gen_data_is_deterministic_and_prints_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_data(a.path());
    small_data(b.path());
    for name in ["train.tsv", "val.tsv", "eval_loc.tsv", "train/00000.pgm", "eval_loc/00003.pgm"] {
        let x = std::fs::read(a.path().join("data").join(name)).unwrap();
        let y = std::fs::read(b.path().join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let out = ok(&pgcam(a.path(), &["gen-data", "--train-n", "2", "--val-n", "2", "--loc-n", "1", "--size", "32"]));
    assert_eq!(out.lines().count(), 3);
    assert!(a.path().join("data/eval_loc.tsv").exists(), "default output goes under PGCAM_OUT_DIR");
}

#[test]
fn gen_data_rejects_bad_prevalence_without_manifests() {
    let d = tempfile::tempdir().unwrap();
    let out = pgcam(d.path(), &["gen-data", "--out", s(&d.path().join("x")), "--prevalence", "1.5"]);
    assert!(!out.status.success());
    assert!(!d.path().join("x/train.tsv").exists());
}

#[test]
fn train_cam_localize_report_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    small_data(dir);
    let log = small_train(dir, "dcfpn", "dc.pgck", &[]);
    assert!(log.contains("iterations\t3"), "{log}");
    assert_eq!(std::fs::read_to_string(dir.join("dc.log")).unwrap().lines().count(), 3);
    small_train(dir, "baseline", "base.pgck", &[]);
    small_train(dir, "dcfpn", "nodense.pgck", &["--dense", "off"]);

    let image = dir.join("data/eval_loc/00000.pgm");
    let map = dir.join("m.pgsm");
    let png = dir.join("m.png");
    ok(&pgcam(
        dir,
        &[
            "cam", "--checkpoint", s(&dir.join("dc.pgck")), "--image", s(&image), "--method", "pgcam", "--scales", "1,3",
            "--out-map", s(&map), "--out-png", s(&png),
        ],
    ));
    let decoded = pgcam_core::cam::decode_pgsm(&std::fs::read(&map).unwrap()).unwrap();
    assert_eq!((decoded.height(), decoded.width()), (32, 32));
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    let manifest = dir.join("data/eval_loc.tsv");
    let r1 = dir.join("pg.report");
    let r2 = dir.join("gc.report");
    let out = ok(&pgcam(
        dir,
        &[
            "localize", "--checkpoint", s(&dir.join("dc.pgck")), "--manifest", s(&manifest), "--method", "pgcam",
            "--scales", "1,3", "--out-report", s(&r1), "--boxes-dir", s(&dir.join("boxes")),
        ],
    ));
    assert!(out.contains("f1="), "{out}");
    assert!(dir.join("boxes/eval_loc/00000.box").exists());
    ok(&pgcam(
        dir,
        &[
            "localize", "--checkpoint", s(&dir.join("base.pgck")), "--manifest", s(&manifest), "--method", "gradcam",
            "--out-report", s(&r2),
        ],
    ));
    let rep1 = pgcam_core::report::RunReport::load(&r1).unwrap();
    assert_eq!(rep1.get("tau"), Some("0.4"));
    assert_eq!(rep1.get("iobb"), Some("0.2"));
    let rep2 = pgcam_core::report::RunReport::load(&r2).unwrap();
    assert_eq!(rep2.get("tau"), Some("0.8"));

    let merged = dir.join("merged.report");
    ok(&pgcam(dir, &["report", "--inputs", s(&r1), s(&r2), "--out", s(&merged)]));
    let m = pgcam_core::report::RunReport::load(&merged).unwrap();
    assert_eq!(m.rows.len(), rep1.rows.len() + rep2.rows.len());

    let e = ok(&pgcam(
        dir,
        &["eval", "--checkpoint", s(&dir.join("dc.pgck")), "--manifest", s(&dir.join("data/val.tsv"))],
    ));
    assert!(e.contains("accuracy\t"), "{e}");
}

#[test]
fn usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    small_data(dir);
    let bad_model = pgcam(dir, &["train", "--model", "resnet", "--data", s(&dir.join("data"))]);
    assert_eq!(bad_model.status.code(), Some(2));

    small_train(dir, "dcfpn", "dc.pgck", &[]);
    let image = dir.join("data/eval_loc/00000.pgm");
    let multi = pgcam(
        dir,
        &["cam", "--checkpoint", s(&dir.join("dc.pgck")), "--image", s(&image), "--method", "gradcam", "--scales", "1,2"],
    );
    assert_eq!(multi.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&multi.stderr).contains("pgcam"));

    let no_boxes = pgcam(
        dir,
        &["localize", "--checkpoint", s(&dir.join("dc.pgck")), "--manifest", s(&dir.join("data/val.tsv"))],
    );
    assert!(!no_boxes.status.success());
    assert!(String::from_utf8_lossy(&no_boxes.stderr).contains("boxes"));
}

#[test]
fn report_rejects_mismatched_datasets() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let mut a = pgcam_core::report::RunReport::new(pgcam_core::report::fingerprint(b"one"));
    a.set("k", 1);
    let mut b = a.clone();
    b.dataset = pgcam_core::report::fingerprint(b"two");
    a.save(&dir.join("a.report")).unwrap();
    b.save(&dir.join("b.report")).unwrap();
    let out = pgcam(
        dir,
        &["report", "--inputs", s(&dir.join("a.report")), s(&dir.join("b.report")), "--out", s(&dir.join("m.report"))],
    );
    assert!(!out.status.success());
    assert!(!dir.join("m.report").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    small_data(dir);
    let data = dir.join("data");
    let run = |iters: &str, ckpt: &str, resume: Option<&str>| {
        let ckpt = dir.join(ckpt);
        let mut args = vec![
            "train", "--data", s(&data), "--iters", iters, "--batch", "4", "--scales", "3", "--base-channels", "2",
            "--out-checkpoint", s(&ckpt),
        ];
        let r;
        if let Some(p) = resume {
            r = dir.join(p);
            args.extend_from_slice(&["--resume", s(&r)]);
        }
        ok(&pgcam(dir, &args.iter().map(|a| &**a).collect::<Vec<_>>()));
    };
    run("8", "full.pgck", None);
    run("3", "part.pgck", None);
    run("8", "part.pgck", Some("part.pgck"));
    assert_eq!(std::fs::read(dir.join("full.pgck")).unwrap(), std::fs::read(dir.join("part.pgck")).unwrap());
    assert_eq!(
        std::fs::read(dir.join("full.log")).unwrap(),
        std::fs::read(dir.join("part.log")).unwrap()
    );
}
