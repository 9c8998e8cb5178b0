use std::path::Path;
use std::process::{Command, Output};

use harvim::cli::{exit_code, EXIT_IO, EXIT_NUMERICAL, EXIT_USAGE};
use harvim::Error;

fn harvim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvim")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(harvim(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(harvim(&["gradcheck", "--cases", "x"]).status.code(), Some(EXIT_USAGE));
    let o = harvim(&["learn-wm", "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn missing_prior_exits_3_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let prior = dir.path().join("absent.hvmf");
    let o = harvim(&["learn-wm", "--prior", s(&prior), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(stderr(&o).contains("absent.hvmf"), "{}", stderr(&o));
}

#[test]
fn corrupt_prior_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let prior = dir.path().join("bad.hvmf");
    std::fs::write(&prior, b"not a checkpoint").unwrap();
    let o = harvim(&["gauntlet", "--prior", s(&prior), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(stderr(&o).contains("bad.hvmf"), "{}", stderr(&o));
}

#[test]
fn error_classes_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::NonFinite { op: "x" }), EXIT_NUMERICAL);
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_IO);
}

#[test]
fn gradcheck_passes() {
    let o = harvim(&["gradcheck", "--cases", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("meta-gradient") && !out.contains("FAIL"));
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let prior = dir.path().join("prior.hvmf");
    let quick = [
        "--set", "train.images=64",
        "--set", "train.epochs=1",
        "--set", "harvim.rounds=3",
        "--set", "harvim.grid_mle_steps=5",
        "--set", "harvim.init_mle_steps=5",
        "--set", "removers=heat-diffusion,blind-threshold",
    ];
    let with = |cmd: &[&str], out: &Path| -> Output {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend(["--prior", s(&prior), "--out", s(out)]);
        args.extend(quick);
        harvim(&args)
    };

    let o = with(&["train-prior"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(prior.exists() && dir.path().join("train_curve.csv").exists());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = with(&["learn-wm"], out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["params.txt", "watermarked.png", "mask.png", "audit.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let image = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/toy/toy00.png");
    let params = a.join("params.txt");
    let o = with(&["remove", "--image", s(&image), "--params", s(&params)], &a);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(a.join("observation.png").exists() && a.join("recon_heat-diffusion.png").exists());

    let o = with(&["gauntlet", "--limit", "2"], &a);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(a.join("table.txt")).unwrap();
    assert!(table.contains("heat-diffusion"));

    let again = dir.path().join("table.txt");
    let o = harvim(&["report", s(&a.join("report.csv")), "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(again).unwrap(), table);
}
