use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairwise-cl"))
        .current_dir(dir)
        .env("PCL_WORKERS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: [&str; 6] = ["--epochs", "3", "--patience", "2", "--batch-size", "16"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn synth_pretrain_finetune_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&cli(
        d,
        &["synth", "--out", "data", "--n-per-class", "12", "--sessions", "4"],
    ));
    assert!(ok(&cli(d, &["validate", "--manifest", "data/manifest.txt"])).starts_with("OK, 48 utterances, 3 views"));

    let pre = with(
        &[
            "pretrain",
            "--manifest",
            "data/manifest.txt",
            "--fold",
            "1",
            "--out",
            "pre",
        ],
        &SMALL,
    );
    ok(&cli(d, &pre));
    let cfg = fs::read_to_string(d.join("pre/run_config.txt")).unwrap();
    for line in [
        "command = pretrain",
        "fold = 1",
        "tau = 0.5",
        "views = w2v2,spec,egemaps",
        "epochs = 3",
    ] {
        assert!(cfg.lines().any(|l| l == line), "missing `{line}` in\n{cfg}");
    }
    assert!(d.join("pre/fold1/checkpoint.pcl").is_file());

    ok(&cli(
        d,
        &["--config", "pre/run_config.txt", "pretrain", "--out", "again"],
    ));
    assert_eq!(
        fs::read(d.join("pre/fold1/checkpoint.pcl")).unwrap(),
        fs::read(d.join("again/fold1/checkpoint.pcl")).unwrap(),
        "rerun from resolved config"
    );

    let ft = with(
        &[
            "finetune",
            "--manifest",
            "data/manifest.txt",
            "--view",
            "egemaps",
            "--from",
            "pre",
            "--freeze",
            "--fold",
            "1",
            "--p",
            "0.5",
            "--repeats",
            "2",
            "--out",
            "ft",
        ],
        &SMALL,
    );
    ok(&cli(d, &ft));
    let results = fs::read_to_string(d.join("ft/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.starts_with("fold,repeat,seed,p,n_labeled,"));

    let eval = ok(&cli(
        d,
        &[
            "eval",
            "--manifest",
            "data/manifest.txt",
            "--model",
            "ft/fold1/rep0/classifier.pcl",
            "--fold",
            "1",
        ],
    ));
    assert!(eval.contains("true\\pred,neutral,angry,sad,happy"), "{eval}");

    let report = ok(&cli(d, &["report", "--run", "ft"]));
    assert!(
        report.starts_with("fold,n,mean_test_uar,mean_test_wa\n1,2,"),
        "{report}"
    );
    let report = ok(&cli(d, &["report", "--run", "pre"]));
    assert!(
        report.starts_with("fold,best_epoch,stop_epoch,val_metric,best_value\n1,"),
        "{report}"
    );

    ok(&cli(
        d,
        &[
            "export-reps",
            "--manifest",
            "data/manifest.txt",
            "--model",
            "pre/fold1/checkpoint.pcl",
            "--view",
            "egemaps",
            "--out",
            "e.mvf",
        ],
    ));
    let out = cli(d, &["pwcca", "--a", "e.mvf", "--b", "e.mvf"]);
    let text = ok(&out);
    assert!(text.lines().nth(1).unwrap().starts_with("e.mvf,e.mvf,"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trivially high"));
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cli(d, &["pretrain", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        cli(d, &["finetune", "--view", "x", "--freeze"]).status.code(),
        Some(2),
        "missing manifest setting"
    );

    fs::write(d.join("c.txt"), "tau = 0.5\nunknown_key = 1\n").unwrap();
    let out = cli(
        d,
        &["--config", "c.txt", "pretrain", "--manifest", "m.txt", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    fs::write(d.join("c2.txt"), "command = grid\n").unwrap();
    assert_eq!(
        cli(d, &["--config", "c2.txt", "validate", "--manifest", "m.txt"])
            .status
            .code(),
        Some(2)
    );

    let out = cli(d, &["validate", "--manifest", "missing.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("run_config.txt").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_pairwise-cl"))
        .current_dir(d)
        .env("PCL_WORKERS", "zero")
        .args(["validate", "--manifest", "m.txt"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ingest_csv_and_extract_mel() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir(d.join("wav")).unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for (i, f) in [180.0f32, 260.0].iter().enumerate() {
        let mut w = hound::WavWriter::create(d.join(format!("wav/u{i}.wav")), spec).unwrap();
        for t in 0..16_000 {
            w.write_sample((8000.0 * (2.0 * std::f32::consts::PI * f * t as f32 / 16_000.0).sin()) as i16)
                .unwrap();
        }
        w.finalize().unwrap();
    }
    fs::write(d.join("wav/broken.wav"), b"RIFF").unwrap();
    fs::write(
        d.join("skel.txt"),
        "labels neutral,angry\nu0|1|s0|neutral|wav=wav/u0.wav\nu1|2|s1|angry|wav=wav/u1.wav\nbroken|2|s1|angry|wav=wav/broken.wav\n",
    )
    .unwrap();

    let msg = ok(&cli(d, &["extract-mel", "--manifest", "skel.txt", "--out", "mel"]));
    assert!(msg.contains("2 of 3 records (1 failed)"), "{msg}");
    assert_eq!(fs::read_to_string(d.join("mel/failed.txt")).unwrap(), "broken\n");
    let m = fs::read_to_string(d.join("mel/manifest.txt")).unwrap();
    assert!(m.starts_with("view spec 2 64 1498\n"), "{m}");
    assert!(ok(&cli(d, &["validate", "--manifest", "mel/manifest.txt"])).starts_with("OK, 2 utterances, 1 views"));

    ok(&cli(
        d,
        &["extract-para", "--manifest", "mel/manifest.txt", "--out", "para"],
    ));
    assert!(fs::read_to_string(d.join("para/para.csv")).unwrap().starts_with("id,"));

    let mut csv = String::from("name,frameTime");
    for c in 0..88 {
        csv.push_str(&format!(",f{c}"));
    }
    csv.push('\n');
    for id in ["u0", "u1"] {
        csv.push_str(id);
        csv.push_str(",0");
        for c in 0..88 {
            csv.push_str(&format!(",{c}.5"));
        }
        csv.push('\n');
    }
    fs::write(d.join("f.csv"), &csv).unwrap();
    ok(&cli(
        d,
        &[
            "ingest-csv",
            "--manifest",
            "para/manifest.txt",
            "--csv",
            "f.csv",
            "--out",
            "all",
        ],
    ));
    let v = ok(&cli(d, &["validate", "--manifest", "all/manifest.txt"]));
    assert!(v.starts_with("OK, 2 utterances, 3 views"), "{v}");

    fs::write(d.join("short.csv"), csv.replace(",f87", "").replace(",87.5", "")).unwrap();
    let out = cli(
        d,
        &[
            "ingest-csv",
            "--manifest",
            "para/manifest.txt",
            "--csv",
            "short.csv",
            "--out",
            "bad",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("87 value columns, expected 88"));
}
