use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lightseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightseg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let o = lightseg(&["synth", "--n", "8", "--size", "32", "--classes", "3", "--seed", "2", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("manifest.json")
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: &[(&str, &[&str])] = &[
        ("profile", &["--model", "--base", "--depth", "--decoder-widths", "--classes", "--input", "--json"]),
        ("synth", &["--n", "--size", "--classes", "--seed", "--out"]),
        (
            "train",
            &["--manifest", "--model", "--steps", "--epochs", "--lr", "--wd", "--batch", "--seed", "--clip-norm", "--out", "--log"],
        ),
        ("eval", &["--manifest", "--weights", "--json"]),
        (
            "bench",
            &["--model", "--weights", "--input", "--frames", "--rounds", "--warmup", "--power-watts", "--threads", "--seed", "--json"],
        ),
        ("gradcheck", &["--target", "--tolerance", "--seed"]),
    ];
    for (cmd, flags) in expected {
        let o = lightseg(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let help = stdout(&o);
        for f in *flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
        assert!(help.contains("--no-timestamps"), "{cmd}");
    }
    assert_eq!(code(&lightseg(&["--help"])), 0);
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    assert_eq!(code(&lightseg(&[])), 1, "missing subcommand");
    assert_eq!(code(&lightseg(&["profile", "--model", "umbv2", "--input", "100"])), 1);
    assert_eq!(code(&lightseg(&["profile", "--model", "umbv2", "--input", "64", "--bogus"])), 1);
    assert_eq!(code(&lightseg(&["profile", "--model", "nope", "--input", "64"])), 1);
    assert_eq!(code(&lightseg(&["bench", "--model", "unet", "--input", "64", "--power-watts", "-1"])), 1);
    assert_eq!(code(&lightseg(&["gradcheck", "--target", "ops", "--tolerance", "0"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let o = lightseg(&["train", "--manifest", p(&missing), "--model", "unet", "--steps", "1", "--out", "w.esw"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("none.json"));
    let o = lightseg(&["train", "--manifest", p(&missing), "--model", "unet", "--out", "w.esw"]);
    assert_eq!(code(&o), 1, "needs --steps or --epochs");

    // a corrupted weight file is a runtime failure
    let manifest = synth(&dir.path().join("data"));
    let w = dir.path().join("w.esw");
    let o = lightseg(&[
        "train", "--manifest", p(&manifest), "--model", "unet", "--base", "4", "--depth", "2", "--steps", "1", "--out", p(&w),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut bytes = fs::read(&w).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&w, bytes).unwrap();
    let o = lightseg(&["eval", "--manifest", p(&manifest), "--weights", p(&w)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn profile_reports_the_reference_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("out/profile.json");
    let o = lightseg(&["profile", "--model", "umbv2", "--classes", "9", "--input", "512", "--json", p(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let text = v.to_string();
    assert!(text.contains("params") && text.contains("macs"), "{text}");
    assert!(stdout(&o).contains("GOPs") || stdout(&o).contains("MAC"), "{}", stdout(&o));
}

#[test]
fn synth_train_eval_end_to_end_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"));
    let run = |tag: &str| {
        let w = dir.path().join(format!("{tag}/w.esw"));
        let log = dir.path().join(format!("{tag}/log.csv"));
        let o = lightseg(&[
            "--no-timestamps",
            "train",
            "--manifest",
            p(&manifest),
            "--model",
            "umbv2",
            "--base",
            "8",
            "--depth",
            "2",
            "--steps",
            "6",
            "--seed",
            "3",
            "--out",
            p(&w),
            "--log",
            p(&log),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let json = dir.path().join(format!("{tag}/eval.json"));
        let o = lightseg(&["--no-timestamps", "eval", "--manifest", p(&manifest), "--weights", p(&w), "--json", p(&json)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("mIoU") || stdout(&o).to_lowercase().contains("miou"));
        [w.clone(), w.with_extension("esw.json"), log, json].map(|f| fs::read(f).unwrap_or_default())
    };
    let a = run("a");
    let b = run("b");
    assert!(a.iter().all(|f| !f.is_empty()), "every artifact is written");
    assert_eq!(a[..3], b[..3], "same seed, byte-identical weights, sidecar and log");
    let eval = |f: &[u8]| serde_json::from_slice::<serde_json::Value>(f).unwrap();
    let (ea, eb) = (eval(&a[3]), eval(&b[3]));
    assert_eq!(ea["samples"], 8);
    assert_eq!(ea["metrics"], eb["metrics"]);
    assert_eq!(ea["confusion"], eb["confusion"]);
}

#[test]
fn bench_json_carries_the_efficiency_figures() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let o = lightseg(&[
        "bench", "--model", "unet", "--base", "4", "--depth", "2", "--classes", "3", "--input", "32", "--frames", "5",
        "--rounds", "2", "--warmup", "1", "--power-watts", "2.3", "--json", p(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let fps = v["fps"].as_f64().unwrap();
    let fpw = v["fps_per_watt"].as_f64().unwrap();
    let gpj = v["gop_per_joule"].as_f64().unwrap();
    assert!(fps > 0.0);
    assert!((fpw - fps / 2.3).abs() <= 1e-12 * fpw);
    assert_eq!(gpj, 2.0 * v["macs_per_frame"].as_f64().unwrap() * fpw / 1e9);
    assert_eq!(v["rounds"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_ops_passes() {
    let o = lightseg(&["gradcheck", "--target", "ops", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("checks passed"));
}
