use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grainkit::metrics::NssConfig;
use grainkit::render::GrainParams;
use grainkit::training::TrainConfig;

fn grainkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grainkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn grainkit")
}

fn ok(args: &[&str]) -> String {
    let out = grainkit(args);
    assert!(
        out.status.success(),
        "grainkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, count: usize, size: usize) -> PathBuf {
    let c = dir.join("corpus");
    ok(&[
        "gen-corpus",
        s(&c),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        "3",
    ]);
    c
}

/// Leaf keys of a serialized config, flattened through nested objects.
fn leaf_keys(v: &serde_json::Value, out: &mut BTreeSet<String>) {
    if let serde_json::Value::Object(m) = v {
        for (k, child) in m {
            if child.is_object() {
                leaf_keys(child, out);
            } else {
                out.insert(k.clone());
            }
        }
    }
}

fn assert_flags(sub: &str, config: serde_json::Value, skip: &[&str]) {
    let help = ok(&[sub, "--help"]);
    let mut keys = BTreeSet::new();
    leaf_keys(&config, &mut keys);
    for k in keys.iter().filter(|k| !skip.contains(&k.as_str())) {
        let flag = format!("--{}", k.replace('_', "-"));
        assert!(help.contains(&flag), "`{sub} --help` lacks {flag}");
    }
}

#[test]
fn help_lists_every_config_field() {
    let grain = serde_json::to_value(GrainParams::default()).unwrap();
    assert_flags("render", grain.clone(), &[]);
    // build-dataset: the embedded grain params plus the build options
    assert_flags("build-dataset", grain, &[]);
    let build = serde_json::to_value(grainkit::dataset::BuildOptions::default()).unwrap();
    assert_flags("build-dataset", build, &[]);
    let train = serde_json::to_value(TrainConfig::default()).unwrap();
    assert_flags("train", train.clone(), &[]);
    assert_flags("ablation", train, &[]);
    assert_flags(
        "eval",
        serde_json::to_value(NssConfig::default()).unwrap(),
        &[],
    );
    for sub in [
        "render",
        "build-dataset",
        "train",
        "apply",
        "eval",
        "ablation",
        "gen-corpus",
    ] {
        assert!(
            ok(&[sub, "--help"]).contains("--seed"),
            "{sub} lacks --seed"
        );
    }
}

#[test]
fn render_single_image_echoes_params() {
    let dir = tempfile::tempdir().unwrap();
    let src = corpus(dir.path(), 1, 32);
    let out = dir.path().join("grainy.png");
    let stdout = ok(&[
        "render",
        s(&src.join("img_0000.png")),
        s(&out),
        "--mu-r",
        "0.05",
        "--mc-samples",
        "32",
        "--seed",
        "9",
    ]);
    assert!(out.is_file());
    let echoed: GrainParams = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!((echoed.mu_r, echoed.mc_samples, echoed.seed), (0.05, 32, 9));
}

#[test]
fn render_rejects_zero_radius() {
    let dir = tempfile::tempdir().unwrap();
    let src = corpus(dir.path(), 1, 16);
    let out = grainkit(&["render", s(&src), s(&dir.path().join("o")), "--mu-r", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu_r"));
}

#[test]
fn render_folder_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let src = corpus(dir.path(), 3, 24);
    let run = |name: &str| {
        let o = dir.path().join(name);
        ok(&[
            "render",
            s(&src),
            s(&o),
            "--mc-samples",
            "32",
            "--seed",
            "4",
            "--threads",
            "1",
        ]);
        let mut files: Vec<_> = fs::read_dir(&o)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| fs::read(f).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run("a");
    assert_eq!(a.len(), 3);
    assert_eq!(a, run("b"));
    assert_ne!(a[0], a[1]);
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    assert_eq!(grainkit(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(grainkit(&["render"]).status.code(), Some(2));
    let missing = grainkit(&["render", "/nonexistent/in.png", "/tmp/out.png"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(
        grainkit(&["eval", "--manifest", "/nonexistent"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let src = corpus(dir.path(), 2, 32);
    let csv = dir.path().join("r.csv");
    let plots = dir.path().join("plots");
    let table = ok(&[
        "eval",
        "--reference",
        s(&src),
        "--candidate",
        s(&src),
        "--csv",
        s(&csv),
        "--plots",
        s(&plots),
        "--seed",
        "1",
    ]);
    assert!(table.contains("inf"));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,level,image,psnr_db,ssim,ms_ssim,jsd_nss"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3, "two images plus the mean row");
    for r in rows {
        assert_eq!(r[3], "inf");
        assert_eq!(r[6].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(fs::read_dir(&plots).unwrap().count(), 2);
}

/// Six 32 px sources, one level, a third held out for validation.
fn toy_dataset(dir: &Path) -> PathBuf {
    let src = corpus(dir, 6, 32);
    let ds = dir.join("ds");
    ok(&[
        "build-dataset",
        s(&src),
        s(&ds),
        "--levels",
        "0.05",
        "--patch-size",
        "32",
        "--mc-samples",
        "32",
        "--val",
        "0.34",
        "--seed",
        "2",
    ]);
    ds
}

const TINY: [&str; 10] = [
    "--epochs",
    "1",
    "--base-width",
    "8",
    "--batch-size",
    "2",
    "--image-channels",
    "1",
    "--seed",
    "5",
];

#[test]
fn apply_requires_level_for_non_blind_models() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let out = dir.path().join("run");
    let mut args = vec![
        "train",
        s(&ds),
        "--out",
        s(&out),
        "--task",
        "removal",
        "--blind",
        "false",
    ];
    args.extend(TINY);
    ok(&args);
    let ck = out.join("final.safetensors");
    assert!(ck.is_file() && out.join("train_steps.csv").is_file());
    let header = fs::read_to_string(out.join("train_steps.csv")).unwrap();
    assert!(header.starts_with("step,epoch,d_loss,g_loss,l1,objective,psnr,ms_ssim"));

    let img = ds.join("clean");
    let res = grainkit(&["apply", s(&ck), s(&img), s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("level"));
    ok(&[
        "apply",
        s(&ck),
        s(&img),
        s(&dir.path().join("o")),
        "--level",
        "0.05",
    ]);

    // evaluating the trained model on the validation split
    ok(&["eval", "--manifest", s(&ds), "--checkpoint", s(&ck)]);
}

#[test]
fn ablation_reports_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path());
    let json = dir.path().join("ablation.json");
    let mut args = vec!["ablation", s(&ds), "--task", "removal", "--json", s(&json)];
    args.extend(TINY);
    ok(&args);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let aggregates = report["aggregates"].as_array().unwrap();
    assert_eq!(aggregates.len(), 3);
    let bad = grainkit(&["ablation", s(&ds), "--task", "removal", "--ids", "4"]);
    assert_eq!(bad.status.code(), Some(2));
}
