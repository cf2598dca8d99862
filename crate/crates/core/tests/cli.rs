use std::path::Path;
use std::process::{Command, Output};

use paragon::cli::{artifact_hash, RunManifest, RUN_MANIFEST};

const TINY: &str = r#"
artifacts = "art"

[data.fixture]
users = 120
items = 150

[backbone.train]
epochs = 2

[farm]
uniform = 4
grid_step = 0.5

[farm.tune]
epochs = 1

[generator.train]
steps = 30
diffusion_steps = 100
sample_steps = 10

[generator.denoiser]
depth = 1
width = 16
token_width = 16
cond_width = 16

[hypernet]
steps = 30

[sweep]
grid_step = 0.5
"#;

fn paragon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paragon"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = paragon(dir, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("paragon.toml"), TINY).unwrap();
    d
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// A sweep report with its wall-clock timings removed; everything else must
/// replay exactly.
fn without_latency(path: &Path) -> String {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    for r in v["results"].as_array_mut().unwrap() {
        r.as_object_mut().unwrap().remove("latency_ms");
    }
    v.to_string()
}

const PIPELINE: &[&[&str]] = &[
    &["prepare-data"],
    &["train-backbone"],
    &["farm-adapters"],
    &["train-generator"],
    &["sweep", "--method", "all"],
];

#[test]
fn usage_errors_exit_one() {
    let d = workdir();
    assert_eq!(paragon(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(paragon(d.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(paragon(d.path(), &["--bogus"]).status.code(), Some(1));
    assert_eq!(paragon(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(paragon(d.path(), &["generate", "--weights", "1.2,-0.2"]).status.code(), Some(1));
    assert_eq!(paragon(d.path(), &["sweep", "--method", "nonsense"]).status.code(), Some(1));
    assert_eq!(paragon(d.path(), &["perturb", "--methods", "soup"]).status.code(), Some(1));
    assert_eq!(paragon(d.path(), &["--arch", "cnn", "train-backbone"]).status.code(), Some(1));
    std::fs::write(d.path().join("bad.toml"), "[backbone]\ndim = \"wide\"\n").unwrap();
    let o = paragon(d.path(), &["--config", "bad.toml", "prepare-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
    std::fs::write(d.path().join("typo.toml"), "[generator.train]\nstepz = 10\n").unwrap();
    let o = paragon(d.path(), &["--config", "typo.toml", "prepare-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn missing_upstream_names_the_producer() {
    let d = workdir();
    for (args, producer) in [
        (&["train-backbone"][..], "paragon prepare-data"),
        (&["farm-adapters"][..], "paragon prepare-data"),
        (&["train-generator"][..], "paragon farm-adapters"),
        (&["--fair", "train-generator"][..], "paragon farm-adapters --fair"),
        (&["generate", "--weights", "0.5,0.5"][..], "paragon train-generator"),
        (&["fairness-sweep"][..], "paragon prepare-data"),
        (&["plot-data"][..], "paragon sweep"),
    ] {
        let o = paragon(d.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("run `{producer}` first")), "{args:?}: {err}");
    }
    ok(d.path(), &["prepare-data"]);
    let o = paragon(d.path(), &["farm-adapters"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `paragon train-backbone` first"));
}

#[test]
fn pipeline_replay_is_bit_identical_and_traceable() {
    let (a, b) = (workdir(), workdir());
    for d in [&a, &b] {
        for args in PIPELINE {
            ok(d.path(), args);
        }
    }
    let sweeps = |d: &tempfile::TempDir| d.path().join("art/sweeps-attn");
    for m in ["paragon", "retrain", "soup", "mmr", "hypernet"] {
        let f = format!("{m}.json");
        let (x, y) = (without_latency(&sweeps(&a).join(&f)), without_latency(&sweeps(&b).join(&f)));
        assert!(x == y, "{m} sweep differs between replays");
    }
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(sweeps(&a).join("retrain.json")).unwrap()).unwrap();
    assert_eq!(rep["results"].as_array().unwrap().len(), 3);

    // every stage records the hash of what it consumed, which is what its
    // producer recorded as output
    let art = a.path().join("art");
    let chain = [("backbone-attn", "data"), ("corpus-attn", "backbone-attn"), ("generator-attn", "corpus-attn")];
    for (stage, upstream) in chain {
        let m = manifest(&art.join(stage).join(RUN_MANIFEST));
        let up = manifest(&art.join(upstream).join(RUN_MANIFEST));
        assert_eq!(m.inputs[upstream], up.outputs[upstream], "{stage} ← {upstream}");
        assert_eq!(up.outputs[upstream], artifact_hash(&art.join(upstream)).unwrap());
    }
    let m = manifest(&art.join("generator-attn").join(RUN_MANIFEST));
    assert_eq!(m.command, "train-generator");
    assert_eq!(m.config.generator.train.steps, 30);
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn studies_generation_and_plot_data() {
    let d = workdir();
    for args in PIPELINE {
        ok(d.path(), args);
    }
    let out = ok(d.path(), &["sweep", "--method", "paragon", "--backbone", "attn"]);
    assert!(out.contains("paragon") && out.contains("retrain"));

    let path = ok(d.path(), &["generate", "--weights", "0.3,0.7", "--seed", "3"]);
    let again = ok(d.path(), &["generate", "--weights", "0.3,0.7", "--seed", "3"]);
    assert_eq!(path, again);
    let adapter: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join(path.trim())).unwrap()).unwrap();
    assert!(adapter["values"].as_array().unwrap().len() > 0);

    let table = ok(d.path(), &["perturb", "--sigma", "0.01", "--methods", "diffusion,hypernet,retrain", "--seeds", "2"]);
    for m in ["diffusion", "hypernet", "retrain"] {
        assert!(table.contains(m), "{table}");
    }
    ok(d.path(), &["bench-latency", "--trials", "3"]);
    ok(d.path(), &["plot-data"]);
    let plots = d.path().join("art/plots");
    for f in ["sweep-attn.csv", "perturb-attn.csv", "latency-attn.csv"] {
        assert!(plots.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(plots.join("sweep-attn.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("w_acc,paragon_ndcg10"));
}

#[test]
fn fairness_sweep_uses_the_fair_generator() {
    let d = workdir();
    ok(d.path(), &["prepare-data"]);
    ok(d.path(), &["train-backbone"]);
    ok(d.path(), &["--fair", "farm-adapters", "--uniform", "2"]);
    ok(d.path(), &["--fair", "train-generator"]);
    let out = ok(d.path(), &["fairness-sweep"]);
    assert!(out.contains("AD(fair)"));
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("art/studies/fairness-attn.json")).unwrap()).unwrap();
    assert_eq!(r["fair"]["results"].as_array().unwrap().len(), 3);
    assert!(r["mean_ad_fair"].is_number() && r["mean_ad_unfair"].is_number());
}
