use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coho_core::citygraph::CityGraph;
use coho_core::metrics::{out_block_pct, overlap_pct};
use serde_json::Value;

const TINY: &str = r#"
cities = ["toy", "toy-b"]

[[toy_extra]]
city_id = "toy-b"
seed = 100

[toy]
rows = 5
cols = 6

[bvae.train]
epochs = 3

[gmae.model]
hidden = 16

[gmae.train]
steps = 20

[eval]
communities = 3
"#;

fn workspace(tag: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::Builder::new().prefix(&format!("coho-cli-{tag}-")).tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn coho(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coho"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("COHO_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = coho(cfg, args);
    assert!(out.status.success(), "coho {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn train_all(cfg: &Path) {
    for stage in ["make-toy", "ingest", "train-bvae", "fit-codebook", "train-gmae"] {
        ok(cfg, &[stage]);
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn full_pipeline_exits_cleanly_and_repeats_byte_for_byte() {
    let (dir, cfg) = workspace("full");
    train_all(&cfg);
    let work = dir.path().join("work");
    let bvae_first = read(work.join("checkpoints/bvae.ckpt"));
    let gmae_first = read(work.join("checkpoints/gmae.ckpt"));

    ok(&cfg, &["generate", "--run-id", "a"]);
    let csv = ok(&cfg, &["eval", "--run-id", "a"]);
    assert!(csv.starts_with("community,blocks,ct_gen"));
    assert_eq!(csv.lines().count(), 5, "header, three communities, aggregate");
    ok(&cfg, &["render", "--run-id", "a"]);
    let svg = String::from_utf8(read(work.join("runs/a/render.svg"))).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    // A second pass over every stage reproduces the same bytes.
    train_all(&cfg);
    assert_eq!(read(work.join("checkpoints/bvae.ckpt")), bvae_first);
    assert_eq!(read(work.join("checkpoints/gmae.ckpt")), gmae_first);
    ok(&cfg, &["generate", "--run-id", "b"]);
    for f in ["graph.json", "buildings.geojson", "trace.json"] {
        assert_eq!(read(work.join("runs/a").join(f)), read(work.join("runs/b").join(f)), "{f} differs between runs");
    }
}

#[test]
fn all_priors_reproduce_the_input_layouts() {
    let (dir, cfg) = workspace("priors");
    train_all(&cfg);
    ok(&cfg, &["generate", "--priors", "100%", "--run-id", "fixed"]);
    let work = dir.path().join("work");
    let real = CityGraph::load(&work.join("graphs/toy.coded.json")).unwrap();
    let gen = CityGraph::load(&work.join("runs/fixed/graph.json")).unwrap();
    assert_eq!(gen.nodes, real.nodes);
    let trace: Value = serde_json::from_slice(&read(work.join("runs/fixed/trace.json"))).unwrap();
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 0);

    ok(&cfg, &["generate", "--priors", "40%", "--run-id", "part"]);
    let part = CityGraph::load(&work.join("runs/part/graph.json")).unwrap();
    let run: Value = serde_json::from_slice(&read(work.join("runs/part/run.json"))).unwrap();
    let priors: Vec<&str> = run["prior_block_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(priors.len(), 12);
    for id in priors {
        let i = real.index_of(id).unwrap();
        assert_eq!(part.nodes[i], real.nodes[i], "prior block {id} changed");
    }
}

#[test]
fn evaluating_the_real_city_against_itself_is_neutral() {
    let (dir, cfg) = workspace("identity");
    train_all(&cfg);
    let real_path = dir.path().join("work/graphs/toy.coded.json");
    let out = dir.path().join("identity");
    ok(&cfg, &["eval", "--generated", real_path.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    let report: Value = serde_json::from_slice(&read(out.join("eval.json"))).unwrap();
    let real = CityGraph::load(&real_path).unwrap();
    let rows = report["communities"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row["cts"].as_f64(), Some(0.0));
        assert_eq!(row["wd_5d"].as_f64(), Some(0.0));
        assert_eq!(row["wd_co"].as_f64(), Some(0.0));
    }
    let agg = &report["aggregate"];
    assert_eq!(agg["cts"].as_f64(), Some(0.0));
    assert!(out.join("eval.csv").exists());

    // Overlap and out-of-block shares equal those of the real communities.
    for row in rows {
        let center = real.index_of(row["community"].as_str().unwrap()).unwrap();
        let members = coho_core::citygraph::sample_community_subgraph(&real, center, 250.0).unwrap().members;
        let blocks: Vec<_> = members.iter().map(|&i| &real.nodes[i]).collect();
        assert_eq!(row["overlap_pct"].as_f64(), Some(overlap_pct(blocks.iter().copied())));
        assert_eq!(row["out_block_pct"].as_f64(), Some(out_block_pct(blocks.iter().copied())));
    }
}

#[test]
fn missing_artifacts_fail_with_the_stage_name() {
    let (_dir, cfg) = workspace("missing");
    let out = coho(&cfg, &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `generate` failed"), "{err}");
    assert!(err.contains("train-bvae"), "should point at the producing stage: {err}");

    let out = coho(&cfg, &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("make-toy"));
}

#[test]
fn retraining_upstream_invalidates_downstream_artifacts() {
    let (_dir, cfg) = workspace("stale");
    train_all(&cfg);
    ok(&cfg, &["train-bvae", "--set", "bvae.train.seed=99"]);
    let out = coho(&cfg, &["generate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible artifacts"), "{err}");

    ok(&cfg, &["fit-codebook", "--set", "bvae.train.seed=99"]);
    let out = coho(&cfg, &["generate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("codebook"), "graph model must be retrained too");
}

#[test]
fn config_errors_are_reported() {
    let (dir, cfg) = workspace("config");
    let out = coho(&cfg, &["make-toy", "--set", "toy.colums=4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colums"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "eval_city = \"nowhere\"\n").unwrap();
    let out = coho(&bad, &["make-toy"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn seed_variable_overrides_the_config_seed() {
    let (dir, cfg) = workspace("seed");
    ok(&cfg, &["make-toy"]);
    let blocks = dir.path().join("data/toy/buildings.geojson");
    let base = read(&blocks);
    let out = Command::new(env!("CARGO_BIN_EXE_coho"))
        .args(["make-toy", "--config"])
        .arg(&cfg)
        .env("COHO_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(read(&blocks), base);
    ok(&cfg, &["make-toy"]);
    assert_eq!(read(&blocks), base);
}
