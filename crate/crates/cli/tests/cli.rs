use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sigmine_core::corpus::SyntheticVolume;
use sigmine_core::eval::{evaluate_ranking, kmeans_purity, RankedPrediction};
use sigmine_core::store::ShardedStore;
use sigmine_core::trainer::EncoderModel;
use sigmine_core::{hamming, Signature, SignatureRecord, VoxelCoord};
use sigmine_service::{router, AppState, Dataset, ServiceConfig};

fn sigmine(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigmine"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = sigmine(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small deterministic pipeline shared by the tests below.
fn build_pipeline(dir: &Path) {
    let common = ["--extent", "64,64,32", "--min-spacing", "16", "--margin", "9,9,4"];
    let gen = |out: &str, bars: &str, rings: &str, seed: &str| {
        let mut args = vec![
            "generate", "--out", out, "--class", bars, "--class", rings, "--seed", seed,
        ];
        args.extend(common);
        ok(&args, dir);
    };
    gen("search.vol", "bar:8", "ring:6", "1");
    gen("query.vol", "bar:4", "ring:2", "2");
    ok(
        &[
            "train",
            "--volume",
            "search.vol",
            "--out",
            "model.enc",
            "--steps",
            "60",
            "--binary-steps",
            "20",
            "--batch-pairs",
            "8",
            "--seed",
            "3",
        ],
        dir,
    );
    ok(
        &[
            "encode",
            "--volume",
            "search.vol",
            "--model",
            "model.enc",
            "--out",
            "records.sigs",
        ],
        dir,
    );
    ok(
        &[
            "ingest",
            "--records",
            "records.sigs",
            "--out",
            "store",
            "--shard-size",
            "16",
        ],
        dir,
    );
    ok(
        &["build-index", "--store", "store", "--out", "index.mih", "--seed", "5"],
        dir,
    );
}

#[test]
fn recall_simulation_pigeonhole_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(
        &[
            "simulate-recall",
            "--n",
            "4",
            "--bits",
            "64",
            "--trials",
            "200000",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (d, r) = l.split_once(',').unwrap();
            (d.parse().unwrap(), r.parse().unwrap())
        })
        .collect();
    assert_eq!(csv.lines().next(), Some("distance,recall"));
    assert_eq!(rows.len(), 65);
    for d in 0..=3 {
        assert_eq!(rows[d], (d, 1.0));
    }
    assert_eq!(rows[64].1, 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn query_output_matches_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    build_pipeline(d);
    let cfg = ServiceConfig {
        store: d.join("store"),
        index: d.join("index.mih"),
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(
        AppState::with_dataset(cfg.clone(), Dataset::load(&cfg).unwrap()).unwrap(),
    ));
    std::fs::write(
        d.join("svc.toml"),
        "store = \"store\"\nindex = \"index.mih\"\nk = 7\nrank_n = 2\nt = 6.0\n",
    )
    .unwrap();

    let cases: Vec<(Vec<&str>, Value)> = vec![
        (
            vec!["--x", "20", "--y", "20", "--z", "10", "--k", "10"],
            json!({"x": 20, "y": 20, "z": 10, "k": 10}),
        ),
        (
            vec!["--x", "41", "--y", "9", "--z", "17", "--k", "25", "--t", "4.5"],
            json!({"x": 41, "y": 9, "z": 17, "k": 25, "t": 4.5}),
        ),
        (
            vec!["--signature", "0f0f0f0f0f0f0f0f", "--k", "5"],
            json!({"signature_hex": "0f0f0f0f0f0f0f0f", "k": 5}),
        ),
    ];
    for (flags, body) in cases {
        let mut args = vec!["query", "--store", "store", "--index", "index.mih"];
        args.extend(flags);
        let cli: Value = serde_json::from_str(&ok(&args, d)).unwrap();
        let req = Request::post("/v1/query").body(Body::from(body.to_string())).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let served: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(cli, served);
    }

    // Defaults come from the config file; flags still win.
    let from_cfg: Value = serde_json::from_str(&ok(
        &["query", "--config", "svc.toml", "--x", "20", "--y", "20", "--z", "10"],
        d,
    ))
    .unwrap();
    assert_eq!((from_cfg["k"].as_u64(), from_cfg["t"].as_f64()), (Some(7), Some(6.0)));
    let overridden: Value = serde_json::from_str(&ok(
        &[
            "query", "--config", "svc.toml", "--k", "3", "--x", "20", "--y", "20", "--z", "10",
        ],
        d,
    ))
    .unwrap();
    assert_eq!(overridden["k"].as_u64(), Some(3));
}

/// Full scan, quadratic suppression, plain sort.
fn brute_rank(records: &[SignatureRecord], q: &[Signature], t: f64, k: usize) -> Vec<RankedPrediction> {
    let scored: Vec<(VoxelCoord, f64)> = records
        .iter()
        .map(|r| (r.coord, q.iter().map(|s| hamming(*s, r.sig)).min().unwrap() as f64))
        .collect();
    let better = |a: &(VoxelCoord, f64), b: &(VoxelCoord, f64)| a.1 < b.1 || (a.1 == b.1 && a.0 < b.0);
    let mut kept: Vec<(VoxelCoord, f64)> = scored
        .iter()
        .filter(|p| !scored.iter().any(|o| better(o, p) && o.0.distance(p.0) < t))
        .copied()
        .collect();
    kept.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    kept.into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (coord, distance))| RankedPrediction {
            coord,
            distance,
            rank: i + 1,
        })
        .collect()
}

fn suffix_max(flags: &[bool]) -> Vec<f64> {
    let mut hits = 0;
    let mut raw: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            hits += f as usize;
            hits as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..raw.len().saturating_sub(1)).rev() {
        raw[i] = raw[i].max(raw[i + 1]);
    }
    raw
}

/// Recomputes the eval metrics for the pipeline in `dir` without the CLI.
fn brute_force_metrics(dir: &Path, k: usize, t: f64, radius: f64, multi: usize, seed: u64) -> Vec<(String, f64)> {
    let store = ShardedStore::load(&dir.join("store")).unwrap();
    let records: Vec<SignatureRecord> = store.records().copied().collect();
    let searched = SyntheticVolume::load(&dir.join("search.vol")).unwrap();
    let queries_vol = SyntheticVolume::load(&dir.join("query.vol")).unwrap();
    let model = EncoderModel::load(&dir.join("model.enc")).unwrap();
    let shape = model.input_shape;
    let truth: Vec<VoxelCoord> = searched
        .sites
        .iter()
        .filter(|s| s.class == 0)
        .map(|s| s.coord)
        .collect();
    let queries: Vec<Signature> = queries_vol
        .sites
        .iter()
        .filter(|s| s.class == 0)
        .map(|s| {
            let e = model.encode(&queries_vol.patch_at(s.coord, shape).unwrap()).unwrap();
            Signature(
                e.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| if v >= 0.0 { acc | 1 << (63 - i) } else { acc }),
            )
        })
        .collect();

    let mut curves = Vec::new();
    let (mut ranked, mut recall) = (0usize, 0.0);
    for q in &queries {
        let r = brute_rank(&records, &[*q], t, k);
        let rep = evaluate_ranking(&r, &truth, radius).unwrap();
        assert_eq!(rep.interpolated, suffix_max(&rep.flags));
        ranked += r.len();
        recall += rep.matched as f64 / truth.len() as f64;
        curves.push(rep.interpolated);
    }
    let longest = curves.iter().map(Vec::len).max().unwrap();
    let mean: Vec<f64> = (0..longest)
        .map(|i| {
            let v: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let n = queries.len() as f64;
    let mut m = vec![
        ("queries".to_string(), n),
        ("truth_sites".to_string(), truth.len() as f64),
        ("records".to_string(), records.len() as f64),
        ("mean_ranked".to_string(), ranked as f64 / n),
        ("mean_recall".to_string(), recall / n),
    ];
    let at = |prefix: &str, c: &[f64], m: &mut Vec<(String, f64)>| {
        for r in [1, 5, 10, 20, 50] {
            if r <= k && r <= c.len() {
                m.push((format!("{prefix}precision_at_{r}"), c[r - 1]));
            }
        }
    };
    at("", &mean, &mut m);
    let r = brute_rank(&records, &queries[..multi], t, k);
    let rep = evaluate_ranking(&r, &truth, radius).unwrap();
    m.push(("multi_queries".to_string(), multi as f64));
    m.push(("multi_recall".to_string(), rep.matched as f64 / truth.len() as f64));
    at("multi_", &rep.interpolated, &mut m);

    let vectors: Vec<Vec<f64>> = searched
        .sites
        .iter()
        .map(|s| model.encode_real(&searched.patch_at(s.coord, shape).unwrap()).unwrap())
        .collect();
    let classes: Vec<usize> = searched.sites.iter().map(|s| s.class as usize).collect();
    m.push((
        "cluster_purity".to_string(),
        kmeans_purity(&vectors, &classes, 2, seed).unwrap().purity,
    ));
    m
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_metrics.txt")
}

fn parse_metrics(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (n, v) = l.split_once(' ').unwrap();
            (n.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_metrics_match_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    build_pipeline(d);
    let expected = brute_force_metrics(d, 20, 10.0, 6.0, 2, 4);
    let golden = golden_path();
    if std::env::var_os("SIGMINE_BLESS").is_some() {
        let text: String = expected.iter().map(|(n, v)| format!("{n} {v}\n")).collect();
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, text).unwrap();
    }
    let committed = parse_metrics(&std::fs::read_to_string(&golden).expect("golden metrics file"));
    assert_eq!(expected, committed, "brute-force metrics drifted from the golden file");

    let args = [
        "eval",
        "--store",
        "store",
        "--volume",
        "search.vol",
        "--queries",
        "query.vol",
        "--model",
        "model.enc",
        "--k",
        "20",
        "--t",
        "10",
        "--radius",
        "6",
        "--multi",
        "2",
        "--cluster",
        "--seed",
        "4",
        "--out",
        "metrics.txt",
        "--curves",
        "curves.csv",
    ];
    ok(&args, d);
    let produced = parse_metrics(&std::fs::read_to_string(d.join("metrics.txt")).unwrap());
    assert_eq!(produced, committed);
    let curves = std::fs::read_to_string(d.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("rank,single_mean,multi"));

    // The indexed search agrees on everything within N-1 bits; here it
    // only has to run and report the same bookkeeping.
    let mut indexed = args.to_vec();
    indexed.extend(["--index", "index.mih"]);
    indexed.retain(|a| *a != "--out" && *a != "metrics.txt");
    let stdout = ok(&indexed, d);
    let m: BTreeMap<String, f64> = parse_metrics(&stdout).into_iter().collect();
    assert_eq!(m["queries"], 4.0);
    assert_eq!(m["records"], committed.iter().find(|(n, _)| n == "records").unwrap().1);
}

#[test]
fn stages_are_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_pipeline(a.path());
    build_pipeline(b.path());
    for f in [
        "search.vol",
        "search.vol.sites",
        "model.enc",
        "records.sigs",
        "records.sigs.json",
        "index.mih",
        "store/store.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    // Re-running a stage in place leaves its output unchanged.
    let before = std::fs::read(a.path().join("records.sigs")).unwrap();
    ok(
        &[
            "encode",
            "--volume",
            "search.vol",
            "--model",
            "model.enc",
            "--out",
            "records.sigs",
        ],
        a.path(),
    );
    assert_eq!(std::fs::read(a.path().join("records.sigs")).unwrap(), before);
}

#[test]
fn errors_are_one_categorized_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let check = |args: &[&str], code: i32, category: &str| {
        let out = sigmine(args, d);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error[{category}]: ")), "{err}");
    };
    check(&["frobnicate"], 2, "usage");
    check(&["query", "--x", "1"], 2, "usage");
    check(&["generate", "--out", "v.vol", "--class", "cube:3"], 2, "usage");
    check(&["simulate-recall", "--n", "0"], 2, "usage");
    check(
        &["build-index", "--store", "missing", "--out", "i.mih"],
        3,
        "data-format",
    );
    std::fs::write(d.join("junk.vol"), b"not a volume").unwrap();
    check(
        &["encode", "--volume", "junk.vol", "--model", "m.enc", "--out", "r.sigs"],
        3,
        "data-format",
    );

    build_pipeline(d);
    check(
        &[
            "query",
            "--store",
            "store",
            "--index",
            "index.mih",
            "--x",
            "999",
            "--y",
            "0",
            "--z",
            "0",
        ],
        4,
        "contract",
    );
    check(
        &[
            "eval",
            "--store",
            "store",
            "--volume",
            "search.vol",
            "--queries",
            "query.vol",
            "--model",
            "model.enc",
            "--class",
            "7",
        ],
        4,
        "contract",
    );
    assert!(sigmine(&["--help"], d).status.success());
}
