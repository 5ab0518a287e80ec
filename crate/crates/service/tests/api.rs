use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use sigmine_core::corpus::SyntheticVolume;
use sigmine_core::eval::{queryset_distance, run_query, QueryMember, QuerySet, Representation, SearchSpace};
use sigmine_core::store::{ShardedStore, StoreConfig};
use sigmine_core::{MihIndex, Signature, SignatureRecord, VoxelCoord};
use sigmine_service::{router, AppState, Dataset, QueryResponse, ServiceConfig};

fn records(seed: u64) -> Vec<SignatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<u64> = (0..8).map(|_| rng.random()).collect();
    let mut out = Vec::new();
    for z in (0..32).step_by(4) {
        for y in (0..32).step_by(4) {
            for x in (0..32).step_by(4) {
                let mut bits = anchors[(x / 16 + 2 * (y / 16) + 4 * (z / 16)) as usize];
                for _ in 0..rng.random_range(1..6) {
                    bits ^= 1 << rng.random_range(0..64);
                }
                out.push(SignatureRecord::new(VoxelCoord::new(x, y, z), Signature(bits)));
            }
        }
    }
    out
}

fn dataset() -> Dataset {
    let store = ShardedStore::ingest(records(1), StoreConfig::new(16, 4, [32, 32, 32])).unwrap();
    assert_eq!(store.len(), 512);
    let index = MihIndex::build(store.records().copied().collect(), 4, 2).unwrap();
    Dataset {
        store,
        index,
        volume: Some(SyntheticVolume::filled([32, 32, 32], 0.5)),
    }
}

fn config() -> ServiceConfig {
    ServiceConfig {
        k: 20,
        t: 5.0,
        rank_n: 3,
        max_patch_size: 64,
        ..ServiceConfig::default()
    }
}

fn app_with(state: AppState) -> (Router, Arc<AppState>) {
    let state = Arc::new(state);
    (router(state.clone()), state)
}

fn app() -> (Router, Arc<AppState>) {
    app_with(AppState::with_dataset(config(), dataset()).unwrap())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn signature_lookup_matches_the_store() {
    let (app, state) = app();
    let (s, v) = get(&app, "/v1/signature?x=8&y=12&z=4").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (v["x"].as_u64(), v["y"].as_u64(), v["z"].as_u64()),
        (Some(8), Some(12), Some(4))
    );
    assert_eq!(v["distance_to_site"], 0.0);

    let data = state.dataset().unwrap();
    for (x, y, z) in [(9, 13, 6), (31, 0, 17), (2, 2, 2)] {
        let (s, v) = get(&app, &format!("/v1/signature?x={x}&y={y}&z={z}")).await;
        assert_eq!(s, StatusCode::OK);
        let direct = data.store.lookup_signature(VoxelCoord::new(x, y, z)).unwrap();
        assert_eq!(v["signature"], direct.record.sig.to_string());
        assert_eq!(v["x"].as_u64(), Some(u64::from(direct.record.coord.x)));
        assert_eq!(v["distance_to_site"].as_f64(), Some(direct.distance));
    }
}

#[tokio::test]
async fn signature_validation_names_the_field() {
    let (app, _) = app();
    let (s, v) = get(&app, "/v1/signature?x=abc&y=1&z=1").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "x");
    let (s, v) = get(&app, "/v1/signature?x=1&z=1").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "y");
    let (s, _) = get(&app, "/v1/signature?x=1&y=1&z=99").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn empty_store_is_not_found_and_loading_is_unavailable() {
    let empty = Dataset {
        store: ShardedStore::ingest(Vec::new(), StoreConfig::new(16, 4, [32, 32, 32])).unwrap(),
        index: MihIndex::build(vec![SignatureRecord::new(VoxelCoord::new(0, 0, 0), Signature(0))], 4, 0).unwrap(),
        volume: None,
    };
    let (app, _) = app_with(AppState::with_dataset(config(), empty).unwrap());
    let (s, _) = get(&app, "/v1/signature?x=1&y=1&z=1").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&app, "/v1/patch?x=1&y=1&z=1&size=4").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (app, state) = app_with(AppState::new(config()).unwrap());
    let (s, v) = post(&app, "/v1/query", json!({"x": 0, "y": 0, "z": 0})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["category"], "unavailable");
    state.set_dataset(dataset());
    let (s, _) = post(&app, "/v1/query", json!({"x": 0, "y": 0, "z": 0})).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn query_flags_the_self_match_first() {
    let (app, _) = app();
    let (s, v) = post(&app, "/v1/query", json!({"x": 12, "y": 4, "z": 20, "k": 5})).await;
    assert_eq!(s, StatusCode::OK);
    let first = &v["matches"][0];
    assert_eq!(first["distance"], 0.0);
    assert_eq!(
        (first["x"].as_u64(), first["y"].as_u64(), first["z"].as_u64()),
        (Some(12), Some(4), Some(20))
    );
    assert_eq!(first["self_match"], true);
    let matches = v["matches"].as_array().unwrap();
    assert!(matches.len() <= 5);
    assert_eq!(v["ranked"].as_u64(), Some(matches.len() as u64));
    assert!(matches[1..].iter().all(|m| m["self_match"] == false));
    let d: Vec<f64> = matches.iter().map(|m| m["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
}

#[tokio::test]
async fn query_validation() {
    let (app, _) = app();
    let (s, v) = post(&app, "/v1/query", json!({"x": 0, "y": 0, "z": 0, "k": 0})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("k")));
    let (s, v) = post(&app, "/v1/query", json!({"k": 3})).await;
    assert_eq!(
        (s, v["field"].as_str()),
        (StatusCode::BAD_REQUEST, Some("signature_hex"))
    );
    let both = json!({"x": 0, "y": 0, "z": 0, "signature_hex": "00000000000000ff"});
    let (s, _) = post(&app, "/v1/query", both).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = post(&app, "/v1/query", json!({"x": 0, "z": 0})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("y")));
    let (s, v) = post(&app, "/v1/query", json!({"signature_hex": "xyz"})).await;
    assert_eq!(
        (s, v["field"].as_str()),
        (StatusCode::BAD_REQUEST, Some("signature_hex"))
    );
    let (s, v) = post(&app, "/v1/query", json!({"x": 0, "y": 0, "z": 0, "t": -1})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("t")));
    let (s, v) = send(&app, Request::post("/v1/query").body(Body::from("{")).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(!v.is_empty());
}

#[tokio::test]
async fn random_queries_equal_the_library_pipeline() {
    let (app, state) = app();
    let data = state.dataset().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let k = rng.random_range(1..30);
        let t = rng.random_range(1.0..12.0);
        let (body, q, probe) = if i % 2 == 0 {
            let p = VoxelCoord::new(
                rng.random_range(0..32),
                rng.random_range(0..32),
                rng.random_range(0..32),
            );
            let hit = data.store.lookup_signature(p).unwrap();
            let q = QuerySet::new(Some(hit.record.coord), Representation::Signature(hit.record.sig));
            (
                json!({"x": p.x, "y": p.y, "z": p.z, "k": k, "t": t}),
                q,
                Some(hit.record.coord),
            )
        } else {
            let sig = Signature(rng.random());
            let q = QuerySet::new(None, Representation::Signature(sig));
            (json!({"signature_hex": sig.to_string(), "k": k, "t": t}), q, None)
        };
        let (s, v) = post(&app, "/v1/query", body).await;
        assert_eq!(s, StatusCode::OK);
        let resp: QueryResponse = serde_json::from_value(v).unwrap();
        let expected = run_query(SearchSpace::Index(&data.index), &q, t, k).unwrap();
        assert_eq!(resp.matches.len(), expected.len());
        for (m, e) in resp.matches.iter().zip(&expected) {
            assert_eq!(m.coord(), e.coord);
            assert_eq!(m.distance.to_bits(), e.distance.to_bits());
            assert_eq!(m.rank, e.rank);
            assert_eq!(m.self_match, probe == Some(e.coord));
        }
    }
}

#[tokio::test]
async fn session_workflow_tracks_the_min_distance_ranking() {
    let (app, state) = app();
    let data = state.dataset().unwrap();
    let (s, v) = post(&app, "/v1/session", json!({"x": 4, "y": 4, "z": 4, "rank_n": 1})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["query_set"].as_array().unwrap().len(), 1);
    let id = v["id"].as_u64().unwrap();

    let (s, v) = get(&app, &format!("/v1/session/{id}/next")).await;
    assert_eq!(s, StatusCode::OK);
    let p = &v["prediction"];
    let picked = VoxelCoord::new(
        p["x"].as_u64().unwrap() as u32,
        p["y"].as_u64().unwrap() as u32,
        p["z"].as_u64().unwrap() as u32,
    );
    assert_ne!(picked, VoxelCoord::new(4, 4, 4));

    let (s, v) = post(
        &app,
        &format!("/v1/session/{id}/label"),
        json!({"x": picked.x, "y": picked.y, "z": picked.z, "label": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["query_set"].as_array().unwrap().len(), 2);
    let (s, _) = post(
        &app,
        &format!("/v1/session/{id}/label"),
        json!({"x": picked.x, "y": picked.y, "z": picked.z, "label": false}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);

    let sig_at = |c: VoxelCoord| data.store.get_exact(c).unwrap().sig;
    let q = QuerySet::from_members(
        [VoxelCoord::new(4, 4, 4), picked]
            .into_iter()
            .map(|c| QueryMember {
                source: Some(c),
                repr: Representation::Signature(sig_at(c)),
            })
            .collect(),
    )
    .unwrap();
    let ranking = run_query(SearchSpace::Index(&data.index), &q, config().t, config().k).unwrap();
    let (_, v) = get(&app, &format!("/v1/session/{id}/next?rank_n=2")).await;
    let p = &v["prediction"];
    let c = VoxelCoord::new(
        p["x"].as_u64().unwrap() as u32,
        p["y"].as_u64().unwrap() as u32,
        p["z"].as_u64().unwrap() as u32,
    );
    let expected = ranking
        .iter()
        .find(|r| r.rank >= 2 && r.coord != picked && r.coord != VoxelCoord::new(4, 4, 4))
        .unwrap();
    assert_eq!(c, expected.coord);
    assert_eq!(p["rank"].as_u64(), Some(expected.rank as u64));
    let recomputed = queryset_distance(&q, &Representation::Signature(sig_at(c))).unwrap();
    assert_eq!(p["distance"].as_f64(), Some(recomputed));
    assert_eq!(v["query_set_size"], 2);

    let (s, v) = get(&app, &format!("/v1/session/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["labels_used"], 1);
    assert_eq!(v["labels"][0]["label"], true);
}

#[tokio::test]
async fn session_errors() {
    let (app, _) = app();
    let (s, _) = get(&app, "/v1/session/41/next").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&app, "/v1/session/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(
        &app,
        "/v1/session/0/label",
        json!({"x": 0, "y": 0, "z": 0, "label": true}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, v) = post(&app, "/v1/session", json!({"x": 0, "y": 0, "z": 0})).await;
    let id = v["id"].as_u64().unwrap();
    let (s, v) = post(
        &app,
        &format!("/v1/session/{id}/label"),
        json!({"x": 0, "y": 0, "z": 0}),
    )
    .await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("label")));
    let (s, _) = post(
        &app,
        &format!("/v1/session/{id}/label"),
        json!({"x": 0, "y": 0, "z": 0, "label": true}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "the seed site counts as labeled");
    let (s, v) = get(&app, &format!("/v1/session/{id}/next?rank_n=999")).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("rank_n")));
    let (s, v) = post(
        &app,
        "/v1/session",
        json!({"x": 0, "y": 0, "z": 0, "k": 5, "rank_n": 6}),
    )
    .await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("rank_n")));
    let seeds = json!({"seeds": [{"x": 0, "y": 0, "z": 0}, {"signature_hex": "0000000000000001"}]});
    let (s, v) = post(&app, "/v1/session", seeds).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["query_set"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn session_log_replay_restores_query_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        session_log: Some(dir.path().join("sessions.jsonl")),
        ..config()
    };
    let (app, state) = app_with(AppState::with_dataset(cfg.clone(), dataset()).unwrap());
    let (_, v) = post(&app, "/v1/session", json!({"x": 0, "y": 0, "z": 0, "rank_n": 1})).await;
    let id = v["id"].as_u64().unwrap();
    for i in 0..6 {
        let (_, v) = get(&app, &format!("/v1/session/{id}/next")).await;
        let p = &v["prediction"];
        let verdict = i % 2 == 0;
        let (s, _) = post(
            &app,
            &format!("/v1/session/{id}/label"),
            json!({"x": p["x"], "y": p["y"], "z": p["z"], "label": verdict}),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, v) = post(&app, "/v1/session", json!({"signature_hex": "ffffffffffffffff"})).await;
    let second = v["id"].as_u64().unwrap();
    let live = state.session(id).unwrap();
    assert_eq!(live.queries().len(), 4);

    let restored = AppState::new(cfg).unwrap();
    let again = restored.session(id).unwrap();
    assert_eq!(again.queries(), live.queries());
    assert_eq!(again.labels(), live.labels());
    assert!(restored.session(second).is_some());
    restored.set_dataset(dataset());
    let (app, _) = app_with(restored);
    let (_, v) = post(&app, "/v1/session", json!({"x": 0, "y": 0, "z": 0})).await;
    assert_eq!(v["id"].as_u64(), Some(second + 1));
}

#[tokio::test]
async fn patch_images() {
    let (app, _) = app();
    let fetch = |uri: &'static str| {
        let app = app.clone();
        async move { send(&app, Request::get(uri).body(Body::empty()).unwrap()).await }
    };
    let decode = |bytes: &[u8]| {
        let mut r = png::Decoder::new(std::io::Cursor::new(bytes.to_vec()))
            .read_info()
            .unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.width, buf)
    };
    let (s, a) = fetch("/v1/patch?x=16&y=16&z=16&size=8").await;
    assert_eq!(s, StatusCode::OK);
    let (w, px) = decode(&a);
    assert_eq!(w, 8);
    assert!(px.iter().all(|&b| b == 128));
    let (_, b) = fetch("/v1/patch?x=16&y=16&z=16&size=8").await;
    assert_eq!(a, b);
    let (_, far) = fetch("/v1/patch?x=500&y=500&z=500&size=8").await;
    assert!(decode(&far).1.iter().all(|&b| b == 0));
    let (s, _) = fetch("/v1/patch?x=1&y=1&z=1&size=65").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
