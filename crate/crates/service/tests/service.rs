use std::collections::{HashMap, HashSet};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::NaiveDate;
use http_body_util::BodyExt;
use proptest::prelude::*;
use sitgen::datagen::{synth_generate, SynthConfig, SynthCorpus};
use sitgen::eval::user_embeddings;
use sitgen::features::{assemble_sp_features, AlsConfig, CountryDictionary, MelSpectrogram};
use sitgen::gbdt::{sp_rank, sp_train, SpForest, SpTrainConfig};
use sitgen::nn::{UamatConfig, UamatModel};
use sitgen::{Demographics, DeviceSnapshot, DeviceType, NetworkType, Situation, TaxonomySubset, TrackId, UserId};
use sitgen_service::*;
use tower::ServiceExt;

struct Fixture {
    corpus: SynthCorpus,
    mels: HashMap<TrackId, MelSpectrogram>,
    embeddings: HashMap<UserId, Vec<f32>>,
    model: UamatModel,
    forest: SpForest,
    store: TagStore,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = synth_generate(&SynthConfig {
            n_users: 30,
            n_tracks: 60,
            n_streams: 1500,
            mel_bands: 16,
            mel_frames: 32,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let mels: HashMap<_, _> = corpus.mels.iter().cloned().collect();
        let embeddings = user_embeddings(&corpus.interactions, &AlsConfig { factors: 8, ..Default::default() }).unwrap();
        let model = UamatModel::new(
            UamatConfig {
                mel_bands: 16,
                mel_frames: 32,
                user_dim: 8,
                taxonomy: TaxonomySubset::C4,
                width: 0.25,
                dropout: 0.3,
            },
            1,
        )
        .unwrap();
        let forest = train_forest(&corpus, 10);
        let store = build(&model, &corpus, &mels, &embeddings);
        Fixture {
            corpus,
            mels,
            embeddings,
            model,
            forest,
            store,
        }
    })
}

fn countries(corpus: &SynthCorpus) -> CountryDictionary {
    CountryDictionary::from_countries(corpus.demographics.iter().map(|(_, d)| d.country.clone()))
}

fn train_forest(corpus: &SynthCorpus, rounds: usize) -> SpForest {
    let demo: HashMap<_, _> = corpus.demographics.iter().cloned().collect();
    let dict = countries(corpus);
    let x: Vec<_> = corpus
        .streams
        .iter()
        .map(|s| assemble_sp_features(&s.device, &demo[&s.user], &dict))
        .collect();
    let y: Vec<_> = corpus.streams.iter().map(|s| s.situation.unwrap()).collect();
    sp_train(&x, &y, TaxonomySubset::C4, &SpTrainConfig { rounds, ..Default::default() }).unwrap()
}

fn build(model: &UamatModel, corpus: &SynthCorpus, mels: &HashMap<TrackId, MelSpectrogram>, emb: &HashMap<UserId, Vec<f32>>) -> TagStore {
    let candidates = Candidates::corpus_default(mels.keys().cloned(), &corpus.streams);
    build_tag_store(
        model,
        &candidates,
        StoreInputs {
            mels,
            embeddings: emb,
            streams: &corpus.streams,
        },
    )
    .unwrap()
}

fn snapshot(f: &Fixture) -> Snapshot {
    Snapshot::new(
        f.forest.clone(),
        f.store.clone(),
        f.corpus.demographics.iter().cloned().collect(),
        f.embeddings.keys().cloned().collect(),
    )
    .unwrap()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(snapshot(fixture()), ServiceConfig::default()))
}

fn uid(s: &str) -> UserId {
    UserId::new(s).unwrap()
}

fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn store_lookup_equals_forward_bit_for_bit() {
    let f = fixture();
    assert_eq!(f.store.skipped, 0);
    assert_eq!(f.store.len(), f.store.tracks.len() * f.store.users.len());
    for u in f.store.users.iter().step_by(7) {
        for t in f.store.tracks.iter().step_by(5) {
            let direct = f.model.forward(&f.mels[t], &f.embeddings[u], false).unwrap();
            let stored = f.store.get(t, u).unwrap();
            assert_eq!(bits(stored.as_slice()), bits(direct.as_slice()), "{t} {u}");
        }
    }
}

#[test]
fn pairs_without_inputs_are_skipped_and_counted() {
    let f = fixture();
    let mut mels = f.mels.clone();
    let mut emb = f.embeddings.clone();
    let gone_track = f.store.tracks[3].clone();
    let gone_user = f.store.users[2].clone();
    mels.remove(&gone_track);
    emb.remove(&gone_user);
    let tracks: Vec<TrackId> = f.store.tracks.clone();
    let users: Vec<UserId> = f.store.users.clone();
    let candidates = Candidates::Grid {
        tracks: tracks.clone(),
        users: users.clone(),
    };
    let inputs = StoreInputs {
        mels: &mels,
        embeddings: &emb,
        streams: &f.corpus.streams,
    };
    let store = build_tag_store(&f.model, &candidates, inputs).unwrap();
    assert_eq!(store.skipped, tracks.len() + users.len() - 1);
    assert_eq!(store.len(), (tracks.len() - 1) * (users.len() - 1));
    assert!(store.get(&gone_track, &users[0]).is_none());
    assert!(!store.contains_user(&gone_user));

    let pairs = Candidates::Pairs(vec![
        (tracks[0].clone(), users[0].clone()),
        (tracks[0].clone(), users[0].clone()),
        (gone_track.clone(), users[1].clone()),
        (tracks[1].clone(), users[4].clone()),
    ]);
    let store = build_tag_store(&f.model, &pairs, inputs).unwrap();
    assert_eq!((store.len(), store.skipped), (2, 1));
}

#[test]
fn rebuild_and_file_round_trip_keep_the_hash() {
    let f = fixture();
    let again = build(&f.model, &f.corpus, &f.mels, &f.embeddings);
    assert_eq!(again, f.store);
    assert_eq!(again.hash(), f.store.hash());
    assert_eq!(f.store.model_hash, f.model.hash());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.tag");
    f.store.save(&path).unwrap();
    let back = TagStore::load(&path).unwrap();
    assert_eq!(back, f.store);
    assert_eq!(back.hash(), f.store.hash());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(TagStore::read_from(&mut bytes.as_slice()).is_err());
    assert!(TagStore::read_from(&mut &bytes[..bytes.len() - 9]).is_err());
    bytes[0] = b'X';
    assert!(TagStore::read_from(&mut bytes.as_slice()).is_err());
}

#[test]
fn popularity_counts_match_streams() {
    let f = fixture();
    for (i, t) in f.store.tracks.iter().enumerate().step_by(9) {
        let total = f.corpus.streams.iter().filter(|s| &s.track == t).count() as u64;
        assert_eq!(f.store.track_popularity(i), total);
        for &c in TaxonomySubset::C4.members() {
            let n = f.corpus.streams.iter().filter(|s| &s.track == t && s.situation == Some(c)).count() as u64;
            assert_eq!(f.store.situation_popularity(i, c), n);
        }
    }
}

fn device(h: u32) -> DeviceSnapshot {
    let ts = NaiveDate::from_ymd_opt(2024, 3, 5).unwrap().and_hms_opt(h, 15, 0).unwrap();
    DeviceSnapshot::new(ts, DeviceType::Mobile, NetworkType::Wifi)
}

#[test]
fn situation_ranking_matches_the_predictor() {
    let f = fixture();
    let snap = snapshot(f);
    let dict = countries(&f.corpus);
    for (u, d) in f.corpus.demographics.iter().step_by(4) {
        for h in [7, 13, 22] {
            let r = infer_situations(&snap, u, &device(h), 3).unwrap();
            assert!(!r.cold_user);
            assert_eq!(r.situations.len(), 3);
            assert!(r.situations.windows(2).all(|w| w[0].prob >= w[1].prob));
            let lib = sp_rank(&f.forest, &assemble_sp_features(&device(h), d, &dict), 3).unwrap();
            let got: Vec<(Situation, f64)> = r.situations.iter().map(|s| (s.tag, s.prob)).collect();
            assert_eq!(got, lib);
            assert_eq!(infer_situations(&snap, u, &device(h), 3).unwrap(), r);
        }
    }
    let r = infer_situations(&snap, &uid("nobody"), &device(9), 3).unwrap();
    assert!(r.cold_user);
    let lib = sp_rank(&f.forest, &assemble_sp_features(&device(9), &Demographics::unknown(), &dict), 3).unwrap();
    assert_eq!(r.situations.iter().map(|s| (s.tag, s.prob)).collect::<Vec<_>>(), lib);
    assert!(infer_situations(&snap, &uid("nobody"), &device(9), 5).is_err());
}

fn check_session(store: &TagStore, user: &UserId, situation: Situation, n: usize, floor: f64, s: &GeneratedSession) {
    assert!(s.tracks.len() <= n);
    let ids: HashSet<_> = s.tracks.iter().map(|t| &t.track_id).collect();
    assert_eq!(ids.len(), s.tracks.len(), "duplicate tracks");
    let first_fill = s.tracks.iter().position(|t| t.filled).unwrap_or(s.tracks.len());
    assert!(s.tracks[first_fill..].iter().all(|t| t.filled));
    let ranked = &s.tracks[..first_fill];
    for t in ranked {
        let p = store.get(&t.track_id, user).unwrap().get(situation).unwrap();
        assert_eq!(p.to_bits(), t.score.to_bits());
        assert!(p > floor);
    }
    assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
    let eligible = store
        .tracks
        .iter()
        .filter(|t| store.get(t, user).is_some_and(|p| p.get(situation).unwrap() > floor))
        .count();
    assert_eq!(ranked.len(), eligible.min(n));
    if let Some(top) = ranked.first() {
        let best = store
            .tracks
            .iter()
            .filter_map(|t| store.get(t, user))
            .map(|p| p.get(situation).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(top.score, best);
    }
    if first_fill < s.tracks.len() {
        assert_eq!(ranked.len(), eligible);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sessions_are_ranked_unique_and_bounded(u in 0usize..30, c in 0usize..4, n in 0usize..120, floor in prop_oneof![Just(None), (0.0f64..0.6).prop_map(Some)]) {
        let f = fixture();
        let user = &f.store.users[u % f.store.users.len()];
        let situation = TaxonomySubset::C4.members()[c];
        let s = generate_session(&f.store, user, situation, n, floor).unwrap();
        prop_assert!(!s.cold_user);
        check_session(&f.store, user, situation, n, floor.unwrap_or(0.25), &s);
    }
}

#[test]
fn ties_break_by_popularity_then_track_id() {
    let f = fixture();
    let mut flat = f.model.clone();
    let n = flat.params.len();
    for p in &mut flat.params[n - 2..] {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let store = build(&flat, &f.corpus, &f.mels, &f.embeddings);
    let user = &store.users[0];
    assert_eq!(store.get(&store.tracks[0], user).unwrap().as_slice(), &[0.25; 4]);

    // Uniform distributions sit exactly on the default floor.
    let s = generate_session(&store, user, Situation::Gym, 10, None).unwrap();
    assert!(s.tracks.iter().all(|t| t.filled));

    let s = generate_session(&store, user, Situation::Gym, 500, Some(0.2)).unwrap();
    assert_eq!(s.tracks.len(), store.tracks.len());
    assert!(s.tracks.iter().all(|t| !t.filled && t.score == 0.25));
    let keys: Vec<(std::cmp::Reverse<u64>, &TrackId)> = s
        .tracks
        .iter()
        .map(|t| {
            let i = store.tracks.binary_search(&t.track_id).unwrap();
            (std::cmp::Reverse(store.track_popularity(i)), &t.track_id)
        })
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn fills_follow_situation_popularity() {
    let f = fixture();
    let user = &f.store.users[0];
    let s = generate_session(&f.store, user, Situation::Work, 60, Some(1.0)).unwrap();
    assert!(s.tracks.iter().all(|t| t.filled));
    let counts: Vec<u64> = s
        .tracks
        .iter()
        .map(|t| f.store.situation_popularity(f.store.tracks.binary_search(&t.track_id).unwrap(), Situation::Work))
        .collect();
    assert!(counts.iter().all(|&n| n > 0));
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    let total: u64 = (0..f.store.tracks.len()).map(|i| f.store.situation_popularity(i, Situation::Work)).sum();
    assert_eq!(s.tracks[0].score, counts[0] as f64 / total as f64);
    let with_plays = (0..f.store.tracks.len()).filter(|&i| f.store.situation_popularity(i, Situation::Work) > 0).count();
    assert_eq!(s.tracks.len(), with_plays.min(60));

    let cold = generate_session(&f.store, &uid("nobody"), Situation::Work, 20, None).unwrap();
    assert!(cold.cold_user);
    assert_eq!(cold.tracks, s.tracks[..20].to_vec());

    assert!(generate_session(&f.store, user, Situation::Club, 5, None).is_err());
    assert!(generate_session(&f.store, user, Situation::Work, 5, Some(1.5)).is_err());
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&body).unwrap())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn health_reports_model_hashes() {
    let st = state();
    let (status, body) = call(&st, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    let h: HealthResponse = serde_json::from_value(body).unwrap();
    let f = fixture();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_hashes.sp, f.forest.hash());
    assert_eq!(h.model_hashes.uamat, f.model.hash());
    assert_eq!(h.model_hashes.tag_store, f.store.hash());
}

#[tokio::test]
async fn situations_endpoint_matches_library() {
    let st = state();
    let snap = st.snapshot();
    let f = fixture();
    for (u, _) in f.corpus.demographics.iter().step_by(6) {
        let uri = format!("/v1/situations?user={u}&device=mobile&network=wifi&ts=2024-03-05T07:15:00&k=3");
        let (status, body) = call(&st, get(&uri)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let r: SituationsResponse = serde_json::from_value(body.clone()).unwrap();
        assert_eq!(serde_json::to_value(&r).unwrap(), body);
        let lib = infer_situations(&snap, u, &device(7), 3).unwrap();
        assert_eq!(r.situations, lib.situations);
        assert!(!r.cold_user);
    }
    let (_, body) = call(&st, get("/v1/situations?user=ghost&device=tablet&network=mobile&ts=2024-03-05T07:15:00%2B02:00")).await;
    let r: SituationsResponse = serde_json::from_value(body).unwrap();
    assert!(r.cold_user);
    assert_eq!(r.situations.len(), 3);
    let ts = NaiveDate::from_ymd_opt(2024, 3, 5).unwrap().and_hms_opt(7, 15, 0).unwrap();
    let lib = infer_situations(&snap, &uid("ghost"), &DeviceSnapshot::new(ts, DeviceType::Tablet, NetworkType::Mobile), 3).unwrap();
    assert_eq!(r.situations, lib.situations);
}

#[tokio::test]
async fn session_endpoint_matches_library() {
    let st = state();
    let snap = st.snapshot();
    let f = fixture();
    let user = f.store.users[5].clone();
    let (status, body) = call(
        &st,
        post("/v1/session", serde_json::json!({"user": user, "device": "desktop", "network": "lan", "ts": "2024-03-05T13:15:00"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: SessionResponse = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(serde_json::to_value(&r).unwrap(), body);
    let dev = DeviceSnapshot::new(device(13).local_timestamp, DeviceType::Desktop, NetworkType::Lan);
    let ranking = infer_situations(&snap, &user, &dev, 3).unwrap();
    assert_eq!(r.situations, ranking.situations);
    assert_eq!(r.situation, ranking.situations[0].tag);
    let lib = generate_session(&snap.store, &user, r.situation, DEFAULT_N, None).unwrap();
    assert_eq!(r.tracks, lib.tracks);
    assert_eq!(r.tracks.len(), DEFAULT_N);
    assert!(!r.cold_user);

    let (_, body) = call(
        &st,
        post(
            "/v1/session",
            serde_json::json!({"user": user, "situation": "sleep", "device": "mobile", "network": "wifi", "ts": "2024-03-05T13:15:00", "n": 7, "k": 4}),
        ),
    )
    .await;
    let r: SessionResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.situation, Situation::Sleep);
    assert_eq!(r.situations.len(), 4);
    assert_eq!(r.tracks, generate_session(&snap.store, &user, Situation::Sleep, 7, None).unwrap().tracks);

    let (_, body) = call(&st, post("/v1/session", serde_json::json!({"user": "ghost", "device": "mobile", "network": "wifi"}))).await;
    let r: SessionResponse = serde_json::from_value(body).unwrap();
    assert!(r.cold_user);
    assert!(r.tracks.iter().all(|t| t.filled));
}

#[tokio::test]
async fn bad_requests_get_json_errors() {
    let st = state();
    let cases = [
        get("/v1/situations?device=mobile&network=wifi"),
        get("/v1/situations?user=u1&device=phone&network=wifi"),
        get("/v1/situations?user=u1&device=mobile&network=wifi&k=0"),
        get("/v1/situations?user=u1&device=mobile&network=wifi&k=9"),
        get("/v1/situations?user=u1&device=mobile&network=wifi&k=two"),
        get("/v1/situations?user=u1&device=mobile&network=wifi&ts=yesterday"),
        post("/v1/session", serde_json::json!({"user": "u1", "device": "mobile"})),
        post("/v1/session", serde_json::json!({"user": "u1", "device": "mobile", "network": "wifi", "situation": "club"})),
        post("/v1/session", serde_json::json!({"user": "u1", "device": "mobile", "network": "wifi", "n": 100000})),
    ];
    for req in cases {
        let uri = req.uri().to_string();
        let (status, body) = call(&st, req).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        let e: ErrorResponse = serde_json::from_value(body).unwrap();
        assert!(!e.error.is_empty());
    }
}

#[tokio::test]
async fn user_flags() {
    let st = state();
    let f = fixture();
    let known = f.store.users[0].clone();
    let (_, body) = call(&st, get(&format!("/v1/users/{known}"))).await;
    let r: UserResponse = serde_json::from_value(body).unwrap();
    assert_eq!((r.demographics, r.embedding, r.tagged), (true, true, true));
    let (_, body) = call(&st, get("/v1/users/ghost")).await;
    let r: UserResponse = serde_json::from_value(body).unwrap();
    assert_eq!((r.user.as_str(), r.demographics, r.embedding, r.tagged), ("ghost", false, false, false));
}

#[tokio::test]
async fn situations_p99_under_five_ms() {
    let st = state();
    let f = fixture();
    let mut times = Vec::new();
    for i in 0..1000 {
        let (u, _) = &f.corpus.demographics[i % f.corpus.demographics.len()];
        let uri = format!("/v1/situations?user={u}&device=mobile&network=wifi&ts=2024-03-05T{:02}:15:00", i % 24);
        let start = Instant::now();
        let resp = router(st.clone()).oneshot(get(&uri)).await.unwrap();
        times.push(start.elapsed());
        assert_eq!(resp.status(), StatusCode::OK);
    }
    times.sort();
    let p99 = times[989];
    assert!(p99.as_secs_f64() < 0.005, "p99 {p99:?}");
}

#[test]
fn swaps_are_atomic() {
    let f = fixture();
    let st = state();
    let old = st.snapshot().hashes.clone();
    let other = Snapshot::new(
        train_forest(&f.corpus, 3),
        f.store.clone(),
        f.corpus.demographics.iter().cloned().collect(),
        HashSet::new(),
    )
    .unwrap();
    let new = other.hashes.clone();
    assert_ne!(old, new);
    std::thread::scope(|s| {
        let readers: Vec<_> = (0..4)
            .map(|_| {
                s.spawn(|| {
                    for _ in 0..2000 {
                        let h = st.snapshot().hashes.clone();
                        assert!(h == old || h == new);
                    }
                })
            })
            .collect();
        let replaced = st.swap(other);
        assert_eq!(replaced.hashes, old);
        for r in readers {
            r.join().unwrap();
        }
    });
    assert_eq!(st.snapshot().hashes, new);
}

#[test]
fn snapshot_loads_from_files_and_rejects_mismatches() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let paths = SnapshotPaths {
        forest: dir.path().join("sp.spf"),
        store: dir.path().join("store.tag"),
        demographics: dir.path().join("demographics.jsonl"),
        embeddings: Some(dir.path().join("embeddings.sgm")),
    };
    f.forest.save(&paths.forest).unwrap();
    f.store.save(&paths.store).unwrap();
    sitgen::datagen::save_demographics(&paths.demographics, &f.corpus.demographics).unwrap();
    sitgen::datagen::save_embeddings(paths.embeddings.as_ref().unwrap(), &f.embeddings).unwrap();
    let snap = Snapshot::load(&paths).unwrap();
    assert_eq!(snap.hashes, snapshot(f).hashes);
    assert_eq!(snap.embedded.len(), f.embeddings.len());

    let missing = SnapshotPaths {
        store: dir.path().join("nope.tag"),
        ..paths.clone()
    };
    let err = Snapshot::load(&missing).unwrap_err().to_string();
    assert!(err.contains("nope.tag"), "{err}");

    let c8 = SpForest::empty(TaxonomySubset::C8);
    let err = Snapshot::new(c8, f.store.clone(), HashMap::new(), HashSet::new()).unwrap_err();
    assert!(matches!(err, sitgen::Error::TaxonomyMismatch { .. }));
}
