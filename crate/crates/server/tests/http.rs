use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use huddle_core::llm::{Gateway, KeyStore, MasterKey};
use huddle_core::model::config::AccessRole;
use huddle_core::model::templates::lost_at_sea;
use huddle_core::service::{Allowlist, Hub, HubOptions};
use huddle_core::time::{SystemClock, ThreadSleeper};
use huddle_server::{router, AppState, SharedState};

const DELAY: Duration = Duration::from_millis(80);

fn state() -> SharedState {
    let gw = Gateway::new(
        KeyStore::in_memory(MasterKey::random()),
        Arc::new(SystemClock),
        Arc::new(ThreadSleeper),
    );
    let allow = Allowlist::default()
        .with_token("owner@lab", "owner-token")
        .with_token("reader@lab", "reader-token");
    let hub = Hub::new(allow, Arc::new(gw), Arc::new(SystemClock), HubOptions::default());
    AppState::new(hub, DELAY)
}

async fn call(s: &SharedState, method: &str, uri: &str, token: Option<&str>, body: Value) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = if body.is_null() { Body::empty() } else { Body::from(body.to_string()) };
    let resp = router(s.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn json_of(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap_or(Value::Null)
}

/// Experiment with a reader, one cohort and two participants; returns
/// (public, private) id pairs.
async fn setup(s: &SharedState) -> Vec<(String, String)> {
    let mut cfg = lost_at_sea("owner@lab");
    cfg.roles.insert("reader@lab".into(), AccessRole::Reader);
    let (st, _) = call(s, "POST", "/experiments", Some("owner-token"), json!({"config": cfg, "seed": 1})).await;
    assert_eq!(st, StatusCode::CREATED);
    let (st, b) = call(s, "POST", "/experiments/lost-at-sea/cohorts", Some("owner-token"), json!({"name": "A"})).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(json_of(&b)["cohortId"], "cohort-1");
    let mut out = Vec::new();
    for i in 0..2 {
        let (st, b) = call(
            s,
            "POST",
            "/actions",
            Some("owner-token"),
            json!({"action": "createParticipant", "experimentId": "lost-at-sea", "cohortId": "cohort-1", "externalId": format!("PRLF{i}")}),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
        let v = json_of(&b);
        out.push((v["publicId"].as_str().unwrap().to_string(), v["privateId"].as_str().unwrap().to_string()));
    }
    out
}

fn record_count(s: &SharedState) -> usize {
    s.read(|h| h.engine(&"lost-at-sea".into()).unwrap().records().len())
}

#[tokio::test]
async fn reader_boot_is_denied_and_appends_nothing() {
    let s = state();
    let people = setup(&s).await;
    let before = record_count(&s);
    let (st, b) = call(
        &s,
        "POST",
        &format!("/participants/{}/boot", people[0].0),
        Some("reader-token"),
        json!({"experimentId": "lost-at-sea"}),
    )
    .await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    assert_eq!(json_of(&b)["error"], "permissionDenied");
    assert_eq!(record_count(&s), before);

    let (st, _) = call(
        &s,
        "POST",
        &format!("/participants/{}/boot", people[0].0),
        Some("owner-token"),
        json!({"experimentId": "lost-at-sea"}),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert!(record_count(&s) > before);
}

#[tokio::test]
async fn missing_or_unknown_token_is_unauthenticated() {
    let s = state();
    let (st, _) = call(&s, "POST", "/experiments/x/cohorts", None, json!({"name": "A"})).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call(&s, "POST", "/experiments/x/cohorts", Some("nope"), json!({"name": "A"})).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn join_links_take_the_same_minimum_time() {
    let s = state();
    let people = setup(&s).await;
    let t = Instant::now();
    let (st, b) = call(&s, "GET", &format!("/join/{}", people[0].1), None, Value::Null).await;
    assert!(t.elapsed() >= DELAY);
    assert_eq!(st, StatusCode::OK);
    let v = json_of(&b);
    assert_eq!(v["view"]["publicId"], people[0].0.as_str());
    assert!(!String::from_utf8_lossy(&b).contains("PRLF"));

    let t = Instant::now();
    let (st, b) = call(&s, "GET", "/join/not-a-real-link", None, Value::Null).await;
    assert!(t.elapsed() >= DELAY);
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&b)["error"], "unknownPrivateId");
}

#[tokio::test]
async fn participant_actions_and_gate_errors() {
    let s = state();
    let people = setup(&s).await;
    let uri = format!("/join/{}/actions", people[0].1);
    call(&s, "GET", &format!("/join/{}", people[0].1), None, Value::Null).await;
    for _ in 0..2 {
        let (st, b) = call(&s, "POST", &uri, None, json!({"type": "submitAnswer"})).await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    }
    // Alone at a wait-for-all chat: the gate holds.
    let (st, b) = call(&s, "POST", &uri, None, json!({"type": "sendChatMessage", "text": "hi"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let v = json_of(&b);
    assert_eq!(v["error"], "gateBlocked", "{v}");
    let (st, _) = call(&s, "POST", &uri, None, json!({"type": "bogus"})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn exports_are_zip_and_csv() {
    let s = state();
    let people = setup(&s).await;
    for (_, private) in &people {
        call(&s, "GET", &format!("/join/{private}"), None, Value::Null).await;
    }
    let (st, zip) = call(&s, "POST", "/experiments/lost-at-sea/export", Some("reader-token"), Value::Null).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(&zip[..2], b"PK");
    for (_, private) in &people {
        assert!(!zip.windows(private.len()).any(|w| w == private.as_bytes()));
    }
    let (st, csv) = call(&s, "POST", "/experiments/lost-at-sea/export?kind=payouts", Some("owner-token"), Value::Null).await;
    assert_eq!(st, StatusCode::OK);
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.contains("PRLF0,"));
}

#[tokio::test]
async fn stream_delivers_private_frames_only_to_their_owner() {
    let s = state();
    let people = setup(&s).await;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(huddle_server::run(listener, s.clone(), Duration::from_secs(1)));

    let connect = |private: String| async move {
        let url = format!("ws://{addr}/stream?privateId={private}");
        tokio_tungstenite::connect_async(url).await.unwrap().0
    };
    let mut ws0 = connect(people[0].1.clone()).await;
    let mut ws1 = connect(people[1].1.clone()).await;

    ws0.send(Message::Text(
        json!({"subscribe": {"type": "topic", "topic": "experimenterDebug", "experimentId": "lost-at-sea"}})
            .to_string()
            .into(),
    ))
    .await
    .unwrap();
    let reply: Value = serde_json::from_str(ws0.next().await.unwrap().unwrap().to_text().unwrap()).unwrap();
    assert_eq!(reply["error"], "permissionDenied");

    let (st, _) = call(
        &s,
        "POST",
        "/actions",
        Some("owner-token"),
        json!({"action": "messageParticipant", "experimentId": "lost-at-sea", "publicId": people[0].0, "text": "please hurry"}),
    )
    .await;
    assert_eq!(st, StatusCode::OK);

    let msg = tokio::time::timeout(Duration::from_secs(5), ws0.next()).await.unwrap().unwrap().unwrap();
    let frame: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(frame["topic"], "participantPrivate");
    assert_eq!(frame["payload"]["kind"], "facilitatorMessage");
    assert_eq!(frame["payload"]["text"], "please hurry");
    assert!(tokio::time::timeout(Duration::from_millis(300), ws1.next()).await.is_err());
}

#[tokio::test]
async fn stream_rejects_unknown_links() {
    let s = state();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(huddle_server::run(listener, s, Duration::from_secs(1)));
    let r = tokio_tungstenite::connect_async(format!("ws://{addr}/stream?privateId=nope")).await;
    assert!(r.is_err());
}
