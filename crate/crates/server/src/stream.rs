//! `GET /stream`: one WebSocket per session. Participants receive their
//! cohort and private topics without asking; experimenters subscribe to
//! topics or mirror a participant.

use std::collections::BTreeSet;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::HeaderMap;
use axum::response::{IntoResponse, Response};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use huddle_core::service::{ServiceError, Session, Subscription};

use crate::routes::{bearer, ApiError};
use crate::SharedState;

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamQuery {
    #[serde(default)]
    token: Option<String>,
    #[serde(default)]
    private_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
enum ClientMessage {
    Subscribe(Subscription),
    Unsubscribe(Subscription),
}

pub async fn handler(
    ws: WebSocketUpgrade,
    State(s): State<SharedState>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Response {
    let session = match (bearer(&headers).or(q.token.as_deref()), q.private_id) {
        (Some(token), _) => s.read(|h| h.authenticate(token)),
        (None, Some(p)) => {
            let started = Instant::now();
            let r = s.read(|h| h.resolve(&p));
            tokio::time::sleep_until((started + s.join_delay).into()).await;
            r
        }
        (None, None) => Err(ServiceError::Unauthenticated),
    };
    match session {
        Ok(session) => ws.on_upgrade(move |socket| run(socket, s, session)),
        Err(e) => ApiError(e).into_response(),
    }
}

fn handle(s: &SharedState, session: &Session, subs: &mut BTreeSet<Subscription>, text: &str) -> serde_json::Value {
    match serde_json::from_str::<ClientMessage>(text) {
        Ok(ClientMessage::Subscribe(sub)) => match s.read(|h| h.authorize(session, &sub)) {
            Ok(()) => {
                let v = json!({"subscribed": sub});
                subs.insert(sub);
                v
            }
            Err(e) => json!({"error": e.code(), "subscription": sub}),
        },
        Ok(ClientMessage::Unsubscribe(sub)) => {
            subs.remove(&sub);
            json!({"unsubscribed": sub})
        }
        Err(e) => json!({"error": "badRequest", "message": e.to_string()}),
    }
}

async fn run(mut socket: WebSocket, s: SharedState, session: Session) {
    let mut rx = s.subscribe();
    let mut subs = BTreeSet::new();
    loop {
        tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => {
                    let reply = handle(&s, &session, &mut subs, t.as_str());
                    if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            frame = rx.recv() => match frame {
                Ok(f) => {
                    if !s.read(|h| h.receives(&session, &subs, &f)) {
                        continue;
                    }
                    let text = serde_json::to_string(f.as_ref()).unwrap_or_default();
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(missed)) => {
                    // The client resyncs from a fresh view.
                    let _ = socket
                        .send(Message::Text(json!({"error": "lagged", "missed": missed}).to_string().into()))
                        .await;
                    break;
                }
                Err(RecvError::Closed) => break,
            },
        }
    }
}
