//! Provider abstraction for chat-completion model APIs.

pub mod http;
pub mod keys;
pub mod retry;
pub mod scripted;
pub mod types;

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::agent::spec::ModelSettings;
use crate::ids::ExperimenterId;
use crate::time::{Clock, Sleeper};

pub use keys::{KeyStore, KeyStoreError, MasterKey};
pub use retry::RetryPolicy;
pub use scripted::{Script, ScriptedProvider};
pub use types::*;

pub const DEFAULT_CONCURRENCY_CAP: usize = 8;

/// One wire round trip. Retries live in [`Gateway::complete`].
pub trait Provider: Send + Sync {
    fn send(
        &self,
        config: &ProviderConfig,
        key: Option<&ApiKey>,
        req: &ChatCompletionRequest,
        timeout: Duration,
    ) -> Result<ChatCompletionResponse, LlmError>;

    fn requires_key(&self) -> bool {
        true
    }
}

/// Counting semaphore bounding in-flight calls per provider.
#[derive(Debug)]
struct Limiter {
    cap: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(cap: usize) -> Self {
        Limiter {
            cap: cap.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_use.lock().expect("limiter lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

struct Registered {
    endpoint_url: String,
    provider: Arc<dyn Provider>,
    limiter: Limiter,
}

pub struct Gateway {
    providers: HashMap<String, Registered>,
    keys: Mutex<KeyStore>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    sleeper: Arc<dyn Sleeper>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("providers", &self.providers.keys().collect::<Vec<_>>())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(keys: KeyStore, clock: Arc<dyn Clock>, sleeper: Arc<dyn Sleeper>) -> Self {
        Gateway {
            providers: HashMap::new(),
            keys: Mutex::new(keys),
            retry: RetryPolicy::default(),
            clock,
            sleeper,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn register_provider(&mut self, provider_id: &str, endpoint_url: &str, provider: Arc<dyn Provider>) {
        self.register_provider_with_cap(provider_id, endpoint_url, provider, DEFAULT_CONCURRENCY_CAP);
    }

    pub fn register_provider_with_cap(
        &mut self,
        provider_id: &str,
        endpoint_url: &str,
        provider: Arc<dyn Provider>,
        cap: usize,
    ) {
        self.providers.insert(
            provider_id.to_string(),
            Registered {
                endpoint_url: endpoint_url.to_string(),
                provider,
                limiter: Limiter::new(cap),
            },
        );
    }

    pub fn has_provider(&self, provider_id: &str) -> bool {
        self.providers.contains_key(provider_id)
    }

    pub fn register_api_key(
        &self,
        caller: &ExperimenterId,
        owner: &ExperimenterId,
        provider_id: &str,
        key_material: &str,
    ) -> Result<AuthKeyRef, KeyStoreError> {
        self.keys
            .lock()
            .expect("key store lock")
            .register_api_key(caller, owner, provider_id, key_material)
    }

    /// Provider config for an agent in an experiment created by `owner`.
    pub fn provider_config(&self, owner: &ExperimenterId, model: &ModelSettings) -> Result<ProviderConfig, LlmError> {
        let reg = self
            .providers
            .get(&model.provider_id)
            .ok_or_else(|| LlmError::UnknownProvider(model.provider_id.clone()))?;
        Ok(ProviderConfig {
            provider_id: model.provider_id.clone(),
            endpoint_url: reg.endpoint_url.clone(),
            auth_key_ref: self.keys.lock().expect("key store lock").key_ref_for(owner, &model.provider_id),
            model_name: model.model_name.clone(),
            sampling_params: model.sampling_params.clone(),
        })
    }

    /// Sends `req`, retrying transient failures with exponential backoff.
    /// The key behind `config.auth_key_ref` must belong to `experiment_creator`.
    pub fn complete(
        &self,
        config: &ProviderConfig,
        experiment_creator: &ExperimenterId,
        req: &ChatCompletionRequest,
    ) -> CallOutcome {
        let mut attempts = Vec::new();
        let fail = |attempts: Vec<Attempt>, e: LlmError| CallOutcome {
            attempts,
            result: Err(e),
        };
        let Some(reg) = self.providers.get(&config.provider_id) else {
            return fail(attempts, LlmError::UnknownProvider(config.provider_id.clone()));
        };
        if req.messages.is_empty() {
            return fail(attempts, LlmError::BadRequest("request has no messages".to_string()));
        }
        let key = match (&config.auth_key_ref, reg.provider.requires_key()) {
            (Some(r), _) => match self.keys.lock().expect("key store lock").resolve(r, experiment_creator) {
                Ok(k) => Some(k),
                Err(e) if reg.provider.requires_key() => return fail(attempts, e),
                Err(_) => None,
            },
            (None, true) => {
                return fail(attempts, LlmError::AuthFailure("no key registered for provider".to_string()))
            }
            (None, false) => None,
        };

        let _slot = reg.limiter.acquire();
        let mut last = None;
        for n in 0..self.retry.max_attempts {
            let wait = self.retry.delay_before(n);
            if !wait.is_zero() {
                self.sleeper.sleep(wait);
            }
            let started_at = self.clock.now();
            match reg.provider.send(config, key.as_ref(), req, self.retry.attempt_timeout()) {
                Ok(resp) => {
                    attempts.push(Attempt { started_at, error: None });
                    return CallOutcome {
                        attempts,
                        result: Ok(resp),
                    };
                }
                Err(e) => {
                    attempts.push(Attempt {
                        started_at,
                        error: Some(e.clone()),
                    });
                    if !e.is_retryable() {
                        return fail(attempts, e);
                    }
                    last = Some(e);
                }
            }
        }
        let n = attempts.len() as u32;
        fail(
            attempts,
            LlmError::ExhaustedRetries {
                attempts: n,
                last: Box::new(last.expect("at least one attempt")),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::spec::SamplingParams;
    use crate::time::{ManualClock, Timestamp};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Replays a fixed sequence of results and records when each call began.
    struct Faulty {
        clock: ManualClock,
        plan: Mutex<Vec<Result<(), LlmError>>>,
        seen: Mutex<Vec<(Timestamp, Option<String>)>>,
    }

    impl Provider for Faulty {
        fn send(
            &self,
            _config: &ProviderConfig,
            key: Option<&ApiKey>,
            _req: &ChatCompletionRequest,
            _timeout: Duration,
        ) -> Result<ChatCompletionResponse, LlmError> {
            self.seen
                .lock()
                .unwrap()
                .push((self.clock.now(), key.map(|k| k.expose().to_string())));
            let next = self.plan.lock().unwrap().remove(0);
            next.map(|_| ChatCompletionResponse {
                content: "ok".into(),
                finish_reason: "stop".into(),
                latency_ms: 0,
                token_counts: TokenCounts::default(),
            })
        }
    }

    fn owner() -> ExperimenterId {
        "owner@lab".into()
    }

    fn setup(plan: Vec<Result<(), LlmError>>) -> (Gateway, Arc<Faulty>, ManualClock) {
        let clock = ManualClock::new(Timestamp(0));
        let faulty = Arc::new(Faulty {
            clock: clock.clone(),
            plan: Mutex::new(plan),
            seen: Mutex::new(Vec::new()),
        });
        let mut gw = Gateway::new(
            KeyStore::in_memory(MasterKey::random()),
            Arc::new(clock.clone()),
            Arc::new(clock.clone()),
        );
        gw.register_provider("fake", "http://unused", faulty.clone());
        gw.register_api_key(&owner(), &owner(), "fake", "sk-secret").unwrap();
        (gw, faulty, clock)
    }

    fn model() -> ModelSettings {
        ModelSettings {
            provider_id: "fake".into(),
            model_name: "m".into(),
            sampling_params: SamplingParams::default(),
        }
    }

    fn req() -> ChatCompletionRequest {
        ChatCompletionRequest::single_user("hi", SamplingParams::default())
    }

    #[test]
    fn rate_limits_back_off_exponentially() {
        let (gw, faulty, _) = setup(vec![Err(LlmError::RateLimited), Err(LlmError::RateLimited), Ok(())]);
        let cfg = gw.provider_config(&owner(), &model()).unwrap();
        let out = gw.complete(&cfg, &owner(), &req());
        assert!(out.result.is_ok());
        let starts: Vec<i64> = out.attempts.iter().map(|a| a.started_at.0).collect();
        assert_eq!(starts, vec![0, 1000, 3000]);
        let seen = faulty.seen.lock().unwrap();
        assert_eq!(seen[0].1.as_deref(), Some("sk-secret"));
    }

    #[test]
    fn exhausts_after_three_attempts() {
        let (gw, _, _) = setup(vec![Err(LlmError::Timeout), Err(LlmError::Timeout), Err(LlmError::Timeout)]);
        let cfg = gw.provider_config(&owner(), &model()).unwrap();
        let out = gw.complete(&cfg, &owner(), &req());
        assert_eq!(out.attempts.len(), 3);
        assert!(matches!(out.result, Err(LlmError::ExhaustedRetries { attempts: 3, .. })));
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (gw, _, _) = setup(vec![Err(LlmError::AuthFailure("bad key".into())), Ok(())]);
        let cfg = gw.provider_config(&owner(), &model()).unwrap();
        let out = gw.complete(&cfg, &owner(), &req());
        assert_eq!(out.attempts.len(), 1);
        assert!(matches!(out.result, Err(LlmError::AuthFailure(_))));
    }

    #[test]
    fn keys_only_resolve_for_the_experiment_creator() {
        let (gw, faulty, _) = setup(vec![Ok(())]);
        let cfg = gw.provider_config(&owner(), &model()).unwrap();
        let out = gw.complete(&cfg, &"someone@else".into(), &req());
        assert!(matches!(out.result, Err(LlmError::AuthFailure(_))));
        assert!(faulty.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn missing_key_and_unknown_provider() {
        let (gw, _, _) = setup(vec![]);
        let cfg = gw.provider_config(&"nokey@lab".into(), &model()).unwrap();
        assert!(matches!(
            gw.complete(&cfg, &"nokey@lab".into(), &req()).result,
            Err(LlmError::AuthFailure(_))
        ));
        let mut m = model();
        m.provider_id = "nope".into();
        assert!(matches!(gw.provider_config(&owner(), &m), Err(LlmError::UnknownProvider(_))));
    }

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            write!(
                stream,
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(buf).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn http_provider_round_trip() {
        let (url, handle) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"content":"hello"},"finish_reason":"stop"}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#,
        );
        let p = http::HttpProvider::new(http::AuthHeader::Bearer);
        let cfg = ProviderConfig {
            provider_id: "x".into(),
            endpoint_url: url,
            auth_key_ref: None,
            model_name: "m1".into(),
            sampling_params: SamplingParams::default(),
        };
        let resp = p
            .send(&cfg, Some(&ApiKey::new("sk-1")), &req(), Duration::from_secs(5))
            .unwrap();
        assert_eq!(resp.content, "hello");
        assert_eq!(resp.token_counts.prompt, 3);
        let seen = handle.join().unwrap();
        assert!(seen.to_ascii_lowercase().contains("authorization: bearer sk-1"));
        assert!(seen.contains("\"model\":\"m1\""));
    }

    #[test]
    fn http_status_mapping() {
        for (status, check) in [
            ("401 Unauthorized", (|e: &LlmError| matches!(e, LlmError::AuthFailure(_))) as fn(&LlmError) -> bool),
            ("429 Too Many Requests", |e| matches!(e, LlmError::RateLimited)),
            ("503 Service Unavailable", |e| matches!(e, LlmError::Server(_))),
            ("400 Bad Request", |e| matches!(e, LlmError::BadRequest(_))),
        ] {
            let (url, handle) = serve_once(status, "{}");
            let p = http::HttpProvider::new(http::AuthHeader::Custom("x-api-key".into()));
            let cfg = ProviderConfig {
                provider_id: "x".into(),
                endpoint_url: url,
                auth_key_ref: None,
                model_name: "m".into(),
                sampling_params: SamplingParams::default(),
            };
            let err = p.send(&cfg, None, &req(), Duration::from_secs(5)).unwrap_err();
            assert!(check(&err), "{status}: {err:?}");
            handle.join().unwrap();
        }
    }
}
