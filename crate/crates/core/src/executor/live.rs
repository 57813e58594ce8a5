//! HTTP tool adapters. Each tool posts its wire request to a configured
//! endpoint; transport failures, 5xx and 429 are retried with exponential
//! backoff, other 4xx are not.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::wire::{self, WireRequest};
use super::{AdapterSet, ToolAdapter, ToolPayload, ToolResult};
use crate::action::{AtomicTool, ProbeAction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub retries: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout: Duration::from_secs(20),
            retries: 2,
            backoff_base: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.backoff_base * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// A service URL plus the environment variable holding its bearer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Endpoint { url: url.into(), token_env: None }
    }

    fn token(&self) -> Option<String> {
        self.token_env.as_deref().and_then(|k| std::env::var(k).ok())
    }
}

#[derive(Debug)]
pub enum HttpFailure {
    Timeout,
    /// Last non-success status and its body.
    Status(u16, String),
    Transport(String),
}

pub struct HttpReply {
    pub body: String,
    pub attempts: u32,
}

/// Builds a blocking client with the policy's timeout.
pub fn client(policy: &RetryPolicy) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(policy.timeout)
        .build()
        .expect("HTTP client builds")
}

/// POSTs `body` as JSON with retries. Safe to call from several threads
/// with one shared client.
pub fn post_json(
    client: &reqwest::blocking::Client,
    endpoint: &Endpoint,
    body: &serde_json::Value,
    policy: &RetryPolicy,
) -> Result<HttpReply, (HttpFailure, u32)> {
    let token = endpoint.token();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let mut req = client.post(&endpoint.url).json(body);
        if let Some(t) = &token {
            req = req.bearer_auth(t);
        }
        let failure = match req.send() {
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text();
                match text {
                    Ok(text) if status.is_success() => return Ok(HttpReply { body: text, attempts: attempt }),
                    Ok(text) => {
                        let retryable = status.is_server_error() || status.as_u16() == 429;
                        let f = HttpFailure::Status(status.as_u16(), text);
                        if !retryable {
                            return Err((f, attempt));
                        }
                        f
                    }
                    Err(e) if e.is_timeout() => HttpFailure::Timeout,
                    Err(e) => HttpFailure::Transport(e.to_string()),
                }
            }
            Err(e) if e.is_timeout() => HttpFailure::Timeout,
            Err(e) => HttpFailure::Transport(e.to_string()),
        };
        if attempt > policy.retries {
            return Err((failure, attempt));
        }
        std::thread::sleep(policy.backoff(attempt));
    }
}

/// One remote tool.
pub struct LiveAdapter {
    tool: AtomicTool,
    endpoint: Endpoint,
    policy: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl LiveAdapter {
    pub fn new(tool: AtomicTool, endpoint: Endpoint, policy: RetryPolicy) -> Self {
        LiveAdapter {
            tool,
            endpoint,
            client: client(&policy),
            policy,
        }
    }
}

impl ToolAdapter for LiveAdapter {
    fn execute(&self, action: &ProbeAction) -> ToolResult {
        let started = Instant::now();
        let elapsed = || started.elapsed().as_millis() as u64;
        if action.tool != self.tool {
            return ToolResult::error(action, "WrongAdapter");
        }
        let Some(req) = WireRequest::from_action(action) else {
            return ToolResult::error(action, "NoRoute");
        };
        let body = serde_json::to_value(&req).expect("request serializes");
        match post_json(&self.client, &self.endpoint, &body, &self.policy) {
            Ok(reply) => match wire::parse_response(self.tool, &reply.body) {
                Ok(payload) => ToolResult::ok(action, payload).with_latency(elapsed()),
                Err(_) => ToolResult {
                    raw_body: Some(reply.body),
                    ..ToolResult::error(action, "BadResponse").with_latency(elapsed())
                },
            },
            Err((HttpFailure::Timeout, _)) => ToolResult::timeout(action).with_latency(elapsed()),
            Err((HttpFailure::Status(code, text), _)) => ToolResult {
                raw_body: (!text.is_empty()).then_some(text),
                ..ToolResult::error(action, format!("HttpStatus{code}")).with_latency(elapsed())
            },
            Err((HttpFailure::Transport(_), _)) => ToolResult::error(action, "Transport").with_latency(elapsed()),
        }
    }
}

/// Crop runs locally: the result is a derived image reference
/// `<image_ref>#crop=<bbox>` that later tools can address.
pub struct LocalCrop;

impl ToolAdapter for LocalCrop {
    fn execute(&self, action: &ProbeAction) -> ToolResult {
        match (action.arg("image_ref"), action.arg("bbox")) {
            (Some(img), Some(bbox)) => ToolResult::ok(
                action,
                ToolPayload::Crop {
                    image_ref: crop_ref(img, bbox),
                },
            ),
            _ => ToolResult::error(action, "MissingArg"),
        }
    }
}

pub fn crop_ref(image_ref: &str, bbox: &str) -> String {
    let bbox: String = bbox.chars().filter(|c| !c.is_whitespace()).collect();
    format!("{}#crop={bbox}", base_image_ref(image_ref))
}

/// Image reference with any crop suffix removed.
pub fn base_image_ref(image_ref: &str) -> &str {
    image_ref.split_once("#crop=").map_or(image_ref, |(base, _)| base)
}

/// Adapters for every tool with a configured endpoint, plus local crop.
pub fn live_adapters(endpoints: &BTreeMap<AtomicTool, Endpoint>, policy: RetryPolicy) -> AdapterSet {
    let mut set = AdapterSet::new().with(AtomicTool::Crop, Arc::new(LocalCrop));
    for (tool, ep) in endpoints {
        if *tool != AtomicTool::Crop {
            set.insert(*tool, Arc::new(LiveAdapter::new(*tool, ep.clone(), policy)));
        }
    }
    set
}
