//! Local HTTP server speaking the tool wire protocol, answering from a
//! synthetic world. Used to exercise live adapters and the chat backend
//! without a network: it logs every request and can inject faults.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

use super::live::Endpoint;
use super::wire::{self, WireRequest};
use crate::action::AtomicTool;
use crate::synth::SynthTools;

pub const CHAT_ROUTE: &str = "/chat/completions";
const WORKERS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Answer with this status and an empty JSON object.
    Status(u16),
    /// Sleep before answering normally.
    Delay(Duration),
    /// Answer 200 with a body that is not JSON.
    Garbage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub route: String,
    pub body: String,
    pub authorization: Option<String>,
}

#[derive(Default)]
struct Shared {
    log: Mutex<Vec<LoggedRequest>>,
    faults: Mutex<BTreeMap<String, VecDeque<Fault>>>,
    chat_replies: Mutex<VecDeque<String>>,
    next_id: AtomicU64,
    stop: AtomicBool,
}

pub struct StubServer {
    base: String,
    server: Arc<tiny_http::Server>,
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port. `tools` answers tool routes;
    /// without it only the chat route works.
    pub fn start(tools: Option<SynthTools>) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub server has no IP address"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Shared::default());
        let tools = tools.map(Arc::new);
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let shared = Arc::clone(&shared);
                let tools = tools.clone();
                std::thread::spawn(move || {
                    while !shared.stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => handle(req, &shared, tools.as_deref()),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(StubServer {
            base: format!("http://127.0.0.1:{port}"),
            server,
            shared,
            workers,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn url(&self, route: &str) -> String {
        format!("{}{route}", self.base)
    }

    /// An endpoint for every routed tool.
    pub fn endpoints(&self) -> BTreeMap<AtomicTool, Endpoint> {
        AtomicTool::ALL
            .into_iter()
            .filter_map(|t| wire::route(t).map(|r| (t, Endpoint::new(self.url(r)))))
            .collect()
    }

    pub fn chat_endpoint(&self) -> Endpoint {
        Endpoint::new(self.url(CHAT_ROUTE))
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn count(&self, route: &str) -> usize {
        self.shared.log.lock().unwrap().iter().filter(|r| r.route == route).count()
    }

    /// Queues a fault for the next request on `route`.
    pub fn push_fault(&self, route: &str, fault: Fault) {
        self.shared
            .faults
            .lock()
            .unwrap()
            .entry(route.to_string())
            .or_default()
            .push_back(fault);
    }

    /// Queues the assistant text for the next chat request.
    pub fn push_chat_reply(&self, content: impl Into<String>) {
        self.shared.chat_replies.lock().unwrap().push_back(content.into());
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn respond(req: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let _ = req.respond(tiny_http::Response::from_string(body).with_status_code(status).with_header(header));
}

fn handle(mut req: tiny_http::Request, shared: &Shared, tools: Option<&SynthTools>) {
    let route = req.url().split('?').next().unwrap_or_default().to_string();
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() {
        return respond(req, 400, json!({"error": "unreadable body"}).to_string());
    }
    let authorization = req
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_string());
    shared.log.lock().unwrap().push(LoggedRequest {
        route: route.clone(),
        body: body.clone(),
        authorization,
    });
    let fault = shared.faults.lock().unwrap().get_mut(&route).and_then(|q| q.pop_front());
    match fault {
        Some(Fault::Status(code)) => return respond(req, code, "{}".into()),
        Some(Fault::Garbage) => return respond(req, 200, "<html>not json".into()),
        Some(Fault::Delay(d)) => std::thread::sleep(d),
        None => {}
    }
    if route == CHAT_ROUTE {
        return match shared.chat_replies.lock().unwrap().pop_front() {
            Some(content) => respond(
                req,
                200,
                json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string(),
            ),
            None => respond(req, 503, json!({"error": "no reply queued"}).to_string()),
        };
    }
    let Some(tools) = tools else {
        return respond(req, 404, json!({"error": "no tools"}).to_string());
    };
    let wire_req = match WireRequest::parse(&route, &body) {
        Ok(r) => r,
        Err(e) if wire::tool_for_route(&route).is_none() => return respond(req, 404, json!({"error": e}).to_string()),
        Err(e) => return respond(req, 400, json!({"error": e}).to_string()),
    };
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst) + 1;
    let result = tools.answer(&wire_req.to_action(id));
    match result.payload {
        Some(p) => respond(req, 200, wire::encode_response(&p).to_string()),
        None => respond(req, 404, json!({"error": result.error}).to_string()),
    }
}
