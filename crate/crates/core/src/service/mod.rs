//! Enrollment/verification service speaking newline-delimited JSON over TCP.
//!
//! The server stores protected templates and a decision threshold, nothing
//! else: meshes, descriptors, raw embeddings, and keys never appear in any
//! wire message or persisted byte sequence. Requests carry a client `req_id`
//! that is echoed in the response; unknown JSON fields are ignored.
//!
//! Ops: `ENROLL` (reject duplicates and parameter mismatches), `VERIFY`
//! (cosine similarity against the stored template, strict `S > theta`),
//! `REVOKE` (tombstone the record), `PING`.

mod store;

pub use store::{EnrollmentRecord, TemplateStore};

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protect::{ProtectedTemplate, TEMPLATE_VERSION};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7399;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("(user {user_id}, key {key_id}) already enrolled")]
    Duplicate { user_id: String, key_id: String },
    #[error("(user {user_id}, key {key_id}) not enrolled")]
    NotEnrolled { user_id: String, key_id: String },
    #[error("template parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("corrupt journal: {0}")]
    CorruptJournal(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Template parameters the server accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub k: usize,
    pub t: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// 0 binds an ephemeral port; see [`ServerHandle::port`].
    pub port: u16,
    pub threshold: f64,
    pub params: TemplateParams,
    pub journal_path: PathBuf,
    /// Structured event log (one JSON object per line); optional.
    pub audit_path: Option<PathBuf>,
}

/// Flat request envelope; op-specific fields are optional so unknown or
/// extra fields never break parsing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub req_id: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<ProtectedTemplate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Response {
    pub req_id: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

impl Response {
    fn ok(req_id: &str) -> Self {
        Self {
            req_id: Some(req_id.to_string()),
            ok: true,
            error: None,
            decision: None,
            similarity: None,
            threshold: None,
            version: None,
        }
    }

    fn err(req_id: Option<String>, message: impl Into<String>) -> Self {
        Self {
            req_id,
            ok: false,
            error: Some(message.into()),
            decision: None,
            similarity: None,
            threshold: None,
            version: None,
        }
    }
}

struct ServerState {
    store: RwLock<TemplateStore>,
    threshold: f64,
    params: TemplateParams,
    audit: Option<Mutex<std::fs::File>>,
}

impl ServerState {
    fn audit(&self, event: serde_json::Value) {
        if let Some(file) = &self.audit {
            if let Ok(mut f) = file.lock() {
                let _ = writeln!(f, "{event}");
            }
        }
    }

    fn check_params(&self, template: &ProtectedTemplate) -> Result<(), ServiceError> {
        if template.version != TEMPLATE_VERSION {
            return Err(ServiceError::ParamMismatch(format!(
                "template version {} vs server {TEMPLATE_VERSION}",
                template.version
            )));
        }
        let got = TemplateParams { k: template.k, t: template.t, d: template.d };
        if got != self.params {
            return Err(ServiceError::ParamMismatch(format!(
                "template (K={}, T={}, d={}) vs server (K={}, T={}, d={})",
                got.k, got.t, got.d, self.params.k, self.params.t, self.params.d
            )));
        }
        if template.z_t.len() != template.d {
            return Err(ServiceError::ParamMismatch(format!(
                "z_t length {} vs declared d {}",
                template.z_t.len(),
                template.d
            )));
        }
        Ok(())
    }

    fn handle(&self, request: Request) -> Response {
        let req_id = request.req_id.clone();
        match self.dispatch(request) {
            Ok(response) => response,
            Err(e) => Response::err(Some(req_id), e.to_string()),
        }
    }

    fn dispatch(&self, request: Request) -> Result<Response, ServiceError> {
        let req_id = request.req_id.clone();
        let need = |field: Option<String>, name: &str| {
            field.ok_or_else(|| ServiceError::Protocol(format!("missing field '{name}'")))
        };
        match request.op.as_str() {
            "PING" => {
                let mut r = Response::ok(&req_id);
                r.version = Some(PROTOCOL_VERSION);
                Ok(r)
            }
            "ENROLL" => {
                let user_id = need(request.user_id, "user_id")?;
                let key_id = need(request.key_id, "key_id")?;
                let template = request
                    .template
                    .ok_or_else(|| ServiceError::Protocol("missing field 'template'".into()))?;
                self.check_params(&template)?;
                if template.key_id != key_id {
                    return Err(ServiceError::ParamMismatch(format!(
                        "template key_id {} vs request key_id {key_id}",
                        template.key_id
                    )));
                }
                let record = EnrollmentRecord {
                    user_id: user_id.clone(),
                    key_id: key_id.clone(),
                    template,
                    enrolled_at: unix_now(),
                };
                self.store.write().expect("store lock").enroll(record)?;
                self.audit(serde_json::json!({
                    "event": "enroll", "user_id": user_id, "key_id": key_id, "at": unix_now(),
                }));
                Ok(Response::ok(&req_id))
            }
            "VERIFY" => {
                let user_id = need(request.user_id, "user_id")?;
                let key_id = need(request.key_id, "key_id")?;
                let template = request
                    .template
                    .ok_or_else(|| ServiceError::Protocol("missing field 'template'".into()))?;
                self.check_params(&template)?;
                let store = self.store.read().expect("store lock");
                let record = store.get(&user_id, &key_id).ok_or_else(|| {
                    ServiceError::NotEnrolled { user_id: user_id.clone(), key_id: key_id.clone() }
                })?;
                let (decision, similarity) =
                    crate::eval::match_templates(&template.z_t, &record.template.z_t, self.threshold)
                        .map_err(|e| ServiceError::Protocol(e.to_string()))?;
                drop(store);
                let decision_str = match decision {
                    crate::eval::Decision::Match => "match",
                    crate::eval::Decision::NonMatch => "non_match",
                };
                self.audit(serde_json::json!({
                    "event": "verify", "user_id": user_id, "key_id": key_id,
                    "decision": decision_str, "similarity": similarity, "at": unix_now(),
                }));
                let mut r = Response::ok(&req_id);
                r.decision = Some(decision_str.to_string());
                r.similarity = Some(similarity);
                r.threshold = Some(self.threshold);
                Ok(r)
            }
            "REVOKE" => {
                let user_id = need(request.user_id, "user_id")?;
                let key_id = need(request.key_id, "key_id")?;
                self.store.write().expect("store lock").revoke(&user_id, &key_id)?;
                self.audit(serde_json::json!({
                    "event": "revoke", "user_id": user_id, "key_id": key_id, "at": unix_now(),
                }));
                Ok(Response::ok(&req_id))
            }
            other => Err(ServiceError::Protocol(format!("unknown op '{other}'"))),
        }
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct ServerHandle {
    pub port: u16,
    shutdown: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock workers stuck in read_line by closing their sockets.
        if let Ok(conns) = self.connections.lock() {
            for c in conns.iter() {
                let _ = c.shutdown(std::net::Shutdown::Both);
            }
        }
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Start the server on a background thread; the handle stops it on drop.
pub fn serve(config: ServerConfig) -> Result<ServerHandle, ServiceError> {
    let store = TemplateStore::open(&config.journal_path)?;
    let audit = match &config.audit_path {
        Some(path) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let state = Arc::new(ServerState {
        store: RwLock::new(store),
        threshold: config.threshold,
        params: config.params,
        audit,
    });

    let listener = TcpListener::bind(("127.0.0.1", config.port))?;
    listener.set_nonblocking(true)?;
    let port = listener.local_addr()?.port();
    let shutdown = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));

    let join = {
        let shutdown = Arc::clone(&shutdown);
        let connections = Arc::clone(&connections);
        let state = Arc::clone(&state);
        std::thread::spawn(move || {
            let mut workers: Vec<std::thread::JoinHandle<()>> = Vec::new();
            while !shutdown.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _addr)) => {
                        if let (Ok(clone), Ok(mut conns)) =
                            (stream.try_clone(), connections.lock())
                        {
                            conns.push(clone);
                        }
                        let state = Arc::clone(&state);
                        workers.push(std::thread::spawn(move || {
                            let _ = handle_connection(stream, &state);
                        }));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
            for w in workers {
                let _ = w.join();
            }
        })
    };

    Ok(ServerHandle { port, shutdown, connections, join: Some(join) })
}

fn handle_connection(stream: TcpStream, state: &ServerState) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(()); // client closed
        }
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => state.handle(request),
            Err(e) => Response::err(None, format!("malformed request: {e}")),
        };
        let mut text = serde_json::to_string(&response).expect("response serializes");
        text.push('\n');
        writer.write_all(text.as_bytes())?;
    }
}

/// Blocking line-oriented client.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Self, ServiceError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self { reader, writer: stream, next_id: 0 })
    }

    /// Send one raw line and read one response line (test hook; also handy
    /// for wire capture).
    pub fn roundtrip_raw(&mut self, line: &str) -> Result<String, ServiceError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        let mut response = String::new();
        self.reader.read_line(&mut response)?;
        Ok(response)
    }

    fn request(&mut self, mut request: Request) -> Result<Response, ServiceError> {
        self.next_id += 1;
        request.req_id = format!("r{}", self.next_id);
        let line = serde_json::to_string(&request)?;
        let raw = self.roundtrip_raw(&line)?;
        let response: Response = serde_json::from_str(&raw)
            .map_err(|e| ServiceError::Protocol(format!("bad response: {e}")))?;
        if response.req_id.as_deref() != Some(request.req_id.as_str()) {
            return Err(ServiceError::Protocol("response req_id mismatch".into()));
        }
        Ok(response)
    }

    pub fn ping(&mut self) -> Result<Response, ServiceError> {
        self.request(Request {
            req_id: String::new(),
            op: "PING".into(),
            user_id: None,
            key_id: None,
            template: None,
        })
    }

    pub fn enroll(
        &mut self,
        user_id: &str,
        template: ProtectedTemplate,
    ) -> Result<Response, ServiceError> {
        self.request(Request {
            req_id: String::new(),
            op: "ENROLL".into(),
            user_id: Some(user_id.to_string()),
            key_id: Some(template.key_id.clone()),
            template: Some(template),
        })
    }

    pub fn verify(
        &mut self,
        user_id: &str,
        template: ProtectedTemplate,
    ) -> Result<Response, ServiceError> {
        self.request(Request {
            req_id: String::new(),
            op: "VERIFY".into(),
            user_id: Some(user_id.to_string()),
            key_id: Some(template.key_id.clone()),
            template: Some(template),
        })
    }

    pub fn revoke(&mut self, user_id: &str, key_id: &str) -> Result<Response, ServiceError> {
        self.request(Request {
            req_id: String::new(),
            op: "REVOKE".into(),
            user_id: Some(user_id.to_string()),
            key_id: Some(key_id.to_string()),
            template: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(key_id: &str, fill: f64) -> ProtectedTemplate {
        ProtectedTemplate {
            version: TEMPLATE_VERSION,
            k: 10,
            t: 50,
            d: 4,
            key_id: key_id.to_string(),
            z_t: vec![fill, 0.5, -0.25, 1.0],
        }
    }

    fn start_server(dir: &std::path::Path, threshold: f64) -> ServerHandle {
        serve(ServerConfig {
            port: 0,
            threshold,
            params: TemplateParams { k: 10, t: 50, d: 4 },
            journal_path: dir.join("store.journal"),
            audit_path: Some(dir.join("audit.log")),
        })
        .unwrap()
    }

    #[test]
    fn enroll_verify_revoke_session() {
        let dir = tempfile::tempdir().unwrap();
        let server = start_server(dir.path(), 0.9);
        let mut client = Client::connect(&format!("127.0.0.1:{}", server.port)).unwrap();

        assert!(client.ping().unwrap().ok);

        let t = template("aabb", 0.7);
        assert!(client.enroll("alice", t.clone()).unwrap().ok);

        // Duplicate enrollment rejected.
        let dup = client.enroll("alice", t.clone()).unwrap();
        assert!(!dup.ok);
        assert!(dup.error.unwrap().contains("already enrolled"));

        // Query with the identical template: similarity 1, Match.
        let v = client.verify("alice", t.clone()).unwrap();
        assert!(v.ok);
        assert_eq!(v.decision.as_deref(), Some("match"));
        assert!((v.similarity.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(v.threshold, Some(0.9));

        // Unknown user.
        let unknown = client.verify("bob", t.clone()).unwrap();
        assert!(!unknown.ok);
        assert!(unknown.error.unwrap().contains("not enrolled"));

        // Parameter mismatch (wrong d).
        let mut bad = template("ccdd", 0.2);
        bad.d = 32;
        bad.z_t = vec![0.0; 32];
        let mismatch = client.enroll("carol", bad).unwrap();
        assert!(!mismatch.ok);
        assert!(mismatch.error.unwrap().contains("parameter mismatch"));

        // Revoke, then verify fails.
        assert!(client.revoke("alice", "aabb").unwrap().ok);
        let gone = client.verify("alice", t).unwrap();
        assert!(!gone.ok);

        // Revoking a missing record errors.
        assert!(!client.revoke("alice", "aabb").unwrap().ok);
        server.shutdown();
    }

    #[test]
    fn malformed_and_unknown_requests() {
        let dir = tempfile::tempdir().unwrap();
        let server = start_server(dir.path(), 0.5);
        let mut client = Client::connect(&format!("127.0.0.1:{}", server.port)).unwrap();

        let raw = client.roundtrip_raw("this is not json").unwrap();
        let response: Response = serde_json::from_str(&raw).unwrap();
        assert!(!response.ok);

        let raw = client
            .roundtrip_raw(r#"{"req_id":"x","op":"DANCE"}"#)
            .unwrap();
        let response: Response = serde_json::from_str(&raw).unwrap();
        assert!(!response.ok);
        assert!(response.error.unwrap().contains("unknown op"));

        // Unknown fields are ignored.
        let raw = client
            .roundtrip_raw(r#"{"req_id":"y","op":"PING","flavor":"vanilla"}"#)
            .unwrap();
        let response: Response = serde_json::from_str(&raw).unwrap();
        assert!(response.ok);
        server.shutdown();
    }

    #[test]
    fn store_survives_server_restart() {
        let dir = tempfile::tempdir().unwrap();
        let addr;
        {
            let server = start_server(dir.path(), 0.9);
            addr = format!("127.0.0.1:{}", server.port);
            let mut client = Client::connect(&addr).unwrap();
            client.enroll("alice", template("aabb", 0.7)).unwrap();
            server.shutdown();
        }
        let server = start_server(dir.path(), 0.9);
        let mut client = Client::connect(&format!("127.0.0.1:{}", server.port)).unwrap();
        let v = client.verify("alice", template("aabb", 0.7)).unwrap();
        assert!(v.ok);
        assert_eq!(v.decision.as_deref(), Some("match"));
        server.shutdown();
    }

    #[test]
    fn concurrent_verifies_match_serial() {
        let dir = tempfile::tempdir().unwrap();
        let server = start_server(dir.path(), 0.5);
        let addr = format!("127.0.0.1:{}", server.port);
        let mut client = Client::connect(&addr).unwrap();
        for i in 0..6 {
            let mut t = template(&format!("k{i:03x}"), 0.1 * i as f64);
            t.key_id = format!("k{i:03x}");
            client.enroll(&format!("user{i}"), t).unwrap();
        }

        let serial: Vec<(bool, Option<f64>)> = (0..6)
            .map(|i| {
                let mut t = template(&format!("k{i:03x}"), 0.35);
                t.key_id = format!("k{i:03x}");
                let r = client.verify(&format!("user{i}"), t).unwrap();
                (r.ok, r.similarity)
            })
            .collect();

        let handles: Vec<_> = (0..6)
            .map(|i| {
                let addr = addr.clone();
                std::thread::spawn(move || {
                    let mut c = Client::connect(&addr).unwrap();
                    let mut t = template(&format!("k{i:03x}"), 0.35);
                    t.key_id = format!("k{i:03x}");
                    let r = c.verify(&format!("user{i}"), t).unwrap();
                    (r.ok, r.similarity)
                })
            })
            .collect();
        let concurrent: Vec<(bool, Option<f64>)> =
            handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(serial, concurrent);
        server.shutdown();
    }
}
