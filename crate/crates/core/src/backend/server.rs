use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{self, *};
use super::{Backend, ModuleKind};
use crate::error::{Error, Result};

/// A running wire-protocol server; dropping the handle does not stop it,
/// call [`ServerHandle::shutdown`].
pub struct ServerHandle {
    server: Arc<Server>,
    thread: Option<JoinHandle<()>>,
    url: String,
}

impl ServerHandle {
    /// Base URL, e.g. `http://127.0.0.1:40123`.
    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn shutdown(mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves `backend` on `addr` (use port 0 for an ephemeral port).
/// Requests are handled one at a time on a background thread.
pub fn serve(backend: Arc<dyn Backend>, addr: &str) -> Result<ServerHandle> {
    let server = Server::http(addr).map_err(|e| Error::Backend(format!("bind {addr}: {e}")))?;
    let url = match server.server_addr().to_ip() {
        Some(a) => format!("http://{a}"),
        None => return Err(Error::Backend("server is not bound to an IP address".into())),
    };
    let server = Arc::new(server);
    let worker = Arc::clone(&server);
    let thread = std::thread::spawn(move || {
        for request in worker.incoming_requests() {
            handle(backend.as_ref(), request);
        }
    });
    Ok(ServerHandle {
        server,
        thread: Some(thread),
        url,
    })
}

fn json_response<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).unwrap_or_default();
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn read_body<T: DeserializeOwned>(request: &mut Request) -> Result<T> {
    let mut buf = String::new();
    request
        .as_reader()
        .read_to_string(&mut buf)
        .map_err(|e| Error::Backend(format!("reading request body: {e}")))?;
    serde_json::from_str(&buf).map_err(|e| Error::Backend(format!("bad request body: {e}")))
}

fn handle(backend: &dyn Backend, mut request: Request) {
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let method = request.method().clone();
    let result: Result<serde_json::Value> = match (method, path.as_str()) {
        (Method::Get, "/v1/meta") => backend.meta().and_then(|m| Ok(serde_json::to_value(m)?)),
        (Method::Post, "/v1/generate") => read_body::<GenerateRequest>(&mut request).and_then(|r| {
            if r.max_new_tokens == 0 {
                return Err(Error::Backend("max_new_tokens must be at least 1".into()));
            }
            let g = backend.generate_greedy(&r.prompt, r.max_new_tokens)?;
            let tokens = wire::tokens_to_wire(&g.text, &g.tokens);
            Ok(serde_json::to_value(GenerateResponse { text: g.text, tokens })?)
        }),
        (Method::Post, "/v1/score") => read_body::<ScoreRequest>(&mut request).and_then(|r| {
            let logprobs = backend.score_logprobs(&r.prompt, &r.continuations)?;
            Ok(serde_json::to_value(ScoreResponse { logprobs })?)
        }),
        (Method::Post, "/v1/activations") => {
            read_body::<ActivationsRequest>(&mut request).and_then(|r| {
                let modules = r
                    .modules
                    .iter()
                    .map(|m| m.parse::<ModuleKind>())
                    .collect::<Result<Vec<_>>>()?;
                let records = backend
                    .capture_activations(&r.prompt, &r.positions, &r.layers, &modules)?
                    .into_iter()
                    .map(wire::activation_to_wire)
                    .collect();
                Ok(serde_json::to_value(ActivationsResponse { records })?)
            })
        }
        (Method::Post, "/v1/tokenize") => read_body::<TokenizeRequest>(&mut request).and_then(|r| {
            let spans = backend.tokenize_with_offsets(&r.text)?;
            Ok(serde_json::to_value(TokenizeResponse {
                tokens: wire::tokens_to_wire(&r.text, &spans),
            })?)
        }),
        _ => {
            let _ = request.respond(json_response(
                404,
                &ErrorResponse {
                    error: format!("no route for {path}"),
                },
            ));
            return;
        }
    };
    let response = match result {
        Ok(v) => json_response(200, &v),
        Err(e) => json_response(400, &ErrorResponse { error: e.to_string() }),
    };
    let _ = request.respond(response);
}
