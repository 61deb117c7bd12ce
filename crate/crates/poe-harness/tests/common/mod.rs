//! Shared integration-test helpers: a deterministic completions server
//! speaking the harness wire protocol.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use sha2::{Digest, Sha256};

/// Uniform (0, 1) value derived from the parts; stable across runs.
pub fn hash01(parts: &[&str]) -> f64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let x = u64::from_le_bytes(bytes) >> 11;
    (x as f64 + 0.5) / (1u64 << 53) as f64
}

/// Splits text into tokens starting at position 0 and at every space, the
/// space belonging to the following token (" word"). ASCII prompts only.
fn tokenize_offsets(text: &str) -> Vec<(usize, String)> {
    let bytes = text.as_bytes();
    let mut starts = vec![0usize];
    for (i, b) in bytes.iter().enumerate() {
        if *b == b' ' && i != 0 {
            starts.push(i);
        }
    }
    let mut out = Vec::new();
    for (j, &start) in starts.iter().enumerate() {
        let end = starts.get(j + 1).copied().unwrap_or(bytes.len());
        if start < end {
            out.push((start, text[start..end].to_string()));
        }
    }
    out
}

#[derive(Clone)]
struct ServerState {
    hits: Arc<AtomicU32>,
    failures_left: Arc<AtomicU32>,
}

async fn completions(
    State(state): State<ServerState>,
    Json(body): Json<serde_json::Value>,
) -> (StatusCode, Json<serde_json::Value>) {
    state.hits.fetch_add(1, Ordering::SeqCst);
    if state
        .failures_left
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(serde_json::json!({"error": "scripted transient failure"})),
        );
    }

    let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
    let echo = body["echo"].as_bool().unwrap_or(false);
    let max_tokens = body["max_tokens"].as_u64().unwrap_or(0);
    let logprobs = body["logprobs"].as_u64().unwrap_or(0);

    let response = if echo {
        // Echo-scoring: per-token logprobs over the whole prompt.
        let tokens = tokenize_offsets(&prompt);
        let mut token_strs = Vec::new();
        let mut token_logprobs = Vec::new();
        let mut text_offset = Vec::new();
        for (index, (offset, token)) in tokens.iter().enumerate() {
            text_offset.push(offset);
            token_strs.push(token.clone());
            if index == 0 {
                token_logprobs.push(serde_json::Value::Null);
            } else {
                let lp = -(hash01(&["echo", token, &index.to_string()]) * 2.0 + 0.05);
                token_logprobs.push(serde_json::json!(lp));
            }
        }
        serde_json::json!({
            "choices": [{
                "text": prompt,
                "logprobs": {
                    "tokens": token_strs,
                    "token_logprobs": token_logprobs,
                    "top_logprobs": token_strs.iter().map(|_| serde_json::Value::Null).collect::<Vec<_>>(),
                    "text_offset": text_offset,
                }
            }]
        })
    } else if max_tokens == 1 && logprobs > 0 {
        // ID scoring: top-k over the label tokens at the answer slot.
        let mut top = serde_json::Map::new();
        let mut best = (" A".to_string(), f64::NEG_INFINITY);
        for letter in b'A'..=b'J' {
            let token = format!(" {}", letter as char);
            let lp = -(hash01(&["ids", &prompt, &token]) * 4.0 + 0.05);
            if lp > best.1 {
                best = (token.clone(), lp);
            }
            top.insert(token, serde_json::json!(lp));
        }
        serde_json::json!({
            "choices": [{
                "text": best.0,
                "logprobs": {
                    "tokens": [best.0],
                    "token_logprobs": [best.1],
                    "top_logprobs": [top],
                    "text_offset": [prompt.len()],
                }
            }]
        })
    } else {
        // Generation: pick the strongest label letter for the prompt.
        let mut best = ('A', f64::NEG_INFINITY);
        for letter in b'A'..=b'J' {
            let token = format!(" {}", letter as char);
            let lp = -(hash01(&["ids", prompt.trim_end_matches(' '), &token]) * 4.0 + 0.05);
            if lp > best.1 {
                best = (letter as char, lp);
            }
        }
        serde_json::json!({
            "choices": [{"text": best.0.to_string()}]
        })
    };
    (StatusCode::OK, Json(response))
}

pub struct ScriptedServer {
    pub base_url: String,
    pub hits: Arc<AtomicU32>,
}

impl ScriptedServer {
    pub fn hit_count(&self) -> u32 {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Spawns the completions server on an ephemeral port; the first
/// `fail_first` requests answer 500 to exercise retry paths.
pub fn spawn_server(fail_first: u32) -> ScriptedServer {
    let hits = Arc::new(AtomicU32::new(0));
    let state = ServerState {
        hits: hits.clone(),
        failures_left: Arc::new(AtomicU32::new(fail_first)),
    };
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_io()
            .build()
            .expect("tokio runtime");
        runtime.block_on(async move {
            let app = Router::new().route("/v1/completions", post(completions)).with_state(state);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
            tx.send(listener.local_addr().expect("local addr")).expect("send addr");
            axum::serve(listener, app).await.expect("serve");
        });
    });
    let addr = rx.recv().expect("server address");
    ScriptedServer { base_url: format!("http://{addr}"), hits }
}
