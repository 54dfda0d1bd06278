use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionParams, ModelClient};
use crate::error::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_in_flight() -> usize {
    1
}

/// Client for an OpenAI-style chat-completions endpoint.
pub struct HttpClient {
    config: HttpClientConfig,
    http: reqwest::blocking::Client,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    n: usize,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self, ModelError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ModelError::Unreachable(e.to_string()))?;
        Ok(HttpClient {
            config,
            http,
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
        })
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.config.max_in_flight.max(1) {
            n = self.slot_freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.slot_freed.notify_one();
    }

    fn request(&self, prompt: &str, params: &CompletionParams, n: usize) -> Result<Vec<String>, ModelError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n,
        };
        let mut req = self.http.post(&url).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        self.acquire();
        let sent = req.send();
        self.release();
        let resp = sent.map_err(|e| ModelError::Unreachable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ModelError::Unreachable(e.to_string()))?;
        if status.is_server_error() {
            return Err(ModelError::Unreachable(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(ModelError::MalformedResponse(format!("{status}: {text}")));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ModelError::MalformedResponse(e.to_string()))?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

impl ModelClient for HttpClient {
    fn name(&self) -> &str {
        &self.config.model
    }

    /// Asks for `attempts` choices at once; endpoints that return fewer are
    /// asked again for the rest.
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Vec<String>, ModelError> {
        let mut out = Vec::with_capacity(params.attempts);
        for _ in 0..params.attempts {
            if out.len() >= params.attempts {
                break;
            }
            let got = self.request(prompt, params, params.attempts - out.len())?;
            if got.is_empty() {
                return Err(ModelError::MalformedResponse("response has no choices".into()));
            }
            out.extend(got);
        }
        out.truncate(params.attempts);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::routing::post;
    use axum::{Json, Router};

    /// Serves `router` on an ephemeral port for the life of the test process.
    fn serve(router: Router) -> String {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || rt.block_on(async { axum::serve(listener, router).await.unwrap() }));
        format!("http://{addr}")
    }

    fn client(base_url: String) -> HttpClient {
        HttpClient::new(HttpClientConfig {
            base_url,
            model: "m".into(),
            api_key: Some("k".into()),
            timeout_secs: 10,
            max_in_flight: 1,
        })
        .unwrap()
    }

    #[test]
    fn healthy_endpoint_fills_attempts() {
        // Returns at most two choices per call, echoing the prompt.
        let router = Router::new().route(
            "/v1/chat/completions",
            post(|Json(body): Json<serde_json::Value>| async move {
                let n = body["n"].as_u64().unwrap().min(2);
                let content = body["messages"][0]["content"].clone();
                let choices: Vec<_> = (0..n).map(|_| serde_json::json!({"message": {"content": content}})).collect();
                Json(serde_json::json!({ "choices": choices }))
            }),
        );
        let c = client(format!("{}/v1", serve(router)));
        let out = c.complete("hi", &CompletionParams::default()).unwrap();
        assert_eq!(out, vec!["hi"; 5]);
    }

    #[test]
    fn failures_are_classified() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let c = client(format!("http://127.0.0.1:{port}"));
        assert!(matches!(c.complete("hi", &CompletionParams::default()), Err(ModelError::Unreachable(_))));

        let router = Router::new().route("/chat/completions", post(|| async { "not json" }));
        let c = client(serve(router));
        assert!(matches!(
            c.complete("hi", &CompletionParams::default()),
            Err(ModelError::MalformedResponse(_))
        ));
    }
}
