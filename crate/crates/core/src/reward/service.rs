//! HTTP front end for external trainers.
//!
//! * `POST /reward`: `{question_id, generated_input_b64}`, scored against a
//!   loaded dataset.
//! * `POST /reward_raw`: `{branch, original_input_b64, generated_input_b64}`.
//! * `GET /health`: `ok`.
//!
//! Responses are a serialized [`RewardOutcome`](super::RewardOutcome).
//! Executions are bounded by a pool of `pool_size` permits.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{reward, RewardOutcome};
use crate::coverage::UncoveredBranch;
use crate::dataset::{BranchRecord, DatasetRecord};
use crate::error::RewardError;
use crate::targets::TargetAdapter;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardRequest {
    pub question_id: String,
    pub generated_input_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRewardRequest {
    pub branch: BranchRecord,
    pub original_input_b64: String,
    pub generated_input_b64: String,
}

pub type RewardResponse = RewardOutcome;

struct Question {
    branch: UncoveredBranch,
    original: Vec<u8>,
}

struct Inner {
    target: Arc<dyn TargetAdapter>,
    questions: HashMap<String, Question>,
    permits: Semaphore,
    time_limit: Duration,
}

#[derive(Clone)]
pub struct RewardService {
    inner: Arc<Inner>,
}

struct ApiError(StatusCode, String);

impl From<RewardError> for ApiError {
    fn from(e: RewardError) -> Self {
        let status = match &e {
            RewardError::UnknownQuestion(_) => StatusCode::NOT_FOUND,
            RewardError::BadRequest(_) => StatusCode::BAD_REQUEST,
            RewardError::Target(_) => StatusCode::SERVICE_UNAVAILABLE,
            RewardError::EmptyOriginalTrace | RewardError::InconsistentOriginal(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn decode(field: &str, text: &str) -> Result<Vec<u8>, RewardError> {
    crate::b64_decode(text).map_err(|e| RewardError::BadRequest(format!("{field}: {e}")))
}

impl RewardService {
    pub fn new(
        target: Arc<dyn TargetAdapter>,
        records: &[DatasetRecord],
        pool_size: usize,
        time_limit: Duration,
    ) -> RewardService {
        let questions = records
            .iter()
            .map(|r| {
                let q = Question {
                    branch: r.question.branch.clone(),
                    original: r.question.original_input.clone(),
                };
                (r.question.id.clone(), q)
            })
            .collect();
        RewardService {
            inner: Arc::new(Inner {
                target,
                questions,
                permits: Semaphore::new(pool_size.max(1)),
                time_limit,
            }),
        }
    }

    pub fn question_count(&self) -> usize {
        self.inner.questions.len()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/health", get(|| async { "ok" }))
            .route("/reward", post(reward_by_id))
            .route("/reward_raw", post(reward_raw))
            .with_state(self.clone())
    }

    async fn score(&self, branch: UncoveredBranch, x: Vec<u8>, y: Vec<u8>) -> Result<RewardOutcome, RewardError> {
        let _permit = self.inner.permits.acquire().await.expect("semaphore never closed");
        let inner = self.inner.clone();
        tokio::task::spawn_blocking(move || {
            let fx = inner.target.execute(&x, inner.time_limit)?;
            let fy = inner.target.execute(&y, inner.time_limit)?;
            reward(&branch, &fx, &fy, &x, &y)
        })
        .await
        .map_err(|e| RewardError::BadRequest(format!("worker failed: {e}")))?
    }

    /// Binds `addr` on a fresh multi-threaded runtime.
    pub fn bind(self, addr: &str) -> std::io::Result<BoundService> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        Ok(BoundService {
            runtime,
            listener,
            service: self,
        })
    }
}

async fn reward_by_id(
    State(svc): State<RewardService>,
    Json(req): Json<RewardRequest>,
) -> Result<Json<RewardOutcome>, ApiError> {
    let q = svc
        .inner
        .questions
        .get(&req.question_id)
        .ok_or_else(|| RewardError::UnknownQuestion(req.question_id.clone()))?;
    let y = decode("generated_input_b64", &req.generated_input_b64)?;
    let (branch, x) = (q.branch.clone(), q.original.clone());
    Ok(Json(svc.score(branch, x, y).await?))
}

async fn reward_raw(
    State(svc): State<RewardService>,
    Json(req): Json<RawRewardRequest>,
) -> Result<Json<RewardOutcome>, ApiError> {
    let branch = req.branch.to_branch().map_err(RewardError::BadRequest)?;
    let x = decode("original_input_b64", &req.original_input_b64)?;
    let y = decode("generated_input_b64", &req.generated_input_b64)?;
    Ok(Json(svc.score(branch, x, y).await?))
}

pub struct BoundService {
    runtime: tokio::runtime::Runtime,
    listener: tokio::net::TcpListener,
    service: RewardService,
}

impl BoundService {
    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves. The future runs on the service's
    /// runtime, so tokio-based signal handlers work.
    pub fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let BoundService {
            runtime,
            listener,
            service,
        } = self;
        runtime.block_on(async move {
            axum::serve(listener, service.router())
                .with_graceful_shutdown(shutdown)
                .await
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{construct_dataset, DatasetOptions};
    use crate::targets::{builtin_target, DEFAULT_TIME_LIMIT};

    struct Running {
        base: String,
        stop: Option<tokio::sync::oneshot::Sender<()>>,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl Drop for Running {
        fn drop(&mut self) {
            if let Some(stop) = self.stop.take() {
                let _ = stop.send(());
            }
            if let Some(h) = self.handle.take() {
                h.join().unwrap();
            }
        }
    }

    fn start() -> (Running, Vec<DatasetRecord>) {
        let t = builtin_target("mini-calc").unwrap();
        let seeds: Vec<Vec<u8>> = ["print 6/2;", "print 6/0;", "1+2;"].iter().map(|s| s.as_bytes().to_vec()).collect();
        let records = construct_dataset(t.as_ref(), &seeds, &DatasetOptions::default()).unwrap();
        let bound = RewardService::new(t, &records, 2, DEFAULT_TIME_LIMIT)
            .bind("127.0.0.1:0")
            .unwrap();
        let base = format!("http://{}", bound.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let handle = std::thread::spawn(move || {
            bound
                .run(async {
                    let _ = rx.await;
                })
                .unwrap()
        });
        (
            Running {
                base,
                stop: Some(tx),
                handle: Some(handle),
            },
            records,
        )
    }

    fn post(url: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
        let resp = reqwest::blocking::Client::new().post(url).json(&body).send().unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().unwrap())
    }

    #[test]
    fn endpoints() {
        let (srv, records) = start();
        let health = reqwest::blocking::get(format!("{}/health", srv.base)).unwrap().text().unwrap();
        assert_eq!(health, "ok");

        let r = records
            .iter()
            .find(|r| r.question.branch.site.condition_text == "rhs == 0" && r.question.branch.desired)
            .expect("division-guard question");
        let url = format!("{}/reward", srv.base);
        let (code, body) = post(
            &url,
            serde_json::json!({"question_id": r.question.id,
                               "generated_input_b64": crate::b64_encode(&r.question.original_input)}),
        );
        assert_eq!(code, 200);
        assert_eq!(body["case"], "identical_input");
        assert_eq!(body["score"], 0.1);

        let (code, body) = post(
            &url,
            serde_json::json!({"question_id": r.question.id,
                               "generated_input_b64": crate::b64_encode(b"print 9/0;")}),
        );
        assert_eq!(code, 200);
        assert_eq!(body["case"], "inverted");
        assert_eq!(body["score"], 2.0);

        let (code, _) = post(&url, serde_json::json!({"question_id": "nope", "generated_input_b64": ""}));
        assert_eq!(code, 404);
        let (code, _) = post(&url, serde_json::json!({"question_id": r.question.id, "generated_input_b64": "%%"}));
        assert_eq!(code, 400);

        let (code, body) = post(
            &format!("{}/reward_raw", srv.base),
            serde_json::json!({
                "branch": BranchRecord::from_branch(&r.question.branch),
                "original_input_b64": crate::b64_encode(&r.question.original_input),
                "generated_input_b64": crate::b64_encode(b"print 1%0;"),
            }),
        );
        assert_eq!(code, 200);
        assert_eq!(body["case"], "inverted");
    }
}
