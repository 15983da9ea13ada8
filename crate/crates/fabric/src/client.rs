//! Async client for the coordinator's HTTP API.

use std::time::Duration;

use fabric_core::{EndpointId, FunctionId, FunctionRecord, TaskId};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::service::api::{
    BatchRequest, BatchResponse, EndpointView, ErrorBody, RegisterEndpointRequest, RegisterEndpointResponse,
    RegisterFunctionRequest, RegisterFunctionResponse, ResultResponse, StatusRequest, StatusResponse, SubmitRequest,
    SubmitResponse, TaskView,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    /// A non-200 answer. `202` with code `not_ready` means the task has not
    /// finished yet.
    #[error("{status} {}: {}", body.error, body.message)]
    Api { status: u16, body: ErrorBody },
}

impl ClientError {
    /// The stable error code of an API error.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            ClientError::Http(_) => None,
        }
    }

    pub fn is_not_ready(&self) -> bool {
        self.code() == Some("not_ready")
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    token: String,
}

impl Client {
    /// `base` is the coordinator URL, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str, token: &str) -> Client {
        let http = reqwest::Client::builder()
            .pool_idle_timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        Client {
            http,
            base: base.trim_end_matches('/').to_string(),
            token: token.to_string(),
        }
    }

    pub fn with_token(&self, token: &str) -> Client {
        Client {
            http: self.http.clone(),
            base: self.base.clone(),
            token: token.to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn decode<R: DeserializeOwned>(resp: reqwest::Response) -> Result<R, ClientError> {
        let status = resp.status().as_u16();
        if status == 200 {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody {
            error: "http".into(),
            message: text,
            state: None,
            task_error: None,
        });
        Err(ClientError::Api { status, body })
    }

    async fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, ClientError> {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await?;
        Self::decode(resp).await
    }

    async fn post<B: Serialize + ?Sized, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ClientError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .json(body)
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        self.get::<serde_json::Value>("/api/health").await.map(|_| ())
    }

    pub async fn register_function(&self, req: &RegisterFunctionRequest) -> Result<RegisterFunctionResponse, ClientError> {
        self.post("/api/functions", req).await
    }

    pub async fn get_function(&self, id: FunctionId) -> Result<FunctionRecord, ClientError> {
        self.get(&format!("/api/functions/{id}")).await
    }

    pub async fn register_endpoint(&self, req: &RegisterEndpointRequest) -> Result<RegisterEndpointResponse, ClientError> {
        self.post("/api/endpoints", req).await
    }

    pub async fn get_endpoint(&self, id: EndpointId) -> Result<EndpointView, ClientError> {
        self.get(&format!("/api/endpoints/{id}")).await
    }

    /// Deletes an endpoint; returns how many unfinished tasks were aborted.
    pub async fn delete_endpoint(&self, id: EndpointId) -> Result<u64, ClientError> {
        let resp = self
            .http
            .delete(format!("{}/api/endpoints/{id}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await?;
        let v: serde_json::Value = Self::decode(resp).await?;
        Ok(v["aborted"].as_u64().unwrap_or(0))
    }

    pub async fn submit(&self, req: &SubmitRequest) -> Result<SubmitResponse, ClientError> {
        self.post("/api/tasks", req).await
    }

    pub async fn submit_batch(&self, req: &BatchRequest) -> Result<BatchResponse, ClientError> {
        self.post("/api/batches", req).await
    }

    pub async fn status(&self, id: TaskId) -> Result<TaskView, ClientError> {
        self.get(&format!("/api/tasks/{id}")).await
    }

    pub async fn status_many(&self, req: &StatusRequest) -> Result<StatusResponse, ClientError> {
        self.post("/api/tasks/status", req).await
    }

    /// Fetches a result, waiting server-side up to `wait` for it.
    pub async fn result(&self, id: TaskId, wait: Duration) -> Result<ResultResponse, ClientError> {
        self.get(&format!("/api/tasks/{id}/result?wait_ms={}", wait.as_millis()))
            .await
    }
}
