//! Async client for the ghost-text completion service.

use std::time::Duration;

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use mac_core::api::{
    AcceptRequest, AcceptResponse, CompleteRequest, CompleteResponse, ErrorBody, RateRequest, RateResponse,
    SessionResponse, StudyReport,
};

#[derive(Debug, Error)]
pub enum ClientError {
    /// The service answered with an error status.
    #[error("{status}: {message}")]
    Status { status: StatusCode, message: String },
    #[error(transparent)]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        Client::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(Client {
            base: base_url.into().trim_end_matches('/').to_owned(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn read<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Client::read(resp).await
    }

    pub async fn start_session(&self) -> Result<SessionResponse> {
        let resp = self.http.post(format!("{}/session", self.base)).send().await?;
        Client::read(resp).await
    }

    pub async fn complete(&self, session_id: &str, typed: &str) -> Result<CompleteResponse> {
        self.post(
            "/complete",
            &CompleteRequest {
                session_id: session_id.to_owned(),
                typed: typed.to_owned(),
            },
        )
        .await
    }

    pub async fn accept(&self, session_id: &str, n_chars: usize) -> Result<AcceptResponse> {
        self.post(
            "/accept",
            &AcceptRequest {
                session_id: session_id.to_owned(),
                n_chars,
            },
        )
        .await
    }

    pub async fn rate(&self, session_id: &str, rating: i64) -> Result<RateResponse> {
        self.post(
            "/rate",
            &RateRequest {
                session_id: session_id.to_owned(),
                rating,
            },
        )
        .await
    }

    pub async fn report(&self) -> Result<StudyReport> {
        let resp = self.http.get(format!("{}/report", self.base)).send().await?;
        Client::read(resp).await
    }
}
