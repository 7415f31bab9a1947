//! Async client for the review API served by `recap serve-review`.

use std::time::Duration;

use recap_core::review::{ApiError, ItemView, QueuePage, QueueStats, VerdictAck, VerdictRequest};
use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid server url {0:?}")]
    BaseUrl(String),
    /// The item is unknown or already decided; `ApiError::item` holds its
    /// current state when known.
    #[error("conflict: {}", .0.message)]
    Conflict(Box<ApiError>),
    #[error("server answered {status}: {}", body.message)]
    Api { status: u16, body: Box<ApiError> },
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error(transparent)]
    Transport(#[from] reqwest::Error),
}

#[derive(Debug, Clone)]
pub struct ReviewClient {
    http: reqwest::Client,
    base: Url,
}

impl ReviewClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let base = Url::parse(base_url).map_err(|_| ClientError::BaseUrl(base_url.to_string()))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::BaseUrl(base_url.to_string()));
        }
        let http = reqwest::Client::builder().timeout(Duration::from_secs(30)).build()?;
        Ok(ReviewClient { http, base })
    }

    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut().expect("checked in new").pop_if_empty().extend(segments);
        url
    }

    pub async fn queue(&self, limit: usize) -> Result<QueuePage, ClientError> {
        let mut url = self.url(&["api", "queue"]);
        url.query_pairs_mut().append_pair("limit", &limit.to_string());
        decode(self.http.get(url).send().await?).await
    }

    pub async fn verdict(&self, verdict: &VerdictRequest) -> Result<VerdictAck, ClientError> {
        decode(self.http.post(self.url(&["api", "verdict"])).json(verdict).send().await?).await
    }

    pub async fn stats(&self) -> Result<QueueStats, ClientError> {
        decode(self.http.get(self.url(&["api", "stats"])).send().await?).await
    }

    pub async fn item(&self, id: &str) -> Result<ItemView, ClientError> {
        decode(self.http.get(self.url(&["api", "item", id])).send().await?).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await?;
    match serde_json::from_str::<ApiError>(&text) {
        Ok(body) if status == StatusCode::CONFLICT => Err(ClientError::Conflict(Box::new(body))),
        Ok(body) => Err(ClientError::Api { status: status.as_u16(), body: Box::new(body) }),
        Err(_) => Err(ClientError::Status { status: status.as_u16(), body: text }),
    }
}
