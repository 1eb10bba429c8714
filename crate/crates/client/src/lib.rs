//! Typed async client for the scfam service.

use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use scfam_api::*;

pub const SERVER_ENV: &str = "SCFAM_SERVER";
pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            let msg = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|e| e.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(anyhow!("server returned {status}: {msg}"));
        }
        serde_json::from_slice(&bytes).context("decoding response")
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let resp = self.http.post(&url).json(body).send().await.with_context(|| format!("POST {url}"))?;
        Self::decode(resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let resp = self.http.get(&url).send().await.with_context(|| format!("GET {url}"))?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn rf(&self, req: &RfRequest) -> Result<RfResponse> {
        self.post("/rf", req).await
    }

    pub async fn label(&self, req: &LabelRequest) -> Result<LabelResponse> {
        self.post("/label", req).await
    }

    pub async fn divergence(&self, req: &DivergenceRequest) -> Result<DivergenceResponse> {
        self.post("/divergence", req).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<SynthResponse> {
        self.post("/synth", req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<JobAccepted> {
        self.post("/train", req).await
    }

    pub async fn ablate(&self, req: &AblateRequest) -> Result<JobAccepted> {
        self.post("/ablate", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse> {
        self.post("/report", req).await
    }

    pub async fn job(&self, id: u64) -> Result<JobStatus> {
        self.get(&format!("/jobs/{id}")).await
    }

    /// Polls until the job finishes, calling `progress` on every poll.
    pub async fn wait(&self, id: u64, every: Duration, mut progress: impl FnMut(&JobStatus)) -> Result<JobStatus> {
        loop {
            let j = self.job(id).await?;
            progress(&j);
            if j.state.finished() {
                return Ok(j);
            }
            tokio::time::sleep(every).await;
        }
    }
}
