//! Blocking client for the gsgn enhancement service.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

pub const METADATA_HEADER: &str = "x-gsgn-metadata";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Style to request: a task name or one weight per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Style {
    Name(String),
    Weights(Vec<f32>),
}

impl Style {
    /// A task name, or comma-separated weights.
    pub fn parse(spec: &str) -> Self {
        let spec = spec.trim();
        match spec.split(',').map(|s| s.trim().parse::<f32>()).collect::<std::result::Result<Vec<_>, _>>() {
            Ok(w) => Style::Weights(w),
            Err(_) => Style::Name(spec.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct StyleEntry {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub checkpoint_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct StyleUsed {
    pub name: Option<String>,
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct OutputMetrics {
    pub psnr_db: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct EnhanceMetadata {
    pub model_id: String,
    pub checkpoint_hash: String,
    pub style: StyleUsed,
    pub width: usize,
    pub height: usize,
    pub inference_ms: f64,
    #[serde(default)]
    pub metrics: Option<OutputMetrics>,
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    pub png: Vec<u8>,
    pub metadata: EnhanceMetadata,
}

#[derive(Serialize)]
struct EnhanceBody<'a> {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    style: Option<&'a Style>,
    return_metrics: bool,
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    /// `base` such as `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(300)).build()?;
        Ok(Self { base: base.into().trim_end_matches('/').to_string(), http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub fn health(&self) -> Result<Health> {
        let resp = self.http.get(self.url("/healthz")).send()?;
        let status = resp.status();
        let health: Health = resp.json()?;
        if !status.is_success() {
            return Err(ClientError::Status { status: status.as_u16(), message: health.status });
        }
        Ok(health)
    }

    pub fn styles(&self) -> Result<Vec<StyleEntry>> {
        Ok(check(self.http.get(self.url("/v1/styles")).send()?)?.json()?)
    }

    /// Sends PNG bytes as a JSON body.
    pub fn enhance(&self, png: &[u8], style: Option<&Style>, return_metrics: bool) -> Result<Enhanced> {
        let body = EnhanceBody { image: base64::engine::general_purpose::STANDARD.encode(png), style, return_metrics };
        let resp = check(self.http.post(self.url("/v1/enhance")).json(&body).send()?)?;
        let metadata = resp
            .headers()
            .get(METADATA_HEADER)
            .ok_or_else(|| ClientError::Decode("missing metadata header".into()))?
            .to_str()
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        let metadata: EnhanceMetadata = serde_json::from_str(metadata).map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok(Enhanced { png: resp.bytes()?.to_vec(), metadata })
    }
}

fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().unwrap_or_default();
    let message = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or(text);
    Err(ClientError::Status { status: status.as_u16(), message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_parsing() {
        assert_eq!(Style::parse("warm"), Style::Name("warm".into()));
        assert_eq!(Style::parse("0.5, 0.5,0"), Style::Weights(vec![0.5, 0.5, 0.0]));
        assert_eq!(serde_json::to_string(&Style::Weights(vec![1.0])).unwrap(), "[1.0]");
        assert_eq!(serde_json::to_string(&Style::Name("a".into())).unwrap(), "\"a\"");
    }

    #[test]
    fn unreachable_service_is_a_transport_error() {
        let c = Client::new("http://127.0.0.1:9/").unwrap();
        assert!(matches!(c.health(), Err(ClientError::Transport(_))));
    }
}
