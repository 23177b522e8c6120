use std::time::Duration;

use super::{Method, Transport, TransportError};

/// Posts wire bodies to `{base_url}/{method}`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Transport for HttpTransport {
    fn exchange(&self, method: Method, body: &str) -> Result<String, TransportError> {
        let url = format!("{}/{}", self.base_url, method.as_str());
        let response = self
            .client
            .post(&url)
            .header(reqwest::header::CONTENT_TYPE, "application/json; charset=utf-8")
            .body(body.to_string())
            .send()
            .map_err(|e| TransportError(format!("{url}: {e}")))?;
        let status = response.status();
        let text = response.text().map_err(|e| TransportError(format!("{url}: {e}")))?;
        // Error statuses still carry a protocol error body worth decoding.
        if !status.is_success() && !text.trim_start().starts_with('{') {
            return Err(TransportError(format!("{url}: HTTP {status}")));
        }
        Ok(text)
    }
}
