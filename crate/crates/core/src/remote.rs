//! Blocking JSON-over-HTTP client shared by the remote embedding provider and judge.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self { timeout_ms: 30_000, retries: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    retries: u32,
}

impl JsonClient {
    pub fn new(config: &HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { agent, retries: config.retries }
    }

    /// POSTs `body` and decodes the response, retrying transport failures and
    /// non-200 statuses. The error is the last failure's description.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, String> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.agent.post(url).send_json(body) {
                Ok(mut resp) if resp.status() == 200 => {
                    return resp
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| format!("{url}: malformed response: {e}"));
                }
                Ok(resp) => last = format!("{url}: HTTP {}", resp.status()),
                Err(e) => last = format!("{url}: {e}"),
            }
            log::debug!("attempt {} failed: {last}", attempt + 1);
        }
        Err(last)
    }
}
