use std::fmt;
use std::time::Duration;

/// One POST to a provider endpoint.
#[derive(Clone)]
pub struct HttpCall {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

// Credentials travel in headers; keep them out of logs and panics.
impl fmt::Debug for HttpCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let headers: Vec<(&str, &str)> = self
            .headers
            .iter()
            .map(|(k, v)| {
                let secret = k.eq_ignore_ascii_case("authorization") || k.eq_ignore_ascii_case("x-goog-api-key");
                (k.as_str(), if secret { "<redacted>" } else { v.as_str() })
            })
            .collect();
        f.debug_struct("HttpCall")
            .field("url", &self.url)
            .field("headers", &headers)
            .field("body_len", &self.body.len())
            .field("timeout", &self.timeout)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

pub trait HttpTransport: Send + Sync {
    fn post(&self, call: &HttpCall) -> Result<HttpReply, TransportError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, delay: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, delay: Duration) {
        std::thread::sleep(delay);
    }
}

/// Delays before each retry: 1 s, doubling, `max_retries` entries.
pub fn backoff_schedule(max_retries: u32) -> Vec<Duration> {
    (0..max_retries)
        .map(|i| Duration::from_secs(1u64.checked_shl(i).unwrap_or(u64::MAX)))
        .collect()
}

/// Blocking transport over `ureq`. Non-2xx statuses are returned as replies,
/// not errors, so the caller decides what is retryable.
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post(&self, call: &HttpCall) -> Result<HttpReply, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(call.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(&call.url);
        for (k, v) in &call.headers {
            request = request.header(k.as_str(), v.as_str());
        }
        let mut response = request.send(call.body.as_str()).map_err(map_error)?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(map_error)?;
        Ok(HttpReply { status, body })
    }
}

fn map_error(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        other => TransportError::Other(other.to_string()),
    }
}
