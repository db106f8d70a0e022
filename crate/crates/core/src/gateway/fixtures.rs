//! On-disk fixtures: one `<digest>.json` per request.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{request_digest, BackendReply, ChatMessage, ChatRequest, ChatResponse, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub provider_name: String,
    pub model_id: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    /// Full provider response body.
    #[serde(default)]
    pub raw: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub request: RecordedRequest,
    /// User-message text as sent, for reading the fixture without decoding
    /// `request.messages`.
    pub prompt: String,
    pub response: RecordedResponse,
    pub recorded_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSummary {
    pub digest: String,
    pub model_id: String,
    pub recorded_at: String,
    pub prompt_preview: String,
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    /// Writes the fixture through a temp file and rename, so concurrent
    /// writers of distinct digests never see partial files.
    pub fn record(&self, request: &ChatRequest, reply: &BackendReply) -> Result<PathBuf, GatewayError> {
        let fixture_err = |e: std::io::Error| GatewayError::Fixture(e.to_string());
        std::fs::create_dir_all(&self.dir).map_err(fixture_err)?;
        let entry = FixtureEntry {
            request: RecordedRequest {
                provider_name: request.config.provider_name.clone(),
                model_id: request.config.model_id.clone(),
                temperature: request.config.temperature,
                messages: request.messages.clone(),
            },
            prompt: request
                .messages
                .iter()
                .filter(|m| m.role == super::Role::User)
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n\n"),
            response: RecordedResponse {
                content: reply.response.content.clone(),
                prompt_tokens: reply.response.prompt_tokens,
                completion_tokens: reply.response.completion_tokens,
                latency_ms: reply.response.latency_ms,
                raw: reply.raw.clone(),
            },
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let path = self.path_for(&request_digest(request));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(fixture_err)?;
        let mut json = serde_json::to_string_pretty(&entry).expect("fixture serializes");
        json.push('\n');
        tmp.write_all(json.as_bytes()).map_err(fixture_err)?;
        tmp.persist(&path).map_err(|e| fixture_err(e.error))?;
        Ok(path)
    }

    pub fn load(&self, digest: &str) -> Result<FixtureEntry, GatewayError> {
        let path = self.path_for(digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::NotRecorded { digest: digest.to_string() });
            }
            Err(e) => return Err(GatewayError::Fixture(format!("{}: {e}", path.display()))),
        };
        serde_json::from_str(&text).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn replay(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request_digest(request);
        let entry = self.load(&digest)?;
        if entry.request.messages != request.messages || entry.request.model_id != request.config.model_id {
            return Err(GatewayError::Fixture(format!("fixture {digest} does not match its request")));
        }
        Ok(ChatResponse {
            content: entry.response.content,
            prompt_tokens: entry.response.prompt_tokens,
            completion_tokens: entry.response.completion_tokens,
            latency_ms: entry.response.latency_ms,
            from_cache: true,
        })
    }

    /// All fixtures in the directory, ordered by digest.
    pub fn list(&self) -> Result<Vec<FixtureSummary>, GatewayError> {
        let read = match std::fs::read_dir(&self.dir) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::Fixture(e.to_string())),
        };
        let mut out = Vec::new();
        for item in read {
            let path = item.map_err(|e| GatewayError::Fixture(e.to_string()))?.path();
            let Some(digest) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".json"))
                .filter(|d| d.len() == 64 && d.bytes().all(|b| b.is_ascii_hexdigit()))
            else {
                continue;
            };
            let entry = self.load(digest)?;
            out.push(FixtureSummary {
                digest: digest.to_string(),
                model_id: entry.request.model_id,
                recorded_at: entry.recorded_at,
                prompt_preview: entry.prompt.chars().take(60).collect::<String>().replace('\n', " "),
            });
        }
        out.sort_by(|a, b| a.digest.cmp(&b.digest));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, ProviderConfig};

    fn reply(content: &str) -> BackendReply {
        BackendReply {
            response: ChatResponse {
                content: content.into(),
                prompt_tokens: 10,
                completion_tokens: 20,
                latency_ms: 30,
                from_cache: false,
            },
            raw: serde_json::json!({"id": "x"}),
        }
    }

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new(ProviderConfig::gemini("gemini-pro"), vec![ChatMessage::user(text)]).unwrap()
    }

    #[test]
    fn record_then_replay_is_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let content = "| Tensile Strength | 920 MPa |\n\u{3bc}m ± \"quoted\"";
        store.record(&req("a"), &reply(content)).unwrap();
        let back = store.replay(&req("a")).unwrap();
        assert_eq!(back.content.as_bytes(), content.as_bytes());
        assert!(back.from_cache);
        assert_eq!((back.prompt_tokens, back.completion_tokens, back.latency_ms), (10, 20, 30));
    }

    #[test]
    fn unknown_digest_is_not_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        assert!(matches!(store.replay(&req("zzz")), Err(GatewayError::NotRecorded { .. })));
    }

    #[test]
    fn list_reports_every_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        for q in ["one", "two", "three"] {
            store.record(&req(q), &reply(q)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let listed = store.list().unwrap();
        assert_eq!(listed.len(), 3);
        assert!(listed.windows(2).all(|w| w[0].digest < w[1].digest));
        for q in ["one", "two", "three"] {
            assert_eq!(store.replay(&req(q)).unwrap().content, q);
        }
    }

    #[test]
    fn fixture_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let path = store.record(&req("prompt text"), &reply("r")).unwrap();
        assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{}.json", request_digest(&req("prompt text"))));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!(v["request"]["messages"].is_array());
        assert_eq!(v["prompt"], "prompt text");
        assert_eq!(v["response"]["raw"]["id"], "x");
        assert!(v["recorded_at"].as_str().unwrap().ends_with('Z'));
    }
}
