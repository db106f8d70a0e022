//! Wire-format adapters for the two supported chat APIs.

use serde_json::{json, Value};

use super::{ChatRequest, GatewayError, HttpCall, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    /// `POST /v1/chat/completions` style: `messages`, `choices[0].message`.
    OpenAi,
    /// `models/<model>:generateContent` style: `contents`, `candidates[0]`.
    Gemini,
}

pub struct ParsedReply {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub raw: Value,
}

impl WireFormat {
    /// `gemini`/`google` select the Gemini schema; any other provider name is
    /// treated as OpenAI-compatible.
    pub fn for_provider(provider_name: &str) -> Self {
        let name = provider_name.to_ascii_lowercase();
        if name.contains("gemini") || name.contains("google") {
            WireFormat::Gemini
        } else {
            WireFormat::OpenAi
        }
    }

    pub fn build_call(self, request: &ChatRequest, api_key: &str) -> HttpCall {
        let config = &request.config;
        let url = config.endpoint_url.replace("{model}", &config.model_id);
        let timeout = std::time::Duration::from_secs(config.timeout_seconds);
        let (body, auth_header) = match self {
            WireFormat::OpenAi => {
                let messages: Vec<Value> = request
                    .messages
                    .iter()
                    .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
                    .collect();
                let body = json!({
                    "model": config.model_id,
                    "messages": messages,
                    "temperature": config.temperature,
                    "max_tokens": config.max_output_tokens,
                });
                (body, ("Authorization".to_string(), format!("Bearer {api_key}")))
            }
            WireFormat::Gemini => {
                let system: Vec<Value> = request
                    .messages
                    .iter()
                    .filter(|m| m.role == Role::System)
                    .map(|m| json!({"text": m.content}))
                    .collect();
                let contents: Vec<Value> = request
                    .messages
                    .iter()
                    .filter(|m| m.role == Role::User)
                    .map(|m| json!({"role": "user", "parts": [{"text": m.content}]}))
                    .collect();
                let mut body = json!({
                    "contents": contents,
                    "generationConfig": {
                        "temperature": config.temperature,
                        "maxOutputTokens": config.max_output_tokens,
                    },
                });
                if !system.is_empty() {
                    body["systemInstruction"] = json!({"parts": system});
                }
                (body, ("x-goog-api-key".to_string(), api_key.to_string()))
            }
        };
        HttpCall {
            url,
            headers: vec![("Content-Type".to_string(), "application/json".to_string()), auth_header],
            body: body.to_string(),
            timeout,
        }
    }

    pub fn parse_reply(self, body: &str) -> Result<ParsedReply, GatewayError> {
        let raw: Value = serde_json::from_str(body)
            .map_err(|e| GatewayError::MalformedResponse(format!("response is not JSON: {e}")))?;
        let missing = |what: &str| GatewayError::MalformedResponse(format!("response has no {what}"));
        let count = |v: &Value| v.as_u64().unwrap_or(0);
        match self {
            WireFormat::OpenAi => {
                let content = raw
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| missing("choices[0].message.content"))?
                    .to_string();
                Ok(ParsedReply {
                    content,
                    prompt_tokens: count(&raw["usage"]["prompt_tokens"]),
                    completion_tokens: count(&raw["usage"]["completion_tokens"]),
                    raw,
                })
            }
            WireFormat::Gemini => {
                let parts = raw
                    .pointer("/candidates/0/content/parts")
                    .and_then(Value::as_array)
                    .ok_or_else(|| missing("candidates[0].content.parts"))?;
                let content: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
                Ok(ParsedReply {
                    content,
                    prompt_tokens: count(&raw["usageMetadata"]["promptTokenCount"]),
                    completion_tokens: count(&raw["usageMetadata"]["candidatesTokenCount"]),
                    raw,
                })
            }
        }
    }
}
