//! Remote JSON-over-HTTP endpoints.
//!
//! Request bodies come from a JSON template. Inside any string value,
//! `{{model}}`, `{{prompt}}` and `{{image}}` are replaced with the model
//! name, the prompt text and the image payload. For requests without an
//! image, the innermost array element or string field that mentions
//! `{{image}}` is dropped. The answer is read with a JSON pointer.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, Job};

const MODEL: &str = "{{model}}";
const PROMPT: &str = "{{prompt}}";
const IMAGE: &str = "{{image}}";
const BODY_EXCERPT: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTransport {
    /// Bare base64 of the file bytes.
    Base64,
    /// `data:<mime>;base64,<payload>`.
    DataUrl,
    /// `prefix` followed by the image path, for endpoints that fetch images
    /// themselves.
    Url { prefix: String },
}

impl ImageTransport {
    pub fn payload(&self, path: &Path) -> Result<String, BackendError> {
        let read = || {
            std::fs::read(path).map_err(|e| BackendError::ImageUnreadable {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        Ok(match self {
            ImageTransport::Base64 => base64::engine::general_purpose::STANDARD.encode(read()?),
            ImageTransport::DataUrl => format!(
                "data:{};base64,{}",
                mime_type(path),
                base64::engine::general_purpose::STANDARD.encode(read()?)
            ),
            ImageTransport::Url { prefix } => format!("{prefix}{}", path.to_string_lossy()),
        })
    }
}

fn mime_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "image/jpeg",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Chat-completions style: text and image parts in one user message.
    OpenaiChat,
    /// Single-turn generate endpoint with a base64 `images` array.
    OllamaGenerate,
}

/// Request/response mapping for one remote endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterSpec")]
pub struct HttpAdapter {
    pub body_template: Value,
    /// JSON pointer to the answer text in the response.
    pub text_pointer: String,
    pub image_transport: ImageTransport,
    pub auth_header: String,
    pub auth_prefix: String,
}

/// Wire form: a preset, explicit fields, or a preset with overrides.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterSpec {
    preset: Option<Preset>,
    body_template: Option<Value>,
    text_pointer: Option<String>,
    image_transport: Option<ImageTransport>,
    auth_header: Option<String>,
    auth_prefix: Option<String>,
}

impl TryFrom<AdapterSpec> for HttpAdapter {
    type Error = String;

    fn try_from(spec: AdapterSpec) -> Result<Self, Self::Error> {
        let base = spec.preset.map(HttpAdapter::preset);
        let missing = |name: &str| format!("adapter needs `{name}` or a preset");
        Ok(HttpAdapter {
            body_template: spec
                .body_template
                .or_else(|| base.as_ref().map(|a| a.body_template.clone()))
                .ok_or_else(|| missing("body_template"))?,
            text_pointer: spec
                .text_pointer
                .or_else(|| base.as_ref().map(|a| a.text_pointer.clone()))
                .ok_or_else(|| missing("text_pointer"))?,
            image_transport: spec
                .image_transport
                .or_else(|| base.as_ref().map(|a| a.image_transport.clone()))
                .unwrap_or(ImageTransport::Base64),
            auth_header: spec
                .auth_header
                .or_else(|| base.as_ref().map(|a| a.auth_header.clone()))
                .unwrap_or_else(|| "Authorization".into()),
            auth_prefix: spec
                .auth_prefix
                .or_else(|| base.as_ref().map(|a| a.auth_prefix.clone()))
                .unwrap_or_else(|| "Bearer ".into()),
        })
    }
}

impl HttpAdapter {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::OpenaiChat => HttpAdapter {
                body_template: json!({
                    "model": MODEL,
                    "messages": [{
                        "role": "user",
                        "content": [
                            {"type": "text", "text": PROMPT},
                            {"type": "image_url", "image_url": {"url": IMAGE}}
                        ]
                    }]
                }),
                text_pointer: "/choices/0/message/content".into(),
                image_transport: ImageTransport::DataUrl,
                auth_header: "Authorization".into(),
                auth_prefix: "Bearer ".into(),
            },
            Preset::OllamaGenerate => HttpAdapter {
                body_template: json!({
                    "model": MODEL,
                    "prompt": PROMPT,
                    "images": [IMAGE],
                    "stream": false
                }),
                text_pointer: "/response".into(),
                image_transport: ImageTransport::Base64,
                auth_header: "Authorization".into(),
                auth_prefix: "Bearer ".into(),
            },
        }
    }

    /// Fill the template for one request.
    pub fn render_body(
        &self,
        model: &str,
        prompt: &str,
        image: Option<&str>,
        extra: &BTreeMap<String, Value>,
    ) -> Value {
        let mut body = self.body_template.clone();
        if image.is_none() {
            prune_image(&mut body);
        }
        substitute(&mut body, model, prompt, image.unwrap_or(""));
        if let Value::Object(map) = &mut body {
            for (k, v) in extra {
                map.insert(k.clone(), v.clone());
            }
        }
        body
    }

    pub fn extract_text(&self, response: &Value) -> Result<String, BackendError> {
        match response.pointer(&self.text_pointer) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(BackendError::Protocol(format!(
                "{} is not a string: {other}",
                self.text_pointer
            ))),
            None => Err(BackendError::Protocol(format!("response has no {}", self.text_pointer))),
        }
    }
}

fn mentions_image(value: &Value) -> bool {
    match value {
        Value::String(s) => s.contains(IMAGE),
        Value::Array(items) => items.iter().any(mentions_image),
        Value::Object(map) => map.values().any(mentions_image),
        _ => false,
    }
}

/// True when some array inside `value` (or `value` itself) holds an element
/// that mentions the image.
fn has_image_array(value: &Value) -> bool {
    match value {
        Value::Array(items) => items.iter().any(|v| mentions_image(v) || has_image_array(v)),
        Value::Object(map) => map.values().any(has_image_array),
        _ => false,
    }
}

/// Drop the innermost array elements and string fields that carry the image.
fn prune_image(value: &mut Value) {
    match value {
        Value::Array(items) => {
            items.retain(|v| !mentions_image(v) || has_image_array(v));
            items.iter_mut().for_each(prune_image);
        }
        Value::Object(map) => {
            map.retain(|_, v| !matches!(v, Value::String(s) if s.contains(IMAGE)));
            map.values_mut().for_each(prune_image);
        }
        _ => {}
    }
}

fn substitute(value: &mut Value, model: &str, prompt: &str, image: &str) {
    match value {
        Value::String(s) => {
            if s.contains("{{") {
                *s = s.replace(MODEL, model).replace(PROMPT, prompt).replace(IMAGE, image);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| substitute(v, model, prompt, image)),
        Value::Object(map) => map.values_mut().for_each(|v| substitute(v, model, prompt, image)),
        _ => {}
    }
}

pub struct RemoteHttpBackend {
    endpoint: String,
    model_name: String,
    adapter: HttpAdapter,
    auth_source: Option<String>,
    extra_body: BTreeMap<String, Value>,
    agent: ureq::Agent,
}

impl RemoteHttpBackend {
    pub fn new(
        endpoint: &str,
        model_name: &str,
        adapter: HttpAdapter,
        auth_source: Option<String>,
        timeout: Duration,
        extra_body: BTreeMap<String, Value>,
    ) -> Self {
        RemoteHttpBackend {
            endpoint: endpoint.to_string(),
            model_name: model_name.to_string(),
            adapter,
            auth_source,
            extra_body,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

impl Backend for RemoteHttpBackend {
    fn call(&self, job: &Job) -> Result<String, BackendError> {
        let credential = match &self.auth_source {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::AuthMissing(var.clone()))?),
            None => None,
        };
        let image = job
            .image
            .as_deref()
            .map(|p| self.adapter.image_transport.payload(p))
            .transpose()?;
        let body = self
            .adapter
            .render_body(&self.model_name, &job.prompt, image.as_deref(), &self.extra_body);
        let mut request = self.agent.post(&self.endpoint);
        if let Some(secret) = credential {
            request = request.set(
                &self.adapter.auth_header,
                &format!("{}{secret}", self.adapter.auth_prefix),
            );
        }
        let response = match request.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(429, _)) => return Err(BackendError::RateLimited { attempts: 1 }),
            Err(ureq::Error::Status(status, r)) => {
                return Err(BackendError::UpstreamError {
                    status,
                    body: excerpt(&r.into_string().unwrap_or_default()),
                })
            }
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                return Err(if message.contains("timed out") || message.contains("Timeout") {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(message)
                });
            }
        };
        let value: Value = response
            .into_json()
            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
        self.adapter.extract_text(&value)
    }
}
