//! OpenAI-compatible HTTP providers (`/chat/completions`, `/embeddings`).

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{normalize_embedding, CompletionProvider, CompletionRequest, Embedder, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSettings {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Dimension of `embedding_model` vectors.
    pub embedding_dim: usize,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for LiveSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "deepseek-chat".into(),
            embedding_model: "all-MiniLM-L6-v2".into(),
            embedding_dim: 384,
            api_key_env: "STRAT_FORGE_API_KEY".into(),
            max_retries: 3,
            timeout_secs: 300,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    http: reqwest::blocking::Client,
    settings: LiveSettings,
    api_key: Option<String>,
}

impl HttpClient {
    fn new(settings: LiveSettings) -> Result<Self, ProviderError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Retryable { attempts: 0, message: e.to_string() })?;
        let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { http, settings, api_key })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.settings.endpoint.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx responses.
    fn post(&self, path: &str, body: &Value, idempotency_key: &str) -> Result<Value, ProviderError> {
        let attempts_allowed = self.settings.max_retries.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts_allowed {
            let mut req = self
                .http
                .post(self.url(path))
                .header("Idempotency-Key", idempotency_key)
                .json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Value>().map_err(|e| ProviderError::Malformed(e.to_string()));
                    }
                    last = format!("HTTP {status}: {}", resp.text().unwrap_or_default());
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        return Err(ProviderError::Retryable { attempts: attempt, message: last });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < attempts_allowed {
                thread::sleep(Duration::from_millis(self.settings.backoff_ms << (attempt - 1)));
            }
        }
        Err(ProviderError::Retryable { attempts: attempts_allowed, message: last })
    }
}

#[derive(Debug, Clone)]
pub struct LiveProvider {
    client: HttpClient,
}

impl LiveProvider {
    pub fn new(settings: LiveSettings) -> Result<Self, ProviderError> {
        Ok(Self { client: HttpClient::new(settings)? })
    }

    pub fn request_body(&self, request: &CompletionRequest<'_>) -> Value {
        json!({
            "model": self.client.settings.model,
            "temperature": request.temperature,
            "messages": [{ "role": "user", "content": request.prompt }],
        })
    }
}

impl CompletionProvider for LiveProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        if request.prompt.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let body = self.request_body(request);
        let resp = self.client.post("chat/completions", &body, &request.idempotency_key())?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
    }

    fn identity(&self) -> String {
        format!("live:{}@{}", self.client.settings.model, self.client.settings.endpoint)
    }
}

#[derive(Debug, Clone)]
pub struct LiveEmbedder {
    client: HttpClient,
}

impl LiveEmbedder {
    pub fn new(settings: LiveSettings) -> Result<Self, ProviderError> {
        Ok(Self { client: HttpClient::new(settings)? })
    }
}

impl Embedder for LiveEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let body = json!({ "model": self.client.settings.embedding_model, "input": text });
        let resp = self.client.post("embeddings", &body, &super::prompt_key(text))?;
        let raw: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        let expected = self.client.settings.embedding_dim;
        if raw.len() != expected {
            return Err(ProviderError::Dimension { expected, got: raw.len() });
        }
        normalize_embedding(raw)
    }

    fn identity(&self) -> String {
        format!("live-embedder:{}@{}", self.client.settings.embedding_model, self.client.settings.endpoint)
    }

    fn dim(&self) -> usize {
        self.client.settings.embedding_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves `responses` (status, body) in order and forwards each request
    /// body and headers to the returned channel.
    fn fake_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn settings(endpoint: String) -> LiveSettings {
        LiveSettings { endpoint, backoff_ms: 1, api_key_env: "STRAT_FORGE_TEST_NO_KEY".into(), ..Default::default() }
    }

    #[test]
    fn request_carries_temperature_zero_and_idempotency_key() {
        let ok = r#"{"choices":[{"message":{"content":"done"}}]}"#.to_string();
        let (endpoint, rx) = fake_server(vec![(200, ok)]);
        let p = LiveProvider::new(settings(endpoint)).unwrap();
        let req = CompletionRequest::new("optimize this", 0.0);
        assert_eq!(p.complete(&req).unwrap(), "done");
        let (headers, body) = rx.recv().unwrap();
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["temperature"], json!(0.0));
        assert_eq!(body["messages"][0]["content"], "optimize this");
        assert!(headers.to_ascii_lowercase().contains(&format!("idempotency-key: {}", req.idempotency_key())));
    }

    #[test]
    fn server_errors_are_retried_then_reported_with_attempt_count() {
        let (endpoint, _rx) = fake_server(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
        let p = LiveProvider::new(settings(endpoint)).unwrap();
        match p.complete(&CompletionRequest::new("x", 0.0)) {
            Err(ProviderError::Retryable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retry_recovers_after_transient_failure() {
        let ok = r#"{"choices":[{"message":{"content":"second"}}]}"#.to_string();
        let (endpoint, _rx) = fake_server(vec![(500, "{}".into()), (200, ok)]);
        let p = LiveProvider::new(settings(endpoint)).unwrap();
        assert_eq!(p.complete(&CompletionRequest::new("x", 0.0)).unwrap(), "second");
    }

    #[test]
    fn embedder_normalizes_and_checks_dimension() {
        let body = r#"{"data":[{"embedding":[3.0,4.0]}]}"#.to_string();
        let (endpoint, _rx) = fake_server(vec![(200, body.clone()), (200, body)]);
        let mut s = settings(endpoint);
        s.embedding_dim = 2;
        let e = LiveEmbedder::new(s.clone()).unwrap();
        let v = e.embed("x").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        s.embedding_dim = 3;
        let e = LiveEmbedder { client: HttpClient { settings: s, ..e.client } };
        assert!(matches!(e.embed("x"), Err(ProviderError::Dimension { expected: 3, got: 2 })));
    }
}
