use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyph::GlyphCipher;

/// A machine-translation backend.
pub trait TranslatorClient: Send + Sync {
    /// Stable identifier recorded in synthetic provenance.
    fn id(&self) -> String;
    fn translate(&self, text: &str, src_lang: &str, tgt_lang: &str) -> Result<String>;
}

/// Offline deterministic translator: applies the glyph cipher.
#[derive(Debug, Clone)]
pub struct CipherTranslator {
    cipher: GlyphCipher,
}

impl Default for CipherTranslator {
    fn default() -> Self {
        CipherTranslator { cipher: GlyphCipher::standard() }
    }
}

impl TranslatorClient for CipherTranslator {
    fn id(&self) -> String {
        "stub-cipher".into()
    }

    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> Result<String> {
        Ok(self.cipher.apply(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubled for each further one.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, backoff_ms: 200 }
    }
}

/// Outcome of one attempt: retryable failures are retried with backoff.
pub enum Attempt<T> {
    Done(T),
    Retry(String),
    Fatal(String),
}

pub fn with_retry<T>(policy: RetryPolicy, mut f: impl FnMut(u32) -> Attempt<T>) -> Result<T> {
    let mut delay = policy.backoff_ms;
    let mut attempt = 0;
    loop {
        match f(attempt) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(msg) => return Err(Error::Translator(msg)),
            Attempt::Retry(msg) if attempt >= policy.max_retries => {
                return Err(Error::Translator(format!("{msg} (after {} attempts)", attempt + 1)))
            }
            Attempt::Retry(msg) => {
                log::debug!("attempt {} failed: {msg}; retrying in {delay} ms", attempt + 1);
                std::thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpTranslatorConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub credentials_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    10_000
}
fn default_retries() -> u32 {
    RetryPolicy::default().max_retries
}
fn default_backoff() -> u64 {
    RetryPolicy::default().backoff_ms
}

/// JSON-over-HTTP translator.
///
/// Sends `POST endpoint` with `{"text", "source_lang", "target_lang"}` and
/// expects `{"translation": "..."}`. Transport errors, timeouts, 429 and 5xx
/// responses are retried; other statuses fail immediately.
pub struct HttpTranslator {
    cfg: HttpTranslatorConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
    source_lang: &'a str,
    target_lang: &'a str,
}

#[derive(Deserialize)]
struct Response {
    translation: String,
}

impl HttpTranslator {
    pub fn new(cfg: HttpTranslatorConfig) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("translator endpoint is empty".into()));
        }
        let token = match &cfg.credentials_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("credentials variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        Ok(HttpTranslator { cfg, agent, token })
    }
}

impl TranslatorClient for HttpTranslator {
    fn id(&self) -> String {
        format!("http:{}", self.cfg.endpoint)
    }

    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String> {
        let policy = RetryPolicy { max_retries: self.cfg.max_retries, backoff_ms: self.cfg.backoff_ms };
        with_retry(policy, |_| {
            let mut req = self.agent.post(&self.cfg.endpoint);
            if let Some(t) = &self.token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            match req.send_json(Request { text, source_lang: src, target_lang: tgt }) {
                Ok(resp) => match resp.into_json::<Response>() {
                    Ok(r) => Attempt::Done(r.translation),
                    Err(e) => Attempt::Fatal(format!("bad response body: {e}")),
                },
                Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                    Attempt::Retry(format!("HTTP {code}"))
                }
                Err(ureq::Error::Status(code, _)) => Attempt::Fatal(format!("HTTP {code}")),
                Err(e) => Attempt::Retry(e.to_string()),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn respond(mut s: std::net::TcpStream, status: u16, body: &str, delay: u64) {
        let mut reader = BufReader::new(s.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut buf = vec![0; len];
        reader.read_exact(&mut buf).unwrap();
        std::thread::sleep(Duration::from_millis(delay));
        let _ = write!(
            s,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
    }

    /// Answers one connection per entry, each on its own thread.
    fn serve(responses: Vec<(u16, &'static str, u64)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body, delay) in responses {
                let (s, _) = listener.accept().unwrap();
                std::thread::spawn(move || respond(s, status, body, delay));
            }
        });
        format!("http://{addr}/translate")
    }

    fn client(endpoint: String, timeout_ms: u64) -> HttpTranslator {
        HttpTranslator::new(HttpTranslatorConfig {
            endpoint,
            credentials_env: None,
            timeout_ms,
            max_retries: 2,
            backoff_ms: 1,
        })
        .unwrap()
    }

    #[test]
    fn cipher_stub_is_pure() {
        let t = CipherTranslator::default();
        assert_eq!(t.translate("abc", "en", "zh").unwrap(), GlyphCipher::standard().apply("abc"));
        assert_eq!(t.translate("abc", "en", "zh").unwrap(), t.translate("abc", "en", "zh").unwrap());
    }

    #[test]
    fn retries_server_errors() {
        let url = serve(vec![(503, "{}", 0), (200, r#"{"translation":"甲"}"#, 0)]);
        assert_eq!(client(url, 2000).translate("a", "en", "zh").unwrap(), "甲");
    }

    #[test]
    fn gives_up_after_retries() {
        let url = serve(vec![(500, "{}", 0), (500, "{}", 0), (500, "{}", 0)]);
        let err = client(url, 2000).translate("a", "en", "zh").unwrap_err();
        assert!(err.to_string().contains("after 3 attempts"), "{err}");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let url = serve(vec![(400, "{}", 0)]);
        assert!(matches!(client(url, 2000).translate("a", "en", "zh"), Err(Error::Translator(_))));
    }

    #[test]
    fn timeouts_are_bounded() {
        let url = serve(vec![(200, r#"{"translation":"x"}"#, 600), (200, r#"{"translation":"y"}"#, 0)]);
        let start = std::time::Instant::now();
        // first attempt times out, the retry succeeds
        assert_eq!(client(url, 150).translate("a", "en", "zh").unwrap(), "y");
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn missing_credentials_are_a_config_error() {
        let cfg = HttpTranslatorConfig {
            endpoint: "http://127.0.0.1:1/x".into(),
            credentials_env: Some("SSR_TEST_SURELY_UNSET_VAR".into()),
            timeout_ms: 10,
            max_retries: 0,
            backoff_ms: 0,
        };
        assert!(matches!(HttpTranslator::new(cfg), Err(Error::Config(_))));
    }
}
