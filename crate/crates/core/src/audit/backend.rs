use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which backend produced a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: String,
    pub model: String,
}

/// A text-completion service.
pub trait GenerationBackend: Send + Sync {
    fn info(&self) -> BackendInfo;
    /// Completion for `prompt`; blank completions are an error.
    fn complete(&self, prompt: &str) -> Result<String>;
}

fn non_empty(text: String) -> Result<String> {
    if text.trim().is_empty() {
        Err(Error::EmptyCompletion)
    } else {
        Ok(text)
    }
}

/// Offline backend that answers with the last non-blank line of the prompt.
#[derive(Debug, Clone, Default)]
pub struct EchoBackend;

impl GenerationBackend for EchoBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "echo".into(),
            model: "echo".into(),
        }
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let last = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        non_empty(last.to_string())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(limit: usize) -> Self {
        Limiter {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Connection settings shared by the remote backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `echo`, an `http(s)://` URL, or `cmd:<program> [args…]`.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_tokens: usize,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub attempts: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "echo".into(),
            model: "echo".into(),
            timeout_secs: 60.0,
            max_tokens: 256,
            temperature: 0.7,
            max_in_flight: 4,
            attempts: 2,
        }
    }
}

impl BackendConfig {
    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }

    /// Builds the backend named by `endpoint`.
    pub fn build(&self) -> Result<Box<dyn GenerationBackend>> {
        if self.endpoint == "echo" {
            Ok(Box::new(EchoBackend))
        } else if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            Ok(Box::new(HttpBackend::new(self.clone())))
        } else if let Some(cmd) = self.endpoint.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("cmd: endpoint names no program".into()))?;
            Ok(Box::new(CommandBackend::new(program, parts.collect(), self.clone())))
        } else {
            Err(Error::Config(format!(
                "unrecognized backend endpoint {:?}",
                self.endpoint
            )))
        }
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// JSON-over-HTTP client: posts `{model, prompt, max_tokens, temperature}`
/// and reads `{text}`.
pub struct HttpBackend {
    cfg: BackendConfig,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(true)
            .build()
            .new_agent();
        let limiter = Limiter::new(cfg.max_in_flight);
        HttpBackend { cfg, agent, limiter }
    }

    fn once(&self, prompt: &str) -> Result<String> {
        let body = HttpRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens: self.cfg.max_tokens,
            temperature: self.cfg.temperature,
        };
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => Error::Timeout(self.cfg.timeout()),
                other => Error::BackendUnavailable(other.to_string()),
            })?;
        let parsed: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BackendUnavailable(format!("bad response body: {e}")))?;
        non_empty(parsed.text)
    }
}

impl GenerationBackend for HttpBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "http".into(),
            model: self.cfg.model.clone(),
        }
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let _permit = self.limiter.acquire();
        let mut delay = Duration::from_millis(200);
        let mut last = Error::BackendUnavailable("no attempt made".into());
        for attempt in 0..self.cfg.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.once(prompt) {
                Ok(t) => return Ok(t),
                Err(e @ Error::EmptyCompletion) => return Err(e),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Runs a local program with the prompt on stdin and takes stdout as the
/// completion. The process is killed at the timeout.
pub struct CommandBackend {
    program: String,
    args: Vec<String>,
    cfg: BackendConfig,
    limiter: Limiter,
}

impl CommandBackend {
    pub fn new(program: String, args: Vec<String>, cfg: BackendConfig) -> Self {
        let limiter = Limiter::new(cfg.max_in_flight);
        CommandBackend {
            program,
            args,
            cfg,
            limiter,
        }
    }
}

impl GenerationBackend for CommandBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: "command".into(),
            model: self.cfg.model.clone(),
        }
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let _permit = self.limiter.acquire();
        let unavailable = |e: std::io::Error| Error::BackendUnavailable(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(unavailable)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = prompt.to_string();
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(input.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let deadline = Instant::now() + self.cfg.timeout();
        let status = loop {
            if let Some(st) = child.try_wait().map_err(unavailable)? {
                break st;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Timeout(self.cfg.timeout()));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let _ = writer.join();
        let text = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::BackendUnavailable(format!(
                "{} exited with {status}",
                self.program
            )));
        }
        non_empty(text.trim_end_matches('\n').to_string())
    }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    stage: &'a str,
    backend: &'a BackendInfo,
    prompt_sha256: String,
    prompt: &'a str,
    completion: Option<&'a str>,
    error: Option<String>,
}

/// Append-only JSONL record of every backend exchange.
pub struct AuditLog {
    path: Option<PathBuf>,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(AuditLog {
            path: Some(path),
            lock: Mutex::new(()),
        })
    }

    /// A log that records nothing.
    pub fn disabled() -> Self {
        AuditLog {
            path: None,
            lock: Mutex::new(()),
        }
    }

    pub fn record(&self, stage: &str, backend: &BackendInfo, prompt: &str, outcome: &Result<String>) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let rec = LogRecord {
            stage,
            backend,
            prompt_sha256: hex_digest(prompt.as_bytes()),
            prompt,
            completion: outcome.as_ref().ok().map(String::as_str),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        let _g = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_returns_last_line() {
        assert_eq!(EchoBackend.complete("a\nb\n\n").unwrap(), "b");
        assert!(matches!(EchoBackend.complete("\n  \n"), Err(Error::EmptyCompletion)));
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_round_trip_and_timeout() {
        let cfg = BackendConfig {
            timeout_secs: 5.0,
            ..Default::default()
        };
        let b = CommandBackend::new("cat".into(), vec![], cfg.clone());
        assert_eq!(b.complete("hello\n").unwrap(), "hello");
        let slow = CommandBackend::new(
            "sleep".into(),
            vec!["5".into()],
            BackendConfig {
                timeout_secs: 0.1,
                ..cfg
            },
        );
        assert!(matches!(slow.complete(""), Err(Error::Timeout(_))));
    }

    #[test]
    fn unreachable_http_is_unavailable() {
        let b = HttpBackend::new(BackendConfig {
            endpoint: "http://127.0.0.1:9/complete".into(),
            timeout_secs: 2.0,
            attempts: 1,
            ..Default::default()
        });
        assert!(matches!(
            b.complete("x"),
            Err(Error::BackendUnavailable(_)) | Err(Error::Timeout(_))
        ));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let lim = Limiter::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..6 {
                s.spawn(|| {
                    let _p = lim.acquire();
                    let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
