//! Append-only record/replay store for backend responses, and the retrying
//! caller both remote clients share.
//!
//! Layout: `{root}/{backend}/{fingerprint}.json`, one response per file.
//! An entry is written once and never replaced.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::write_new_atomic;
use crate::transport::{Limiter, RetryPolicy, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Serve recorded entries; call the backend and record on a miss.
    Record,
    /// Serve recorded entries only. Never touches the network.
    #[default]
    Replay,
    /// Always call the backend; nothing is read or written.
    Passthrough,
}

impl std::str::FromStr for CassetteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            "passthrough" => Ok(Self::Passthrough),
            other => Err(format!("unknown cassette mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub status: u16,
    pub body: String,
}

/// Per-backend cassette directory.
#[derive(Debug, Clone)]
pub struct Cassette {
    dir: PathBuf,
    mode: CassetteMode,
}

impl Cassette {
    pub fn new(root: &Path, backend_id: &str, mode: CassetteMode) -> Self {
        Self {
            dir: root.join(backend_id),
            mode,
        }
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<CassetteEntry>, RemoteError> {
        let path = self.path_for(fingerprint);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| RemoteError::Store(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RemoteError::Store(format!("{}: {e}", path.display()))),
        }
    }

    /// Store `entry` unless one already exists. Returns whether it was written.
    pub fn put(&self, entry: &CassetteEntry) -> Result<bool, RemoteError> {
        let mut bytes = serde_json::to_vec_pretty(entry).expect("entry serializes");
        bytes.push(b'\n');
        write_new_atomic(&self.path_for(&entry.fingerprint), &bytes)
            .map_err(|e| RemoteError::Store(e.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemoteError {
    #[error("no cassette entry for fingerprint {fingerprint}")]
    CassetteMiss { fingerprint: String },
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("backend returned status {status} after {attempts} attempt(s)")]
    BackendError { status: u16, attempts: u32 },
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("cassette store: {0}")]
    Store(String),
}

/// A single backend endpoint plus the retry/limit machinery around it.
pub struct RemoteCaller {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    timeout: Duration,
    network_calls: AtomicU64,
}

impl RemoteCaller {
    pub fn new(
        transport: Arc<dyn Transport>,
        retry: RetryPolicy,
        limiter: Arc<Limiter>,
        timeout: Duration,
    ) -> Self {
        Self {
            transport,
            retry,
            limiter,
            timeout,
            network_calls: AtomicU64::new(0),
        }
    }

    /// Network requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    /// Resolve `fingerprint` through the cassette, falling back to the network
    /// as the cassette mode allows. `body` is only built when a request is sent.
    pub fn call(
        &self,
        cassette: &Cassette,
        fingerprint: &str,
        url: &str,
        bearer: Option<&str>,
        body: impl FnOnce() -> Vec<u8>,
    ) -> Result<String, RemoteError> {
        match cassette.mode() {
            CassetteMode::Replay => cassette
                .get(fingerprint)?
                .map(|e| e.body)
                .ok_or_else(|| RemoteError::CassetteMiss {
                    fingerprint: fingerprint.to_string(),
                }),
            CassetteMode::Record => {
                if let Some(hit) = cassette.get(fingerprint)? {
                    return Ok(hit.body);
                }
                let (status, body) = self.send(url, bearer, &body())?;
                let entry = CassetteEntry {
                    fingerprint: fingerprint.to_string(),
                    status,
                    body,
                };
                if !cassette.put(&entry)? {
                    // Lost a race with a concurrent writer; the stored entry wins.
                    if let Some(existing) = cassette.get(fingerprint)? {
                        return Ok(existing.body);
                    }
                }
                Ok(entry.body)
            }
            CassetteMode::Passthrough => self.send(url, bearer, &body()).map(|(_, b)| b),
        }
    }

    fn send(&self, url: &str, bearer: Option<&str>, body: &[u8]) -> Result<(u16, String), RemoteError> {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.network_calls.fetch_add(1, Ordering::Relaxed);
                self.transport.post_json(url, bearer, body, self.timeout)
            };
            let err = match result {
                Ok(reply) if (200..300).contains(&reply.status) => return Ok((reply.status, reply.body)),
                Ok(reply) if RetryPolicy::is_retryable_status(reply.status) => {
                    if reply.status == 429 {
                        RemoteError::RateLimited { attempts: attempt }
                    } else {
                        RemoteError::BackendError {
                            status: reply.status,
                            attempts: attempt,
                        }
                    }
                }
                Ok(reply) => {
                    return Err(RemoteError::BackendError {
                        status: reply.status,
                        attempts: attempt,
                    })
                }
                Err(TransportError::Timeout) => RemoteError::Timeout { attempts: attempt },
                Err(TransportError::Connect(m)) => return Err(RemoteError::Connect(m)),
            };
            if attempt >= max {
                return Err(err);
            }
            log::warn!("{url}: {err}; retrying");
            std::thread::sleep(self.retry.delay_after(attempt - 1));
        }
    }
}
