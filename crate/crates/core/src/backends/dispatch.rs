use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendConfig, BackendError, BackendKind, CacheEntry, CacheKey, Job, RawResponse, ResponseCache,
    NO_IMAGE_DIGEST,
};

/// Counting semaphore that remembers its high-water mark.
#[derive(Debug)]
pub struct Semaphore {
    limit: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.0.state.lock().expect("semaphore lock");
        state.0 -= 1;
        self.0.freed.notify_one();
    }
}

impl Semaphore {
    pub fn new(limit: usize) -> Self {
        Semaphore {
            limit: limit.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("semaphore lock");
        while state.0 >= self.limit {
            state = self.freed.wait(state).expect("semaphore lock");
        }
        state.0 += 1;
        state.1 = state.1.max(state.0);
        Permit(self)
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Most permits ever held at once.
    pub fn high_water(&self) -> usize {
        self.state.lock().expect("semaphore lock").1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub jobs: usize,
    pub unique_keys: usize,
    pub cache_hits: usize,
    pub network_calls: u64,
    pub failures: usize,
}

/// A backend plus its cache, retry policy and in-flight bound.
pub struct Dispatcher {
    config: BackendConfig,
    backend: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    semaphore: Semaphore,
    calls: AtomicU64,
    image_digests: Mutex<HashMap<PathBuf, String>>,
}

impl Dispatcher {
    pub fn new(config: BackendConfig, backend: Arc<dyn Backend>, cache: Arc<ResponseCache>) -> Self {
        let semaphore = Semaphore::new(config.max_in_flight);
        Dispatcher {
            config,
            backend,
            cache,
            semaphore,
            calls: AtomicU64::new(0),
            image_digests: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Backend invocations so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn high_water(&self) -> usize {
        self.semaphore.high_water()
    }

    fn is_mock(&self) -> bool {
        matches!(
            self.config.kind,
            BackendKind::MockTable { .. } | BackendKind::MockBiasedOracle(_)
        )
    }

    /// SHA-256 of the image bytes. Mock backends never read pixels, so a
    /// missing file there is keyed by its path instead.
    fn image_digest(&self, image: Option<&Path>) -> Result<String, BackendError> {
        let Some(path) = image else {
            return Ok(NO_IMAGE_DIGEST.to_string());
        };
        if let Some(d) = self.image_digests.lock().expect("digest lock").get(path) {
            return Ok(d.clone());
        }
        let digest = match std::fs::read(path) {
            Ok(bytes) => hex::encode(Sha256::digest(&bytes)),
            Err(_) if self.is_mock() => {
                format!(
                    "path:{}",
                    hex::encode(Sha256::digest(path.to_string_lossy().as_bytes()))
                )
            }
            Err(e) => {
                return Err(BackendError::ImageUnreadable {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        };
        self.image_digests
            .lock()
            .expect("digest lock")
            .insert(path.to_path_buf(), digest.clone());
        Ok(digest)
    }

    pub fn cache_key(&self, job: &Job) -> Result<CacheKey, BackendError> {
        Ok(CacheKey {
            backend_id: self.config.backend_id.clone(),
            model_name: self.config.model_name.clone(),
            image_digest: self.image_digest(job.image.as_deref())?,
            prompt_digest: job.prompt_digest(),
        })
    }

    /// One request: served from the cache when possible, otherwise sent under
    /// the in-flight bound and retried on transient failures.
    pub fn query(&self, job: &Job) -> Result<RawResponse, BackendError> {
        let key = self.cache_key(job)?;
        self.query_keyed(job, key)
    }

    fn query_keyed(&self, job: &Job, key: CacheKey) -> Result<RawResponse, BackendError> {
        if let Some(hit) = self.cache.get(&key) {
            return Ok(RawResponse {
                image_id: job.image_id.clone(),
                prompt_digest: key.prompt_digest,
                backend_id: self.config.backend_id.clone(),
                text: hit.text,
                latency_ms: hit.latency_ms,
                from_cache: true,
                attempt_count: hit.attempts,
            });
        }
        let policy = &self.config.retry;
        let started = Instant::now();
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            let outcome = {
                let _permit = self.semaphore.acquire();
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.backend.call(job)
            };
            match outcome {
                Ok(text) => break text,
                Err(e) if e.is_transient() && attempts < policy.max_attempts => {
                    thread::sleep(policy.delay_before_retry(attempts as usize - 1));
                }
                Err(BackendError::RateLimited { .. }) => return Err(BackendError::RateLimited { attempts }),
                Err(e) => return Err(e),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.cache
            .insert(CacheEntry {
                key: key.clone(),
                image_id: job.image_id.clone(),
                text: text.clone(),
                timestamp,
                latency_ms,
                attempts,
            })
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(RawResponse {
            image_id: job.image_id.clone(),
            prompt_digest: key.prompt_digest,
            backend_id: self.config.backend_id.clone(),
            text,
            latency_ms,
            from_cache: false,
            attempt_count: attempts,
        })
    }

    /// Run every job. Identical keys are sent once; results come back in
    /// input order and one failure never aborts the rest.
    pub fn query_batch(&self, jobs: &[Job]) -> (Vec<Result<RawResponse, BackendError>>, BatchStats) {
        let calls_before = self.network_calls();
        let mut stats = BatchStats {
            jobs: jobs.len(),
            ..BatchStats::default()
        };
        let mut slots: Vec<Option<Result<RawResponse, BackendError>>> = vec![None; jobs.len()];
        // First job index for each distinct key, and who shares it.
        let mut leaders: Vec<(usize, CacheKey)> = Vec::new();
        let mut followers: HashMap<CacheKey, Vec<usize>> = HashMap::new();
        for (i, job) in jobs.iter().enumerate() {
            match self.cache_key(job) {
                Err(e) => slots[i] = Some(Err(e)),
                Ok(key) => match followers.get_mut(&key) {
                    Some(list) => list.push(i),
                    None => {
                        followers.insert(key.clone(), Vec::new());
                        leaders.push((i, key));
                    }
                },
            }
        }
        stats.unique_keys = leaders.len();
        stats.cache_hits = leaders.iter().filter(|(_, k)| self.cache.get(k).is_some()).count();

        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<RawResponse, BackendError>)>> = Mutex::new(Vec::new());
        let workers = self.config.max_in_flight.min(leaders.len()).max(1);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some((i, key)) = leaders.get(n) else { break };
                    let outcome = self.query_keyed(&jobs[*i], key.clone());
                    results.lock().expect("results lock").push((*i, outcome));
                });
            }
        });
        let by_index: HashMap<usize, Result<RawResponse, BackendError>> =
            results.into_inner().expect("results lock").into_iter().collect();
        for (i, key) in &leaders {
            let outcome = by_index[i].clone();
            for &f in &followers[key] {
                slots[f] = Some(outcome.clone().map(|r| RawResponse {
                    image_id: jobs[f].image_id.clone(),
                    from_cache: true,
                    ..r
                }));
            }
            slots[*i] = Some(outcome);
        }
        let out: Vec<_> = slots.into_iter().map(|s| s.expect("every job resolved")).collect();
        stats.failures = out.iter().filter(|r| r.is_err()).count();
        stats.network_calls = self.network_calls() - calls_before;
        (out, stats)
    }
}
