//! Exponential backoff and in-flight request limiting.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{ChatBackend, ChatRequest, ChatResponse, Embedder, EmbeddingVector, LlmError};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub initial_delay: Duration,
    pub multiplier: f64,
    pub max_delay: Duration,
    /// Upper bound on the summed backoff sleeps of one call.
    pub ceiling: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_delay: Duration::from_millis(500),
            multiplier: 2.0,
            max_delay: Duration::from_secs(20),
            ceiling: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts. Used by tests and the offline backends.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_delay: Duration::ZERO,
            multiplier: 1.0,
            max_delay: Duration::ZERO,
            ceiling: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1` (0-based `attempt` that just failed).
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(attempt as i32);
        let secs = self.initial_delay.as_secs_f64() * factor;
        Duration::from_secs_f64(secs.min(self.max_delay.as_secs_f64()))
    }

    /// Run `op` until it succeeds, fails permanently, or the budget runs out.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, LlmError>) -> Result<T, LlmError> {
        let attempts = self.max_attempts.max(1);
        let mut slept = Duration::ZERO;
        let mut last = None;
        for attempt in 0..attempts {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    log::debug!("attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 == attempts {
                        break;
                    }
                    let delay = self.delay_for(attempt);
                    if slept + delay > self.ceiling {
                        break;
                    }
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    slept += delay;
                }
                Err(e) => return Err(e),
            }
        }
        let message = match last {
            Some(e) => format!("retries exhausted: {e}"),
            None => "retries exhausted".to_string(),
        };
        Err(LlmError::Transport { message, retryable: false })
    }
}

pub struct RetryingBackend<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B> RetryingBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        RetryingBackend { inner, policy }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for RetryingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        self.policy.run(|_| self.inner.complete(request))
    }
}

impl<B: Embedder> Embedder for RetryingBackend<B> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        self.policy.run(|_| self.inner.embed(text))
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Counting semaphore bounding concurrent calls into the wrapped backend.
pub struct ConcurrencyLimit<B> {
    inner: B,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<B> ConcurrencyLimit<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        ConcurrencyLimit { inner, limit: limit.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_, B> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit { owner: self }
    }
}

struct Permit<'a, B> {
    owner: &'a ConcurrencyLimit<B>,
}

impl<B> Drop for Permit<'_, B> {
    fn drop(&mut self) {
        let mut n = self.owner.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.owner.freed.notify_one();
    }
}

impl<B: ChatBackend> ChatBackend for ConcurrencyLimit<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.acquire();
        self.inner.complete(request)
    }
}

impl<B: Embedder> Embedder for ConcurrencyLimit<B> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        let _permit = self.acquire();
        self.inner.embed(text)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Wall-clock helper for tests that assert the backoff ceiling.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::mock::{Reply, ScriptedBackend};
    use crate::llmclient::{Message, RecordingBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn req() -> ChatRequest {
        ChatRequest::new("m", vec![Message::user("hello")])
    }

    #[test]
    fn two_failures_then_success_within_budget_of_three() {
        let script = ScriptedBackend::new().rule_sequence(
            "hello",
            vec![
                Reply::Fail("503".into()),
                Reply::Fail("429".into()),
                Reply::Text("ok".into()),
            ],
        );
        let rec = RecordingBackend::new(script);
        let client = RetryingBackend::new(&rec, RetryPolicy::immediate(3));
        let resp = client.complete(&req()).unwrap();
        assert_eq!(resp.content, "ok");
        assert_eq!(rec.call_count(), 3);
    }

    #[test]
    fn exhausted_budget_is_transport_error() {
        let script = ScriptedBackend::new().rule_sequence(
            "hello",
            vec![Reply::Fail("503".into()), Reply::Fail("503".into()), Reply::Text("late".into())],
        );
        let client = RetryingBackend::new(script, RetryPolicy::immediate(2));
        let err = client.complete(&req()).unwrap_err();
        assert!(matches!(err, LlmError::Transport { retryable: false, .. }));
    }

    #[test]
    fn refusals_are_not_retried() {
        let script = ScriptedBackend::new()
            .rule_sequence("hello", vec![Reply::Refuse("policy".into()), Reply::Text("ok".into())]);
        let rec = RecordingBackend::new(script);
        let client = RetryingBackend::new(&rec, RetryPolicy::immediate(5));
        assert!(matches!(client.complete(&req()), Err(LlmError::Content(_))));
        assert_eq!(rec.call_count(), 1);
    }

    #[test]
    fn backoff_grows_and_is_capped() {
        let p = RetryPolicy {
            max_attempts: 10,
            initial_delay: Duration::from_millis(100),
            multiplier: 2.0,
            max_delay: Duration::from_millis(300),
            ceiling: Duration::from_secs(10),
        };
        assert_eq!(p.delay_for(0), Duration::from_millis(100));
        assert_eq!(p.delay_for(1), Duration::from_millis(200));
        assert_eq!(p.delay_for(2), Duration::from_millis(300));
        assert_eq!(p.delay_for(7), Duration::from_millis(300));
    }

    #[test]
    fn total_sleep_respects_ceiling() {
        let p = RetryPolicy {
            max_attempts: 50,
            initial_delay: Duration::from_millis(10),
            multiplier: 2.0,
            max_delay: Duration::from_millis(40),
            ceiling: Duration::from_millis(100),
        };
        let (res, elapsed): (Result<(), _>, _) =
            timed(|| p.run(|_| Err(LlmError::transient("down"))));
        assert!(res.is_err());
        // 10 + 20 + 40 fits, the next 40 would exceed 100ms.
        assert!(elapsed < Duration::from_millis(100) + Duration::from_millis(50), "{elapsed:?}");
    }

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Slow {
        fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(20));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                content: "x".into(),
                model_id: r.model_id.clone(),
                usage: Default::default(),
                cached: false,
            })
        }
    }

    #[test]
    fn semaphore_bounds_in_flight_requests() {
        let slow = Slow { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) };
        let limited = Arc::new(ConcurrencyLimit::new(slow, 2));
        thread::scope(|s| {
            for _ in 0..8 {
                let l = Arc::clone(&limited);
                s.spawn(move || l.complete(&req()).unwrap());
            }
        });
        assert!(limited.inner.peak.load(Ordering::SeqCst) <= 2);
    }
}
