//! Intrusion-triggered isolation of the data tier.
//!
//! The breaker counts watched [`ThreatEvent`]s in a sliding window. Once the
//! count reaches the threshold it isolates the data tier: every guarded
//! call is refused until an operator resets the link after a cooldown.
//! Tripping waits for in-flight guarded calls, so no data-tier operation
//! runs after the trip time.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::domain::{Authorizer, ThreatEvent, ThreatKind};

/// Permission an operator needs to reconnect the tiers.
pub const RESET_PERMISSION: &str = "breaker.reset";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionPolicy {
    pub threshold: u32,
    pub window_ms: u64,
    pub watched: BTreeSet<ThreatKind>,
    pub cooldown_ms: u64,
}

impl Default for DetectionPolicy {
    fn default() -> Self {
        Self {
            threshold: 3,
            window_ms: 5_000,
            watched: Self::default_watched(),
            cooldown_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("threshold must be at least 1")]
    ZeroThreshold,
    #[error("window must be positive")]
    ZeroWindow,
}

impl DetectionPolicy {
    pub fn default_watched() -> BTreeSet<ThreatKind> {
        [
            ThreatKind::Forgery,
            ThreatKind::Replay,
            ThreatKind::RuleMatch,
            ThreatKind::TamperedRecord,
        ]
        .into()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.threshold == 0 {
            return Err(PolicyError::ZeroThreshold);
        }
        if self.window_ms == 0 {
            return Err(PolicyError::ZeroWindow);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Connected,
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierLink {
    pub state: LinkState,
    pub tripped_at: Option<u64>,
    pub trip_reason: Option<String>,
    pub trip_count: u64,
}

impl TierLink {
    fn connected(trip_count: u64) -> Self {
        Self {
            state: LinkState::Connected,
            tripped_at: None,
            trip_reason: None,
            trip_count,
        }
    }

    pub fn is_isolated(&self) -> bool {
        self.state == LinkState::Isolated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub link: TierLink,
    /// Set when this event tripped the breaker.
    pub trip: Option<ThreatEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("data tier isolated")]
pub struct TierIsolated;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResetError {
    #[error("link is not isolated")]
    NotIsolated,
    #[error("cooldown active until {until}")]
    CooldownActive { until: u64 },
    #[error("{operator:?} lacks the {RESET_PERMISSION} permission")]
    PermissionDenied { operator: String },
}

pub struct Breaker {
    policy: DetectionPolicy,
    link: RwLock<TierLink>,
    window: Mutex<VecDeque<u64>>,
    notify: Mutex<Option<Box<dyn Write + Send>>>,
    tier2_ops: AtomicU64,
}

impl std::fmt::Debug for Breaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Breaker")
            .field("policy", &self.policy)
            .field("link", &*self.link.read())
            .finish_non_exhaustive()
    }
}

impl Breaker {
    pub fn new(policy: DetectionPolicy) -> Result<Self, PolicyError> {
        policy.validate()?;
        Ok(Self {
            policy,
            link: RwLock::new(TierLink::connected(0)),
            window: Mutex::new(VecDeque::new()),
            notify: Mutex::new(None),
            tier2_ops: AtomicU64::new(0),
        })
    }

    /// Writes `TRIP <unix_ms> <reason>` lines to `sink` on every trip.
    pub fn with_notifier(self, sink: impl Write + Send + 'static) -> Self {
        *self.notify.lock() = Some(Box::new(sink));
        self
    }

    pub fn policy(&self) -> &DetectionPolicy {
        &self.policy
    }

    pub fn link(&self) -> TierLink {
        self.link.read().clone()
    }

    /// Data-tier operations executed through [`Breaker::guard`] so far.
    pub fn tier2_operations(&self) -> u64 {
        self.tier2_ops.load(Ordering::SeqCst)
    }

    pub fn observe(&self, event: &ThreatEvent, now: u64) -> Observation {
        if !self.policy.watched.contains(&event.kind) {
            return Observation {
                link: self.link(),
                trip: None,
            };
        }
        let mut window = self.window.lock();
        if self.link.read().is_isolated() {
            // One trip per episode; events during isolation are not counted.
            return Observation {
                link: self.link(),
                trip: None,
            };
        }
        let span = self.policy.window_ms;
        window.push_back(now);
        window.retain(|&t| t <= now && t + span > now);
        if (window.len() as u64) < u64::from(self.policy.threshold) {
            return Observation {
                link: self.link(),
                trip: None,
            };
        }
        window.clear();
        let reason = format!(
            "{} watched events within {} ms (last {} from {})",
            self.policy.threshold, span, event.kind, event.source
        );
        let link = {
            let mut link = self.link.write();
            link.state = LinkState::Isolated;
            link.tripped_at = Some(now);
            link.trip_reason = Some(reason.clone());
            link.trip_count += 1;
            link.clone()
        };
        if let Some(sink) = self.notify.lock().as_mut() {
            // Notification is best effort; isolation has already happened.
            let _ = writeln!(sink, "TRIP {now} {reason}").and_then(|_| sink.flush());
        }
        Observation {
            link,
            trip: Some(ThreatEvent::new(now, ThreatKind::BreakerTrip, event.source.clone(), reason)),
        }
    }

    /// Runs a data-tier operation if the tiers are connected. The link cannot
    /// trip while `op` is running.
    pub fn guard<T>(&self, op: impl FnOnce() -> T) -> Result<T, TierIsolated> {
        let link = self.link.read();
        if link.is_isolated() {
            return Err(TierIsolated);
        }
        self.tier2_ops.fetch_add(1, Ordering::SeqCst);
        let out = op();
        drop(link);
        Ok(out)
    }

    pub fn reset(&self, now: u64, operator: &str, authz: &dyn Authorizer) -> Result<TierLink, ResetError> {
        if !authz.permits(operator, RESET_PERMISSION) {
            return Err(ResetError::PermissionDenied {
                operator: operator.to_string(),
            });
        }
        let mut window = self.window.lock();
        let mut link = self.link.write();
        let tripped_at = match (link.state, link.tripped_at) {
            (LinkState::Isolated, Some(t)) => t,
            _ => return Err(ResetError::NotIsolated),
        };
        let until = tripped_at + self.policy.cooldown_ms;
        if now < until {
            return Err(ResetError::CooldownActive { until });
        }
        *link = TierLink::connected(link.trip_count);
        window.clear();
        Ok(link.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn breaker() -> Breaker {
        Breaker::new(DetectionPolicy {
            threshold: 3,
            window_ms: 5_000,
            watched: DetectionPolicy::default_watched(),
            cooldown_ms: 10_000,
        })
        .unwrap()
    }

    fn ev(kind: ThreatKind, at: u64) -> ThreatEvent {
        ThreatEvent::new(at, kind, "10.0.0.9", "x")
    }

    fn admin_only(p: &str, f: &str) -> bool {
        p == "root" && f == RESET_PERMISSION
    }

    #[test]
    fn three_events_in_window_trip() {
        let b = breaker();
        assert!(!b.observe(&ev(ThreatKind::Forgery, 0), 0).link.is_isolated());
        assert!(!b.observe(&ev(ThreatKind::Forgery, 1_000), 1_000).link.is_isolated());
        let o = b.observe(&ev(ThreatKind::Forgery, 2_000), 2_000);
        assert!(o.link.is_isolated());
        assert_eq!(o.link.tripped_at, Some(2_000));
        assert_eq!(o.trip.unwrap().kind, ThreatKind::BreakerTrip);
    }

    #[test]
    fn spread_events_do_not_trip() {
        let b = breaker();
        for t in [0, 5_000, 10_000] {
            assert!(!b.observe(&ev(ThreatKind::Forgery, t), t).link.is_isolated());
        }
    }

    #[test]
    fn unwatched_kinds_ignored() {
        let b = breaker();
        for t in 0..10 {
            b.observe(&ev(ThreatKind::RateExceeded, t), t);
        }
        assert!(!b.link().is_isolated());
    }

    #[test]
    fn one_trip_per_episode() {
        let b = breaker();
        let trips = (0..50)
            .filter(|&t| b.observe(&ev(ThreatKind::Replay, t), t).trip.is_some())
            .count();
        assert_eq!(trips, 1);
        assert_eq!(b.link().trip_count, 1);
    }

    #[test]
    fn guard_refuses_when_isolated() {
        let b = breaker();
        assert_eq!(b.guard(|| 7), Ok(7));
        for t in 0..3 {
            b.observe(&ev(ThreatKind::TamperedRecord, t), t);
        }
        assert_eq!(b.guard(|| 7), Err(TierIsolated));
        assert_eq!(b.tier2_operations(), 1);
    }

    #[test]
    fn reset_rules() {
        let b = breaker();
        assert_eq!(b.reset(0, "root", &admin_only), Err(ResetError::NotIsolated));
        for t in 0..3 {
            b.observe(&ev(ThreatKind::Forgery, t), t);
        }
        assert_eq!(
            b.reset(5_000, "mallory", &admin_only),
            Err(ResetError::PermissionDenied {
                operator: "mallory".into()
            })
        );
        assert_eq!(
            b.reset(10_001, "root", &admin_only),
            Err(ResetError::CooldownActive { until: 10_002 })
        );
        let link = b.reset(10_002, "root", &admin_only).unwrap();
        assert_eq!(link.state, LinkState::Connected);
        assert_eq!(link.trip_count, 1);
        assert_eq!(b.guard(|| ()), Ok(()));
        // Counts were cleared: two new events do not trip.
        b.observe(&ev(ThreatKind::Forgery, 12_003), 12_003);
        b.observe(&ev(ThreatKind::Forgery, 12_004), 12_004);
        assert!(!b.link().is_isolated());
    }

    #[test]
    fn trip_notification_line() {
        #[derive(Clone, Default)]
        struct Sink(Arc<Mutex<Vec<u8>>>);
        impl Write for Sink {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let sink = Sink::default();
        let b = breaker().with_notifier(sink.clone());
        for t in [100, 200, 300] {
            b.observe(&ev(ThreatKind::Forgery, t), t);
        }
        let text = String::from_utf8(sink.0.lock().clone()).unwrap();
        assert!(text.starts_with("TRIP 300 3 watched events"));
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn guard_and_trip_concurrently_never_tear() {
        let b = Arc::new(breaker());
        let ops_after_trip = Arc::new(AtomicU64::new(0));
        let tripped = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let workers: Vec<_> = (0..4)
            .map(|_| {
                let b = Arc::clone(&b);
                let tripped = Arc::clone(&tripped);
                let after = Arc::clone(&ops_after_trip);
                std::thread::spawn(move || {
                    for _ in 0..20_000 {
                        let _ = b.guard(|| {
                            if tripped.load(Ordering::SeqCst) {
                                after.fetch_add(1, Ordering::SeqCst);
                            }
                        });
                    }
                })
            })
            .collect();
        for t in 0..3 {
            let o = b.observe(&ev(ThreatKind::Forgery, t), t);
            if o.link.is_isolated() {
                tripped.store(true, Ordering::SeqCst);
            }
        }
        for w in workers {
            w.join().unwrap();
        }
        assert_eq!(ops_after_trip.load(Ordering::SeqCst), 0);
    }
}
