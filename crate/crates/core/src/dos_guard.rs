//! Per-source sliding-window rate limiting with fixed-duration bans.

use std::collections::VecDeque;
use std::net::{IpAddr, SocketAddr};

use dashmap::DashMap;
use parking_lot::Mutex;
use thiserror::Error;

use crate::domain::{Layer, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLimitConfig {
    pub max_requests: u32,
    pub window_ms: u64,
    pub ban_ms: u64,
    pub max_tracked_sources: usize,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        Self {
            max_requests: 100,
            window_ms: 10_000,
            ban_ms: 60_000,
            max_tracked_sources: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RateLimitConfigError {
    #[error("max_requests must be positive")]
    ZeroRequests,
    #[error("window must be positive")]
    ZeroWindow,
    #[error("ban duration must be at least the window")]
    BanShorterThanWindow,
    #[error("must track at least one source")]
    ZeroSources,
}

impl RateLimitConfig {
    pub fn validate(&self) -> Result<(), RateLimitConfigError> {
        if self.max_requests == 0 {
            return Err(RateLimitConfigError::ZeroRequests);
        }
        if self.window_ms == 0 {
            return Err(RateLimitConfigError::ZeroWindow);
        }
        if self.ban_ms < self.window_ms {
            return Err(RateLimitConfigError::BanShorterThanWindow);
        }
        if self.max_tracked_sources == 0 {
            return Err(RateLimitConfigError::ZeroSources);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceState {
    /// Allowed request times inside the current window, oldest first.
    pub timestamps: VecDeque<u64>,
    pub banned_until: Option<u64>,
    pub last_seen: u64,
}

impl SourceState {
    fn idle_at(&self, now: u64, window: u64) -> bool {
        let banned = self.banned_until.is_some_and(|b| b > now);
        let recent = self.timestamps.iter().any(|&t| t + window > now);
        !banned && !recent
    }
}

/// Rate limiting key: the IP part of a socket address, or the raw string.
pub fn source_key(source: &str) -> String {
    if let Ok(sa) = source.parse::<SocketAddr>() {
        return sa.ip().to_string();
    }
    if let Ok(ip) = source.parse::<IpAddr>() {
        return ip.to_string();
    }
    source.to_string()
}

pub struct DosGuard {
    cfg: RateLimitConfig,
    sources: DashMap<String, SourceState>,
    /// Serializes admission of new sources so the table bound holds.
    admit: Mutex<()>,
}

impl std::fmt::Debug for DosGuard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DosGuard")
            .field("cfg", &self.cfg)
            .field("tracked", &self.sources.len())
            .finish()
    }
}

impl DosGuard {
    pub fn new(cfg: RateLimitConfig) -> Result<Self, RateLimitConfigError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            sources: DashMap::new(),
            admit: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &RateLimitConfig {
        &self.cfg
    }

    pub fn tracked_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn state(&self, source: &str) -> Option<SourceState> {
        self.sources.get(&source_key(source)).map(|s| s.clone())
    }

    fn decide(&self, state: &mut SourceState, now: u64) -> Verdict {
        state.last_seen = state.last_seen.max(now);
        if let Some(until) = state.banned_until {
            if until > now {
                return Verdict::deny(Layer::DosGuard, "banned", "too many requests");
            }
            state.banned_until = None;
        }
        let window = self.cfg.window_ms;
        while state.timestamps.front().is_some_and(|&t| t + window <= now) {
            state.timestamps.pop_front();
        }
        // Out-of-order arrivals can leave later stamps in the deque.
        let in_window = state
            .timestamps
            .iter()
            .filter(|&&t| t <= now && t + window > now)
            .count();
        if in_window + 1 > self.cfg.max_requests as usize {
            state.banned_until = Some(now + self.cfg.ban_ms);
            return Verdict::deny(
                Layer::DosGuard,
                "rate-exceeded",
                format!("more than {} requests in {} ms", self.cfg.max_requests, window),
            );
        }
        let pos = state.timestamps.partition_point(|&t| t <= now);
        state.timestamps.insert(pos, now);
        Verdict::allow(Layer::DosGuard, "within-limit")
    }

    /// Records one request from `source` at `now` and decides whether it passes.
    pub fn record_and_check(&self, source: &str, now: u64) -> Verdict {
        let key = source_key(source);
        if let Some(mut state) = self.sources.get_mut(&key) {
            return self.decide(&mut state, now);
        }
        let _admit = self.admit.lock();
        if !self.sources.contains_key(&key)
            && self.sources.len() >= self.cfg.max_tracked_sources
            && !self.evict_one(now)
        {
            return Verdict::deny(Layer::DosGuard, "capacity", "too many requests");
        }
        let mut state = self.sources.entry(key).or_default();
        self.decide(&mut state, now)
    }

    /// Evicts the least recently active source that is not banned.
    fn evict_one(&self, now: u64) -> bool {
        let victim = self
            .sources
            .iter()
            .filter(|e| !e.banned_until.is_some_and(|b| b > now))
            .min_by_key(|e| (e.last_seen, e.key().clone()))
            .map(|e| e.key().clone());
        match victim {
            Some(k) => self.sources.remove(&k).is_some(),
            None => false,
        }
    }

    /// Forgets sources with no requests in the window and no active ban.
    pub fn purge(&self, now: u64) -> usize {
        let before = self.sources.len();
        let window = self.cfg.window_ms;
        self.sources.retain(|_, s| !s.idle_at(now, window));
        before - self.sources.len()
    }
}
