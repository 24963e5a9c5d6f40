//! NR-V2X infrastructure-to-vehicle link: serialization delay, rate budget,
//! and a single serial link that delivers frames in order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Theoretical NR-V2X rate range for a 20 MHz sub-6 GHz carrier.
pub const NR_V2X_MIN_BPS: f64 = 19.1e6;
pub const NR_V2X_MAX_BPS: f64 = 76.5e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    /// Skip a frame that would wait behind a busy link past its deadline.
    DropStale,
    Queue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub data_rate_bps: f64,
    /// Processing and channel access delay added to every delivery.
    pub base_latency_s: f64,
    pub frame_period_s: f64,
    pub drop_policy: DropPolicy,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            data_rate_bps: NR_V2X_MIN_BPS,
            base_latency_s: 0.01,
            frame_period_s: 0.05,
            drop_policy: DropPolicy::DropStale,
        }
    }
}

impl LinkConfig {
    pub fn with_rate_mbps(mbps: f64) -> Self {
        Self {
            data_rate_bps: mbps * 1e6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Small slack so "19.1" typed in Mbps still validates.
        let in_range = self.data_rate_bps >= NR_V2X_MIN_BPS * (1.0 - 1e-9)
            && self.data_rate_bps <= NR_V2X_MAX_BPS * (1.0 + 1e-9);
        if !in_range {
            return Err(Error::Config(format!(
                "data rate {} bps outside NR-V2X range [{NR_V2X_MIN_BPS}, {NR_V2X_MAX_BPS}]",
                self.data_rate_bps
            )));
        }
        if !(self.base_latency_s >= 0.0) || !self.base_latency_s.is_finite() {
            return Err(Error::Config(format!(
                "base latency must be >= 0, got {}",
                self.base_latency_s
            )));
        }
        if !(self.frame_period_s > 0.0) || !self.frame_period_s.is_finite() {
            return Err(Error::Config(format!(
                "frame period must be > 0, got {}",
                self.frame_period_s
            )));
        }
        Ok(())
    }

    fn serialization_time(&self, size_bytes: usize) -> f64 {
        size_bytes as f64 * 8.0 / self.data_rate_bps
    }
}

/// Time from hand-off to arrival for an idle link.
pub fn transmit_time(size_bytes: usize, cfg: &LinkConfig) -> f64 {
    cfg.serialization_time(size_bytes) + cfg.base_latency_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub feasible: bool,
    pub required_bps: f64,
    /// Required rate over link rate.
    pub utilization: f64,
    /// Required rate in the `KB/s / 1000` convention, KB = 1024 bytes
    /// (a 72 KB frame at 20 Hz reads 1.44).
    pub required_mb_per_s: f64,
    pub frame_bytes: usize,
    pub rate_hz: f64,
    pub data_rate_bps: f64,
}

pub fn budget_check(frame_bytes: usize, rate_hz: f64, cfg: &LinkConfig) -> Result<BudgetReport> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(Error::Argument(format!("frame rate must be > 0, got {rate_hz}")));
    }
    let required_bps = frame_bytes as f64 * 8.0 * rate_hz;
    Ok(BudgetReport {
        feasible: required_bps <= cfg.data_rate_bps,
        required_bps,
        utilization: required_bps / cfg.data_rate_bps,
        required_mb_per_s: frame_bytes as f64 / 1024.0 * rate_hz / 1000.0,
        frame_bytes,
        rate_hz,
        data_rate_bps: cfg.data_rate_bps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutgoingFrame {
    pub id: u64,
    pub timestamp_s: f64,
    pub size_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub frame_id: u64,
    /// Capture time of the frame.
    pub timestamp_s: f64,
    /// Start of transmission (the capture time for dropped frames).
    pub sent_at_s: f64,
    /// Arrival at the vehicle; infinite for dropped frames.
    pub arrives_at_s: f64,
    pub dropped: bool,
}

impl Delivery {
    pub fn latency(&self) -> f64 {
        self.arrives_at_s - self.timestamp_s
    }
}

/// One serial link, advanced frame by frame in timestamp order.
#[derive(Debug, Clone)]
pub struct LinkScheduler {
    cfg: LinkConfig,
    busy_until: f64,
    last_timestamp: f64,
    bytes_sent: usize,
    dropped: usize,
}

impl LinkScheduler {
    pub fn new(cfg: LinkConfig) -> Self {
        Self {
            cfg,
            busy_until: f64::NEG_INFINITY,
            last_timestamp: f64::NEG_INFINITY,
            bytes_sent: 0,
            dropped: 0,
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn bytes_sent(&self) -> usize {
        self.bytes_sent
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Hand a frame to the link. `next_timestamp` is the capture time of the
    /// frame that follows, when known; otherwise one frame period later is
    /// assumed. Under `DropStale`, a frame that finds the link busy is dropped
    /// when it could not finish before the next frame's capture time plus one
    /// frame period.
    pub fn offer(&mut self, frame: OutgoingFrame, next_timestamp: Option<f64>) -> Result<Delivery> {
        if frame.timestamp_s < self.last_timestamp {
            return Err(Error::Argument(format!(
                "frame {} timestamp {} precedes {}",
                frame.id, frame.timestamp_s, self.last_timestamp
            )));
        }
        self.last_timestamp = frame.timestamp_s;
        let start = frame.timestamp_s.max(self.busy_until);
        let done = start + self.cfg.serialization_time(frame.size_bytes);
        let waited = start > frame.timestamp_s;
        if waited && self.cfg.drop_policy == DropPolicy::DropStale {
            let next = next_timestamp.unwrap_or(frame.timestamp_s + self.cfg.frame_period_s);
            if done > next + self.cfg.frame_period_s {
                self.dropped += 1;
                return Ok(Delivery {
                    frame_id: frame.id,
                    timestamp_s: frame.timestamp_s,
                    sent_at_s: frame.timestamp_s,
                    arrives_at_s: f64::INFINITY,
                    dropped: true,
                });
            }
        }
        self.busy_until = done;
        self.bytes_sent += frame.size_bytes;
        Ok(Delivery {
            frame_id: frame.id,
            timestamp_s: frame.timestamp_s,
            sent_at_s: start,
            arrives_at_s: done + self.cfg.base_latency_s,
            dropped: false,
        })
    }
}

/// Schedule a whole stream on one link.
pub fn schedule(frames: &[OutgoingFrame], cfg: &LinkConfig) -> Result<Vec<Delivery>> {
    let mut link = LinkScheduler::new(*cfg);
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| link.offer(*f, frames.get(i + 1).map(|n| n.timestamp_s)))
        .collect()
}
