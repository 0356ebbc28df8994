//! Latency and device-energy model for local, edge and split execution.
//!
//! End-to-end delay is head compute, uplink, tail compute and downlink, in that
//! order. Device energy integrates the configured powers over those durations.

pub mod channel;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use channel::{network_delay, ChannelKind, ChannelModel, TracePoint};

/// Size of an INFER_RESPONSE frame: 10-byte header plus a 16-byte body.
pub const RESPONSE_FRAME_BYTES: u64 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    Measured,
    #[default]
    Configured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionProfile {
    pub d_head_s: f64,
    pub d_tail_s: f64,
    pub p_head_w: f64,
    pub p_net_w: f64,
    #[serde(default)]
    pub p_idle_w: f64,
    #[serde(default)]
    pub source: ProfileSource,
}

impl ExecutionProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_head_s", self.d_head_s),
            ("d_tail_s", self.d_tail_s),
            ("p_head_w", self.p_head_w),
            ("p_net_w", self.p_net_w),
            ("p_idle_w", self.p_idle_w),
        ];
        match fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::MissingConfig(format!("profile field {name} must be finite and >= 0, got {v}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Local,
    Edge,
    Split,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Local, Strategy::Edge, Strategy::Split];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Local => "local",
            Strategy::Edge => "edge",
            Strategy::Split => "split",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::MissingConfig(format!("unknown strategy `{s}` (expected local, edge or split)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub d_head_s: f64,
    pub d_net_up_s: f64,
    pub d_tail_s: f64,
    pub d_net_down_s: f64,
    pub total_s: f64,
}

impl DelayBreakdown {
    pub fn new(d_head_s: f64, d_net_up_s: f64, d_tail_s: f64, d_net_down_s: f64) -> Self {
        Self { d_head_s, d_net_up_s, d_tail_s, d_net_down_s, total_s: d_head_s + d_net_up_s + d_tail_s + d_net_down_s }
    }
}

/// Delay of one inference under `strategy`.
///
/// For `Local` the profile's `d_head_s` is the full-model device time and no
/// network is used. For `Edge` the device computes nothing and uploads
/// `payload_bytes` (the input image). `Split` uses every term. The uplink
/// starts at `t0 + d_head` and the downlink when the tail finishes.
pub fn end_to_end(
    profile: &ExecutionProfile,
    channel: &ChannelModel,
    strategy: Strategy,
    payload_bytes: u64,
    response_bytes: u64,
    t0: f64,
) -> Result<DelayBreakdown> {
    profile.validate()?;
    channel.validate()?;
    match strategy {
        Strategy::Local => Ok(DelayBreakdown::new(profile.d_head_s, 0.0, 0.0, 0.0)),
        Strategy::Edge | Strategy::Split => {
            let d_head = if strategy == Strategy::Edge { 0.0 } else { profile.d_head_s };
            let up = network_delay(payload_bytes, channel, t0 + d_head)?;
            let down = network_delay(response_bytes, channel, t0 + d_head + up + profile.d_tail_s)?;
            Ok(DelayBreakdown::new(d_head, up, profile.d_tail_s, down))
        }
    }
}

/// Device energy in joules over one inference.
pub fn device_energy(profile: &ExecutionProfile, b: &DelayBreakdown) -> f64 {
    profile.p_head_w * b.d_head_s + profile.p_net_w * (b.d_net_up_s + b.d_net_down_s) + profile.p_idle_w * b.d_tail_s
}

/// A model entering the sweep: its accuracy and what each strategy transmits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepModel {
    pub name: String,
    #[serde(default)]
    pub split_point: String,
    #[serde(default)]
    pub channels: usize,
    #[serde(default)]
    pub codec: String,
    /// Bytes uploaded by the split strategy.
    pub payload_bytes: u64,
    /// Bytes uploaded by edge offloading (raw or configured JPEG input size).
    pub input_bytes: u64,
    pub top1: f64,
}

/// Execution profiles by strategy, optionally overridden per model as `"{model}:{strategy}"`.
pub type ProfileTable = BTreeMap<String, ExecutionProfile>;

pub fn lookup_profile<'a>(profiles: &'a ProfileTable, model: &str, strategy: Strategy) -> Result<&'a ExecutionProfile> {
    profiles
        .get(&format!("{model}:{strategy}"))
        .or_else(|| profiles.get(strategy.as_str()))
        .ok_or_else(|| Error::MissingConfig(format!("no execution profile for strategy `{strategy}` (model `{model}`)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_name: String,
    pub split_point: String,
    pub channels: usize,
    pub codec: String,
    pub channel: String,
    pub rate_bps: f64,
    pub strategy: Strategy,
    pub payload_bytes: u64,
    pub top1: f64,
    pub d_head_s: f64,
    pub d_net_up_s: f64,
    pub d_tail_s: f64,
    pub d_net_down_s: f64,
    pub d_e2e_s: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub response_bytes: u64,
    pub t0: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { response_bytes: RESPONSE_FRAME_BYTES, t0: 0.0 }
    }
}

/// One row per model, channel and strategy, in that nesting order.
pub fn sweep(
    models: &[SweepModel],
    channels: &[ChannelModel],
    profiles: &ProfileTable,
    strategies: &BTreeSet<Strategy>,
    options: SweepOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(models.len() * channels.len() * strategies.len());
    for m in models {
        for ch in channels {
            for &st in strategies {
                let profile = lookup_profile(profiles, &m.name, st)?;
                let (payload, codec) = match st {
                    Strategy::Local => (0, "none".to_string()),
                    Strategy::Edge => (m.input_bytes, "input".to_string()),
                    Strategy::Split => (m.payload_bytes, m.codec.clone()),
                };
                let response = if st == Strategy::Local { 0 } else { options.response_bytes };
                let b = end_to_end(profile, ch, st, payload, response, options.t0)?;
                rows.push(SweepRow {
                    model_name: m.name.clone(),
                    split_point: m.split_point.clone(),
                    channels: m.channels,
                    codec,
                    channel: ch.name.clone(),
                    rate_bps: ch.rate_at(options.t0),
                    strategy: st,
                    payload_bytes: payload,
                    top1: m.top1,
                    d_head_s: b.d_head_s,
                    d_net_up_s: b.d_net_up_s,
                    d_tail_s: b.d_tail_s,
                    d_net_down_s: b.d_net_down_s,
                    d_e2e_s: b.total_s,
                    energy_j: device_energy(profile, &b),
                });
            }
        }
    }
    Ok(rows)
}

/// Lowest total delay wins; ties go to lower energy, then to the earlier strategy.
pub fn choose_strategy(rows: &[SweepRow]) -> Option<Strategy> {
    rows.iter()
        .min_by(|a, b| {
            a.d_e2e_s
                .total_cmp(&b.d_e2e_s)
                .then(a.energy_j.total_cmp(&b.energy_j))
                .then(a.strategy.cmp(&b.strategy))
        })
        .map(|r| r.strategy)
}

/// Rate at which split and edge execution take equally long on a fixed-rate
/// channel. Split wins below it. Returns `None` when one strategy dominates
/// at every rate.
///
/// The propagation and downlink terms are identical for both strategies and
/// cancel, leaving `8 (input - payload) / r = d_head + d_tail,split - d_tail,edge`.
pub fn split_edge_crossover(split: &ExecutionProfile, edge: &ExecutionProfile, input_bytes: u64, payload_bytes: u64) -> Option<f64> {
    let saved_bits = 8.0 * (input_bytes as f64 - payload_bytes as f64);
    let extra_compute = split.d_head_s + split.d_tail_s - edge.d_tail_s;
    (saved_bits > 0.0 && extra_compute > 0.0).then(|| saved_bits / extra_compute)
}

/// Locates the split/edge crossover by bisection on the simulator itself, over
/// fixed-rate channels with round-trip time `rtt_s`. `lo` and `hi` must bracket it.
pub fn simulated_crossover(
    model: &SweepModel,
    profiles: &ProfileTable,
    rtt_s: f64,
    response_bytes: u64,
    mut lo: f64,
    mut hi: f64,
) -> Result<Option<f64>> {
    let split = lookup_profile(profiles, &model.name, Strategy::Split)?;
    let edge = lookup_profile(profiles, &model.name, Strategy::Edge)?;
    let gap = |rate: f64| -> Result<f64> {
        let ch = ChannelModel::fixed(rate, rtt_s)?;
        let s = end_to_end(split, &ch, Strategy::Split, model.payload_bytes, response_bytes, 0.0)?;
        let e = end_to_end(edge, &ch, Strategy::Edge, model.input_bytes, response_bytes, 0.0)?;
        Ok(s.total_s - e.total_s)
    };
    let (g_lo, g_hi) = (gap(lo)?, gap(hi)?);
    if g_lo.signum() == g_hi.signum() {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if gap(mid)?.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-13 {
            break;
        }
    }
    Ok(Some((lo * hi).sqrt()))
}
