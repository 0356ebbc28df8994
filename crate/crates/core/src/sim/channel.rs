//! Channel models: a constant rate or a piecewise-constant rate trace.
//!
//! A trace point `(t_i, r_i)` sets the rate from `t_i` until the next point.
//! The last rate persists after the final timestamp, but a transfer must
//! start inside `[t_first, t_last]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_s: f64,
    pub rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelKind {
    FixedRate { rate_bps: f64 },
    Trace { points: Vec<TracePoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub kind: ChannelKind,
    #[serde(default)]
    pub rtt_s: f64,
}

impl ChannelModel {
    pub fn fixed(rate_bps: f64, rtt_s: f64) -> Result<Self> {
        let ch = Self { name: format!("{rate_bps} bps"), kind: ChannelKind::FixedRate { rate_bps }, rtt_s };
        ch.validate()?;
        Ok(ch)
    }

    pub fn trace(points: Vec<TracePoint>, rtt_s: f64) -> Result<Self> {
        let ch = Self { name: "trace".into(), kind: ChannelKind::Trace { points }, rtt_s };
        ch.validate()?;
        Ok(ch)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Reads a `t_s,rate_bps` CSV file.
    pub fn from_trace_csv(path: &Path, rtt_s: f64) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["t_s", "rate_bps"] {
            return Err(Error::InvalidChannel(format!(
                "{}: expected header `t_s,rate_bps`, found `{}`",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let points = reader.deserialize().collect::<std::result::Result<Vec<TracePoint>, _>>()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
        Ok(Self::trace(points, rtt_s)?.named(name))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtt_s.is_finite() && self.rtt_s >= 0.0) {
            return Err(Error::InvalidChannel(format!("rtt must be finite and >= 0, got {}", self.rtt_s)));
        }
        match &self.kind {
            ChannelKind::FixedRate { rate_bps } => check_rate(*rate_bps),
            ChannelKind::Trace { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidChannel("trace has no points".into()));
                }
                for p in points {
                    if !p.t_s.is_finite() {
                        return Err(Error::InvalidChannel(format!("non-finite timestamp {}", p.t_s)));
                    }
                    check_rate(p.rate_bps)?;
                }
                if let Some(w) = points.windows(2).find(|w| w[1].t_s <= w[0].t_s) {
                    return Err(Error::InvalidChannel(format!(
                        "timestamps must be strictly increasing ({} then {})",
                        w[0].t_s, w[1].t_s
                    )));
                }
                Ok(())
            }
        }
    }

    /// Rate in effect at `t` (the fixed rate, or the trace segment containing `t`).
    pub fn rate_at(&self, t: f64) -> f64 {
        match &self.kind {
            ChannelKind::FixedRate { rate_bps } => *rate_bps,
            ChannelKind::Trace { points } => {
                let i = points.partition_point(|p| p.t_s <= t).saturating_sub(1);
                points[i].rate_bps
            }
        }
    }

    /// Transmission time of `size_bytes` starting at `t0`, without propagation.
    pub fn transmission_time(&self, size_bytes: u64, t0: f64) -> Result<f64> {
        let bits = 8.0 * size_bytes as f64;
        match &self.kind {
            ChannelKind::FixedRate { rate_bps } => Ok(bits / rate_bps),
            ChannelKind::Trace { points } => {
                let start = points[0].t_s;
                let end = points[points.len() - 1].t_s;
                if !(t0 >= start && t0 <= end) {
                    return Err(Error::TraceExhausted { t0, start, end });
                }
                let mut i = points.partition_point(|p| p.t_s <= t0) - 1;
                let mut remaining = bits;
                let mut t = t0;
                let mut elapsed = 0.0;
                loop {
                    let rate = points[i].rate_bps;
                    match points.get(i + 1) {
                        Some(next) if remaining > rate * (next.t_s - t) => {
                            remaining -= rate * (next.t_s - t);
                            elapsed += next.t_s - t;
                            t = next.t_s;
                            i += 1;
                        }
                        _ => return Ok(elapsed + remaining / rate),
                    }
                }
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidChannel(format!("rates must be finite and > 0, got {rate}")))
    }
}

/// One-way network delay: transmission time plus half the round-trip time.
pub fn network_delay(size_bytes: u64, channel: &ChannelModel, t0: f64) -> Result<f64> {
    Ok(channel.transmission_time(size_bytes, t0)? + channel.rtt_s / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_example() {
        let ch = ChannelModel::fixed(37500.0, 0.0).unwrap();
        assert!((network_delay(10096, &ch, 0.0).unwrap() - 2.153_813_333_333_333).abs() < 1e-12);
    }

    #[test]
    fn trace_example_spans_two_segments() {
        let ch = ChannelModel::trace(
            vec![TracePoint { t_s: 0.0, rate_bps: 1e6 }, TracePoint { t_s: 0.04, rate_bps: 1e7 }],
            0.0,
        )
        .unwrap();
        assert!((network_delay(10000, &ch, 0.0).unwrap() - 0.044).abs() < 1e-12);
        assert!(matches!(network_delay(1, &ch, 0.5), Err(Error::TraceExhausted { .. })));
        assert!(matches!(network_delay(1, &ch, -0.1), Err(Error::TraceExhausted { .. })));
    }

    #[test]
    fn rejects_bad_traces() {
        let p = |t, r| TracePoint { t_s: t, rate_bps: r };
        assert!(ChannelModel::trace(vec![p(0.0, 1.0), p(0.0, 2.0)], 0.0).is_err());
        assert!(ChannelModel::trace(vec![p(0.0, 0.0)], 0.0).is_err());
        assert!(ChannelModel::trace(vec![], 0.0).is_err());
        assert!(ChannelModel::fixed(1.0, -1.0).is_err());
    }

    #[test]
    fn zero_bytes_costs_half_rtt() {
        let ch = ChannelModel::fixed(1e6, 0.03).unwrap();
        assert_eq!(network_delay(0, &ch, 0.0).unwrap(), 0.015);
    }
}
