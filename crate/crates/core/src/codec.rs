//! Bottleneck quantization and payload-size accounting.
//!
//! Quantization is symmetric and per-tensor: one `f32` scale plus one signed
//! byte per element. The serialized form is the scale as little-endian IEEE-754
//! followed by the data bytes in row-major order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest magnitude a quantized element may take.
pub const QMAX: i8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub scale: f32,
    pub mode: QuantMode,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Serialized size: one byte per element plus the 4-byte scale.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend(self.data.iter().map(|&q| q as u8));
        out
    }

    /// Parses a payload produced by [`QuantizedTensor::to_bytes`] for a tensor of `shape`.
    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel + 4 {
            return Err(Error::CorruptPayload(format!(
                "expected {} bytes for shape {shape:?}, got {}",
                numel + 4,
                bytes.len()
            )));
        }
        let scale = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::CorruptPayload(format!("invalid scale {scale}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: bytes[4..].iter().map(|&b| b as i8).collect(),
            scale,
            mode: QuantMode::Symmetric,
        })
    }
}

/// Significant bits kept in the scale. With at most 7 bits in `|q| <= 127`,
/// every product `q * scale` is exactly representable as an `f32`.
const SCALE_BITS: u32 = 17;

/// `max_abs / 127`, rounded up to [`SCALE_BITS`] significant bits.
pub fn scale_for(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let exact = max_abs as f64 / QMAX as f64;
    let mask = (1u64 << (52 - (SCALE_BITS - 1))) - 1;
    let bits = exact.to_bits();
    let rounded = if bits & mask == 0 { exact } else { f64::from_bits((bits | mask) + 1) };
    let mut scale = rounded as f32;
    while (scale as f64) < exact {
        scale = scale.next_up();
    }
    scale
}

/// Nearest level to `x / s`, ties away from zero. The division only proposes a
/// candidate; `x - k * s` is exact in f64, so the neighbours are compared exactly.
fn round_level(x: f32, s: f64) -> f64 {
    let x = x as f64;
    let q = (x / s).round();
    let closer = |a: f64, b: f64| {
        let (ea, eb) = ((x - a * s).abs(), (x - b * s).abs());
        if ea < eb || (ea == eb && a.abs() > b.abs()) {
            a
        } else {
            b
        }
    };
    closer(closer(q - 1.0, q), q + 1.0)
}

pub fn quantize(t: &Tensor<f32>) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::InvalidTensor);
    }
    let max_abs = t.data().iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    let scale = scale_for(max_abs);
    let s = scale as f64;
    let data = t.data().iter().map(|&x| round_level(x, s).clamp(-(QMAX as f64), QMAX as f64) as i8).collect();
    Ok(QuantizedTensor { shape: t.shape().to_vec(), data, scale, mode: QuantMode::Symmetric })
}

pub fn dequantize(qt: &QuantizedTensor) -> Result<Tensor<f32>> {
    let numel: usize = qt.shape.iter().product();
    if numel != qt.data.len() {
        return Err(Error::CorruptPayload(format!(
            "shape {:?} holds {numel} elements but data has {}",
            qt.shape,
            qt.data.len()
        )));
    }
    if !(qt.scale.is_finite() && qt.scale > 0.0) {
        return Err(Error::CorruptPayload(format!("invalid scale {}", qt.scale)));
    }
    let s = qt.scale as f64;
    let data = qt.data.iter().map(|&q| (q as f64 * s) as f32).collect();
    Tensor::from_vec(&qt.shape, data)
}

/// Fraction of elements removed when sending `bottleneck` instead of `input`.
pub fn element_reduction(input_shape: &[usize], bottleneck_shape: &[usize]) -> f64 {
    let input: usize = input_shape.iter().product();
    let bottleneck: usize = bottleneck_shape.iter().product();
    1.0 - bottleneck as f64 / input as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum PayloadFormat {
    Bq8,
    Float32,
    /// Average size of a JPEG-compressed input; JPEG encoding itself is not performed.
    ConfiguredJpeg { bytes: Option<u64> },
}

pub fn payload_size(shape: &[usize], format: PayloadFormat) -> Result<u64> {
    let numel: u64 = shape.iter().map(|&d| d as u64).product();
    match format {
        PayloadFormat::Bq8 => Ok(numel + 4),
        PayloadFormat::Float32 => Ok(4 * numel),
        PayloadFormat::ConfiguredJpeg { bytes: Some(b) } => Ok(b),
        PayloadFormat::ConfiguredJpeg { bytes: None } => {
            Err(Error::MissingConfig("average JPEG payload size (jpeg_bytes)".into()))
        }
    }
}

/// Encoding applied to the bottleneck tensor before it leaves the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Float32,
    Bq8,
}

impl Codec {
    pub const ALL: [Codec; 2] = [Codec::Float32, Codec::Bq8];

    pub fn wire_id(self) -> u8 {
        match self {
            Codec::Float32 => 0,
            Codec::Bq8 => 1,
        }
    }

    pub fn from_wire_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Codec::Float32),
            1 => Some(Codec::Bq8),
            _ => None,
        }
    }

    pub fn payload_len(self, shape: &[usize]) -> usize {
        let numel: usize = shape.iter().product();
        match self {
            Codec::Float32 => 4 * numel,
            Codec::Bq8 => numel + 4,
        }
    }

    pub fn encode(self, t: &Tensor<f32>) -> Result<Vec<u8>> {
        match self {
            Codec::Float32 => {
                if !t.is_finite() {
                    return Err(Error::InvalidTensor);
                }
                Ok(t.data().iter().flat_map(|x| x.to_le_bytes()).collect())
            }
            Codec::Bq8 => Ok(quantize(t)?.to_bytes()),
        }
    }

    pub fn decode(self, shape: &[usize], bytes: &[u8]) -> Result<Tensor<f32>> {
        match self {
            Codec::Float32 => {
                let expected = self.payload_len(shape);
                if bytes.len() != expected {
                    return Err(Error::CorruptPayload(format!(
                        "expected {expected} bytes for shape {shape:?}, got {}",
                        bytes.len()
                    )));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(shape, data)
            }
            Codec::Bq8 => dequantize(&QuantizedTensor::from_bytes(shape, bytes)?),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Float32 => "float32",
            Codec::Bq8 => "bq8",
        })
    }
}

impl FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "float32" | "f32" => Ok(Codec::Float32),
            "bq8" => Ok(Codec::Bq8),
            other => Err(Error::MissingConfig(format!("unknown codec `{other}` (expected float32 or bq8)"))),
        }
    }
}
