//! Aggregation of decoded sensor readings.
//!
//! A reading is the first two payload bytes as a big-endian signed 16-bit
//! integer in hundredths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-point scale of a reading.
pub const READING_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateFn {
    Sum,
    Average,
    Min,
    Max,
}

impl AggregateFn {
    pub const ALL: [AggregateFn; 4] = [AggregateFn::Sum, AggregateFn::Average, AggregateFn::Min, AggregateFn::Max];

    pub fn name(self) -> &'static str {
        match self {
            AggregateFn::Sum => "sum",
            AggregateFn::Average => "average",
            AggregateFn::Min => "min",
            AggregateFn::Max => "max",
        }
    }
}

impl fmt::Display for AggregateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregateFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AggregateFn::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown aggregate {s:?}")))
    }
}

/// An aggregate value and the number of readings behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    pub count: usize,
}

/// Encode a reading, saturating at the representable range.
pub fn encode_reading(value: f64) -> [u8; 2] {
    let raw = (value / READING_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
    raw.to_be_bytes()
}

/// Reading carried by a payload, if it is long enough.
pub fn decode_reading(payload: &[u8]) -> Option<f64> {
    let bytes: [u8; 2] = payload.get(..2)?.try_into().ok()?;
    Some(i16::from_be_bytes(bytes) as f64 * READING_SCALE)
}

/// Aggregate the readings of all contributing packets.
pub fn aggregate(values: &[f64], f: AggregateFn) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::NoData);
    }
    let count = values.len();
    let sum = || values.iter().sum::<f64>();
    let value = match f {
        AggregateFn::Sum => sum(),
        AggregateFn::Average => sum() / count as f64,
        AggregateFn::Min => values.iter().cloned().fold(f64::INFINITY, f64::min),
        AggregateFn::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(Aggregate { value, count })
}
