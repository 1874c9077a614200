//! Memory sizes in decimal SI units (`1MB` = 10^6 bytes).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::addr::PAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const fn mb(n: u64) -> Self {
        ByteSize(n * 1_000_000)
    }

    pub const fn gb(n: u64) -> Self {
        ByteSize(n * 1_000_000_000)
    }

    pub fn bytes(self) -> u64 {
        self.0
    }

    /// Number of whole pages covered by this size.
    pub fn pages(self) -> u64 {
        self.0 / PAGE_SIZE as u64
    }

    pub fn from_pages(pages: u64) -> Self {
        ByteSize(pages * PAGE_SIZE as u64)
    }
}

/// The seven memory sizes used throughout the published measurements.
pub const ANCHOR_SIZES: [ByteSize; 7] = [
    ByteSize::mb(1),
    ByteSize::mb(10),
    ByteSize::mb(50),
    ByteSize::mb(100),
    ByteSize::mb(250),
    ByteSize::mb(500),
    ByteSize::gb(1),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid size {0:?} (expected e.g. 4096, 10MB, 2.4GB)")]
pub struct ParseSizeError(pub String);

impl FromStr for ByteSize {
    type Err = ParseSizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let err = || ParseSizeError(s.to_string());
        let upper = t.to_ascii_uppercase();
        let (num, mult) = if let Some(n) = upper.strip_suffix("GB") {
            (n, 1e9)
        } else if let Some(n) = upper.strip_suffix("MB") {
            (n, 1e6)
        } else if let Some(n) = upper.strip_suffix("KB") {
            (n, 1e3)
        } else if let Some(n) = upper.strip_suffix('B') {
            (n, 1.0)
        } else {
            (upper.as_str(), 1.0)
        };
        let num = num.trim().replace(',', "");
        if num.is_empty() {
            return Err(err());
        }
        if mult == 1.0 {
            return num.parse::<u64>().map(ByteSize).map_err(|_| err());
        }
        let v: f64 = num.parse().map_err(|_| err())?;
        if !v.is_finite() || v < 0.0 {
            return Err(err());
        }
        Ok(ByteSize((v * mult).round() as u64))
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        if b >= 1_000_000_000 && b.is_multiple_of(100_000_000) {
            let g = b as f64 / 1e9;
            write!(f, "{g}GB")
        } else if b >= 1_000_000 && b.is_multiple_of(100_000) {
            let m = b as f64 / 1e6;
            write!(f, "{m}MB")
        } else {
            write!(f, "{b}")
        }
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(ByteSize(n)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_units() {
        assert_eq!("1MB".parse::<ByteSize>().unwrap(), ByteSize(1_000_000));
        assert_eq!("2.4GB".parse::<ByteSize>().unwrap(), ByteSize(2_400_000_000));
        assert_eq!("4096".parse::<ByteSize>().unwrap(), ByteSize(4096));
        assert_eq!("750mb".parse::<ByteSize>().unwrap(), ByteSize(750_000_000));
        assert!("MB".parse::<ByteSize>().is_err());
        assert!("-1MB".parse::<ByteSize>().is_err());
    }

    #[test]
    fn display_round_trips() {
        for s in ANCHOR_SIZES {
            assert_eq!(s.to_string().parse::<ByteSize>().unwrap(), s);
        }
        assert_eq!(ByteSize::gb(1).to_string(), "1GB");
        assert_eq!(ByteSize(2_400_000_000).to_string(), "2.4GB");
    }
}
