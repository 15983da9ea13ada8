//! Registered functions and the built-in `bench` runtime vocabulary.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ids::FunctionId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Runtime {
    /// Body is a [`BenchOp`] expression.
    #[default]
    Bench,
    /// Body is a shell command; input on stdin, result from stdout.
    Shell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub function_id: FunctionId,
    pub version: u32,
    pub name: String,
    /// Opaque to the service; interpreted by workers according to `runtime`.
    #[serde(with = "b64")]
    pub body: Vec<u8>,
    pub runtime: Runtime,
    /// Execution environment name; empty means the default environment.
    #[serde(default)]
    pub container_tag: String,
    #[serde(default)]
    pub memoize: bool,
    pub owner: String,
    pub allowed_principals: BTreeSet<String>,
    pub registered_at_us: u64,
}

impl FunctionRecord {
    pub fn is_allowed(&self, principal: &str) -> bool {
        self.allowed_principals.contains(principal)
    }
}

/// Serde helper: bytes as standard base64.
pub mod b64 {
    use alloc::string::String;
    use alloc::vec::Vec;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
            match b {
                Some(b) => s.serialize_some(&base64::engine::general_purpose::STANDARD.encode(b)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| {
                    base64::engine::general_purpose::STANDARD
                        .decode(s.as_bytes())
                        .map_err(serde::de::Error::custom)
                })
                .transpose()
        }
    }
}

/// Operations understood by the `bench` runtime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BenchOp {
    /// Returns an empty raw payload.
    Noop,
    /// Sleeps, then returns the input.
    SleepMs(u64),
    /// Spins one core for the duration, then returns the input.
    StressMs(u64),
    /// Returns the input.
    Echo,
    /// Fails with the message.
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognized bench body {0:?}")]
pub struct BadBenchOp(pub String);

impl BenchOp {
    pub fn parse(body: &[u8]) -> Result<BenchOp, BadBenchOp> {
        let text = core::str::from_utf8(body).map_err(|_| BadBenchOp("<non-utf8>".into()))?;
        let s = text.trim();
        let bad = || BadBenchOp(s.to_string());
        let arg = |name: &str| -> Option<&str> {
            s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')').map(str::trim)
        };
        match s {
            "noop" => return Ok(BenchOp::Noop),
            "echo" => return Ok(BenchOp::Echo),
            _ => {}
        }
        if let Some(a) = arg("sleep_ms") {
            return a.parse().map(BenchOp::SleepMs).map_err(|_| bad());
        }
        if let Some(a) = arg("stress_ms") {
            return a.parse().map(BenchOp::StressMs).map_err(|_| bad());
        }
        if let Some(a) = arg("fail") {
            return Ok(BenchOp::Fail(a.to_string()));
        }
        Err(bad())
    }

    pub fn duration(&self) -> Duration {
        match self {
            BenchOp::SleepMs(ms) | BenchOp::StressMs(ms) => Duration::from_millis(*ms),
            _ => Duration::ZERO,
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchOp::Noop => f.write_str("noop"),
            BenchOp::SleepMs(ms) => write!(f, "sleep_ms({ms})"),
            BenchOp::StressMs(ms) => write!(f, "stress_ms({ms})"),
            BenchOp::Echo => f.write_str("echo"),
            BenchOp::Fail(m) => write!(f, "fail({m})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    #[test]
    fn parses_all_ops() {
        assert_eq!(BenchOp::parse(b"noop"), Ok(BenchOp::Noop));
        assert_eq!(BenchOp::parse(b" echo\n"), Ok(BenchOp::Echo));
        assert_eq!(BenchOp::parse(b"sleep_ms(100)"), Ok(BenchOp::SleepMs(100)));
        assert_eq!(BenchOp::parse(b"stress_ms( 5 )"), Ok(BenchOp::StressMs(5)));
        assert_eq!(BenchOp::parse(b"fail(boom)"), Ok(BenchOp::Fail("boom".into())));
        assert!(BenchOp::parse(b"sleep_ms(x)").is_err());
        assert!(BenchOp::parse(b"launch_rockets").is_err());
        assert!(BenchOp::parse(&[0xff]).is_err());
    }

    #[test]
    fn display_parses_back() {
        for op in [BenchOp::Noop, BenchOp::SleepMs(7), BenchOp::StressMs(1), BenchOp::Echo, BenchOp::Fail("m".into())] {
            assert_eq!(BenchOp::parse(format!("{op}").as_bytes()), Ok(op));
        }
    }
}
