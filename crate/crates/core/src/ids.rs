//! 128-bit identifiers. Rendered as 32 lowercase hex digits on the wire.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u128);

        impl $name {
            pub const fn from_u128(v: u128) -> Self {
                Self(v)
            }

            pub const fn as_u128(self) -> u128 {
                self.0
            }

            pub fn to_bytes(self) -> [u8; 16] {
                self.0.to_be_bytes()
            }

            pub fn from_bytes(b: [u8; 16]) -> Self {
                Self(u128::from_be_bytes(b))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:032x}", self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:032x})", stringify!($name), self.0)
            }
        }

        impl FromStr for $name {
            type Err = ParseIdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if s.len() != 32 {
                    return Err(ParseIdError);
                }
                u128::from_str_radix(s, 16).map(Self).map_err(|_| ParseIdError)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

id_type!(
    /// Identifies one task (a single invocation, or one batch of invocations).
    TaskId
);
id_type!(
    /// Identifies a registered function across its versions.
    FunctionId
);
id_type!(
    /// Identifies a registered endpoint.
    EndpointId
);
id_type!(
    /// Identifies one manager registration at an agent. A restarted manager gets a new one.
    ManagerId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("identifier must be 32 hex digits")]
pub struct ParseIdError;

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn display_parse_roundtrip() {
        let id = TaskId(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
        let s = id.to_string();
        assert_eq!(s, "0123456789abcdef0011223344556677");
        assert_eq!(s.parse::<TaskId>().unwrap(), id);
        assert!("abc".parse::<TaskId>().is_err());
        assert!("zz23456789abcdef0011223344556677".parse::<TaskId>().is_err());
    }

    #[test]
    fn json_form_is_hex_string() {
        let id = EndpointId(5);
        let j = serde_json::to_string(&id).unwrap();
        assert_eq!(j, "\"00000000000000000000000000000005\"");
        assert_eq!(serde_json::from_str::<EndpointId>(&j).unwrap(), id);
    }
}
