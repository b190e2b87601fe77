//! Nanosecond time arithmetic and duration parsing.
//!
//! All instants are nanoseconds relative to the start instant of a run; all
//! durations are nanoseconds.

use std::fmt;

use serde::{de, Deserializer, Serializer};

/// Nanoseconds, used both for durations and for instants since start.
pub type Nanos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;
pub const NS_PER_S: Nanos = 1_000_000_000;

pub const fn ms(v: u64) -> Nanos {
    v * NS_PER_MS
}

pub const fn us(v: u64) -> Nanos {
    v * NS_PER_US
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Least common multiple, `None` on overflow.
pub fn checked_lcm(a: u64, b: u64) -> Option<u64> {
    if a == 0 || b == 0 {
        return Some(0);
    }
    (a / gcd(a, b)).checked_mul(b)
}

/// Parses `"250"`, `"250ns"`, `"10us"`, `"10ms"`, `"30s"`.
pub fn parse_duration(text: &str) -> Result<Nanos, String> {
    let text = text.trim();
    let split = text
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(text.len());
    let (digits, unit) = text.split_at(split);
    let value: u64 = digits
        .parse()
        .map_err(|_| format!("invalid duration `{text}`"))?;
    let scale = match unit.trim() {
        "" | "ns" => 1,
        "us" | "µs" => NS_PER_US,
        "ms" => NS_PER_MS,
        "s" => NS_PER_S,
        other => return Err(format!("unknown duration unit `{other}` in `{text}`")),
    };
    value
        .checked_mul(scale)
        .ok_or_else(|| format!("duration `{text}` overflows"))
}

/// Human readable rendering, picking the largest exact unit.
pub fn format_duration(ns: Nanos) -> String {
    if ns != 0 && ns.is_multiple_of(NS_PER_S) {
        format!("{}s", ns / NS_PER_S)
    } else if ns != 0 && ns.is_multiple_of(NS_PER_MS) {
        format!("{}ms", ns / NS_PER_MS)
    } else if ns != 0 && ns.is_multiple_of(NS_PER_US) {
        format!("{}us", ns / NS_PER_US)
    } else {
        format!("{ns}ns")
    }
}

/// Serde adapter: accepts an integer (ns) or a string with a unit suffix,
/// always serializes the integer nanosecond value.
pub mod serde_duration {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Nanos, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Nanos, D::Error> {
        d.deserialize_any(DurationVisitor)
    }

    pub(crate) struct DurationVisitor;

    impl<'de> de::Visitor<'de> for DurationVisitor {
        type Value = Nanos;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a duration in ns or a string like \"10ms\"")
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Nanos, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Nanos, E> {
            u64::try_from(v).map_err(|_| E::custom("duration must be non-negative"))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<Nanos, E> {
            parse_duration(v).map_err(E::custom)
        }
    }
}

/// Same as [`serde_duration`] for optional fields.
pub mod serde_opt_duration {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Nanos>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Nanos>, D::Error> {
        struct OptVisitor;
        impl<'de> de::Visitor<'de> for OptVisitor {
            type Value = Option<Nanos>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("null or a duration")
            }
            fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }
            fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }
            fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Self::Value, D::Error> {
                d.deserialize_any(serde_duration::DurationVisitor).map(Some)
            }
        }
        d.deserialize_option(OptVisitor)
    }
}
