//! Unit-suffixed scalar parsing for configuration documents.
//!
//! Numeric fields accept either a bare number in the field's base unit or a
//! string carrying a suffix: angles take `deg`/`rad` (bare = radians),
//! lengths take `m` (bare = meters), durations take `ms`/`s` (bare =
//! milliseconds). Internally everything is radians, meters and nanoseconds.

use serde::{Deserialize, Deserializer};

pub const NANOS_PER_MS: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Deserialize)]
#[serde(untagged)]
enum Raw {
    Num(f64),
    Text(String),
}

fn split_suffix(s: &str) -> (&str, &str) {
    let s = s.trim();
    let idx = s
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(s.len());
    (s[..idx].trim(), s[idx..].trim())
}

fn parse_num(s: &str) -> Result<f64, String> {
    s.parse::<f64>()
        .map_err(|_| format!("`{s}` is not a number"))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("`{s}` is not finite"))
            }
        })
}

pub fn parse_angle(s: &str) -> Result<f64, String> {
    match split_suffix(s) {
        (n, "deg") => parse_num(n).map(f64::to_radians),
        (n, "rad") | (n, "") => parse_num(n),
        (_, u) => Err(format!("unit `{u}` is not an angle (use deg or rad)")),
    }
}

pub fn parse_length(s: &str) -> Result<f64, String> {
    match split_suffix(s) {
        (n, "m") | (n, "") => parse_num(n),
        (_, u) => Err(format!("unit `{u}` is not a length (use m)")),
    }
}

/// Parses a duration into nanoseconds.
pub fn parse_duration_ns(s: &str) -> Result<u64, String> {
    let (n, unit) = split_suffix(s);
    let v = parse_num(n)?;
    if v < 0.0 {
        return Err(format!("duration `{s}` is negative"));
    }
    let ns = match unit {
        "ns" => v,
        "ms" | "" => v * NANOS_PER_MS as f64,
        "s" => v * NANOS_PER_SEC as f64,
        u => return Err(format!("unit `{u}` is not a duration (use ns, ms or s)")),
    };
    Ok(ns.round() as u64)
}

fn raw_to<T>(raw: Raw, base: impl Fn(f64) -> Result<T, String>, text: impl Fn(&str) -> Result<T, String>) -> Result<T, String> {
    match raw {
        Raw::Num(v) if v.is_finite() => base(v),
        Raw::Num(v) => Err(format!("{v} is not finite")),
        Raw::Text(s) => text(&s),
    }
}

pub fn angle<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    raw_to(Raw::deserialize(d)?, Ok, parse_angle).map_err(serde::de::Error::custom)
}

pub fn opt_angle<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    Option::<Raw>::deserialize(d)?
        .map(|r| raw_to(r, Ok, parse_angle))
        .transpose()
        .map_err(serde::de::Error::custom)
}

pub fn angles<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    Vec::<Raw>::deserialize(d)?
        .into_iter()
        .map(|r| raw_to(r, Ok, parse_angle))
        .collect::<Result<_, _>>()
        .map_err(serde::de::Error::custom)
}

pub fn length<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    raw_to(Raw::deserialize(d)?, Ok, parse_length).map_err(serde::de::Error::custom)
}

pub fn duration_ns<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    raw_to(
        Raw::deserialize(d)?,
        |v| {
            if v < 0.0 {
                Err(format!("duration {v} is negative"))
            } else {
                Ok((v * NANOS_PER_MS as f64).round() as u64)
            }
        },
        parse_duration_ns,
    )
    .map_err(serde::de::Error::custom)
}

pub fn opt_duration_ns<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "duration_ns")] u64);
    Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
}

/// Writes nanoseconds with an explicit `ns` suffix so documents round-trip exactly.
pub fn ser_duration_ns<S: serde::Serializer>(ns: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{ns}ns"))
}

pub fn ns_to_ms(ns: i64) -> f64 {
    ns as f64 / NANOS_PER_MS as f64
}

pub fn ns_to_secs(ns: u64) -> f64 {
    ns as f64 / NANOS_PER_SEC as f64
}
