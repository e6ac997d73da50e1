//! Text formatting shared by all file writers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Significant digits used for every floating-point value written to disk.
pub const SIG_DIGITS: usize = 12;

/// Format like C's `%.12g`: shortest of fixed/scientific, trailing zeros trimmed.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= SIG_DIGITS as i32 {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Render rows as CSV under `header`.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_g(v)).collect();
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

/// Counts as a JSON object `bitstring -> integer`.
pub fn counts_to_json(counts: &BTreeMap<String, u64>) -> Result<String> {
    Ok(serde_json::to_string_pretty(counts)?)
}

pub fn counts_from_json(text: &str) -> Result<BTreeMap<String, u64>> {
    let map: BTreeMap<String, u64> = serde_json::from_str(text)?;
    if let Some(bad) = map.keys().find(|k| !k.chars().all(|c| c == '0' || c == '1')) {
        return Err(Error::Parse(format!("invalid bitstring key {bad:?}")));
    }
    Ok(map)
}

/// Round to twelve significant digits so JSON output matches the CSV precision.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x).parse().unwrap_or(x)
}
