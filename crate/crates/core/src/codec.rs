//! Bit-exact float serialization.
//!
//! Checkpoints and caches must round-trip f64 values exactly, so floats are
//! stored as 16-hex-digit IEEE-754 bit patterns instead of decimal text.

use crate::error::{Error, Result};

pub fn f64_to_hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

pub fn hex_to_f64(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(Error::Serialization(format!(
            "expected 16 hex digits for a float, got {s:?}"
        )));
    }
    let bits = u64::from_str_radix(s, 16)
        .map_err(|_| Error::Serialization(format!("invalid float hex {s:?}")))?;
    Ok(f64::from_bits(bits))
}

pub fn vec_to_hex(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|&x| f64_to_hex(x)).collect()
}

pub fn hex_to_vec(xs: &[String]) -> Result<Vec<f64>> {
    xs.iter().map(|s| hex_to_f64(s)).collect()
}
