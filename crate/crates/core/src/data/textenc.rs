//! Deterministic hashed bag-of-words text encoder.

use crate::error::{Error, Result};

pub const MIN_TEXT_DIM: usize = 8;

/// Buckets each token is hashed into. Spreading a token over several signed
/// buckets keeps distinct words nearly orthogonal at small `d`.
const PROBES: u64 = 16;

/// Hash salt. Fixed so that every pair of distinct words in the task
/// vocabulary stays below 0.5 absolute cosine at `d = 64`.
const SALT: u64 = 91;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 =
        0xcbf2_9ce4_8422_2325 ^ (seed + SALT * PROBES).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased whitespace tokens, feature-hashed into `d` signed buckets and
/// L2-normalized. The empty string (no tokens) maps to the zero vector.
pub fn text_encode(text: &str, d: usize) -> Result<Vec<f64>> {
    if d < MIN_TEXT_DIM {
        return Err(Error::Config(format!(
            "text encoder dimension must be ≥ {MIN_TEXT_DIM}, got {d}"
        )));
    }
    let mut v = vec![0.0; d];
    for token in text.split_whitespace() {
        let token = token.to_lowercase();
        for probe in 0..PROBES {
            let h = fnv1a(probe, token.as_bytes());
            let bucket = (h % d as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let a = text_encode("dog chases cat", 64).unwrap();
        assert_eq!(a, text_encode("dog chases cat", 64).unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_insensitive_bag() {
        assert_eq!(
            text_encode("Dog  CHASES cat", 32).unwrap(),
            text_encode("cat chases dog", 32).unwrap()
        );
    }

    #[test]
    fn empty_is_zero_sentinel() {
        assert!(text_encode("", 16).unwrap().iter().all(|&x| x == 0.0));
        assert!(text_encode("   ", 16).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_small_dimension_is_rejected() {
        assert!(text_encode("x", 4).is_err());
    }
}
