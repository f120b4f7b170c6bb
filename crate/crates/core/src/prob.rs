//! Exact evaluation of the committee failure probabilities.
//!
//! Committee membership is a hypergeometric draw: picking `c` of `n` nodes
//! of which `f` are faulty. All results are exact rationals over big
//! integers; the interesting magnitudes (1e-22) are far below what naive
//! floating point resolves, so floats appear only in display code.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbError {
    #[error("bad parameters: n={n}, f={f}, c={c}")]
    BadParams { n: u64, f: u64, c: u64 },
    #[error("no committee size c <= n-1 satisfies the target")]
    Unsatisfiable,
}

/// Binomial coefficient with the convention C(x, k) = 0 for k > x.
pub fn binomial(x: u64, k: u64) -> BigInt {
    if k > x {
        return BigInt::zero();
    }
    let k = k.min(x - k);
    let mut num = BigInt::one();
    for i in 0..k {
        num = num * BigInt::from(x - i) / BigInt::from(i + 1);
    }
    num
}

fn check(n: u64, f: u64, c: u64) -> Result<(), ProbError> {
    if n == 0 || f >= n || c == 0 || c > n {
        return Err(ProbError::BadParams { n, f, c });
    }
    Ok(())
}

/// Probability that a committee of `c` drawn from `n` nodes (`f` faulty)
/// contains at least ⌈c/2⌉ faulty members.
pub fn p_f(n: u64, f: u64, c: u64) -> Result<BigRational, ProbError> {
    check(n, f, c)?;
    let denom = binomial(n, c);
    let mut num = BigInt::zero();
    let b_min = c.div_ceil(2);
    for b in b_min..=c {
        let a = c - b;
        num += binomial(n - f, a) * binomial(f, b);
    }
    Ok(BigRational::new(num, denom))
}

/// Probability that the committee has no correct member at all (b = c).
pub fn p_total_failure(n: u64, f: u64, c: u64) -> Result<BigRational, ProbError> {
    check(n, f, c)?;
    Ok(BigRational::new(binomial(f, c), binomial(n, c)))
}

/// Upper bound on the view-change probability:
/// n(1 - P_f) / (3(n - c)) + P_f.
pub fn p_v_bound(n: u64, f: u64, c: u64) -> Result<BigRational, ProbError> {
    if c >= n {
        return Err(ProbError::BadParams { n, f, c });
    }
    let pf = p_f(n, f, c)?;
    let factor = BigRational::new(BigInt::from(n), BigInt::from(3 * (n - c)));
    Ok(factor * (BigRational::one() - &pf) + pf)
}

/// Joint probability that the committee has a faulty majority (at least
/// ⌊c/2⌋+1 faulty) and the primary, drawn from the n-c leftover nodes, is
/// also faulty: the precondition for an equivocation.
pub fn p_equivocation(n: u64, f: u64, c: u64) -> Result<BigRational, ProbError> {
    if c >= n {
        return Err(ProbError::BadParams { n, f, c });
    }
    check(n, f, c)?;
    let denom = binomial(n, c);
    let mut total = BigRational::zero();
    let b_min = c / 2 + 1;
    for b in b_min..=c.min(f) {
        let committee = BigRational::new(binomial(f, b) * binomial(n - f, c - b), denom.clone());
        let primary = BigRational::new(BigInt::from(f - b), BigInt::from(n - c));
        total += committee * primary;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    PF,
    TotalFailure,
}

/// Smallest committee size whose failure probability meets `target`.
pub fn min_c_for_target(
    n: u64,
    f: u64,
    target: &BigRational,
    criterion: Criterion,
) -> Result<u64, ProbError> {
    if target <= &BigRational::zero() || target >= &BigRational::one() {
        return Err(ProbError::BadParams { n, f, c: 0 });
    }
    for c in 1..n {
        let value = match criterion {
            Criterion::PF => p_f(n, f, c)?,
            Criterion::TotalFailure => p_total_failure(n, f, c)?,
        };
        if &value <= target {
            return Ok(c);
        }
    }
    Err(ProbError::Unsatisfiable)
}

/// All probability figures for one (n, f, c) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityReport {
    pub n: u64,
    pub f: u64,
    pub c: u64,
    pub p_f: BigRational,
    pub p_total_failure: BigRational,
    pub p_v_bound: BigRational,
    pub p_equivocation: BigRational,
}

impl ProbabilityReport {
    pub fn compute(n: u64, f: u64, c: u64) -> Result<Self, ProbError> {
        Ok(ProbabilityReport {
            n,
            f,
            c,
            p_f: p_f(n, f, c)?,
            p_total_failure: p_total_failure(n, f, c)?,
            p_v_bound: p_v_bound(n, f, c)?,
            p_equivocation: p_equivocation(n, f, c)?,
        })
    }
}

/// Scientific-notation rendering of an exact rational, correct for
/// magnitudes well below f64 range. `digits` is mantissa precision.
pub fn to_scientific(r: &BigRational, digits: u32) -> String {
    if r.is_zero() {
        return "0".to_string();
    }
    let neg = r.is_negative();
    let r = r.abs();
    // exponent = floor(log10(r))
    let mut exp: i64 = 0;
    let ten = BigRational::from(BigInt::from(10));
    let mut x = r.clone();
    while x >= ten {
        x /= &ten;
        exp += 1;
    }
    while x < BigRational::one() {
        x *= &ten;
        exp -= 1;
    }
    // x in [1, 10); scale to desired digits and round
    let scale = BigInt::from(10u64).pow(digits - 1);
    let scaled = (x * BigRational::from(scale)).round().to_integer();
    let mut mantissa = scaled.to_string();
    // rounding may carry over to 10.0...
    if mantissa.len() as u32 > digits {
        mantissa.truncate(digits as usize);
        exp += 1;
    }
    let (head, tail) = mantissa.split_at(1);
    let sign = if neg { "-" } else { "" };
    if tail.is_empty() {
        format!("{sign}{head}e{exp}")
    } else {
        format!("{sign}{head}.{tail}e{exp}")
    }
}

/// Parse "3.8e-22"-style decimal into an exact rational.
pub fn parse_decimal(text: &str) -> Option<BigRational> {
    let text = text.trim();
    let (mant, exp) = match text.split_once(['e', 'E']) {
        Some((m, e)) => (m, e.parse::<i64>().ok()?),
        None => (text, 0),
    };
    let (int_part, frac_part) = match mant.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mant, ""),
    };
    let neg = int_part.starts_with('-');
    let digits: String =
        int_part.trim_start_matches(['-', '+']).chars().chain(frac_part.chars()).collect();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut num: BigInt = digits.parse().ok()?;
    if neg {
        num = -num;
    }
    let shift = exp - frac_part.len() as i64;
    let ten = BigInt::from(10u64);
    Some(if shift >= 0 {
        BigRational::from(num * ten.pow(shift as u32))
    } else {
        BigRational::new(num, ten.pow((-shift) as u32))
    })
}

/// Decimal value for display; saturates instead of losing tiny magnitudes.
pub fn approx_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(0.0)
}
