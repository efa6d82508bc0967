//! Small helpers around `BigRational`: construction, `num/den` rendering and parsing.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

pub fn q(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn half() -> BigRational {
    q(1, 2)
}

/// `2^-k`.
pub fn dyadic(k: usize) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::one() << k)
}

pub fn from_u128(n: u128) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// `num/den` in lowest terms; integers are still written with a denominator.
pub fn render(x: &BigRational) -> String {
    format!("{}/{}", x.numer(), x.denom())
}

/// Parse `num/den` or a bare integer. Decimal points and exponents are rejected.
pub fn parse(s: &str) -> Result<BigRational, String> {
    let s = s.trim();
    if s.contains(['.', 'e', 'E']) {
        return Err(format!("{s:?} is not an exact rational; write it as \"num/den\""));
    }
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let n: BigInt = n.parse().map_err(|_| format!("bad numerator in {s:?}"))?;
    let d: BigInt = d.parse().map_err(|_| format!("bad denominator in {s:?}"))?;
    if d.is_zero() {
        return Err(format!("zero denominator in {s:?}"));
    }
    Ok(BigRational::new(n, d))
}

/// `⌊x⌋` as a `BigInt`.
pub fn floor(x: &BigRational) -> BigInt {
    x.numer().div_floor(x.denom())
}

/// `⌈x⌉` as a `BigInt`.
pub fn ceil(x: &BigRational) -> BigInt {
    -((-x.numer()).div_floor(x.denom()))
}

pub fn abs_diff(a: &BigRational, b: &BigRational) -> BigRational {
    (a - b).abs()
}

pub(crate) mod serde_q {
    use super::*;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(x: &BigRational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&render(x))
    }
}

pub(crate) mod serde_qvec {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigRational], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(render))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigRational>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter().map(|s| parse(s).map_err(serde::de::Error::custom)).collect()
    }
}
