use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fraction in `(0, 1]`, kept as an exact reduced rational.
///
/// Point counts derived from a share always use `floor(share * N)`, computed
/// in integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Share {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Share {
    pub const ONE: Share = Share { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::arg(format!("share {num}/{den} must lie in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// `1 / 2^k`.
    pub fn half_pow(k: u32) -> Self {
        assert!(k < 64, "share exponent {k} too large");
        Self {
            num: 1,
            den: 1 << k,
        }
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    /// `Some(k)` when the share equals `1 / 2^k`.
    pub fn half_exponent(self) -> Option<u32> {
        (self.num == 1 && self.den.is_power_of_two()).then(|| self.den.trailing_zeros())
    }

    /// `floor(share * n)`.
    pub fn count(self, n: usize) -> usize {
        ((n as u128 * self.num as u128) / self.den as u128) as usize
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn parse_u64(s: &str, whole: &str) -> Result<u64> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| Error::arg(format!("cannot parse share `{whole}`")))
}

impl FromStr for Share {
    type Err = Error;

    /// Accepts `a/b`, `1/2^k` and plain decimals such as `0.25` or `1`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some((a, b)) = t.split_once('/') {
            let num = parse_u64(a, s)?;
            let den = match b.split_once('^') {
                Some((base, exp)) => {
                    let base = parse_u64(base, s)?;
                    let exp = parse_u64(exp, s)?;
                    u32::try_from(exp)
                        .ok()
                        .and_then(|e| base.checked_pow(e))
                        .ok_or_else(|| Error::arg(format!("share `{s}` overflows")))?
                }
                None => parse_u64(b, s)?,
            };
            return Share::new(num, den);
        }
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
            return Err(Error::arg(format!("cannot parse share `{s}`")));
        }
        let den = 10u64.pow(frac.len() as u32);
        let int = if int.is_empty() {
            0
        } else {
            parse_u64(int, s)?
        };
        let frac = if frac.is_empty() {
            0
        } else {
            parse_u64(frac, s)?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(|| Error::arg(format!("share `{s}` overflows")))?;
        Share::new(num, den)
    }
}

impl TryFrom<String> for Share {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Share> for String {
    fn from(s: Share) -> String {
        s.to_string()
    }
}
