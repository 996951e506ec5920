//! Named built-in fields used for potentials, control directions and μ.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spectral::SampledField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    Zero,
    One,
    X,
    XSq,
    CosPi,
    Cos2Pi,
    /// `φ₁² = 2 sin²(πx) = 1 − cos(2πx)`.
    Phi1Sq,
}

impl Builtin {
    pub const ALL: [Builtin; 7] =
        [Builtin::Zero, Builtin::One, Builtin::X, Builtin::XSq, Builtin::CosPi, Builtin::Cos2Pi, Builtin::Phi1Sq];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Zero => "zero",
            Builtin::One => "one",
            Builtin::X => "x",
            Builtin::XSq => "x_sq",
            Builtin::CosPi => "cos_pi",
            Builtin::Cos2Pi => "cos_2pi",
            Builtin::Phi1Sq => "phi1_sq",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Builtin::Zero => 0.0,
            Builtin::One => 1.0,
            Builtin::X => x,
            Builtin::XSq => x * x,
            Builtin::CosPi => (PI * x).cos(),
            Builtin::Cos2Pi => (2.0 * PI * x).cos(),
            Builtin::Phi1Sq => 1.0 - (2.0 * PI * x).cos(),
        }
    }

    pub fn sample(self, m: usize) -> SampledField {
        SampledField::from_fn(m, |x| self.eval(x))
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .iter()
            .copied()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown built-in field '{s}'")))
    }
}

/// The control field `(1, cos πx, cos 2πx, x²)`.
pub fn standard_fields(m: usize) -> Vec<SampledField> {
    [Builtin::One, Builtin::CosPi, Builtin::Cos2Pi, Builtin::XSq].iter().map(|b| b.sample(m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in Builtin::ALL {
            assert_eq!(b.name().parse::<Builtin>().unwrap(), b);
        }
        assert!("sin".parse::<Builtin>().is_err());
    }
}
