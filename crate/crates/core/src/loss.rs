//! Classification losses evaluated in the log domain.
//!
//! Arguments grow like `|w|^L`, which exceeds the linear-domain range of
//! doubles long before training stops, so every downstream aggregation works
//! on `log l(q)` and `log(-l'(q))`.

use crate::error::{Error, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// l(q) = exp(-q)
    Exponential,
    /// l(q) = ln(1 + exp(-q))
    Logistic,
    /// l(q) = exp(-q^a), a >= 1
    ExpPower(f64),
    /// l(q) = ln(1 + exp(-q^a)), a >= 1
    LogisticPower(f64),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::ExpPower(a) | LossKind::LogisticPower(a) if a < 1.0 => Err(
                Error::InvalidConfig(format!("power losses require a >= 1, got {a}")),
            ),
            _ => Ok(()),
        }
    }

    /// Lower end of the domain on which -l' is guaranteed positive.
    pub fn q0(&self) -> f64 {
        0.0
    }

    fn power(&self) -> f64 {
        match *self {
            LossKind::ExpPower(a) | LossKind::LogisticPower(a) => a,
            _ => 1.0,
        }
    }

    fn is_logistic(&self) -> bool {
        matches!(self, LossKind::Logistic | LossKind::LogisticPower(_))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossKind::Exponential => write!(f, "exp"),
            LossKind::Logistic => write!(f, "logistic"),
            LossKind::ExpPower(a) => write!(f, "exp_pow:{a}"),
            LossKind::LogisticPower(a) => write!(f, "logistic_pow:{a}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "exp" => LossKind::Exponential,
            "logistic" => LossKind::Logistic,
            _ => {
                let (name, a) = s
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown loss \"{s}\"")))?;
                let a: f64 = a
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad loss exponent in \"{s}\"")))?;
                match name {
                    "exp_pow" => LossKind::ExpPower(a),
                    "logistic_pow" => LossKind::LogisticPower(a),
                    _ => return Err(Error::InvalidConfig(format!("unknown loss \"{s}\""))),
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Serialize for LossKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Signed power: odd extension of q^a to negative arguments, equal to q for
/// a = 1. Training visits q < 0 before separation, where the base formulas
/// extend monotonically.
fn signed_pow(q: f64, a: f64) -> f64 {
    if a == 1.0 {
        q
    } else {
        q.signum() * q.abs().powf(a)
    }
}

/// l(q), computed without overflow for q in [-50, 1e9].
pub fn loss_value(kind: LossKind, q: f64) -> f64 {
    let t = signed_pow(q, kind.power());
    if kind.is_logistic() {
        // ln(1 + e^{-t})
        if t >= 0.0 {
            (-t).exp().ln_1p()
        } else {
            -t + t.exp().ln_1p()
        }
    } else {
        (-t).exp()
    }
}

/// log l(q), finite for q up to 1e9.
pub fn log_loss_value(kind: LossKind, q: f64) -> f64 {
    let t = signed_pow(q, kind.power());
    if kind.is_logistic() {
        if t > 36.0 {
            // ln ln(1 + e^{-t}) = -t + ln(1 - e^{-t}/2 + ...), correction below 1 ulp
            -t
        } else {
            loss_value(kind, q).ln()
        }
    } else {
        -t
    }
}

fn log_neg_deriv_inner(kind: LossKind, q: f64) -> f64 {
    let a = kind.power();
    let t = signed_pow(q, a);
    // -l'(q) = a |q|^{a-1} e^{-t} [ / (1 + e^{-t}) for logistic ]
    let mut v = if a == 1.0 {
        0.0
    } else {
        a.ln() + (a - 1.0) * q.abs().ln()
    };
    v += -t;
    if kind.is_logistic() {
        // multiply by sigmoid(t)/e^{...}: log(1/(1+e^{-t})) = -ln(1+e^{-t})
        v -= if t >= 0.0 {
            (-t).exp().ln_1p()
        } else {
            -t + t.exp().ln_1p()
        };
    }
    v
}

/// log(-l'(q)) for q >= q0; errors below q0.
pub fn log_neg_deriv(kind: LossKind, q: f64) -> Result<f64> {
    let q0 = kind.q0();
    if q < q0 {
        return Err(Error::LossDomain { q, q0 });
    }
    Ok(log_neg_deriv_inner(kind, q))
}

/// log(-l'(q)) on the full real line. The four implemented variants have
/// l' < 0 everywhere, so the optimizer uses this before separation.
pub fn log_neg_deriv_extended(kind: LossKind, q: f64) -> f64 {
    log_neg_deriv_inner(kind, q)
}

/// -l'(q) in the linear domain; underflows to 0 for large q, in which case
/// the log-domain path must be used.
pub fn neg_deriv(kind: LossKind, q: f64) -> Result<f64> {
    Ok(log_neg_deriv(kind, q)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn base_values() {
        assert_eq!(loss_value(LossKind::Exponential, 0.0), 1.0);
        assert!((loss_value(LossKind::Logistic, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_value(LossKind::ExpPower(2.0), 3.0) - (-9f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn log_neg_deriv_base_cases() {
        assert_eq!(log_neg_deriv(LossKind::Exponential, 2.0).unwrap(), -2.0);
        assert!((log_neg_deriv(LossKind::Logistic, 0.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_two_sided_bound_sample() {
        // e^{-2}/2 <= -l'(2) <= e^{-2}
        let v = log_neg_deriv(LossKind::Logistic, 2.0).unwrap();
        assert!(v <= -2.0);
        assert!(v >= -2.0 - 2f64.ln());
    }

    #[test]
    fn neg_deriv_values_and_underflow() {
        assert_eq!(neg_deriv(LossKind::Exponential, 0.0).unwrap(), 1.0);
        assert!((neg_deriv(LossKind::Logistic, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(neg_deriv(LossKind::Exponential, 800.0).unwrap(), 0.0);
        assert_eq!(log_neg_deriv(LossKind::Exponential, 800.0).unwrap(), -800.0);
    }

    #[test]
    fn domain_error_below_q0() {
        assert!(log_neg_deriv(LossKind::Exponential, -0.1).is_err());
        assert!(neg_deriv(LossKind::LogisticPower(2.0), -1.0).is_err());
    }

    #[test]
    fn huge_arguments_stay_finite_in_log_domain() {
        for kind in [
            LossKind::Exponential,
            LossKind::Logistic,
            LossKind::ExpPower(1.5),
            LossKind::LogisticPower(1.5),
        ] {
            let v = log_neg_deriv(kind, 1e9).unwrap();
            assert!(v.is_finite() || v == f64::NEG_INFINITY);
            assert!(v < -1e8);
            assert!(log_loss_value(kind, 1e9).is_finite());
        }
    }

    #[test]
    fn monotone_tail_ratio_vanishes() {
        // Appendix-F style tail condition: log(-l'(k)) - log(-l'(0.9 k)) -> -inf
        for kind in [
            LossKind::Exponential,
            LossKind::Logistic,
            LossKind::ExpPower(1.5),
            LossKind::LogisticPower(2.0),
        ] {
            let mut prev = 0.0;
            let mut crossed = false;
            for k in 1..=10_000u32 {
                let a = f64::from(k);
                let ratio = log_neg_deriv(kind, a).unwrap() - log_neg_deriv(kind, 0.9 * a).unwrap();
                if k > 10 {
                    assert!(ratio <= prev + 1e-12, "{kind} ratio not decreasing at k={k}");
                }
                prev = ratio;
                if ratio < -50.0 {
                    crossed = true;
                }
            }
            assert!(crossed, "{kind} log-ratio never dropped below -50");
        }
    }

    #[test]
    fn parse_round_trip() {
        for s in ["exp", "logistic", "exp_pow:2", "logistic_pow:1.5"] {
            let k: LossKind = s.parse().unwrap();
            let back: LossKind = k.to_string().parse().unwrap();
            assert_eq!(k, back);
        }
        assert!("exp_pow:0.5".parse::<LossKind>().is_err());
        assert!("huber".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn two_sided_bound_base_losses(q in 0.0..50.0f64) {
            for kind in [LossKind::Exponential, LossKind::Logistic] {
                let v = log_neg_deriv(kind, q).unwrap();
                prop_assert!(v <= -q);
                prop_assert!(v >= -q - 2f64.ln());
            }
        }

        #[test]
        fn derivative_matches_finite_difference(q in 0.1..30.0f64, variant in 0usize..4) {
            let kind = [
                LossKind::Exponential,
                LossKind::Logistic,
                LossKind::ExpPower(1.5),
                LossKind::LogisticPower(2.0),
            ][variant];
            let h = 1e-6 * (1.0 + q);
            let fd = (loss_value(kind, q + h) - loss_value(kind, q - h)) / (2.0 * h);
            let d = -neg_deriv(kind, q).unwrap();
            let denom = d.abs().max(1e-300);
            prop_assert!((fd - d).abs() / denom < 1e-5, "fd={fd}, d={d}");
        }
    }
}
