//! Closed-form right-hand sides `f` on the unit cube.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Constant {
        value: f64,
    },
    /// `Σ_k c_k x_1^k`.
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// `amplitude Π_k sin(m_k π x_k)`.
    SineProduct {
        amplitude: f64,
        modes: Vec<u32>,
    },
}

impl Source {
    pub fn constant(value: f64) -> Self {
        Source::Constant { value }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Source::Constant { value } => *value,
            Source::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x[0] + c),
            Source::SineProduct { amplitude, modes } => {
                amplitude
                    * modes
                        .iter()
                        .zip(x)
                        .map(|(m, v)| (*m as f64 * std::f64::consts::PI * v).sin())
                        .product::<f64>()
            }
        }
    }

    /// `c f`.
    pub fn scaled(&self, c: f64) -> Self {
        match self {
            Source::Constant { value } => Source::Constant { value: c * value },
            Source::Polynomial { coeffs } => Source::Polynomial {
                coeffs: coeffs.iter().map(|v| c * v).collect(),
            },
            Source::SineProduct { amplitude, modes } => Source::SineProduct {
                amplitude: c * amplitude,
                modes: modes.clone(),
            },
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Source::SineProduct { modes, .. } if modes.len() != dim => Err(Error::InvalidConfig(format!(
                "sine-product source has {} modes for d = {dim}",
                modes.len()
            ))),
            Source::Polynomial { coeffs } if coeffs.is_empty() => {
                Err(Error::InvalidConfig("polynomial source needs coefficients".into()))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_horner() {
        let s = Source::Polynomial {
            coeffs: vec![1.0, -2.0, 3.0],
        };
        assert_eq!(s.eval(&[2.0, 7.0]), 1.0 - 4.0 + 12.0);
        assert_eq!(s.scaled(2.0).eval(&[2.0]), 18.0);
    }

    #[test]
    fn sine_product_vanishes_on_boundary() {
        let s = Source::SineProduct {
            amplitude: 1.0,
            modes: vec![1, 2],
        };
        assert!(s.eval(&[0.0, 0.3]).abs() < 1e-15);
        assert!(s.eval(&[0.4, 1.0]).abs() < 1e-15);
        assert!(s.validate(3).is_err());
    }
}
