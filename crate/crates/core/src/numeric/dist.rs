use serde::{Deserialize, Serialize};

use super::Rng;
use crate::error::{Error, Result};

/// Distribution families used for key material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistSpec {
    Uniform {
        low: f64,
        high: f64,
    },
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Shape `k`, scale `theta`; mean is `k * theta`.
    Gamma {
        shape: f64,
        scale: f64,
    },
    Laplace {
        loc: f64,
        scale: f64,
    },
}

impl DistSpec {
    pub fn validate(&self) -> Result<()> {
        fn finite(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(field, format!("must be finite, got {v}")))
            }
        }
        match *self {
            DistSpec::Uniform { low, high } => {
                finite("low", low)?;
                finite("high", high)?;
                if low > high {
                    return Err(Error::param("high", format!("{high} < low {low}")));
                }
            }
            DistSpec::Gaussian { mean, std } => {
                finite("mean", mean)?;
                finite("std", std)?;
                if std < 0.0 {
                    return Err(Error::param("std", format!("must be >= 0, got {std}")));
                }
            }
            DistSpec::Gamma { shape, scale } => {
                finite("shape", shape)?;
                finite("scale", scale)?;
                if shape <= 0.0 {
                    return Err(Error::param("shape", format!("must be > 0, got {shape}")));
                }
                if scale <= 0.0 {
                    return Err(Error::param("scale", format!("must be > 0, got {scale}")));
                }
            }
            DistSpec::Laplace { loc, scale } => {
                finite("loc", loc)?;
                finite("scale", scale)?;
                if scale <= 0.0 {
                    return Err(Error::param("scale", format!("must be > 0, got {scale}")));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DistSpec::Uniform { low, high } => 0.5 * (low + high),
            DistSpec::Gaussian { mean, .. } => mean,
            DistSpec::Gamma { shape, scale } => shape * scale,
            DistSpec::Laplace { loc, .. } => loc,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            DistSpec::Uniform { low, high } => (high - low).powi(2) / 12.0,
            DistSpec::Gaussian { std, .. } => std * std,
            DistSpec::Gamma { shape, scale } => shape * scale * scale,
            DistSpec::Laplace { scale, .. } => 2.0 * scale * scale,
        }
    }

    /// One draw; assumes `validate` passed.
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            DistSpec::Uniform { low, high } => low + (high - low) * rng.next_f64(),
            DistSpec::Gaussian { mean, std } => {
                // Consume the draw even when std == 0 so streams stay aligned.
                let z = rng.next_normal();
                mean + std * z
            }
            DistSpec::Gamma { shape, scale } => gamma(shape, rng) * scale,
            DistSpec::Laplace { loc, scale } => {
                let u = rng.next_f64() - 0.5;
                let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
                loc + scale * u.signum() * mag
            }
        }
    }
}

/// Unit-scale Gamma(shape) by Marsaglia–Tsang; shapes below 1 use the
/// `Gamma(shape + 1) * U^(1/shape)` boost.
fn gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let g = gamma(shape + 1.0, rng);
        let u = 1.0 - rng.next_f64();
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.next_normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.next_f64();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `n` independent draws from `dist`.
pub fn sample(dist: &DistSpec, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::param("n", "must be >= 1"));
    }
    dist.validate()?;
    Ok((0..n).map(|_| dist.draw(rng)).collect())
}
