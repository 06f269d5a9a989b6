//! Sinusoidal positional encoding of feature scalars.
//!
//! Each scalar `p` becomes `[p] ++ [sin(2^l pi p), cos(2^l pi p) for l in 0..L]`,
//! with the raw `p` present only when `include_raw` is set. Channels are
//! concatenated in order.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingConfig {
    pub degree: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            include_raw: true,
        }
    }
}

impl EncodingConfig {
    pub fn new(degree: usize, include_raw: bool) -> Result<Self> {
        let cfg = Self { degree, include_raw };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width() == 0 {
            return Err(Error::Config(
                "encoding with degree 0 and no raw input produces no output".into(),
            ));
        }
        Ok(())
    }

    /// Encoded width per scalar: `2L + include_raw`.
    pub fn width(&self) -> usize {
        2 * self.degree + usize::from(self.include_raw)
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * self.width()
    }

    /// Inverse of `width`: `2L + raw` determines both fields uniquely.
    pub fn from_width(width: usize) -> Result<Self> {
        Self::new(width / 2, width % 2 == 1)
    }

    /// Encode `features` into `out` (length `C * width`).
    #[inline]
    pub fn encode_into(&self, features: &[f64], out: &mut [f64]) {
        let w = self.width();
        for (p, chunk) in features.iter().zip(out.chunks_exact_mut(w)) {
            let mut o = 0;
            if self.include_raw {
                chunk[0] = *p;
                o = 1;
            }
            let mut freq = PI;
            for l in 0..self.degree {
                let (s, c) = (freq * p).sin_cos();
                chunk[o + 2 * l] = s;
                chunk[o + 2 * l + 1] = c;
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "encoding input".into(),
            });
        }
        let mut out = vec![0.0; self.output_len(features.len())];
        self.encode_into(features, &mut out);
        Ok(out)
    }

    /// Chain rule through the encoding: writes `d(upstream . encode(p))/dp`
    /// into `grad` (length `C`).
    #[inline]
    pub fn backward_into(&self, features: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let w = self.width();
        for ((p, up), g) in features.iter().zip(upstream.chunks_exact(w)).zip(grad.iter_mut()) {
            let mut acc = 0.0;
            let mut o = 0;
            if self.include_raw {
                acc = up[0];
                o = 1;
            }
            let mut freq = PI;
            for l in 0..self.degree {
                let (s, c) = (freq * p).sin_cos();
                acc += freq * (c * up[o + 2 * l] - s * up[o + 2 * l + 1]);
                freq *= 2.0;
            }
            *g = acc;
        }
    }

    pub fn encode_backward(&self, features: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_len(features.len()) {
            return Err(Error::ShapeMismatch {
                expected: self.output_len(features.len()),
                actual: upstream.len(),
            });
        }
        let mut grad = vec![0.0; features.len()];
        self.backward_into(features, upstream, &mut grad);
        Ok(grad)
    }

    /// Transcendental evaluations per encoded scalar.
    pub fn cost_per_scalar(&self) -> usize {
        2 * self.degree + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input() {
        let cfg = EncodingConfig::new(2, true).unwrap();
        assert_eq!(cfg.encode(&[0.0]).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_input() {
        let cfg = EncodingConfig::new(1, true).unwrap();
        let e = cfg.encode(&[0.5]).unwrap();
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
    }

    #[test]
    fn empty_configuration_rejected() {
        assert!(EncodingConfig::new(0, false).is_err());
        assert_eq!(EncodingConfig::new(0, true).unwrap().encode(&[0.3]).unwrap(), vec![0.3]);
    }

    #[test]
    fn width_round_trip() {
        for degree in 0..12 {
            for raw in [false, true] {
                if degree == 0 && !raw {
                    continue;
                }
                let cfg = EncodingConfig::new(degree, raw).unwrap();
                assert_eq!(EncodingConfig::from_width(cfg.width()).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn raw_term_gradient_is_one() {
        let cfg = EncodingConfig::new(3, true).unwrap();
        let feats = [0.2, -1.3, 4.0];
        let mut up = vec![0.0; cfg.output_len(3)];
        for c in 0..3 {
            up[c * cfg.width()] = 1.0;
        }
        assert_eq!(cfg.encode_backward(&feats, &up).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn first_sine_gradient_at_zero_is_pi() {
        let cfg = EncodingConfig::new(2, true).unwrap();
        let mut up = vec![0.0; cfg.width()];
        up[1] = 1.0;
        let g = cfg.encode_backward(&[0.0], &up).unwrap();
        assert!((g[0] - PI).abs() < 1e-12);
    }
}
