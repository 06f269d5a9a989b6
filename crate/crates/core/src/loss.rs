//! Structural similarity and the negative-SSIM training loss.
//!
//! SSIM is the mean of the local SSIM map under an 11x11 Gaussian window
//! (sigma 1.5) with mirror padding (`d c b | a b c d | c b a`) at the borders.
//! The gradient is the exact derivative of that mean through the windowed
//! moments, using the adjoint of the padded filter.

use crate::error::{Error, Result};
use crate::volume::Image2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else { i };
    (if j >= n { 2 * (n - 1) - j } else { j }) as usize
}

/// Reusable buffers for SSIM on a fixed image size.
#[derive(Debug, Clone)]
pub struct SsimWorkspace {
    cfg: SsimConfig,
    kernel: Vec<f64>,
    rows: usize,
    cols: usize,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
    prod: Vec<f64>,
    tmp: Vec<f64>,
    adj: Vec<f64>,
}

impl SsimWorkspace {
    pub fn new(cfg: SsimConfig, rows: usize, cols: usize) -> Result<Self> {
        if cfg.window % 2 == 0 || cfg.k1 <= 0.0 || cfg.k2 <= 0.0 {
            return Err(Error::Config(format!("invalid SSIM configuration {cfg:?}")));
        }
        if rows < cfg.window || cols < cfg.window {
            return Err(Error::InvalidDims {
                dims: vec![rows, cols],
                reason: format!("SSIM needs images of at least {0}x{0}", cfg.window),
            });
        }
        let n = rows * cols;
        Ok(Self {
            cfg,
            kernel: cfg.kernel(),
            rows,
            cols,
            mu_a: vec![0.0; n],
            mu_b: vec![0.0; n],
            e_aa: vec![0.0; n],
            e_bb: vec![0.0; n],
            e_ab: vec![0.0; n],
            prod: vec![0.0; n],
            tmp: vec![0.0; n],
            adj: vec![0.0; n],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Separable Gaussian filter with mirror padding.
    fn filter(kernel: &[f64], rows: usize, cols: usize, src: &[f64], tmp: &mut [f64], dst: &mut [f64]) {
        let h = (kernel.len() / 2) as isize;
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * row[mirror(c as isize + k as isize - h, cols)];
                }
                tmp[r * cols + c] = acc;
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * tmp[mirror(r as isize + k as isize - h, rows) * cols + c];
                }
                dst[r * cols + c] = acc;
            }
        }
    }

    /// Adjoint of `filter`: scatters each output weight back onto its sources.
    fn filter_adjoint(kernel: &[f64], rows: usize, cols: usize, g_out: &[f64], tmp: &mut [f64], g_in: &mut [f64]) {
        let h = (kernel.len() / 2) as isize;
        tmp.fill(0.0);
        for r in 0..rows {
            for c in 0..cols {
                let g = g_out[r * cols + c];
                for (k, w) in kernel.iter().enumerate() {
                    tmp[mirror(r as isize + k as isize - h, rows) * cols + c] += w * g;
                }
            }
        }
        g_in.fill(0.0);
        for r in 0..rows {
            let src = &tmp[r * cols..(r + 1) * cols];
            let dst = &mut g_in[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let g = src[c];
                for (k, w) in kernel.iter().enumerate() {
                    dst[mirror(c as isize + k as isize - h, cols)] += w * g;
                }
            }
        }
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<()> {
        let n = self.rows * self.cols;
        for len in [a.len(), b.len()] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    fn moments(&mut self, a: &[f64], b: &[f64]) {
        let (k, rows, cols) = (&self.kernel, self.rows, self.cols);
        Self::filter(k, rows, cols, a, &mut self.tmp, &mut self.mu_a);
        Self::filter(k, rows, cols, b, &mut self.tmp, &mut self.mu_b);
        for (p, v) in self.prod.iter_mut().zip(a) {
            *p = v * v;
        }
        Self::filter(k, rows, cols, &self.prod, &mut self.tmp, &mut self.e_aa);
        for (p, v) in self.prod.iter_mut().zip(b) {
            *p = v * v;
        }
        Self::filter(k, rows, cols, &self.prod, &mut self.tmp, &mut self.e_bb);
        for ((p, x), y) in self.prod.iter_mut().zip(a).zip(b) {
            *p = x * y;
        }
        Self::filter(k, rows, cols, &self.prod, &mut self.tmp, &mut self.e_ab);
    }

    /// Mean SSIM of two images given as row-major f64 buffers.
    pub fn value(&mut self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a, b)?;
        self.moments(a, b);
        let (c1, c2) = (self.cfg.c1(), self.cfg.c2());
        let n = a.len();
        let mut total = 0.0;
        for p in 0..n {
            let (ma, mb) = (self.mu_a[p], self.mu_b[p]);
            let var_a = self.e_aa[p] - ma * ma;
            let var_b = self.e_bb[p] - mb * mb;
            let cov = self.e_ab[p] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        Ok(total / n as f64)
    }

    /// Mean SSIM and its gradient with respect to `a`, scaled by `upstream`.
    pub fn value_and_grad(&mut self, a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64]) -> Result<f64> {
        self.check(a, b)?;
        if grad_a.len() != a.len() {
            return Err(Error::ShapeMismatch {
                expected: a.len(),
                actual: grad_a.len(),
            });
        }
        self.moments(a, b);
        let (c1, c2) = (self.cfg.c1(), self.cfg.c2());
        let n = a.len();
        let scale = upstream / n as f64;
        let mut total = 0.0;
        // reuse the moment buffers for d(mean)/d(mu_a), d/d(E_ab), d/d(E_aa)
        for p in 0..n {
            let (ma, mb) = (self.mu_a[p], self.mu_b[p]);
            let var_a = self.e_aa[p] - ma * ma;
            let var_b = self.e_bb[p] - mb * mb;
            let cov = self.e_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = var_a + var_b + c2;
            let denom = b1 * b2;
            let s = a1 * a2 / denom;
            total += s;
            let d_mu = (2.0 * mb * (a2 - a1)) / denom - s * (2.0 * ma / b1 - 2.0 * ma / b2);
            let d_eab = 2.0 * a1 / denom;
            let d_eaa = -s / b2;
            self.mu_a[p] = d_mu * scale;
            self.e_ab[p] = d_eab * scale;
            self.e_aa[p] = d_eaa * scale;
        }
        let (k, rows, cols) = (&self.kernel, self.rows, self.cols);
        Self::filter_adjoint(k, rows, cols, &self.mu_a, &mut self.tmp, grad_a);
        Self::filter_adjoint(k, rows, cols, &self.e_ab, &mut self.tmp, &mut self.adj);
        for ((g, adj), y) in grad_a.iter_mut().zip(&self.adj).zip(b) {
            *g += adj * y;
        }
        Self::filter_adjoint(k, rows, cols, &self.e_aa, &mut self.tmp, &mut self.adj);
        for ((g, adj), x) in grad_a.iter_mut().zip(&self.adj).zip(a) {
            *g += 2.0 * adj * x;
        }
        Ok(total / n as f64)
    }
}

fn check_pair(a: &Image2D, b: &Image2D) -> Result<()> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::InvalidDims {
            dims: vec![a.rows(), a.cols(), b.rows(), b.cols()],
            reason: "SSIM inputs must have equal dimensions".into(),
        });
    }
    Ok(())
}

pub fn ssim(a: &Image2D, b: &Image2D, cfg: &SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    SsimWorkspace::new(*cfg, a.rows(), a.cols())?.value(&a.to_f64(), &b.to_f64())
}

/// Gradient of `upstream * ssim(a, b)` with respect to `a`.
pub fn ssim_backward(a: &Image2D, b: &Image2D, cfg: &SsimConfig, upstream: f64) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let mut grad = vec![0.0; a.rows() * a.cols()];
    SsimWorkspace::new(*cfg, a.rows(), a.cols())?.value_and_grad(&a.to_f64(), &b.to_f64(), upstream, &mut grad)?;
    Ok(grad)
}

/// Negative SSIM; lower is better.
pub fn training_loss(rendered: &Image2D, target: &Image2D, cfg: &SsimConfig) -> Result<f64> {
    Ok(-ssim(rendered, target, cfg)?)
}
