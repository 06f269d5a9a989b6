//! Factorized volume fields.
//!
//! A field stores a `C`-channel volume of resolution `I x J x K` as a rank-`R`
//! tensor decomposition, either tri-planar (three axis-aligned planes per
//! rank) or CP (three vectors per rank). Ranks are combined by product or by
//! sum, and the rank terms are summed per channel.
//!
//! Factor storage interleaves channels and ranks innermost: entry `(c, r)` of
//! lattice site `s` in a factor lives at `s * C * R + c * R + r`. A lookup at
//! one site therefore touches one contiguous block of `C * R` values.

mod cp;
mod triplanar;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    TriPlanar,
    Cp,
}

impl FieldKind {
    pub fn code(self) -> u8 {
        match self {
            FieldKind::TriPlanar => 0,
            FieldKind::Cp => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FieldKind::TriPlanar),
            1 => Some(FieldKind::Cp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combiner {
    #[default]
    Product,
    Sum,
}

impl Combiner {
    pub fn code(self) -> u8 {
        match self {
            Combiner::Product => 0,
            Combiner::Sum => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Combiner::Product),
            1 => Some(Combiner::Sum),
            _ => None,
        }
    }
}

/// Shape parameters shared by both decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldShape {
    pub kind: FieldKind,
    pub combiner: Combiner,
    pub resolution: [usize; 3],
    pub rank: usize,
    pub channels: usize,
}

impl FieldShape {
    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDims {
                dims: self.resolution.to_vec(),
                reason: "field resolution must be at least 2 per axis".into(),
            });
        }
        if self.rank == 0 || self.channels == 0 {
            return Err(Error::Config("rank and channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of lattice sites in each of the three factors.
    pub fn factor_sites(&self) -> [usize; 3] {
        let [i, j, k] = self.resolution;
        match self.kind {
            FieldKind::TriPlanar => [i * j, j * k, i * k],
            FieldKind::Cp => [i, j, k],
        }
    }

    /// Total stored parameters: `C * R * (IJ + JK + IK)` or `C * R * (I + J + K)`.
    pub fn param_count(&self) -> usize {
        self.channels * self.rank * self.factor_sites().iter().sum::<usize>()
    }

    pub(crate) fn block(&self) -> usize {
        self.channels * self.rank
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: FieldShape,
    factors: [Vec<f32>; 3],
}

/// Accumulated loss gradients, congruent with the owning field's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub factors: [Vec<f64>; 3],
}

impl FieldGradients {
    pub fn zero(&mut self) {
        for f in &mut self.factors {
            f.fill(0.0);
        }
    }
}

/// Per-axis interpolation stencil for one coordinate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisStencil {
    pub i0: usize,
    pub t: f64,
    /// d(continuous index)/d(coordinate); zero when the coordinate is clamped.
    pub slope: f64,
}

impl AxisStencil {
    #[inline]
    pub fn new(x: f64, n: usize) -> Self {
        let scale = 0.5 * (n - 1) as f64;
        let clamped = !(-1.0..=1.0).contains(&x);
        let u = (x.clamp(-1.0, 1.0) + 1.0) * scale;
        let i0 = (u.floor() as usize).min(n - 2);
        AxisStencil {
            i0,
            t: u - i0 as f64,
            slope: if clamped { 0.0 } else { scale },
        }
    }
}

/// Reusable buffers for sampling and its backward pass.
#[derive(Debug, Clone, Default)]
pub struct FieldScratch {
    pub(crate) vals: [Vec<f64>; 3],
    pub(crate) dfirst: [Vec<f64>; 3],
    pub(crate) dsecond: [Vec<f64>; 3],
    pub(crate) grad: [Vec<f64>; 3],
}

impl FieldScratch {
    pub fn for_shape(shape: &FieldShape) -> Self {
        let n = shape.block();
        let v = || [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        FieldScratch {
            vals: v(),
            dfirst: v(),
            dsecond: v(),
            grad: v(),
        }
    }
}

impl Field {
    pub fn from_factors(shape: FieldShape, factors: [Vec<f32>; 3]) -> Result<Self> {
        shape.validate()?;
        let sites = shape.factor_sites();
        for (f, s) in factors.iter().zip(sites) {
            if f.len() != s * shape.block() {
                return Err(Error::ShapeMismatch {
                    expected: s * shape.block(),
                    actual: f.len(),
                });
            }
        }
        if factors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "field factor".into(),
            });
        }
        Ok(Self { shape, factors })
    }

    /// Every factor entry set to `value`.
    pub fn constant(shape: FieldShape, value: f32) -> Result<Self> {
        shape.validate()?;
        let factors = shape.factor_sites().map(|s| vec![value; s * shape.block()]);
        Self::from_factors(shape, factors)
    }

    pub fn shape(&self) -> &FieldShape {
        &self.shape
    }

    pub fn factors(&self) -> &[Vec<f32>; 3] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Vec<f32>; 3] {
        &mut self.factors
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    /// Index into `factors[part]` for lattice site `site`, channel `c`, rank `r`.
    pub fn entry_index(&self, site: usize, c: usize, r: usize) -> usize {
        site * self.shape.block() + c * self.shape.rank + r
    }

    pub fn zero_gradients(&self) -> FieldGradients {
        FieldGradients {
            factors: self.factors.clone().map(|f| vec![0.0; f.len()]),
        }
    }

    pub fn scratch(&self) -> FieldScratch {
        FieldScratch::for_shape(&self.shape)
    }

    /// Sample the `C`-channel feature at a normalized coordinate. Coordinates
    /// outside `[-1, 1]` clamp to the boundary.
    pub fn sample(&self, coord: Vec3) -> Result<Vec<f64>> {
        check_coord(coord)?;
        let mut out = vec![0.0; self.shape.channels];
        self.sample_into(coord, &mut out, &mut self.scratch());
        Ok(out)
    }

    /// Unchecked sampling into caller buffers; `coord` must be finite.
    #[inline]
    pub fn sample_into(&self, coord: Vec3, out: &mut [f64], scratch: &mut FieldScratch) {
        let st = self.stencils(coord);
        match self.shape.kind {
            FieldKind::TriPlanar => triplanar::sample(self, &st, out, scratch),
            FieldKind::Cp => cp::sample(self, &st, out, scratch),
        }
    }

    /// Accumulate `d(upstream . feature)/d(factor)` into `grads` and return
    /// the gradient with respect to the coordinate.
    pub fn backward_sample(
        &self,
        coord: Vec3,
        upstream: &[f64],
        grads: &mut FieldGradients,
        scratch: &mut FieldScratch,
    ) -> Vec3 {
        let st = self.stencils(coord);
        match self.shape.kind {
            FieldKind::TriPlanar => triplanar::backward(self, &st, upstream, grads, scratch),
            FieldKind::Cp => cp::backward(self, &st, upstream, grads, scratch),
        }
    }

    #[inline]
    fn stencils(&self, coord: Vec3) -> [AxisStencil; 3] {
        let [i, j, k] = self.shape.resolution;
        [
            AxisStencil::new(coord[0], i),
            AxisStencil::new(coord[1], j),
            AxisStencil::new(coord[2], k),
        ]
    }

    /// Multiply-adds spent per sampled point, forward only.
    pub fn madds_per_sample(&self) -> usize {
        let per_term = match self.shape.kind {
            FieldKind::TriPlanar => 3 * 4,
            FieldKind::Cp => 3 * 2,
        };
        self.shape.block() * (per_term + 2)
    }

    /// Evaluate the decomposition at every integer lattice index.
    pub fn reconstruct_dense(&self) -> Result<DenseFeatures> {
        let [ni, nj, nk] = self.shape.resolution;
        let c_count = self.shape.channels;
        let requested = ni * nj * nk * c_count;
        if requested > DENSE_LIMIT {
            return Err(Error::SizeGuard {
                requested,
                limit: DENSE_LIMIT,
            });
        }
        let rank = self.shape.rank;
        let [f0, f1, f2] = &self.factors;
        let mut data = Vec::with_capacity(requested);
        for k in 0..nk {
            for j in 0..nj {
                for i in 0..ni {
                    let sites = match self.shape.kind {
                        FieldKind::TriPlanar => [i * nj + j, j * nk + k, i * nk + k],
                        FieldKind::Cp => [i, j, k],
                    };
                    for c in 0..c_count {
                        let mut acc = 0.0f64;
                        for r in 0..rank {
                            let a = f0[self.entry_index(sites[0], c, r)] as f64;
                            let b = f1[self.entry_index(sites[1], c, r)] as f64;
                            let d = f2[self.entry_index(sites[2], c, r)] as f64;
                            acc += match self.shape.combiner {
                                Combiner::Product => a * b * d,
                                Combiner::Sum => a + b + d,
                            };
                        }
                        data.push(acc);
                    }
                }
            }
        }
        Ok(DenseFeatures {
            dims: self.shape.resolution,
            channels: c_count,
            data,
        })
    }
}

pub const DENSE_LIMIT: usize = 1 << 24;

fn check_coord(coord: Vec3) -> Result<()> {
    if coord.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "sample coordinate".into(),
        })
    }
}

/// Dense `I x J x K x C` feature tensor, x-fastest with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatures {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseFeatures {
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> f64 {
        let [ni, nj, _] = self.dims;
        self.data[((k * nj + j) * ni + i) * self.channels + c]
    }
}

/// Random initialization: entries i.i.d. `U(0.9, 1.1)` for the product
/// combiner, `U(-0.1, 0.1)` for the sum combiner.
pub fn init_field(shape: FieldShape, seed: u64) -> Result<Field> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = match shape.combiner {
        Combiner::Product => (0.9f32, 1.1f32),
        Combiner::Sum => (-0.1f32, 0.1f32),
    };
    let factors = shape
        .factor_sites()
        .map(|s| (0..s * shape.block()).map(|_| rng.gen_range(lo..=hi)).collect());
    Field::from_factors(shape, factors)
}
