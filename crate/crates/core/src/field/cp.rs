//! CP kernels: factors are the X, Y and Z vectors, linearly interpolated
//! per axis before combining.

use super::{AxisStencil, Combiner, Field, FieldGradients, FieldScratch};
use crate::geometry::Vec3;

#[inline]
fn interp(v: &[f32], s: &AxisStencil, block: usize, out: &mut [f64], slope: &mut [f64]) {
    let lo = &v[s.i0 * block..(s.i0 + 1) * block];
    let hi = &v[(s.i0 + 1) * block..(s.i0 + 2) * block];
    for k in 0..block {
        let (a, b) = (lo[k] as f64, hi[k] as f64);
        out[k] = a + s.t * (b - a);
        slope[k] = b - a;
    }
}

fn fill(field: &Field, st: &[AxisStencil; 3], scratch: &mut FieldScratch) {
    let block = field.shape.block();
    for a in 0..3 {
        interp(
            &field.factors[a],
            &st[a],
            block,
            &mut scratch.vals[a],
            &mut scratch.dfirst[a],
        );
    }
}

pub(super) fn sample(field: &Field, st: &[AxisStencil; 3], out: &mut [f64], scratch: &mut FieldScratch) {
    fill(field, st, scratch);
    let rank = field.shape.rank;
    let [x, y, z] = &scratch.vals;
    for (c, o) in out.iter_mut().enumerate() {
        let range = c * rank..(c + 1) * rank;
        *o = match field.shape.combiner {
            Combiner::Product => range.map(|k| x[k] * y[k] * z[k]).sum(),
            Combiner::Sum => range.map(|k| x[k] + y[k] + z[k]).sum(),
        };
    }
}

pub(super) fn backward(
    field: &Field,
    st: &[AxisStencil; 3],
    upstream: &[f64],
    grads: &mut FieldGradients,
    scratch: &mut FieldScratch,
) -> Vec3 {
    fill(field, st, scratch);
    let rank = field.shape.rank;
    let block = field.shape.block();
    let [x, y, z] = &scratch.vals;
    let [dx, dy, dz] = &scratch.dfirst;
    let [gx, gy, gz] = &mut scratch.grad;
    let mut coord = [0.0; 3];
    for (c, &u) in upstream.iter().enumerate() {
        for k in c * rank..(c + 1) * rank {
            let g = match field.shape.combiner {
                Combiner::Product => [u * y[k] * z[k], u * x[k] * z[k], u * x[k] * y[k]],
                Combiner::Sum => [u; 3],
            };
            gx[k] = g[0];
            gy[k] = g[1];
            gz[k] = g[2];
            coord[0] += g[0] * dx[k];
            coord[1] += g[1] * dy[k];
            coord[2] += g[2] * dz[k];
        }
    }
    for a in 0..3 {
        let s = &st[a];
        let lo = s.i0 * block;
        let dst = &mut grads.factors[a][lo..lo + 2 * block];
        let g = &scratch.grad[a];
        for k in 0..block {
            dst[k] += (1.0 - s.t) * g[k];
            dst[block + k] += s.t * g[k];
        }
    }
    [coord[0] * st[0].slope, coord[1] * st[1].slope, coord[2] * st[2].slope]
}
