//! Tri-planar kernels: factors are the XY (I x J), YZ (J x K) and XZ (I x K)
//! planes, bilinearly interpolated per plane before combining.

use super::{AxisStencil, Combiner, Field, FieldGradients, FieldScratch};
use crate::geometry::Vec3;

/// (first axis, second axis) of each plane.
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

struct Corners {
    idx: [usize; 4],
    ta: f64,
    tb: f64,
}

impl Corners {
    #[inline]
    fn new(a: &AxisStencil, b: &AxisStencil, nb: usize, block: usize) -> Self {
        let s00 = a.i0 * nb + b.i0;
        Corners {
            idx: [
                s00 * block,
                (s00 + 1) * block,
                (s00 + nb) * block,
                (s00 + nb + 1) * block,
            ],
            ta: a.t,
            tb: b.t,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (ta, tb) = (self.ta, self.tb);
        [(1.0 - ta) * (1.0 - tb), (1.0 - ta) * tb, ta * (1.0 - tb), ta * tb]
    }
}

fn plane_corners(field: &Field, st: &[AxisStencil; 3]) -> [Corners; 3] {
    let res = field.shape.resolution;
    let block = field.shape.block();
    PLANE_AXES.map(|(a, b)| Corners::new(&st[a], &st[b], res[b], block))
}

#[inline]
fn interp(plane: &[f32], c: &Corners, out: &mut [f64]) {
    let n = out.len();
    let [w00, w01, w10, w11] = c.weights();
    let p00 = &plane[c.idx[0]..c.idx[0] + n];
    let p01 = &plane[c.idx[1]..c.idx[1] + n];
    let p10 = &plane[c.idx[2]..c.idx[2] + n];
    let p11 = &plane[c.idx[3]..c.idx[3] + n];
    for k in 0..n {
        out[k] = w00 * p00[k] as f64 + w01 * p01[k] as f64 + w10 * p10[k] as f64 + w11 * p11[k] as f64;
    }
}

#[inline]
fn interp_with_slopes(plane: &[f32], c: &Corners, out: &mut [f64], da: &mut [f64], db: &mut [f64]) {
    let n = out.len();
    let (ta, tb) = (c.ta, c.tb);
    let p00 = &plane[c.idx[0]..c.idx[0] + n];
    let p01 = &plane[c.idx[1]..c.idx[1] + n];
    let p10 = &plane[c.idx[2]..c.idx[2] + n];
    let p11 = &plane[c.idx[3]..c.idx[3] + n];
    for k in 0..n {
        let (v00, v01, v10, v11) = (p00[k] as f64, p01[k] as f64, p10[k] as f64, p11[k] as f64);
        let lo = v00 + tb * (v01 - v00);
        let hi = v10 + tb * (v11 - v10);
        out[k] = lo + ta * (hi - lo);
        da[k] = hi - lo;
        db[k] = (1.0 - ta) * (v01 - v00) + ta * (v11 - v10);
    }
}

#[inline]
fn scatter(grad: &mut [f64], c: &Corners, g: &[f64]) {
    let n = g.len();
    let [w00, w01, w10, w11] = c.weights();
    for (corner, w) in c.idx.iter().zip([w00, w01, w10, w11]) {
        if w == 0.0 {
            continue;
        }
        let dst = &mut grad[*corner..*corner + n];
        for k in 0..n {
            dst[k] += w * g[k];
        }
    }
}

pub(super) fn sample(field: &Field, st: &[AxisStencil; 3], out: &mut [f64], scratch: &mut FieldScratch) {
    let corners = plane_corners(field, st);
    for p in 0..3 {
        interp(&field.factors[p], &corners[p], &mut scratch.vals[p]);
    }
    let rank = field.shape.rank;
    let [a, b, d] = &scratch.vals;
    for (c, o) in out.iter_mut().enumerate() {
        let range = c * rank..(c + 1) * rank;
        *o = match field.shape.combiner {
            Combiner::Product => range.map(|k| a[k] * b[k] * d[k]).sum(),
            Combiner::Sum => range.map(|k| a[k] + b[k] + d[k]).sum(),
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
    let corners = plane_corners(field, st);
    for p in 0..3 {
        interp_with_slopes(
            &field.factors[p],
            &corners[p],
            &mut scratch.vals[p],
            &mut scratch.dfirst[p],
            &mut scratch.dsecond[p],
        );
    }
    let rank = field.shape.rank;
    let [a, b, d] = &scratch.vals;
    let [ga, gb, gd] = &mut scratch.grad;
    let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
    for (c, &u) in upstream.iter().enumerate() {
        for k in c * rank..(c + 1) * rank {
            let (pa, pb, pd) = match field.shape.combiner {
                Combiner::Product => (u * b[k] * d[k], u * a[k] * d[k], u * a[k] * b[k]),
                Combiner::Sum => (u, u, u),
            };
            ga[k] = pa;
            gb[k] = pb;
            gd[k] = pd;
            // XY varies with (x, y), YZ with (y, z), XZ with (x, z)
            gx += pa * scratch.dfirst[0][k] + pd * scratch.dfirst[2][k];
            gy += pa * scratch.dsecond[0][k] + pb * scratch.dfirst[1][k];
            gz += pb * scratch.dsecond[1][k] + pd * scratch.dsecond[2][k];
        }
    }
    for p in 0..3 {
        scatter(&mut grads.factors[p], &corners[p], &scratch.grad[p]);
    }
    [gx * st[0].slope, gy * st[1].slope, gz * st[2].slope]
}
