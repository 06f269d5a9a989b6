//! Slice poses and the sample grids they induce.
//!
//! A pose is three Euler angles in degrees, applied as an intrinsic Z-Y-X
//! rotation `R = Rz(e0) * Ry(e1) * Rx(e2)`, followed by a translation in
//! normalized volume coordinates. The volume occupies `[-1, 1]^3` with its
//! centre at the origin, and `z` is the axial (head-to-toe) axis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Rotation angles in degrees about z, y, x.
    pub euler: Vec3,
    /// Translation in normalized coordinates.
    pub trans: Vec3,
    pub learnable: bool,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        euler: [0.0; 3],
        trans: [0.0; 3],
        learnable: false,
    };

    pub fn new(euler: Vec3, trans: Vec3) -> Self {
        Self {
            euler,
            trans,
            learnable: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.euler.iter().chain(&self.trans).all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_zyx(self.euler)
    }

    /// Unit normal of the posed slice plane.
    pub fn normal(&self) -> Vec3 {
        let r = self.rotation();
        [r[0][2], r[1][2], r[2][2]]
    }

    /// Whether both poses place their slice on the same plane (orientation
    /// and offset, ignoring in-plane motion and normal sign).
    pub fn same_plane(&self, other: &Pose, tol: f64) -> bool {
        let (n1, n2) = (self.normal(), other.normal());
        let cos = dot(n1, n2);
        if cos.abs() < 1.0 - tol {
            return false;
        }
        let d1 = dot(n1, self.trans);
        let d2 = dot(n2, other.trans) * cos.signum();
        (d1 - d2).abs() < tol
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.trans;
        [a, b, c, x, y, z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rz(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn ry(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rx(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn drz(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

fn dry(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drx(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

pub fn rotation_zyx(euler_deg: Vec3) -> Mat3 {
    let [a, b, c] = euler_deg.map(f64::to_radians);
    mat_mul(&mat_mul(&rz(a), &ry(b)), &rx(c))
}

/// Derivatives of the rotation matrix with respect to each Euler angle,
/// taken in radians.
pub fn rotation_jacobian(euler_deg: Vec3) -> [Mat3; 3] {
    let [a, b, c] = euler_deg.map(f64::to_radians);
    [
        mat_mul(&mat_mul(&drz(a), &ry(b)), &rx(c)),
        mat_mul(&mat_mul(&rz(a), &dry(b)), &rx(c)),
        mat_mul(&mat_mul(&rz(a), &ry(b)), &drx(c)),
    ]
}

/// Sample coordinates of one posed cross-section, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrid {
    pub rows: usize,
    pub cols: usize,
    /// Half-widths of the unposed plane along columns and rows.
    pub extent: [f64; 2],
    pub coords: Vec<Vec3>,
}

impl SliceGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Point on the unposed z = 0 plane for pixel `(r, c)`.
    #[inline]
    pub fn base_point(&self, r: usize, c: usize) -> Vec3 {
        base_point(r, c, self.rows, self.cols, self.extent)
    }
}

#[inline]
fn base_point(r: usize, c: usize, rows: usize, cols: usize, extent: [f64; 2]) -> Vec3 {
    let x = extent[0] * (-1.0 + 2.0 * c as f64 / (cols - 1) as f64);
    let y = extent[1] * (-1.0 + 2.0 * r as f64 / (rows - 1) as f64);
    [x, y, 0.0]
}

pub fn pose_to_grid(pose: &Pose, rows: usize, cols: usize, extent: f64) -> Result<SliceGrid> {
    pose_to_grid_extent(pose, rows, cols, [extent, extent])
}

/// Largest accepted half-width; covers the cube diagonal with room to spare.
pub const MAX_EXTENT: f64 = 2.0;

/// Like [`pose_to_grid`] with separate half-widths across columns and rows.
pub fn pose_to_grid_extent(pose: &Pose, rows: usize, cols: usize, extent: [f64; 2]) -> Result<SliceGrid> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidDims {
            dims: vec![rows, cols],
            reason: "slice grids need at least 2 rows and 2 columns".into(),
        });
    }
    if extent.iter().any(|e| !(*e > 0.0 && *e <= MAX_EXTENT)) {
        return Err(Error::Config(format!(
            "extent must lie in (0, {MAX_EXTENT}], got {extent:?}"
        )));
    }
    if !pose.is_finite() {
        return Err(Error::NonFinite { what: "pose".into() });
    }
    let rot = pose.rotation();
    let mut coords = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let p = mat_vec(&rot, base_point(r, c, rows, cols, extent));
            coords.push([p[0] + pose.trans[0], p[1] + pose.trans[1], p[2] + pose.trans[2]]);
        }
    }
    Ok(SliceGrid {
        rows,
        cols,
        extent,
        coords,
    })
}

fn check_count(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("a slice stack needs N >= 2, got {n}")));
    }
    Ok(())
}

fn linspace_endpoints(n: usize, k: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (n - 1) as f64
}

/// Offsets at cell centres of `n` equal bins over `[-1, 1]`.
fn linspace_centred(n: usize, k: usize) -> f64 {
    -1.0 + (2 * k + 1) as f64 / n as f64
}

/// Euler angles placing the base plane at a coronal (y-normal) orientation.
pub const CORONAL_EULER: Vec3 = [0.0, 0.0, 90.0];
/// Euler angles placing the base plane at a sagittal (x-normal) orientation.
pub const SAGITTAL_EULER: Vec3 = [90.0, 0.0, 90.0];

/// `N` axial slices spanning the volume, endpoints included.
pub fn axial_stack_poses(n: usize) -> Result<Vec<Pose>> {
    check_count(n)?;
    Ok((0..n)
        .map(|k| Pose::new([0.0; 3], [0.0, 0.0, linspace_endpoints(n, k)]))
        .collect())
}

/// `N` coronal slices swept through 360 degrees about the axial (z) axis.
pub fn rotated_coronal_poses(n: usize) -> Result<Vec<Pose>> {
    check_count(n)?;
    Ok((0..n)
        .map(|k| {
            let angle = 360.0 * k as f64 / n as f64;
            Pose::new([angle, 0.0, CORONAL_EULER[2]], [0.0; 3])
        })
        .collect())
}

/// Orthogonal view families used for novel-view evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewFamily {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewFamily {
    pub const ALL: [ViewFamily; 3] = [ViewFamily::Axial, ViewFamily::Coronal, ViewFamily::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            ViewFamily::Axial => "axial",
            ViewFamily::Coronal => "coronal",
            ViewFamily::Sagittal => "sagittal",
        }
    }

    /// `n` parallel slices at bin centres along the family's normal axis.
    pub fn poses(self, n: usize) -> Result<Vec<Pose>> {
        check_count(n)?;
        Ok((0..n)
            .map(|k| {
                let t = linspace_centred(n, k);
                match self {
                    ViewFamily::Axial => Pose::new([0.0; 3], [0.0, 0.0, t]),
                    ViewFamily::Coronal => Pose::new(CORONAL_EULER, [0.0, t, 0.0]),
                    ViewFamily::Sagittal => Pose::new(SAGITTAL_EULER, [t, 0.0, 0.0]),
                }
            })
            .collect())
    }
}

impl std::str::FromStr for ViewFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(ViewFamily::Axial),
            "coronal" => Ok(ViewFamily::Coronal),
            "sagittal" => Ok(ViewFamily::Sagittal),
            other => Err(Error::Config(format!("unknown view family {other:?}"))),
        }
    }
}

/// Add independent `U(-h, h)` noise to every pose parameter. Angles take
/// the noise in degrees; translations take it in voxels of `dims` and are
/// converted to normalized units with `2 / (dim - 1)`.
pub fn perturb_poses(poses: &[Pose], noise_halfwidth: f64, seed: u64, dims: [usize; 3]) -> Vec<Pose> {
    if noise_halfwidth <= 0.0 {
        return poses.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = noise_halfwidth;
    poses
        .iter()
        .map(|p| {
            let mut q = *p;
            for e in &mut q.euler {
                *e += rng.gen_range(-h..=h);
            }
            for (a, t) in q.trans.iter_mut().enumerate() {
                *t += rng.gen_range(-h..=h) * 2.0 / (dims[a] - 1) as f64;
            }
            q
        })
        .collect()
}

/// Mean absolute pose error: (degrees over all angles, normalized units
/// over all translations).
pub fn mean_pose_error(estimated: &[Pose], truth: &[Pose]) -> (f64, f64) {
    let n = estimated.len().min(truth.len()).max(1) as f64;
    let mut angle = 0.0;
    let mut trans = 0.0;
    for (e, t) in estimated.iter().zip(truth) {
        for a in 0..3 {
            angle += (e.euler[a] - t.euler[a]).abs();
            trans += (e.trans[a] - t.trans[a]).abs();
        }
    }
    (angle / (3.0 * n), trans / (3.0 * n))
}

/// Parse `"e1,e2,e3,t1,t2,t3"`.
pub fn parse_pose(s: &str) -> Result<Pose> {
    let fields: Vec<&str> = if s.contains(',') {
        s.split(',').map(str::trim).collect()
    } else {
        s.split_whitespace().collect()
    };
    if fields.len() != 6 {
        return Err(Error::Parse {
            line: 1,
            message: format!("a pose needs 6 fields, got {}", fields.len()),
        });
    }
    let mut v = [0.0; 6];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse().map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad pose field {f:?}: {e}"),
        })?;
    }
    let pose = Pose::from_array(v);
    if !pose.is_finite() {
        return Err(Error::NonFinite { what: "pose".into() });
    }
    Ok(pose)
}

pub fn format_pose_table(poses: &[Pose]) -> String {
    let mut out = String::from("# euler_z_deg euler_y_deg euler_x_deg trans_x trans_y trans_z\n");
    for p in poses {
        let v = p.to_array();
        let _ = writeln!(out, "{} {} {} {} {} {}", v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    out
}

pub fn parse_pose_table(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let pose = parse_pose(line).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { line: i + 1, message },
            other => other,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_pose_table(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_pose_table(poses)).map_err(|e| Error::io(path, e))
}

pub fn read_pose_table(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_table(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn identity_grid_is_axial_lattice() {
        let g = pose_to_grid(&Pose::IDENTITY, 4, 5, 1.0).unwrap();
        assert_eq!(g.len(), 20);
        assert!(g.coords.iter().all(|p| p[2] == 0.0));
        assert_eq!(g.coords[0], [-1.0, -1.0, 0.0]);
        assert_eq!(g.coords[4], [1.0, -1.0, 0.0]);
        assert_eq!(g.coords[15], [-1.0, 1.0, 0.0]);
        assert_eq!(g.coords[19], [1.0, 1.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_zyx([90.0, 0.0, 0.0]);
        assert!(close(mat_vec(&r, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-6));
    }

    #[test]
    fn pure_translation() {
        let g = pose_to_grid(&Pose::new([0.0; 3], [0.0, 0.0, 0.5]), 3, 3, 1.0).unwrap();
        assert!(g.coords.iter().all(|p| p[2] == 0.5));
    }

    #[test]
    fn rejects_non_finite_pose() {
        let p = Pose::new([f64::NAN, 0.0, 0.0], [0.0; 3]);
        assert!(matches!(pose_to_grid(&p, 3, 3, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn axial_stack_offsets() {
        let z = |n| -> Vec<f64> { axial_stack_poses(n).unwrap().iter().map(|p| p.trans[2]).collect() };
        assert_eq!(z(2), vec![-1.0, 1.0]);
        assert_eq!(z(3), vec![-1.0, 0.0, 1.0]);
        let zs = z(128);
        assert_eq!(zs.len(), 128);
        for w in zs.windows(2) {
            assert!((w[1] - w[0] - 2.0 / 127.0).abs() < 1e-12);
        }
        assert!(axial_stack_poses(1).is_err());
    }

    #[test]
    fn coronal_sweep_angles() {
        let p = rotated_coronal_poses(4).unwrap();
        let angles: Vec<f64> = p.iter().map(|p| p.euler[0]).collect();
        assert_eq!(angles, vec![0.0, 90.0, 180.0, 270.0]);
        assert!(rotated_coronal_poses(1).is_err());
    }

    #[test]
    fn coronal_base_is_y_normal() {
        let p = rotated_coronal_poses(8).unwrap();
        let g = pose_to_grid(&p[0], 9, 9, 1.0).unwrap();
        assert!(g.coords.iter().all(|c| c[1].abs() < 1e-12));
    }

    #[test]
    fn sweep_grids_contain_axial_axis() {
        // centre column of every sweep grid lies on x = y = 0
        for pose in rotated_coronal_poses(16).unwrap() {
            let g = pose_to_grid(&pose, 9, 9, 1.0).unwrap();
            for r in 0..9 {
                let c = g.coords[r * 9 + 4];
                assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12, "{c:?}");
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let poses = axial_stack_poses(5).unwrap();
        assert_eq!(perturb_poses(&poses, 0.0, 1, [32; 3]), poses);
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let truth: Vec<Pose> = (0..1000).map(|_| Pose::IDENTITY).collect();
        let dims = [33, 17, 65];
        let a = perturb_poses(&truth, 3.0, 9, dims);
        assert_eq!(a, perturb_poses(&truth, 3.0, 9, dims));
        for p in &a {
            for k in 0..3 {
                assert!(p.euler[k].abs() <= 3.0);
                assert!(p.trans[k].abs() <= 3.0 * 2.0 / (dims[k] - 1) as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn eval_families_are_parallel_planes() {
        for fam in ViewFamily::ALL {
            let poses = fam.poses(6).unwrap();
            let n0 = poses[0].normal();
            for p in &poses {
                assert!((dot(p.normal(), n0) - 1.0).abs() < 1e-12);
            }
        }
        let sag = pose_to_grid(&ViewFamily::Sagittal.poses(2).unwrap()[0], 3, 3, 1.0).unwrap();
        assert!(sag.coords.iter().all(|c| (c[0] + 0.5).abs() < 1e-12));
    }

    #[test]
    fn same_plane_detects_flipped_sweep() {
        let p = rotated_coronal_poses(4).unwrap();
        assert!(p[0].same_plane(&p[2], 1e-9));
        assert!(!p[0].same_plane(&p[1], 1e-9));
    }

    #[test]
    fn pose_table_round_trip() {
        let poses = perturb_poses(&rotated_coronal_poses(7).unwrap(), 3.0, 4, [64; 3]);
        let text = format!("# header\n\n{}", format_pose_table(&poses));
        assert_eq!(parse_pose_table(&text).unwrap(), poses);
        assert!(parse_pose("1,2").is_err());
    }
}
