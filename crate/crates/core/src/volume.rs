//! Dense volumes, 2D images, their on-disk formats, and synthetic phantoms.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`. Images are
//! row-major with columns fastest. All intensities live in `[0, 1]`.
//!
//! The raw float format shared by volumes and images is:
//!
//! ```text
//! magic    8 bytes  "RVOLv001"
//! dims     3 x u32  little-endian
//! spacing  f32      little-endian
//! payload  f32 x prod(dims), little-endian
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"RVOLv001";
const RAW_HEADER_LEN: usize = 8 + 3 * 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    dims: [usize; 3],
    spacing: f32,
    voxels: Vec<f32>,
}

impl DenseVolume {
    pub fn new(dims: [usize; 3], spacing: f32, voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidDims {
                dims: dims.to_vec(),
                reason: "every volume dimension must be at least 2".into(),
            });
        }
        let count = dims[0] * dims[1] * dims[2];
        if voxels.len() != count {
            return Err(Error::ShapeMismatch {
                expected: count,
                actual: voxels.len(),
            });
        }
        check_unit_range(&voxels)?;
        Ok(Self { dims, spacing, voxels })
    }

    pub fn constant(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::new(dims, 1.0, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f32 {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Trilinear sample at a normalized coordinate in `[-1, 1]^3`. Voxel
    /// centres sit on the corner-aligned lattice; out-of-cube points clamp.
    pub fn sample_trilinear(&self, coord: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let (i0, t) = lattice_cell(coord[a], self.dims[a]);
            base[a] = i0;
            frac[a] = t;
        }
        let [x0, y0, z0] = base;
        let [tx, ty, tz] = frac;
        let v = |dx: usize, dy: usize, dz: usize| self.get(x0 + dx, y0 + dy, z0 + dz) as f64;
        let c00 = v(0, 0, 0) * (1.0 - tx) + v(1, 0, 0) * tx;
        let c10 = v(0, 1, 0) * (1.0 - tx) + v(1, 1, 0) * tx;
        let c01 = v(0, 0, 1) * (1.0 - tx) + v(1, 0, 1) * tx;
        let c11 = v(0, 1, 1) * (1.0 - tx) + v(1, 1, 1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        c0 * (1.0 - tz) + c1 * tz
    }

    /// The axial (z = const) slice at voxel depth `z` as an image.
    pub fn axial_slice(&self, z: usize) -> Image2D {
        let [nx, ny, _] = self.dims;
        let start = nx * ny * z;
        Image2D {
            rows: ny,
            cols: nx,
            pixels: self.voxels[start..start + nx * ny].to_vec(),
        }
    }
}

/// Clamp a normalized coordinate and split it into a lattice cell index and
/// fractional offset, with `(x + 1) / 2 * (n - 1)` as the continuous index.
#[inline]
pub(crate) fn lattice_cell(x: f64, n: usize) -> (usize, f64) {
    let u = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64;
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, u - i0 as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f32>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidDims {
                dims: vec![rows, cols],
                reason: "images need at least 2 rows and 2 columns".into(),
            });
        }
        if pixels.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                actual: pixels.len(),
            });
        }
        check_unit_range(&pixels)?;
        Ok(Self { rows, cols, pixels })
    }

    /// Build from f64 values, clamping into `[0, 1]`.
    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("image pixel {i}"),
            });
        }
        let pixels = values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(rows, cols, pixels)
    }

    pub fn constant(rows: usize, cols: usize, value: f32) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.cols + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// 2x2 box-average downsample (odd trailing row/column dropped).
    pub fn downsample2(&self) -> Result<Image2D> {
        let (rows, cols) = (self.rows / 2, self.cols / 2);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let s = self.get(2 * r, 2 * c) as f64
                    + self.get(2 * r, 2 * c + 1) as f64
                    + self.get(2 * r + 1, 2 * c) as f64
                    + self.get(2 * r + 1, 2 * c + 1) as f64;
                out.push(s * 0.25);
            }
        }
        Image2D::from_f64(rows, cols, &out)
    }
}

fn check_unit_range(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::OutOfRange {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Parameters of a synthetic phantom: nested ellipsoid shells over a 0.5
/// background, with a sinusoidal texture confined to the outermost shell.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub n_ellipsoids: usize,
    /// Texture cycles across the normalized cube; 0 disables texture.
    pub texture_freq: f64,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        Self {
            dims,
            seed,
            n_ellipsoids: 3,
            texture_freq: 3.0,
        }
    }
}

const BACKGROUND: f64 = 0.5;
const EDGE_WIDTH: f64 = 0.05;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    delta: f64,
}

impl Ellipsoid {
    /// Smooth inside-indicator: ~1 inside, ~0 outside.
    fn membership(&self, p: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let q = (p[a] - self.center[a]) / self.radii[a];
            d2 += q * q;
        }
        let d = d2.sqrt();
        1.0 / (1.0 + ((d - 1.0) / EDGE_WIDTH).exp())
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<DenseVolume> {
    if spec.dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidDims {
            dims: spec.dims.to_vec(),
            reason: "phantom dimensions must be at least 8".into(),
        });
    }
    if !spec.texture_freq.is_finite() || spec.texture_freq < 0.0 {
        return Err(Error::Config(format!(
            "texture_freq must be finite and non-negative, got {}",
            spec.texture_freq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n = spec.n_ellipsoids;
    let outer = [0.78, 0.66, 0.72];
    let shells: Vec<Ellipsoid> = (0..n)
        .map(|k| {
            let scale = 1.0 - 0.65 * k as f64 / n as f64;
            let center = [0; 3].map(|_: i32| 0.05 * rng.gen_range(-1.0..1.0));
            let radii = [0, 1, 2].map(|a| outer[a] * scale * (1.0 + 0.06 * rng.gen_range(-1.0..1.0)));
            let delta = if k % 2 == 0 { 0.2 } else { -0.17 };
            Ellipsoid { center, radii, delta }
        })
        .collect();

    let phases: [f64; 4] = [0; 4].map(|_: i32| rng.gen_range(0.0..2.0 * PI));
    let theta = rng.gen_range(0.0..PI);
    let freq = spec.texture_freq * PI;

    let [nx, ny, nz] = spec.dims;
    let coord = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [coord(x, nx), coord(y, ny), coord(z, nz)];
                let mut v = BACKGROUND;
                for shell in &shells {
                    v += shell.delta * shell.membership(p);
                }
                if spec.texture_freq > 0.0 {
                    let mask = shells.first().map_or(1.0, |s| s.membership(p));
                    let lattice = (freq * p[0] + phases[0]).sin()
                        * (freq * p[1] + phases[1]).sin()
                        * (freq * p[2] + phases[2]).sin();
                    let oblique = (1.5 * freq * (p[0] * theta.cos() + p[1] * theta.sin()) + phases[3]).sin();
                    v += mask * (0.09 * lattice + 0.04 * oblique);
                }
                voxels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    DenseVolume::new(spec.dims, 1.0, voxels)
}

fn write_raw(path: &Path, dims: [usize; 3], spacing: f32, payload: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(RAW_HEADER_LEN + 4 * payload.len());
    bytes.extend_from_slice(VOLUME_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidDims {
            dims: dims.to_vec(),
            reason: "dimension does not fit in u32".into(),
        })?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes.extend_from_slice(&spacing.to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
struct RawFile {
    dims: [usize; 3],
    spacing: f32,
    payload: Vec<f32>,
}

fn read_raw(path: &Path) -> Result<RawFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&bytes)
}

fn parse_raw(bytes: &[u8]) -> Result<RawFile> {
    if bytes.len() < VOLUME_MAGIC.len() {
        return Err(Error::Truncated {
            expected: RAW_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(VOLUME_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::Truncated {
            expected: RAW_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(8), u32_at(12), u32_at(16)];
    let spacing = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|c| c.checked_mul(dims[2]))
        .ok_or_else(|| Error::InvalidDims {
            dims: dims.to_vec(),
            reason: "voxel count overflows".into(),
        })?;
    let expected = RAW_HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::LengthMismatch {
            dims,
            expected,
            actual: bytes.len(),
        });
    }
    let payload = bytes[RAW_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawFile { dims, spacing, payload })
}

pub fn save_volume(vol: &DenseVolume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), vol.dims, vol.spacing, &vol.voxels)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<DenseVolume> {
    let raw = read_raw(path.as_ref())?;
    DenseVolume::new(raw.dims, raw.spacing, raw.payload)
}

/// Write an image in the raw float format with dims `(rows, cols, 1)`.
pub fn save_image_raw(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), [img.rows, img.cols, 1], 1.0, &img.pixels)
}

pub fn load_image_raw(path: impl AsRef<Path>) -> Result<Image2D> {
    let raw = read_raw(path.as_ref())?;
    if raw.dims[2] != 1 {
        return Err(Error::InvalidDims {
            dims: raw.dims.to_vec(),
            reason: "an image file must have depth 1".into(),
        });
    }
    Image2D::new(raw.dims[0], raw.dims[1], raw.payload)
}

/// Quantize to 8 bits, rounding half up.
pub fn quantize_u8(p: f32) -> u8 {
    ((p as f64).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Write a binary PGM (P5, maxval 255).
pub fn save_image(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    bytes.extend(img.pixels.iter().map(|&p| quantize_u8(p)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated {
                expected: pos + 1,
                actual: bytes.len(),
            });
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::BadMagic {
            expected: "P5".into(),
            found: tokens[0].clone(),
        });
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad PGM header field {s:?}: {e}"),
        })
    };
    let (cols, rows, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported PGM maxval {maxval}"),
        });
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let expected = pos + rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[pos..expected]
        .iter()
        .map(|&b| (b as f32 / maxval as f32).min(1.0))
        .collect();
    Image2D::new(rows, cols, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_phantom_is_constant_background() {
        let spec = PhantomSpec {
            dims: [8, 9, 10],
            seed: 3,
            n_ellipsoids: 0,
            texture_freq: 0.0,
        };
        let vol = generate_phantom(&spec).unwrap();
        assert!(vol.voxels().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec::new([16, 16, 16], 11);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_seeds_differ() {
        let a = generate_phantom(&PhantomSpec::new([16, 16, 16], 1)).unwrap();
        let b = generate_phantom(&PhantomSpec::new([16, 16, 16], 2)).unwrap();
        let differing = a.voxels().iter().zip(b.voxels()).filter(|(x, y)| x != y).count();
        assert!(differing * 100 >= a.voxels().len(), "{differing}");
    }

    #[test]
    fn phantom_rejects_small_dims() {
        let err = generate_phantom(&PhantomSpec::new([7, 16, 16], 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidDims { .. }));
    }

    #[test]
    fn phantom_has_structure() {
        let vol = generate_phantom(&PhantomSpec::new([24, 24, 24], 5)).unwrap();
        let v = vol.voxels();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(var.sqrt() > 0.05, "std {}", var.sqrt());
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn trilinear_hits_lattice_exactly() {
        let vol = generate_phantom(&PhantomSpec::new([9, 10, 11], 2)).unwrap();
        let c = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
        for &(x, y, z) in &[(0, 0, 0), (8, 9, 10), (3, 4, 5)] {
            let s = vol.sample_trilinear([c(x, 9), c(y, 10), c(z, 11)]);
            assert!((s - vol.get(x, y, z) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_rounding() {
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(0.5), 128);
    }

    #[test]
    fn truncated_header_and_bad_magic() {
        assert!(matches!(parse_raw(b"RVOL").unwrap_err(), Error::Truncated { .. }));
        assert!(matches!(
            parse_raw(b"XXXXXXXXaaaaaaaaaaaaaaaa").unwrap_err(),
            Error::BadMagic { .. }
        ));
    }
}
