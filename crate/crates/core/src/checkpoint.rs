//! Binary checkpoints for trained models.
//!
//! Field checkpoint layout, all little-endian:
//!
//! ```text
//! "RFLDv001"  kind:u8  combiner:u8  I J K R C:u32
//! factors:f32   for plane (XY, YZ, XZ or vX, vY, vZ), channel, rank, site
//! n_layers:u32  (inputs, outputs):u32 per layer
//! per layer: weights:f32 (row-major, outputs x inputs), bias:f32
//! ```
//!
//! Plane sites run with the first index slowest. The encoding is not
//! stored: the decoder input width is `C * (2L + raw)`, which fixes both.
//! Implicit baselines use the `"RIMPv001"` magic followed by the same
//! network block.

use std::path::Path;

use crate::decoder::{Layer, Mlp};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::field::{Combiner, Field, FieldKind, FieldShape};
use crate::model::{FactorizedModel, ImplicitModel};
use crate::trainer::TrainedModel;

pub const FIELD_MAGIC: &[u8; 8] = b"RFLDv001";
pub const IMPLICIT_MAGIC: &[u8; 8] = b"RIMPv001";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or(Error::Truncated {
            expected: usize::MAX,
            actual: self.bytes.len(),
        })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "{} trailing bytes after checkpoint payload",
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> Result<()> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    Ok(())
}

fn write_mlp(w: &mut Writer, mlp: &Mlp) {
    w.u32(mlp.layers().len());
    for l in mlp.layers() {
        w.u32(l.inputs);
        w.u32(l.outputs);
    }
    for l in mlp.layers() {
        l.weights.iter().for_each(|&v| w.f32(v));
        l.bias.iter().for_each(|&v| w.f32(v));
    }
}

fn read_mlp(r: &mut Reader) -> Result<Mlp> {
    let n = r.u32()?;
    if n == 0 || n > 64 {
        return Err(Error::Config(format!("checkpoint claims {n} network layers")));
    }
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        shapes.push((r.u32()?, r.u32()?));
    }
    let mut layers = Vec::with_capacity(n);
    for (inputs, outputs) in shapes {
        let weights = r.f32s(inputs * outputs)?;
        let bias = r.f32s(outputs)?;
        layers.push(Layer {
            inputs,
            outputs,
            weights,
            bias,
        });
    }
    Mlp::from_layers(layers)
}

pub fn encode_checkpoint(model: &FactorizedModel) -> Vec<u8> {
    let shape = model.field.shape();
    let mut w = Writer(FIELD_MAGIC.to_vec());
    w.u8(shape.kind.code());
    w.u8(shape.combiner.code());
    for n in shape.resolution {
        w.u32(n);
    }
    w.u32(shape.rank);
    w.u32(shape.channels);
    let sites = shape.factor_sites();
    let (c_n, r_n) = (shape.channels, shape.rank);
    for (p, factor) in model.field.factors().iter().enumerate() {
        for c in 0..c_n {
            for r in 0..r_n {
                for s in 0..sites[p] {
                    w.f32(factor[(s * c_n + c) * r_n + r]);
                }
            }
        }
    }
    write_mlp(&mut w, &model.decoder);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FactorizedModel> {
    check_magic(bytes, FIELD_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let kind_code = r.u8()?;
    let kind =
        FieldKind::from_code(kind_code).ok_or_else(|| Error::Config(format!("unknown field kind {kind_code}")))?;
    let comb_code = r.u8()?;
    let combiner =
        Combiner::from_code(comb_code).ok_or_else(|| Error::Config(format!("unknown combiner {comb_code}")))?;
    let resolution = [r.u32()?, r.u32()?, r.u32()?];
    let rank = r.u32()?;
    let channels = r.u32()?;
    let shape = FieldShape {
        kind,
        combiner,
        resolution,
        rank,
        channels,
    };
    shape.validate()?;
    let sites = shape.factor_sites();
    let mut factors: [Vec<f32>; 3] = Default::default();
    for (p, factor) in factors.iter_mut().enumerate() {
        let flat = r.f32s(sites[p] * channels * rank)?;
        *factor = vec![0.0; flat.len()];
        let mut k = 0;
        for c in 0..channels {
            for q in 0..rank {
                for s in 0..sites[p] {
                    factor[(s * channels + c) * rank + q] = flat[k];
                    k += 1;
                }
            }
        }
    }
    let decoder = read_mlp(&mut r)?;
    r.finish()?;
    let field = Field::from_factors(shape, factors)?;
    let width = decoder.input_width();
    if width % channels != 0 {
        return Err(Error::ShapeMismatch {
            expected: channels,
            actual: width,
        });
    }
    let encoding = EncodingConfig::from_width(width / channels)?;
    FactorizedModel::new(field, decoder, encoding)
}

pub fn encode_implicit(model: &ImplicitModel) -> Vec<u8> {
    let mut w = Writer(IMPLICIT_MAGIC.to_vec());
    write_mlp(&mut w, &model.net);
    w.0
}

pub fn decode_implicit(bytes: &[u8]) -> Result<ImplicitModel> {
    check_magic(bytes, IMPLICIT_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let net = read_mlp(&mut r)?;
    r.finish()?;
    let width = net.input_width();
    if width % 3 != 0 {
        return Err(Error::ShapeMismatch {
            expected: 3,
            actual: width,
        });
    }
    let encoding = EncodingConfig::from_width(width / 3)?;
    Ok(ImplicitModel { net, encoding })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &FactorizedModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FactorizedModel> {
    decode_checkpoint(&read(path.as_ref())?)
}

pub fn save_implicit(model: &ImplicitModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_implicit(model))
}

/// Load either checkpoint kind, dispatching on the magic.
pub fn load_any(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let bytes = read(path.as_ref())?;
    if bytes.starts_with(IMPLICIT_MAGIC) {
        decode_implicit(&bytes).map(TrainedModel::Implicit)
    } else {
        decode_checkpoint(&bytes).map(TrainedModel::Factorized)
    }
}
