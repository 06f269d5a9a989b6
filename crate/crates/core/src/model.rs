//! Renderable slice models and their training state.
//!
//! [`FactorizedModel`] is the field -> encoding -> decoder pipeline;
//! [`ImplicitModel`] is the coordinate network baseline. Both render a
//! [`SliceGrid`] pixel by pixel, and each has a companion trainer that caches
//! the forward pass and back-propagates pixel gradients into its parameters
//! and, optionally, into the sample coordinates.

use crate::decoder::{Mlp, MlpConfig, MlpGradients, MlpScratch};
use crate::encoding::EncodingConfig;
use crate::error::Result;
use crate::field::{Field, FieldGradients, FieldScratch};
use crate::geometry::{pose_to_grid, Pose, SliceGrid, Vec3};
use crate::optim::{sgd_step, Adam, LearningRates};
use crate::volume::Image2D;

/// Anything that maps 3D sample coordinates to intensities.
pub trait SliceRenderer {
    fn render_coords(&self, coords: &[Vec3], out: &mut [f64]);

    /// Forward multiply-adds per rendered pixel.
    fn madds_per_pixel(&self) -> usize;

    fn render_grid(&self, grid: &SliceGrid) -> Result<Image2D> {
        let mut out = vec![0.0; grid.len()];
        self.render_coords(&grid.coords, &mut out);
        Image2D::from_f64(grid.rows, grid.cols, &out)
    }

    /// Render the full-extent slice at `pose`, at any resolution.
    fn render(&self, pose: &Pose, rows: usize, cols: usize) -> Result<Image2D> {
        self.render_grid(&pose_to_grid(pose, rows, cols, 1.0)?)
    }
}

/// Training-side view of a model: cached forward, backward, update.
pub trait Trainable {
    fn renderer(&self) -> &dyn SliceRenderer;

    /// Forward pass that keeps what `backward` needs.
    fn forward_train(&mut self, coords: &[Vec3], out: &mut [f64]);

    /// Accumulate parameter gradients for `dloss/dpixel`; fill
    /// `coord_grads` with `dloss/dcoord` when given.
    fn backward(&mut self, coords: &[Vec3], pixel_grads: &[f64], coord_grads: Option<&mut [Vec3]>);

    /// Apply the optimizers to the accumulated gradients and clear them.
    fn step(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    pub field: Field,
    pub decoder: Mlp,
    pub encoding: EncodingConfig,
}

impl FactorizedModel {
    pub fn new(field: Field, decoder: Mlp, encoding: EncodingConfig) -> Result<Self> {
        encoding.validate()?;
        let expected = encoding.output_len(field.shape().channels);
        if decoder.input_width() != expected {
            return Err(crate::Error::ShapeMismatch {
                expected,
                actual: decoder.input_width(),
            });
        }
        Ok(Self {
            field,
            decoder,
            encoding,
        })
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count() + self.decoder.param_count()
    }
}

impl SliceRenderer for FactorizedModel {
    fn render_coords(&self, coords: &[Vec3], out: &mut [f64]) {
        let channels = self.field.shape().channels;
        let mut scratch = self.field.scratch();
        let mut feat = vec![0.0; channels];
        let mut enc = vec![0.0; self.encoding.output_len(channels)];
        let mut cache = vec![0.0; self.decoder.cache_len()];
        for (coord, o) in coords.iter().zip(out.iter_mut()) {
            self.field.sample_into(*coord, &mut feat, &mut scratch);
            self.encoding.encode_into(&feat, &mut enc);
            *o = self.decoder.forward_cached(&enc, &mut cache);
        }
    }

    fn madds_per_pixel(&self) -> usize {
        let channels = self.field.shape().channels;
        self.field.madds_per_sample() + channels * self.encoding.cost_per_scalar() + self.decoder.madds()
    }
}

/// Per-pixel forward caches with a fixed stride per quantity.
#[derive(Debug, Clone, Default)]
struct PixelCache {
    features: Vec<f64>,
    encoded: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl PixelCache {
    fn resize(&mut self, pixels: usize, feat: usize, enc: usize, hidden: usize) {
        self.features.resize(pixels * feat, 0.0);
        self.encoded.resize(pixels * enc, 0.0);
        self.hidden.resize(pixels * hidden, 0.0);
        self.output.resize(pixels, 0.0);
    }
}

pub struct FactorizedTrainer {
    pub model: FactorizedModel,
    pub lr: LearningRates,
    field_grads: FieldGradients,
    mlp_grads: MlpGradients,
    field_scratch: FieldScratch,
    mlp_scratch: MlpScratch,
    cache: PixelCache,
    d_enc: Vec<f64>,
    d_feat: Vec<f64>,
}

impl FactorizedTrainer {
    pub fn new(model: FactorizedModel, lr: LearningRates) -> Self {
        let channels = model.field.shape().channels;
        Self {
            field_grads: model.field.zero_gradients(),
            mlp_grads: model.decoder.zero_gradients(),
            field_scratch: model.field.scratch(),
            mlp_scratch: model.decoder.scratch(),
            cache: PixelCache::default(),
            d_enc: vec![0.0; model.encoding.output_len(channels)],
            d_feat: vec![0.0; channels],
            model,
            lr,
        }
    }

    pub fn into_model(self) -> FactorizedModel {
        self.model
    }

    pub fn field_gradients(&self) -> &FieldGradients {
        &self.field_grads
    }

    pub fn decoder_gradients(&self) -> &MlpGradients {
        &self.mlp_grads
    }

    fn strides(&self) -> (usize, usize, usize) {
        let c = self.model.field.shape().channels;
        (c, self.model.encoding.output_len(c), self.model.decoder.cache_len())
    }
}

impl Trainable for FactorizedTrainer {
    fn renderer(&self) -> &dyn SliceRenderer {
        &self.model
    }

    fn forward_train(&mut self, coords: &[Vec3], out: &mut [f64]) {
        let (fs, es, hs) = self.strides();
        self.cache.resize(coords.len(), fs, es, hs);
        let m = &self.model;
        for (p, coord) in coords.iter().enumerate() {
            let feat = &mut self.cache.features[p * fs..(p + 1) * fs];
            m.field.sample_into(*coord, feat, &mut self.field_scratch);
            let enc = &mut self.cache.encoded[p * es..(p + 1) * es];
            m.encoding.encode_into(feat, enc);
            let y = m
                .decoder
                .forward_cached(enc, &mut self.cache.hidden[p * hs..(p + 1) * hs]);
            self.cache.output[p] = y;
            out[p] = y;
        }
    }

    fn backward(&mut self, coords: &[Vec3], pixel_grads: &[f64], mut coord_grads: Option<&mut [Vec3]>) {
        let (fs, es, hs) = self.strides();
        let m = &self.model;
        for (p, coord) in coords.iter().enumerate() {
            let up = pixel_grads[p];
            if up == 0.0 && coord_grads.is_none() {
                continue;
            }
            let feat = &self.cache.features[p * fs..(p + 1) * fs];
            let enc = &self.cache.encoded[p * es..(p + 1) * es];
            m.decoder.backward_cached(
                enc,
                &self.cache.hidden[p * hs..(p + 1) * hs],
                self.cache.output[p],
                up,
                &mut self.mlp_grads,
                &mut self.d_enc,
                &mut self.mlp_scratch,
            );
            m.encoding.backward_into(feat, &self.d_enc, &mut self.d_feat);
            let cg = m
                .field
                .backward_sample(*coord, &self.d_feat, &mut self.field_grads, &mut self.field_scratch);
            if let Some(cgs) = coord_grads.as_deref_mut() {
                cgs[p] = cg;
            }
        }
    }

    fn step(&mut self) -> Result<()> {
        let factors = self.model.field.factors_mut();
        for (f, g) in factors.iter_mut().zip(&self.field_grads.factors) {
            sgd_step(f, g, self.lr.field)?;
        }
        for (l, layer) in self.model.decoder.layers_mut().iter_mut().enumerate() {
            sgd_step(&mut layer.weights, &self.mlp_grads.weights[l], self.lr.decoder)?;
            sgd_step(&mut layer.bias, &self.mlp_grads.bias[l], self.lr.decoder)?;
        }
        self.field_grads.zero();
        self.mlp_grads.zero();
        Ok(())
    }
}

/// Shape of the coordinate-network baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitConfig {
    pub coord_degree: usize,
    pub n_layers: usize,
    pub hidden_width: usize,
    /// Adam learning rate for the network.
    pub lr: f64,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        Self {
            coord_degree: 10,
            n_layers: 6,
            hidden_width: 128,
            lr: 5e-4,
        }
    }
}

impl ImplicitConfig {
    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            degree: self.coord_degree,
            include_raw: true,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig::new(self.n_layers, self.hidden_width, 3 * self.encoding().width())
    }
}

/// Fully implicit representation: encoded `(x, y, z)` -> MLP -> intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitModel {
    pub net: Mlp,
    pub encoding: EncodingConfig,
}

impl ImplicitModel {
    pub fn init(config: &ImplicitConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::init(config.mlp_config(), seed)?,
            encoding: config.encoding(),
        })
    }
}

impl SliceRenderer for ImplicitModel {
    fn render_coords(&self, coords: &[Vec3], out: &mut [f64]) {
        let mut enc = vec![0.0; self.encoding.output_len(3)];
        let mut cache = vec![0.0; self.net.cache_len()];
        for (coord, o) in coords.iter().zip(out.iter_mut()) {
            self.encoding.encode_into(coord, &mut enc);
            *o = self.net.forward_cached(&enc, &mut cache);
        }
    }

    fn madds_per_pixel(&self) -> usize {
        3 * self.encoding.cost_per_scalar() + self.net.madds()
    }
}

pub struct ImplicitTrainer {
    pub model: ImplicitModel,
    grads: MlpGradients,
    adam: Vec<(Adam, Adam)>,
    scratch: MlpScratch,
    cache: PixelCache,
    d_enc: Vec<f64>,
    d_coord: Vec<f64>,
}

impl ImplicitTrainer {
    pub fn new(model: ImplicitModel, lr: f64) -> Self {
        let adam = model
            .net
            .layers()
            .iter()
            .map(|l| (Adam::new(lr, l.weights.len()), Adam::new(lr, l.bias.len())))
            .collect();
        Self {
            grads: model.net.zero_gradients(),
            scratch: model.net.scratch(),
            cache: PixelCache::default(),
            d_enc: vec![0.0; model.encoding.output_len(3)],
            d_coord: vec![0.0; 3],
            adam,
            model,
        }
    }

    pub fn into_model(self) -> ImplicitModel {
        self.model
    }

    pub fn gradients(&self) -> &MlpGradients {
        &self.grads
    }
}

impl Trainable for ImplicitTrainer {
    fn renderer(&self) -> &dyn SliceRenderer {
        &self.model
    }

    fn forward_train(&mut self, coords: &[Vec3], out: &mut [f64]) {
        let es = self.model.encoding.output_len(3);
        let hs = self.model.net.cache_len();
        self.cache.resize(coords.len(), 0, es, hs);
        for (p, coord) in coords.iter().enumerate() {
            let enc = &mut self.cache.encoded[p * es..(p + 1) * es];
            self.model.encoding.encode_into(coord, enc);
            let y = self
                .model
                .net
                .forward_cached(enc, &mut self.cache.hidden[p * hs..(p + 1) * hs]);
            self.cache.output[p] = y;
            out[p] = y;
        }
    }

    fn backward(&mut self, coords: &[Vec3], pixel_grads: &[f64], mut coord_grads: Option<&mut [Vec3]>) {
        let es = self.model.encoding.output_len(3);
        let hs = self.model.net.cache_len();
        for (p, coord) in coords.iter().enumerate() {
            self.model.net.backward_cached(
                &self.cache.encoded[p * es..(p + 1) * es],
                &self.cache.hidden[p * hs..(p + 1) * hs],
                self.cache.output[p],
                pixel_grads[p],
                &mut self.grads,
                &mut self.d_enc,
                &mut self.scratch,
            );
            if let Some(cgs) = coord_grads.as_deref_mut() {
                self.model.encoding.backward_into(coord, &self.d_enc, &mut self.d_coord);
                cgs[p] = [self.d_coord[0], self.d_coord[1], self.d_coord[2]];
            }
        }
    }

    fn step(&mut self) -> Result<()> {
        for (l, layer) in self.model.net.layers_mut().iter_mut().enumerate() {
            let (aw, ab) = &mut self.adam[l];
            aw.step(&mut layer.weights, &self.grads.weights[l])?;
            ab.step(&mut layer.bias, &self.grads.bias[l])?;
        }
        self.grads.zero();
        Ok(())
    }
}
