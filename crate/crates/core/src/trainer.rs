//! The reconstruction loop: render posed slices, score them with negative
//! SSIM against the acquired images, and back-propagate into the field, the
//! decoder and optionally the poses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::decoder::{Mlp, MlpConfig};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::eval::EvalHarness;
use crate::field::{init_field, Combiner, FieldKind, FieldShape};
use crate::geometry::{
    dot, mat_vec, mean_pose_error, pose_to_grid_extent, rotation_jacobian, Pose, SliceGrid, Vec3, ViewFamily,
    MAX_EXTENT,
};
use crate::loss::{SsimConfig, SsimWorkspace};
use crate::model::{
    FactorizedModel, FactorizedTrainer, ImplicitConfig, ImplicitModel, ImplicitTrainer, SliceRenderer, Trainable,
};
use crate::optim::{Adam, LearningRates};
use crate::volume::{DenseVolume, Image2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    TriPlanar,
    Cp,
    Implicit,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::TriPlanar => "triplanar",
            Representation::Cp => "cp",
            Representation::Implicit => "implicit",
        }
    }

    pub fn field_kind(self) -> Option<FieldKind> {
        match self {
            Representation::TriPlanar => Some(FieldKind::TriPlanar),
            Representation::Cp => Some(FieldKind::Cp),
            Representation::Implicit => None,
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplanar" => Ok(Representation::TriPlanar),
            "cp" => Ok(Representation::Cp),
            "implicit" => Ok(Representation::Implicit),
            _ => Err(Error::Config(format!("unknown representation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSource {
    Random,
    Atlas(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub representation: Representation,
    pub combiner: Combiner,
    pub rank: usize,
    pub channels: usize,
    pub encoding: EncodingConfig,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    /// `None` sizes the field from the training images.
    pub field_resolution: Option<[usize; 3]>,
    pub epochs: usize,
    pub batch_slices: usize,
    pub lr: LearningRates,
    pub learn_poses: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub init: InitSource,
    pub implicit: ImplicitConfig,
    /// Stop once every evaluated family reaches this SSIM.
    pub stop_at_ssim: Option<f64>,
    /// Training-time budget; exceeding it truncates the run.
    pub max_seconds: Option<f64>,
    /// Half-widths (columns, rows) of the acquired slices in normalized units.
    pub slice_extent: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            representation: Representation::TriPlanar,
            combiner: Combiner::Product,
            rank: 5,
            channels: 10,
            encoding: EncodingConfig::default(),
            mlp_layers: 2,
            mlp_width: 64,
            field_resolution: None,
            epochs: 5000,
            batch_slices: 1,
            lr: LearningRates::default(),
            learn_poses: false,
            seed: 0,
            eval_every: 250,
            init: InitSource::Random,
            implicit: ImplicitConfig::default(),
            stop_at_ssim: None,
            max_seconds: None,
            slice_extent: [1.0, 1.0],
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse_opt(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "none" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|e| format!("{e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_resolution(v: &str) -> std::result::Result<Option<[usize; 3]>, String> {
    if v == "auto" {
        return Ok(None);
    }
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected IxJxK or auto, got {v:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok(Some(out))
}

fn parse_extent(v: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [e] => {
            let e = num(e)?;
            Ok([e, e])
        }
        [a, b] => Ok([num(a)?, num(b)?]),
        _ => Err(format!("expected one or two comma-separated extents, got {v:?}")),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

impl TrainConfig {
    pub fn field_shape(&self, resolution: [usize; 3]) -> Option<FieldShape> {
        self.representation.field_kind().map(|kind| FieldShape {
            kind,
            combiner: self.combiner,
            resolution,
            rank: self.rank,
            channels: self.channels,
        })
    }

    pub fn decoder_config(&self) -> MlpConfig {
        MlpConfig::new(self.mlp_layers, self.mlp_width, self.encoding.output_len(self.channels))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.epochs == 0 || self.batch_slices == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_slices and eval_every must be >= 1".into()));
        }
        if self.representation == Representation::Implicit {
            self.implicit.mlp_config().validate()?;
        } else {
            self.decoder_config().validate_decoder()?;
            if self.rank == 0 || self.channels == 0 {
                return Err(Error::Config("rank and channels must be >= 1".into()));
            }
        }
        if self.slice_extent.iter().any(|e| !(*e > 0.0 && *e <= MAX_EXTENT)) {
            return Err(Error::Config(format!(
                "slice_extent {:?} must lie in (0, {MAX_EXTENT}]",
                self.slice_extent
            )));
        }
        if let Some(r) = self.field_resolution {
            if r.iter().any(|&n| n < 2) {
                return Err(Error::Config(format!("field resolution {r:?} needs >= 2 per axis")));
            }
        }
        Ok(())
    }

    /// Flat `key = value` text that [`TrainConfig::parse`] reads back exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let res = self
            .field_resolution
            .map_or_else(|| "auto".to_string(), |[i, j, k]| format!("{i}x{j}x{k}"));
        let init = match &self.init {
            InitSource::Random => "random".to_string(),
            InitSource::Atlas(p) => format!("atlas:{}", p.display()),
        };
        let combiner = match self.combiner {
            Combiner::Product => "product",
            Combiner::Sum => "sum",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("representation", self.representation.name().into()),
            ("combiner", combiner.into()),
            ("rank", self.rank.to_string()),
            ("channels", self.channels.to_string()),
            ("encode_degree", self.encoding.degree.to_string()),
            ("encode_include_raw", self.encoding.include_raw.to_string()),
            ("mlp_layers", self.mlp_layers.to_string()),
            ("mlp_width", self.mlp_width.to_string()),
            ("field_resolution", res),
            ("epochs", self.epochs.to_string()),
            ("batch_slices", self.batch_slices.to_string()),
            ("lr_field", self.lr.field.to_string()),
            ("lr_decoder", self.lr.decoder.to_string()),
            ("lr_pose", self.lr.pose.to_string()),
            ("learn_poses", self.learn_poses.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("init", init),
            ("implicit_degree", self.implicit.coord_degree.to_string()),
            ("implicit_layers", self.implicit.n_layers.to_string()),
            ("implicit_width", self.implicit.hidden_width.to_string()),
            ("lr_implicit", self.implicit.lr.to_string()),
            ("stop_at_ssim", fmt_opt(self.stop_at_ssim)),
            ("max_seconds", fmt_opt(self.max_seconds)),
            (
                "slice_extent",
                format!("{},{}", self.slice_extent[0], self.slice_extent[1]),
            ),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Start from defaults and apply every `key = value` line. Blank lines
    /// and `#` comments are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| Error::Parse { line: n + 1, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "representation" => self.representation = v.parse().map_err(|e: Error| e.to_string())?,
            "combiner" => {
                self.combiner = match v {
                    "product" => Combiner::Product,
                    "sum" => Combiner::Sum,
                    _ => return Err(format!("unknown combiner {v:?}")),
                }
            }
            "rank" => self.rank = num(v)?,
            "channels" => self.channels = num(v)?,
            "encode_degree" => self.encoding.degree = num(v)?,
            "encode_include_raw" => self.encoding.include_raw = parse_bool(v)?,
            "mlp_layers" => self.mlp_layers = num(v)?,
            "mlp_width" => self.mlp_width = num(v)?,
            "field_resolution" => self.field_resolution = parse_resolution(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch_slices" => self.batch_slices = num(v)?,
            "lr_field" => self.lr.field = num(v)?,
            "lr_decoder" => self.lr.decoder = num(v)?,
            "lr_pose" => self.lr.pose = num(v)?,
            "learn_poses" => self.learn_poses = parse_bool(v)?,
            "seed" => self.seed = num(v)?,
            "eval_every" => self.eval_every = num(v)?,
            "init" => {
                self.init = if v == "random" {
                    InitSource::Random
                } else if let Some(p) = v.strip_prefix("atlas:") {
                    InitSource::Atlas(PathBuf::from(p))
                } else {
                    return Err(format!("init must be random or atlas:<path>, got {v:?}"));
                }
            }
            "implicit_degree" => self.implicit.coord_degree = num(v)?,
            "implicit_layers" => self.implicit.n_layers = num(v)?,
            "implicit_width" => self.implicit.hidden_width = num(v)?,
            "lr_implicit" => self.implicit.lr = num(v)?,
            "stop_at_ssim" => self.stop_at_ssim = parse_opt(v)?,
            "max_seconds" => self.max_seconds = parse_opt(v)?,
            "slice_extent" => self.slice_extent = parse_extent(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}

/// A trained (or initial) representation of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Factorized(FactorizedModel),
    Implicit(ImplicitModel),
}

impl TrainedModel {
    pub fn as_factorized(&self) -> Option<&FactorizedModel> {
        match self {
            TrainedModel::Factorized(m) => Some(m),
            TrainedModel::Implicit(_) => None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            TrainedModel::Factorized(m) => checkpoint::save_checkpoint(m, path),
            TrainedModel::Implicit(m) => checkpoint::save_implicit(m, path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        checkpoint::load_any(path)
    }
}

impl SliceRenderer for TrainedModel {
    fn render_coords(&self, coords: &[Vec3], out: &mut [f64]) {
        match self {
            TrainedModel::Factorized(m) => m.render_coords(coords, out),
            TrainedModel::Implicit(m) => m.render_coords(coords, out),
        }
    }

    fn madds_per_pixel(&self) -> usize {
        match self {
            TrainedModel::Factorized(m) => m.madds_per_pixel(),
            TrainedModel::Implicit(m) => m.madds_per_pixel(),
        }
    }
}

/// Grid -> field -> encoding -> decoder -> image at any resolution.
pub fn render_slice(model: &dyn SliceRenderer, pose: &Pose, rows: usize, cols: usize) -> Result<Image2D> {
    model.render(pose, rows, cols)
}

/// Default field lattice for a stack of `rows x cols` images.
pub fn default_resolution(rows: usize, cols: usize) -> [usize; 3] {
    [cols, rows, rows.max(cols)]
}

/// Build the untrained model that `config` describes.
pub fn initial_model(config: &TrainConfig, resolution: [usize; 3]) -> Result<TrainedModel> {
    config.validate()?;
    if let InitSource::Atlas(path) = &config.init {
        return match checkpoint::load_checkpoint(path)? {
            m if config.representation.field_kind() == Some(m.field.shape().kind) => Ok(TrainedModel::Factorized(m)),
            m => Err(Error::Config(format!(
                "atlas checkpoint holds a {:?} field but the run asks for {}",
                m.field.shape().kind,
                config.representation.name()
            ))),
        };
    }
    match config.field_shape(resolution) {
        Some(shape) => {
            let field = init_field(shape, config.seed)?;
            let decoder = Mlp::init(config.decoder_config(), config.seed.wrapping_add(1))?;
            Ok(TrainedModel::Factorized(FactorizedModel::new(
                field,
                decoder,
                config.encoding,
            )?))
        }
        None => Ok(TrainedModel::Implicit(ImplicitModel::init(
            &config.implicit,
            config.seed,
        )?)),
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epoch: usize,
    /// Cumulative training time, excluding evaluation.
    pub seconds: f64,
    pub train_loss: f64,
    /// Mean test `-SSIM` per family, in [`ViewFamily::ALL`] order.
    pub test: [Option<f64>; 3],
    /// Mean absolute pose error (degrees, normalized units).
    pub pose_error: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub records: Vec<RunRecord>,
    pub truncated: bool,
    pub stopped_at_target: bool,
    pub metadata: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "epoch,seconds,train_loss,test_axial,test_coronal,test_sagittal";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.seconds,
                r.train_loss,
                cell(r.test[0]),
                cell(r.test[1]),
                cell(r.test[2])
            );
        }
        s
    }

    /// The CSV with the wall-clock column blanked, for comparing runs.
    pub fn trace_csv(&self) -> String {
        let mut copy = self.clone();
        for r in &mut copy.records {
            r.seconds = 0.0;
        }
        copy.to_csv()
    }

    pub fn pose_error_csv(&self) -> String {
        let mut s = String::from("epoch,angle_deg,translation\n");
        for r in &self.records {
            if let Some((a, t)) = r.pose_error {
                let _ = writeln!(s, "{},{a},{t}", r.epoch);
            }
        }
        s
    }

    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }

    /// Mean seconds per epoch over the whole run.
    pub fn seconds_per_epoch(&self) -> Option<f64> {
        let last = self.records.iter().rev().find(|r| r.epoch > 0)?;
        Some(last.seconds / last.epoch as f64)
    }

    pub fn final_test(&self, family: ViewFamily) -> Option<f64> {
        let idx = ViewFamily::ALL.iter().position(|f| *f == family)?;
        self.records.iter().rev().find_map(|r| r.test[idx])
    }
}

/// Optional inputs of [`reconstruct`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub harness: Option<&'a EvalHarness>,
    /// Reference poses for the pose-error trace.
    pub true_poses: Option<&'a [Pose]>,
    /// Written at every evaluation point.
    pub checkpoint: Option<PathBuf>,
    /// Start from this model instead of the one `config` describes.
    pub initial: Option<TrainedModel>,
}

pub struct Reconstruction {
    pub model: TrainedModel,
    pub poses: Vec<Pose>,
    pub report: RunReport,
}

enum State {
    Factorized(FactorizedTrainer),
    Implicit(ImplicitTrainer),
}

impl State {
    fn new(model: TrainedModel, config: &TrainConfig) -> Self {
        match model {
            TrainedModel::Factorized(m) => State::Factorized(FactorizedTrainer::new(m, config.lr)),
            TrainedModel::Implicit(m) => State::Implicit(ImplicitTrainer::new(m, config.implicit.lr)),
        }
    }

    fn trainable(&mut self) -> &mut dyn Trainable {
        match self {
            State::Factorized(t) => t,
            State::Implicit(t) => t,
        }
    }

    fn renderer(&self) -> &dyn SliceRenderer {
        match self {
            State::Factorized(t) => t.renderer(),
            State::Implicit(t) => t.renderer(),
        }
    }

    fn snapshot(&self) -> TrainedModel {
        match self {
            State::Factorized(t) => TrainedModel::Factorized(t.model.clone()),
            State::Implicit(t) => TrainedModel::Implicit(t.model.clone()),
        }
    }

    fn into_model(self) -> TrainedModel {
        match self {
            State::Factorized(t) => TrainedModel::Factorized(t.into_model()),
            State::Implicit(t) => TrainedModel::Implicit(t.into_model()),
        }
    }
}

/// Adam state for one learnable pose, over (radians, normalized units).
struct PoseOptimizer {
    adam: Adam,
    grad: [f64; 6],
}

impl PoseOptimizer {
    fn new(lr: f64) -> Self {
        Self {
            adam: Adam::new(lr, 6),
            grad: [0.0; 6],
        }
    }

    fn accumulate(&mut self, pose: &Pose, grid: &SliceGrid, coord_grads: &[Vec3]) {
        let g = pose_gradient(pose, grid, coord_grads);
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn step(&mut self, pose: &mut Pose) -> Result<()> {
        let mut p = [
            pose.euler[0].to_radians(),
            pose.euler[1].to_radians(),
            pose.euler[2].to_radians(),
            pose.trans[0],
            pose.trans[1],
            pose.trans[2],
        ];
        self.adam.step(&mut p, &self.grad)?;
        for a in 0..3 {
            pose.euler[a] = p[a].to_degrees();
            pose.trans[a] = p[3 + a];
        }
        self.grad = [0.0; 6];
        Ok(())
    }
}

/// Chain coordinate gradients through `x = R(euler) b + t`: returns the
/// gradient over (angles in radians, translation).
pub fn pose_gradient(pose: &Pose, grid: &SliceGrid, coord_grads: &[Vec3]) -> [f64; 6] {
    let jac = rotation_jacobian(pose.euler);
    let mut out = [0.0; 6];
    let mut k = 0;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let g = coord_grads[k];
            k += 1;
            let b = grid.base_point(r, c);
            for (a, j) in jac.iter().enumerate() {
                out[a] += dot(g, mat_vec(j, b));
            }
            for a in 0..3 {
                out[3 + a] += g[a];
            }
        }
    }
    out
}

fn check_stack(stack: &[Image2D], poses: &[Pose]) -> Result<(usize, usize)> {
    if stack.len() != poses.len() {
        return Err(Error::CountMismatch {
            images: stack.len(),
            poses: poses.len(),
        });
    }
    if stack.len() < 2 {
        return Err(Error::Config(format!(
            "a slice stack needs N >= 2, got {}",
            stack.len()
        )));
    }
    let (rows, cols) = (stack[0].rows(), stack[0].cols());
    for img in stack {
        if (img.rows(), img.cols()) != (rows, cols) {
            return Err(Error::InvalidDims {
                dims: vec![img.rows(), img.cols()],
                reason: format!("stack images must all be {rows}x{cols}"),
            });
        }
    }
    if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("pose {i}"),
        });
    }
    Ok((rows, cols))
}

fn mean_loss(
    renderer: &dyn SliceRenderer,
    stack: &[Image2D],
    targets: &[Vec<f64>],
    poses: &[Pose],
    extent: [f64; 2],
) -> Result<f64> {
    let (rows, cols) = (stack[0].rows(), stack[0].cols());
    let mut ws = SsimWorkspace::new(SsimConfig::default(), rows, cols)?;
    let mut out = vec![0.0; rows * cols];
    let mut total = 0.0;
    for (pose, target) in poses.iter().zip(targets) {
        let grid = pose_to_grid_extent(pose, rows, cols, extent)?;
        renderer.render_coords(&grid.coords, &mut out);
        total -= ws.value(&out, target)?;
    }
    Ok(total / poses.len() as f64)
}

/// Fit a model to `stack` acquired at `poses`.
///
/// Every epoch visits the slices in one seeded permutation; each group of
/// `batch_slices` slices is one optimizer step. Evaluation happens at epoch
/// 0, every `eval_every` epochs, and at the end.
pub fn reconstruct(
    stack: &[Image2D],
    poses: &[Pose],
    config: &TrainConfig,
    opts: RunOptions,
) -> Result<Reconstruction> {
    config.validate()?;
    let (rows, cols) = check_stack(stack, poses)?;
    if let Some(h) = opts.harness {
        h.check_disjoint(poses)?;
    }
    let resolution = config
        .field_resolution
        .unwrap_or_else(|| default_resolution(rows, cols));
    let model = match opts.initial {
        Some(m) => m,
        None => initial_model(config, resolution)?,
    };
    let mut state = State::new(model, config);
    let mut poses: Vec<Pose> = poses.to_vec();
    let mut pose_opts: Vec<PoseOptimizer> = poses.iter().map(|_| PoseOptimizer::new(config.lr.pose)).collect();
    let targets: Vec<Vec<f64>> = stack.iter().map(Image2D::to_f64).collect();

    let n = stack.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f0e));

    let mut ws = SsimWorkspace::new(SsimConfig::default(), rows, cols)?;
    let pixels = rows * cols;
    let mut out = vec![0.0; pixels];
    let mut pixel_grads = vec![0.0; pixels];
    let mut coord_grads = vec![[0.0; 3]; pixels];
    let scale = 1.0 / config.batch_slices as f64;

    let mut report = RunReport::default();
    report
        .metadata
        .push(("representation".into(), config.representation.name().into()));
    if config.representation == Representation::Implicit {
        report.metadata.push((
            "baseline".into(),
            format!(
                "coordinate MLP {}x{} with L={} stand-in, not a faithful reproduction",
                config.implicit.n_layers, config.implicit.hidden_width, config.implicit.coord_degree
            ),
        ));
    }

    let record = |epoch: usize, seconds: f64, train_loss: f64, state: &State, poses: &[Pose]| -> Result<RunRecord> {
        let test = match opts.harness {
            Some(h) => h.evaluate(state.renderer())?.by_family(),
            None => [None; 3],
        };
        let pose_error = opts.true_poses.map(|t| mean_pose_error(poses, t));
        let rec = RunRecord {
            epoch,
            seconds,
            train_loss,
            test,
            pose_error,
        };
        if let Some(path) = &opts.checkpoint {
            state.snapshot().save(path)?;
        }
        Ok(rec)
    };

    let initial_loss = mean_loss(state.renderer(), stack, &targets, &poses, config.slice_extent)?;
    report.records.push(record(0, 0.0, initial_loss, &state, &poses)?);

    let mut seconds = 0.0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let grid = pose_to_grid_extent(&poses[i], rows, cols, config.slice_extent)?;
            let trainable = state.trainable();
            trainable.forward_train(&grid.coords, &mut out);
            let ssim = ws.value_and_grad(&out, &targets[i], -scale, &mut pixel_grads)?;
            if !ssim.is_finite() {
                return Err(Error::NanLoss { epoch, slice: i });
            }
            epoch_loss -= ssim;
            if config.learn_poses {
                trainable.backward(&grid.coords, &pixel_grads, Some(&mut coord_grads));
                pose_opts[i].accumulate(&poses[i], &grid, &coord_grads);
            } else {
                trainable.backward(&grid.coords, &pixel_grads, None);
            }
            let batch_end = (step + 1) % config.batch_slices == 0 || step + 1 == n;
            if batch_end {
                trainable.step()?;
                if config.learn_poses {
                    let lo = step + 1 - ((step % config.batch_slices) + 1);
                    for &j in &order[lo..=step] {
                        pose_opts[j].step(&mut poses[j])?;
                    }
                }
            }
        }
        seconds += start.elapsed().as_secs_f64();
        let train_loss = epoch_loss / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::NanLoss {
                epoch,
                slice: order[n - 1],
            });
        }
        let out_of_time = config.max_seconds.is_some_and(|m| seconds >= m);
        if epoch % config.eval_every == 0 || epoch == config.epochs || out_of_time {
            let rec = record(epoch, seconds, train_loss, &state, &poses)?;
            let reached = reached_target(config.stop_at_ssim, &rec);
            report.records.push(rec);
            if reached {
                report.stopped_at_target = true;
                break;
            }
            if out_of_time && epoch < config.epochs {
                report.truncated = true;
                break;
            }
        }
    }
    Ok(Reconstruction {
        model: state.into_model(),
        poses,
        report,
    })
}

fn reached_target(target: Option<f64>, rec: &RunRecord) -> bool {
    let Some(t) = target else { return false };
    let scores: Vec<f64> = rec.test.iter().flatten().copied().collect();
    !scores.is_empty() && scores.iter().all(|&neg| -neg >= t)
}

/// Perturb the poses by `U(-noise, noise)` (degrees / voxels of `dims`),
/// then train with the pose-error trace measured against `true_poses`.
pub fn reconstruct_with_noisy_poses(
    stack: &[Image2D],
    true_poses: &[Pose],
    noise: f64,
    dims: [usize; 3],
    config: &TrainConfig,
    harness: Option<&EvalHarness>,
) -> Result<Reconstruction> {
    let noisy = crate::geometry::perturb_poses(true_poses, noise, config.seed.wrapping_add(17), dims);
    reconstruct(
        stack,
        &noisy,
        config,
        RunOptions {
            harness,
            true_poses: Some(true_poses),
            ..RunOptions::default()
        },
    )
}

/// Result of fitting a field to an atlas volume.
pub struct AtlasFit {
    pub model: FactorizedModel,
    pub ssim: f64,
    pub epochs: usize,
    pub report: RunReport,
}

pub const ATLAS_TARGET_SSIM: f64 = 0.95;
pub const ATLAS_MIN_SSIM: f64 = 0.8;

/// Fit a tri-planar field to the axial slices of `atlas` until held-out
/// views reach [`ATLAS_TARGET_SSIM`] or `config.epochs` runs out.
pub fn init_from_atlas(atlas: &DenseVolume, config: &TrainConfig, held_out: usize) -> Result<AtlasFit> {
    if config.representation != Representation::TriPlanar {
        return Err(Error::Config(
            "atlas initialization needs the tri-planar representation".into(),
        ));
    }
    let [_, _, depth] = atlas.dims();
    let stack: Vec<Image2D> = (0..depth).map(|z| atlas.axial_slice(z)).collect();
    let poses = crate::geometry::axial_stack_poses(depth)?;
    let [w, h, _] = atlas.dims();
    let harness = EvalHarness::new(
        atlas,
        &crate::eval::EvalSpec {
            families: ViewFamily::ALL.to_vec(),
            n_per_family: held_out,
            rows: h,
            cols: w,
        },
        &poses,
    )?;
    let mut cfg = config.clone();
    cfg.init = InitSource::Random;
    cfg.learn_poses = false;
    cfg.stop_at_ssim = Some(ATLAS_TARGET_SSIM);
    if cfg.field_resolution.is_none() {
        cfg.field_resolution = Some(atlas.dims());
    }
    let run = reconstruct(
        &stack,
        &poses,
        &cfg,
        RunOptions {
            harness: Some(&harness),
            ..RunOptions::default()
        },
    )?;
    let best = run
        .report
        .records
        .iter()
        .map(|r| r.test.iter().flatten().fold(f64::INFINITY, |m, &neg| m.min(-neg)))
        .fold(f64::NEG_INFINITY, f64::max);
    let epochs = run.report.last().map_or(0, |r| r.epoch);
    if best < ATLAS_MIN_SSIM {
        return Err(Error::FitFailure {
            best_ssim: best,
            epochs,
            required: ATLAS_MIN_SSIM,
        });
    }
    let ssim = run.report.last().map_or(f64::NAN, |r| {
        r.test.iter().flatten().fold(f64::INFINITY, |m, &neg| m.min(-neg))
    });
    match run.model {
        TrainedModel::Factorized(model) => Ok(AtlasFit {
            model,
            ssim,
            epochs,
            report: run.report,
        }),
        TrainedModel::Implicit(_) => unreachable!("tri-planar config yields a factorized model"),
    }
}

/// One ablation cell: decomposition, decoder `n-w`, encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub representation: Representation,
    pub layers: usize,
    pub width: usize,
    pub encoding: EncodingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub cell: AblationCell,
    /// Final test `-SSIM`, or `None` when training hit a NaN.
    pub neg_ssim: Option<f64>,
}

/// The decoder networks of the ablation grid.
pub const ABLATION_NETWORKS: [(usize, usize); 7] = [(2, 128), (3, 128), (4, 128), (3, 32), (3, 64), (2, 64), (2, 32)];

/// The encoding columns of the ablation grid: `L` and whether `p` is kept.
pub const ABLATION_ENCODINGS: [(usize, bool); 7] = [
    (0, true),
    (2, false),
    (5, false),
    (10, false),
    (2, true),
    (5, true),
    (10, true),
];

pub fn ablation_grid(
    representations: &[Representation],
    networks: &[(usize, usize)],
    encodings: &[(usize, bool)],
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &representation in representations {
        for &(layers, width) in networks {
            for &(degree, include_raw) in encodings {
                cells.push(AblationCell {
                    representation,
                    layers,
                    width,
                    encoding: EncodingConfig { degree, include_raw },
                });
            }
        }
    }
    cells
}

/// Train every cell with the same data and seed and score it on
/// `family`. NaN cells are recorded, and the sweep carries on.
pub fn ablation_sweep(
    stack: &[Image2D],
    poses: &[Pose],
    base: &TrainConfig,
    cells: &[AblationCell],
    harness: &EvalHarness,
    family: ViewFamily,
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cfg = base.clone();
        cfg.representation = cell.representation;
        cfg.mlp_layers = cell.layers;
        cfg.mlp_width = cell.width;
        cfg.encoding = cell.encoding;
        cfg.learn_poses = false;
        let run = reconstruct(
            stack,
            poses,
            &cfg,
            RunOptions {
                harness: Some(harness),
                ..RunOptions::default()
            },
        );
        let neg_ssim = match run {
            Ok(r) => r.report.final_test(family).filter(|v| v.is_finite()),
            Err(Error::NanLoss { .. }) => None,
            Err(e) => return Err(e),
        };
        results.push(AblationResult { cell: *cell, neg_ssim });
    }
    Ok(results)
}

fn encoding_label(e: &EncodingConfig) -> String {
    match (e.degree, e.include_raw) {
        (0, _) => "input only".to_string(),
        (l, true) => format!("L={l} + input"),
        (l, false) => format!("L={l}"),
    }
}

/// Rows are `decomposition n-w`, columns are encodings.
pub fn format_ablation_table(results: &[AblationResult]) -> String {
    let mut columns: Vec<EncodingConfig> = Vec::new();
    let mut rows: Vec<(Representation, usize, usize)> = Vec::new();
    for r in results {
        if !columns.contains(&r.cell.encoding) {
            columns.push(r.cell.encoding);
        }
        let key = (r.cell.representation, r.cell.layers, r.cell.width);
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let mut s = format!("{:<16}", "network");
    for c in &columns {
        let _ = write!(s, " {:>13}", encoding_label(c));
    }
    s.push('\n');
    for (rep, l, w) in rows {
        let _ = write!(s, "{:<16}", format!("{} {l}-{w}", rep.name()));
        for c in &columns {
            let v = results.iter().find(|r| {
                r.cell.representation == rep && r.cell.layers == l && r.cell.width == w && r.cell.encoding == *c
            });
            let text = match v.map(|r| r.neg_ssim) {
                Some(Some(x)) => format!("{x:.4}"),
                Some(None) => "NaN".to_string(),
                None => "-".to_string(),
            };
            let _ = write!(s, " {text:>13}");
        }
        s.push('\n');
    }
    s
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("representation,layers,width,degree,include_raw,neg_ssim\n");
    for r in results {
        let c = &r.cell;
        let v = r.neg_ssim.map_or_else(|| "NaN".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{v}",
            c.representation.name(),
            c.layers,
            c.width,
            c.encoding.degree,
            c.encoding.include_raw
        );
    }
    s
}
