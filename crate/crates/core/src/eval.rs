//! Novel-view accuracy, timing profiles and convergence comparisons.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_grid, Pose, Vec3, ViewFamily};
use crate::loss::{SsimConfig, SsimWorkspace};
use crate::model::SliceRenderer;
use crate::trainer::{reconstruct, RunOptions, RunReport, TrainConfig};
use crate::volume::{DenseVolume, Image2D};

/// Tolerance for deciding that a test plane coincides with a training plane.
pub const PLANE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub families: Vec<ViewFamily>,
    pub n_per_family: usize,
    pub rows: usize,
    pub cols: usize,
}

impl EvalSpec {
    pub fn all(n_per_family: usize, rows: usize, cols: usize) -> Self {
        Self {
            families: ViewFamily::ALL.to_vec(),
            n_per_family,
            rows,
            cols,
        }
    }
}

struct FamilySet {
    family: ViewFamily,
    poses: Vec<Pose>,
    grids: Vec<Vec<Vec3>>,
    targets: Vec<Vec<f64>>,
}

/// Test views and their ground truth, prepared once per volume.
pub struct EvalHarness {
    sets: Vec<FamilySet>,
    rows: usize,
    cols: usize,
}

/// Renders a dense volume by trilinear sampling.
pub struct VolumeRenderer<'a>(pub &'a DenseVolume);

impl SliceRenderer for VolumeRenderer<'_> {
    fn render_coords(&self, coords: &[Vec3], out: &mut [f64]) {
        for (c, o) in coords.iter().zip(out.iter_mut()) {
            *o = self.0.sample_trilinear(*c);
        }
    }

    fn madds_per_pixel(&self) -> usize {
        7
    }
}

impl EvalHarness {
    /// Fails with [`Error::PoseOverlap`] when a test view lies on a training plane.
    pub fn new(gt: &DenseVolume, spec: &EvalSpec, training_poses: &[Pose]) -> Result<Self> {
        let mut sets = Vec::with_capacity(spec.families.len());
        let truth = VolumeRenderer(gt);
        for &family in &spec.families {
            let poses = family.poses(spec.n_per_family)?;
            let mut grids = Vec::with_capacity(poses.len());
            let mut targets = Vec::with_capacity(poses.len());
            for pose in &poses {
                let grid = pose_to_grid(pose, spec.rows, spec.cols, 1.0)?;
                let mut t = vec![0.0; grid.len()];
                truth.render_coords(&grid.coords, &mut t);
                grids.push(grid.coords);
                targets.push(t);
            }
            sets.push(FamilySet {
                family,
                poses,
                grids,
                targets,
            });
        }
        let harness = Self {
            sets,
            rows: spec.rows,
            cols: spec.cols,
        };
        harness.check_disjoint(training_poses)?;
        Ok(harness)
    }

    pub fn check_disjoint(&self, training_poses: &[Pose]) -> Result<()> {
        let mut index = 0;
        for set in &self.sets {
            for p in &set.poses {
                if training_poses.iter().any(|t| t.same_plane(p, PLANE_TOL)) {
                    return Err(Error::PoseOverlap { index });
                }
                index += 1;
            }
        }
        Ok(())
    }

    pub fn families(&self) -> Vec<ViewFamily> {
        self.sets.iter().map(|s| s.family).collect()
    }

    pub fn test_poses(&self, family: ViewFamily) -> Option<&[Pose]> {
        self.sets
            .iter()
            .find(|s| s.family == family)
            .map(|s| s.poses.as_slice())
    }

    pub fn evaluate(&self, renderer: &dyn SliceRenderer) -> Result<FamilyScores> {
        let mut ws = SsimWorkspace::new(SsimConfig::default(), self.rows, self.cols)?;
        let mut out = vec![0.0; self.rows * self.cols];
        let mut scores = Vec::with_capacity(self.sets.len());
        for set in &self.sets {
            let mut per_view = Vec::with_capacity(set.grids.len());
            for (grid, target) in set.grids.iter().zip(&set.targets) {
                renderer.render_coords(grid, &mut out);
                per_view.push(-ws.value(&out, target)?);
            }
            let (mean, std) = aggregate(&per_view);
            scores.push(FamilyScore {
                family: set.family,
                mean,
                std,
                per_view,
            });
        }
        Ok(FamilyScores { scores })
    }
}

/// `-SSIM` over the views of one family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyScore {
    pub family: ViewFamily,
    pub mean: f64,
    pub std: f64,
    pub per_view: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyScores {
    pub scores: Vec<FamilyScore>,
}

impl FamilyScores {
    pub fn get(&self, family: ViewFamily) -> Option<&FamilyScore> {
        self.scores.iter().find(|s| s.family == family)
    }

    /// Means in [`ViewFamily::ALL`] order.
    pub fn by_family(&self) -> [Option<f64>; 3] {
        ViewFamily::ALL.map(|f| self.get(f).map(|s| s.mean))
    }
}

/// Render every test view of `gt` and score it.
pub fn evaluate(
    renderer: &dyn SliceRenderer,
    gt: &DenseVolume,
    spec: &EvalSpec,
    training_poses: &[Pose],
) -> Result<FamilyScores> {
    EvalHarness::new(gt, spec, training_poses)?.evaluate(renderer)
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy table: one row per training sweep, one column per test family.
/// Each cell holds the per-volume scores that are aggregated into `mean±std`.
pub fn format_accuracy_table(rows: &[(String, [Vec<f64>; 3])]) -> String {
    let mut s = format!("{:<14}", "training");
    for f in ViewFamily::ALL {
        let _ = write!(s, " {:>16}", f.name());
    }
    s.push('\n');
    for (name, cols) in rows {
        let _ = write!(s, "{name:<14}");
        for values in cols {
            let text = if values.is_empty() {
                "-".to_string()
            } else {
                let (m, sd) = aggregate(values);
                format!("{m:.3}±{sd:.3}")
            };
            let _ = write!(s, " {text:>16}");
        }
        s.push('\n');
    }
    s
}

/// Identifies the machine a timing was taken on.
pub fn device_fingerprint() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu} | {threads} threads | {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingProfile {
    pub name: String,
    pub device: String,
    /// (training seconds, mean test `-SSIM` over the evaluated families).
    pub curve: Vec<(f64, f64)>,
    pub seconds_per_epoch: f64,
    pub madds_per_pixel: usize,
    pub truncated: bool,
    pub report: RunReport,
}

/// Train each config on the same data in turn, sampling accuracy every
/// `eval_every` epochs. Runs that exhaust `wall_budget` seconds are marked
/// truncated.
pub fn timing_profile(
    configs: &[(String, TrainConfig)],
    stack: &[Image2D],
    poses: &[Pose],
    harness: &EvalHarness,
    wall_budget: Option<f64>,
) -> Result<Vec<TimingProfile>> {
    if configs.len() < 2 {
        return Err(Error::Config("a timing profile compares at least two configs".into()));
    }
    let device = device_fingerprint();
    let mut out = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let mut cfg = cfg.clone();
        if wall_budget.is_some() {
            cfg.max_seconds = wall_budget;
        }
        let run = reconstruct(
            stack,
            poses,
            &cfg,
            RunOptions {
                harness: Some(harness),
                ..RunOptions::default()
            },
        )?;
        let curve = run
            .report
            .records
            .iter()
            .map(|r| {
                let v: Vec<f64> = r.test.iter().flatten().copied().collect();
                (r.seconds, aggregate(&v).0)
            })
            .collect();
        out.push(TimingProfile {
            name: name.clone(),
            device: device.clone(),
            curve,
            seconds_per_epoch: run.report.seconds_per_epoch().unwrap_or(f64::NAN),
            madds_per_pixel: run.model.madds_per_pixel(),
            truncated: run.report.truncated,
            report: run.report,
        });
    }
    Ok(out)
}

/// Per-epoch time of `slow` over `fast`; only defined on one device.
pub fn speed_ratio(fast: &TimingProfile, slow: &TimingProfile) -> Result<f64> {
    if fast.device != slow.device {
        return Err(Error::DeviceMismatch {
            a: fast.device.clone(),
            b: slow.device.clone(),
        });
    }
    Ok(slow.seconds_per_epoch / fast.seconds_per_epoch)
}

/// One gnuplot data block per profile, separated by two blank lines.
pub fn curves_gnuplot(profiles: &[TimingProfile]) -> String {
    let mut s = String::new();
    for p in profiles {
        let _ = writeln!(s, "# {}{}", p.name, if p.truncated { " (truncated)" } else { "" });
        let _ = writeln!(s, "# seconds neg_ssim");
        for (t, v) in &p.curve {
            let _ = writeln!(s, "{t} {v}");
        }
        s.push_str("\n\n");
    }
    s
}

pub fn curves_csv(profiles: &[TimingProfile]) -> String {
    let mut s = String::from("config,seconds,neg_ssim\n");
    for p in profiles {
        for (t, v) in &p.curve {
            let _ = writeln!(s, "{},{t},{v}", p.name);
        }
    }
    s
}

/// First evaluated epoch at which every test family reaches `ssim`.
pub fn epochs_to_ssim(report: &RunReport, ssim: f64) -> Option<usize> {
    report.records.iter().find_map(|r| {
        let v: Vec<f64> = r.test.iter().flatten().copied().collect();
        (!v.is_empty() && v.iter().all(|&neg| -neg >= ssim)).then_some(r.epoch)
    })
}

/// Epochs needed from random over epochs needed from the atlas.
pub fn atlas_speedup(random: &RunReport, atlas: &RunReport, ssim: f64) -> Option<f64> {
    let r = epochs_to_ssim(random, ssim)?;
    let a = epochs_to_ssim(atlas, ssim)?.max(1);
    Some(r as f64 / a as f64)
}
