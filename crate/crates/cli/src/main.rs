use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slicevol::eval::{
    curves_csv, curves_gnuplot, device_fingerprint, evaluate, format_accuracy_table, speed_ratio, timing_profile,
    EvalHarness, EvalSpec, VolumeRenderer,
};
use slicevol::geometry::{
    axial_stack_poses, parse_pose, perturb_poses, pose_to_grid_extent, read_pose_table, rotated_coronal_poses,
    write_pose_table, Pose, ViewFamily,
};
use slicevol::model::SliceRenderer;
use slicevol::trainer::{
    ablation_csv, ablation_grid, ablation_sweep, format_ablation_table, init_from_atlas, reconstruct, Representation,
    RunOptions, TrainConfig, TrainedModel, ABLATION_ENCODINGS, ABLATION_NETWORKS,
};
use slicevol::volume::{
    generate_phantom, load_image_raw, load_pgm, load_volume, save_image, save_image_raw, save_volume, DenseVolume,
    Image2D, PhantomSpec,
};
use slicevol::Error;

/// Slice-to-volume reconstruction with factorized neural fields.
#[derive(Parser)]
#[command(name = "slicevol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a slice stack from a volume or a synthetic phantom.
    Simulate(SimulateArgs),
    /// Fit a model to a slice stack with known poses.
    Reconstruct(ReconstructArgs),
    /// Render one slice of a checkpoint at any pose and size.
    Render(RenderArgs),
    /// Score a checkpoint on held-out views of a ground-truth volume.
    Evaluate(EvaluateArgs),
    /// Train the decoder/encoding grid and tabulate test scores.
    Ablate(AblateArgs),
    /// Compare per-epoch time and accuracy curves of several representations.
    Bench(BenchArgs),
    /// Fit an atlas checkpoint to the axial slices of a volume.
    AtlasFit(AtlasFitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Axial,
    Coronal360,
}

#[derive(Clone, Args)]
#[group(required = true, multiple = false)]
struct VolumeSource {
    /// Volume file in the raw float format.
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Generate a phantom with this seed instead.
    #[arg(long)]
    phantom_seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: VolumeSource,
    /// Phantom size, `N` or `IxJxK`.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, value_enum, default_value = "axial")]
    sweep: Sweep,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Half-width of uniform pose noise (degrees and voxels).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// In-plane half-extents of the sampled slices, `a` or `a,b`.
    #[arg(long, default_value = "1", value_parser = parse_extent)]
    extent: [f64; 2],
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    pgm: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainInputs {
    /// Directory of `.raw` or `.pgm` images, read in name order.
    #[arg(long)]
    images: PathBuf,
    /// Pose table, one `e1 e2 e3 t1 t2 t3` line per image.
    #[arg(long)]
    poses: PathBuf,
    /// `key = value` training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    inputs: TrainInputs,
    /// Ground-truth volume for held-out evaluation during training.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Reference poses for the pose-error trace.
    #[arg(long)]
    true_poses: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    eval_views: usize,
    /// Checkpoint path; the report, poses and config are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `e1,e2,e3,t1,t2,t3`: Euler ZYX angles in degrees, then translation
    /// in normalized volume units.
    #[arg(long, value_parser = parse_pose_arg, allow_hyphen_values = true)]
    pose: Pose,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value = "1", value_parser = parse_extent)]
    extent: [f64; 2],
    /// Output image; `.pgm` writes 8-bit PGM, anything else the raw format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Training poses; test views on these planes are rejected.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "axial,coronal,sagittal", value_parser = parse_family)]
    families: Vec<ViewFamily>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Render size; defaults to the volume's in-plane size.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: TrainInputs,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_parser = parse_family, default_value = "coronal")]
    family: ViewFamily,
    #[arg(long, value_delimiter = ',', default_value = "triplanar,cp", value_parser = parse_representation)]
    representations: Vec<Representation>,
    #[arg(long, default_value_t = 16)]
    eval_views: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    inputs: TrainInputs,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "triplanar,implicit", value_parser = parse_representation)]
    compare: Vec<Representation>,
    /// Wall-clock budget per run, in seconds.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long, default_value_t = 16)]
    eval_views: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AtlasFitArgs {
    #[command(flatten)]
    source: VolumeSource,
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Held-out views per family used to decide convergence.
    #[arg(long, default_value_t = 16)]
    held_out: usize,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::NanLoss { .. } | Error::NonFinite { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad size {p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let dims = match nums[..] {
        [n] => [n, n, n],
        [i, j, k] => [i, j, k],
        _ => return Err(format!("expected N or IxJxK, got {s:?}")),
    };
    if dims.iter().any(|&d| d < 2) {
        return Err("every dimension must be at least 2".into());
    }
    Ok(dims)
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or_else(|| format!("expected RxC, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|e| format!("bad row count {r:?}: {e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("bad column count {c:?}: {e}"))?;
    if r < 2 || c < 2 {
        return Err("an image needs at least 2 rows and 2 columns".into());
    }
    Ok((r, c))
}

fn parse_extent(s: &str) -> std::result::Result<[f64; 2], String> {
    let mut cfg = TrainConfig::default();
    cfg.set("slice_extent", s)?;
    Ok(cfg.slice_extent)
}

fn parse_pose_arg(s: &str) -> std::result::Result<Pose, String> {
    parse_pose(s).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<ViewFamily, String> {
    ViewFamily::from_str(s).map_err(|e| e.to_string())
}

fn parse_representation(s: &str) -> std::result::Result<Representation, String> {
    Representation::from_str(s).map_err(|e| e.to_string())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Append a suffix to the full file name, so `a/model.ckpt` gives
/// `a/model.ckpt.report.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// The command line as comments, then the training config it resolved to.
fn resolved(config: Option<&TrainConfig>, extra: &[(&str, String)]) -> String {
    let mut s = String::from("# slicevol");
    for a in std::env::args().skip(1) {
        let _ = write!(s, " {a}");
    }
    s.push('\n');
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    if let Some(cfg) = config {
        s.push_str(&cfg.to_kv());
    }
    s
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| CliError::Usage(format!("--set {o}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_source(source: &VolumeSource, dims: [usize; 3]) -> CliResult<DenseVolume> {
    match (&source.volume, source.phantom_seed) {
        (Some(p), _) => Ok(load_volume(p)?),
        (None, Some(seed)) => Ok(generate_phantom(&PhantomSpec::new(dims, seed))?),
        (None, None) => Err(CliError::Usage("need --volume or --phantom-seed".into())),
    }
}

fn load_stack(dir: &Path) -> CliResult<Vec<Image2D>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut raw = Vec::new();
    let mut pgm = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("raw") => raw.push(path),
            Some("pgm") => pgm.push(path),
            _ => {}
        }
    }
    // Raw files carry full precision; PGM is used only when no raw file exists.
    let (mut files, load): (Vec<PathBuf>, fn(&Path) -> slicevol::Result<Image2D>) = if raw.is_empty() {
        (pgm, |p| load_pgm(p))
    } else {
        (raw, |p| load_image_raw(p))
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidDims {
            dims: vec![0],
            reason: format!("no .raw or .pgm images in {}", dir.display()),
        }
        .into());
    }
    let stack = files.iter().map(|p| load(p)).collect::<slicevol::Result<Vec<_>>>()?;
    Ok(stack)
}

fn load_training(inputs: &TrainInputs) -> CliResult<(Vec<Image2D>, Vec<Pose>, TrainConfig)> {
    let cfg = load_config(inputs.config.as_deref(), &inputs.overrides)?;
    let stack = load_stack(&inputs.images)?;
    let poses = read_pose_table(&inputs.poses)?;
    if stack.len() != poses.len() {
        return Err(Error::CountMismatch {
            images: stack.len(),
            poses: poses.len(),
        }
        .into());
    }
    Ok((stack, poses, cfg))
}

fn harness_for(gt: &DenseVolume, stack: &[Image2D], poses: &[Pose], n: usize) -> CliResult<EvalHarness> {
    let spec = EvalSpec::all(n, stack[0].rows(), stack[0].cols());
    Ok(EvalHarness::new(gt, &spec, poses)?)
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let vol = load_source(&a.source, a.dims)?;
    let dims = vol.dims();
    let truth = match a.sweep {
        Sweep::Axial => axial_stack_poses(a.n)?,
        Sweep::Coronal360 => rotated_coronal_poses(a.n)?,
    };
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Usage(format!(
            "--noise must be finite and non-negative, got {}",
            a.noise
        )));
    }
    let images = a.out.join("images");
    create_dir(&images)?;
    let renderer = VolumeRenderer(&vol);
    for (k, pose) in truth.iter().enumerate() {
        let grid = pose_to_grid_extent(pose, dims[1], dims[0], a.extent)?;
        let img = renderer.render_grid(&grid)?;
        save_image_raw(&img, images.join(format!("{k:04}.raw")))?;
        if a.pgm {
            save_image(&img, images.join(format!("{k:04}.pgm")))?;
        }
    }
    let noisy = perturb_poses(&truth, a.noise, a.noise_seed, dims);
    write_pose_table(a.out.join("poses.txt"), &noisy)?;
    if a.noise > 0.0 {
        write_pose_table(a.out.join("poses_true.txt"), &truth)?;
    }
    save_volume(&vol, a.out.join("volume.raw"))?;
    let sweep = match a.sweep {
        Sweep::Axial => "axial",
        Sweep::Coronal360 => "coronal360",
    };
    let mut cfg = TrainConfig::default();
    cfg.slice_extent = a.extent;
    let extra = [
        ("dims", format!("{}x{}x{}", dims[0], dims[1], dims[2])),
        ("sweep", sweep.to_string()),
        ("n", a.n.to_string()),
        ("noise", a.noise.to_string()),
        ("noise_seed", a.noise_seed.to_string()),
    ];
    write_text(&a.out.join("resolved.cfg"), &resolved(Some(&cfg), &extra))?;
    println!(
        "wrote {} images of {}x{} to {}",
        truth.len(),
        dims[1],
        dims[0],
        images.display()
    );
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> CliResult<()> {
    let (stack, poses, cfg) = load_training(&a.inputs)?;
    let gt = a.gt.as_deref().map(load_volume).transpose()?;
    let harness = gt
        .as_ref()
        .map(|g| harness_for(g, &stack, &poses, a.eval_views))
        .transpose()?;
    let true_poses = a.true_poses.as_deref().map(read_pose_table).transpose()?;
    write_text(&sibling(&a.out, ".cfg"), &resolved(Some(&cfg), &[]))?;
    let run = reconstruct(
        &stack,
        &poses,
        &cfg,
        RunOptions {
            harness: harness.as_ref(),
            true_poses: true_poses.as_deref(),
            ..RunOptions::default()
        },
    )?;
    run.model.save(&a.out)?;
    write_text(&sibling(&a.out, ".report.csv"), &run.report.to_csv())?;
    if true_poses.is_some() {
        write_text(&sibling(&a.out, ".pose_error.csv"), &run.report.pose_error_csv())?;
    }
    write_pose_table(sibling(&a.out, ".poses.txt"), &run.poses)?;
    if let Some(last) = run.report.last() {
        print!("epoch {} train_loss {:.5}", last.epoch, last.train_loss);
        for (f, v) in ViewFamily::ALL.iter().zip(last.test) {
            if let Some(v) = v {
                print!(" {} {v:.4}", f.name());
            }
        }
        println!();
    }
    if run.report.truncated {
        println!("stopped by the time budget");
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    let model = TrainedModel::load(&a.ckpt)?;
    let (rows, cols) = a.size;
    let grid = pose_to_grid_extent(&a.pose, rows, cols, a.extent)?;
    let img = model.render_grid(&grid)?;
    if a.out.extension().is_some_and(|e| e == "pgm") {
        save_image(&img, &a.out)?;
    } else {
        save_image_raw(&img, &a.out)?;
    }
    let v = a.pose.to_array();
    let extra = [
        ("ckpt", a.ckpt.display().to_string()),
        ("pose", format!("{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5])),
        ("size", format!("{rows}x{cols}")),
        ("extent", format!("{},{}", a.extent[0], a.extent[1])),
    ];
    write_text(&sibling(&a.out, ".cfg"), &resolved(None, &extra))?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let model = TrainedModel::load(&a.ckpt)?;
    let gt = load_volume(&a.gt)?;
    let training = a.poses.as_deref().map(read_pose_table).transpose()?.unwrap_or_default();
    let [w, h, _] = gt.dims();
    let (rows, cols) = a.size.unwrap_or((h, w));
    let spec = EvalSpec {
        families: a.families.clone(),
        n_per_family: a.n,
        rows,
        cols,
    };
    let scores = evaluate(&model, &gt, &spec, &training)?;
    create_dir(&a.out)?;
    let mut csv = String::from("family,mean,std,n\n");
    let mut cells: [Vec<f64>; 3] = Default::default();
    for s in &scores.scores {
        let _ = writeln!(csv, "{},{},{},{}", s.family.name(), s.mean, s.std, s.per_view.len());
        let idx = ViewFamily::ALL.iter().position(|f| *f == s.family).unwrap_or(0);
        cells[idx] = s.per_view.clone();
    }
    write_text(&a.out.join("scores.csv"), &csv)?;
    let name = a
        .ckpt
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let table = format_accuracy_table(&[(name, cells)]);
    write_text(&a.out.join("scores.txt"), &table)?;
    let extra = [
        ("ckpt", a.ckpt.display().to_string()),
        ("gt", a.gt.display().to_string()),
        ("n", a.n.to_string()),
        ("size", format!("{rows}x{cols}")),
    ];
    write_text(&a.out.join("resolved.cfg"), &resolved(None, &extra))?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    let (stack, poses, cfg) = load_training(&a.inputs)?;
    let gt = load_volume(&a.gt)?;
    let harness = harness_for(&gt, &stack, &poses, a.eval_views)?;
    if a.representations.contains(&Representation::Implicit) {
        return Err(CliError::Usage(
            "the ablation grid covers factorized representations only".into(),
        ));
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("resolved.cfg"), &resolved(Some(&cfg), &[]))?;
    let cells = ablation_grid(&a.representations, &ABLATION_NETWORKS, &ABLATION_ENCODINGS);
    let results = ablation_sweep(&stack, &poses, &cfg, &cells, &harness, a.family)?;
    let table = format_ablation_table(&results);
    write_text(&a.out.join("ablation.csv"), &ablation_csv(&results))?;
    write_text(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> CliResult<()> {
    let (stack, poses, cfg) = load_training(&a.inputs)?;
    let gt = load_volume(&a.gt)?;
    let harness = harness_for(&gt, &stack, &poses, a.eval_views)?;
    let configs: Vec<(String, TrainConfig)> = a
        .compare
        .iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.representation = r;
            (r.name().to_string(), c)
        })
        .collect();
    if configs.len() < 2 {
        return Err(CliError::Usage("--compare needs at least two representations".into()));
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("resolved.cfg"), &resolved(Some(&cfg), &[]))?;
    let profiles = timing_profile(&configs, &stack, &poses, &harness, a.budget)?;
    write_text(&a.out.join("curves.csv"), &curves_csv(&profiles))?;
    write_text(&a.out.join("curves.dat"), &curves_gnuplot(&profiles))?;
    let mut s = format!("device: {}\n", device_fingerprint());
    let _ = writeln!(
        s,
        "{:<12} {:>14} {:>12} {:>10}",
        "config", "s/epoch", "madds/px", "truncated"
    );
    for p in &profiles {
        let _ = writeln!(
            s,
            "{:<12} {:>14.4} {:>12} {:>10}",
            p.name, p.seconds_per_epoch, p.madds_per_pixel, p.truncated
        );
    }
    for p in &profiles[1..] {
        let ratio = speed_ratio(&profiles[0], p)?;
        let _ = writeln!(s, "{} / {} per-epoch time: {ratio:.2}", p.name, profiles[0].name);
    }
    write_text(&a.out.join("summary.txt"), &s)?;
    print!("{s}");
    Ok(())
}

fn atlas_fit_cmd(a: AtlasFitArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let vol = load_source(&a.source, a.dims)?;
    write_text(&sibling(&a.out, ".cfg"), &resolved(Some(&cfg), &[]))?;
    let fit = init_from_atlas(&vol, &cfg, a.held_out)?;
    slicevol::checkpoint::save_checkpoint(&fit.model, &a.out)?;
    write_text(&sibling(&a.out, ".report.csv"), &fit.report.to_csv())?;
    println!("atlas fit: ssim {:.4} after {} epochs", fit.ssim, fit.epochs);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::AtlasFit(a) => atlas_fit_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
