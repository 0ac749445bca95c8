//! `carm`: phantoms, DRR rendering and intensity-based C-arm pose
//! registration from the command line.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "carm",
    version,
    about = "Differentiable DRR rendering and 2D/3D C-arm pose registration"
)]
struct Cli {
    /// Worker threads for rendering (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Seed for every random choice (multistart sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an analytic test volume with its fiducials (and labels).
    Phantom(PhantomArgs),
    /// Render a DRR of a volume at a pose.
    Render(RenderArgs),
    /// Estimate the pose of a target image.
    Register(RegisterArgs),
    /// Compare two poses; prints a JSON report on stdout.
    Metrics(MetricsArgs),
    /// One-dimensional similarity sweeps around a pose, as CSV.
    Landscape(LandscapeArgs),
    /// Resample an image onto other detector intrinsics.
    Resample(ResampleArgs),
    /// Read acquisition geometry from a JSON sidecar or minimal DICOM file.
    ParseMeta(ParseMetaArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum PhantomKind {
    UniformCube,
    Sphere,
    NestedSpheres,
    TwoBoxes,
    SphereInBox,
    SmoothBlob,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VolumeDtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom family.
    #[arg(
        long,
        value_enum,
        required_unless_present = "spec",
        conflicts_with = "spec"
    )]
    kind: Option<PhantomKind>,
    /// Full phantom description as JSON, instead of --kind and its flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Cube edge (uniform_cube).
    #[arg(long)]
    edge_mm: Option<f64>,
    /// Attenuation per mm (outer shell, box or cube).
    #[arg(long)]
    mu: Option<f64>,
    /// Sphere radius; outer radius for nested_spheres.
    #[arg(long)]
    radius_mm: Option<f64>,
    /// Inner sphere radius (nested_spheres).
    #[arg(long)]
    inner_radius_mm: Option<f64>,
    /// Attenuation of the inner or embedded sphere.
    #[arg(long)]
    mu_inner: Option<f64>,
    /// Box size as x,y,z (two_boxes, sphere_in_box).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    box_mm: Option<Vec<f64>>,
    /// Gap between the boxes (two_boxes).
    #[arg(long)]
    gap_mm: Option<f64>,
    /// Voxel size.
    #[arg(long)]
    voxel_mm: Option<f64>,
    /// Volume path: .json for rawjson, .nii for NIfTI-1. Fiducials go to
    /// <stem>.fiducials.json and labels to <stem>.labels.<ext> alongside.
    #[arg(long)]
    out: PathBuf,
    /// Sample type on disk.
    #[arg(long, value_enum, default_value_t = VolumeDtype::F32)]
    dtype: VolumeDtype,
}

/// How voxel values become attenuation.
#[derive(Args, Debug, Clone)]
struct VolumeArgs {
    /// Volume file (.json rawjson or .nii).
    #[arg(long)]
    volume: PathBuf,
    /// The volume holds Hounsfield units; convert with --mu-water.
    #[arg(long)]
    hu: bool,
    /// Water attenuation per mm used with --hu.
    #[arg(long, default_value_t = 0.02, requires = "hu")]
    mu_water: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodArg {
    Siddon,
    Trilinear,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormatArg {
    Pgm,
    Rawf32,
    Rawf64,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    /// Pose JSON.
    #[arg(long)]
    pose: PathBuf,
    /// Intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Exact voxel traversal, or trilinear quadrature (the differentiable one).
    #[arg(long, value_enum, default_value_t = MethodArg::Siddon)]
    method: MethodArg,
    /// Samples per ray for trilinear (default 2 * largest volume dimension).
    #[arg(long)]
    samples: Option<usize>,
    /// Label map on the volume grid.
    #[arg(long, requires = "keep")]
    labels: Option<PathBuf>,
    /// Labels to keep, comma separated; everything else renders as air.
    #[arg(long, value_delimiter = ',', requires = "labels")]
    keep: Option<Vec<u16>>,
    /// Output image; .pgm or .json (raw header).
    #[arg(long)]
    out: PathBuf,
    /// Output format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Target X-ray (.pgm or raw .json), already in line-integral units.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    volume: VolumeArgs,
    /// Intrinsics JSON matching the target.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Start from this pose JSON.
    #[arg(long, group = "init_choice")]
    init: Option<PathBuf>,
    /// Start from the center of a preset's parameter ranges.
    #[arg(long, group = "init_choice")]
    init_preset: Option<String>,
    /// Sample starts from a preset's parameter ranges.
    #[arg(long, group = "init_choice")]
    multistart: Option<String>,
    /// Number of multistart samples.
    #[arg(long, default_value_t = 64, requires = "multistart")]
    starts: usize,
    /// Candidates refined after initialization (overrides the config).
    #[arg(long)]
    top_r: Option<usize>,
    /// Registration config JSON ({"refine": ..., "init": ..., "top_r": ...}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth pose; adds report.json to the outputs.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fiducials JSON for the report.
    #[arg(long, requires = "truth")]
    fiducials: Option<PathBuf>,
    /// Output directory for pose.json, trace.csv, overlay.pgm and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Ground-truth pose JSON.
    #[arg(long)]
    gt: PathBuf,
    /// Estimated pose JSON.
    #[arg(long)]
    est: PathBuf,
    /// Intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Fiducials JSON; without it only the pose distances are reported.
    #[arg(long)]
    fiducials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    /// Target image (.pgm or raw .json).
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    volume: VolumeArgs,
    /// Intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Pose JSON at the sweep center.
    #[arg(long)]
    gt: PathBuf,
    /// Axes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "alpha,beta,gamma,x,y,z")]
    axes: Vec<String>,
    /// Rotation sweep half-range.
    #[arg(long, default_value_t = 60.0)]
    rot_range_deg: f64,
    /// Translation sweep half-range.
    #[arg(long, default_value_t = 100.0)]
    trans_range_mm: f64,
    /// Samples per axis (odd values include the center).
    #[arg(long, default_value_t = 121)]
    steps: usize,
    /// Metrics, comma separated: ncc, mncc, gncc, mncc_gncc_mean.
    #[arg(long, value_delimiter = ',', default_value = "mncc_gncc_mean")]
    metric: Vec<String>,
    /// Pyramid levels for mncc.
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Samples per ray (default 2 * largest volume dimension).
    #[arg(long)]
    samples: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    /// Input image (.pgm or raw .json).
    #[arg(long)]
    image: PathBuf,
    /// Intrinsics the image was acquired with.
    #[arg(long)]
    src_intrinsics: PathBuf,
    /// Canonical intrinsics to resample onto.
    #[arg(long)]
    canon_intrinsics: PathBuf,
    /// Output image; .pgm or .json (raw header).
    #[arg(long)]
    out: PathBuf,
    /// Output format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum MetaFormatArg {
    JsonSidecar,
    DicomMin,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DepthSignArg {
    /// Source on the -y side: y = -(SPD + offset).
    NegativeY,
    /// Source on the +y side: y = SPD + offset.
    PositiveY,
}

#[derive(Args, Debug)]
struct ParseMetaArgs {
    /// Metadata file.
    #[arg(long)]
    input: PathBuf,
    /// File format; .json means json_sidecar, anything else dicom_min.
    #[arg(long, value_enum)]
    format: Option<MetaFormatArg>,
    /// Side of the patient the source is on.
    #[arg(long, value_enum, default_value_t = DepthSignArg::NegativeY)]
    depth_sign: DepthSignArg,
    /// Added to the source-to-patient distance before it becomes y.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    depth_offset_mm: f64,
    /// Also write the partial pose (alpha, beta, y) as pose JSON here.
    #[arg(long)]
    pose_out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(carm_core::error::Error),
}

impl From<carm_core::error::Error> for CliError {
    fn from(e: carm_core::error::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use carm_core::error::Error;
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Render(a) => commands::render(a),
        Command::Register(a) => commands::register(a, seed),
        Command::Metrics(a) => commands::metrics(a),
        Command::Landscape(a) => commands::landscape(a),
        Command::Resample(a) => commands::resample(a),
        Command::ParseMeta(a) => commands::parse_meta(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
