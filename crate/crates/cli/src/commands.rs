use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use carm_core::acquisition::{
    canonicalize, parse_meta as read_meta, pose_from_meta, DepthConvention, DepthSign, MetaFormat,
};
use carm_core::error::Error;
use carm_core::geometry::{pose_to_euler, EulerPose, Intrinsics, Pose, PoseJson};
use carm_core::io::{read_json, write_atomic, write_json};
use carm_core::metrics::full_report;
use carm_core::registration::{
    register as run_registration, InitKind, InitStrategy, Preset, RegistrationConfig, Termination,
    TRACE_CSV_HEADER,
};
use carm_core::render::image_io::{encode_pgm, load_image, save_image, ImageFormat};
use carm_core::render::{
    default_samples, make_rays, render as render_image, render_structure, render_trilinear, Image,
    Method,
};
use carm_core::similarity::{landscape as sweep, landscape_csv, Metric, SimilarityConfig, AXES};
use carm_core::volume::io::{
    load_label_map, load_scalar_volume, save_label_map, save_volume, Dtype, VolumeFormat,
};
use carm_core::volume::phantom::{make_phantom, PhantomSpec};
use carm_core::volume::{hu_to_attenuation, FiducialSet, ScalarVolume, Volume};
use serde::Serialize;

use crate::overlay::edge_overlay;
use crate::{
    CliError, CliResult, DepthSignArg, FormatArg, LandscapeArgs, MetaFormatArg, MethodArg,
    MetricsArgs, ParseMetaArgs, PhantomArgs, PhantomKind, RegisterArgs, RenderArgs, ResampleArgs,
    VolumeArgs, VolumeDtype,
};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn extension(path: &Path) -> &str {
    path.extension().and_then(|e| e.to_str()).unwrap_or("")
}

/// `dir/name.ext` → `dir/name.<suffix>`.
fn with_suffix(path: &Path, suffix: &str) -> CliResult<PathBuf> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("bad output path {}", path.display())))?;
    Ok(path.with_file_name(format!("{stem}.{suffix}")))
}

fn image_format(out: &Path, requested: Option<FormatArg>) -> CliResult<ImageFormat> {
    let ext = extension(out);
    let f = match (requested, ext) {
        (None, "pgm") | (Some(FormatArg::Pgm), "pgm") => ImageFormat::Pgm,
        (None, "json") | (Some(FormatArg::Rawf32), "json") => ImageFormat::Rawf32,
        (Some(FormatArg::Rawf64), "json") => ImageFormat::Rawf64,
        (Some(f), _) => {
            return Err(usage(format!(
                "--format {f:?} needs an output ending in {}",
                if f == FormatArg::Pgm { ".pgm" } else { ".json" }
            )))
        }
        (None, _) => {
            return Err(usage(format!(
                "cannot infer image format of {}; use .pgm or .json",
                out.display()
            )))
        }
    };
    Ok(f)
}

fn load_volume(a: &VolumeArgs) -> CliResult<Volume> {
    let format = VolumeFormat::from_path(&a.volume)?;
    let raw = load_scalar_volume(&a.volume, format)?;
    Ok(if a.hu {
        hu_to_attenuation(&raw, a.mu_water)?
    } else {
        raw.into_attenuation()?
    })
}

fn read_pose(path: &Path) -> CliResult<Pose> {
    let doc: PoseJson = read_json(path)?;
    if doc.is_partial() {
        log::warn!(
            "{} is a partial pose; unknown parameters are zero",
            path.display()
        );
    }
    Ok(doc.to_pose()?)
}

fn read_intrinsics(path: &Path) -> CliResult<Intrinsics> {
    Ok(read_json(path)?)
}

fn check_volume_path(a: &VolumeArgs) -> CliResult {
    VolumeFormat::from_path(&a.volume)?;
    if a.hu && !(a.mu_water.is_finite() && a.mu_water > 0.0) {
        return Err(usage(format!(
            "--mu-water must be positive, got {}",
            a.mu_water
        )));
    }
    Ok(())
}

fn phantom_spec(a: &PhantomArgs) -> CliResult<Option<PhantomSpec>> {
    let given = [
        ("--edge-mm", a.edge_mm.is_some()),
        ("--mu", a.mu.is_some()),
        ("--radius-mm", a.radius_mm.is_some()),
        ("--inner-radius-mm", a.inner_radius_mm.is_some()),
        ("--mu-inner", a.mu_inner.is_some()),
        ("--box-mm", a.box_mm.is_some()),
        ("--gap-mm", a.gap_mm.is_some()),
        ("--voxel-mm", a.voxel_mm.is_some()),
    ];
    let Some(kind) = a.kind else {
        if let Some((flag, _)) = given.iter().find(|(_, g)| *g) {
            return Err(usage(format!("{flag} cannot be combined with --spec")));
        }
        return Ok(None);
    };
    let allowed: &[&str] = match kind {
        PhantomKind::UniformCube => &["--edge-mm", "--mu", "--voxel-mm"],
        PhantomKind::Sphere => &["--radius-mm", "--mu", "--voxel-mm"],
        PhantomKind::NestedSpheres => &[
            "--radius-mm",
            "--inner-radius-mm",
            "--mu",
            "--mu-inner",
            "--voxel-mm",
        ],
        PhantomKind::TwoBoxes => &["--box-mm", "--gap-mm", "--mu", "--voxel-mm"],
        PhantomKind::SphereInBox => &[
            "--box-mm",
            "--radius-mm",
            "--mu",
            "--mu-inner",
            "--voxel-mm",
        ],
        PhantomKind::SmoothBlob => &["--voxel-mm"],
    };
    if let Some((flag, _)) = given.iter().find(|(f, g)| *g && !allowed.contains(f)) {
        return Err(usage(format!(
            "{flag} does not apply to --kind {}",
            clap::ValueEnum::to_possible_value(&kind)
                .unwrap()
                .get_name()
        )));
    }
    let voxel = a.voxel_mm.unwrap_or(1.0);
    let box_mm = |d: [f64; 3]| a.box_mm.as_ref().map_or(d, |b| [b[0], b[1], b[2]]);
    let spec = match kind {
        PhantomKind::UniformCube => PhantomSpec::UniformCube {
            edge_mm: a.edge_mm.unwrap_or(10.0),
            mu: a.mu.unwrap_or(0.02),
            voxel_mm: voxel,
        },
        PhantomKind::Sphere => PhantomSpec::Sphere {
            radius_mm: a.radius_mm.unwrap_or(20.0),
            mu: a.mu.unwrap_or(0.02),
            voxel_mm: voxel,
        },
        PhantomKind::NestedSpheres => PhantomSpec::NestedSpheres {
            outer_radius_mm: a.radius_mm.unwrap_or(30.0),
            inner_radius_mm: a.inner_radius_mm.unwrap_or(10.0),
            mu_outer: a.mu.unwrap_or(0.01),
            mu_inner: a.mu_inner.unwrap_or(0.03),
            voxel_mm: voxel,
        },
        PhantomKind::TwoBoxes => PhantomSpec::TwoBoxes {
            box_mm: box_mm([20.0; 3]),
            gap_mm: a.gap_mm.unwrap_or(10.0),
            mu: a.mu.unwrap_or(0.02),
            voxel_mm: voxel,
        },
        PhantomKind::SphereInBox => match PhantomSpec::default_sphere_in_box() {
            PhantomSpec::SphereInBox {
                box_mm: b,
                mu_box,
                radius_mm,
                center_mm,
                mu_sphere,
                voxel_mm,
            } => PhantomSpec::SphereInBox {
                box_mm: box_mm(b),
                mu_box: a.mu.unwrap_or(mu_box),
                radius_mm: a.radius_mm.unwrap_or(radius_mm),
                center_mm,
                mu_sphere: a.mu_inner.unwrap_or(mu_sphere),
                voxel_mm: a.voxel_mm.unwrap_or(voxel_mm),
            },
            _ => unreachable!(),
        },
        PhantomKind::SmoothBlob => match PhantomSpec::default_smooth_blob() {
            PhantomSpec::SmoothBlob {
                extent_mm,
                voxel_mm,
                blobs,
            } => PhantomSpec::SmoothBlob {
                extent_mm,
                voxel_mm: a.voxel_mm.unwrap_or(voxel_mm),
                blobs,
            },
            _ => unreachable!(),
        },
    };
    Ok(Some(spec))
}

pub fn phantom(a: PhantomArgs) -> CliResult {
    let format = VolumeFormat::from_path(&a.out)?;
    let fiducial_path = with_suffix(&a.out, "fiducials.json")?;
    let label_path = with_suffix(&a.out, &format!("labels.{}", extension(&a.out)))?;
    let spec = match phantom_spec(&a)? {
        Some(s) => s,
        None => read_json(a.spec.as_ref().unwrap())?,
    };
    let dtype = match a.dtype {
        VolumeDtype::F32 => Dtype::F32,
        VolumeDtype::F64 => Dtype::F64,
    };
    let ph = make_phantom(&spec)?;
    let dims = ph.volume.dims();
    save_volume(&ScalarVolume::from(ph.volume), &a.out, format, dtype)?;
    write_json(&fiducial_path, &ph.fiducials)?;
    log::info!(
        "wrote {} ({dims:?} voxels) and {}",
        a.out.display(),
        fiducial_path.display()
    );
    if let Some(labels) = &ph.labels {
        save_label_map(labels, &label_path, format)?;
        log::info!("wrote {}", label_path.display());
    }
    Ok(())
}

pub fn render(a: RenderArgs) -> CliResult {
    check_volume_path(&a.volume)?;
    let format = image_format(&a.out, a.format)?;
    if a.method == MethodArg::Siddon && a.samples.is_some() {
        return Err(usage("--samples applies only to --method trilinear"));
    }
    if a.samples.is_some_and(|n| n < 2) {
        return Err(usage("--samples must be at least 2"));
    }
    let keep: Option<BTreeSet<u16>> = a.keep.as_ref().map(|k| k.iter().copied().collect());

    let volume = load_volume(&a.volume)?;
    let pose = read_pose(&a.pose)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let method = match a.method {
        MethodArg::Siddon => Method::Siddon,
        MethodArg::Trilinear => Method::Trilinear {
            samples: a.samples.unwrap_or_else(|| default_samples(&volume)),
        },
    };
    let rays = make_rays(&k, &pose);
    let img = match (&a.labels, &keep) {
        (Some(path), Some(keep)) => {
            let labels = load_label_map(path, VolumeFormat::from_path(path)?)?;
            render_structure(&volume, &labels, keep, &rays, method)?
        }
        _ => render_image(&volume, &rays, method)?,
    };
    save_image(&img, &a.out, format)?;
    log::info!(
        "wrote {}x{} render to {}",
        img.height,
        img.width,
        a.out.display()
    );
    Ok(())
}

fn preset(name: &str) -> CliResult<Preset> {
    name.parse::<Preset>().map_err(|e| usage(e.to_string()))
}

fn range_center(p: Preset) -> EulerPose {
    EulerPose::from_array(p.ranges().as_array().map(|[lo, hi]| 0.5 * (lo + hi)))
}

#[derive(Serialize)]
struct Summary<'a> {
    metric: f64,
    termination: Termination,
    candidate: usize,
    iterations: usize,
    chart_switched: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    mtre_mm: Option<f64>,
    pose: &'a PoseJson,
}

pub fn register(a: RegisterArgs, seed: Option<u64>) -> CliResult {
    check_volume_path(&a.volume)?;
    let cli_init = match (&a.init, &a.init_preset, &a.multistart) {
        (Some(_), _, _) => None,
        (_, Some(p), _) => Some(InitStrategy::fixed(range_center(preset(p)?))),
        (_, _, Some(p)) => {
            if a.starts == 0 {
                return Err(usage("--starts must be at least 1"));
            }
            Some(InitStrategy::multistart(
                preset(p)?.ranges(),
                a.starts,
                seed.unwrap_or(0),
            ))
        }
        _ => None,
    };
    if a.top_r == Some(0) {
        return Err(usage("--top-r must be at least 1"));
    }

    let config: RegistrationConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RegistrationConfig {
            refine: Default::default(),
            init: None,
            top_r: 1,
        },
    };
    config.refine.validate()?;
    let mut strategy = match (&a.init, cli_init, config.init) {
        (Some(path), _, _) => {
            let doc: PoseJson = read_json(path)?;
            if doc.is_partial() {
                log::warn!(
                    "initial pose {} is partial; registration proceeds from it",
                    path.display()
                );
            }
            InitStrategy::fixed(
                doc.euler()
                    .unwrap_or_else(|| pose_to_euler(&doc.to_pose().unwrap()).euler),
            )
        }
        (None, Some(s), _) => s,
        (None, None, Some(s)) => s,
        (None, None, None) => return Err(usage(
            "no initialization: give --init, --init-preset, --multistart or a config with \"init\"",
        )),
    };
    if let (Some(s), InitKind::Multistart) = (seed, strategy.kind) {
        strategy.seed = s;
    }
    let top_r = a.top_r.unwrap_or(config.top_r);

    let target = load_image(&a.target)?;
    let volume = load_volume(&a.volume)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let truth = a.truth.as_deref().map(read_pose).transpose()?;
    let fiducials: Option<FiducialSet> = a.fiducials.as_deref().map(read_json).transpose()?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let trace_path = a.out_dir.join("trace.csv");

    let result = match run_registration(
        &target,
        &volume,
        &k,
        &strategy,
        &config.refine,
        top_r,
        truth.as_ref(),
        fiducials.as_ref(),
    ) {
        Ok(r) => r,
        Err(e @ Error::Numerical(_)) => {
            write_atomic(&trace_path, TRACE_CSV_HEADER.as_bytes())?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic(&trace_path, result.trace.to_csv().as_bytes())?;
    if result.trace.termination == Termination::NonFinite {
        let why = result
            .trace
            .diagnostic
            .clone()
            .unwrap_or_else(|| "non-finite metric".into());
        return Err(
            Error::Numerical(format!("{why}; trace written to {}", trace_path.display())).into(),
        );
    }

    let pose_doc = PoseJson::from_pose_euler(&result.pose);
    write_json(&a.out_dir.join("pose.json"), &pose_doc)?;
    let final_render = render_trilinear(
        &volume,
        &make_rays(&k, &result.pose),
        default_samples(&volume),
    )?;
    write_atomic(
        &a.out_dir.join("overlay.pgm"),
        &encode_pgm(&edge_overlay(&target, &final_render)?, 0.0, 1.0),
    )?;
    if let Some(report) = &result.report {
        write_json(&a.out_dir.join("report.json"), report)?;
    }
    let mtre_mm = result.report.as_ref().and_then(|r| r.mtre_mm);
    write_json(
        &a.out_dir.join("summary.json"),
        &Summary {
            metric: result.metric,
            termination: result.trace.termination,
            candidate: result.candidate,
            iterations: result.trace.records.len(),
            chart_switched: result.trace.chart_switched,
            mtre_mm,
            pose: &pose_doc,
        },
    )?;
    match mtre_mm {
        Some(m) => log::info!("final metric {:.6}, mTRE {m:.3} mm", result.metric),
        None => log::info!("final metric {:.6}", result.metric),
    }
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> CliResult {
    let gt = read_pose(&a.gt)?;
    let est = read_pose(&a.est)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let fiducials: Option<FiducialSet> = a.fiducials.as_deref().map(read_json).transpose()?;
    if fiducials.is_none() {
        log::warn!("no fiducials given; reporting pose distances (dGeo) only");
    }
    let report = full_report(&gt, &est, &k, fiducials.as_ref())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(Error::from)?
    );
    Ok(())
}

pub fn landscape(a: LandscapeArgs) -> CliResult {
    check_volume_path(&a.volume)?;
    let axes = a
        .axes
        .iter()
        .map(|name| {
            AXES.iter().position(|x| x == name).ok_or_else(|| {
                usage(format!(
                    "unknown axis {name:?} (alpha, beta, gamma, x, y, z)"
                ))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let metrics = a
        .metric
        .iter()
        .map(|m| {
            let metric: Metric = m.parse().map_err(|e: Error| usage(e.to_string()))?;
            Ok(SimilarityConfig {
                pyramid_levels: a.levels,
                ..SimilarityConfig::with_metric(metric)
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if a.steps < 2 {
        return Err(usage("--steps must be at least 2"));
    }
    for c in &metrics {
        c.validate()?;
    }

    let target = load_image(&a.target)?;
    let volume = load_volume(&a.volume)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let doc: PoseJson = read_json(&a.gt)?;
    let center = match doc.euler() {
        Some(e) => e,
        None => pose_to_euler(&doc.to_pose()?).euler,
    };
    let n = a.samples.unwrap_or_else(|| default_samples(&volume));
    let rows = sweep(
        &target,
        &volume,
        &k,
        &center,
        &axes,
        a.rot_range_deg,
        a.trans_range_mm,
        a.steps,
        n,
        &metrics,
    )?;
    write_atomic(&a.out, landscape_csv(&rows).as_bytes())?;
    log::info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn resample(a: ResampleArgs) -> CliResult {
    let format = image_format(&a.out, a.format)?;
    let img: Image = load_image(&a.image)?;
    let src = read_intrinsics(&a.src_intrinsics)?;
    let canon = read_intrinsics(&a.canon_intrinsics)?;
    let out = canonicalize(&img, &src, &canon)?;
    save_image(&out.image, &a.out, format)?;
    log::info!(
        "{} of {} output pixels covered",
        out.covered_pixels,
        out.image.pixels.len()
    );
    Ok(())
}

pub fn parse_meta(a: ParseMetaArgs) -> CliResult {
    let format = match a.format {
        Some(MetaFormatArg::JsonSidecar) => MetaFormat::JsonSidecar,
        Some(MetaFormatArg::DicomMin) => MetaFormat::DicomMin,
        None if extension(&a.input) == "json" => MetaFormat::JsonSidecar,
        None => MetaFormat::DicomMin,
    };
    if !a.depth_offset_mm.is_finite() {
        return Err(usage("--depth-offset-mm must be finite"));
    }
    let convention = DepthConvention {
        sign: match a.depth_sign {
            DepthSignArg::NegativeY => DepthSign::NegativeY,
            DepthSignArg::PositiveY => DepthSign::PositiveY,
        },
        offset_mm: a.depth_offset_mm,
    };
    let meta = read_meta(&a.input, format)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&meta).map_err(Error::from)?
    );
    if let Some(out) = &a.pose_out {
        let pose = pose_from_meta(&meta, convention)?;
        log::warn!("metadata fixes only alpha, beta and y; gamma, x and z are set to zero");
        write_json(out, &pose.to_json())?;
    }
    Ok(())
}
