//! Image similarity metrics and their gradients.
//!
//! All metrics are correlations in `[-1, 1]`, higher is more similar. The
//! backward functions return `∂metric/∂a` for the first (moving) image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Chart, EulerPose, Intrinsics, Pose};
use crate::render::{make_rays, render_trilinear, render_trilinear_with_grad, Image};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ncc,
    Mncc,
    Gncc,
    #[default]
    MnccGnccMean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ncc => "ncc",
            Metric::Mncc => "mncc",
            Metric::Gncc => "gncc",
            Metric::MnccGnccMean => "mncc_gncc_mean",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(Metric::Ncc),
            "mncc" => Ok(Metric::Mncc),
            "gncc" => Ok(Metric::Gncc),
            "mncc_gncc_mean" => Ok(Metric::MnccGnccMean),
            _ => Err(Error::invalid(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub metric: Metric,
    pub pyramid_levels: usize,
    /// Floor on the standard-deviation product in the NCC denominator.
    pub epsilon: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            metric: Metric::MnccGnccMean,
            pyramid_levels: 4,
            epsilon: 1e-8,
        }
    }
}

impl SimilarityConfig {
    pub fn with_metric(metric: Metric) -> Self {
        SimilarityConfig {
            metric,
            ..Default::default()
        }
    }

    /// The same settings with the pyramid capped at what an `h × w` image
    /// supports, for use on downsampled images.
    pub fn fitted_to(&self, h: usize, w: usize) -> Self {
        SimilarityConfig {
            pyramid_levels: self.pyramid_levels.min(max_levels(h, w)),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::invalid("pyramid_levels must be >= 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccValue {
    pub value: f64,
    /// Both inputs were constant; the value is defined as 0.
    pub degenerate: bool,
}

struct Moments {
    da: Vec<f64>,
    db: Vec<f64>,
    cov: f64,
    sa: f64,
    sb: f64,
}

fn moments(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let da: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let db: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let cov = da.iter().zip(&db).map(|(x, y)| x * y).sum::<f64>() / n;
    let sa = (da.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let sb = (db.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    Moments {
        da,
        db,
        cov,
        sa,
        sb,
    }
}

/// Pearson correlation of two equally long pixel arrays.
pub fn ncc_slices(a: &[f64], b: &[f64], epsilon: f64) -> NccValue {
    let m = moments(a, b);
    NccValue {
        value: (m.cov / (m.sa * m.sb).max(epsilon)).clamp(-1.0, 1.0),
        degenerate: m.sa == 0.0 && m.sb == 0.0,
    }
}

/// NCC and its gradient with respect to `a`.
fn ncc_backward(a: &[f64], b: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let m = moments(a, b);
    let n = a.len() as f64;
    let denom = m.sa * m.sb;
    if denom > epsilon {
        let value = m.cov / denom;
        let grad =
            m.da.iter()
                .zip(&m.db)
                .map(|(x, y)| (y / m.sb - value * x / m.sa) / (n * m.sa))
                .collect();
        (value.clamp(-1.0, 1.0), grad)
    } else {
        let value = m.cov / epsilon;
        (
            value.clamp(-1.0, 1.0),
            m.db.iter().map(|y| y / (n * epsilon)).collect(),
        )
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn ncc(a: &Image, b: &Image) -> Result<NccValue> {
    check_same(a, b)?;
    Ok(ncc_slices(
        &a.pixels,
        &b.pixels,
        SimilarityConfig::default().epsilon,
    ))
}

/// A bare pixel buffer used inside the pyramid and filter code.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    p: Vec<f64>,
}

impl Plane {
    fn of(img: &Image) -> Plane {
        Plane {
            h: img.height,
            w: img.width,
            p: img.pixels.clone(),
        }
    }
}

/// Factor-2 average pooling; an odd trailing row or column is replicated
/// first.
fn pool2(x: &Plane) -> Plane {
    let (h, w) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut p = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let r = [2 * v, (2 * v + 1).min(x.h - 1)];
            let c = [2 * u, (2 * u + 1).min(x.w - 1)];
            p[v * w + u] = 0.25
                * (x.p[r[0] * x.w + c[0]]
                    + x.p[r[0] * x.w + c[1]]
                    + x.p[r[1] * x.w + c[0]]
                    + x.p[r[1] * x.w + c[1]]);
        }
    }
    Plane { h, w, p }
}

/// Adjoint of [`pool2`] for an input of size `h × w`.
fn pool2_backward(g: &Plane, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for v in 0..g.h {
        for u in 0..g.w {
            let q = 0.25 * g.p[v * g.w + u];
            for r in [2 * v, (2 * v + 1).min(h - 1)] {
                for c in [2 * u, (2 * u + 1).min(w - 1)] {
                    out[r * w + c] += q;
                }
            }
        }
    }
    out
}

fn max_levels(h: usize, w: usize) -> usize {
    // floor(log2(min dimension)), but a single level is always allowed.
    let m = h.min(w);
    ((usize::BITS - 1 - m.leading_zeros()) as usize).max(1)
}

fn check_levels(img: &Image, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let max = max_levels(img.height, img.width);
    if levels > max {
        return Err(Error::invalid(format!(
            "{levels} pyramid levels exceed log2 of the image size {}x{} (max {max})",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Mean NCC over an average-pooling pyramid; level 1 is full resolution.
pub fn mncc(a: &Image, b: &Image, levels: usize) -> Result<f64> {
    mncc_eps(a, b, levels, SimilarityConfig::default().epsilon)
}

fn mncc_eps(a: &Image, b: &Image, levels: usize, eps: f64) -> Result<f64> {
    check_same(a, b)?;
    check_levels(a, levels)?;
    let (mut pa, mut pb) = (Plane::of(a), Plane::of(b));
    let mut sum = 0.0;
    for l in 0..levels {
        if l > 0 {
            pa = pool2(&pa);
            pb = pool2(&pb);
        }
        sum += ncc_slices(&pa.p, &pb.p, eps).value;
    }
    Ok(sum / levels as f64)
}

fn mncc_backward(a: &Image, b: &Image, levels: usize, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_same(a, b)?;
    check_levels(a, levels)?;
    let mut pyr_a = vec![Plane::of(a)];
    let mut pyr_b = vec![Plane::of(b)];
    for l in 1..levels {
        pyr_a.push(pool2(&pyr_a[l - 1]));
        pyr_b.push(pool2(&pyr_b[l - 1]));
    }
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(levels);
    for (pa, pb) in pyr_a.iter().zip(&pyr_b) {
        let (v, g) = ncc_backward(&pa.p, &pb.p, eps);
        value += v;
        grads.push(g);
    }
    let scale = 1.0 / levels as f64;
    // Push gradients from coarse to fine.
    let mut carry = vec![0.0; pyr_a[levels - 1].p.len()];
    for l in (0..levels).rev() {
        let level = &pyr_a[l];
        let total: Vec<f64> = grads[l]
            .iter()
            .zip(&carry)
            .map(|(g, c)| g * scale + c)
            .collect();
        if l == 0 {
            return Ok((value * scale, total));
        }
        let prev = &pyr_a[l - 1];
        carry = pool2_backward(
            &Plane {
                h: level.h,
                w: level.w,
                p: total,
            },
            prev.h,
            prev.w,
        );
    }
    unreachable!()
}

const SOBEL_SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const SOBEL_DIFF: [f64; 3] = [-1.0, 0.0, 1.0];

/// 3×3 Sobel response with replicated borders; `dx` selects the horizontal
/// derivative kernel.
fn sobel(x: &Plane, dx: bool) -> Plane {
    let (h, w) = (x.h, x.w);
    let mut p = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let mut s = 0.0;
            for (i, r) in [v.saturating_sub(1), v, (v + 1).min(h - 1)]
                .into_iter()
                .enumerate()
            {
                for (j, c) in [u.saturating_sub(1), u, (u + 1).min(w - 1)]
                    .into_iter()
                    .enumerate()
                {
                    let k = if dx {
                        SOBEL_SMOOTH[i] * SOBEL_DIFF[j]
                    } else {
                        SOBEL_DIFF[i] * SOBEL_SMOOTH[j]
                    };
                    s += k * x.p[r * w + c];
                }
            }
            p[v * w + u] = s;
        }
    }
    Plane { h, w, p }
}

fn sobel_backward(g: &Plane, dx: bool) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let mut out = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let gv = g.p[v * w + u];
            for (i, r) in [v.saturating_sub(1), v, (v + 1).min(h - 1)]
                .into_iter()
                .enumerate()
            {
                for (j, c) in [u.saturating_sub(1), u, (u + 1).min(w - 1)]
                    .into_iter()
                    .enumerate()
                {
                    let k = if dx {
                        SOBEL_SMOOTH[i] * SOBEL_DIFF[j]
                    } else {
                        SOBEL_DIFF[i] * SOBEL_SMOOTH[j]
                    };
                    out[r * w + c] += k * gv;
                }
            }
        }
    }
    out
}

fn check_sobel(a: &Image) -> Result<()> {
    if a.height < 3 || a.width < 3 {
        return Err(Error::invalid(format!(
            "gradient NCC needs at least 3x3 pixels, got {}x{}",
            a.height, a.width
        )));
    }
    Ok(())
}

/// Mean of the NCCs of the horizontal and vertical Sobel responses.
pub fn gncc(a: &Image, b: &Image) -> Result<f64> {
    gncc_eps(a, b, SimilarityConfig::default().epsilon)
}

fn gncc_eps(a: &Image, b: &Image, eps: f64) -> Result<f64> {
    check_same(a, b)?;
    check_sobel(a)?;
    let (pa, pb) = (Plane::of(a), Plane::of(b));
    let x = ncc_slices(&sobel(&pa, true).p, &sobel(&pb, true).p, eps).value;
    let y = ncc_slices(&sobel(&pa, false).p, &sobel(&pb, false).p, eps).value;
    Ok(0.5 * (x + y))
}

fn gncc_backward(a: &Image, b: &Image, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_same(a, b)?;
    check_sobel(a)?;
    let (pa, pb) = (Plane::of(a), Plane::of(b));
    let mut value = 0.0;
    let mut grad = vec![0.0; pa.p.len()];
    for dx in [true, false] {
        let sa = sobel(&pa, dx);
        let (v, g) = ncc_backward(&sa.p, &sobel(&pb, dx).p, eps);
        value += 0.5 * v;
        let back = sobel_backward(
            &Plane {
                h: sa.h,
                w: sa.w,
                p: g,
            },
            dx,
        );
        for (o, x) in grad.iter_mut().zip(back) {
            *o += 0.5 * x;
        }
    }
    Ok((value, grad))
}

/// The configured metric.
pub fn combined(a: &Image, b: &Image, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    match cfg.metric {
        Metric::Ncc => {
            check_same(a, b)?;
            Ok(ncc_slices(&a.pixels, &b.pixels, eps).value)
        }
        Metric::Mncc => mncc_eps(a, b, cfg.pyramid_levels, eps),
        Metric::Gncc => gncc_eps(a, b, eps),
        Metric::MnccGnccMean => {
            Ok(0.5 * (mncc_eps(a, b, cfg.pyramid_levels, eps)? + gncc_eps(a, b, eps)?))
        }
    }
}

/// The configured metric and its gradient with respect to every pixel of
/// the moving image `a`.
pub fn combined_backward(a: &Image, b: &Image, cfg: &SimilarityConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    match cfg.metric {
        Metric::Ncc => {
            check_same(a, b)?;
            Ok(ncc_backward(&a.pixels, &b.pixels, eps))
        }
        Metric::Mncc => mncc_backward(a, b, cfg.pyramid_levels, eps),
        Metric::Gncc => gncc_backward(a, b, eps),
        Metric::MnccGnccMean => {
            let (vm, gm) = mncc_backward(a, b, cfg.pyramid_levels, eps)?;
            let (vg, gg) = gncc_backward(a, b, eps)?;
            Ok((
                0.5 * (vm + vg),
                gm.iter().zip(&gg).map(|(x, y)| 0.5 * (x + y)).collect(),
            ))
        }
    }
}

/// Metric value between `target` and the render at `pose`, and its gradient
/// with respect to the `chart` coordinates of the pose.
pub fn similarity_gradient_wrt_pose(
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    pose: &Pose,
    n_samples: usize,
    cfg: &SimilarityConfig,
    chart: Chart,
) -> Result<(f64, [f64; 6])> {
    let (img, d) = render_trilinear_with_grad(v, k, pose, n_samples, chart)?;
    let (value, dm) = combined_backward(&img, target, cfg)?;
    let mut grad = [0.0; 6];
    for (g, dp) in dm.iter().zip(&d.d_pixels) {
        for j in 0..6 {
            grad[j] += g * dp[j];
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite similarity {value} or gradient {grad:?}"
        )));
    }
    Ok((value, grad))
}

pub const AXES: [&str; 6] = ["alpha", "beta", "gamma", "x", "y", "z"];

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeRow {
    pub axis: &'static str,
    pub offset: f64,
    pub metric: Metric,
    pub value: f64,
}

/// One-dimensional sweeps of each requested Euler parameter around `center`.
///
/// Rotations are swept over `±rot_range_deg`, translations over
/// `±trans_range_mm`, each with `steps` evenly spaced samples (odd `steps`
/// include the zero offset exactly).
#[allow(clippy::too_many_arguments)]
pub fn landscape(
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    center: &EulerPose,
    axes: &[usize],
    rot_range_deg: f64,
    trans_range_mm: f64,
    steps: usize,
    n_samples: usize,
    metrics: &[SimilarityConfig],
) -> Result<Vec<LandscapeRow>> {
    if steps < 2 {
        return Err(Error::invalid("a sweep needs at least 2 steps"));
    }
    let mut rows = Vec::new();
    for &axis in axes {
        if axis >= 6 {
            return Err(Error::invalid(format!("axis index {axis} out of range")));
        }
        let range = if axis < 3 {
            rot_range_deg
        } else {
            trans_range_mm
        };
        for s in 0..steps {
            let offset = -range + 2.0 * range * s as f64 / (steps - 1) as f64;
            let mut p = center.to_array();
            p[axis] += offset;
            let pose = EulerPose::from_array(p).to_pose()?;
            let img = render_trilinear(v, &make_rays(k, &pose), n_samples)?;
            for cfg in metrics {
                rows.push(LandscapeRow {
                    axis: AXES[axis],
                    offset,
                    metric: cfg.metric,
                    value: combined(&img, target, cfg)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn landscape_csv(rows: &[LandscapeRow]) -> String {
    let mut s = String::from("axis,offset,metric,value\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.axis,
            r.offset,
            r.metric.name(),
            r.value
        ));
    }
    s
}
