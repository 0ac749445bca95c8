//! Line-integral X-ray rendering.
//!
//! Each detector pixel receives `∫ μ` along the segment from the source to
//! the pixel center, computed either exactly for the voxelized volume
//! (Siddon) or by trapezoid quadrature over trilinearly interpolated samples.

mod image;
pub mod image_io;
mod siddon;
mod trilinear;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Chart, Intrinsics, Pose};
use crate::volume::{mask_structures, Grid, LabelMap, Volume};

pub use image::Image;
pub use siddon::render_siddon;
pub use trilinear::{render_trilinear, render_trilinear_with_grad, RenderGradient};

/// Source and per-pixel detector targets in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub source: Vector3<f64>,
    /// Row-major, `targets[v * width + u]`.
    pub targets: Vec<Vector3<f64>>,
    pub height: usize,
    pub width: usize,
}

impl RayBundle {
    pub fn target(&self, u: usize, v: usize) -> Vector3<f64> {
        self.targets[v * self.width + u]
    }
}

pub fn make_rays(k: &Intrinsics, pose: &Pose) -> RayBundle {
    let mut targets = Vec::with_capacity(k.height * k.width);
    for v in 0..k.height {
        for u in 0..k.width {
            targets.push(pose.transform_point(&k.carm_point(u as f64, v as f64)));
        }
    }
    RayBundle {
        source: pose.transform_point(&Vector3::zeros()),
        targets,
        height: k.height,
        width: k.width,
    }
}

/// Default number of quadrature samples per ray, `2 · max(N)`.
pub fn default_samples(v: &Volume) -> usize {
    2 * v.max_dim()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Siddon,
    Trilinear { samples: usize },
}

pub fn render(v: &Volume, rays: &RayBundle, method: Method) -> Result<Image> {
    match method {
        Method::Siddon => Ok(render_siddon(v, rays)),
        Method::Trilinear { samples } => render_trilinear(v, rays, samples),
    }
}

/// Renders only the structures whose labels are in `keep`.
pub fn render_structure(
    v: &Volume,
    m: &LabelMap,
    keep: &BTreeSet<u16>,
    rays: &RayBundle,
    method: Method,
) -> Result<Image> {
    render(&mask_structures(v, m, keep)?, rays, method)
}

/// `I₀ · exp(−I)`: detected intensity from line integrals.
pub fn to_beer_lambert(img: &Image, i0: f64) -> Result<Image> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::invalid(format!("I0 must be positive, got {i0}")));
    }
    Ok(img.map(|p| i0 * (-p).exp()))
}

/// `−ln(I_BL / I₀)`: line integrals from detected intensity.
pub fn from_beer_lambert(img: &Image, i0: f64) -> Result<Image> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::invalid(format!("I0 must be positive, got {i0}")));
    }
    if img.pixels.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::invalid("Beer-Lambert intensities must be positive"));
    }
    Ok(img.map(|p| -(p / i0).ln()))
}

/// Pose gradient of the Siddon render by central differences in `chart`
/// coordinates. Slow: twelve full renders.
pub fn render_siddon_grad_fd(
    v: &Volume,
    k: &Intrinsics,
    pose: &Pose,
    chart: Chart,
    steps: [f64; 6],
) -> Result<RenderGradient> {
    let n = k.height * k.width;
    let mut d_pixels = vec![[0.0; 6]; n];
    for p in 0..6 {
        let mut delta = [0.0; 6];
        delta[p] = steps[p];
        let plus = render_siddon(v, &make_rays(k, &chart.perturb(pose, &delta)?));
        delta[p] = -steps[p];
        let minus = render_siddon(v, &make_rays(k, &chart.perturb(pose, &delta)?));
        for i in 0..n {
            d_pixels[i][p] = (plus.pixels[i] - minus.pixels[i]) / (2.0 * steps[p]);
        }
    }
    Ok(RenderGradient {
        height: k.height,
        width: k.width,
        d_pixels,
    })
}

/// Parametric interval `[entry, exit] ⊆ [0, 1]` of the segment
/// `qs + α qd` inside the voxel box `[0, N]`, with the axis whose slab
/// bounds each end (`None` when clipped by the segment itself).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Clip {
    pub entry: f64,
    pub exit: f64,
    pub entry_axis: Option<usize>,
    pub exit_axis: Option<usize>,
}

pub(crate) fn clip(grid: &Grid, qs: &Vector3<f64>, qd: &Vector3<f64>) -> Option<Clip> {
    let mut c = Clip {
        entry: 0.0,
        exit: 1.0,
        entry_axis: None,
        exit_axis: None,
    };
    for a in 0..3 {
        let n = grid.dims[a] as f64;
        if qd[a] == 0.0 {
            if qs[a] < 0.0 || qs[a] > n {
                return None;
            }
            continue;
        }
        let t0 = -qs[a] / qd[a];
        let t1 = (n - qs[a]) / qd[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > c.entry {
            c.entry = lo;
            c.entry_axis = Some(a);
        }
        if hi < c.exit {
            c.exit = hi;
            c.exit_axis = Some(a);
        }
    }
    (c.entry < c.exit).then_some(c)
}

/// Ray endpoints in continuous voxel coordinates.
#[inline]
pub(crate) fn voxel_ray(
    grid: &Grid,
    s: &Vector3<f64>,
    p: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let qs = grid.to_voxel(s);
    let qd = Vector3::from_fn(|a, _| (p[a] - s[a]) / grid.spacing[a]);
    (qs, qd)
}
