use nalgebra::Vector3;
use rayon::prelude::*;

use super::{clip, make_rays, voxel_ray, Image, RayBundle};
use crate::error::{Error, Result};
use crate::geometry::{Chart, Intrinsics, Pose};
use crate::volume::Volume;

/// `∂I/∂θ` for every pixel, in the coordinates of the requested chart.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradient {
    pub height: usize,
    pub width: usize,
    /// Row-major like [`Image::pixels`].
    pub d_pixels: Vec<[f64; 6]>,
}

/// Trilinear interpolation with values at voxel centers. Inside the volume
/// box the interpolation grid is clamped at the outermost centers, so a
/// constant volume interpolates to the same constant everywhere in the box.
struct Sampler<'a> {
    data: &'a [f64],
    dims: [usize; 3],
    stride: [usize; 3],
}

/// Lower corner index, upper corner index, fraction, and whether the
/// coordinate lies in the interior (non-clamped) region.
#[inline]
fn axis_cell(q: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let g = q - 0.5;
    let top = (n - 1) as f64;
    if g <= 0.0 {
        (0, 1, 0.0, false)
    } else if g >= top {
        (n - 2, n - 1, 1.0, false)
    } else {
        let i = (g.floor() as usize).min(n - 2);
        (i, i + 1, g - i as f64, true)
    }
}

impl<'a> Sampler<'a> {
    fn new(v: &'a Volume) -> Self {
        let d = v.dims();
        Sampler {
            data: v.data(),
            dims: d,
            stride: [1, d[0], d[0] * d[1]],
        }
    }

    #[inline]
    fn corners(&self, q: &Vector3<f64>) -> ([f64; 8], [f64; 3], [bool; 3]) {
        let (x0, x1, fx, ax) = axis_cell(q[0], self.dims[0]);
        let (y0, y1, fy, ay) = axis_cell(q[1], self.dims[1]);
        let (z0, z1, fz, az) = axis_cell(q[2], self.dims[2]);
        let [sx, sy, sz] = self.stride;
        let d = self.data;
        let (y0, y1, z0, z1) = (y0 * sy, y1 * sy, z0 * sz, z1 * sz);
        let (x0, x1) = (x0 * sx, x1 * sx);
        (
            [
                d[x0 + y0 + z0],
                d[x1 + y0 + z0],
                d[x0 + y1 + z0],
                d[x1 + y1 + z0],
                d[x0 + y0 + z1],
                d[x1 + y0 + z1],
                d[x0 + y1 + z1],
                d[x1 + y1 + z1],
            ],
            [fx, fy, fz],
            [ax, ay, az],
        )
    }

    #[inline]
    fn value(&self, q: &Vector3<f64>) -> f64 {
        let (c, [fx, fy, fz], _) = self.corners(q);
        let c00 = c[0] + fx * (c[1] - c[0]);
        let c10 = c[2] + fx * (c[3] - c[2]);
        let c01 = c[4] + fx * (c[5] - c[4]);
        let c11 = c[6] + fx * (c[7] - c[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        c0 + fz * (c1 - c0)
    }

    /// Value and gradient with respect to voxel coordinates.
    #[inline]
    fn value_grad(&self, q: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (c, [fx, fy, fz], [ax, ay, az]) = self.corners(q);
        let c00 = c[0] + fx * (c[1] - c[0]);
        let c10 = c[2] + fx * (c[3] - c[2]);
        let c01 = c[4] + fx * (c[5] - c[4]);
        let c11 = c[6] + fx * (c[7] - c[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        let value = c0 + fz * (c1 - c0);
        let gz = if az { c1 - c0 } else { 0.0 };
        let gy = if ay {
            (1.0 - fz) * (c10 - c00) + fz * (c11 - c01)
        } else {
            0.0
        };
        let gx = if ax {
            let d00 = c[1] - c[0];
            let d10 = c[3] - c[2];
            let d01 = c[5] - c[4];
            let d11 = c[7] - c[6];
            let d0 = d00 + fy * (d10 - d00);
            let d1 = d01 + fy * (d11 - d01);
            d0 + fz * (d1 - d0)
        } else {
            0.0
        };
        (value, Vector3::new(gx, gy, gz))
    }
}

/// Trapezoid weight of sample `m` of `n`, per unit of the sampled span.
#[inline]
fn weight(m: usize, n: usize) -> f64 {
    let h = 1.0 / (n - 1) as f64;
    if m == 0 || m == n - 1 {
        0.5 * h
    } else {
        h
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "trilinear rendering needs at least 2 samples, got {n}"
        )));
    }
    Ok(())
}

/// Line integrals by `n_samples`-point trapezoid quadrature over the part
/// of each ray inside the volume's bounding box.
pub fn render_trilinear(v: &Volume, rays: &RayBundle, n_samples: usize) -> Result<Image> {
    check_samples(n_samples)?;
    let sampler = Sampler::new(v);
    let mut pixels = vec![0.0; rays.height * rays.width];
    pixels
        .par_chunks_mut(rays.width)
        .enumerate()
        .for_each(|(row, out)| {
            for (u, px) in out.iter_mut().enumerate() {
                let p = rays.target(u, row);
                let (qs, qd) = voxel_ray(v.grid(), &rays.source, &p);
                if let Some(c) = clip(v.grid(), &qs, &qd) {
                    let span = c.exit - c.entry;
                    let mut acc = 0.0;
                    for m in 0..n_samples {
                        let t = m as f64 / (n_samples - 1) as f64;
                        let q = qs + (c.entry + t * span) * qd;
                        acc += weight(m, n_samples) * sampler.value(&q);
                    }
                    *px = (p - rays.source).norm() * span * acc;
                }
            }
        });
    Ok(Image {
        height: rays.height,
        width: rays.width,
        pixels,
        intrinsics: None,
        pose: None,
    })
}

/// Sums that the pixel derivative is assembled from.
#[derive(Default)]
struct RayAccum {
    /// `Σ c V`.
    value: f64,
    /// `Σ c ∇V`.
    g0: Vector3<f64>,
    /// `Σ c α ∇V`.
    g1: Vector3<f64>,
    /// `Σ c (1 − t) ∇V·qd`.
    at_entry: f64,
    /// `Σ c t ∇V·qd`.
    at_exit: f64,
}

/// [`render_trilinear`] at the rays of `(k, pose)` together with the exact
/// derivative of every pixel with respect to the six `chart` coordinates.
///
/// The derivative follows the discrete sum through the sample positions,
/// the moving entry and exit points and the interpolation weights; it is
/// defined wherever no sample sits on a cell boundary.
pub fn render_trilinear_with_grad(
    v: &Volume,
    k: &Intrinsics,
    pose: &Pose,
    n_samples: usize,
    chart: Chart,
) -> Result<(Image, RenderGradient)> {
    check_samples(n_samples)?;
    let jac = chart.jacobian(pose)?;
    let rays = make_rays(k, pose);
    let grid = v.grid();
    let sampler = Sampler::new(v);
    let inv_spacing = Vector3::from(grid.spacing.map(|s| 1.0 / s));
    let t = pose.translation();
    let d_source = jac
        .point_derivatives(t)
        .map(|d| d.component_mul(&inv_spacing));

    let n = k.height * k.width;
    let mut pixels = vec![0.0; n];
    let mut d_pixels = vec![[0.0; 6]; n];
    pixels
        .par_chunks_mut(k.width)
        .zip(d_pixels.par_chunks_mut(k.width))
        .enumerate()
        .for_each(|(row, (out, d_out))| {
            for u in 0..k.width {
                let p = rays.target(u, row);
                let (qs, qd) = voxel_ray(grid, &rays.source, &p);
                let Some(c) = clip(grid, &qs, &qd) else {
                    continue;
                };
                let span = c.exit - c.entry;
                let mut acc = RayAccum::default();
                for m in 0..n_samples {
                    let tm = m as f64 / (n_samples - 1) as f64;
                    let alpha = c.entry + tm * span;
                    let q = qs + alpha * qd;
                    let w = weight(m, n_samples);
                    let (val, grad) = sampler.value_grad(&q);
                    acc.value += w * val;
                    let wg = grad * w;
                    acc.g0 += wg;
                    acc.g1 += wg * alpha;
                    let along = wg.dot(&qd);
                    acc.at_entry += (1.0 - tm) * along;
                    acc.at_exit += tm * along;
                }
                let len = (p - rays.source).norm();
                out[u] = len * span * acc.value;

                let c_point = k.carm_point(u as f64, row as f64);
                let d_target = jac.point_derivatives(&(c_point + t));
                let mut d = [0.0; 6];
                for (j, dj) in d.iter_mut().enumerate() {
                    let dqs = d_source[j];
                    let dqd = d_target[j].component_mul(&inv_spacing) - dqs;
                    let d_end = |axis: Option<usize>, alpha: f64| match axis {
                        Some(a) => -(dqs[a] + alpha * dqd[a]) / qd[a],
                        None => 0.0,
                    };
                    let de = d_end(c.entry_axis, c.entry);
                    let dx = d_end(c.exit_axis, c.exit);
                    *dj = len * (dx - de) * acc.value
                        + len
                            * span
                            * (acc.g0.dot(&dqs)
                                + acc.g1.dot(&dqd)
                                + acc.at_entry * de
                                + acc.at_exit * dx);
                }
                d_out[u] = d;
            }
        });
    let image = Image {
        height: k.height,
        width: k.width,
        pixels,
        intrinsics: Some(*k),
        pose: Some(*pose),
    };
    Ok((
        image,
        RenderGradient {
            height: k.height,
            width: k.width,
            d_pixels,
        },
    ))
}
