//! Analytic test volumes centered on the world origin.
//!
//! Piecewise-constant phantoms are rasterized by testing voxel centers, so a
//! voxel belongs to a shape iff its center does.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{FiducialSet, Grid, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSpec {
    /// A cube filling its grid exactly; the voxel size is adjusted so that
    /// a whole number of voxels spans the edge.
    UniformCube {
        edge_mm: f64,
        mu: f64,
        voxel_mm: f64,
    },
    Sphere {
        radius_mm: f64,
        mu: f64,
        voxel_mm: f64,
    },
    /// Label 1 is the outer shell, label 2 the inner sphere.
    NestedSpheres {
        outer_radius_mm: f64,
        inner_radius_mm: f64,
        mu_outer: f64,
        mu_inner: f64,
        voxel_mm: f64,
    },
    /// Two equal boxes separated by an empty gap along x.
    TwoBoxes {
        box_mm: [f64; 3],
        gap_mm: f64,
        mu: f64,
        voxel_mm: f64,
    },
    /// A box with a denser sphere embedded off-center.
    SphereInBox {
        box_mm: [f64; 3],
        mu_box: f64,
        radius_mm: f64,
        center_mm: [f64; 3],
        mu_sphere: f64,
        voxel_mm: f64,
    },
    /// A sum of axis-aligned Gaussians sampled at voxel centers.
    SmoothBlob {
        extent_mm: [f64; 3],
        voxel_mm: f64,
        blobs: Vec<Blob>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center_mm: [f64; 3],
    pub sigma_mm: [f64; 3],
    pub mu: f64,
}

impl PhantomSpec {
    /// The registration phantom: an asymmetric box with an off-center
    /// sphere, small enough to render quickly.
    pub fn default_sphere_in_box() -> Self {
        PhantomSpec::SphereInBox {
            box_mm: [60.0, 44.0, 52.0],
            mu_box: 0.01,
            radius_mm: 12.0,
            center_mm: [10.0, -6.0, 8.0],
            mu_sphere: 0.03,
            voxel_mm: 2.0,
        }
    }

    pub fn default_smooth_blob() -> Self {
        PhantomSpec::SmoothBlob {
            extent_mm: [96.0, 80.0, 88.0],
            voxel_mm: 2.0,
            blobs: vec![
                Blob {
                    center_mm: [-8.0, 4.0, -6.0],
                    sigma_mm: [16.0, 11.0, 13.0],
                    mu: 0.02,
                },
                Blob {
                    center_mm: [14.0, -6.0, 10.0],
                    sigma_mm: [7.0, 9.0, 6.0],
                    mu: 0.03,
                },
                Blob {
                    center_mm: [-12.0, -8.0, 16.0],
                    sigma_mm: [5.0, 6.0, 8.0],
                    mu: 0.015,
                },
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub fiducials: FiducialSet,
    pub labels: Option<LabelMap>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must be non-negative, got {v}"
        )))
    }
}

/// A grid of `voxel`-sized cells covering `extent` plus `margin` voxels on
/// each side, centered on the origin.
fn centered_grid(extent: [f64; 3], voxel: f64, margin: usize) -> Result<Grid> {
    let dims = extent.map(|e| (e / voxel).ceil().max(1.0) as usize + 2 * margin);
    let origin = [0, 1, 2].map(|a| -(dims[a] as f64) * voxel / 2.0);
    Grid::new(dims, [voxel; 3], origin)
}

fn rasterize(grid: &Grid, f: impl Fn(&Vector3<f64>) -> f64) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::with_capacity(grid.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(f(&grid.voxel_center(i, j, k)));
            }
        }
    }
    out
}

fn inside_box(p: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> bool {
    (0..3).all(|a| p[a] > lo[a] && p[a] < hi[a])
}

fn box_corners(prefix: &str, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vec<(String, Vector3<f64>)> {
    (0..8)
        .map(|c| {
            let p = Vector3::new(
                if c & 1 == 0 { lo.x } else { hi.x },
                if c & 2 == 0 { lo.y } else { hi.y },
                if c & 4 == 0 { lo.z } else { hi.z },
            );
            (format!("{prefix}corner{c}"), p)
        })
        .collect()
}

fn sphere_points(prefix: &str, c: &Vector3<f64>, r: f64) -> Vec<(String, Vector3<f64>)> {
    let mut pts = vec![(format!("{prefix}center"), *c)];
    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
        let mut e = Vector3::zeros();
        e[a] = r;
        pts.push((format!("{prefix}{axis}+"), c + e));
        pts.push((format!("{prefix}{axis}-"), c - e));
    }
    pts
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    match spec {
        PhantomSpec::UniformCube {
            edge_mm,
            mu,
            voxel_mm,
        } => {
            positive("edge_mm", *edge_mm)?;
            positive("voxel_mm", *voxel_mm)?;
            non_negative("mu", *mu)?;
            let n = (edge_mm / voxel_mm).round().max(1.0) as usize;
            let d = edge_mm / n as f64;
            let grid = Grid::new([n; 3], [d; 3], [-edge_mm / 2.0; 3])?;
            let volume = Volume::new(grid, vec![*mu; grid.len()])?;
            let h = Vector3::repeat(edge_mm / 2.0);
            let mut pts = box_corners("", &-h, &h);
            pts.push(("center".into(), Vector3::zeros()));
            Ok(Phantom {
                volume,
                fiducials: FiducialSet::from_points(pts)?,
                labels: None,
            })
        }
        PhantomSpec::Sphere {
            radius_mm,
            mu,
            voxel_mm,
        } => {
            positive("radius_mm", *radius_mm)?;
            positive("voxel_mm", *voxel_mm)?;
            non_negative("mu", *mu)?;
            let grid = centered_grid([2.0 * radius_mm; 3], *voxel_mm, 1)?;
            let r2 = radius_mm * radius_mm;
            let data = rasterize(&grid, |p| if p.norm_squared() < r2 { *mu } else { 0.0 });
            Ok(Phantom {
                volume: Volume::new(grid, data)?,
                fiducials: FiducialSet::from_points(sphere_points(
                    "",
                    &Vector3::zeros(),
                    *radius_mm,
                ))?,
                labels: None,
            })
        }
        PhantomSpec::NestedSpheres {
            outer_radius_mm,
            inner_radius_mm,
            mu_outer,
            mu_inner,
            voxel_mm,
        } => {
            positive("outer_radius_mm", *outer_radius_mm)?;
            positive("inner_radius_mm", *inner_radius_mm)?;
            positive("voxel_mm", *voxel_mm)?;
            non_negative("mu_outer", *mu_outer)?;
            non_negative("mu_inner", *mu_inner)?;
            if inner_radius_mm >= outer_radius_mm {
                return Err(Error::invalid(
                    "inner radius must be smaller than outer radius",
                ));
            }
            let grid = centered_grid([2.0 * outer_radius_mm; 3], *voxel_mm, 1)?;
            let (ro2, ri2) = (outer_radius_mm.powi(2), inner_radius_mm.powi(2));
            let label = |p: &Vector3<f64>| {
                let d2 = p.norm_squared();
                if d2 < ri2 {
                    2u16
                } else if d2 < ro2 {
                    1
                } else {
                    0
                }
            };
            let labels: Vec<u16> = rasterize(&grid, |p| label(p) as f64)
                .into_iter()
                .map(|l| l as u16)
                .collect();
            let data = labels
                .iter()
                .map(|l| match l {
                    2 => *mu_inner,
                    1 => *mu_outer,
                    _ => 0.0,
                })
                .collect();
            let names = BTreeMap::from([
                (1, "outer_shell".to_string()),
                (2, "inner_sphere".to_string()),
            ]);
            Ok(Phantom {
                volume: Volume::new(grid, data)?,
                fiducials: FiducialSet::from_points(sphere_points(
                    "",
                    &Vector3::zeros(),
                    *outer_radius_mm,
                ))?,
                labels: Some(LabelMap::new(grid, labels, names)?),
            })
        }
        PhantomSpec::TwoBoxes {
            box_mm,
            gap_mm,
            mu,
            voxel_mm,
        } => {
            for (a, s) in box_mm.iter().enumerate() {
                positive(&format!("box_mm[{a}]"), *s)?;
            }
            positive("gap_mm", *gap_mm)?;
            positive("voxel_mm", *voxel_mm)?;
            non_negative("mu", *mu)?;
            let extent = [2.0 * box_mm[0] + gap_mm, box_mm[1], box_mm[2]];
            let grid = centered_grid(extent, *voxel_mm, 1)?;
            let half = Vector3::new(box_mm[0], box_mm[1] / 2.0, box_mm[2] / 2.0);
            let g = gap_mm / 2.0;
            let (lo_a, hi_a) = (
                Vector3::new(-g - half.x, -half.y, -half.z),
                Vector3::new(-g, half.y, half.z),
            );
            let (lo_b, hi_b) = (
                Vector3::new(g, -half.y, -half.z),
                Vector3::new(g + half.x, half.y, half.z),
            );
            let data = rasterize(&grid, |p| {
                if inside_box(p, &lo_a, &hi_a) || inside_box(p, &lo_b, &hi_b) {
                    *mu
                } else {
                    0.0
                }
            });
            let mut pts = box_corners("a_", &lo_a, &hi_a);
            pts.extend(box_corners("b_", &lo_b, &hi_b));
            Ok(Phantom {
                volume: Volume::new(grid, data)?,
                fiducials: FiducialSet::from_points(pts)?,
                labels: None,
            })
        }
        PhantomSpec::SphereInBox {
            box_mm,
            mu_box,
            radius_mm,
            center_mm,
            mu_sphere,
            voxel_mm,
        } => {
            for (a, s) in box_mm.iter().enumerate() {
                positive(&format!("box_mm[{a}]"), *s)?;
            }
            positive("radius_mm", *radius_mm)?;
            positive("voxel_mm", *voxel_mm)?;
            non_negative("mu_box", *mu_box)?;
            non_negative("mu_sphere", *mu_sphere)?;
            let grid = centered_grid(*box_mm, *voxel_mm, 1)?;
            let hi = Vector3::from(*box_mm) / 2.0;
            let lo = -hi;
            let c = Vector3::from(*center_mm);
            let r2 = radius_mm * radius_mm;
            let data = rasterize(&grid, |p| {
                if (p - c).norm_squared() < r2 {
                    *mu_sphere
                } else if inside_box(p, &lo, &hi) {
                    *mu_box
                } else {
                    0.0
                }
            });
            let mut pts = box_corners("", &lo, &hi);
            pts.push(("sphere_center".into(), c));
            Ok(Phantom {
                volume: Volume::new(grid, data)?,
                fiducials: FiducialSet::from_points(pts)?,
                labels: None,
            })
        }
        PhantomSpec::SmoothBlob {
            extent_mm,
            voxel_mm,
            blobs,
        } => {
            for (a, s) in extent_mm.iter().enumerate() {
                positive(&format!("extent_mm[{a}]"), *s)?;
            }
            positive("voxel_mm", *voxel_mm)?;
            if blobs.is_empty() {
                return Err(Error::invalid("smooth_blob needs at least one blob"));
            }
            for b in blobs {
                non_negative("mu", b.mu)?;
                for s in b.sigma_mm {
                    positive("sigma_mm", s)?;
                }
            }
            let grid = centered_grid(*extent_mm, *voxel_mm, 0)?;
            let data = rasterize(&grid, |p| {
                blobs
                    .iter()
                    .map(|b| {
                        let q: f64 = (0..3)
                            .map(|a| ((p[a] - b.center_mm[a]) / b.sigma_mm[a]).powi(2))
                            .sum();
                        b.mu * (-0.5 * q).exp()
                    })
                    .sum()
            });
            let pts = blobs
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("blob{i}"), Vector3::from(b.center_mm)));
            Ok(Phantom {
                volume: Volume::new(grid, data)?,
                fiducials: FiducialSet::from_points(pts)?,
                labels: None,
            })
        }
    }
}
