use nalgebra::Vector3;
use rayon::prelude::*;

use super::{clip, voxel_ray, Image, RayBundle};
use crate::volume::Volume;

/// Exact line integral through the voxelized volume.
///
/// The ray is cut at every voxel-plane crossing; each segment contributes
/// its length times the value of the voxel containing its midpoint.
pub fn render_siddon(v: &Volume, rays: &RayBundle) -> Image {
    let mut pixels = vec![0.0; rays.height * rays.width];
    pixels
        .par_chunks_mut(rays.width)
        .enumerate()
        .for_each(|(row, out)| {
            for (u, px) in out.iter_mut().enumerate() {
                *px = siddon_ray(v, &rays.source, &rays.target(u, row));
            }
        });
    Image {
        height: rays.height,
        width: rays.width,
        pixels,
        intrinsics: None,
        pose: None,
    }
}

pub(crate) fn siddon_ray(v: &Volume, s: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let grid = v.grid();
    let (qs, qd) = voxel_ray(grid, s, p);
    let Some(c) = clip(grid, &qs, &qd) else {
        return 0.0;
    };
    let dims = grid.dims;
    let data = v.data();
    let (sx, sy) = (dims[0], dims[0] * dims[1]);

    // Next plane index and its crossing parameter along each axis.
    let mut plane = [0i64; 3];
    let mut next = [f64::INFINITY; 3];
    let start = qs + c.entry * qd;
    for a in 0..3 {
        if qd[a] > 0.0 {
            plane[a] = start[a].floor() as i64 + 1;
        } else if qd[a] < 0.0 {
            plane[a] = start[a].ceil() as i64 - 1;
        } else {
            continue;
        }
        next[a] = (plane[a] as f64 - qs[a]) / qd[a];
    }

    let mut sum = 0.0;
    let mut cur = c.entry;
    loop {
        let a = if next[0] <= next[1] && next[0] <= next[2] {
            0
        } else if next[1] <= next[2] {
            1
        } else {
            2
        };
        let end = next[a].min(c.exit);
        if end > cur {
            let mid = 0.5 * (cur + end);
            let idx = |b: usize| ((qs[b] + mid * qd[b]).floor().max(0.0) as usize).min(dims[b] - 1);
            sum += data[idx(0) + sx * idx(1) + sy * idx(2)] * (end - cur);
            cur = end;
        }
        if next[a] >= c.exit {
            break;
        }
        plane[a] += if qd[a] > 0.0 { 1 } else { -1 };
        next[a] = (plane[a] as f64 - qs[a]) / qd[a];
    }
    (p - s).norm() * sum
}
