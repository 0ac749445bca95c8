use carm_core::error::{Error, Result};
use carm_core::render::Image;

fn sobel_magnitude(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height as isize, img.width as isize);
    let at = |u: isize, v: isize| img.get(u.clamp(0, w - 1) as usize, v.clamp(0, h - 1) as usize);
    let mut out = Vec::with_capacity(img.pixels.len());
    for v in 0..h {
        for u in 0..w {
            let gx = at(u + 1, v - 1) + 2.0 * at(u + 1, v) + at(u + 1, v + 1)
                - at(u - 1, v - 1)
                - 2.0 * at(u - 1, v)
                - at(u - 1, v + 1);
            let gy = at(u - 1, v + 1) + 2.0 * at(u, v + 1) + at(u + 1, v + 1)
                - at(u - 1, v - 1)
                - 2.0 * at(u, v - 1)
                - at(u + 1, v - 1);
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// The target windowed to [0, 1], with the strongest 10% of the render's
/// Sobel edges blended in at half opacity.
pub fn edge_overlay(target: &Image, render: &Image) -> Result<Image> {
    if !target.same_shape(render) {
        return Err(Error::InvalidArgument(format!(
            "overlay needs equal shapes, got {}x{} and {}x{}",
            target.height, target.width, render.height, render.width
        )));
    }
    let edges = sobel_magnitude(render);
    let mut sorted = edges.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(0.9 * (sorted.len() - 1) as f64).round() as usize];
    let (lo, hi) = target.min_max();
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    let pixels = target
        .pixels
        .iter()
        .zip(&edges)
        .map(|(&t, &e)| {
            let t = (t - lo) * scale;
            if e >= threshold && e > 0.0 {
                0.5 * t + 0.5
            } else {
                t
            }
        })
        .collect();
    Image::new(target.height, target.width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_edge_is_highlighted() {
        let (h, w) = (20, 20);
        let render = Image::new(
            h,
            w,
            (0..h * w)
                .map(|i| if i % w < 10 { 0.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let target = Image::new(h, w, (0..h * w).map(|i| (i % 7) as f64).collect()).unwrap();
        let o = edge_overlay(&target, &render).unwrap();
        for v in 0..h {
            // Columns 9 and 10 straddle the step.
            for u in [9, 10] {
                let t = target.get(u, v) / 6.0;
                assert!((o.get(u, v) - (0.5 * t + 0.5)).abs() < 1e-12);
            }
            assert!((o.get(3, v) - target.get(3, v) / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_render_adds_no_edges() {
        let target = Image::new(4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let o = edge_overlay(&target, &Image::zeros(4, 4)).unwrap();
        assert_eq!(
            o.pixels,
            target.pixels.iter().map(|p| p / 15.0).collect::<Vec<_>>()
        );
        assert!(edge_overlay(&target, &Image::zeros(4, 5)).is_err());
    }
}
