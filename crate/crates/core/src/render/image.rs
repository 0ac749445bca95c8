use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

/// A single-channel image, row-major: `pixels[v * width + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub intrinsics: Option<Intrinsics>,
    pub pose: Option<Pose>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("image contains non-finite pixels".into()));
        }
        Ok(Image {
            height,
            width,
            pixels,
            intrinsics: None,
            pose: None,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
            intrinsics: None,
            pose: None,
        }
    }

    pub fn with_intrinsics(mut self, k: Intrinsics) -> Self {
        self.intrinsics = Some(k);
        self
    }

    pub fn with_pose(mut self, p: Pose) -> Self {
        self.pose = Some(p);
        self
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.pixels[v * self.width + u]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }

    /// Average pooling over `factor × factor` blocks. Trailing rows and
    /// columns that do not fill a block are dropped, matching
    /// [`Intrinsics::downsample`].
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "factor {factor} exceeds image size {}x{}",
                self.height, self.width
            )));
        }
        let norm = 1.0 / (factor * factor) as f64;
        let mut pixels = vec![0.0; h * w];
        for (v, row) in pixels.chunks_mut(w).enumerate() {
            for (u, out) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for dv in 0..factor {
                    let base = (v * factor + dv) * self.width + u * factor;
                    s += self.pixels[base..base + factor].iter().sum::<f64>();
                }
                *out = s * norm;
            }
        }
        let intrinsics = match self.intrinsics {
            Some(k) => Some(k.downsample(factor)?),
            None => None,
        };
        Ok(Image {
            height: h,
            width: w,
            pixels,
            intrinsics,
            pose: self.pose,
        })
    }
}
