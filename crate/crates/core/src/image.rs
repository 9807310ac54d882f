//! Per-pixel render buffers.

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Row-major image with rgb, mask and optional depth and normal channels.
/// Pixel `(x, y)` lives at index `y * width + x`; `rgb` and `normal` hold
/// three interleaved values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    /// z-depth, 0 on background.
    pub depth: Option<Vec<f64>>,
    /// World-space unit normal, zero on background.
    pub normal: Option<Vec<f64>>,
}

impl ImageBuffer {
    /// White background, empty mask, depth and normal present and zero.
    pub fn background(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: vec![1.0; 3 * n],
            mask: vec![0.0; n],
            depth: Some(vec![0.0; n]),
            normal: Some(vec![0.0; 3 * n]),
        }
    }

    /// A buffer filled with one rgb value and no geometric channels.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: rgb.iter().copied().cycle().take(3 * n).collect(),
            mask: vec![0.0; n],
            depth: None,
            normal: None,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * self.index(x, y);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn normal_at(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = 3 * self.index(x, y);
        self.normal
            .as_ref()
            .map(|n| Vec3::new(n[i], n[i + 1], n[i + 2]))
    }

    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.depth.as_ref().map(|d| d[i])
    }

    pub fn same_size(&self, o: &ImageBuffer) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, o.width, o.height
            )));
        }
        Ok(())
    }

    /// Copies out the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, rect: Rect) -> Result<ImageBuffer> {
        rect.check(self.width, self.height)?;
        let pick = |src: &[f64], k: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rect.width * rect.height * k);
            for y in rect.y..rect.y + rect.height {
                let row = (y * self.width + rect.x) * k;
                out.extend_from_slice(&src[row..row + rect.width * k]);
            }
            out
        };
        Ok(ImageBuffer {
            width: rect.width,
            height: rect.height,
            rgb: pick(&self.rgb, 3),
            mask: pick(&self.mask, 1),
            depth: self.depth.as_deref().map(|d| pick(d, 1)),
            normal: self.normal.as_deref().map(|n| pick(n, 3)),
        })
    }

    /// The listed pixels as a `pixels.len()` by 1 buffer.
    pub fn gather(&self, pixels: &[(usize, usize)]) -> Result<ImageBuffer> {
        if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= self.width || y >= self.height) {
            return Err(Error::InvalidArgument(format!(
                "pixel ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let idx: Vec<usize> = pixels.iter().map(|&(x, y)| self.index(x, y)).collect();
        let pick = |src: &[f64], k: usize| -> Vec<f64> { idx.iter().flat_map(|&i| src[k * i..k * i + k].iter().copied()).collect() };
        Ok(ImageBuffer {
            width: pixels.len(),
            height: 1,
            rgb: pick(&self.rgb, 3),
            mask: pick(&self.mask, 1),
            depth: self.depth.as_deref().map(|d| pick(d, 1)),
            normal: self.normal.as_deref().map(|n| pick(n, 3)),
        })
    }

    /// Writes `patch` into this buffer at `(rect.x, rect.y)`.
    pub fn paste(&mut self, rect: Rect, patch: &ImageBuffer) -> Result<()> {
        rect.check(self.width, self.height)?;
        if patch.width != rect.width || patch.height != rect.height {
            return Err(Error::DimensionMismatch("patch does not match rectangle".into()));
        }
        let w = self.width;
        let put = |dst: &mut [f64], src: &[f64], k: usize| {
            for py in 0..rect.height {
                let d = ((rect.y + py) * w + rect.x) * k;
                let s = py * rect.width * k;
                dst[d..d + rect.width * k].copy_from_slice(&src[s..s + rect.width * k]);
            }
        };
        put(&mut self.rgb, &patch.rgb, 3);
        put(&mut self.mask, &patch.mask, 1);
        if let (Some(d), Some(s)) = (self.depth.as_mut(), patch.depth.as_ref()) {
            put(d, s, 1);
        }
        if let (Some(d), Some(s)) = (self.normal.as_mut(), patch.normal.as_ref()) {
            put(d, s, 3);
        }
        Ok(())
    }
}

/// Pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x: 0, y: 0, width, height }
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x + self.width > width || self.y + self.height > height {
            return Err(Error::InvalidArgument(format!(
                "patch {self:?} outside {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.height).flat_map(move |y| (self.x..self.x + self.width).map(move |x| (x, y)))
    }
}
