use crate::error::{Error, Result};

/// A single `channels × height × width` sample, nominally in `[0, 1]`.
///
/// Mixing operators may push values outside the nominal range; nothing here
/// clamps implicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![channels, height, width],
                rhs: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    /// Builds an image from a per-pixel function `f(c, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut pixels = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            pixels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: vec![self.channels, self.height, self.width],
                rhs: vec![other.channels, other.height, other.width],
            })
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Copy clamped to `[0, 1]`, for rendering only.
    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Bilinear sample at fractional coordinates; zero outside the image.
    pub(crate) fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| -> f32 {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                0.0
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize (pixel-center aligned, edge-clamped).
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let clamp = |v: f32, hi: usize| v.clamp(0.0, (hi - 1) as f32);
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            let src_y = clamp((y as f32 + 0.5) * sy - 0.5, self.height);
            let src_x = clamp((x as f32 + 0.5) * sx - 0.5, self.width);
            let (y0, x0) = (src_y.floor() as usize, src_x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (src_y - y0 as f32, src_x - x0 as f32);
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        }))
    }
}
