use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Planar (`C×H×W`) image with 1 or 3 channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Contract("image must be at least 1×1".into()));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "image",
                lhs: vec![channels, height, width],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, pixels)
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.pixels.clone(),
        )
        .expect("image invariants imply a valid tensor")
    }

    /// Builds an image from a `C×H×W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Pointwise convex combination `keep·self + (1 − keep)·other`.
    pub fn blend(&self, other: &Image, keep: f64) -> Result<Image> {
        if self.channels != other.channels || self.dims() != other.dims() {
            return Err(Error::Dimension {
                op: "blend",
                lhs: vec![self.channels, self.height, self.width],
                rhs: vec![other.channels, other.height, other.width],
            });
        }
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| (keep * a + (1.0 - keep) * b).clamp(0.0, 1.0))
            .collect();
        Ok(Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
        })
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        let pixels = kernels::bilinear_resize(
            &self.pixels,
            self.channels,
            self.height,
            self.width,
            h,
            w,
        );
        Image {
            channels: self.channels,
            height: h,
            width: w,
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Image {
        Image {
            channels: self.channels,
            height: h,
            width: w,
            pixels: kernels::nearest_resize(
                &self.pixels,
                self.channels,
                self.height,
                self.width,
                h,
                w,
            ),
        }
    }

    /// Thresholds every value at 0.5 (inclusive) to `{0, 1}`.
    pub fn binarized(&self) -> Image {
        Image {
            pixels: self
                .pixels
                .iter()
                .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone()
        }
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Applies a pixel-coordinate map `dst(y, x) = src(f(y, x))` to every
    /// channel, producing an `out_h × out_w` image.
    pub fn remap(&self, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut pixels = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            for y in 0..out_h {
                for x in 0..out_w {
                    let (sy, sx) = f(y, x);
                    pixels.push(self.get(c, sy, sx));
                }
            }
        }
        Image {
            channels: self.channels,
            height: out_h,
            width: out_w,
            pixels,
        }
    }
}
