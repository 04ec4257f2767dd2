//! Pixel-domain histograms of all-focus and focal images before and after
//! MixLD.

use serde::{Deserialize, Serialize};

use crate::data::pnm::to_byte;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::mixld::AugmentedScene;
use crate::data::LfScene;

pub const PIXEL_BINS: usize = 256;
pub const DIFF_BINS: usize = 511;
/// Index of the zero difference in a difference histogram.
pub const DIFF_ZERO: usize = 255;

/// Counts of `round(p·255)` over all channels.
pub fn pixel_histogram(img: &Image) -> Vec<u64> {
    let mut bins = vec![0u64; PIXEL_BINS];
    for &p in img.pixels() {
        bins[to_byte(p) as usize] += 1;
    }
    bins
}

/// Counts of `round((a − b)·255)`; bin `d + 255` holds difference `d`.
pub fn difference_histogram(a: &Image, b: &Image) -> Result<Vec<u64>> {
    if a.channels() != b.channels() || a.dims() != b.dims() {
        return Err(Error::Dimension {
            op: "difference_histogram",
            lhs: vec![a.channels(), a.height(), a.width()],
            rhs: vec![b.channels(), b.height(), b.width()],
        });
    }
    let mut bins = vec![0u64; DIFF_BINS];
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let d = ((x - y) * 255.0).round().clamp(-255.0, 255.0) as i64;
        bins[(d + DIFF_ZERO as i64) as usize] += 1;
    }
    Ok(bins)
}

/// Largest `|d|` with a nonzero count.
pub fn difference_support(bins: &[u64]) -> usize {
    bins.iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i.abs_diff(DIFF_ZERO))
        .max()
        .unwrap_or(0)
}

fn add_into(acc: &mut [u64], bins: &[u64]) {
    acc.iter_mut().zip(bins).for_each(|(a, b)| *a += b);
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub images: usize,
    pub af: Vec<u64>,
    pub fs_mean: Vec<u64>,
    pub af_m: Vec<u64>,
    pub fs_m_mean: Vec<u64>,
    /// All-focus minus every slice, before MixLD.
    pub diff_before: Vec<u64>,
    /// Blended all-focus minus every blended slice.
    pub diff_after: Vec<u64>,
}

/// Pixel-wise mean of a set of equally sized images.
fn mean_image(images: &[Image]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("mean of an empty image set".into()))?;
    let n = images.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for img in images {
        acc.iter_mut().zip(img.pixels()).for_each(|(a, p)| *a += p);
    }
    Image::new(
        first.channels(),
        first.height(),
        first.width(),
        acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect(),
    )
}

impl HistogramReport {
    pub fn new() -> Self {
        HistogramReport {
            images: 0,
            af: vec![0; PIXEL_BINS],
            fs_mean: vec![0; PIXEL_BINS],
            af_m: vec![0; PIXEL_BINS],
            fs_m_mean: vec![0; PIXEL_BINS],
            diff_before: vec![0; DIFF_BINS],
            diff_after: vec![0; DIFF_BINS],
        }
    }

    /// Accumulates one scene and its augmented version.
    pub fn add(&mut self, scene: &LfScene, aug: &AugmentedScene) -> Result<()> {
        add_into(&mut self.af, &pixel_histogram(&scene.af));
        add_into(&mut self.fs_mean, &pixel_histogram(&mean_image(scene.fs.slices())?));
        add_into(&mut self.af_m, &pixel_histogram(&aug.af_m));
        add_into(&mut self.fs_m_mean, &pixel_histogram(&mean_image(aug.fs_m.slices())?));
        for s in scene.fs.slices() {
            add_into(&mut self.diff_before, &difference_histogram(&scene.af, s)?);
        }
        for s in aug.fs_m.slices() {
            add_into(&mut self.diff_after, &difference_histogram(&aug.af_m, s)?);
        }
        self.images += 1;
        Ok(())
    }
}
