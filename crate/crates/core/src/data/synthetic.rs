//! Procedural light-field scenes: bright shapes at discrete depth bands on a
//! dim textured background, with a focal stack simulated by depth-dependent
//! box blur of the all-focus render.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{normalize_stack, FocalStack, LfScene, SceneSource};
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rect,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
    depth: usize,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

/// Blur radius in pixels per band of defocus.
pub fn blur_per_band(size: usize) -> usize {
    (size / 64).max(1)
}

/// Box-blur radius of a pixel at `depth` in the slice focused on band `slice`.
pub fn blur_radius(size: usize, depth: usize, slice: usize) -> usize {
    blur_per_band(size) * depth.abs_diff(slice)
}

/// Renders a deterministic scene. Shapes occupy distinct depth bands when
/// `num_shapes <= num_slices`; the background sits one band behind the
/// farthest slice. The GT is the union of all shape masks.
pub fn generate_synthetic_scene(
    seed: u64,
    size: usize,
    num_slices: usize,
    num_shapes: usize,
) -> Result<LfScene> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic scene size must be ≥ 16, got {size}")));
    }
    if num_slices == 0 {
        return Err(Error::Config("synthetic scene needs at least one slice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;

    // Background: tinted low-contrast sinusoid plus noise.
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.12..0.32));
    let (fy, fx) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut color = vec![[0.0; 3]; n];
    for y in 0..size {
        for x in 0..size {
            let wave = 0.06 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for (c, t) in tint.iter().enumerate() {
                color[y * size + x][c] = (t + wave + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }

    let depths: Vec<usize> = if num_shapes <= num_slices {
        sample(&mut rng, num_slices, num_shapes).into_vec()
    } else {
        (0..num_shapes).map(|_| rng.gen_range(0..num_slices)).collect()
    };
    let s = size as f64;
    let mut shapes: Vec<Shape> = depths
        .into_iter()
        .map(|depth| Shape {
            kind: if rng.gen_bool(0.5) {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Rect
            },
            cy: rng.gen_range(0.2 * s..0.8 * s),
            cx: rng.gen_range(0.2 * s..0.8 * s),
            ry: rng.gen_range(0.08 * s..0.2 * s),
            rx: rng.gen_range(0.08 * s..0.2 * s),
            color: std::array::from_fn(|_| rng.gen_range(0.6..0.95)),
            depth,
        })
        .collect();
    // Paint far to near so nearer shapes occlude.
    shapes.sort_by(|a, b| b.depth.cmp(&a.depth));

    let mut depth_map = vec![num_slices; n];
    let mut gt = vec![0.0; n];
    for shape in &shapes {
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y, x) {
                    let i = y * size + x;
                    for c in 0..3 {
                        color[i][c] = (shape.color[c] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                    }
                    depth_map[i] = shape.depth;
                    gt[i] = 1.0;
                }
            }
        }
    }

    let af = Image::from_fn(3, size, size, |c, y, x| color[y * size + x][c])?;
    let tables: Vec<SummedArea> = (0..3).map(|c| SummedArea::new(&af, c)).collect();
    let slices = (0..num_slices)
        .map(|band| {
            Image::from_fn(3, size, size, |c, y, x| {
                match blur_radius(size, depth_map[y * size + x], band) {
                    0 => af.get(c, y, x),
                    r => tables[c].box_mean(y, x, r),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fs = normalize_stack(&FocalStack::new(slices)?)?;
    Ok(LfScene {
        name: format!("synthetic_{seed:06}"),
        af,
        fs,
        gt: Image::new(1, size, size, gt)?,
        source: SceneSource::Synthetic,
    })
}

/// Integral image of one channel for O(1) box means.
struct SummedArea {
    h: usize,
    w: usize,
    table: Vec<f64>,
}

impl SummedArea {
    fn new(img: &Image, c: usize) -> Self {
        let (h, w) = img.dims();
        let mut table = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += img.get(c, y, x);
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        SummedArea { h, w, table }
    }

    /// Mean over the `(2r+1)²` window clipped to the image.
    fn box_mean(&self, y: usize, x: usize, r: usize) -> f64 {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(self.h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(self.w));
        let at = |yy: usize, xx: usize| self.table[yy * (self.w + 1) + xx];
        let sum = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
        (sum / ((y1 - y0) * (x1 - x0)) as f64).clamp(0.0, 1.0)
    }
}
