//! MixLD: two-phase blending between the all-focus image and the focal
//! stack, plus geometric augmentation applied identically to every image
//! of a scene.
//!
//! Random draws come from ChaCha8 seeded with
//! `global_seed × 1_000_003 + scene_index` (wrapping). Draw order per scene:
//!
//! 1. `u1 ∈ [0,1)`; FS2AF fires iff `u1 < p_fs2af`, then the slice index is
//!    drawn uniformly from `0..12`.
//! 2. `u2 ∈ [0,1)`; AF2FS fires iff `u2 < p_af2fs`.
//! 3. Geometric draws (always taken, applied only when enabled): flip coin
//!    `u ∈ [0,1)`, quarter turns in `0..4`, crop scale in `[0.8, 1.0]`,
//!    crop top and left fractions in `[0,1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FocalStack, Image, LfScene};
use crate::error::{Error, Result};

pub const SEED_STRIDE: u64 = 1_000_003;

pub fn scene_seed(global_seed: u64, scene_index: u64) -> u64 {
    global_seed.wrapping_mul(SEED_STRIDE).wrapping_add(scene_index)
}

pub fn scene_rng(global_seed: u64, scene_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed(global_seed, scene_index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricFlags {
    pub flip_h: bool,
    pub rotate: bool,
    pub crop: bool,
}

impl Default for GeometricFlags {
    fn default() -> Self {
        GeometricFlags {
            flip_h: true,
            rotate: true,
            crop: true,
        }
    }
}

impl GeometricFlags {
    pub fn none() -> Self {
        GeometricFlags {
            flip_h: false,
            rotate: false,
            crop: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Keep-rate of the all-focus image in FS2AF.
    pub alpha: f64,
    /// Keep-rate of the blended all-focus image in AF2FS.
    pub beta: f64,
    pub p_fs2af: f64,
    pub p_af2fs: f64,
    pub geometric: GeometricFlags,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha: 0.5,
            beta: 0.5,
            p_fs2af: 0.1,
            p_af2fs: 0.5,
            geometric: GeometricFlags::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Both phases disabled, no geometric ops.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_fs2af: 0.0,
            p_af2fs: 0.0,
            geometric: GeometricFlags::none(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("p_fs2af", self.p_fs2af),
            ("p_af2fs", self.p_af2fs),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricTrace {
    pub flip_draw: f64,
    pub flipped: bool,
    /// Clockwise quarter turns actually applied.
    pub quarter_turns: u8,
    pub crop_scale: f64,
    pub crop: Option<CropWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixTrace {
    pub scene_seed: u64,
    pub fs2af_draw: f64,
    pub fs2af_fired: bool,
    pub slice: Option<usize>,
    pub af2fs_draw: f64,
    pub af2fs_fired: bool,
    pub geometric: Option<GeometricTrace>,
}

/// All-focus image and stack after MixLD (and optionally geometric ops).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedScene {
    pub name: String,
    pub af_m: Image,
    pub fs_m: FocalStack,
    pub gt: Image,
    pub trace: MixTrace,
}

impl AugmentedScene {
    /// The identity augmentation of a scene.
    pub fn unaugmented(scene: &LfScene) -> Self {
        AugmentedScene {
            name: scene.name.clone(),
            af_m: scene.af.clone(),
            fs_m: scene.fs.clone(),
            gt: scene.gt.clone(),
            trace: MixTrace {
                scene_seed: 0,
                fs2af_draw: 1.0,
                fs2af_fired: false,
                slice: None,
                af2fs_draw: 1.0,
                af2fs_fired: false,
                geometric: None,
            },
        }
    }

    /// The augmented images as a scene, for writing back to disk.
    pub fn to_scene(&self) -> LfScene {
        LfScene {
            name: self.name.clone(),
            af: self.af_m.clone(),
            fs: self.fs_m.clone(),
            gt: self.gt.clone(),
            source: crate::data::SceneSource::Synthetic,
        }
    }
}

/// FS2AF: `alpha·AF + (1 − alpha)·FS[slice]`. The stack itself is untouched.
pub fn fs2af_blend(scene: &LfScene, alpha: f64, slice_index: usize) -> Result<Image> {
    let slice = scene.fs.slices().get(slice_index).ok_or_else(|| {
        Error::Contract(format!(
            "slice index {slice_index} out of range 0..{}",
            scene.fs.len()
        ))
    })?;
    scene.af.blend(slice, alpha)
}

/// AF2FS: every slice `n` becomes `beta·AF_m + (1 − beta)·FS[n]`.
pub fn af2fs_blend(af_m: &Image, fs: &FocalStack, beta: f64) -> Result<FocalStack> {
    let slices = fs
        .slices()
        .iter()
        .map(|s| {
            af_m.blend(s, beta).map_err(|_| {
                Error::Contract(format!(
                    "AF2FS size mismatch: af {:?} vs slice {:?}",
                    af_m.dims(),
                    s.dims()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(slices)
}

/// Both MixLD phases with their occurrence probabilities; GT passes through.
pub fn apply_mixld(scene: &LfScene, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<AugmentedScene> {
    cfg.validate()?;
    let fs2af_draw: f64 = rng.gen();
    let fs2af_fired = fs2af_draw < cfg.p_fs2af;
    let slice = fs2af_fired.then(|| rng.gen_range(0..scene.fs.len()));
    let af_m = match slice {
        Some(n) => fs2af_blend(scene, cfg.alpha, n)?,
        None => scene.af.clone(),
    };
    let af2fs_draw: f64 = rng.gen();
    let af2fs_fired = af2fs_draw < cfg.p_af2fs;
    let fs_m = if af2fs_fired {
        af2fs_blend(&af_m, &scene.fs, cfg.beta)?
    } else {
        scene.fs.clone()
    };
    Ok(AugmentedScene {
        name: scene.name.clone(),
        af_m,
        fs_m,
        gt: scene.gt.clone(),
        trace: MixTrace {
            scene_seed: 0,
            fs2af_draw,
            fs2af_fired,
            slice,
            af2fs_draw,
            af2fs_fired,
            geometric: None,
        },
    })
}

/// MixLD followed by geometric augmentation, seeded by the scene protocol.
pub fn augment_scene(scene: &LfScene, cfg: &AugmentConfig, scene_index: u64) -> Result<AugmentedScene> {
    let mut rng = scene_rng(cfg.seed, scene_index);
    let mut aug = apply_mixld(scene, cfg, &mut rng)?;
    aug.trace.scene_seed = scene_seed(cfg.seed, scene_index);
    let (mut aug, geo) = apply_geometric(&aug, &cfg.geometric, &mut rng);
    aug.trace.geometric = Some(geo);
    Ok(aug)
}

/// Anything carrying an all-focus image, a focal stack and a GT mask.
pub trait SceneImages: Sized {
    fn parts(&self) -> (&Image, &[Image], &Image);
    fn with_parts(&self, af: Image, fs: Vec<Image>, gt: Image) -> Self;
}

impl SceneImages for LfScene {
    fn parts(&self) -> (&Image, &[Image], &Image) {
        (&self.af, self.fs.slices(), &self.gt)
    }

    fn with_parts(&self, af: Image, fs: Vec<Image>, gt: Image) -> Self {
        LfScene {
            name: self.name.clone(),
            af,
            fs: FocalStack::new(fs).expect("geometric ops keep slices consistent"),
            gt,
            source: self.source,
        }
    }
}

impl SceneImages for AugmentedScene {
    fn parts(&self) -> (&Image, &[Image], &Image) {
        (&self.af_m, self.fs_m.slices(), &self.gt)
    }

    fn with_parts(&self, af: Image, fs: Vec<Image>, gt: Image) -> Self {
        AugmentedScene {
            name: self.name.clone(),
            af_m: af,
            fs_m: FocalStack::new(fs).expect("geometric ops keep slices consistent"),
            gt,
            trace: self.trace.clone(),
        }
    }
}

/// Samples one flip/rotate/crop transform and applies it to the all-focus
/// image, every focal slice and the GT alike. Colour images are resampled
/// bilinearly after cropping, the GT by nearest neighbour.
pub fn apply_geometric<S: SceneImages>(
    scene: &S,
    flags: &GeometricFlags,
    rng: &mut impl Rng,
) -> (S, GeometricTrace) {
    let flip_draw: f64 = rng.gen();
    let turns: u8 = rng.gen_range(0..4);
    let crop_scale: f64 = rng.gen_range(0.8..=1.0);
    let top_frac: f64 = rng.gen();
    let left_frac: f64 = rng.gen();

    let (af, fs, gt) = scene.parts();
    let (h, w) = af.dims();
    let flipped = flags.flip_h && flip_draw < 0.5;
    let quarter_turns = if !flags.rotate || (h != w && turns % 2 == 1) {
        0
    } else {
        turns
    };
    let crop = flags.crop.then(|| {
        let height = ((crop_scale * h as f64).round() as usize).clamp(1, h);
        let width = ((crop_scale * w as f64).round() as usize).clamp(1, w);
        let top = ((top_frac * (h - height + 1) as f64) as usize).min(h - height);
        let left = ((left_frac * (w - width + 1) as f64) as usize).min(w - width);
        CropWindow {
            top,
            left,
            height,
            width,
        }
    });
    let trace = GeometricTrace {
        flip_draw,
        flipped,
        quarter_turns,
        crop_scale,
        crop,
    };
    let transform = |img: &Image, nearest: bool| -> Image {
        let mut out = if flipped {
            img.remap(h, w, |y, x| (y, w - 1 - x))
        } else {
            img.clone()
        };
        for _ in 0..quarter_turns {
            let (ih, iw) = out.dims();
            // Clockwise: dst(y, x) = src(ih − 1 − x, y), output iw×ih.
            out = out.remap(iw, ih, |y, x| (ih - 1 - x, y));
        }
        if let Some(c) = crop {
            if (c.height, c.width) != (h, w) {
                let cropped = out.remap(c.height, c.width, |y, x| (y + c.top, x + c.left));
                out = if nearest {
                    cropped.resize_nearest(h, w)
                } else {
                    cropped.resize_bilinear(h, w)
                };
            }
        }
        out
    };
    let out = scene.with_parts(
        transform(af, false),
        fs.iter().map(|s| transform(s, false)).collect(),
        transform(gt, true),
    );
    (out, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneSource, STACK_SIZE};

    fn scene() -> LfScene {
        let af = Image::from_fn(3, 4, 4, |c, y, x| ((c + 2 * y + x) % 5) as f64 / 4.0).unwrap();
        let slices = (0..STACK_SIZE)
            .map(|n| Image::from_fn(3, 4, 4, |c, y, x| ((n + c * y + x) % 9) as f64 / 8.0).unwrap())
            .collect();
        LfScene {
            name: "toy".into(),
            af,
            fs: FocalStack::new(slices).unwrap(),
            gt: Image::from_fn(1, 4, 4, |_, y, _| (y < 2) as u8 as f64).unwrap(),
            source: SceneSource::Synthetic,
        }
    }

    #[test]
    fn alpha_one_keeps_af_and_zero_takes_slice() {
        let s = scene();
        assert_eq!(fs2af_blend(&s, 1.0, 3).unwrap(), s.af);
        assert_eq!(fs2af_blend(&s, 0.0, 3).unwrap(), s.fs.slices()[3]);
    }

    #[test]
    fn half_blend_arithmetic() {
        let a = Image::filled(3, 1, 1, 0.4).unwrap();
        let b = Image::filled(3, 1, 1, 0.8).unwrap();
        for &v in a.blend(&b, 0.5).unwrap().pixels() {
            assert!((v - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn slice_index_out_of_range() {
        assert!(matches!(fs2af_blend(&scene(), 0.5, 12), Err(Error::Contract(_))));
    }

    #[test]
    fn beta_extremes() {
        let s = scene();
        assert_eq!(af2fs_blend(&s.af, &s.fs, 0.0).unwrap(), s.fs);
        let all_af = af2fs_blend(&s.af, &s.fs, 1.0).unwrap();
        assert!(all_af.slices().iter().all(|sl| *sl == s.af));
    }

    #[test]
    fn af2fs_size_mismatch() {
        let s = scene();
        let small = Image::filled(3, 2, 2, 0.5).unwrap();
        assert!(matches!(af2fs_blend(&small, &s.fs, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn disabled_config_is_identity() {
        let s = scene();
        let mut rng = scene_rng(3, 0);
        let aug = apply_mixld(&s, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(aug.af_m, s.af);
        assert_eq!(aug.fs_m, s.fs);
        assert_eq!(aug.gt, s.gt);
        assert!(!aug.trace.fs2af_fired && !aug.trace.af2fs_fired);
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = AugmentConfig {
            p_af2fs: 1.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_protocol() {
        assert_eq!(scene_seed(2, 5), 2_000_011);
    }
}
