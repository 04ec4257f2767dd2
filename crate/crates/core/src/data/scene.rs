use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{decode_image, encode_image};
use super::Image;
use crate::error::{Error, Result};

/// Number of focal slices every scene carries after normalisation.
pub const STACK_SIZE: usize = 12;

/// Ordered focal slices, all 3-channel and of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStack {
    slices: Vec<Image>,
}

impl FocalStack {
    pub fn new(slices: Vec<Image>) -> Result<Self> {
        if let Some(first) = slices.first() {
            for s in &slices {
                if s.channels() != 3 || s.dims() != first.dims() {
                    return Err(Error::Contract(format!(
                        "focal slices must be 3-channel and {}×{}",
                        first.height(),
                        first.width()
                    )));
                }
            }
        }
        Ok(FocalStack { slices })
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn into_slices(self) -> Vec<Image> {
        self.slices
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneSource {
    Loaded,
    Synthetic,
}

/// One light-field sample: all-focus image, 12-slice focal stack and a
/// binary ground-truth mask, all at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LfScene {
    pub name: String,
    pub af: Image,
    pub fs: FocalStack,
    pub gt: Image,
    pub source: SceneSource,
}

impl LfScene {
    /// Checks channel counts, shared resolution, stack size and binary GT.
    pub fn validate(&self) -> Result<()> {
        let err = |file: &str, msg: String| Error::Scene {
            scene: self.name.clone(),
            file: file.into(),
            msg,
        };
        if self.af.channels() != 3 {
            return Err(err("af", "all-focus image must have 3 channels".into()));
        }
        if self.gt.channels() != 1 {
            return Err(err("gt", "ground truth must have 1 channel".into()));
        }
        if self.gt.dims() != self.af.dims() {
            return Err(err(
                "gt",
                format!("size {:?} differs from af {:?}", self.gt.dims(), self.af.dims()),
            ));
        }
        if !self.gt.is_binary() {
            return Err(err("gt", "ground truth is not binary".into()));
        }
        if self.fs.len() != STACK_SIZE {
            return Err(err("fs", format!("expected {STACK_SIZE} slices, got {}", self.fs.len())));
        }
        if let Some(s) = self.fs.slices().first() {
            if s.dims() != self.af.dims() {
                return Err(err(
                    "fs",
                    format!("slice size {:?} differs from af {:?}", s.dims(), self.af.dims()),
                ));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        self.af.dims()
    }

    /// Resizes every image to `size×size`: bilinear for colour, nearest for GT.
    pub fn resized(&self, size: usize) -> LfScene {
        if self.size() == (size, size) {
            return self.clone();
        }
        LfScene {
            name: self.name.clone(),
            af: self.af.resize_bilinear(size, size),
            fs: FocalStack {
                slices: self
                    .fs
                    .slices()
                    .iter()
                    .map(|s| s.resize_bilinear(size, size))
                    .collect(),
            },
            gt: self.gt.resize_nearest(size, size),
            source: self.source,
        }
    }
}

/// Output slice `i` is input slice `i mod k`; stacks longer than 12 keep
/// their first 12 slices.
pub fn normalize_stack(fs: &FocalStack) -> Result<FocalStack> {
    let k = fs.len();
    if k == 0 {
        return Err(Error::Scene {
            scene: String::new(),
            file: "fs".into(),
            msg: "focal stack is empty".into(),
        });
    }
    Ok(FocalStack {
        slices: (0..STACK_SIZE).map(|i| fs.slices[i % k].clone()).collect(),
    })
}

fn slice_file_name(i: usize) -> String {
    format!("slice_{i:02}.ppm")
}

fn read_image(scene: &str, path: &Path) -> Result<Image> {
    let file = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::Scene {
        scene: scene.into(),
        file: file.clone(),
        msg: e.to_string(),
    })?;
    decode_image(&bytes).map_err(|e| Error::Scene {
        scene: scene.into(),
        file,
        msg: e.to_string(),
    })
}

/// Loads `<dir>/af.ppm`, `<dir>/gt.pgm` and `<dir>/fs/slice_00.ppm …`
/// (contiguous from 00). The stack is normalised to 12 slices and the GT
/// binarised at 0.5. With `size`, scenes of another resolution are resized.
pub fn load_scene(dir: &Path, size: Option<usize>) -> Result<LfScene> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let af = read_image(&name, &dir.join("af.ppm"))?;
    let gt = read_image(&name, &dir.join("gt.pgm"))?;
    let scene_err = |file: &str, msg: String| Error::Scene {
        scene: name.clone(),
        file: file.into(),
        msg,
    };
    if af.channels() != 3 {
        return Err(scene_err("af.ppm", "expected a P6 colour image".into()));
    }
    if gt.channels() != 1 {
        return Err(scene_err("gt.pgm", "expected a P5 grayscale image".into()));
    }
    if gt.dims() != af.dims() {
        return Err(scene_err(
            "gt.pgm",
            format!(
                "dimension mismatch: gt {}×{} vs af {}×{}",
                gt.height(),
                gt.width(),
                af.height(),
                af.width()
            ),
        ));
    }
    let mut slices = Vec::new();
    loop {
        let path = dir.join("fs").join(slice_file_name(slices.len()));
        if !path.is_file() {
            break;
        }
        let img = read_image(&name, &path)?;
        let file = format!("fs/{}", slice_file_name(slices.len()));
        if img.channels() != 3 {
            return Err(scene_err(&file, "expected a P6 colour image".into()));
        }
        if img.dims() != af.dims() {
            return Err(scene_err(
                &file,
                format!(
                    "dimension mismatch: slice {}×{} vs af {}×{}",
                    img.height(),
                    img.width(),
                    af.height(),
                    af.width()
                ),
            ));
        }
        slices.push(img);
    }
    if slices.is_empty() {
        return Err(scene_err("fs/slice_00.ppm", "scene has zero focal slices".into()));
    }
    let fs = normalize_stack(&FocalStack { slices })?;
    let scene = LfScene {
        name: name.clone(),
        af,
        fs,
        gt: gt.binarized(),
        source: SceneSource::Loaded,
    };
    Ok(match size {
        Some(s) => scene.resized(s),
        None => scene,
    })
}

/// Writes a scene in the directory layout read by [`load_scene`].
pub fn write_scene(root: &Path, scene: &LfScene) -> Result<PathBuf> {
    let dir = root.join(&scene.name);
    let fs_dir = dir.join("fs");
    fs::create_dir_all(&fs_dir).map_err(|e| Error::io(&fs_dir, e))?;
    let write = |path: PathBuf, img: &Image| -> Result<()> {
        fs::write(&path, encode_image(img)).map_err(|e| Error::io(path, e))
    };
    write(dir.join("af.ppm"), &scene.af)?;
    write(dir.join("gt.pgm"), &scene.gt)?;
    for (i, s) in scene.fs.slices().iter().enumerate() {
        write(fs_dir.join(slice_file_name(i)), s)?;
    }
    Ok(dir)
}

/// Loads every scene directory under `root`, sorted by name.
pub fn load_dataset(root: &Path, size: Option<usize>) -> Result<Vec<LfScene>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("af.ppm").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_scene(d, size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(k: usize) -> FocalStack {
        FocalStack::new(
            (0..k)
                .map(|i| Image::filled(3, 2, 2, i as f64 / 20.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn order(fs: &FocalStack) -> Vec<usize> {
        fs.slices()
            .iter()
            .map(|s| (s.get(0, 0, 0) * 20.0).round() as usize)
            .collect()
    }

    #[test]
    fn twelve_slices_unchanged() {
        let s = stack(12);
        assert_eq!(normalize_stack(&s).unwrap(), s);
    }

    #[test]
    fn single_slice_repeats() {
        assert_eq!(order(&normalize_stack(&stack(1)).unwrap()), vec![0; 12]);
    }

    #[test]
    fn five_slices_cycle_in_order() {
        let expected: Vec<usize> = (0..12).map(|i| i % 5).collect();
        assert_eq!(expected, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]);
        assert_eq!(order(&normalize_stack(&stack(5)).unwrap()), expected);
    }

    #[test]
    fn long_stacks_truncate() {
        assert_eq!(order(&normalize_stack(&stack(15)).unwrap()), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn empty_stack_is_scene_error() {
        assert!(matches!(
            normalize_stack(&FocalStack::new(vec![]).unwrap()),
            Err(Error::Scene { .. })
        ));
    }
}
