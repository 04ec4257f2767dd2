//! Shared-weight four-stage encoder. The all-focus image and every focal
//! slice run through one parameter set.
//!
//! Each stage is a strided patch-embedding convolution (kernel = stride)
//! followed by `blocks_per_stage` residual blocks
//! `x + silu(norm(conv3x3(x)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_strides: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [64, 128, 320, 512],
            stage_strides: [4, 2, 2, 2],
            blocks_per_stage: 1,
            input_size: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("encoder.blocks_per_stage must be ≥ 1".into()));
        }
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::Config("encoder channels and strides must be positive".into()));
        }
        let mut size = self.input_size;
        for (l, &s) in self.stage_strides.iter().enumerate() {
            if !size.is_multiple_of(s) || size / s == 0 {
                return Err(Error::Config(format!(
                    "input size {} does not divide down through stride {s} at stage {}",
                    self.input_size,
                    l + 1
                )));
            }
            size /= s;
        }
        Ok(())
    }

    /// Spatial side length of stage `l` (0-based).
    pub fn stage_size(&self, l: usize) -> usize {
        self.input_size / self.stage_strides[..=l].iter().product::<usize>()
    }

    /// Expected `C×H×W` shape of every stage.
    pub fn stage_shapes(&self) -> [[usize; 3]; NUM_STAGES] {
        std::array::from_fn(|l| {
            let s = self.stage_size(l);
            [self.stage_channels[l], s, s]
        })
    }
}

/// Four stage features of one image, as graph nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub f: Vec<Var>,
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph) -> Vec<Vec<usize>> {
        self.f.iter().map(|&v| g.shape(v).to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// Registers `name.weight` (`c_out×c_in×k×k`, uniform in `±sqrt(3/fan_in)`)
    /// and a zero `name.bias`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound));
        ConvParams {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, stride, pad)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub conv: ConvParams,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub embed: ConvParams,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stages: Vec<StageParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for l in 0..NUM_STAGES {
            let c = cfg.stage_channels[l];
            let prefix = format!("encoder.stage{}", l + 1);
            let embed = ConvParams::init(store, rng, &format!("{prefix}.embed"), c_in, c, cfg.stage_strides[l]);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let name = format!("{prefix}.block{}", b + 1);
                    BlockParams {
                        conv: ConvParams::init(store, rng, &format!("{name}.conv"), c, c, 3),
                        norm_scale: store.add(format!("{name}.norm.scale"), Tensor::full(&[c], 1.0)),
                        norm_shift: store.add(format!("{name}.norm.shift"), Tensor::zeros(&[c])),
                    }
                })
                .collect();
            stages.push(StageParams { embed, blocks });
            c_in = c;
        }
        Ok(EncoderParams { stages })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.extend(s.embed.ids());
            for b in &s.blocks {
                ids.extend(b.conv.ids());
                ids.push(b.norm_scale);
                ids.push(b.norm_shift);
            }
        }
        ids
    }
}

/// Runs one `3×input_size×input_size` image node through all four stages.
pub fn encode_image(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    img: Var,
) -> Result<FeaturePyramid> {
    let expected = [3, cfg.input_size, cfg.input_size];
    if g.shape(img) != expected {
        return Err(Error::Contract(format!(
            "encoder input must be {expected:?}, got {:?}",
            g.shape(img)
        )));
    }
    let mut x = img;
    let mut f = Vec::with_capacity(NUM_STAGES);
    for (l, stage) in params.stages.iter().enumerate() {
        x = stage.embed.apply(g, store, x, cfg.stage_strides[l], 0)?;
        for block in &stage.blocks {
            let y = block.conv.apply(g, store, x, 1, 1)?;
            let scale = g.param(store, block.norm_scale);
            let shift = g.param(store, block.norm_shift);
            let y = g.channel_norm(y, scale, shift)?;
            let y = g.silu(y);
            x = g.add(x, y)?;
        }
        f.push(x);
    }
    Ok(FeaturePyramid { f })
}

/// Encodes the all-focus image and every focal slice with the same
/// parameters. Images that are pixel-identical to an earlier one share its
/// pyramid, so duplicated slices are encoded once; gradients then
/// accumulate through every use.
pub fn encode_scene(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    af: &Image,
    fs: &[Image],
) -> Result<(FeaturePyramid, Vec<FeaturePyramid>)> {
    let images: Vec<&Image> = std::iter::once(af).chain(fs).collect();
    let mut pyrs: Vec<FeaturePyramid> = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let pyr = match images[..i].iter().position(|prev| prev == img) {
            Some(j) => pyrs[j].clone(),
            None => {
                let x = g.constant(img.to_tensor());
                encode_image(g, store, params, cfg, x)?
            }
        };
        pyrs.push(pyr);
    }
    let fs_pyrs = pyrs.split_off(1);
    let af_pyr = pyrs.pop().expect("all-focus pyramid");
    Ok((af_pyr, fs_pyrs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            stage_channels: [4, 6, 8, 10],
            stage_strides: [4, 2, 2, 2],
            blocks_per_stage: 1,
            input_size: 32,
        }
    }

    #[test]
    fn stage_shapes_follow_strides() {
        assert_eq!(
            EncoderConfig::default().stage_shapes(),
            [[64, 64, 64], [128, 32, 32], [320, 16, 16], [512, 8, 8]]
        );
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = EncoderConfig {
            input_size: 60,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_names_are_prefixed() {
        let mut store = ParamStore::new();
        EncoderParams::init(&tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.iter().all(|(_, p)| p.name.starts_with("encoder.stage")));
        assert!(store.find("encoder.stage2.block1.norm.scale").is_some());
    }

    #[test]
    fn wrong_input_is_contract_error() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 32, 32]));
        assert!(matches!(encode_image(&mut g, &store, &p, &cfg, x), Err(Error::Contract(_))));
    }
}
