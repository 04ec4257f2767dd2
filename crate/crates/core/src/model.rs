//! The full network: shared encoder, information aggregation, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, LfScene};
use crate::decoder::{decode_pyramid, DecoderOutput, DecoderParams};
use crate::encoder::{encode_scene, EncoderConfig, EncoderParams, FeaturePyramid};
use crate::error::{Error, Result};
use crate::ia::{fuse_pyramids, IaConfig, IaStageParams};
use crate::mixld::AugmentedScene;
use crate::tensor::{Graph, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ia: IaConfig,
    /// When false the focal stack is ignored and the all-focus features go
    /// straight to the decoder.
    pub use_focal_stack: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            ia: IaConfig::default(),
            use_focal_stack: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ia.validate(&self.encoder.stage_channels)
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub af_pyramid: FeaturePyramid,
    pub fs_pyramids: Vec<FeaturePyramid>,
    pub fused: FeaturePyramid,
    pub decoded: DecoderOutput,
}

pub struct LfTracy {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub ia: Vec<IaStageParams>,
    pub decoder: DecoderParams,
}

impl LfTracy {
    /// Builds and seeds every parameter. Registration order, and hence the
    /// checkpoint layout, is encoder, attention stages, decoder, head.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&cfg.encoder, &mut store, &mut rng)?;
        let ia = cfg
            .encoder
            .stage_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| IaStageParams::init(&cfg.ia, l + 1, c, &mut store, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams::init(&cfg.encoder, &mut store, &mut rng);
        Ok(LfTracy {
            cfg,
            store,
            encoder,
            ia,
            decoder,
        })
    }

    /// Named parameter groups: encoder, the three attention projections,
    /// the slice weights, decoder and head.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let collect = |f: fn(&IaStageParams) -> Vec<ParamId>| self.ia.iter().flat_map(f).collect::<Vec<_>>();
        vec![
            ("encoder", self.encoder.ids()),
            ("ia.conv_q", collect(|p| p.conv_q.ids().to_vec())),
            ("ia.conv_k", collect(|p| p.conv_k.ids().to_vec())),
            ("ia.conv_v", collect(|p| p.conv_v.ids().to_vec())),
            ("ia.sigma", collect(|p| vec![p.sigma])),
            ("decoder", self.decoder.decoder_ids()),
            ("head", self.decoder.head_ids()),
        ]
    }

    pub fn forward_images(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        af: &Image,
        fs: &[Image],
        training: bool,
    ) -> Result<ForwardOutput> {
        let size = self.cfg.encoder.input_size;
        if af.dims() != (size, size) {
            return Err(Error::Contract(format!(
                "scene is {}×{}, model expects {size}×{size}",
                af.height(),
                af.width()
            )));
        }
        let fs = if self.cfg.use_focal_stack {
            if fs.len() != self.cfg.ia.num_slices {
                return Err(Error::Contract(format!(
                    "model expects {} focal slices, got {}",
                    self.cfg.ia.num_slices,
                    fs.len()
                )));
            }
            fs
        } else {
            &[]
        };
        let (af_pyramid, fs_pyramids) = encode_scene(g, store, &self.encoder, &self.cfg.encoder, af, fs)?;
        let fused = if self.cfg.use_focal_stack {
            fuse_pyramids(g, store, &self.ia, &self.cfg.ia, &af_pyramid, &fs_pyramids)?
        } else {
            af_pyramid.clone()
        };
        let decoded = decode_pyramid(g, store, &self.decoder, &fused, size, training)?;
        Ok(ForwardOutput {
            af_pyramid,
            fs_pyramids,
            fused,
            decoded,
        })
    }

    pub fn forward_scene(&self, g: &mut Graph, scene: &LfScene, training: bool) -> Result<ForwardOutput> {
        self.forward_images(g, &self.store, &scene.af, scene.fs.slices(), training)
    }

    pub fn forward_augmented(&self, g: &mut Graph, scene: &AugmentedScene, training: bool) -> Result<ForwardOutput> {
        self.forward_images(g, &self.store, &scene.af_m, scene.fs_m.slices(), training)
    }

    /// Forward-only prediction of the `1×S×S` saliency probabilities.
    pub fn predict_mask(&self, scene: &LfScene) -> Result<Image> {
        let mut g = Graph::inference();
        let out = self.forward_scene(&mut g, scene, false)?;
        Image::from_tensor_clamped(g.value(out.decoded.final_mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stage_channels: [8, 8, 16, 16],
                input_size: 32,
                ..EncoderConfig::default()
            },
            ia: IaConfig::default(),
            use_focal_stack: true,
        }
    }

    #[test]
    fn every_parameter_belongs_to_exactly_one_group() {
        let m = LfTracy::new(tiny(), 0).unwrap();
        let mut ids: Vec<usize> = m
            .param_groups()
            .into_iter()
            .flat_map(|(_, ids)| ids)
            .map(|id| id.index())
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..m.store.len()).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LfTracy::new(tiny(), 5).unwrap();
        let b = LfTracy::new(tiny(), 5).unwrap();
        assert_eq!(a.store.to_checkpoint_bytes(), b.store.to_checkpoint_bytes());
    }
}
