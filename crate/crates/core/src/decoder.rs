//! Multi-scale decoder: per-stage one-channel compression for deep
//! supervision, interpolation of the deeper stages to stage-1 size,
//! channel concatenation, a 3×3 fusion conv, and the sigmoid head.

use rand::Rng;

use crate::encoder::{ConvParams, EncoderConfig, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Channels of the fusion conv between the concatenated pyramid and the head.
pub const FUSE_CHANNELS: usize = 64;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub compress: Vec<ConvParams>,
    pub fuse: ConvParams,
    pub head: ConvParams,
}

impl DecoderParams {
    /// Registers `decoder.stage{l}.compress`, `decoder.fuse` and `head`.
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let compress = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ConvParams::init(store, rng, &format!("decoder.stage{}.compress", l + 1), c, 1, 1))
            .collect();
        let total: usize = cfg.stage_channels.iter().sum();
        let fuse = ConvParams::init(store, rng, "decoder.fuse", total, FUSE_CHANNELS, 3);
        let head = ConvParams::init(store, rng, "head", FUSE_CHANNELS, 1, 1);
        DecoderParams { compress, fuse, head }
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.compress.iter().flat_map(|c| c.ids()).collect();
        ids.extend(self.fuse.ids());
        ids
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Final `1×S×S` logits before the sigmoid.
    pub final_logits: Var,
    /// Final `1×S×S` probabilities.
    pub final_mask: Var,
    /// Per-stage `1×H_l×W_l` logits; empty outside training.
    pub stage_logits: Vec<Var>,
    /// Per-stage probabilities matching `stage_logits`.
    pub stage_masks: Vec<Var>,
}

/// One 1×1 convolution to a single channel.
pub fn compress_stage(g: &mut Graph, store: &ParamStore, params: &ConvParams, f: Var) -> Result<Var> {
    let c_in = store.get(params.weight).tensor.shape()[1];
    if g.shape(f).first() != Some(&c_in) {
        return Err(Error::Contract(format!(
            "compress expects {c_in} channels, got {:?}",
            g.shape(f)
        )));
    }
    params.apply(g, store, f, 1, 0)
}

/// Decodes a fused pyramid to a mask at `input_size`. With `training`, the
/// per-stage deep-supervision maps are produced as well.
pub fn decode_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderParams,
    pyr: &FeaturePyramid,
    input_size: usize,
    training: bool,
) -> Result<DecoderOutput> {
    if pyr.f.len() != NUM_STAGES {
        return Err(Error::Contract(format!(
            "decoder expects {NUM_STAGES} stages, got {}",
            pyr.f.len()
        )));
    }
    let (mut stage_logits, mut stage_masks) = (Vec::new(), Vec::new());
    if training {
        for (f, c) in pyr.f.iter().zip(&params.compress) {
            let logits = compress_stage(g, store, c, *f)?;
            stage_masks.push(g.sigmoid(logits));
            stage_logits.push(logits);
        }
    }
    let (_, h, w) = g.value(pyr.f[0]).dims3()?;
    let mut parts = vec![pyr.f[0]];
    for &f in &pyr.f[1..] {
        parts.push(g.bilinear_resize(f, h, w)?);
    }
    let cat = g.concat_channels(&parts)?;
    let fused = params.fuse.apply(g, store, cat, 1, 1)?;
    let fused = g.silu(fused);
    let logits = params.head.apply(g, store, fused, 1, 0)?;
    let final_logits = g.bilinear_resize(logits, input_size, input_size)?;
    let final_mask = g.sigmoid(final_logits);
    Ok(DecoderOutput {
        final_logits,
        final_mask,
        stage_logits,
        stage_masks,
    })
}
