//! Information aggregation: per-slice attention maps built from focal-stack
//! features, applied to values derived from the all-focus feature, combined
//! with learnable per-slice weights and a residual all-focus term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ConvParams, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    /// Attention with learnable per-slice weights.
    #[serde(rename = "A_PD")]
    AttentionWeighted,
    /// Attention with plain addition.
    #[serde(rename = "A_D")]
    AttentionSum,
    /// Plain feature addition without attention.
    #[serde(rename = "ADD")]
    Add,
    /// Deformable cross attention; recognised but not implemented.
    #[serde(rename = "DA")]
    Deformable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IaConfig {
    pub fusion: Fusion,
    pub reduction_rate: usize,
    pub num_slices: usize,
}

impl Default for IaConfig {
    fn default() -> Self {
        IaConfig {
            fusion: Fusion::AttentionWeighted,
            reduction_rate: 8,
            num_slices: 12,
        }
    }
}

pub const REDUCTION_RATES: [usize; 4] = [1, 4, 8, 16];

impl IaConfig {
    pub fn validate(&self, stage_channels: &[usize]) -> Result<()> {
        if self.fusion == Fusion::Deformable {
            return Err(Error::Config(
                "fusion strategy DA (deformable cross attention) is not supported".into(),
            ));
        }
        if !REDUCTION_RATES.contains(&self.reduction_rate) {
            return Err(Error::Config(format!(
                "ia.reduction_rate must be one of {REDUCTION_RATES:?}, got {}",
                self.reduction_rate
            )));
        }
        if self.num_slices == 0 {
            return Err(Error::Config("ia.num_slices must be ≥ 1".into()));
        }
        for &c in stage_channels {
            if c % self.reduction_rate != 0 {
                return Err(Error::Config(format!(
                    "{c} channels are not divisible by reduction rate {}",
                    self.reduction_rate
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IaStageParams {
    pub channels: usize,
    pub conv_q: ConvParams,
    pub conv_k: ConvParams,
    pub conv_v: ConvParams,
    pub sigma: ParamId,
}

impl IaStageParams {
    /// Registers `ia.stage{stage}.{conv_q,conv_k,conv_v,sigma}`; `sigma`
    /// starts at `1/num_slices`.
    pub fn init(
        cfg: &IaConfig,
        stage: usize,
        channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(&[channels])?;
        let prefix = format!("ia.stage{stage}");
        let reduced = channels / cfg.reduction_rate;
        Ok(IaStageParams {
            channels,
            conv_q: ConvParams::init(store, rng, &format!("{prefix}.conv_q"), channels, reduced, 1),
            conv_k: ConvParams::init(store, rng, &format!("{prefix}.conv_k"), channels, reduced, 1),
            conv_v: ConvParams::init(store, rng, &format!("{prefix}.conv_v"), channels, channels, 1),
            sigma: store.add(
                format!("{prefix}.sigma"),
                Tensor::full(&[cfg.num_slices], 1.0 / cfg.num_slices as f64),
            ),
        })
    }
}

/// Exact parameter count of the attention module over all stages.
pub fn parameter_count(cfg: &IaConfig, stage_channels: &[usize]) -> usize {
    stage_channels
        .iter()
        .map(|&c| {
            let r = c / cfg.reduction_rate;
            2 * (c * r + r) + (c * c + c) + cfg.num_slices
        })
        .sum()
}

fn check_channels(g: &Graph, x: Var, params: &IaStageParams) -> Result<(usize, usize, usize)> {
    let shape = g.shape(x).to_vec();
    match shape[..] {
        [c, h, w] if c == params.channels => Ok((c, h, w)),
        _ => Err(Error::Contract(format!(
            "attention expects {} channels, got feature {shape:?}",
            params.channels
        ))),
    }
}

/// `softmax_rows(Qᵀ·K)` with `Q = conv_q(fs)`, `K = conv_k(fs)` viewed as
/// `C*×HW`: row `i` is how query position `i` attends over all positions.
pub fn attention_map(g: &mut Graph, store: &ParamStore, params: &IaStageParams, fs_feat: Var) -> Result<Var> {
    let (_, h, w) = check_channels(g, fs_feat, params)?;
    let q = params.conv_q.apply(g, store, fs_feat, 1, 0)?;
    let k = params.conv_k.apply(g, store, fs_feat, 1, 0)?;
    let reduced = g.shape(q)[0];
    let q = g.reshape(q, &[reduced, h * w])?;
    let k = g.reshape(k, &[reduced, h * w])?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let m = g.softmax_lastdim(scores)?;
    g.discard(scores);
    Ok(m)
}

/// `V = conv_v(af)` as `HW×C` tokens.
pub fn value_tokens(g: &mut Graph, store: &ParamStore, params: &IaStageParams, af_feat: Var) -> Result<Var> {
    let (c, h, w) = check_channels(g, af_feat, params)?;
    let v = params.conv_v.apply(g, store, af_feat, 1, 0)?;
    let v = g.reshape(v, &[c, h * w])?;
    g.transpose(v)
}

/// `T = M·V`, returned as a `C×H×W` feature.
fn attend(g: &mut Graph, m: Var, v: Var, (c, h, w): (usize, usize, usize)) -> Result<Var> {
    let hw = h * w;
    if g.shape(m) != [hw, hw] || g.shape(v) != [hw, c] {
        return Err(Error::Contract(format!(
            "attention map {:?} and values {:?} do not match a {c}×{h}×{w} feature",
            g.shape(m),
            g.shape(v)
        )));
    }
    let t = g.matmul(m, v)?;
    let t = g.transpose(t)?;
    g.reshape(t, &[c, h, w])
}

/// The attention-aggregated feature of one slice: `M·conv_v(af)` reshaped
/// back to `C×H×W`.
pub fn aggregate_slice(
    g: &mut Graph,
    store: &ParamStore,
    params: &IaStageParams,
    m: Var,
    af_feat: Var,
) -> Result<Var> {
    let dims = check_channels(g, af_feat, params)?;
    let v = value_tokens(g, store, params, af_feat)?;
    attend(g, m, v, dims)
}

/// Fuses one stage: `af + Σ σ_n·F̂_n` (A_PD), `af + Σ F̂_n` (A_D) or
/// `af + Σ fs_n` (ADD). Slices that share a feature node share their
/// attention pass.
pub fn fuse_stage(
    g: &mut Graph,
    store: &ParamStore,
    params: &IaStageParams,
    cfg: &IaConfig,
    af_feat: Var,
    fs_feats: &[Var],
) -> Result<Var> {
    cfg.validate(&[params.channels])?;
    if fs_feats.len() != cfg.num_slices {
        return Err(Error::Contract(format!(
            "expected {} focal features, got {}",
            cfg.num_slices,
            fs_feats.len()
        )));
    }
    let dims = check_channels(g, af_feat, params)?;
    for &f in fs_feats {
        if g.shape(f) != g.shape(af_feat) {
            return Err(Error::Contract(format!(
                "focal feature {:?} does not match all-focus feature {:?}",
                g.shape(f),
                g.shape(af_feat)
            )));
        }
    }
    let terms = match cfg.fusion {
        Fusion::Add => fs_feats.to_vec(),
        Fusion::AttentionWeighted | Fusion::AttentionSum => {
            let v = value_tokens(g, store, params, af_feat)?;
            let mut cache: Vec<(Var, Var)> = Vec::new();
            let mut aggregated = Vec::with_capacity(fs_feats.len());
            for &f in fs_feats {
                let a = match cache.iter().find(|(src, _)| *src == f) {
                    Some(&(_, a)) => a,
                    None => {
                        let m = attention_map(g, store, params, f)?;
                        let a = attend(g, m, v, dims)?;
                        g.discard(m);
                        cache.push((f, a));
                        a
                    }
                };
                aggregated.push(a);
            }
            if cfg.fusion == Fusion::AttentionWeighted {
                let sigma = g.param(store, params.sigma);
                aggregated
                    .iter()
                    .enumerate()
                    .map(|(n, &a)| g.scale_by_entry(a, sigma, n))
                    .collect::<Result<Vec<_>>>()?
            } else {
                aggregated
            }
        }
        Fusion::Deformable => unreachable!("rejected by validate"),
    };
    let agg = g.add_n(&terms)?;
    g.add(af_feat, agg)
}

/// Applies [`fuse_stage`] independently at every stage.
pub fn fuse_pyramids(
    g: &mut Graph,
    store: &ParamStore,
    params: &[IaStageParams],
    cfg: &IaConfig,
    af: &FeaturePyramid,
    fs: &[FeaturePyramid],
) -> Result<FeaturePyramid> {
    if params.len() != NUM_STAGES || af.f.len() != NUM_STAGES {
        return Err(Error::Contract(format!("fusion needs {NUM_STAGES} stages")));
    }
    let f = (0..NUM_STAGES)
        .map(|l| {
            let fs_l: Vec<Var> = fs.iter().map(|p| p.f[l]).collect();
            fuse_stage(g, store, &params[l], cfg, af.f[l], &fs_l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { f })
}
