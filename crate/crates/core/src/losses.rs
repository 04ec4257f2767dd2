//! Training objective: boundary-weighted structure loss on every stage map
//! and on the final map, plus a Tversky term on the final probabilities.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Side of the averaging window behind the boundary weights.
pub const BOUNDARY_WINDOW: usize = 31;
/// Boundary emphasis factor.
pub const BOUNDARY_GAIN: f64 = 5.0;
/// Smoothing constant of the Tversky ratio.
pub const TVERSKY_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub tversky_a: f64,
    pub tversky_b: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_t: 1.0,
            tversky_a: 0.7,
            tversky_b: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("tversky_a", self.tversky_a),
            ("tversky_b", self.tversky_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub structure_per_stage: Vec<f64>,
    pub structure_final: f64,
    pub tversky: f64,
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::Contract("ground truth must be binary".into()))
    }
}

/// Mean of `gt` over the `31×31` window centred on each pixel, counting only
/// in-image pixels, so constant masks have constant means.
fn window_means(gt: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r = BOUNDARY_WINDOW / 2;
    let mut table = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += gt[y * w + x];
            table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
        }
    }
    let at = |y: usize, x: usize| table[y * (w + 1) + x];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// `w = 1 + 5·|avgpool(gt) − gt|` for a `1×H×W` binary mask.
pub fn boundary_weights(gt: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = gt.dims3()?;
    if c != 1 {
        return Err(Error::Contract(format!("ground truth must have 1 channel, got {c}")));
    }
    check_binary(gt)?;
    Ok(window_means(gt.data(), h, w)
        .into_iter()
        .zip(gt.data())
        .map(|(m, g)| 1.0 + BOUNDARY_GAIN * (m - g).abs())
        .collect())
}

/// Weighted BCE plus weighted IoU on logits.
pub fn structure_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    let weights = boundary_weights(gt)?;
    g.structure_loss(logits, gt, &weights)
}

/// `1 − (TP+1)/(TP + a·FP + b·FN + 1)` on probabilities.
pub fn tversky_loss(g: &mut Graph, prob: Var, gt: &Tensor, a: f64, b: f64) -> Result<Var> {
    if a < 0.0 || b < 0.0 {
        return Err(Error::Contract(format!("tversky weights must be ≥ 0, got a={a}, b={b}")));
    }
    g.tversky(prob, gt, a, b)
}

/// Nearest-neighbour downsampling of a `1×H×W` mask, preserving binarity.
pub fn resize_gt(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, gh, gw) = gt.dims3()?;
    Tensor::new(vec![c, h, w], kernels::nearest_resize(gt.data(), c, gh, gw, h, w))
}

/// Structure loss on every stage map and the final map, plus
/// `lambda_t · tversky` on the final probabilities.
pub fn total_loss(g: &mut Graph, out: &DecoderOutput, gt: &Tensor, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    if out.stage_logits.is_empty() {
        return Err(Error::Contract("total loss needs the training-mode stage maps".into()));
    }
    let mut terms = Vec::with_capacity(out.stage_logits.len() + 2);
    let mut per_stage = Vec::with_capacity(out.stage_logits.len());
    for &logits in &out.stage_logits {
        let (_, h, w) = g.value(logits).dims3()?;
        let gt_l = resize_gt(gt, h, w)?;
        let l = structure_loss(g, logits, &gt_l)?;
        per_stage.push(g.value(l).item());
        terms.push(l);
    }
    let fin = structure_loss(g, out.final_logits, gt)?;
    terms.push(fin);
    let tv = tversky_loss(g, out.final_mask, gt, cfg.tversky_a, cfg.tversky_b)?;
    let tv_scaled = g.scale(tv, cfg.lambda_t);
    terms.push(tv_scaled);
    let total = g.add_n(&terms)?;
    let report = LossReport {
        total: g.value(total).item(),
        structure_per_stage: per_stage,
        structure_final: g.value(fin).item(),
        tversky: g.value(tv).item(),
    };
    Ok((total, report))
}
