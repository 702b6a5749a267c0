//! Classification loss (binary cross entropy) and detection loss (voxel-wise
//! cross entropy plus soft Dice). Both accept soft targets so propagated
//! probabilities can be used as labels directly.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub use crate::tensor::PROB_CLAMP;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Detection,
}

/// A scalar loss node on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub kind: LossKind,
}

impl LossValue {
    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.var).item()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_eps: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        DetectionLossConfig {
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_eps: 1.0,
        }
    }
}

/// `−[y ln ỹ + (1−y) ln(1−ỹ)]`, averaged if `pred` has several entries.
pub fn bce(g: &mut Graph, pred: Var, target: &Tensor) -> Result<LossValue> {
    Ok(LossValue {
        var: g.bce(pred, target)?,
        kind: LossKind::Classification,
    })
}

/// Mean over voxels of the per-voxel cross entropy.
pub fn voxel_ce(g: &mut Graph, pred: Var, target: &Tensor) -> Result<LossValue> {
    Ok(LossValue {
        var: g.bce(pred, target)?,
        kind: LossKind::Detection,
    })
}

/// `1 − (2Σ s̃·s + eps) / (Σ s̃ + Σ s + eps)`.
pub fn dice_loss(g: &mut Graph, pred: Var, target: &Tensor, eps: f64) -> Result<LossValue> {
    Ok(LossValue {
        var: g.soft_dice(pred, target, eps)?,
        kind: LossKind::Detection,
    })
}

/// Weighted `voxel_ce + dice_loss`; with unit weights the value is exactly
/// the sum of the two terms.
pub fn detection_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    cfg: &DetectionLossConfig,
) -> Result<LossValue> {
    let ce = voxel_ce(g, pred, target)?.var;
    let dice = dice_loss(g, pred, target, cfg.dice_eps)?.var;
    let ce = if cfg.ce_weight == 1.0 {
        ce
    } else {
        g.scale(ce, cfg.ce_weight)?
    };
    let dice = if cfg.dice_weight == 1.0 {
        dice
    } else {
        g.scale(dice, cfg.dice_weight)?
    };
    Ok(LossValue {
        var: g.add(ce, dice)?,
        kind: LossKind::Detection,
    })
}
