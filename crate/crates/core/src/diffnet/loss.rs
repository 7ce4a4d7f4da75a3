use serde::{Deserialize, Serialize};

use super::network::{points_grid, ProposalOutput};
use super::tape::{Tape, ValueGrid, Var};
use crate::geom::{iou3d, Box3D, PointCloud, Vec3};

/// Probability clamp used by every cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    /// Binary cross-entropy over foreground and background seeds.
    #[default]
    Bce,
    /// `−ln r` over foreground seeds only.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLoss {
    /// Only proposals within `box_radius` of the gt center.
    #[default]
    NearGt,
    AllProposals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_loss: ClsLoss,
    pub box_loss: BoxLoss,
    pub box_radius: f64,
    /// Proposals with IoU below this are score negatives.
    pub score_neg_iou: f64,
    /// Proposals with IoU above this are score positives.
    pub score_pos_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { cls_loss: ClsLoss::Bce, box_loss: BoxLoss::NearGt, box_radius: 0.3, score_neg_iou: 0.3, score_pos_iou: 0.6 }
    }
}

/// Scalar loss nodes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub vote: Var,
    pub cls: Var,
    pub bbox: Var,
    pub score: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vote: f64,
    pub cls: f64,
    pub bbox: f64,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, vars: &LossVars) -> Self {
        Self {
            vote: tape.scalar(vars.vote),
            cls: tape.scalar(vars.cls),
            bbox: tape.scalar(vars.bbox),
            score: tape.scalar(vars.score),
            total: tape.scalar(vars.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.vote, self.cls, self.bbox, self.score, self.total].iter().all(|v| v.is_finite())
    }
}

/// Seeds lying inside the gt box.
pub fn foreground_mask(seeds: &[Vec3], gt: &Box3D) -> Vec<bool> {
    crate::geom::points_in_box(&PointCloud::new(seeds.to_vec()), gt, 0.0)
}

fn tiled(p: Vec3, n: usize) -> ValueGrid {
    points_grid(&vec![p; n])
}

/// Mean BCE of clamped probabilities `p` (N×1) against 0/1 labels.
fn bce(tape: &mut Tape, p: Var, labels: &[f64]) -> Var {
    let n = labels.len() as f64;
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(pc);
    let neg = tape.scale(pc, -1.0);
    let q = tape.add_const(neg, 1.0);
    let lq = tape.ln(q);
    let y = tape.constant(ValueGrid::column(labels.to_vec()));
    let ny = tape.constant(ValueGrid::column(labels.iter().map(|v| 1.0 - v).collect()));
    let a = tape.mul(y, lp);
    let b = tape.mul(ny, lq);
    let s = tape.add(a, b);
    let s = tape.sum_all(s);
    tape.scale(s, -1.0 / n)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(ValueGrid::scalar(0.0))
}

/// Records the four-term loss of one sample. Selections (foreground mask,
/// near-gt gating, score labels) are constants of the forward pass.
pub fn compute_losses(tape: &mut Tape, out: &ProposalOutput, gt: &Box3D, fg_mask: &[bool], config: &LossConfig) -> LossVars {
    let m = fg_mask.len();
    assert!(m > 0 && m == tape.value(out.votes).rows(), "foreground mask must cover every seed");

    let gt_rows = tape.constant(tiled(gt.center, m));
    let diff = tape.sub(out.votes, gt_rows);
    let dist = tape.row_norm(diff);
    let mask: Vec<f64> = fg_mask.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mask_var = tape.constant(ValueGrid::column(mask.clone()));
    let masked = tape.mul(dist, mask_var);
    let vote_sum = tape.sum_all(masked);
    let vote = tape.scale(vote_sum, 1.0 / m as f64);

    let cls = match config.cls_loss {
        ClsLoss::Bce => bce(tape, out.probs, &mask),
        ClsLoss::PaperLiteral => {
            let fg: Vec<usize> = (0..m).filter(|&i| fg_mask[i]).collect();
            if fg.is_empty() {
                zero(tape)
            } else {
                let p = tape.gather(out.probs, fg.clone());
                bce(tape, p, &vec![1.0; fg.len()])
            }
        }
    };

    let boxes = out.boxes(tape);
    let selected: Vec<usize> = match config.box_loss {
        BoxLoss::NearGt => (0..boxes.len()).filter(|&i| boxes[i].center.distance(gt.center) <= config.box_radius).collect(),
        BoxLoss::AllProposals => (0..boxes.len()).collect(),
    };
    let bbox = if selected.is_empty() {
        zero(tape)
    } else {
        let k = selected.len();
        let c = tape.gather(out.centers, selected.clone());
        let target = tape.constant(tiled(gt.center, k));
        let dc = tape.sub(c, target);
        let y = tape.gather(out.yaws, selected);
        let ty = tape.constant(ValueGrid::column(vec![gt.yaw; k]));
        let dy = tape.sub(y, ty);
        let dy = tape.wrap_angle(dy);
        let d = tape.concat_cols(vec![dc, dy]);
        let l = tape.smooth_l1(d);
        let l = tape.sum_all(l);
        tape.scale(l, 1.0 / k as f64)
    };

    let mut labeled = Vec::new();
    let mut labels = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let iou = iou3d(b, gt);
        if iou > config.score_pos_iou {
            labeled.push(i);
            labels.push(1.0);
        } else if iou < config.score_neg_iou {
            labeled.push(i);
            labels.push(0.0);
        }
    }
    let score = if labeled.is_empty() {
        zero(tape)
    } else {
        let s = tape.gather(out.scores, labeled);
        bce(tape, s, &labels)
    };

    let total = tape.add_n(vec![vote, cls, bbox, score]);
    LossVars { vote, cls, bbox, score, total }
}
