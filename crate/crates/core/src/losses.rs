//! Training objectives.
//!
//! Each term is exposed twice: a value function, and a `*_grad` function
//! returning the value together with its gradient with respect to the
//! term's direct input (image scores, proposal scores, or head logits). The
//! chain rule down to parameters lives in [`crate::network`].
//!
//! | term   | input                  | value                                                        |
//! |--------|------------------------|--------------------------------------------------------------|
//! | `mil`  | image scores `phi`     | `-sum_c [y_c ln phi_c + (1 - y_c) ln(1 - phi_c)]`            |
//! | `ref`  | head probabilities     | weighted cross-entropy + smooth-L1 on the last head           |
//! | `nice` | proposal scores `S`    | `-sum_{j, c: y_c = 0, S_jc > tau} ln(1 - S_jc)`             |
//! | `ncl`  | proposal scores `S`    | `alpha * sum_j ns_j * max(0, sim_j) * S_{j, c_j}`            |
//!
//! In the contrastive term, proposal `j` takes part when its best score over
//! *present* classes exceeds `tau`; `c_j` is that class, `sim_j` the cosine
//! between the proposal feature and the nearest bank entry of `c_j`, and
//! `ns_j` that entry's confidence. Features are fixed inputs here, so the
//! penalty is applied through the score `S_{j, c_j}` the head assigns to the
//! proposal.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::ndibank::NdiBank;
use crate::pseudolabel::PseudoLabels;

/// Lower clamp inside every logarithm.
pub const LOG_EPS: f64 = 1e-6;

/// Smooth-L1 switches from quadratic to linear at this magnitude.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Loss and selection hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Confidence gate for negatives and for the contrastive term.
    pub tau: f64,
    /// Contrastive trade-off factor.
    pub alpha: f64,
    /// Seed screening factor.
    pub beta: f64,
    /// Bank queue length.
    pub queue_len: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.05,
            alpha: 0.3,
            beta: 3.0,
            queue_len: 5,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            iters: 2000,
        }
    }
}

/// Which terms enter the total. Training always keeps `mil` and `refine`;
/// switching them off isolates single terms for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub mil: bool,
    pub refine: bool,
    pub nice: bool,
    pub ncl: bool,
}

impl LossFlags {
    pub const ALL: LossFlags = LossFlags {
        mil: true,
        refine: true,
        nice: true,
        ncl: true,
    };
    pub const BASE: LossFlags = LossFlags {
        mil: true,
        refine: true,
        nice: false,
        ncl: false,
    };
    const NONE: LossFlags = LossFlags {
        mil: false,
        refine: false,
        nice: false,
        ncl: false,
    };
    pub const MIL: LossFlags = LossFlags {
        mil: true,
        ..Self::NONE
    };
    pub const REFINE: LossFlags = LossFlags {
        refine: true,
        ..Self::NONE
    };
    pub const NICE: LossFlags = LossFlags {
        nice: true,
        ..Self::NONE
    };
    pub const NCL: LossFlags = LossFlags {
        ncl: true,
        ..Self::NONE
    };
}

/// Per-term values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mil: f64,
    pub ref_cls: f64,
    pub ref_reg: f64,
    pub nice: f64,
    pub ncl: f64,
}

impl LossBreakdown {
    pub fn refine(&self) -> f64 {
        self.ref_cls + self.ref_reg
    }

    pub fn total(&self) -> f64 {
        total_loss(self.mil, self.refine(), self.nice, self.ncl, LossFlags::ALL)
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("mil", self.mil),
            ("ref_cls", self.ref_cls),
            ("ref_reg", self.ref_reg),
            ("nice", self.nice),
            ("ncl", self.ncl),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Sum of the four terms, with disabled terms dropped.
pub fn total_loss(mil: f64, refine: f64, nice: f64, ncl: f64, flags: LossFlags) -> f64 {
    let mut t = 0.0;
    if flags.mil {
        t += mil;
    }
    if flags.refine {
        t += refine;
    }
    if flags.nice {
        t += nice;
    }
    if flags.ncl {
        t += ncl;
    }
    t
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Multi-label binary cross-entropy on image scores.
pub fn mil_loss(phi: &[f64], labels: &[f64]) -> f64 {
    mil_loss_grad(phi, labels).0
}

/// Value and `d loss / d phi`. Clamped entries get zero gradient.
pub fn mil_loss_grad(phi: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; phi.len()];
    for (c, (&p, &y)) in phi.iter().zip(labels).enumerate() {
        let q = clamp_prob(p);
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        if q == p {
            grad[c] = -y / q + (1.0 - y) / (1.0 - q);
        }
    }
    (loss, grad)
}

/// Cross-entropy on proposal scores of absent classes above `tau`.
pub fn nice_loss(scores: &Matrix, labels: &[f64], tau: f64) -> f64 {
    nice_loss_grad(scores, labels, tau).0
}

pub fn nice_loss_grad(scores: &Matrix, labels: &[f64], tau: f64) -> (f64, Matrix) {
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(scores.raw_dim());
    for ((j, c), &s) in scores.indexed_iter() {
        if labels[c] != 0.0 || s <= tau {
            continue;
        }
        let q = s.min(1.0 - LOG_EPS);
        loss -= (1.0 - q).ln();
        if q == s {
            grad[[j, c]] = 1.0 / (1.0 - q);
        }
    }
    (loss, grad)
}

/// One proposal's participation in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NclTerm {
    pub proposal: usize,
    pub class: usize,
    /// `ns * max(0, similarity)` of the nearest bank entry.
    pub coefficient: f64,
}

/// Gated proposals and their bank coefficients. Proposals whose class queue
/// is empty are skipped.
pub fn ncl_terms(features: &Matrix, scores: &Matrix, labels: &[f64], bank: &NdiBank, tau: f64) -> Vec<NclTerm> {
    let mut terms = Vec::new();
    for (j, row) in scores.rows().into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (c, &s) in row.iter().enumerate() {
            if labels[c] != 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        let Some((class, s)) = best else { continue };
        if s <= tau {
            continue;
        }
        if let Some(m) = bank.query_view(class, features.row(j)) {
            terms.push(NclTerm {
                proposal: j,
                class,
                coefficient: m.confidence * m.similarity.max(0.0),
            });
        }
    }
    terms
}

pub fn ncl_loss(features: &Matrix, scores: &Matrix, labels: &[f64], bank: &NdiBank, hp: &HyperParams) -> f64 {
    ncl_loss_grad(features, scores, labels, bank, hp).0
}

pub fn ncl_loss_grad(
    features: &Matrix,
    scores: &Matrix,
    labels: &[f64],
    bank: &NdiBank,
    hp: &HyperParams,
) -> (f64, Matrix) {
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(scores.raw_dim());
    for t in ncl_terms(features, scores, labels, bank, hp.tau) {
        loss += hp.alpha * t.coefficient * scores[[t.proposal, t.class]];
        grad[[t.proposal, t.class]] += hp.alpha * t.coefficient;
    }
    (loss, grad)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Gradients of the refinement loss.
#[derive(Debug, Clone)]
pub struct RefineGrad {
    /// `d loss / d logits` per head, `N x (C+1)`.
    pub logits: Vec<Matrix>,
    /// `d loss / d deltas`, `N x 4`.
    pub deltas: Matrix,
}

/// `(classification, regression)` refinement loss.
///
/// Classification: mean over heads of `(1/N) * sum_j w_j * -ln p_j[label_j]`.
/// Regression: `(1/|pos|) * sum_pos w_j * sum_d smoothL1(delta_jd - t_jd)` on
/// the last head's positives.
pub fn refine_loss(probs: &[Matrix], deltas: &Matrix, pseudo: &PseudoLabels) -> (f64, f64) {
    let (cls, reg, _) = refine_loss_grad(probs, deltas, pseudo);
    (cls, reg)
}

pub fn refine_loss_grad(probs: &[Matrix], deltas: &Matrix, pseudo: &PseudoLabels) -> (f64, f64, RefineGrad) {
    let heads = probs.len();
    assert_eq!(heads, pseudo.heads.len(), "one label set per head");
    let mut cls = 0.0;
    let mut logit_grads = Vec::with_capacity(heads);
    for (p, labels) in probs.iter().zip(&pseudo.heads) {
        let n = p.nrows();
        let scale = 1.0 / (n as f64 * heads as f64);
        let mut g = Matrix::zeros(p.raw_dim());
        for (j, l) in labels.labels.iter().enumerate() {
            if l.weight == 0.0 {
                continue;
            }
            let pj = p[[j, l.class]];
            let q = pj.max(LOG_EPS);
            cls -= scale * l.weight * q.ln();
            if q == pj {
                // softmax + cross-entropy: w * (p - onehot)
                for k in 0..p.ncols() {
                    g[[j, k]] += scale * l.weight * p[[j, k]];
                }
                g[[j, l.class]] -= scale * l.weight;
            }
        }
        logit_grads.push(g);
    }

    let mut reg = 0.0;
    let mut dgrad = Matrix::zeros(deltas.raw_dim());
    if let Some(last) = pseudo.heads.last() {
        let pos: Vec<(usize, f64, [f64; 4])> = last
            .labels
            .iter()
            .enumerate()
            .filter_map(|(j, l)| l.target.map(|t| (j, l.weight, t)))
            .collect();
        if !pos.is_empty() {
            let scale = 1.0 / pos.len() as f64;
            for (j, w, t) in pos {
                for d in 0..4 {
                    let x = deltas[[j, d]] - t[d];
                    reg += scale * w * smooth_l1(x);
                    dgrad[[j, d]] += scale * w * smooth_l1_grad(x);
                }
            }
        }
    }
    (
        cls,
        reg,
        RefineGrad {
            logits: logit_grads,
            deltas: dgrad,
        },
    )
}

/// Image scores: column sums of the proposal score matrix.
pub fn image_scores(scores: &Matrix) -> Vec<f64> {
    scores.sum_axis(ndarray::Axis(0)).to_vec()
}

/// Broadcasts a per-class gradient on `phi` to every proposal row.
pub fn phi_grad_to_scores(dphi: &[f64], n: usize) -> Matrix {
    let row = Array1::from(dphi.to_vec());
    Matrix::from_shape_fn((n, dphi.len()), |(_, c)| row[c])
}
