//! Detection heads over fixed proposal features.
//!
//! * MIL head: two linear streams. The classification stream takes a softmax
//!   over classes, the detection stream a softmax over proposals, and the
//!   proposal scores are their elementwise product. Image scores are the
//!   column sums.
//! * `K` refinement heads: linear maps to `C + 1` logits (background last)
//!   with a row softmax.
//! * Regression head: a linear map to four class-agnostic box deltas.
//!
//! Only head parameters are learned; features are inputs.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linalg::{softmax, softmax_backward, Matrix};
use crate::losses::{
    image_scores, mil_loss_grad, ncl_loss_grad, nice_loss_grad, phi_grad_to_scores, refine_loss_grad, HyperParams,
    LossBreakdown, LossFlags,
};
use crate::ndibank::NdiBank;
use crate::pseudolabel::PseudoLabels;

/// `y = x W + b` for a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub weight: Matrix,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Matrix::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn gaussian(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Linear {
            weight: Matrix::from_shape_fn((inputs, outputs), |_| normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients for upstream `g = d loss / d y`.
    fn backward(&mut self, x: &Matrix, g: &Matrix) {
        self.weight += &x.t().dot(g);
        self.bias += &g.sum_axis(Axis(0));
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

/// Every learnable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cls: Linear,
    pub det: Linear,
    pub refine: Vec<Linear>,
    pub reg: Linear,
}

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.01;

impl ModelParams {
    /// Gaussian weights, zero biases.
    pub fn init(feature_dim: usize, num_classes: usize, heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = Linear::gaussian(feature_dim, num_classes, INIT_STD, &mut rng);
        let det = Linear::gaussian(feature_dim, num_classes, INIT_STD, &mut rng);
        let refine = (0..heads)
            .map(|_| Linear::gaussian(feature_dim, num_classes + 1, INIT_STD, &mut rng))
            .collect();
        let reg = Linear::gaussian(feature_dim, 4, INIT_STD, &mut rng);
        ModelParams { cls, det, refine, reg }
    }

    pub fn zeros(feature_dim: usize, num_classes: usize, heads: usize) -> Self {
        ModelParams {
            cls: Linear::zeros(feature_dim, num_classes),
            det: Linear::zeros(feature_dim, num_classes),
            refine: (0..heads)
                .map(|_| Linear::zeros(feature_dim, num_classes + 1))
                .collect(),
            reg: Linear::zeros(feature_dim, 4),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.feature_dim(), self.num_classes(), self.num_heads())
    }

    pub fn feature_dim(&self) -> usize {
        self.cls.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.cls.weight.ncols()
    }

    pub fn num_heads(&self) -> usize {
        self.refine.len()
    }

    /// Flat mutable views of every tensor in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.extend(self.cls.slices_mut());
        out.extend(self.det.slices_mut());
        for h in &mut self.refine {
            out.extend(h.slices_mut());
        }
        out.extend(self.reg.slices_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        out.extend(self.cls.slices());
        out.extend(self.det.slices());
        for h in &self.refine {
            out.extend(h.slices());
        }
        out.extend(self.reg.slices());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::shape("features", self.feature_dim(), features.ncols()));
        }
        if features.nrows() == 0 {
            return Err(Error::Invalid("no proposals".into()));
        }
        Ok(())
    }
}

/// MIL head output. `scores = cls_prob * det_prob` elementwise.
#[derive(Debug, Clone)]
pub struct MilOutput {
    pub cls_prob: Matrix,
    pub det_prob: Matrix,
    /// `N x C` proposal scores.
    pub scores: Matrix,
    /// Length-`C` image scores (column sums of `scores`), unclamped.
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Per head, `N x (C+1)` row-stochastic scores.
    pub probs: Vec<Matrix>,
    /// `N x 4` box deltas.
    pub deltas: Matrix,
}

impl RefineOutput {
    /// Foreground columns of head `k`.
    pub fn foreground(&self, k: usize) -> Matrix {
        let p = &self.probs[k];
        p.slice(ndarray::s![.., ..p.ncols() - 1]).to_owned()
    }
}

pub fn mil_forward(params: &ModelParams, features: &Matrix) -> Result<MilOutput> {
    params.check_features(features)?;
    let cls_prob = softmax(&params.cls.forward(features), 1);
    let det_prob = softmax(&params.det.forward(features), 0);
    let scores = &cls_prob * &det_prob;
    let phi = image_scores(&scores);
    Ok(MilOutput {
        cls_prob,
        det_prob,
        scores,
        phi,
    })
}

pub fn refine_forward(params: &ModelParams, features: &Matrix) -> Result<RefineOutput> {
    params.check_features(features)?;
    let probs = params.refine.iter().map(|h| softmax(&h.forward(features), 1)).collect();
    let deltas = params.reg.forward(features);
    Ok(RefineOutput { probs, deltas })
}

/// Smallest side a regressed box may have.
pub const MIN_BOX_SIDE: f64 = 1e-4;

/// Applies center/log-size deltas, then clips to the unit square.
pub fn apply_deltas(b: &BBox, deltas: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    // keep exp() finite for wild early-training outputs
    let dw = deltas[2].clamp(-10.0, 10.0);
    let dh = deltas[3].clamp(-10.0, 10.0);
    BBox::from_center_clipped(
        cx + deltas[0] * w,
        cy + deltas[1] * h,
        w * dw.exp(),
        h * dh.exp(),
        MIN_BOX_SIDE,
    )
}

/// One training example: proposal features and multi-hot image labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [f64],
}

/// Per-term loss values for fixed pseudo-labels and bank.
pub fn loss_terms(
    params: &ModelParams,
    batch: Batch<'_>,
    pseudo: &PseudoLabels,
    bank: &NdiBank,
    hp: &HyperParams,
    flags: LossFlags,
) -> Result<LossBreakdown> {
    Ok(grad_params(params, batch, pseudo, bank, hp, flags)?.1)
}

/// Analytic gradient of the total loss with respect to every parameter.
///
/// Pseudo-labels, the bank, and the contrastive gating are treated as
/// constants. Terms switched off in `flags` contribute neither value nor
/// gradient (their breakdown entries are still reported).
pub fn grad_params(
    params: &ModelParams,
    batch: Batch<'_>,
    pseudo: &PseudoLabels,
    bank: &NdiBank,
    hp: &HyperParams,
    flags: LossFlags,
) -> Result<(ModelParams, LossBreakdown)> {
    let x = batch.features;
    let y = batch.labels;
    if y.len() != params.num_classes() {
        return Err(Error::shape("labels", params.num_classes(), y.len()));
    }
    if pseudo.heads.len() != params.num_heads() {
        return Err(Error::shape(
            "pseudo-label heads",
            params.num_heads(),
            pseudo.heads.len(),
        ));
    }
    if pseudo.heads.iter().any(|h| h.labels.len() != x.nrows()) {
        return Err(Error::Invalid("pseudo-labels do not cover every proposal".into()));
    }
    let mil = mil_forward(params, x)?;
    let refine = refine_forward(params, x)?;
    let n = x.nrows();

    let (l_mil, dphi) = mil_loss_grad(&mil.phi, y);
    let mut d_scores = if flags.mil {
        phi_grad_to_scores(&dphi, n)
    } else {
        Matrix::zeros(mil.scores.raw_dim())
    };
    let (l_nice, g_nice) = nice_loss_grad(&mil.scores, y, hp.tau);
    let (l_ncl, g_ncl) = ncl_loss_grad(x, &mil.scores, y, bank, hp);
    if flags.nice {
        d_scores += &g_nice;
    }
    if flags.ncl {
        d_scores += &g_ncl;
    }
    let (l_cls, l_reg, rg) = refine_loss_grad(&refine.probs, &refine.deltas, pseudo);

    let mut grads = params.zeros_like();
    // S = P * Q: dP = dS * Q, dQ = dS * P
    let d_cls_prob = &d_scores * &mil.det_prob;
    let d_det_prob = &d_scores * &mil.cls_prob;
    grads.cls.backward(x, &softmax_backward(&mil.cls_prob, &d_cls_prob, 1));
    grads.det.backward(x, &softmax_backward(&mil.det_prob, &d_det_prob, 0));
    if flags.refine {
        for (g, dl) in grads.refine.iter_mut().zip(&rg.logits) {
            g.backward(x, dl);
        }
        grads.reg.backward(x, &rg.deltas);
    }

    let breakdown = LossBreakdown {
        mil: l_mil,
        ref_cls: l_cls,
        ref_reg: l_reg,
        nice: l_nice,
        ncl: l_ncl,
    };
    Ok((grads, breakdown))
}

/// Serializable snapshot of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ModelParams {
    fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut layers: Vec<(String, &Linear)> = vec![("mil.cls".into(), &self.cls), ("mil.det".into(), &self.det)];
        for (k, h) in self.refine.iter().enumerate() {
            layers.push((format!("refine.{k}"), h));
        }
        layers.push(("reg".into(), &self.reg));
        let mut out = Vec::new();
        for (name, l) in layers {
            let [w, b] = l.slices();
            out.push((format!("{name}.weight"), vec![l.weight.nrows(), l.weight.ncols()], w));
            out.push((format!("{name}.bias"), vec![l.bias.len()], b));
        }
        out
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            feature_dim: self.feature_dim(),
            num_classes: self.num_classes(),
            num_heads: self.num_heads(),
            config_hash: config_hash.to_string(),
            tensors: self
                .named()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut params = ModelParams::zeros(ck.feature_dim, ck.num_classes, ck.num_heads);
        let expected: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != ck.tensors.len() {
            return Err(Error::shape("checkpoint tensors", expected.len(), ck.tensors.len()));
        }
        for ((name, shape), t) in expected.iter().zip(&ck.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(
                    "checkpoint tensor",
                    format!("{name} {shape:?}"),
                    format!("{} {:?}", t.name, t.shape),
                ));
            }
        }
        for (dst, t) in params.tensors_mut().into_iter().zip(&ck.tensors) {
            dst.copy_from_slice(&t.data);
        }
        if !params.is_finite() {
            return Err(Error::Invalid("checkpoint contains non-finite weights".into()));
        }
        Ok(params)
    }
}
