//! Inference and detection metrics.
//!
//! Final proposal scores are the mean of the refinement heads' foreground
//! probabilities. Boxes are refined with the regression deltas, then
//! suppressed per class. AP uses greedy matching at IoU 0.5 and all-points
//! interpolation of the precision envelope.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, nms, BBox};
use crate::linalg::Matrix;
use crate::network::{apply_deltas, refine_forward, ModelParams};
use crate::synthgen::{Dataset, Image, ProposalSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub score_floor: f64,
    pub match_iou: f64,
    /// Measure CorLoc on the training split (the usual convention) rather
    /// than the test split.
    pub corloc_on_train: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_iou: 0.3,
            score_floor: 1e-3,
            match_iou: 0.5,
            corloc_on_train: true,
        }
    }
}

/// `N x C` final scores: the mean over heads of the foreground columns.
pub fn final_scores(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    let out = refine_forward(params, features)?;
    let c = params.num_classes();
    let mut acc = Matrix::zeros((features.nrows(), c));
    for p in &out.probs {
        acc += &p.slice(ndarray::s![.., ..c]);
    }
    acc /= out.probs.len() as f64;
    Ok(acc)
}

pub fn infer(params: &ModelParams, proposals: &ProposalSet, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let x = proposals.matrix();
    let out = refine_forward(params, &x)?;
    let scores = final_scores(params, &x)?;
    let refined: Vec<BBox> = proposals
        .boxes
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let d = out.deltas.row(j);
            apply_deltas(b, [d[0], d[1], d[2], d[3]])
        })
        .collect();
    let mut dets = Vec::new();
    for c in 0..params.num_classes() {
        let col: Vec<f64> = scores.column(c).to_vec();
        for j in nms(&refined, &col, cfg.nms_iou) {
            if col[j] >= cfg.score_floor {
                dets.push(Detection {
                    bbox: refined[j],
                    class: c,
                    score: col[j],
                });
            }
        }
    }
    Ok(dets)
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Marks each detection true/false positive in descending-score order.
///
/// Each detection claims the highest-IoU still-unmatched ground truth of its
/// image when that IoU reaches `match_iou`.
fn match_detections(dets: &[ImageDetection], gts: &[Vec<BBox>], match_iou: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let Some(image_gts) = gts.get(d.image) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in image_gts.iter().enumerate() {
                if used[d.image][g] {
                    continue;
                }
                let o = iou(&d.bbox, gt);
                if o >= match_iou && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[d.image][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of one class.
///
/// `gts[i]` are the ground-truth boxes of image `i`. Returns `None` when
/// there is neither a ground truth nor a detection; `Some(0.0)` when there
/// are detections but no ground truth.
pub fn average_precision(dets: &[ImageDetection], gts: &[Vec<BBox>], match_iou: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return (!dets.is_empty()).then_some(0.0);
    }
    let hits = match_detections(dets, gts, match_iou);
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend(&precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..mrec.len() - 1 {
        if mrec[i + 1] != mrec[i] {
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `null` for classes with neither ground truth nor detections.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_corloc: Vec<Option<f64>>,
    pub corloc: f64,
    pub detections_per_class: Vec<usize>,
}

/// mAP over `images` (classes with at least one ground truth).
pub fn mean_ap(
    params: &ModelParams,
    images: &[Image],
    cfg: &EvalConfig,
) -> Result<(Vec<Option<f64>>, f64, Vec<usize>)> {
    let c = params.num_classes();
    let mut per_class: Vec<Vec<ImageDetection>> = vec![Vec::new(); c];
    for (i, img) in images.iter().enumerate() {
        for d in infer(params, &img.proposals, cfg)? {
            per_class[d.class].push(ImageDetection {
                image: i,
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    let mut aps = Vec::with_capacity(c);
    let mut with_gt = Vec::new();
    for (class, dets) in per_class.iter().enumerate() {
        let gts: Vec<Vec<BBox>> = images.iter().map(|img| img.scene.gt_boxes(class)).collect();
        let ap = average_precision(dets, &gts, cfg.match_iou);
        if gts.iter().any(|g| !g.is_empty()) {
            with_gt.push(ap.unwrap_or(0.0));
        }
        aps.push(ap);
    }
    let map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    let counts = per_class.iter().map(Vec::len).collect();
    Ok((aps, map, counts))
}

/// Per-class CorLoc and its mean over classes with a positive image.
///
/// For every image and present class, the top detection of that class hits
/// when it overlaps a ground truth of the class at `match_iou`. An image
/// with no detection of the class counts as a miss.
pub fn corloc(params: &ModelParams, images: &[Image], cfg: &EvalConfig) -> Result<(Vec<Option<f64>>, f64)> {
    let c = params.num_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for img in images {
        let dets = infer(params, &img.proposals, cfg)?;
        for class in 0..c {
            if !img.scene.has_class(class) {
                continue;
            }
            totals[class] += 1;
            let top = dets
                .iter()
                .filter(|d| d.class == class)
                .max_by(|a, b| a.score.total_cmp(&b.score));
            if let Some(d) = top {
                if img
                    .scene
                    .gt_boxes(class)
                    .iter()
                    .any(|g| iou(&d.bbox, g) >= cfg.match_iou)
                {
                    hits[class] += 1;
                }
            }
        }
    }
    let per: Vec<Option<f64>> = (0..c)
        .map(|k| (totals[k] > 0).then(|| hits[k] as f64 / totals[k] as f64))
        .collect();
    let rates: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    Ok((per, mean))
}

/// mAP on the test split plus CorLoc on the configured split.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let (per_class_ap, map, detections_per_class) = mean_ap(params, &dataset.test, cfg)?;
    let split = if cfg.corloc_on_train {
        &dataset.train
    } else {
        &dataset.test
    };
    let (per_class_corloc, cl) = corloc(params, split, cfg)?;
    Ok(EvalReport {
        per_class_ap,
        map,
        per_class_corloc,
        corloc: cl,
        detections_per_class,
    })
}

/// What the detector picks for each ground-truth object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationStats {
    pub objects: usize,
    /// Picked proposal overlaps the part (IoU >= 0.5) but not the object (IoU < 0.5).
    pub part_only: usize,
    /// Picked proposal overlaps the object at IoU >= 0.5.
    pub whole_object: usize,
}

impl LocalizationStats {
    pub fn part_rate(&self) -> f64 {
        if self.objects == 0 {
            0.0
        } else {
            self.part_only as f64 / self.objects as f64
        }
    }

    pub fn object_rate(&self) -> f64 {
        if self.objects == 0 {
            0.0
        } else {
            self.whole_object as f64 / self.objects as f64
        }
    }
}

/// For every object, the highest-scoring proposal of its class among the
/// proposals lying at least half on the object, classified as part-only or
/// whole-object. Unrefined proposal boxes are used.
pub fn localization_stats(params: &ModelParams, images: &[Image]) -> Result<LocalizationStats> {
    let mut stats = LocalizationStats::default();
    for img in images {
        let scores = final_scores(params, &img.proposals.matrix())?;
        for o in &img.scene.objects {
            stats.objects += 1;
            let pick = img
                .proposals
                .boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| crate::geometry::coverage(b, &o.object_box) >= 0.5)
                .max_by(|(a, _), (b, _)| {
                    scores[[*a, o.category]]
                        .total_cmp(&scores[[*b, o.category]])
                        .then(b.cmp(a))
                });
            let Some((_, b)) = pick else { continue };
            let obj = iou(b, &o.object_box);
            if obj >= 0.5 {
                stats.whole_object += 1;
            } else if iou(b, &o.part_box) >= 0.5 {
                stats.part_only += 1;
            }
        }
    }
    Ok(stats)
}
