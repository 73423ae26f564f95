//! Synthetic proposal-feature benchmark.
//!
//! Each scene holds one to three objects. Every object has a small
//! discriminative *part* region and a larger *body*. Proposal features mix
//! per-category signatures in proportion to how much of the part, body and
//! background a proposal covers:
//!
//! ```text
//! w_part = coverage(part_box, proposal)
//! w_body = max(0, coverage(object_box, proposal) - w_part * area(part) / area(object))
//! w_bg   = 1 - max_objects coverage(proposal, object_box)
//! f      = normalize( sum_objects (w_part * part_sig[c] + w_body * body_sig[c]) + w_bg * bg + eps )
//! ```
//!
//! Part signatures are mutually orthogonal, body signatures share a common
//! direction (pairwise cosine `body_similarity`). A proposal tight around the part is
//! therefore the most class-separable region in the image, which is what
//! drives a plain MIL head towards part-only detections.
//!
//! Scenes may also contain *distractors*: background clutter carrying a
//! weakened part signature of a category that is absent from the image.
//! These are the regions a detector confidently gets wrong, i.e. the raw
//! material of the negative-instance bank.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coverage, iou, BBox};
use crate::linalg::{normalize, Matrix};

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub proposals_per_image: usize,
    /// Standard deviation of the per-coordinate Gaussian feature noise.
    pub noise: f64,
    pub max_objects: usize,
    /// Probability that a scene carries a distractor region.
    pub distractor_rate: f64,
    /// Weight of the part signature inside a distractor region.
    pub distractor_strength: f64,
    /// Cosine between the body signatures of two distinct categories.
    pub body_similarity: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_classes: 5,
            feature_dim: 32,
            train_images: 200,
            test_images: 100,
            proposals_per_image: 50,
            noise: 0.05,
            max_objects: 3,
            distractor_rate: 0.4,
            distractor_strength: 0.8,
            body_similarity: 0.9,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.feature_dim < 8 {
            return Err(Error::config("feature_dim", "must be at least 8"));
        }
        if self.feature_dim < 2 * self.num_classes + 1 {
            return Err(Error::config(
                "feature_dim",
                format!("must be at least 2*num_classes+1 = {}", 2 * self.num_classes + 1),
            ));
        }
        if self.train_images < 1 {
            return Err(Error::config("train_images", "must be at least 1"));
        }
        if self.test_images < 1 {
            return Err(Error::config("test_images", "must be at least 1"));
        }
        if self.proposals_per_image < 10 {
            return Err(Error::config("proposals_per_image", "must be at least 10"));
        }
        if !(1..=3).contains(&self.max_objects) {
            return Err(Error::config("max_objects", "must be in 1..=3"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::config("distractor_rate", "must lie in [0, 1]"));
        }
        if !(self.distractor_strength.is_finite() && self.distractor_strength >= 0.0) {
            return Err(Error::config("distractor_strength", "must be finite and non-negative"));
        }
        if !(0.6..1.0).contains(&self.body_similarity) {
            return Err(Error::config("body_similarity", "must lie in [0.6, 1)"));
        }
        Ok(())
    }
}

/// Per-category unit signatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySignatures {
    pub part: Vec<Vec<f64>>,
    pub body: Vec<Vec<f64>>,
}

impl CategorySignatures {
    pub fn num_classes(&self) -> usize {
        self.part.len()
    }

    pub fn dim(&self) -> usize {
        self.part.first().map_or(0, Vec::len)
    }
}

fn make_signatures(rng: &mut ChaCha8Rng, classes: usize, dim: usize, shared_cos: f64) -> CategorySignatures {
    // Gram-Schmidt over 2C+1 Gaussian draws: C part directions, one shared
    // body direction, C body-specific directions.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * classes + 1);
    while basis.len() < 2 * classes + 1 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        if normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    let part = basis[..classes].to_vec();
    let shared = &basis[classes];
    let body = basis[classes + 1..]
        .iter()
        .map(|own| {
            let mut b: Vec<f64> = shared
                .iter()
                .zip(own)
                .map(|(s, o)| shared_cos.sqrt() * s + (1.0 - shared_cos).sqrt() * o)
                .collect();
            normalize(&mut b);
            b
        })
        .collect();
    CategorySignatures { part, body }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub object_box: BBox,
    pub part_box: BBox,
}

/// Part-like clutter of a category absent from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub category: usize,
    pub region: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    /// Multi-hot image labels, one entry per category.
    pub labels: Vec<u8>,
}

impl Scene {
    pub fn has_class(&self, c: usize) -> bool {
        self.labels.get(c).is_some_and(|&y| y == 1)
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    pub fn gt_boxes(&self, c: usize) -> Vec<BBox> {
        self.objects
            .iter()
            .filter(|o| o.category == c)
            .map(|o| o.object_box)
            .collect()
    }

    /// Labels agree with the object list.
    pub fn labels_consistent(&self) -> bool {
        self.labels.iter().enumerate().all(|(c, &y)| {
            let present = self.objects.iter().any(|o| o.category == c);
            (y == 1) == present && y <= 1
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Features as an `N x D` matrix.
    pub fn matrix(&self) -> Matrix {
        let n = self.features.len();
        let d = self.features.first().map_or(0, Vec::len);
        Matrix::from_shape_fn((n, d), |(i, j)| self.features[i][j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub scene: Scene,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub signatures: CategorySignatures,
    pub train: Vec<Image>,
    pub test: Vec<Image>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Structural checks run after loading a dataset from disk.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (c, d) = (self.num_classes(), self.feature_dim());
        if self.signatures.num_classes() != c || self.signatures.dim() != d {
            return Err(Error::shape(
                "signatures",
                format!("{c}x{d}"),
                format!("{}x{}", self.signatures.num_classes(), self.signatures.dim()),
            ));
        }
        for img in self.train.iter().chain(&self.test) {
            if img.scene.labels.len() != c || !img.scene.labels_consistent() {
                return Err(Error::Invalid("scene labels disagree with objects".into()));
            }
            if img.proposals.is_empty() || img.proposals.features.len() != img.proposals.len() {
                return Err(Error::Invalid("proposal set empty or ragged".into()));
            }
            for f in &img.proposals.features {
                if f.len() != d {
                    return Err(Error::shape("proposal feature", d, f.len()));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid("non-finite proposal feature".into()));
                }
            }
        }
        Ok(())
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes()];
        for img in &self.train {
            for (c, &y) in img.scene.labels.iter().enumerate() {
                hist[c] += y as usize;
            }
        }
        hist
    }
}

/// Generates a full dataset. Deterministic in `(config, seed)`.
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures = make_signatures(&mut rng, config.num_classes, config.feature_dim, config.body_similarity);

    let mut train = None;
    for _ in 0..100 {
        let split = generate_split(config, &signatures, config.train_images, &mut rng);
        let covered = (0..config.num_classes).all(|c| split.iter().any(|img| img.scene.has_class(c)));
        if covered {
            train = Some(split);
            break;
        }
    }
    let train = train.ok_or_else(|| Error::config("train_images", "too few scenes to cover every category"))?;
    let test = generate_split(config, &signatures, config.test_images, &mut rng);
    Ok(Dataset {
        config: config.clone(),
        seed,
        signatures,
        train,
        test,
    })
}

fn generate_split(config: &GenConfig, sigs: &CategorySignatures, count: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (0..count)
        .map(|_| {
            let scene = generate_scene(config, rng);
            let boxes = generate_proposal_boxes(config, &scene, rng);
            let features = boxes
                .iter()
                .map(|b| proposal_feature(b, &scene, sigs, config, rng))
                .collect();
            Image {
                scene,
                proposals: ProposalSet { boxes, features },
            }
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x = rng.random_range(0.0..(1.0 - w));
    let y = rng.random_range(0.0..(1.0 - h));
    BBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

fn generate_scene(config: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    let classes = config.num_classes;
    let n_objects = rng.random_range(1..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..n_objects {
        let category = rng.random_range(0..classes);
        let mut placed = None;
        for _ in 0..50 {
            let object_box = random_box(rng, 0.25, 0.5);
            if objects.iter().all(|o| iou(&o.object_box, &object_box) < 0.1) {
                placed = Some(object_box);
                break;
            }
        }
        let Some(object_box) = placed else { continue };
        let part_box = place_part(rng, &object_box);
        objects.push(SceneObject {
            category,
            object_box,
            part_box,
        });
    }
    debug_assert!(!objects.is_empty(), "first placement never collides");
    let mut labels = vec![0u8; classes];
    for o in &objects {
        labels[o.category] = 1;
    }

    let mut distractors = Vec::new();
    if rng.random::<f64>() < config.distractor_rate {
        let absent: Vec<usize> = (0..classes).filter(|&c| labels[c] == 0).collect();
        if !absent.is_empty() {
            let category = absent[rng.random_range(0..absent.len())];
            for _ in 0..50 {
                let region = random_box(rng, 0.1, 0.2);
                if objects.iter().all(|o| coverage(&region, &o.object_box) < 0.05) {
                    distractors.push(Distractor { category, region });
                    break;
                }
            }
        }
    }
    Scene {
        objects,
        distractors,
        labels,
    }
}

/// A part covering 12-28% of the object's area, strictly inside it.
fn place_part(rng: &mut ChaCha8Rng, object: &BBox) -> BBox {
    let (w, h) = (object.width(), object.height());
    let ratio = rng.random_range(0.12..0.28);
    let aspect: f64 = rng.random_range(0.8..1.25);
    let target = ratio * w * h;
    let pw = (target * aspect).sqrt().min(0.9 * w);
    let ph = (target / pw).min(0.9 * h);
    let margin_x = 0.02 * w;
    let margin_y = 0.02 * h;
    let x = object.x1 + margin_x + rng.random::<f64>() * (w - pw - 2.0 * margin_x);
    let y = object.y1 + margin_y + rng.random::<f64>() * (h - ph - 2.0 * margin_y);
    BBox {
        x1: x,
        y1: y,
        x2: x + pw,
        y2: y + ph,
    }
}

/// Jitters every side by Gaussian noise proportional to the box size and
/// retries until `accept` holds; falls back to `fallback` after 100 tries.
fn jitter_until(rng: &mut ChaCha8Rng, base: &BBox, scale: f64, accept: impl Fn(&BBox) -> bool, fallback: BBox) -> BBox {
    let (w, h) = (base.width(), base.height());
    for _ in 0..100 {
        let mut d = [0.0f64; 4];
        for v in d.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * scale;
        }
        let x1 = (base.x1 + d[0] * w).clamp(0.0, 1.0);
        let y1 = (base.y1 + d[1] * h).clamp(0.0, 1.0);
        let x2 = (base.x2 + d[2] * w).clamp(0.0, 1.0);
        let y2 = (base.y2 + d[3] * h).clamp(0.0, 1.0);
        if let Ok(b) = BBox::new(x1, y1, x2, y2) {
            if accept(&b) {
                return b;
            }
        }
    }
    fallback
}

fn generate_proposal_boxes(config: &GenConfig, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let n = config.proposals_per_image;
    // mandatory: one full-object and one part-only proposal per object, one per distractor
    let mut mandatory = Vec::new();
    let mut optional = Vec::new();
    for o in &scene.objects {
        let ob = o.object_box;
        let pb = o.part_box;
        let full = |b: &BBox| iou(b, &ob) >= 0.7;
        let part_only = |b: &BBox| iou(b, &pb) >= 0.5 && iou(b, &ob) < 0.4;
        mandatory.push(jitter_until(rng, &ob, 0.05, full, ob));
        mandatory.push(jitter_until(rng, &pb, 0.08, part_only, pb));
        for _ in 0..rng.random_range(0..=2) {
            optional.push(jitter_until(rng, &ob, 0.06, full, ob));
        }
        for _ in 0..rng.random_range(0..=1) {
            optional.push(jitter_until(rng, &pb, 0.08, part_only, pb));
        }
        // partial views: random boxes centered somewhere on the object
        for _ in 0..rng.random_range(1..=3) {
            let (cx, cy) = (rng.random_range(ob.x1..ob.x2), rng.random_range(ob.y1..ob.y2));
            let s = rng.random_range(0.4..1.1);
            optional.push(BBox::from_center_clipped(cx, cy, s * ob.width(), s * ob.height(), 0.02));
        }
    }
    for d in &scene.distractors {
        let r = d.region;
        mandatory.push(jitter_until(rng, &r, 0.05, |b| iou(b, &r) >= 0.6, r));
    }
    let mut boxes = mandatory;
    for b in optional {
        if boxes.len() < n {
            boxes.push(b);
        }
    }
    boxes.truncate(n);
    while boxes.len() < n {
        boxes.push(random_box(rng, 0.05, 0.6));
    }
    boxes.shuffle(rng);
    boxes
}

/// Feature of one proposal; see the module docs for the mixing rule.
///
/// Draws a fresh background direction and, when `config.noise > 0`, a
/// Gaussian perturbation from `rng`.
pub fn proposal_feature(
    proposal: &BBox,
    scene: &Scene,
    sigs: &CategorySignatures,
    config: &GenConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let d = sigs.dim();
    let mut f = vec![0.0; d];
    let mut max_cov = 0.0f64;
    for o in &scene.objects {
        let (w_part, w_body) = mixing_weights(proposal, o);
        let c = o.category;
        for ((v, p), b) in f.iter_mut().zip(&sigs.part[c]).zip(&sigs.body[c]) {
            *v += w_part * p + w_body * b;
        }
        max_cov = max_cov.max(coverage(proposal, &o.object_box));
    }
    for dis in &scene.distractors {
        let w = config.distractor_strength * coverage(&dis.region, proposal);
        for (v, p) in f.iter_mut().zip(&sigs.part[dis.category]) {
            *v += w * p;
        }
    }
    let w_bg = 1.0 - max_cov;
    let mut bg: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut bg);
    for k in 0..d {
        f[k] += w_bg * bg[k];
    }
    if config.noise > 0.0 {
        for v in f.iter_mut() {
            *v += config.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if normalize(&mut f) == 0.0 {
        f = bg;
    }
    f
}

/// `(w_part, w_body)` of a proposal with respect to one object.
pub fn mixing_weights(proposal: &BBox, object: &SceneObject) -> (f64, f64) {
    let w_part = coverage(&object.part_box, proposal);
    let part_ratio = object.part_box.area() / object.object_box.area();
    let w_body = (coverage(&object.object_box, proposal) - w_part * part_ratio).max(0.0);
    (w_part, w_body)
}
