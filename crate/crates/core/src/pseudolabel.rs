//! Pseudo-label generation for the refinement heads.
//!
//! For head `k` the supervising scores are the MIL proposal scores (`k = 0`)
//! or the foreground columns of head `k - 1`. Per present class, the
//! top-scoring non-overlapping proposals become seeds; seeds can then be
//! screened against the negative-instance bank; finally every proposal is
//! labelled by its best-overlapping seed or as background.

use serde::{Deserialize, Serialize};

use crate::geometry::{descending_order, iou, BBox};
use crate::linalg::Matrix;
use crate::ndibank::NdiBank;

/// Seeds of one class closer than this IoU suppress each other.
pub const SEED_SUPPRESSION_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub proposal: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSeeds {
    pub class: usize,
    pub seeds: Vec<Seed>,
}

/// How the bank-distance criterion is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NgisMode {
    /// `d = 1 - max cosine`; drop seeds with `d > beta * mean(d)`.
    #[default]
    Distance,
    /// `d = max cosine`; keep only seeds with `d > beta * mean(d)`.
    Similarity,
}

impl std::str::FromStr for NgisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distance" => Ok(NgisMode::Distance),
            "similarity" => Ok(NgisMode::Similarity),
            other => Err(format!("unknown ngis mode `{other}` (expected distance|similarity)")),
        }
    }
}

/// Label of one proposal for one head. `class == num_classes` is background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalLabel {
    pub class: usize,
    pub weight: f64,
    pub target: Option<[f64; 4]>,
}

/// Labels for every proposal of one image, for one head. Indexed by proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLabels {
    pub labels: Vec<ProposalLabel>,
}

impl HeadLabels {
    pub fn positives(&self, num_classes: usize) -> impl Iterator<Item = (usize, &ProposalLabel)> {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.class < num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub heads: Vec<HeadLabels>,
}

/// Top-`p` non-overlapping seeds for every present class.
///
/// Walks proposals by descending score and keeps one when its IoU with every
/// already kept seed is below [`SEED_SUPPRESSION_IOU`], stopping once
/// `ceil(p * N)` seeds are kept.
pub fn select_candidates(scores: &Matrix, boxes: &[BBox], labels: &[f64], p: f64) -> Vec<ClassSeeds> {
    let n = boxes.len();
    let quota = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::new();
    for (c, &y) in labels.iter().enumerate() {
        if y == 0.0 {
            continue;
        }
        let col: Vec<f64> = scores.column(c).to_vec();
        let mut seeds: Vec<Seed> = Vec::new();
        for j in descending_order(&col) {
            if seeds.len() >= quota {
                break;
            }
            if seeds
                .iter()
                .all(|s| iou(&boxes[s.proposal], &boxes[j]) < SEED_SUPPRESSION_IOU)
            {
                seeds.push(Seed {
                    proposal: j,
                    score: col[j],
                });
            }
        }
        out.push(ClassSeeds { class: c, seeds });
    }
    out
}

/// Screens each class group of seeds against that class's bank queue.
///
/// Groups whose queue is empty pass through. A group is never emptied: if
/// every seed would be dropped, the one with the best criterion value stays.
pub fn ngis_filter(
    groups: &[ClassSeeds],
    features: &Matrix,
    bank: &NdiBank,
    beta: f64,
    mode: NgisMode,
) -> Vec<ClassSeeds> {
    groups
        .iter()
        .map(|g| {
            if g.seeds.is_empty() || bank.queues[g.class].is_empty() {
                return g.clone();
            }
            let values: Vec<f64> = g
                .seeds
                .iter()
                .map(|s| {
                    let sim = bank
                        .query_view(g.class, features.row(s.proposal))
                        .expect("queue checked non-empty")
                        .similarity;
                    match mode {
                        NgisMode::Distance => 1.0 - sim,
                        NgisMode::Similarity => sim,
                    }
                })
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let threshold = beta * mean;
            let keep: Vec<Seed> = g
                .seeds
                .iter()
                .zip(&values)
                .filter(|(_, &v)| match mode {
                    NgisMode::Distance => v <= threshold,
                    NgisMode::Similarity => v > threshold,
                })
                .map(|(s, _)| *s)
                .collect();
            let seeds = if keep.is_empty() {
                // retain the single most foreground-like seed
                let best = (0..values.len())
                    .reduce(|a, b| {
                        let better = match mode {
                            NgisMode::Distance => values[b] < values[a],
                            NgisMode::Similarity => values[b] > values[a],
                        };
                        if better {
                            b
                        } else {
                            a
                        }
                    })
                    .expect("non-empty group");
                vec![g.seeds[best]]
            } else {
                keep
            };
            ClassSeeds { class: g.class, seeds }
        })
        .collect()
}

/// Box deltas taking `proposal` onto `seed` (center offsets in proposal
/// units, log size ratios).
pub fn regression_targets(proposal: &BBox, seed: &BBox) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (scx, scy) = seed.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (scx - pcx) / pw,
        (scy - pcy) / ph,
        (seed.width() / pw).ln(),
        (seed.height() / ph).ln(),
    ]
}

/// Labels every proposal from its highest-IoU seed.
///
/// Proposals with IoU >= `iou_pos` to some seed take that seed's class,
/// its score as weight, and a regression target towards it. Everything else
/// is background weighted by the image's largest seed score.
pub fn assign_positives(groups: &[ClassSeeds], boxes: &[BBox], iou_pos: f64, num_classes: usize) -> HeadLabels {
    let all: Vec<(usize, Seed)> = groups
        .iter()
        .flat_map(|g| g.seeds.iter().map(move |s| (g.class, *s)))
        .collect();
    let bg_weight = all.iter().map(|(_, s)| s.score).fold(0.0, f64::max);
    let labels = boxes
        .iter()
        .map(|b| {
            let mut best: Option<(f64, usize, Seed)> = None;
            for &(c, s) in &all {
                let o = iou(b, &boxes[s.proposal]);
                if best.is_none_or(|(bo, _, _)| o > bo) {
                    best = Some((o, c, s));
                }
            }
            match best {
                Some((o, c, s)) if o >= iou_pos => ProposalLabel {
                    class: c,
                    weight: s.score,
                    target: Some(regression_targets(b, &boxes[s.proposal])),
                },
                _ => ProposalLabel {
                    class: num_classes,
                    weight: bg_weight,
                    target: None,
                },
            }
        })
        .collect();
    HeadLabels { labels }
}

/// Settings for pseudo-label generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub top_fraction: f64,
    pub iou_pos: f64,
    pub use_ngis: bool,
    pub beta: f64,
    pub mode: NgisMode,
}

/// Seeds before and after screening, for one head of one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedTrace {
    pub head: usize,
    pub candidates: Vec<ClassSeeds>,
    pub selected: Vec<ClassSeeds>,
}

/// Builds labels for all heads. `supervision[k]` is the `N x C` score matrix
/// that supervises head `k`.
pub fn build_pseudo_labels(
    supervision: &[Matrix],
    boxes: &[BBox],
    features: &Matrix,
    labels: &[f64],
    bank: &NdiBank,
    cfg: &SelectionConfig,
) -> (PseudoLabels, Vec<SeedTrace>) {
    let num_classes = labels.len();
    let mut heads = Vec::with_capacity(supervision.len());
    let mut traces = Vec::with_capacity(supervision.len());
    for (k, scores) in supervision.iter().enumerate() {
        let candidates = select_candidates(scores, boxes, labels, cfg.top_fraction);
        let selected = if cfg.use_ngis {
            ngis_filter(&candidates, features, bank, cfg.beta, cfg.mode)
        } else {
            candidates.clone()
        };
        heads.push(assign_positives(&selected, boxes, cfg.iou_pos, num_classes));
        traces.push(SeedTrace {
            head: k,
            candidates,
            selected,
        });
    }
    (PseudoLabels { heads }, traces)
}
