//! Negative-instance feature bank.
//!
//! A negative instance is a proposal scored above `tau` for a class the image
//! is known *not* to contain. Its feature is stored in that class's queue.
//! Each queue holds at most `capacity` entries. While a queue has room,
//! entries are appended. Once it is full, a new instance is blended into its
//! most similar stored entry with a confidence-weighted momentum update:
//!
//! ```text
//! nf <- ns/(ns+s) * nf + s/(ns+s) * f
//! ns <- ns/(ns+s) * ns + s/(ns+s) * s
//! ```
//!
//! The blended feature is rescaled to unit length unless the bank was built
//! with `renormalize = false`. The FIFO mode instead evicts the oldest entry.

use std::collections::VecDeque;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::linalg::{cosine, normalize, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdiEntry {
    /// Collected feature (`nf`).
    pub feature: Vec<f64>,
    /// Collected confidence (`ns`), in `[0, 1]`.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Evict the oldest entry when full.
    Fifo,
    /// Confidence-driven momentum update of the most similar entry when full.
    #[default]
    Cmu,
}

impl std::str::FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(UpdateMode::Fifo),
            "cmu" => Ok(UpdateMode::Cmu),
            other => Err(format!("unknown bank mode `{other}` (expected fifo|cmu)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeInstance {
    pub proposal: usize,
    pub class: usize,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

/// Result of a nearest-entry lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankMatch {
    pub index: usize,
    pub similarity: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdiBank {
    pub capacity: usize,
    pub mode: UpdateMode,
    pub renormalize: bool,
    pub queues: Vec<VecDeque<NdiEntry>>,
}

/// Every `(proposal, class)` pair with an absent class scored above `tau`,
/// in proposal-major order.
pub fn mine_negatives(scores: &Matrix, labels: &[f64], features: &Matrix, tau: f64) -> Vec<NegativeInstance> {
    let mut out = Vec::new();
    for (j, row) in scores.rows().into_iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            if labels[c] == 0.0 && s > tau {
                out.push(NegativeInstance {
                    proposal: j,
                    class: c,
                    confidence: s,
                    feature: features.row(j).to_vec(),
                });
            }
        }
    }
    out
}

/// One momentum step on a stored entry. `s_new` must be positive.
pub fn cmu_update(entry: &NdiEntry, f_new: &[f64], s_new: f64, renormalize: bool) -> NdiEntry {
    let ns = entry.confidence;
    let total = ns + s_new;
    let keep = ns / total;
    let take = s_new / total;
    let mut feature: Vec<f64> = entry
        .feature
        .iter()
        .zip(f_new)
        .map(|(a, b)| keep * a + take * b)
        .collect();
    if renormalize {
        normalize(&mut feature);
    }
    NdiEntry {
        feature,
        confidence: (keep * ns + take * s_new).clamp(0.0, 1.0),
    }
}

impl NdiBank {
    pub fn new(num_classes: usize, capacity: usize, mode: UpdateMode) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        NdiBank {
            capacity,
            mode,
            renormalize: true,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    /// Total number of stored entries across all queues.
    pub fn occupancy(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy() == 0
    }

    /// Nearest stored entry of `class` by cosine similarity, lowest index on ties.
    pub fn query(&self, class: usize, feature: &[f64]) -> Option<BankMatch> {
        let mut best: Option<BankMatch> = None;
        for (i, e) in self.queues[class].iter().enumerate() {
            let sim = cosine(feature, &e.feature);
            if best.is_none_or(|b| sim > b.similarity) {
                best = Some(BankMatch {
                    index: i,
                    similarity: sim,
                    confidence: e.confidence,
                });
            }
        }
        best
    }

    pub fn query_view(&self, class: usize, feature: ArrayView1<f64>) -> Option<BankMatch> {
        match feature.as_slice() {
            Some(s) => self.query(class, s),
            None => self.query(class, &feature.to_vec()),
        }
    }

    /// Inserts mined instances in order.
    pub fn insert(&mut self, negatives: &[NegativeInstance]) {
        for neg in negatives {
            self.insert_one(neg.class, &neg.feature, neg.confidence);
        }
    }

    pub fn insert_one(&mut self, class: usize, feature: &[f64], confidence: f64) {
        let capacity = self.capacity;
        let renormalize = self.renormalize;
        let mode = self.mode;
        let entry = NdiEntry {
            feature: feature.to_vec(),
            confidence: confidence.clamp(0.0, 1.0),
        };
        if self.queues[class].len() < capacity {
            self.queues[class].push_back(entry);
            return;
        }
        match mode {
            UpdateMode::Fifo => {
                let q = &mut self.queues[class];
                q.pop_front();
                q.push_back(entry);
            }
            UpdateMode::Cmu => {
                let target = self.query(class, feature).expect("full queue has entries").index;
                let q = &mut self.queues[class];
                q[target] = cmu_update(&q[target], feature, entry.confidence, renormalize);
            }
        }
    }
}
