//! The training loop.
//!
//! One image per step: MIL forward, negative mining into the bank, seed
//! selection for every refinement head, analytic gradients of the total
//! loss, then an SGD step with momentum and weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::linalg::Matrix;
use crate::losses::{HyperParams, LossFlags};
use crate::ndibank::{mine_negatives, NdiBank, UpdateMode};
use crate::network::{grad_params, mil_forward, refine_forward, Batch, ModelParams};
use crate::pseudolabel::{build_pseudo_labels, NgisMode, SeedTrace, SelectionConfig};
use crate::synthgen::Dataset;

/// Flat training configuration. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub queue_len: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters: usize,
    /// Number of refinement heads.
    pub heads: usize,
    /// Iteration at which the learning rate is multiplied by `lr_decay`.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub top_fraction: f64,
    pub iou_pos: f64,
    pub use_cmu: bool,
    pub use_nice: bool,
    pub use_ncl: bool,
    pub use_ngis: bool,
    pub ngis_mode: NgisMode,
    pub renormalize_bank: bool,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        TrainConfig {
            tau: hp.tau,
            alpha: hp.alpha,
            beta: hp.beta,
            queue_len: hp.queue_len,
            lr: hp.lr,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
            iters: hp.iters,
            heads: 3,
            lr_step: 1500,
            lr_decay: 0.1,
            top_fraction: 0.15,
            iou_pos: 0.5,
            use_cmu: true,
            use_nice: true,
            use_ncl: true,
            use_ngis: true,
            ngis_mode: NgisMode::Distance,
            renormalize_bank: true,
            nms_iou: 0.3,
            score_floor: 1e-3,
            seed: 0,
        }
    }
}

/// Named flag combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// MIL plus refinement only, plain top-fraction seeds.
    Baseline,
    /// Baseline with the contrastive term (bank built with CMU and NICE).
    Ncl,
    /// Baseline with bank-guided seed screening (bank built with CMU and NICE).
    Ngis,
    Full,
    /// Full method with a FIFO bank and no NICE term.
    Fifo,
    /// Full method without the NICE term.
    Cmu,
    /// Full method, listed under the bank-construction sweep.
    #[serde(rename = "cmu+nice")]
    CmuNice,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::Baseline, Variant::Ncl, Variant::Ngis, Variant::Full];
    pub const BANK: [Variant; 3] = [Variant::Fifo, Variant::Cmu, Variant::CmuNice];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ncl => "ncl",
            Variant::Ngis => "ngis",
            Variant::Full => "full",
            Variant::Fifo => "fifo",
            Variant::Cmu => "cmu",
            Variant::CmuNice => "cmu+nice",
        }
    }

    /// `(use_cmu, use_nice, use_ncl, use_ngis)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false, false),
            Variant::Ncl => (true, true, true, false),
            Variant::Ngis => (true, true, false, true),
            Variant::Full | Variant::CmuNice => (true, true, true, true),
            Variant::Fifo => (false, false, true, true),
            Variant::Cmu => (true, false, true, true),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (cmu, nice, ncl, ngis) = self.flags();
        cfg.use_cmu = cmu;
        cfg.use_nice = nice;
        cfg.use_ncl = ncl;
        cfg.use_ngis = ngis;
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ABLATION
            .iter()
            .chain(Variant::BANK.iter())
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &'static str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        check(self.iters >= 1, "iters", "must be at least 1")?;
        check(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            "lr_decay",
            "must lie in (0, 1]",
        )?;
        check(self.heads >= 1, "heads", "must be at least 1")?;
        check(self.queue_len >= 1, "queue_len", "must be at least 1")?;
        check(self.lr.is_finite() && self.lr > 0.0, "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be non-negative",
        )?;
        check((0.0..1.0).contains(&self.tau), "tau", "must lie in [0, 1)")?;
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha",
            "must be non-negative",
        )?;
        check(self.beta > 0.0, "beta", "must be positive")?;
        check(
            self.top_fraction > 0.0 && self.top_fraction <= 1.0,
            "top_fraction",
            "must lie in (0, 1]",
        )?;
        check(
            self.iou_pos > 0.0 && self.iou_pos <= 1.0,
            "iou_pos",
            "must lie in (0, 1]",
        )?;
        check((0.0..=1.0).contains(&self.nms_iou), "nms_iou", "must lie in [0, 1]")?;
        check(self.score_floor >= 0.0, "score_floor", "must be non-negative")
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            queue_len: self.queue_len,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            iters: self.iters,
        }
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            nice: self.use_nice,
            ncl: self.use_ncl,
            ..LossFlags::BASE
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            top_fraction: self.top_fraction,
            iou_pos: self.iou_pos,
            use_ngis: self.use_ngis,
            beta: self.beta,
            mode: self.ngis_mode,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            nms_iou: self.nms_iou,
            score_floor: self.score_floor,
            ..EvalConfig::default()
        }
    }

    pub fn bank_mode(&self) -> UpdateMode {
        if self.use_cmu {
            UpdateMode::Cmu
        } else {
            UpdateMode::Fifo
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.lr_step {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// `v <- momentum * v + g + weight_decay * p`, then `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut ModelParams,
) {
    let grads = grads.tensors();
    for ((p, v), g) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads) {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
}

/// Per-iteration loss values, one entry per term. Disabled terms are
/// logged as zero so `total` is exactly the sum of the other columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub image: Vec<usize>,
    pub lr: Vec<f64>,
    pub mil: Vec<f64>,
    pub ref_cls: Vec<f64>,
    pub ref_reg: Vec<f64>,
    pub nice: Vec<f64>,
    pub ncl: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossCurves {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// One CSV row per iteration, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,image,lr,mil,ref_cls,ref_reg,nice,ncl,total\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i,
                self.image[i],
                self.lr[i],
                self.mil[i],
                self.ref_cls[i],
                self.ref_reg[i],
                self.nice[i],
                self.ncl[i],
                self.total[i]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub curves: LossCurves,
    /// Total number of bank entries after each iteration.
    pub bank_occupancy: Vec<usize>,
    pub metrics: EvalReport,
    /// Kept out of the serialized report so identical runs give identical
    /// files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Everything the observer sees for one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub image: usize,
    pub negatives: usize,
    pub seeds: Vec<SeedTrace>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub bank: NdiBank,
    pub report: TrainReport,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_observer(config, dataset, |_| {})
}

pub fn train_with_observer(
    config: &TrainConfig,
    dataset: &Dataset,
    mut observer: impl FnMut(&IterationTrace),
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let start = std::time::Instant::now();
    let c = dataset.num_classes();
    let hp = config.hyper();
    let flags = config.loss_flags();
    let selection = config.selection();

    let inputs: Vec<(Matrix, Vec<f64>)> = dataset
        .train
        .iter()
        .map(|img| (img.proposals.matrix(), img.scene.labels_f64()))
        .collect();

    let mut params = ModelParams::init(dataset.feature_dim(), c, config.heads, config.seed);
    let mut velocity = params.zeros_like();
    let mut bank = NdiBank::new(c, config.queue_len, config.bank_mode());
    bank.renormalize = config.renormalize_bank;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4500);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();

    let mut curves = LossCurves::default();
    let mut occupancy = Vec::with_capacity(config.iters);

    for it in 0..config.iters {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = order[cursor];
        cursor += 1;
        let (x, y) = &inputs[idx];
        let boxes = &dataset.train[idx].proposals.boxes;

        let mil = mil_forward(&params, x)?;
        let negatives = mine_negatives(&mil.scores, y, x, hp.tau);
        bank.insert(&negatives);

        let refine = refine_forward(&params, x)?;
        let mut supervision = Vec::with_capacity(config.heads);
        supervision.push(mil.scores);
        for k in 0..config.heads - 1 {
            supervision.push(refine.foreground(k));
        }
        let (pseudo, seeds) = build_pseudo_labels(&supervision, boxes, x, y, &bank, &selection);
        observer(&IterationTrace {
            iteration: it,
            image: idx,
            negatives: negatives.len(),
            seeds,
        });

        let (grads, losses) = grad_params(&params, Batch { features: x, labels: y }, &pseudo, &bank, &hp, flags)?;
        if let Some(term) = losses.non_finite_term() {
            return Err(Error::Diverged { term, iteration: it });
        }
        let lr = config.lr_at(it);
        sgd_step(
            &mut params,
            &grads,
            lr,
            config.momentum,
            config.weight_decay,
            &mut velocity,
        );
        if !params.is_finite() {
            return Err(Error::Diverged {
                term: "parameters",
                iteration: it,
            });
        }

        let nice = if flags.nice { losses.nice } else { 0.0 };
        let ncl = if flags.ncl { losses.ncl } else { 0.0 };
        curves.image.push(idx);
        curves.lr.push(lr);
        curves.mil.push(losses.mil);
        curves.ref_cls.push(losses.ref_cls);
        curves.ref_reg.push(losses.ref_reg);
        curves.nice.push(nice);
        curves.ncl.push(ncl);
        curves.total.push(crate::losses::total_loss(
            losses.mil,
            losses.refine(),
            nice,
            ncl,
            LossFlags::ALL,
        ));
        occupancy.push(bank.occupancy());
    }

    let metrics = evaluate(&params, dataset, &config.eval_config())?;
    let report = TrainReport {
        config_hash: config.hash(),
        curves,
        bank_occupancy: occupancy,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { params, bank, report })
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    #[serde(rename = "L")]
    pub queue_len: usize,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub corloc: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,L,seed,mAP,corloc";

/// Queue lengths swept for the bank-construction variants.
pub const QUEUE_SWEEP: [usize; 5] = [1, 3, 5, 7, 9];

/// The cells of the full grid, in output order: the four ablation variants
/// at the base queue length, then each bank variant over [`QUEUE_SWEEP`],
/// each for every seed.
pub fn ablation_cells(base: &TrainConfig, seeds: &[u64]) -> Vec<(Variant, usize, u64)> {
    let mut cells = Vec::new();
    for v in Variant::ABLATION {
        for &s in seeds {
            cells.push((v, base.queue_len, s));
        }
    }
    for v in Variant::BANK {
        for l in QUEUE_SWEEP {
            for &s in seeds {
                cells.push((v, l, s));
            }
        }
    }
    cells
}

/// Trains and evaluates `cells` in parallel; rows come back in cell order.
pub fn run_cells(dataset: &Dataset, base: &TrainConfig, cells: &[(Variant, usize, u64)]) -> Result<Vec<AblationRow>> {
    cells
        .par_iter()
        .map(|&(variant, queue_len, seed)| {
            let mut cfg = base.clone();
            variant.apply(&mut cfg);
            cfg.queue_len = queue_len;
            cfg.seed = seed;
            let out = train(&cfg, dataset)?;
            Ok(AblationRow {
                variant,
                queue_len,
                seed,
                map: out.report.metrics.map,
                corloc: out.report.metrics.corloc,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant.name(),
            r.queue_len,
            r.seed,
            r.map,
            r.corloc
        ));
    }
    out
}

/// Seed means per `(variant, L)`, in first-seen order.
pub fn seed_means(rows: &[AblationRow]) -> Vec<(Variant, usize, f64, f64)> {
    let mut out: Vec<(Variant, usize, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|e| e.0 == r.variant && e.1 == r.queue_len) {
            Some(e) => {
                e.2 += r.map;
                e.3 += r.corloc;
                e.4 += 1;
            }
            None => out.push((r.variant, r.queue_len, r.map, r.corloc, 1)),
        }
    }
    out.into_iter()
        .map(|(v, l, m, c, n)| (v, l, m / n as f64, c / n as f64))
        .collect()
}
