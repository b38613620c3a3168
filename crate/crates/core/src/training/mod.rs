//! Optimization loop, evaluation and checkpoint scheduling.

mod adam;
mod grid;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, WeightDecay, BETA1, BETA2, EPSILON};
pub use grid::{default_lambda_grid, grid_search_lambda, GridResult, GridRow};

use crate::data::{BatchIter, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{self, dice_loss, focal_loss, total_loss, DiceMode, FocalParams, LossWeights};
use crate::metrics::{self, ConfusionMatrix, MetricsReport, SegCounts};
use crate::model::{CheckpointMeta, MultiTaskNet};

/// Optimization recipe. Defaults: 50 epochs, batch 8, Adam at lr 1e-4 with
/// weight decay 1e-5, lambda 0.7.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub focal_gamma: f64,
    /// Per-class focal weights; `None` means inverse class frequency of the
    /// training split.
    pub focal_alpha: Option<Vec<f64>>,
    pub dice_eps: f64,
    pub dice_mode: DiceMode,
    pub threshold: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-5,
            weight_decay_mode: WeightDecay::Decoupled,
            lambda: losses::DEFAULT_LAMBDA,
            seed: 0,
            eval_every: 1,
            focal_gamma: losses::DEFAULT_FOCAL_GAMMA,
            focal_alpha: None,
            dice_eps: losses::DEFAULT_DICE_EPS,
            dice_mode: DiceMode::Batch,
            threshold: metrics::DEFAULT_THRESHOLD,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be at least 1".to_string());
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            errs.push(format!("focal gamma must be >= 0, got {}", self.focal_gamma));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            errs.push(format!("dice eps must be > 0, got {}", self.dice_eps));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            errs.push(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, eps: self.dice_eps }
    }
}

/// Mean losses of one epoch, plus the test-split evaluation when scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub total_loss: f64,
    pub metrics: Option<MetricsReport>,
}

pub const HISTORY_HEADER: &str = "epoch,seg_loss,cls_loss,total_loss,accuracy,cls_f1,iou,dice,seg_f1,overall,n_samples";

/// History as CSV; metric columns are empty on epochs without evaluation.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        write!(out, "{},{},{},{},", r.epoch, r.seg_loss, r.cls_loss, r.total_loss).expect("string write");
        match &r.metrics {
            Some(m) => out.push_str(&m.metric_fields()),
            None => out.push_str(",,,,,,"),
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub net: MultiTaskNet,
    pub history: Vec<EpochRecord>,
    /// Epoch and report of the best evaluation by overall score.
    pub best: Option<(usize, MetricsReport)>,
}

impl TrainOutcome {
    /// The most recent evaluation, if any epoch was evaluated.
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.history.iter().rev().find_map(|r| r.metrics.as_ref())
    }
}

pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";

/// Predicted class per row of `[N, K]` logits (first maximum wins).
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Evaluates `net` on `ids` with dropout off.
pub fn evaluate(
    net: &MultiTaskNet,
    data: &Dataset,
    ids: &[String],
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    let k = net.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let mut seg = SegCounts::default();
    // Dropout is inactive, so this generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in BatchIter::new(data, ids, batch_size, false, 0, 0)?.channels(net.config().in_channels) {
        let out = net.forward(&batch.images, false, &mut rng)?;
        for (truth, pred) in batch.labels.iter().zip(argmax_rows(out.cls_logits.data(), k)) {
            cm.record(*truth, pred)?;
        }
        let pred_masks = metrics::threshold_logits(&out.seg_logits, threshold);
        seg.merge(SegCounts::from_masks(&pred_masks, &batch.masks)?);
    }
    MetricsReport::from_counts(&cm, &seg)
}

/// Seed offset separating the dropout stream from other uses of `seed`.
const DROPOUT_STREAM: u64 = 0x5EED_D0D0;

fn check_compat(net: &MultiTaskNet, data: &Dataset) -> Result<()> {
    let expected = net.config().input_size;
    if data.image_size() != expected {
        return Err(Error::Dimension(format!(
            "dataset images are {0}x{0} but the network expects {expected}x{expected}",
            data.image_size()
        )));
    }
    Ok(())
}

/// Resolves the focal parameters, deriving alpha from the training labels
/// when not given explicitly.
pub fn focal_params(
    cfg: &TrainConfig,
    data: &Dataset,
    split: &DatasetSplit,
    num_classes: usize,
) -> Result<FocalParams> {
    match &cfg.focal_alpha {
        Some(alpha) => {
            if alpha.len() != num_classes {
                return Err(Error::Config(vec![format!(
                    "focal alpha has {} weights for {num_classes} classes",
                    alpha.len()
                )]));
            }
            FocalParams::new(cfg.focal_gamma, alpha.clone())
        }
        None => FocalParams::inverse_frequency(cfg.focal_gamma, &data.labels_of(&split.train)?, num_classes),
    }
}

fn save(net: &MultiTaskNet, dir: &Path, file: &str, meta: CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    net.save_checkpoint(&dir.join(file), meta)
}

/// Trains `net` on the training split, evaluating on the test split every
/// `eval_every` epochs (and always after the last one).
///
/// The run is a pure function of `(net, data, split, cfg)`: batch order,
/// dropout masks and every reduction are deterministic.
pub fn train(mut net: MultiTaskNet, data: &Dataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compat(&net, data)?;
    let k = net.config().num_classes;
    let channels = net.config().in_channels;
    let focal = focal_params(cfg, data, split, k)?;
    let weights = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut adam = AdamState::new(net.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, MetricsReport)> = None;

    for epoch in 1..=cfg.epochs {
        let (mut seg_sum, mut cls_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let batches = BatchIter::new(data, &split.train, cfg.batch_size, true, cfg.seed, epoch)?.channels(channels);
        for (b, batch) in batches.enumerate() {
            let out = net.forward(&batch.images, true, &mut rng)?;
            let seg = dice_loss(&out.seg_logits, &batch.masks, cfg.dice_eps, cfg.dice_mode)?;
            let cls = focal_loss(&out.cls_logits, &batch.labels, &focal)?;
            let total = total_loss(&seg, &cls, &weights)?;
            if !total.item().is_finite() {
                return Err(Error::Divergence {
                    location: format!("epoch {epoch}, batch {b}"),
                    reason: format!("loss is {}", total.item()),
                });
            }
            total.backward()?;
            let updated =
                adam_step(net.params(), net.names(), &mut adam, cfg.lr, cfg.weight_decay, cfg.weight_decay_mode)
                    .map_err(|e| match e {
                        Error::Divergence { location, reason } => {
                            Error::Divergence { location: format!("epoch {epoch}, batch {b}, {location}"), reason }
                        }
                        other => other,
                    })?;
            net.set_params(updated)?;
            let n = batch.len();
            seg_sum += seg.item() * n as f64;
            cls_sum += cls.item() * n as f64;
            total_sum += total.item() * n as f64;
            seen += n;
        }
        let seen = seen.max(1) as f64;
        let metrics = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(evaluate(&net, data, &split.test, cfg.batch_size, cfg.threshold)?)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: total {:.5} seg {:.5} cls {:.5}{}",
            total_sum / seen,
            seg_sum / seen,
            cls_sum / seen,
            metrics.as_ref().map(|m| format!(" | {m}")).unwrap_or_default()
        );
        let meta = CheckpointMeta { epoch: epoch as u32, seed: cfg.seed, lambda: cfg.lambda };
        if let Some(m) = &metrics {
            if best.as_ref().is_none_or(|(_, b)| m.overall > b.overall) {
                best = Some((epoch, m.clone()));
                if let Some(dir) = &cfg.checkpoint_dir {
                    save(&net, dir, BEST_CHECKPOINT, meta)?;
                }
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save(&net, dir, LAST_CHECKPOINT, meta)?;
        }
        history.push(EpochRecord {
            epoch,
            seg_loss: seg_sum / seen,
            cls_loss: cls_sum / seen,
            total_loss: total_sum / seen,
            metrics,
        });
    }
    Ok(TrainOutcome { net, history, best })
}
