//! Loss, mini-batch training with early stopping, and cross-validation.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold, PatientStudy};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_report, roc_auc, EvalReport, FoldMetrics};
use crate::model::{parse, stack_studies, ModelConfig, ScaNet};
use crate::tensor::{AdamW, AdamWConfig, Tensor};

pub const PROB_FLOOR: f32 = 1e-7;

/// Mean of `-ln p[label]` over rows of `[B, 2]`, with `p` clamped below at
/// 1e-7.
pub fn cross_entropy_loss(probabilities: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let shape = probabilities.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("probabilities {shape:?} for {} labels", labels.len()),
        ));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("label {l} is not 0 or 1")));
    }
    let cols: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    Ok(probabilities.clamp_min(PROB_FLOOR).pick(&cols)?.ln()?.mean().scale(-1.0))
}

fn loss_f64(p: &[[f32; 2]], labels: &[u8]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(labels)
        .map(|(row, &l)| -(row[l as usize].max(PROB_FLOOR) as f64).ln())
        .sum();
    total / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub patience: usize,
    pub min_delta: f64,
    /// Held-out share of the training studies used for early stopping.
    /// `None` monitors the training set itself.
    pub validation_fraction: Option<f64>,
    /// Stop as soon as the monitored AUC reaches this value.
    pub target_auc: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 12,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 20,
            min_delta: 1e-4,
            validation_fraction: Some(0.15),
            target_auc: None,
            seed: 0,
        }
    }

    /// Batch 8 and learning rate 1e-3 for the 128-study toy cohort.
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            ..Self::paper_scale()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience < 1 {
            return fail("patience must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be at least 1".into());
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 0.5) {
                return fail(format!("validation_fraction {f} outside (0, 0.5)"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return fail("learning_rate must be positive; weight_decay and min_delta non-negative".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        vec![
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("patience", self.patience.to_string()),
            ("min_delta", self.min_delta.to_string()),
            ("validation_fraction", opt(self.validation_fraction)),
            ("target_auc", opt(self.target_auc)),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its `key = value` form; `Ok(false)` for keys this
    /// config does not own. Optional fields accept `none`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let opt = |v: &str| -> Result<Option<f64>> {
            if v.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        };
        match key {
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "min_delta" => self.min_delta = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = opt(v)?,
            "target_auc" => self.target_auc = opt(v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Patience-based stopping on a monitored loss. Epochs are 1-based.
///
/// The best epoch is the one with the strictly lowest loss so far. The
/// patience counter resets only on an improvement larger than `min_delta`
/// over the loss that last reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best_loss: f64,
    best_epoch: usize,
    reference: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            reference: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Progress {
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_epoch = epoch;
        }
        if loss < self.reference - self.min_delta {
            self.reference = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience {
            Progress::Stop
        } else if improved {
            Progress::Improved
        } else {
            Progress::Waiting
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    TargetAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_auc`; an undefined AUC is left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_auc\n");
        for e in &self.epochs {
            let auc = e.val_auc.map_or(String::new(), |a| format!("{a:.17}"));
            let _ = writeln!(s, "{},{:.17},{:.17},{}", e.epoch, e.train_loss, e.val_loss, auc);
        }
        s
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_params: Vec<Vec<f32>>,
}

/// Splits indices into (train, validation), taking `fraction` of each class
/// (at least one, leaving at least one) for validation.
fn holdout(labels: &[u8], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let take = ((members.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Evaluation-mode class probabilities, in chunks of `batch` studies.
pub fn predict_all(model: &ScaNet, studies: &[&PatientStudy], batch: usize) -> Result<Vec<[f32; 2]>> {
    let mut out = Vec::with_capacity(studies.len());
    for chunk in studies.chunks(batch.max(1)) {
        out.extend(model.predict(chunk, false)?.0);
    }
    Ok(out)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// monitored-loss epoch.
pub fn train(model: &ScaNet, studies: &[&PatientStudy], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, studies, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &ScaNet,
    studies: &[&PatientStudy],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if studies.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Argument("training set must contain both classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = match cfg.validation_fraction {
        Some(f) => holdout(&labels, f, &mut rng),
        None => ((0..studies.len()).collect(), (0..studies.len()).collect()),
    };
    let val_studies: Vec<&PatientStudy> = val_idx.iter().map(|&i| studies[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let params = model.params();
    let mut opt = AdamW::new(params.tensors(), cfg.adamw())?;
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best_params = params.snapshot();
    let mut epochs = Vec::new();
    let mut order = train_idx.clone();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let members: Vec<&PatientStudy> = batch.iter().map(|&i| studies[i]).collect();
            let batch_labels: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            opt.zero_grad();
            let out = model.forward(&stack_studies(&members)?, Some(&mut rng), false)?;
            let loss = cross_entropy_loss(&out.probabilities, &batch_labels)?;
            let value = loss.item_f64()?;
            if !value.is_finite() {
                return Err(Error::Numeric {
                    op: "train",
                    detail: format!("non-finite loss at epoch {epoch}"),
                });
            }
            total += value * batch.len() as f64;
            loss.backward()?;
            opt.step();
        }
        let train_loss = total / order.len() as f64;
        let p = predict_all(model, &val_studies, cfg.batch_size)?;
        let val_loss = loss_f64(&p, &val_labels);
        let scores: Vec<f64> = p.iter().map(|r| r[1] as f64).collect();
        let val_auc = roc_auc(&scores, &val_labels).ok();
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        };
        on_epoch(&record);
        epochs.push(record);
        let progress = stopper.observe(epoch, val_loss);
        if stopper.best_epoch() == epoch {
            best_params = params.snapshot();
        }
        if cfg.target_auc.is_some_and(|t| val_auc.is_some_and(|a| a >= t)) {
            stop_reason = StopReason::TargetAuc;
            break;
        }
        if progress == Progress::Stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    params.restore(&best_params)?;
    Ok(TrainOutcome {
        history: TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            stop_reason,
        },
        best_params,
    })
}

/// Held-out predictions and training history of one fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub probabilities: Vec<[f32; 2]>,
    pub history: TrainHistory,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: EvalReport,
    pub folds: Vec<FoldRun>,
}

/// Model seed for one fold, shared across model variants so ablations
/// start from comparable draws.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stratified `k`-fold cross-validation. Folds run on up to `threads`
/// worker threads, each with its own model; results do not depend on the
/// thread count.
pub fn cross_validate(
    studies: &[PatientStudy],
    k: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threads: usize,
) -> Result<CrossValidation> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
    let folds = stratified_kfold(&labels, k, train_cfg.seed)?;
    let run_fold = |i: usize| -> Result<FoldRun> {
        let test = &folds[i];
        let train_set: Vec<&PatientStudy> = (0..studies.len())
            .filter(|j| test.binary_search(j).is_err())
            .map(|j| &studies[j])
            .collect();
        let seed = fold_seed(train_cfg.seed, i);
        let model = ScaNet::new(model_cfg, seed)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let outcome = train(&model, &train_set, &cfg)?;
        let test_set: Vec<&PatientStudy> = test.iter().map(|&j| &studies[j]).collect();
        let p = predict_all(&model, &test_set, cfg.batch_size)?;
        let scores: Vec<f64> = p.iter().map(|r| r[1] as f64).collect();
        let test_labels: Vec<u8> = test.iter().map(|&j| labels[j]).collect();
        Ok(FoldRun {
            fold: i,
            test_indices: test.clone(),
            metrics: FoldMetrics::evaluate(i, &scores, &test_labels)?,
            probabilities: p,
            history: outcome.history,
        })
    };

    let workers = threads.clamp(1, k);
    let runs: Vec<Result<FoldRun>> = if workers == 1 {
        (0..k).map(run_fold).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<FoldRun>>>> = Mutex::new((0..k).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= k {
                        break;
                    }
                    let r = run_fold(i);
                    slots.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("no worker panicked")
            .into_iter()
            .map(|r| r.expect("every fold ran"))
            .collect()
    };
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let report = aggregate_report(
        &model_cfg.variant.to_string(),
        runs.iter().map(|r| r.metrics.clone()).collect(),
    )?;
    Ok(CrossValidation { report, folds: runs })
}
