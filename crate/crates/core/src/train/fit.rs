use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, cosine_warmup_lr, AdamState, AdamW, GroupRates};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{targets_tensor, HistAid, SampleInput};
use crate::nn::{Forward, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Peak rate for the embedding adapters; `None` means
    /// `1e-5 * batch_size / 64`.
    pub peak_lr_encoder: Option<f64>,
    /// Peak rate for everything else; `None` means `1e-4 * batch_size / 64`.
    pub peak_lr_tst: Option<f64>,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Weight on the positive term of the loss; 1 disables weighting.
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            peak_lr_encoder: None,
            peak_lr_tst: None,
            epochs: 15,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            warmup_frac: 0.1,
            min_lr_ratio: 1e-3,
            seed: 0,
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn lr_encoder(&self) -> f64 {
        self.peak_lr_encoder.unwrap_or(1e-5 * self.batch_size as f64 / 64.0)
    }

    pub fn lr_tst(&self) -> f64 {
        self.peak_lr_tst.unwrap_or(1e-4 * self.batch_size as f64 / 64.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be at least 1"));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config(format!("warmup_frac must lie in (0, 1), got {}", self.warmup_frac)));
        }
        for (name, v) in [
            ("encoder learning rate", self.lr_encoder()),
            ("tst learning rate", self.lr_tst()),
            ("weight_decay", self.weight_decay),
            ("min_lr_ratio", self.min_lr_ratio),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::config("pos_weight must be positive"));
        }
        Ok(())
    }
}

/// A model input with its 0/1 targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: SampleInput,
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro AUROC on the validation set; `None` when no label is defined.
    pub val_auroc: Option<f64>,
    pub lr_encoder: f64,
    pub lr_tst: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub best_params: ParamStore,
}

/// Raw logits for every example, row per example.
pub fn predict_all(model: &HistAid, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.iter().map(|e| model.predict(&e.input)).collect()
}

/// Macro AUROC over the labels defined in `examples`.
pub fn mean_auroc(model: &HistAid, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let scores = predict_all(model, examples)?;
    let targets: Vec<Vec<f64>> = examples.iter().map(|e| e.targets.clone()).collect();
    let labels: Vec<String> = (0..model.cfg.num_labels).map(|i| i.to_string()).collect();
    Ok(evaluate(&labels, &scores, &targets, None)?.macro_auroc)
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Train with seeded shuffling, two learning-rate groups and a cosine
/// schedule with warmup. Validation AUROC is measured after every epoch and
/// the best snapshot (earliest on ties) is loaded back into `model`.
pub fn fit(model: &mut HistAid, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let c = model.cfg.num_labels;
    if let Some(e) = train.iter().chain(val).find(|e| e.targets.len() != c) {
        return Err(Error::Shape {
            op: "fit targets",
            lhs: vec![e.targets.len()],
            rhs: vec![c],
        });
    }
    let hp = AdamW {
        weight_decay: cfg.weight_decay,
        betas: cfg.betas,
        eps: 1e-8,
    };
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let dropout = model.cfg.encoder.dropout;
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut rates = GroupRates::uniform(0.0);
        for chunk in order.chunks(cfg.batch_size) {
            // the k-th update (1-based) uses schedule step k, so the last one lands on the floor
            step += 1;
            rates = GroupRates {
                encoder: cosine_warmup_lr(step, total, cfg.lr_encoder(), cfg.warmup_frac, cfg.min_lr_ratio)?,
                head: cosine_warmup_lr(step, total, cfg.lr_tst(), cfg.warmup_frac, cfg.min_lr_ratio)?,
            };
            let inputs: Vec<&SampleInput> = chunk.iter().map(|&i| &train[i].input).collect();
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| train[i].targets.as_slice()).collect();
            let targets = targets_tensor(&rows)?;
            let grads = {
                let mut fwd = Forward::training(&model.params, dropout, &mut dropout_rng);
                let logits = model.batch_logits(&mut fwd, &inputs)?;
                let loss = fwd.tape.bce_with_logits(logits, &targets, cfg.pos_weight)?;
                let value = fwd.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += value * chunk.len() as f64;
                fwd.backward(loss)?
            };
            adamw_step(&mut model.params, &grads, &mut state, rates, &hp)?;
        }
        let val_auroc = mean_auroc(model, val)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc,
            lr_encoder: rates.encoder,
            lr_tst: rates.head,
        });
        if best.as_ref().is_none_or(|(_, b, _)| better(val_auroc, *b)) {
            best = Some((epoch, val_auroc, model.params.clone()));
        }
    }
    let (best_epoch, best_val_auroc, best_params) = best.expect("at least one epoch");
    model.params.load_from(&best_params)?;
    Ok(FitOutcome {
        log,
        best_epoch,
        best_val_auroc,
        best_params,
    })
}
