//! Plain SGD on per-pixel cross-entropy, plus evaluation.

use crate::data::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, MiouReport};
use crate::model::Segmenter;
use crate::tape::{Tape, Var};
use crate::tensor::ParamId;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Keep the BA parameters frozen for the first half of the steps.
    pub two_phase: bool,
}

impl TrainConfig {
    pub fn ba_frozen(&self, step: usize) -> bool {
        self.two_phase && step < self.steps / 2
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            batch_size: 4,
            two_phase: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Mean loss over the whole training set after the last update.
    pub final_loss: f64,
    /// Pixel accuracy on the training set after the last update.
    pub pixel_accuracy: f64,
}

impl TrainingReport {
    /// CSV with header `step,loss`.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Mean loss of `samples` on a fresh tape.
fn batch_loss(model: &Segmenter, tape: &mut Tape, samples: &[&Sample]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in samples {
        let x = tape.leaf(s.image.clone());
        let l = model.loss_var(tape, x, &s.labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or(Error::EmptyDataset)?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64))
}

/// Mean per-pixel cross-entropy over a dataset.
pub fn dataset_loss(model: &Segmenter, data: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = data.iter().collect();
    let mut tape = Tape::new();
    let loss = batch_loss(model, &mut tape, &refs)?;
    Ok(tape.value(loss).item())
}

/// Trains in place. Batches cycle through `data` in order, so the run is a
/// pure function of the model, the data and `cfg`.
pub fn train(model: &mut Segmenter, data: &[Sample], cfg: &TrainConfig) -> Result<TrainingReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config(format!(
            "batch_size = {} must be positive and lr = {} positive and finite",
            cfg.batch_size, cfg.lr
        )));
    }
    let ba: Vec<ParamId> = model.ba_params();
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Sample> = (0..cfg.batch_size)
            .map(|j| &data[(step * cfg.batch_size + j) % data.len()])
            .collect();
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let store = model.store_mut();
        store.zero_grad();
        tape.backward(loss, store)?;
        let frozen = cfg.ba_frozen(step);
        for &id in &ids {
            if frozen && ba.contains(&id) {
                continue;
            }
            let t = store.tensor_mut(id);
            let grad = t.grad().map(<[f64]>::to_vec);
            if let Some(g) = grad {
                for (w, g) in t.data_mut().iter_mut().zip(g) {
                    *w -= cfg.lr * g;
                }
            }
        }
    }
    model.store_mut().zero_grad();
    let final_loss = dataset_loss(model, data)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    let preds = predict_all(model, data)?;
    let report = metrics::miou_from_pairs(
        preds.iter().zip(data.iter().map(|s| &s.labels)),
        model.config().num_classes,
    )?;
    Ok(TrainingReport {
        losses,
        final_loss,
        pixel_accuracy: report.pixel_accuracy,
    })
}

pub fn predict_all(model: &Segmenter, data: &[Sample]) -> Result<Vec<LabelMap>> {
    data.iter().map(|s| model.predict(&s.image)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub miou: MiouReport,
    /// `None` when no target in the set has a class boundary.
    pub boundary_band_accuracy: Option<f64>,
}

/// mIoU and boundary-band accuracy (pooled over all band pixels).
pub fn evaluate(model: &Segmenter, data: &[Sample], band: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_all(model, data)?;
    let miou = metrics::miou_from_pairs(
        preds.iter().zip(data.iter().map(|s| &s.labels)),
        model.config().num_classes,
    )?;
    let (mut hits, mut total) = (0, 0);
    for (p, s) in preds.iter().zip(data) {
        let (h, t) = metrics::boundary_band_counts(p, &s.labels, band)?;
        hits += h;
        total += t;
    }
    Ok(Evaluation {
        miou,
        boundary_band_accuracy: (total > 0).then(|| hits as f64 / total as f64),
    })
}
