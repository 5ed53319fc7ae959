//! Contrastive pretraining, supervised fine-tuning (softmax or evidential)
//! and teacher-student distillation.

mod ntxent;
mod stages;

use serde::{Deserialize, Serialize};

use crate::data::{resize_view, AugmentationPolicy, PatchDataset};
use crate::error::{invalid, Error, Result};
use crate::evidential::{AnnealSchedule, DirichletOpinion, Reduction};
use crate::model::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use crate::model::{views_to_input, HeadKind, Model, Stage};
use crate::report::{compute_metrics, uncertainty_summary, MetricsReport, UncertaintySummary};
use crate::rng::{self, Purpose};

pub use ntxent::{ntxent_loss, ntxent_loss_grad};
pub use stages::{distill, finetune, finetune_labeled, pretrain, StageRun};

/// How the distillation student is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Fresh weights from the stage seed.
    Scratch,
    /// A copy of the teacher's weights.
    Teacher,
}

/// Settings for one training stage. Fields that do not apply to a stage
/// are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
    /// NT-Xent temperature (pretraining).
    pub temperature: f64,
    /// Fraction of training items whose labels are used (fine-tuning).
    pub label_fraction: f64,
    /// Select labels per class instead of uniformly over items.
    pub stratified_labels: bool,
    /// Softmax temperature for soft targets (distillation).
    pub distill_temperature: f64,
    pub student_init: StudentInit,
    /// Batch reduction of the evidential loss.
    pub reduction: Reduction,
    pub anneal: AnnealSchedule,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl StageConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            augmentation: AugmentationPolicy::default(),
            seed: 0,
            temperature: 0.5,
            label_fraction: 1.0,
            stratified_labels: false,
            distill_temperature: 1.0,
            student_init: StudentInit::Scratch,
            reduction: Reduction::Sum,
            anneal: AnnealSchedule::default(),
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                schedule: LrSchedule::Constant,
                ..Default::default()
            },
            augmentation: AugmentationPolicy::flips(32),
            ..Self::pretrain_default()
        }
    }

    pub fn distill_default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            augmentation: AugmentationPolicy::flips(32),
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(invalid!("label fraction {} outside (0, 1]", self.label_fraction));
        }
        if !(self.temperature > 0.0) || !(self.distill_temperature > 0.0) {
            return Err(invalid!("temperatures must be positive"));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        self.augmentation.validate()
    }
}

/// Per-stage run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub labeled_ids: Vec<String>,
    pub warnings: Vec<String>,
    pub wall_time_secs: f64,
}

/// Indices of the items whose labels are revealed for fine-tuning, in
/// dataset order. Uniform over items unless `stratified`.
pub fn select_labeled(ds: &PatchDataset, fraction: f64, stratified: bool, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("label fraction {fraction} outside (0, 1]"));
    }
    let labels = ds.labels()?;
    let n = labels.len();
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Err(Error::InsufficientData(format!(
            "label fraction {fraction} of {n} items selects no items"
        )));
    }
    let mut picked = if stratified {
        let k = ds.class_count();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        // largest-remainder allocation of `count` over classes
        let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * count as f64 / n as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let short = count - quota.iter().sum::<usize>();
        for &c in order.iter().take(short) {
            quota[c] += 1;
        }
        let mut out = Vec::with_capacity(count);
        for (c, members) in by_class.iter_mut().enumerate() {
            rng::shuffle(members, &mut rng::stream(seed, Purpose::LabelSelect, c as u64 + 1, 0));
            out.extend_from_slice(&members[..quota[c]]);
        }
        out
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut all, &mut rng::stream(seed, Purpose::LabelSelect, 0, 0));
        all.truncate(count);
        all
    };
    picked.sort_unstable();
    Ok(picked)
}

const EVAL_BLOCK: usize = 256;

fn eval_inputs<'a>(model: &'a Model, ds: &'a PatchDataset) -> impl Iterator<Item = Vec<f32>> + 'a {
    let side = model.arch.encoder.input_side;
    ds.items()
        .chunks(EVAL_BLOCK)
        .map(move |block| views_to_input(&block.iter().map(|it| resize_view(&it.image, side)).collect::<Vec<_>>()))
}

/// Class scores for every item on un-augmented inputs.
pub fn predict(model: &Model, ds: &PatchDataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    for x in eval_inputs(model, ds) {
        out.extend(model.class_scores(&x)?);
    }
    Ok(out)
}

/// Dirichlet opinions for every item; the model must be evidential.
pub fn predict_opinions(model: &Model, ds: &PatchDataset) -> Result<Vec<DirichletOpinion>> {
    let mut out = Vec::with_capacity(ds.len());
    for x in eval_inputs(model, ds) {
        out.extend(model.opinions(&x)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Present for evidential models.
    pub uncertainty: Option<UncertaintySummary>,
}

pub fn evaluate(model: &Model, ds: &PatchDataset) -> Result<Evaluation> {
    let labels = ds.labels()?;
    if model.arch.head == HeadKind::Evidential {
        let opinions = predict_opinions(model, ds)?;
        let scores: Vec<Vec<f64>> = opinions.iter().map(|o| o.mean.clone()).collect();
        Ok(Evaluation {
            metrics: compute_metrics(&scores, &labels)?,
            uncertainty: Some(uncertainty_summary(&opinions, &labels)?),
        })
    } else {
        Ok(Evaluation {
            metrics: compute_metrics(&predict(model, ds)?, &labels)?,
            uncertainty: None,
        })
    }
}

fn embeddings(model: &Model, ds: &PatchDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * model.embedding_dim());
    for x in eval_inputs(model, ds) {
        out.extend(model.embed(&x)?.into_iter().map(f64::from));
    }
    Ok(out)
}

/// Accuracy on `test` of a multinomial logistic regression fit to frozen
/// encoder embeddings of `train`. Features are standardized with the
/// training statistics; the fit is full-batch gradient descent, so the
/// result is deterministic.
pub fn linear_probe(model: &Model, train: &PatchDataset, test: &PatchDataset) -> Result<f64> {
    let k = train.class_count();
    let d = model.embedding_dim();
    let ytr = train.labels()?;
    let yte = test.labels()?;
    let mut xtr = embeddings(model, train)?;
    let mut xte = embeddings(model, test)?;
    let n = ytr.len();
    if n == 0 || yte.is_empty() {
        return Err(Error::InsufficientData("linear probe needs nonempty train and test sets".into()));
    }
    for j in 0..d {
        let mean = (0..n).map(|i| xtr[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (xtr[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-8);
        for x in [&mut xtr, &mut xte] {
            for row in x.chunks_mut(d) {
                row[j] = (row[j] - mean) / sd;
            }
        }
    }
    let mut w = vec![0.0; k * (d + 1)];
    let (lr, l2) = (0.5, 1e-4);
    for _ in 0..300 {
        let mut g = vec![0.0; w.len()];
        for (row, &y) in xtr.chunks(d).zip(&ytr) {
            let p = probe_probs(&w, row, k, d);
            for c in 0..k {
                let e = (p[c] - f64::from(u8::from(c == y))) / n as f64;
                let wc = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                for j in 0..d {
                    wc[j] += e * row[j];
                }
                wc[d] += e;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * (gi + l2 * *wi);
        }
    }
    let correct = xte
        .chunks(d)
        .zip(&yte)
        .filter(|(row, &y)| crate::evidential::argmax(&probe_probs(&w, row, k, d)) == y)
        .count();
    Ok(correct as f64 / yte.len() as f64)
}

fn probe_probs(w: &[f64], x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..k)
        .map(|c| {
            let wc = &w[c * (d + 1)..(c + 1) * (d + 1)];
            wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
