use std::time::Instant;

use rayon::prelude::*;

use super::{eval_inputs, select_labeled, ntxent_loss_grad, RunReport, StageConfig, StudentInit};
use crate::data::{augment_pair, augment_single, AugmentationPolicy, Image, PatchDataset, SplitTag, StreamKey, View};
use crate::error::{invalid, Error, Result};
use crate::evidential::{argmax, one_hot, total_evidential_loss_grad};
use crate::model::optim::Optimizer;
use crate::model::{
    check_fingerprint, softmax_f32, views_to_input, Architecture, EncoderConfig, HeadKind, Model, ModelCheckpoint,
    ProjectionHeadConfig, Stage,
};
use crate::rng::{self, Purpose};

const SALT_PRETRAIN: u64 = 1;
const SALT_FINETUNE: u64 = 2;
const SALT_DISTILL: u64 = 3;

/// A stage's output checkpoint and its run record.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub checkpoint: ModelCheckpoint,
    pub report: RunReport,
}

fn check_images(model: &Model, ds: &PatchDataset) -> Result<()> {
    if let Some((_, _, c)) = ds.image_shape() {
        if c != model.arch.encoder.input_channels {
            return Err(Error::Shape(format!(
                "dataset images have {c} channels, the encoder expects {}",
                model.arch.encoder.input_channels
            )));
        }
    }
    Ok(())
}

/// Shared epoch loop. With `paired`, each item contributes two views at
/// rows `2i` and `2i + 1`; otherwise one view at row `i`. `loss` receives
/// the head outputs, the dataset indices of the batch and the zero-based
/// epoch.
fn run_epochs<F>(
    model: &mut Model,
    images: &[&Image],
    cfg: &StageConfig,
    salt: u64,
    paired: bool,
    min_batch: usize,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f32], &[usize], u32) -> Result<(f64, Vec<f32>)>,
{
    let policy = AugmentationPolicy {
        output_side: model.arch.encoder.input_side,
        ..cfg.augmentation.clone()
    };
    let aug_seed = rng::mix(&[cfg.seed, salt]);
    let n = images.len();
    let full = n / cfg.batch_size;
    let per_epoch = full + usize::from(n % cfg.batch_size >= min_batch);
    if per_epoch == 0 {
        return Err(Error::InsufficientData(format!("{n} items cannot form a batch of at least {min_batch}")));
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone(), model.parameter_count(), cfg.epochs * per_epoch);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        rng::shuffle(&mut order, &mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64, salt));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size).take(per_epoch) {
            let key = |i: usize| StreamKey {
                seed: aug_seed,
                epoch: epoch as u64,
                index: i as u64,
            };
            let views: Vec<View> = if paired {
                let pairs = batch
                    .par_iter()
                    .map(|&i| augment_pair(images[i], &policy, key(i)))
                    .collect::<Result<Vec<_>>>()?;
                pairs.into_iter().flat_map(|(a, b)| [a, b]).collect()
            } else {
                batch
                    .par_iter()
                    .map(|&i| augment_single(images[i], &policy, key(i)))
                    .collect::<Result<Vec<_>>>()?
            };
            let x = views_to_input(&views);
            let (value, mut grad) = model.loss_and_grad(&x, |out| loss(out, batch, epoch as u32))?;
            if !value.is_finite() {
                return Err(invalid!("loss diverged at epoch {epoch}"));
            }
            opt.apply(&mut model.params.data, &mut grad);
            total += value;
        }
        curve.push(total / per_epoch as f64);
    }
    Ok(curve)
}

/// Cross-entropy against per-row target distributions at temperature
/// `temp`, averaged over rows.
fn soft_cross_entropy(out: &[f32], k: usize, targets: &[&[f64]], temp: f64) -> (f64, Vec<f32>) {
    let b = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(out.len());
    for (row, q) in out.chunks(k).zip(targets) {
        let scaled: Vec<f32> = row.iter().map(|&v| (f64::from(v) / temp) as f32).collect();
        let p = softmax_f32(&scaled);
        loss -= q.iter().zip(&p).map(|(qi, pi)| qi * pi.max(1e-300).ln()).sum::<f64>();
        grad.extend(p.iter().zip(q.iter()).map(|(pi, qi)| ((pi - qi) / (temp * b)) as f32));
    }
    (loss / b, grad)
}

fn evidential_loss(out: &[f32], k: usize, classes: &[usize], epoch: u32, cfg: &StageConfig) -> Result<(f64, Vec<f32>)> {
    let batch: Vec<(Vec<f64>, Vec<f64>)> = out
        .chunks(k)
        .zip(classes)
        .map(|(e, &c)| (e.iter().map(|&v| f64::from(v) + 1.0).collect(), one_hot(c, k)))
        .collect();
    let t = epoch + cfg.anneal.epoch_index_base;
    let (value, grads) = total_evidential_loss_grad(&batch, t, &cfg.anneal, cfg.reduction)?;
    Ok((value, grads.into_iter().flatten().map(|g| g as f32).collect()))
}

fn images_of(ds: &PatchDataset) -> Vec<&Image> {
    ds.items().iter().map(|it| &it.image).collect()
}

/// Contrastive pretraining of a fresh encoder and projection head. Labels
/// in `ds` are ignored.
pub fn pretrain(
    ds: &PatchDataset,
    encoder: &EncoderConfig,
    projection: &ProjectionHeadConfig,
    cfg: &StageConfig,
) -> Result<StageRun> {
    cfg.validate()?;
    if cfg.batch_size < 4 {
        return Err(invalid!("contrastive batch size must be at least 4, got {}", cfg.batch_size));
    }
    if ds.is_empty() {
        return Err(Error::InsufficientData("pretraining set is empty".into()));
    }
    let started = Instant::now();
    let arch = Architecture {
        encoder: encoder.clone(),
        projection: projection.clone(),
        head: HeadKind::Projection,
        class_count: None,
    };
    let mut model = Model::build(arch, cfg.seed)?;
    check_images(&model, ds)?;
    let tau = cfg.temperature;
    let curve = run_epochs(&mut model, &images_of(ds), cfg, SALT_PRETRAIN, true, 2, |out, batch, _| {
        let dim = out.len() / (2 * batch.len());
        let z: Vec<f64> = out.iter().map(|&v| f64::from(v)).collect();
        let (value, grad) = ntxent_loss_grad(&z, dim, tau)?;
        Ok((value, grad.into_iter().map(|g| g as f32).collect()))
    })?;
    let checkpoint = ModelCheckpoint::new(&model, Stage::Pretrained, cfg.seed, ds.fingerprint(), cfg.epochs as u32);
    Ok(StageRun {
        checkpoint,
        report: RunReport {
            stage: Stage::Pretrained,
            seed: cfg.seed,
            epochs: cfg.epochs,
            loss_curve: curve,
            labeled_ids: Vec::new(),
            warnings: Vec::new(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Selects `cfg.label_fraction` of `train` (recording the ids) and
/// fine-tunes a classifier head on it.
pub fn finetune(pretrained: &ModelCheckpoint, train: &PatchDataset, head: HeadKind, cfg: &StageConfig) -> Result<StageRun> {
    pretrained.require_stage(Stage::Pretrained, "fine-tuning")?;
    cfg.validate()?;
    let picked = select_labeled(train, cfg.label_fraction, cfg.stratified_labels, cfg.seed)?;
    let items = picked.iter().map(|&i| train.items()[i].clone()).collect();
    let subset = PatchDataset::new(items, train.class_count(), SplitTag::Train)?;
    let mut run = finetune_labeled(pretrained, &subset, head, cfg, None)?;
    if let Some(w) = check_fingerprint(&pretrained.meta, &train.fingerprint()) {
        run.report.warnings.push(w.clone());
        run.checkpoint.meta.warnings.push(w);
    }
    Ok(run)
}

/// Fine-tunes on exactly the items of `labeled`. The classifier starts
/// from the pretrained encoder with a fresh head, or from `warm_start`.
pub fn finetune_labeled(
    pretrained: &ModelCheckpoint,
    labeled: &PatchDataset,
    head: HeadKind,
    cfg: &StageConfig,
    warm_start: Option<&Model>,
) -> Result<StageRun> {
    pretrained.require_stage(Stage::Pretrained, "fine-tuning")?;
    cfg.validate()?;
    if head == HeadKind::Projection {
        return Err(invalid!("fine-tuning needs a softmax or evidential head"));
    }
    if labeled.is_empty() {
        return Err(Error::InsufficientData("no labeled items to fine-tune on".into()));
    }
    let started = Instant::now();
    let k = labeled.class_count();
    let labels = labeled.labels()?;
    let mut warnings = Vec::new();
    for (c, &count) in labeled.class_counts().iter().enumerate() {
        if count == 0 {
            let msg = format!("class {c} has no labeled items; the classifier may be degenerate on it");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut model = match warm_start {
        Some(m) => {
            if m.arch.head != head || m.arch.class_count != Some(k) {
                return Err(Error::CheckpointMismatch("warm-start model has a different head".into()));
            }
            m.clone()
        }
        None => pretrained.model()?.attach_head(head, k, cfg.seed)?,
    };
    check_images(&model, labeled)?;
    let targets: Vec<Vec<f64>> = labels.iter().map(|&c| one_hot(c, k)).collect();
    let curve = run_epochs(&mut model, &images_of(labeled), cfg, SALT_FINETUNE, false, 1, |out, batch, epoch| {
        match head {
            HeadKind::Evidential => {
                let classes: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                evidential_loss(out, k, &classes, epoch, cfg)
            }
            _ => {
                let q: Vec<&[f64]> = batch.iter().map(|&i| targets[i].as_slice()).collect();
                Ok(soft_cross_entropy(out, k, &q, 1.0))
            }
        }
    })?;
    let mut checkpoint = ModelCheckpoint::derive(pretrained, &model, Stage::Finetuned)?;
    let mut ids: Vec<String> = labeled.ids().map(str::to_string).collect();
    ids.sort();
    checkpoint.meta.labeled_ids = ids.clone();
    checkpoint.meta.warnings.extend(warnings.iter().cloned());
    checkpoint.meta.seed = cfg.seed;
    checkpoint.meta.epoch = cfg.epochs as u32;
    Ok(StageRun {
        checkpoint,
        report: RunReport {
            stage: Stage::Finetuned,
            seed: cfg.seed,
            epochs: cfg.epochs,
            loss_curve: curve,
            labeled_ids: ids,
            warnings,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Trains a student of the teacher's architecture on teacher outputs for
/// every item of `train` (labels ignored). A softmax teacher provides soft
/// targets at `cfg.distill_temperature`; an evidential teacher provides
/// argmax pseudo-labels for the evidential loss.
pub fn distill(teacher: &ModelCheckpoint, train: &PatchDataset, student: &Architecture, cfg: &StageConfig) -> Result<StageRun> {
    teacher.require_stage(Stage::Finetuned, "distillation")?;
    cfg.validate()?;
    if student != &teacher.meta.architecture {
        return Err(Error::CheckpointMismatch(
            "student architecture differs from the teacher's".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("distillation set is empty".into()));
    }
    let started = Instant::now();
    let tmodel = teacher.model()?;
    check_images(&tmodel, train)?;
    let k = tmodel.output_dim();
    let head = student.head;
    let temp = cfg.distill_temperature;
    let mut soft: Vec<Vec<f64>> = Vec::new();
    let mut hard: Vec<usize> = Vec::new();
    for x in eval_inputs(&tmodel, train) {
        let out = tmodel.forward(&x)?;
        for row in out.chunks(k) {
            match head {
                HeadKind::Evidential => hard.push(argmax(&row.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())),
                _ => soft.push(softmax_f32(&row.iter().map(|&v| (f64::from(v) / temp) as f32).collect::<Vec<_>>())),
            }
        }
    }
    let mut model = match cfg.student_init {
        StudentInit::Scratch => Model::build(student.clone(), cfg.seed)?,
        StudentInit::Teacher => tmodel.clone(),
    };
    let curve = run_epochs(&mut model, &images_of(train), cfg, SALT_DISTILL, false, 1, |out, batch, epoch| match head {
        HeadKind::Evidential => {
            let classes: Vec<usize> = batch.iter().map(|&i| hard[i]).collect();
            evidential_loss(out, k, &classes, epoch, cfg)
        }
        _ => {
            let q: Vec<&[f64]> = batch.iter().map(|&i| soft[i].as_slice()).collect();
            Ok(soft_cross_entropy(out, k, &q, temp))
        }
    })?;
    let mut checkpoint = ModelCheckpoint::derive(teacher, &model, Stage::Distilled)?;
    checkpoint.meta.seed = cfg.seed;
    checkpoint.meta.epoch = cfg.epochs as u32;
    Ok(StageRun {
        report: RunReport {
            stage: Stage::Distilled,
            seed: cfg.seed,
            epochs: cfg.epochs,
            loss_curve: curve,
            labeled_ids: checkpoint.meta.labeled_ids.clone(),
            warnings: Vec::new(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
        checkpoint,
    })
}
