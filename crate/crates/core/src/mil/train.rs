use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{split_pseudo_bags, Bag, DistillStrategy, MilNet};
use crate::error::{invalid, Result};
use crate::report::{compute_metrics, MetricsReport};
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilConfig {
    /// Pseudo-bags per parent bag (capped at the bag size).
    pub pseudo_bags: usize,
    pub attention_dim: usize,
    /// Width of the ReLU reduction layer in front of tier 1; none by default.
    pub reduced_dim: Option<usize>,
    pub strategy: DistillStrategy,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            pseudo_bags: 5,
            attention_dim: 128,
            reduced_dim: None,
            strategy: DistillStrategy::Afs,
            epochs: 40,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pseudo_bags == 0 || self.attention_dim == 0 || self.epochs == 0 {
            return Err(invalid!("pseudo_bags, attention_dim and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid!("learning rate must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MilRun {
    pub net: MilNet,
    pub report: MetricsReport,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Tier-2 positive probability for each evaluation bag.
    pub eval_probs: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Stable per-bag key so that evaluation partitions do not depend on the
/// order bags are listed in.
fn bag_key(id: &str) -> u64 {
    u64::from_le_bytes(Sha256::digest(id.as_bytes())[..8].try_into().unwrap())
}

fn eval_partition_seed(seed: u64, bag: &Bag) -> u64 {
    rng::mix(&[seed, u64::MAX, bag_key(&bag.id)])
}

impl MilNet {
    /// Tier-2 positive probability under the fixed evaluation partition.
    pub fn predict(&self, bag: &Bag, pseudo_bags: usize, seed: u64) -> Result<f64> {
        let parts = split_pseudo_bags(bag, pseudo_bags.min(bag.len()), eval_partition_seed(seed, bag))?;
        Ok(self.forward(bag, &parts)?.tier2.probability)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i] + wd * theta[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Trains tier 1 and tier 2 jointly, one bag per step with fresh
/// pseudo-bag partitions every epoch, then evaluates on `eval`.
pub fn train_mil(train: &[Bag], eval: &[Bag], cfg: &MilConfig, seed: u64) -> Result<MilRun> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| invalid!("no training bags"))?;
    let dim = first.dim();
    let mut net = MilNet::new(dim, cfg.reduced_dim, cfg.attention_dim, cfg.strategy, seed)?;
    for b in train.iter().chain(eval) {
        if b.dim() != dim {
            return Err(crate::Error::Shape(format!(
                "bag {} has {}-dimensional features, expected {dim}",
                b.id,
                b.dim()
            )));
        }
    }
    let mut warnings = Vec::new();
    let n_pos = train.iter().filter(|b| b.label).count();
    if n_pos == 0 || n_pos == train.len() {
        let msg = format!(
            "all {} training bags are {}; the classifier is degenerate",
            train.len(),
            if n_pos == 0 { "negative" } else { "positive" }
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut opt = Adam {
        m: vec![0.0; net.theta.len()],
        v: vec![0.0; net.theta.len()],
        t: 0,
    };
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut order, &mut rng::stream(seed, Purpose::Shuffle, epoch as u64, 7));
        let mut total = 0.0;
        for &b in &order {
            let bag = &train[b];
            let parts = split_pseudo_bags(
                bag,
                cfg.pseudo_bags.min(bag.len()),
                rng::mix(&[seed, epoch as u64, bag_key(&bag.id)]),
            )?;
            let (loss, grad) = net.loss_and_grad(bag, &parts)?;
            total += loss;
            opt.step(&mut net.theta, &grad, cfg.learning_rate, cfg.weight_decay);
        }
        loss_curve.push(total / train.len() as f64);
    }

    let eval_probs = eval
        .iter()
        .map(|b| net.predict(b, cfg.pseudo_bags, seed))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<Vec<f64>> = eval_probs.iter().map(|&p| vec![1.0 - p, p]).collect();
    let labels: Vec<usize> = eval.iter().map(|b| usize::from(b.label)).collect();
    let report = compute_metrics(&scores, &labels)?;
    Ok(MilRun {
        net,
        report,
        loss_curve,
        eval_probs,
        warnings,
    })
}

/// Tier-1 readout for one instance of a bag.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceAttention {
    pub instance_id: String,
    pub instance: usize,
    pub pseudo_bag: usize,
    pub tier1_prob: f64,
    /// Weight within the instance's pseudo-bag; sums to 1 per pseudo-bag.
    pub tier1_attention: f64,
}

/// Per-instance attention and probabilities under the evaluation partition,
/// in instance order.
pub fn attention_map(net: &MilNet, bag: &Bag, pseudo_bags: usize, seed: u64) -> Result<Vec<InstanceAttention>> {
    let parts = split_pseudo_bags(bag, pseudo_bags.min(bag.len()), eval_partition_seed(seed, bag))?;
    let out = net.forward(bag, &parts)?;
    let mut rows = Vec::with_capacity(bag.len());
    for (j, (p, t1)) in parts.iter().zip(&out.tier1).enumerate() {
        for (k, &i) in p.indices.iter().enumerate() {
            rows.push(InstanceAttention {
                instance_id: format!("{}:{i}", bag.id),
                instance: i,
                pseudo_bag: j,
                tier1_prob: t1.record.instance_probs[k],
                tier1_attention: t1.record.attention[k],
            });
        }
    }
    rows.sort_by_key(|r| r.instance);
    Ok(rows)
}

pub fn write_attention_csv(rows: &[InstanceAttention], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "instance_id,tier1_prob,tier1_attention")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.instance_id, r.tier1_prob, r.tier1_attention)?;
    }
    Ok(())
}
