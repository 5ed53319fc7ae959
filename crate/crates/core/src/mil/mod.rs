//! Double-tier attention multiple instance learning over bags of instance
//! features.

mod cache;
mod net;
mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{resize_view, ImageBag};
use crate::error::{invalid, Error, Result};
use crate::model::{views_to_input, Model};
use crate::rng::{self, Purpose};

pub use cache::{decode_bag, encode_bag, load_bag, save_bag, BAG_MAGIC};
pub use net::{dtfd_loss, dtfd_loss_grad, AttentionRecord, BagOutput, MilNet, Tier1Output, Tier2Output};
pub use train::{attention_map, train_mil, write_attention_csv, InstanceAttention, MilConfig, MilRun};

/// A labeled set of instance feature vectors (row-major N x D).
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: bool,
    features: Vec<f64>,
    dim: usize,
    /// Ground-truth instance labels, when known (synthetic data only).
    pub instance_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(
        id: String,
        label: bool,
        features: Vec<f64>,
        dim: usize,
        instance_labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "bag {id}: {} values do not form a nonempty matrix with {dim} columns",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Some(l) = &instance_labels {
            if l.len() != n {
                return Err(Error::Shape(format!("bag {id}: {} instance labels for {n} instances", l.len())));
            }
        }
        Ok(Self {
            id,
            label,
            features,
            dim,
            instance_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// A random cell of a parent bag's instances, carrying the parent label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoBag {
    pub parent_id: String,
    pub label: bool,
    /// Row indices into the parent bag.
    pub indices: Vec<usize>,
}

/// Shuffles the parent's instances and deals them round-robin into `m`
/// pseudo-bags.
pub fn split_pseudo_bags(bag: &Bag, m: usize, seed: u64) -> Result<Vec<PseudoBag>> {
    let n = bag.len();
    if m == 0 || m > n {
        return Err(invalid!("cannot split {n} instances into {m} pseudo-bags"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::stream(seed, Purpose::PseudoBags, 0, 0));
    let mut parts = vec![Vec::with_capacity(n / m + 1); m];
    for (k, i) in order.into_iter().enumerate() {
        parts[k % m].push(i);
    }
    Ok(parts
        .into_iter()
        .map(|indices| PseudoBag {
            parent_id: bag.id.clone(),
            label: bag.label,
            indices,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillStrategy {
    /// Feature of the highest-probability instance.
    MaxS,
    /// Highest- and lowest-probability features, concatenated.
    MaxMinS,
    /// Softmax-over-probabilities weighted mean of the features.
    #[serde(rename = "AFS")]
    Afs,
}

impl DistillStrategy {
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            DistillStrategy::MaxMinS => 2 * dim,
            _ => dim,
        }
    }
}

impl FromStr for DistillStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxs" => Ok(Self::MaxS),
            "maxmins" => Ok(Self::MaxMinS),
            "afs" => Ok(Self::Afs),
            _ => Err(invalid!("unknown distillation strategy `{s}` (expected MaxS, MaxMinS or AFS)")),
        }
    }
}

/// One distilled vector from a pseudo-bag's rows (n x dim) and the
/// instance probabilities.
pub fn distill_features(rows: &[f64], dim: usize, probs: &[f64], strategy: DistillStrategy) -> Result<Vec<f64>> {
    let n = probs.len();
    if n == 0 || rows.len() != n * dim {
        return Err(Error::Shape(format!("{} values for {n} instances of width {dim}", rows.len())));
    }
    Ok(net::distill(rows, dim, probs, strategy))
}

/// Embeds every instance of every image bag with a frozen encoder.
pub fn featurize(model: &Model, bags: &[ImageBag]) -> Result<Vec<Bag>> {
    let side = model.arch.encoder.input_side;
    bags.iter()
        .map(|b| {
            let views: Vec<_> = b.instances.iter().map(|im| resize_view(im, side)).collect();
            let emb = model.embed(&views_to_input(&views))?;
            Bag::new(
                b.id.clone(),
                b.label,
                emb.into_iter().map(f64::from).collect(),
                model.embedding_dim(),
                Some(b.instance_labels.clone()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(n: usize) -> Bag {
        Bag::new("b".into(), true, (0..n * 2).map(|v| v as f64).collect(), 2, None).unwrap()
    }

    #[test]
    fn round_robin_sizes() {
        let parts = split_pseudo_bags(&bag(7), 3, 1).unwrap();
        let sizes: Vec<_> = parts.iter().map(|p| p.indices.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert!(parts.iter().all(|p| p.label && p.parent_id == "b"));
    }

    #[test]
    fn single_part_is_whole_bag() {
        let parts = split_pseudo_bags(&bag(5), 1, 4).unwrap();
        let mut idx = parts[0].indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn split_errors_and_determinism() {
        assert!(split_pseudo_bags(&bag(3), 4, 0).is_err());
        assert!(split_pseudo_bags(&bag(3), 0, 0).is_err());
        assert_eq!(split_pseudo_bags(&bag(20), 4, 9).unwrap(), split_pseudo_bags(&bag(20), 4, 9).unwrap());
        assert_ne!(split_pseudo_bags(&bag(20), 4, 9).unwrap(), split_pseudo_bags(&bag(20), 4, 10).unwrap());
    }

    #[test]
    fn strategies() {
        let rows = [1.0, 2.0, 3.0, 4.0];
        let s = |x: &str| x.parse::<DistillStrategy>().unwrap();
        assert_eq!(distill_features(&rows, 2, &[0.9, 0.1], s("MaxS")).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            distill_features(&rows, 2, &[0.9, 0.1], s("maxmins")).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(distill_features(&rows, 2, &[0.3, 0.3], s("AFS")).unwrap(), vec![2.0, 3.0]);
        for st in [DistillStrategy::MaxS, DistillStrategy::Afs] {
            assert_eq!(distill_features(&rows[..2], 2, &[0.4], st).unwrap(), vec![1.0, 2.0]);
        }
        assert!("topk".parse::<DistillStrategy>().is_err());
    }

    #[test]
    fn bag_shape_checks() {
        assert!(Bag::new("x".into(), false, vec![], 3, None).is_err());
        assert!(Bag::new("x".into(), false, vec![1.0; 5], 2, None).is_err());
        assert!(Bag::new("x".into(), false, vec![1.0; 4], 2, Some(vec![true])).is_err());
    }
}
