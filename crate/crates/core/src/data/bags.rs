use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mil::Bag;
use crate::rng::{self, Purpose};

use super::{synthesize_image, Image, SyntheticSpec};

/// Shape of a synthetic MIL problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagSpec {
    pub bag_count: usize,
    pub instances_per_bag: usize,
    pub positive_bag_fraction: f64,
    /// Fraction of instances inside a positive bag that are positive.
    pub positive_instance_rate: f64,
    /// Width of the generated feature vectors.
    pub feature_dim: usize,
    /// Shift of positive instances along a fixed unit direction.
    pub signal: f64,
}

impl Default for BagSpec {
    fn default() -> Self {
        Self {
            bag_count: 100,
            instances_per_bag: 50,
            positive_bag_fraction: 0.5,
            positive_instance_rate: 0.05,
            feature_dim: 32,
            signal: 3.0,
        }
    }
}

impl BagSpec {
    pub fn positives_per_bag(&self) -> Result<usize> {
        if !(self.positive_instance_rate > 0.0 && self.positive_instance_rate <= 1.0) {
            return Err(invalid!(
                "positive instance rate {} outside (0, 1]",
                self.positive_instance_rate
            ));
        }
        let n = (self.positive_instance_rate * self.instances_per_bag as f64).round() as usize;
        if n == 0 {
            return Err(invalid!(
                "rate {} with {} instances leaves positive bags without a positive instance",
                self.positive_instance_rate,
                self.instances_per_bag
            ));
        }
        Ok(n.min(self.instances_per_bag))
    }

    fn validate(&self) -> Result<()> {
        if self.bag_count == 0 || self.instances_per_bag == 0 {
            return Err(invalid!("bag count and instances per bag must be positive"));
        }
        if !(0.0..=1.0).contains(&self.positive_bag_fraction) {
            return Err(invalid!("positive bag fraction must lie in [0, 1]"));
        }
        self.positives_per_bag().map(|_| ())
    }
}

/// Bag id, bag label and per-instance labels, before any features exist.
struct Layout {
    id: String,
    instance_labels: Vec<bool>,
}

fn layouts(spec: &BagSpec, seed: u64) -> Result<Vec<Layout>> {
    spec.validate()?;
    let n_pos_bags = (spec.bag_count as f64 * spec.positive_bag_fraction).round() as usize;
    let k = spec.positives_per_bag()?;
    let mut is_pos: Vec<bool> = (0..spec.bag_count).map(|i| i < n_pos_bags).collect();
    rng::shuffle(&mut is_pos, &mut rng::stream(seed, Purpose::Bags, u64::MAX, 0));
    Ok(is_pos
        .into_iter()
        .enumerate()
        .map(|(b, pos)| {
            let mut labels = vec![false; spec.instances_per_bag];
            if pos {
                labels[..k].fill(true);
                rng::shuffle(&mut labels, &mut rng::stream(seed, Purpose::Bags, b as u64, 1));
            }
            Layout {
                id: format!("bag-{seed}-{b:04}"),
                instance_labels: labels,
            }
        })
        .collect())
}

/// Feature-space bags: negatives are standard normal, positives are shifted
/// by `signal` along the normalized all-ones direction.
pub fn generate_bags(spec: &BagSpec, seed: u64) -> Result<Vec<Bag>> {
    if spec.feature_dim == 0 {
        return Err(invalid!("feature dim must be positive"));
    }
    let d = spec.feature_dim;
    let shift = spec.signal / (d as f64).sqrt();
    layouts(spec, seed)?
        .into_iter()
        .enumerate()
        .map(|(b, layout)| {
            let mut rng = rng::stream(seed, Purpose::Bags, b as u64, 2);
            let mut features = Vec::with_capacity(layout.instance_labels.len() * d);
            for &pos in &layout.instance_labels {
                for _ in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(if pos { z + shift } else { z });
                }
            }
            let label = layout.instance_labels.iter().any(|&p| p);
            Bag::new(layout.id, label, features, d, Some(layout.instance_labels))
        })
        .collect()
}

/// A bag whose instances are image patches awaiting featurization.
#[derive(Clone, Debug)]
pub struct ImageBag {
    pub id: String,
    pub label: bool,
    pub instances: Vec<Image>,
    pub instance_labels: Vec<bool>,
}

/// Image bags drawn from a two-class synthetic patch generator: class 1
/// patches are the positive instances.
pub fn generate_bag_images(spec: &BagSpec, patches: &SyntheticSpec, seed: u64) -> Result<Vec<ImageBag>> {
    if patches.class_count != 2 {
        return Err(invalid!("image bags need a two-class patch generator"));
    }
    let mut out = Vec::new();
    for (b, layout) in layouts(spec, seed)?.into_iter().enumerate() {
        let instances = layout
            .instance_labels
            .iter()
            .enumerate()
            .map(|(i, &pos)| {
                let key = rng::mix(&[seed, b as u64, i as u64]);
                synthesize_image(patches, usize::from(pos), key)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ImageBag {
            id: layout.id,
            label: layout.instance_labels.iter().any(|&p| p),
            instances,
            instance_labels: layout.instance_labels,
        });
    }
    Ok(out)
}
