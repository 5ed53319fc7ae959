use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{self, Purpose};

use super::{Image, PatchDataset, PatchItem, SplitTag};

/// Parameters of the synthetic patch generator.
///
/// Each image is a mid-gray canvas plus per-image brightness/color shifts,
/// spatially correlated noise and a class-specific low-frequency pattern
/// whose amplitude is `class_separation * 40` gray levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub texture_seed: u64,
    pub class_separation: f64,
    /// Standard deviation of the per-pixel noise in gray levels.
    pub noise_std: f64,
    /// Optional relative class frequencies; class `k` then gets
    /// `round(samples_per_class * K * w_k / sum(w))` items.
    pub class_weights: Option<Vec<f64>>,
    pub channels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 3,
            samples_per_class: 100,
            image_side: 32,
            texture_seed: 0,
            class_separation: 1.0,
            noise_std: 48.0,
            class_weights: None,
            channels: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(invalid!("synthetic data needs at least 2 classes"));
        }
        if !(self.class_separation > 0.0) {
            return Err(invalid!("class separation must be positive"));
        }
        if self.image_side < 4 {
            return Err(invalid!("image side must be at least 4"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(invalid!("channels must be 1 or 3"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid!("noise std must be nonnegative"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.class_count || w.iter().any(|x| !(*x > 0.0)) {
                return Err(invalid!("class weights must be {} positive numbers", self.class_count));
            }
        }
        Ok(())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        match &self.class_weights {
            None => vec![self.samples_per_class; self.class_count],
            Some(w) => {
                let total = (self.samples_per_class * self.class_count) as f64;
                let norm: f64 = w.iter().sum();
                w.iter().map(|x| (total * x / norm).round().max(1.0) as usize).collect()
            }
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    gain: [f64; 3],
}

fn class_pattern(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let mut rng = rng::stream(spec.texture_seed, Purpose::Synthetic, class as u64, u64::MAX);
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let (fy, fx) = loop {
                let fy = rng.random_range(0..=3) as f64;
                let fx = rng.random_range(0..=3) as f64;
                if fy + fx > 0.0 {
                    break (fy, fx);
                }
            };
            Wave {
                fy,
                fx,
                phase: rng.random::<f64>() * std::f64::consts::TAU,
                gain: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            }
        })
        .collect();
    let side = spec.image_side;
    let c = spec.channels;
    let mut out = vec![0.0; side * side * c];
    for y in 0..side {
        for x in 0..side {
            let (v, u) = (y as f64 / side as f64, x as f64 / side as f64);
            for w in &waves {
                let s = (std::f64::consts::TAU * (w.fy * v + w.fx * u) + w.phase).cos();
                for ch in 0..c {
                    out[(y * side + x) * c + ch] += w.gain[ch] * s;
                }
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= rms.max(1e-12));
    out
}

fn render(spec: &SyntheticSpec, pattern: &[f64], item_key: u64) -> Image {
    let side = spec.image_side;
    let c = spec.channels;
    let mut rng = rng::stream(spec.texture_seed, Purpose::Synthetic, item_key, 0);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);

    // coarse noise on a 5x5 lattice, bilinearly upsampled
    let grid = 5;
    let coarse: Vec<f64> = (0..grid * grid * c).map(|_| normal()).collect();
    let brightness = 15.0 * normal();
    let shift: Vec<f64> = (0..c).map(|_| 10.0 * normal()).collect();
    let amplitude = 40.0 * spec.class_separation;

    let mut pixels = Vec::with_capacity(side * side * c);
    for y in 0..side {
        let gy = y as f64 / (side - 1) as f64 * (grid - 1) as f64;
        let (y0, fy) = (gy.floor().min((grid - 2) as f64) as usize, gy - gy.floor().min((grid - 2) as f64));
        for x in 0..side {
            let gx = x as f64 / (side - 1) as f64 * (grid - 1) as f64;
            let (x0, fx) = (gx.floor().min((grid - 2) as f64) as usize, gx - gx.floor().min((grid - 2) as f64));
            for ch in 0..c {
                let at = |yy: usize, xx: usize| coarse[(yy * grid + xx) * c + ch];
                let smooth = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                let white = normal();
                let noise = spec.noise_std * (0.8 * smooth + 0.6 * white);
                let v = 128.0
                    + brightness
                    + shift[ch]
                    + noise
                    + amplitude * pattern[(y * side + x) * c + ch];
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image {
        height: side,
        width: side,
        channels: c,
        pixels,
    }
}

/// One synthetic image of `class`, keyed by an arbitrary item number.
pub fn synthesize_image(spec: &SyntheticSpec, class: usize, item_key: u64) -> Result<Image> {
    spec.validate()?;
    if class >= spec.class_count {
        return Err(invalid!("class {class} out of range"));
    }
    Ok(render(spec, &class_pattern(spec, class), item_key))
}

/// Deterministic labeled dataset. Ids are `syn-<hex>` hashes of the item
/// key, so their order carries no class information.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PatchDataset> {
    spec.validate()?;
    let mut items = Vec::new();
    let mut key = 0u64;
    for (class, &n) in spec.class_sizes().iter().enumerate() {
        let pattern = class_pattern(spec, class);
        for _ in 0..n {
            items.push(PatchItem {
                id: format!("syn-{:016x}", rng::mix(&[spec.texture_seed, key])),
                image: render(spec, &pattern, key),
                label: Some(class),
            });
            key += 1;
        }
    }
    PatchDataset::new(items, spec.class_count, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest class mean on raw pixels, fit on even items, scored on odd ones.
    fn nearest_centroid_accuracy(ds: &PatchDataset) -> f64 {
        let k = ds.class_count();
        let dim = ds.items()[0].image.pixels.len();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for it in ds.items().iter().step_by(2) {
            let l = it.label.unwrap();
            counts[l] += 1;
            for (s, p) in sums[l].iter_mut().zip(&it.image.pixels) {
                *s += f64::from(*p);
            }
        }
        for (s, n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let (mut hit, mut total) = (0, 0);
        for it in ds.items().iter().skip(1).step_by(2) {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let d = |c: usize| -> f64 {
                        sums[c].iter().zip(&it.image.pixels).map(|(m, p)| (m - f64::from(*p)).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            hit += usize::from(best == it.label.unwrap());
            total += 1;
        }
        hit as f64 / total as f64
    }

    #[test]
    fn counts_and_balance() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_counts(), vec![100, 100, 100]);
    }

    #[test]
    fn deterministic_pixels() {
        let spec = SyntheticSpec {
            samples_per_class: 5,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn large_separation_is_centroid_separable() {
        let spec = SyntheticSpec {
            class_separation: 20.0,
            samples_per_class: 60,
            ..Default::default()
        };
        let acc = nearest_centroid_accuracy(&generate_synthetic(&spec).unwrap());
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn accuracy_grows_with_separation() {
        let acc = |sep: f64| {
            let spec = SyntheticSpec {
                class_separation: sep,
                samples_per_class: 60,
                noise_std: 120.0,
                ..Default::default()
            };
            nearest_centroid_accuracy(&generate_synthetic(&spec).unwrap())
        };
        let (lo, hi) = (acc(0.02), acc(0.5));
        assert!(hi > lo, "{lo} vs {hi}");
    }

    #[test]
    fn imbalanced_sizes() {
        let spec = SyntheticSpec {
            class_weights: Some(vec![6.0, 3.0, 1.0]),
            samples_per_class: 100,
            ..Default::default()
        };
        assert_eq!(spec.class_sizes(), vec![180, 90, 30]);
    }

    #[test]
    fn zero_separation_rejected() {
        let spec = SyntheticSpec {
            class_separation: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
