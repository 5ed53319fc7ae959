use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{self, Purpose, StreamRng};

use super::Image;

/// Random resized crop, flips, color jitter and random grayscale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub crop_scale_range: (f64, f64),
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
    pub color_jitter_strength: f64,
    pub grayscale_prob: f64,
    pub output_side: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.5, 1.0),
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            color_jitter_strength: 0.4,
            grayscale_prob: 0.1,
            output_side: 32,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that only resizes.
    pub fn identity(output_side: usize) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            color_jitter_strength: 0.0,
            grayscale_prob: 0.0,
            output_side,
        }
    }

    /// Flips only; used for supervised stages.
    pub fn flips(output_side: usize) -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            ..Self::identity(output_side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid!("crop scale range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"));
        }
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("vertical_flip_prob", self.vertical_flip_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} = {p} is not a probability"));
            }
        }
        if !(self.color_jitter_strength >= 0.0) {
            return Err(invalid!("color jitter strength must be nonnegative"));
        }
        if self.output_side == 0 {
            return Err(invalid!("output side must be positive"));
        }
        Ok(())
    }
}

/// Identifies the random stream of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

/// A float image in `[0, 1]`, square, HWC layout.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

struct Crop {
    y0: f64,
    x0: f64,
    h: f64,
    w: f64,
}

/// Two independently augmented views of `image`.
pub fn augment_pair(image: &Image, policy: &AugmentationPolicy, key: StreamKey) -> Result<(View, View)> {
    policy.validate()?;
    let mut rng = rng::stream(key.seed, Purpose::Augment, key.epoch, key.index);
    let a = augment_one(image, policy, &mut rng);
    let b = augment_one(image, policy, &mut rng);
    Ok((a, b))
}

/// One augmented view; used by supervised stages.
pub fn augment_single(image: &Image, policy: &AugmentationPolicy, key: StreamKey) -> Result<View> {
    policy.validate()?;
    let mut rng = rng::stream(key.seed, Purpose::Augment, key.epoch, key.index);
    Ok(augment_one(image, policy, &mut rng))
}

/// Bilinear resize of the whole image to `side x side`.
pub fn resize_view(image: &Image, side: usize) -> View {
    let full = Crop {
        y0: 0.0,
        x0: 0.0,
        h: image.height as f64,
        w: image.width as f64,
    };
    crop_resize(image, &full, side, false, false)
}

fn augment_one(image: &Image, policy: &AugmentationPolicy, rng: &mut StreamRng) -> View {
    let crop = sample_crop(image, policy.crop_scale_range, rng);
    let hflip = rng.random::<f64>() < policy.horizontal_flip_prob;
    let vflip = rng.random::<f64>() < policy.vertical_flip_prob;
    let mut view = crop_resize(image, &crop, policy.output_side, hflip, vflip);
    if policy.color_jitter_strength > 0.0 {
        jitter(&mut view, policy.color_jitter_strength, rng);
    }
    if rng.random::<f64>() < policy.grayscale_prob {
        to_gray(&mut view);
    }
    view
}

fn sample_crop(image: &Image, (lo, hi): (f64, f64), rng: &mut StreamRng) -> Crop {
    let (h, w) = (image.height as f64, image.width as f64);
    let area = h * w;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * (lo + (hi - lo) * rng.random::<f64>());
        let aspect = (log_lo + (log_hi - log_lo) * rng.random::<f64>()).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = (rng.random::<f64>() * (w - cw + 1.0)).floor().min(w - cw);
            let y0 = (rng.random::<f64>() * (h - ch + 1.0)).floor().min(h - ch);
            return Crop { y0, x0, h: ch, w: cw };
        }
    }
    Crop {
        y0: 0.0,
        x0: 0.0,
        h,
        w,
    }
}

fn crop_resize(image: &Image, crop: &Crop, side: usize, hflip: bool, vflip: bool) -> View {
    let c = image.channels;
    let mut data = vec![0f32; side * side * c];
    let sy = crop.h / side as f64;
    let sx = crop.w / side as f64;
    let coord = |dst: usize, scale: f64, origin: f64, limit: usize| {
        let src = (origin + (dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    for oy in 0..side {
        let ty = if vflip { side - 1 - oy } else { oy };
        let (y0, y1, fy) = coord(oy, sy, crop.y0, image.height);
        for ox in 0..side {
            let tx = if hflip { side - 1 - ox } else { ox };
            let (x0, x1, fx) = coord(ox, sx, crop.x0, image.width);
            for ch in 0..c {
                let p00 = f32::from(image.at(y0, x0, ch));
                let p01 = f32::from(image.at(y0, x1, ch));
                let p10 = f32::from(image.at(y1, x0, ch));
                let p11 = f32::from(image.at(y1, x1, ch));
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                data[(ty * side + tx) * c + ch] = (top + (bottom - top) * fy) / 255.0;
            }
        }
    }
    View {
        side,
        channels: c,
        data,
    }
}

fn luma(px: &[f32]) -> f32 {
    if px.len() == 3 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    } else {
        px[0]
    }
}

fn jitter(view: &mut View, strength: f64, rng: &mut StreamRng) {
    let mut factor = || (1.0 - strength + 2.0 * strength * rng.random::<f64>()).max(0.0) as f32;
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    let c = view.channels;
    for v in view.data.iter_mut() {
        *v *= brightness;
    }
    let mean = view.data.chunks_exact(c).map(luma).sum::<f32>() / (view.side * view.side) as f32;
    for v in view.data.iter_mut() {
        *v = mean + (*v - mean) * contrast;
    }
    if c == 3 {
        for px in view.data.chunks_exact_mut(3) {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = g + (*v - g) * saturation;
            }
        }
    }
    for v in view.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn to_gray(view: &mut View) {
    if view.channels != 3 {
        return;
    }
    for px in view.data.chunks_exact_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}
