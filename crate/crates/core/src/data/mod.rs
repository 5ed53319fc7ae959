//! Patch datasets: loading, stratified splits, augmentation and synthetic
//! generators for both patch classification and bag-level MIL.

mod augment;
mod bags;
mod io;
mod split;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub use augment::{augment_pair, augment_single, resize_view, AugmentationPolicy, StreamKey, View};
pub use bags::{generate_bag_images, generate_bags, BagSpec, ImageBag};
pub use io::{decode_manifest, decode_png, encode_png, load_manifest, save_manifest, ManifestRow};
pub use split::make_splits;
pub use synthetic::{generate_synthetic, synthesize_image, SyntheticSpec};

/// An 8-bit image stored row-major with interleaved channels (HWC).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} bytes, got {}",
                height,
                width,
                channels,
                height * width * channels,
                pixels.len()
            )));
        }
        if !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchItem {
    pub id: String,
    pub image: Image,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
    Test,
}

/// A set of equally shaped patches with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    items: Vec<PatchItem>,
    class_count: usize,
    pub split: SplitTag,
}

impl PatchDataset {
    pub fn new(items: Vec<PatchItem>, class_count: usize, split: SplitTag) -> Result<Self> {
        if class_count < 2 {
            return Err(invalid!("a dataset needs at least 2 classes, got {class_count}"));
        }
        if let Some(first) = items.first() {
            let shape = first.image.shape();
            if let Some(bad) = items.iter().find(|it| it.image.shape() != shape) {
                return Err(Error::Shape(format!(
                    "item `{}` is {:?}, expected {:?}",
                    bad.id,
                    bad.image.shape(),
                    shape
                )));
            }
        }
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::DuplicateId(it.id.clone()));
            }
            if let Some(l) = it.label {
                if l >= class_count {
                    return Err(invalid!(
                        "item `{}` has label {l} but only {class_count} classes",
                        it.id
                    ));
                }
            }
        }
        Ok(Self {
            items,
            class_count,
            split,
        })
    }

    pub fn items(&self) -> &[PatchItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `(height, width, channels)` of every image, `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.items.first().map(|it| it.image.shape())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|it| it.id.as_str())
    }

    /// Labels of every item; errors if any item is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|it| {
                it.label
                    .ok_or_else(|| Error::InsufficientData(format!("item `{}` has no label", it.id)))
            })
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for it in &self.items {
            if let Some(l) = it.label {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Builds a new dataset from the items whose ids satisfy `keep`,
    /// preserving order.
    pub fn filter(&self, split: SplitTag, mut keep: impl FnMut(&PatchItem) -> bool) -> Self {
        Self {
            items: self.items.iter().filter(|it| keep(it)).cloned().collect(),
            class_count: self.class_count,
            split,
        }
    }

    /// Same items with every label removed.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        for it in &mut out.items {
            it.label = None;
        }
        out
    }

    /// Stable hash of the sorted item ids.
    pub fn fingerprint(&self) -> String {
        let mut ids: Vec<&str> = self.ids().collect();
        ids.sort_unstable();
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
