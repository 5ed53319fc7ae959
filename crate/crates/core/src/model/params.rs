use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Location of one named tensor inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable parameters of a network in one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    pub data: Vec<f32>,
}

/// Handle to a registered tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    #[inline]
    pub fn slice<'a>(&self, data: &'a [f32]) -> &'a [f32] {
        &data[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn slice_mut<'a>(&self, data: &'a mut [f32]) -> &'a mut [f32] {
        &mut data[self.offset..self.offset + self.len]
    }
}

impl ParamSet {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.entries.iter().find(|e| e.name == name)?.range();
        Some(&mut self.data[range])
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f32>) -> ParamRef {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let offset = self.data.len();
        let len = values.len();
        self.data.extend(values);
        self.entries.push(ParamEntry { name, shape, offset });
        ParamRef { offset, len }
    }

    /// He-normal initialization with the given fan-in.
    pub(crate) fn push_he(&mut self, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut StreamRng) -> ParamRef {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let values = (0..n)
            .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        self.push(name, shape, values)
    }

    pub(crate) fn push_zeros(&mut self, name: String, shape: Vec<usize>) -> ParamRef {
        let n = shape.iter().product();
        self.push(name, shape, vec![0.0; n])
    }

    /// Rebuilds a set from decoded tensors, checking that names and shapes
    /// match `layout` exactly.
    pub fn from_tensors(layout: &ParamSet, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        if tensors.len() != layout.entries.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                layout.entries.len(),
                tensors.len()
            )));
        }
        let mut out = layout.clone();
        for (entry, (name, shape, values)) in layout.entries.iter().zip(tensors) {
            if entry.name != name || entry.shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor `{name}` {shape:?} does not match expected `{}` {:?}",
                    entry.name, entry.shape
                )));
            }
            out.data[entry.range()].copy_from_slice(&values);
        }
        Ok(out)
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for entry in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let src = other
                .entries
                .iter()
                .find(|e| e.name == entry.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("source lacks `{}`", entry.name)))?;
            if src.shape != entry.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` has shape {:?} in source, {:?} here",
                    entry.name, src.shape, entry.shape
                )));
            }
            self.data[entry.range()].copy_from_slice(&other.data[src.range()]);
            copied += 1;
        }
        Ok(copied)
    }
}
