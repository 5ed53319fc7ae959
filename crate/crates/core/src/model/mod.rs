//! Residual convolutional encoder, projection head and classification
//! heads, plus checkpoint persistence.

mod checkpoint;
mod graph;
pub mod optim;
mod params;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::View;
use crate::error::{invalid, Error, Result};
use crate::evidential::{opinion_from_evidence, DirichletOpinion};
use crate::rng::{self, Purpose};

pub use checkpoint::{
    check_fingerprint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    ModelCheckpoint, Stage, CHECKPOINT_MAGIC,
};
pub use graph::{Graph, Op, SlotShape, Tape};
pub use params::{ParamEntry, ParamRef, ParamSet};

/// Samples per work unit. Fixed so that gradient sums do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthPreset {
    /// Three stages of one basic residual block each.
    Small,
    /// Bottleneck stages of 3, 4, 6 and 3 blocks.
    Resnet50Like,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth_preset: DepthPreset,
    pub width_multiplier: f64,
    pub embedding_dim: usize,
    pub input_side: usize,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth_preset: DepthPreset::Small,
            width_multiplier: 1.0,
            embedding_dim: 64,
            input_side: 32,
            input_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(invalid!("embedding_dim must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 8.0) {
            return Err(invalid!("width multiplier must be in (0, 8]"));
        }
        if self.embedding_dim > 1 << 16 {
            return Err(invalid!("embedding_dim {} is too large", self.embedding_dim));
        }
        if !(self.input_channels == 1 || self.input_channels == 3) {
            return Err(invalid!("input channels must be 1 or 3"));
        }
        if !(8..=1024).contains(&self.input_side) {
            return Err(invalid!("input side must be between 8 and 1024"));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionHeadConfig {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Projection layers kept below the classifier when fine-tuning.
    pub reattach_depth: usize,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        Self {
            layer_count: 3,
            hidden_dim: 64,
            output_dim: 32,
            reattach_depth: 1,
        }
    }
}

impl ProjectionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(invalid!("projection head dimensions must be positive"));
        }
        if self.layer_count > 16 || self.hidden_dim > 1 << 16 || self.output_dim > 1 << 16 {
            return Err(invalid!("projection head is too large"));
        }
        if self.reattach_depth > self.layer_count {
            return Err(invalid!(
                "reattach depth {} exceeds the {} projection layers",
                self.reattach_depth,
                self.layer_count
            ));
        }
        Ok(())
    }

    fn layer_out(&self, i: usize) -> usize {
        if i + 1 == self.layer_count {
            self.output_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Projection,
    Softmax,
    Evidential,
}

/// Everything needed to rebuild a network's graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub projection: ProjectionHeadConfig,
    pub head: HeadKind,
    pub class_count: Option<usize>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projection.validate()?;
        match (self.head, self.class_count) {
            (HeadKind::Projection, _) => Ok(()),
            (_, Some(k)) if (2..=1 << 16).contains(&k) => Ok(()),
            (_, k) => Err(invalid!("classifier heads need at least 2 classes, got {k:?}")),
        }
    }
}

/// A built network: graph, named parameters and the slots of interest.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamSet,
    graph: Graph,
    embedding_slot: usize,
    output_slot: usize,
}

struct Builder<'a> {
    graph: Graph,
    params: ParamSet,
    rng: &'a mut rng::StreamRng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, src: usize, cout: usize, kernel: usize, stride: usize, relu: bool, zero: bool) -> usize {
        let (h, w, cin) = self.graph.slot_shape(src);
        let pad = kernel / 2;
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let dst = self.graph.add_slot((ho, wo, cout));
        let fan_in = kernel * kernel * cin;
        let shape = vec![fan_in, cout];
        let weight = if zero {
            self.params.push_zeros(format!("{name}.weight"), shape)
        } else {
            self.params.push_he(format!("{name}.weight"), shape, fan_in, self.rng)
        };
        let bias = self.params.push_zeros(format!("{name}.bias"), vec![cout]);
        self.graph.ops.push(Op::Conv {
            weight,
            bias,
            kernel,
            stride,
            pad,
            src,
            dst,
            relu,
        });
        dst
    }

    fn linear(&mut self, name: &str, src: usize, dout: usize, relu: bool) -> usize {
        let din = self.graph.slot_width(src);
        let dst = self.graph.add_slot((1, 1, dout));
        let weight = self.params.push_he(format!("{name}.weight"), vec![din, dout], din, self.rng);
        let bias = self.params.push_zeros(format!("{name}.bias"), vec![dout]);
        self.graph.ops.push(Op::Linear {
            weight,
            bias,
            src,
            dst,
            relu,
        });
        dst
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let dst = self.graph.add_slot(self.graph.slot_shape(a));
        self.graph.ops.push(Op::Add { a, b, dst, relu: true });
        dst
    }

    fn basic_block(&mut self, name: &str, src: usize, cout: usize, stride: usize) -> usize {
        let cin = self.graph.slot_shape(src).2;
        let h1 = self.conv(&format!("{name}.conv1"), src, cout, 3, stride, true, false);
        // zero-initialized last conv: each residual branch starts as identity
        let h2 = self.conv(&format!("{name}.conv2"), h1, cout, 3, 1, false, true);
        let short = if stride != 1 || cin != cout {
            self.conv(&format!("{name}.shortcut"), src, cout, 1, stride, false, false)
        } else {
            src
        };
        self.add(h2, short)
    }

    fn bottleneck(&mut self, name: &str, src: usize, mid: usize, stride: usize) -> usize {
        let cin = self.graph.slot_shape(src).2;
        let cout = mid * 4;
        let h1 = self.conv(&format!("{name}.conv1"), src, mid, 1, 1, true, false);
        let h2 = self.conv(&format!("{name}.conv2"), h1, mid, 3, stride, true, false);
        let h3 = self.conv(&format!("{name}.conv3"), h2, cout, 1, 1, false, true);
        let short = if stride != 1 || cin != cout {
            self.conv(&format!("{name}.shortcut"), src, cout, 1, stride, false, false)
        } else {
            src
        };
        self.add(h3, short)
    }

    fn encoder(&mut self, cfg: &EncoderConfig) -> usize {
        let input = self.graph.add_slot((cfg.input_side, cfg.input_side, cfg.input_channels));
        debug_assert_eq!(input, 0);
        let mut x;
        match cfg.depth_preset {
            DepthPreset::Small => {
                x = self.conv("encoder.stem", input, cfg.width(8), 3, 2, true, false);
                for (s, (base, stride)) in [(8, 1), (16, 2), (32, 2)].into_iter().enumerate() {
                    x = self.basic_block(&format!("encoder.stage{}.block0", s + 1), x, cfg.width(base), stride);
                }
            }
            DepthPreset::Resnet50Like => {
                x = self.conv("encoder.stem", input, cfg.width(64), 7, 2, true, false);
                for (s, (blocks, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
                    for b in 0..blocks {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        x = self.bottleneck(&format!("encoder.stage{}.block{b}", s + 1), x, cfg.width(mid), stride);
                    }
                }
            }
        }
        let pooled = self.graph.add_slot((1, 1, self.graph.slot_shape(x).2));
        self.graph.ops.push(Op::GlobalAvgPool { src: x, dst: pooled });
        if self.graph.slot_width(pooled) == cfg.embedding_dim {
            pooled
        } else {
            self.linear("encoder.embed", pooled, cfg.embedding_dim, false)
        }
    }
}

impl Model {
    /// Builds and initializes a network. Initialization depends only on
    /// `seed` and the architecture.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init_rng = rng::stream(seed, Purpose::Init, 0, 0);
        let mut b = Builder {
            graph: Graph::default(),
            params: ParamSet::default(),
            rng: &mut init_rng,
        };
        let embedding = b.encoder(&arch.encoder);
        let proj = &arch.projection;
        let mut x = embedding;
        let output = match arch.head {
            HeadKind::Projection => {
                for i in 0..proj.layer_count {
                    let last = i + 1 == proj.layer_count;
                    x = b.linear(&format!("proj.{i}"), x, proj.layer_out(i), !last);
                }
                x
            }
            HeadKind::Softmax | HeadKind::Evidential => {
                for i in 0..proj.reattach_depth {
                    x = b.linear(&format!("proj.{i}"), x, proj.layer_out(i), true);
                }
                let k = arch.class_count.expect("validated");
                b.linear("classifier", x, k, arch.head == HeadKind::Evidential)
            }
        };
        let mut params = b.params;
        if arch.head == HeadKind::Evidential {
            // every class starts at unit evidence so no ReLU output is dead
            params.get_mut("classifier.weight").expect("built").fill(0.0);
            params.get_mut("classifier.bias").expect("built").fill(1.0);
        }
        Ok(Self {
            graph: b.graph,
            params,
            arch,
            embedding_slot: embedding,
            output_slot: output,
        })
    }

    /// Encoder only, with the default projection head attached.
    pub fn build_encoder(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(
            Architecture {
                encoder: cfg,
                projection: ProjectionHeadConfig::default(),
                head: HeadKind::Projection,
                class_count: None,
            },
            seed,
        )
    }

    /// A classifier on top of this model's encoder and the retained
    /// projection layers; the new classifier layer is freshly initialized.
    pub fn attach_head(&self, head: HeadKind, class_count: usize, seed: u64) -> Result<Self> {
        if head == HeadKind::Projection {
            return Err(invalid!("attach_head expects a classifier head"));
        }
        if class_count < 2 {
            return Err(invalid!("classifier heads need at least 2 classes, got {class_count}"));
        }
        let arch = Architecture {
            head,
            class_count: Some(class_count),
            ..self.arch.clone()
        };
        let mut out = Self::build(arch, seed)?;
        out.params.copy_prefix_from(&self.params, "encoder.")?;
        for i in 0..self.arch.projection.reattach_depth {
            out.params.copy_prefix_from(&self.params, &format!("proj.{i}."))?;
        }
        Ok(out)
    }

    /// Rebuilds a model around decoded parameters.
    pub fn from_parts(arch: Architecture, params: ParamSet) -> Result<Self> {
        let layout = Self::build(arch, 0)?;
        let tensors = params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), params.data[e.range()].to_vec()))
            .collect();
        let params = ParamSet::from_tensors(&layout.params, tensors)?;
        Ok(Self { params, ..layout })
    }

    pub fn input_width(&self) -> usize {
        self.graph.slot_width(0)
    }

    pub fn output_dim(&self) -> usize {
        self.graph.slot_width(self.output_slot)
    }

    pub fn embedding_dim(&self) -> usize {
        self.graph.slot_width(self.embedding_slot)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn same_architecture(&self, other: &Model) -> bool {
        self.arch == other.arch
    }

    fn check_input(&self, input: &[f32]) -> Result<usize> {
        let w = self.input_width();
        if input.len() % w != 0 {
            return Err(Error::Shape(format!(
                "input of {} values is not a whole number of {}-value samples",
                input.len(),
                w
            )));
        }
        Ok(input.len() / w)
    }

    fn run_slot(&self, input: &[f32], slot: usize) -> Result<Vec<f32>> {
        let n = self.check_input(input)?;
        let w = self.input_width();
        let parts: Vec<Vec<f32>> = input
            .par_chunks(CHUNK * w)
            .map(|chunk| {
                let m = chunk.len() / w;
                let mut tape = self.graph.forward(&self.params.data, chunk.to_vec(), m, Some(slot));
                std::mem::take(&mut tape.acts[slot])
            })
            .collect();
        let out: Vec<f32> = parts.concat();
        debug_assert_eq!(out.len(), n * self.graph.slot_width(slot));
        Ok(out)
    }

    /// Head outputs (projection, logits or evidence) for a flat batch.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.run_slot(input, self.output_slot)
    }

    /// Encoder embeddings for a flat batch.
    pub fn embed(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.run_slot(input, self.embedding_slot)
    }

    /// Per-item class scores: softmax probabilities for a softmax head,
    /// Dirichlet mean probabilities for an evidential head.
    pub fn class_scores(&self, input: &[f32]) -> Result<Vec<Vec<f64>>> {
        match self.arch.head {
            HeadKind::Softmax => Ok(self.forward(input)?.chunks(self.output_dim()).map(softmax_f32).collect()),
            HeadKind::Evidential => Ok(self.opinions(input)?.into_iter().map(|o| o.mean).collect()),
            HeadKind::Projection => Err(invalid!("a projection head produces no class scores")),
        }
    }

    /// Dirichlet opinions from an evidential head.
    pub fn opinions(&self, input: &[f32]) -> Result<Vec<DirichletOpinion>> {
        if self.arch.head != HeadKind::Evidential {
            return Err(Error::CheckpointMismatch(format!(
                "uncertainty needs an evidential head, this model has a {:?} head",
                self.arch.head
            )));
        }
        self.forward(input)?
            .chunks(self.output_dim())
            .map(|e| opinion_from_evidence(&e.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .collect()
    }

    /// Forward, loss, backward. `loss` receives the head outputs of the
    /// whole batch and returns the loss and its gradient with respect to
    /// those outputs. Returns the loss and the parameter gradient.
    pub fn loss_and_grad<F>(&self, input: &[f32], loss: F) -> Result<(f64, Vec<f32>)>
    where
        F: FnOnce(&[f32]) -> Result<(f64, Vec<f32>)>,
    {
        self.check_input(input)?;
        let w = self.input_width();
        let out_w = self.output_dim();
        let tapes: Vec<Tape> = input
            .par_chunks(CHUNK * w)
            .map(|chunk| self.graph.forward(&self.params.data, chunk.to_vec(), chunk.len() / w, None))
            .collect();
        let outputs: Vec<f32> = tapes.iter().flat_map(|t| t.slot(self.output_slot).iter().copied()).collect();
        let (value, d_out) = loss(&outputs)?;
        if d_out.len() != outputs.len() {
            return Err(Error::Shape("loss gradient does not match outputs".into()));
        }
        let mut offsets = Vec::with_capacity(tapes.len());
        let mut at = 0;
        for t in &tapes {
            offsets.push(at);
            at += t.n * out_w;
        }
        let grads: Vec<Vec<f32>> = tapes
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(tape, &off)| {
                let mut g = vec![0f32; self.params.len()];
                let seed = d_out[off..off + tape.n * out_w].to_vec();
                self.graph.backward(&self.params.data, tape, vec![(self.output_slot, seed)], &mut g);
                g
            })
            .collect();
        let mut total = vec![0f32; self.params.len()];
        for g in &grads {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok((value, total))
    }
}

pub(crate) fn softmax_f32(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|&v| f64::from(v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Packs views into the network's flat input layout, centering and scaling
/// intensities.
pub fn views_to_input<'a>(views: impl IntoIterator<Item = &'a View>) -> Vec<f32> {
    let mut out = Vec::new();
    for v in views {
        out.extend(v.data.iter().map(|x| (x - 0.5) * 4.0));
    }
    out
}
