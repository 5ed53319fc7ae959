use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Bag, DistillStrategy, PseudoBag};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Purpose};

/// Dense layer stored inside the flat parameter vector; `w` is dout x din.
#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

impl Lin {
    fn apply(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate().take(self.dout) {
            let row = &theta[self.w + o * self.din..self.w + (o + 1) * self.din];
            *y = theta[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn backward(&self, theta: &[f64], x: &[f64], d: &[f64], grad: &mut [f64], mut dx: Option<&mut [f64]>) {
        for (o, &dy) in d.iter().enumerate().take(self.dout) {
            if dy == 0.0 {
                continue;
            }
            grad[self.b + o] += dy;
            let base = self.w + o * self.din;
            for k in 0..self.din {
                grad[base + k] += dy * x[k];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for k in 0..self.din {
                    dx[k] += theta[base + k] * dy;
                }
            }
        }
    }
}

/// Gated attention: s_i = w . (tanh(V x_i + b_v) * sigmoid(U x_i + b_u)).
#[derive(Clone, Copy, Debug)]
struct Gated {
    v: Lin,
    u: Lin,
    w: usize,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    reducer: Option<Lin>,
    att1: Gated,
    cls1: Lin,
    att2: Gated,
    cls2: Lin,
    len: usize,
}

impl Layout {
    fn new(input_dim: usize, reduced_dim: Option<usize>, attention_dim: usize, strategy: DistillStrategy) -> Self {
        let mut at = 0;
        let mut lin = |din: usize, dout: usize| {
            let l = Lin {
                w: at,
                b: at + din * dout,
                din,
                dout,
            };
            at += din * dout + dout;
            l
        };
        let reducer = reduced_dim.map(|r| lin(input_dim, r));
        let h = reduced_dim.unwrap_or(input_dim);
        let (v1, u1) = (lin(h, attention_dim), lin(h, attention_dim));
        let cls1 = lin(h, 1);
        let g = strategy.output_dim(h);
        let (v2, u2) = (lin(g, attention_dim), lin(g, attention_dim));
        let cls2 = lin(g, 1);
        let w1 = at;
        let w2 = at + attention_dim;
        Self {
            reducer,
            att1: Gated {
                v: v1,
                u: u1,
                w: w1,
                hidden: attention_dim,
            },
            cls1,
            att2: Gated {
                v: v2,
                u: u2,
                w: w2,
                hidden: attention_dim,
            },
            cls2,
            len: at + 2 * attention_dim,
        }
    }
}

/// Per-instance attention weights and instance probabilities of one
/// pseudo-bag.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub attention: Vec<f64>,
    pub instance_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
struct GatedCache {
    t: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Tier1Output {
    pub record: AttentionRecord,
    pub embedding: Vec<f64>,
    pub logit: f64,
    cache: GatedCache,
}

#[derive(Clone, Debug)]
pub struct Tier2Output {
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
    cache: GatedCache,
}

#[derive(Clone, Debug)]
pub struct BagOutput {
    pub tier1: Vec<Tier1Output>,
    pub distilled: Vec<Vec<f64>>,
    pub tier2: Tier2Output,
    /// Instance features after the optional reduction layer.
    hidden: Vec<f64>,
    pre: Vec<f64>,
}

/// Tier-1 and tier-2 attention networks with their classifiers, in one
/// flat f64 parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilNet {
    pub input_dim: usize,
    pub reduced_dim: Option<usize>,
    pub attention_dim: usize,
    pub strategy: DistillStrategy,
    pub theta: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy of the tier-1 pseudo-bag predictions plus the
/// binary cross-entropy of the tier-2 bag prediction.
pub fn dtfd_loss(tier1_logits: &[f64], tier2_prob: f64, label: bool) -> f64 {
    let y = f64::from(u8::from(label));
    let t1 = tier1_logits.iter().map(|&z| bce_logit(z, y)).sum::<f64>() / tier1_logits.len().max(1) as f64;
    t1 + bce(tier2_prob, y)
}

/// `dtfd_loss` with its gradients with respect to each tier-1 logit and
/// the tier-2 probability.
pub fn dtfd_loss_grad(tier1_logits: &[f64], tier2_prob: f64, label: bool) -> (f64, Vec<f64>, f64) {
    let y = f64::from(u8::from(label));
    let n = tier1_logits.len().max(1) as f64;
    let d_logits = tier1_logits.iter().map(|&z| (sigmoid(z) - y) / n).collect();
    let d_prob = if tier2_prob <= 1e-15 || tier2_prob >= 1.0 - 1e-15 {
        0.0
    } else {
        (tier2_prob - y) / (tier2_prob * (1.0 - tier2_prob))
    };
    (dtfd_loss(tier1_logits, tier2_prob, label), d_logits, d_prob)
}

fn pool(x: &[f64], dim: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, &w) in a.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
            *o += w * v;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_argmin(p: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[hi] {
            hi = i;
        }
        if v < p[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

pub(super) fn distill(rows: &[f64], dim: usize, probs: &[f64], strategy: DistillStrategy) -> Vec<f64> {
    let (hi, lo) = argmax_argmin(probs);
    match strategy {
        DistillStrategy::MaxS => rows[hi * dim..(hi + 1) * dim].to_vec(),
        DistillStrategy::MaxMinS => {
            let mut v = rows[hi * dim..(hi + 1) * dim].to_vec();
            v.extend_from_slice(&rows[lo * dim..(lo + 1) * dim]);
            v
        }
        DistillStrategy::Afs => pool(rows, dim, &softmax(probs)),
    }
}

fn gated_forward(theta: &[f64], ga: &Gated, x: &[f64], n: usize) -> GatedCache {
    let (l, d) = (ga.hidden, ga.v.din);
    let mut t = vec![0.0; n * l];
    let mut g = vec![0.0; n * l];
    let mut s = vec![0.0; n];
    let w = &theta[ga.w..ga.w + l];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let ti = &mut t[i * l..(i + 1) * l];
        ga.v.apply(theta, xi, ti);
        ti.iter_mut().for_each(|v| *v = v.tanh());
        let gi = &mut g[i * l..(i + 1) * l];
        ga.u.apply(theta, xi, gi);
        gi.iter_mut().for_each(|v| *v = sigmoid(*v));
        s[i] = (0..l).map(|k| w[k] * t[i * l + k] * g[i * l + k]).sum();
    }
    GatedCache { t, g, a: softmax(&s) }
}

#[allow(clippy::too_many_arguments)]
fn gated_backward(theta: &[f64], ga: &Gated, x: &[f64], n: usize, c: &GatedCache, da: &[f64], grad: &mut [f64], dx: &mut [f64]) {
    let (l, d) = (ga.hidden, ga.v.din);
    let mean = dot(&c.a, da);
    let mut dzt = vec![0.0; l];
    let mut dzg = vec![0.0; l];
    for i in 0..n {
        let ds = c.a[i] * (da[i] - mean);
        for k in 0..l {
            let (t, g) = (c.t[i * l + k], c.g[i * l + k]);
            let w = theta[ga.w + k];
            grad[ga.w + k] += ds * t * g;
            dzt[k] = ds * w * g * (1.0 - t * t);
            dzg[k] = ds * w * t * g * (1.0 - g);
        }
        let xi = &x[i * d..(i + 1) * d];
        let dxi = &mut dx[i * d..(i + 1) * d];
        ga.v.backward(theta, xi, &dzt, grad, Some(&mut *dxi));
        ga.u.backward(theta, xi, &dzg, grad, Some(dxi));
    }
}

impl MilNet {
    pub fn new(
        input_dim: usize,
        reduced_dim: Option<usize>,
        attention_dim: usize,
        strategy: DistillStrategy,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || attention_dim == 0 || reduced_dim == Some(0) {
            return Err(invalid!("MIL dimensions must be positive"));
        }
        let layout = Layout::new(input_dim, reduced_dim, attention_dim, strategy);
        let mut theta = vec![0.0; layout.len];
        let mut r = rng::stream(seed, Purpose::Init, 1, 0);
        let mut fill = |lin: &Lin, gain: f64, r: &mut rng::StreamRng| {
            let std = gain / (lin.din as f64).sqrt();
            for v in &mut theta[lin.w..lin.w + lin.din * lin.dout] {
                *v = std * r.sample::<f64, _>(StandardNormal);
            }
        };
        if let Some(red) = &layout.reducer {
            fill(red, 2f64.sqrt(), &mut r);
        }
        for ga in [&layout.att1, &layout.att2] {
            fill(&ga.v, 1.0, &mut r);
            fill(&ga.u, 1.0, &mut r);
        }
        fill(&layout.cls1, 1.0, &mut r);
        fill(&layout.cls2, 1.0, &mut r);
        let wstd = 1.0 / (attention_dim as f64).sqrt();
        for ga in [&layout.att1, &layout.att2] {
            for v in &mut theta[ga.w..ga.w + attention_dim] {
                *v = wstd * r.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self {
            input_dim,
            reduced_dim,
            attention_dim,
            strategy,
            theta,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.input_dim, self.reduced_dim, self.attention_dim, self.strategy)
    }

    /// Checks that a deserialized network is internally consistent.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.attention_dim == 0 || self.reduced_dim == Some(0) {
            return Err(invalid!("MIL dimensions must be positive"));
        }
        let want = self.layout().len;
        if self.theta.len() != want {
            return Err(Error::CheckpointMismatch(format!(
                "MIL network has {} parameters, its dimensions imply {want}",
                self.theta.len()
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.theta.len()
    }

    /// Width of instance features as seen by tier 1.
    pub fn hidden_dim(&self) -> usize {
        self.reduced_dim.unwrap_or(self.input_dim)
    }

    fn hidden(&self, lay: &Layout, bag: &Bag) -> (Vec<f64>, Vec<f64>) {
        match &lay.reducer {
            None => (Vec::new(), bag.features().to_vec()),
            Some(red) => {
                let n = bag.len();
                let mut pre = vec![0.0; n * red.dout];
                for i in 0..n {
                    red.apply(&self.theta, bag.instance(i), &mut pre[i * red.dout..(i + 1) * red.dout]);
                }
                let h = pre.iter().map(|v| v.max(0.0)).collect();
                (pre, h)
            }
        }
    }

    /// Tier-1 attention pooling over `n` rows of hidden features.
    pub fn tier1_forward(&self, rows: &[f64], n: usize) -> Tier1Output {
        let lay = self.layout();
        let h = self.hidden_dim();
        let cache = gated_forward(&self.theta, &lay.att1, rows, n);
        let embedding = pool(rows, h, &cache.a);
        let mut z = [0.0];
        lay.cls1.apply(&self.theta, &embedding, &mut z);
        let instance_probs = (0..n)
            .map(|i| {
                let mut zi = [0.0];
                lay.cls1.apply(&self.theta, &rows[i * h..(i + 1) * h], &mut zi);
                sigmoid(zi[0])
            })
            .collect();
        Tier1Output {
            record: AttentionRecord {
                attention: cache.a.clone(),
                instance_probs,
            },
            embedding,
            logit: z[0],
            cache,
        }
    }

    /// Tier-2 attention pooling over `m` distilled vectors.
    pub fn tier2_forward(&self, vectors: &[f64], m: usize) -> Tier2Output {
        let lay = self.layout();
        let g = lay.cls2.din;
        let cache = gated_forward(&self.theta, &lay.att2, vectors, m);
        let embedding = pool(vectors, g, &cache.a);
        let mut z = [0.0];
        lay.cls2.apply(&self.theta, &embedding, &mut z);
        Tier2Output {
            attention: cache.a.clone(),
            embedding,
            logit: z[0],
            probability: sigmoid(z[0]),
            cache,
        }
    }

    fn check_bag(&self, bag: &Bag, parts: &[PseudoBag]) -> Result<()> {
        if bag.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "bag {} has {}-dimensional features, the MIL network expects {}",
                bag.id,
                bag.dim(),
                self.input_dim
            )));
        }
        if parts.is_empty() || parts.iter().any(|p| p.indices.is_empty() || p.indices.iter().any(|&i| i >= bag.len())) {
            return Err(invalid!("pseudo-bags of {} are empty or index past the bag", bag.id));
        }
        Ok(())
    }

    fn gather(rows: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied()).collect()
    }

    pub fn forward(&self, bag: &Bag, parts: &[PseudoBag]) -> Result<BagOutput> {
        self.check_bag(bag, parts)?;
        let lay = self.layout();
        let h = self.hidden_dim();
        let (pre, hidden) = self.hidden(&lay, bag);
        let mut tier1 = Vec::with_capacity(parts.len());
        let mut distilled = Vec::with_capacity(parts.len());
        for p in parts {
            let rows = Self::gather(&hidden, h, &p.indices);
            let t1 = self.tier1_forward(&rows, p.indices.len());
            distilled.push(distill(&rows, h, &t1.record.instance_probs, self.strategy));
            tier1.push(t1);
        }
        let flat: Vec<f64> = distilled.concat();
        let tier2 = self.tier2_forward(&flat, parts.len());
        Ok(BagOutput {
            tier1,
            distilled,
            tier2,
            hidden,
            pre,
        })
    }

    fn objective(out: &BagOutput, label: bool) -> f64 {
        let y = f64::from(u8::from(label));
        let m = out.tier1.len() as f64;
        out.tier1.iter().map(|t| bce_logit(t.logit, y)).sum::<f64>() / m + bce_logit(out.tier2.logit, y)
    }

    /// Joint tier-1 + tier-2 loss for one bag under a fixed partition.
    pub fn loss(&self, bag: &Bag, parts: &[PseudoBag]) -> Result<f64> {
        Ok(Self::objective(&self.forward(bag, parts)?, bag.label))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, bag: &Bag, parts: &[PseudoBag]) -> Result<(f64, Vec<f64>)> {
        let out = self.forward(bag, parts)?;
        let lay = self.layout();
        let theta = &self.theta;
        let y = f64::from(u8::from(bag.label));
        let h = self.hidden_dim();
        let gdim = lay.cls2.din;
        let m = parts.len();
        let mut grad = vec![0.0; theta.len()];

        // tier 2
        let dz2 = sigmoid(out.tier2.logit) - y;
        let mut d_emb2 = vec![0.0; gdim];
        lay.cls2.backward(theta, &out.tier2.embedding, &[dz2], &mut grad, Some(&mut d_emb2));
        let flat: Vec<f64> = out.distilled.concat();
        let mut d_flat = vec![0.0; m * gdim];
        let mut d_beta = vec![0.0; m];
        for j in 0..m {
            let v = &flat[j * gdim..(j + 1) * gdim];
            d_beta[j] = dot(&d_emb2, v);
            let b = out.tier2.cache.a[j];
            for (d, e) in d_flat[j * gdim..(j + 1) * gdim].iter_mut().zip(&d_emb2) {
                *d += b * e;
            }
        }
        gated_backward(theta, &lay.att2, &flat, m, &out.tier2.cache, &d_beta, &mut grad, &mut d_flat);

        // tier 1, per pseudo-bag
        let mut d_hidden = vec![0.0; out.hidden.len()];
        for (j, (p, t1)) in parts.iter().zip(&out.tier1).enumerate() {
            let n = p.indices.len();
            let rows = Self::gather(&out.hidden, h, &p.indices);
            let mut d_rows = vec![0.0; n * h];
            let dd = &d_flat[j * gdim..(j + 1) * gdim];
            let probs = &t1.record.instance_probs;
            let mut d_prob = vec![0.0; n];
            let (hi, lo) = argmax_argmin(probs);
            match self.strategy {
                DistillStrategy::MaxS => add(&mut d_rows[hi * h..(hi + 1) * h], dd),
                DistillStrategy::MaxMinS => {
                    add(&mut d_rows[hi * h..(hi + 1) * h], &dd[..h]);
                    add(&mut d_rows[lo * h..(lo + 1) * h], &dd[h..]);
                }
                DistillStrategy::Afs => {
                    let q = softmax(probs);
                    let dq: Vec<f64> = (0..n).map(|i| dot(dd, &rows[i * h..(i + 1) * h])).collect();
                    let mean = dot(&q, &dq);
                    for i in 0..n {
                        for (d, e) in d_rows[i * h..(i + 1) * h].iter_mut().zip(dd) {
                            *d += q[i] * e;
                        }
                        d_prob[i] = q[i] * (dq[i] - mean);
                    }
                }
            }
            for i in 0..n {
                let dz = d_prob[i] * probs[i] * (1.0 - probs[i]);
                if dz != 0.0 {
                    let xi = &rows[i * h..(i + 1) * h];
                    lay.cls1.backward(theta, xi, &[dz], &mut grad, Some(&mut d_rows[i * h..(i + 1) * h]));
                }
            }
            let dz1 = (sigmoid(t1.logit) - y) / m as f64;
            let mut d_emb1 = vec![0.0; h];
            lay.cls1.backward(theta, &t1.embedding, &[dz1], &mut grad, Some(&mut d_emb1));
            let mut d_att = vec![0.0; n];
            for i in 0..n {
                d_att[i] = dot(&d_emb1, &rows[i * h..(i + 1) * h]);
                let a = t1.cache.a[i];
                for (d, e) in d_rows[i * h..(i + 1) * h].iter_mut().zip(&d_emb1) {
                    *d += a * e;
                }
            }
            gated_backward(theta, &lay.att1, &rows, n, &t1.cache, &d_att, &mut grad, &mut d_rows);
            for (k, &i) in p.indices.iter().enumerate() {
                add(&mut d_hidden[i * h..(i + 1) * h], &d_rows[k * h..(k + 1) * h]);
            }
        }

        if let Some(red) = &lay.reducer {
            for i in 0..bag.len() {
                let dz: Vec<f64> = (0..h)
                    .map(|k| if out.pre[i * h + k] > 0.0 { d_hidden[i * h + k] } else { 0.0 })
                    .collect();
                red.backward(theta, bag.instance(i), &dz, &mut grad, None);
            }
        }
        Ok((Self::objective(&out, bag.label), grad))
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::super::split_pseudo_bags;
    use super::*;

    fn random_bag(n: usize, d: usize, seed: u64, label: bool) -> Bag {
        let mut r = rng::stream(seed, Purpose::Probe, 0, 0);
        let f = (0..n * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        Bag::new(format!("b{seed}"), label, f, d, None).unwrap()
    }

    #[test]
    fn single_instance_gets_full_weight() {
        let net = MilNet::new(3, None, 8, DistillStrategy::Afs, 0).unwrap();
        let x = [0.3, -1.0, 2.0];
        let t1 = net.tier1_forward(&x, 1);
        assert_eq!(t1.record.attention, vec![1.0]);
        assert_eq!(t1.embedding, x.to_vec());
        let t2 = net.tier2_forward(&x, 1);
        assert_eq!(t2.attention, vec![1.0]);
        assert!(t2.probability > 0.0 && t2.probability < 1.0);
    }

    #[test]
    fn identical_instances_share_attention() {
        let net = MilNet::new(2, None, 4, DistillStrategy::Afs, 1).unwrap();
        let t1 = net.tier1_forward(&[0.5, 0.5, 0.5, 0.5], 2);
        assert_eq!(t1.record.attention, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_permutation_invariant() {
        let net = MilNet::new(4, None, 6, DistillStrategy::Afs, 2).unwrap();
        let bag = random_bag(5, 4, 3, true);
        let x = bag.features().to_vec();
        let perm = [3, 0, 4, 1, 2];
        let px: Vec<f64> = perm.iter().flat_map(|&i| bag.instance(i).to_vec()).collect();
        let a = net.tier1_forward(&x, 5);
        let b = net.tier1_forward(&px, 5);
        for (k, &i) in perm.iter().enumerate() {
            assert!((b.record.attention[k] - a.record.attention[i]).abs() < 1e-12);
        }
        for (u, v) in a.embedding.iter().zip(&b.embedding) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((a.logit - b.logit).abs() < 1e-12);
        let c = net.tier2_forward(&x, 5);
        let d = net.tier2_forward(&px, 5);
        assert!((c.probability - d.probability).abs() < 1e-12);
        assert!((a.record.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_limits() {
        assert!(dtfd_loss(&[40.0, 40.0], 1.0 - 1e-15, true) < 1e-12);
        assert!((dtfd_loss(&[-40.0], 0.5, false) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_public_loss() {
        let net = MilNet::new(4, Some(3), 5, DistillStrategy::Afs, 4).unwrap();
        let bag = random_bag(9, 4, 5, true);
        let parts = split_pseudo_bags(&bag, 3, 0).unwrap();
        let out = net.forward(&bag, &parts).unwrap();
        let logits: Vec<f64> = out.tier1.iter().map(|t| t.logit).collect();
        let a = dtfd_loss(&logits, out.tier2.probability, true);
        assert!((a - net.loss(&bag, &parts).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (strategy, reduced) in [
            (DistillStrategy::Afs, None),
            (DistillStrategy::Afs, Some(3)),
            (DistillStrategy::MaxS, None),
            (DistillStrategy::MaxMinS, Some(4)),
        ] {
            let mut net = MilNet::new(4, reduced, 5, strategy, 7).unwrap();
            let bag = random_bag(7, 4, 11, false);
            let parts = split_pseudo_bags(&bag, 2, 3).unwrap();
            let (_, grad) = net.loss_and_grad(&bag, &parts).unwrap();
            let eps = 1e-5;
            for k in 0..net.theta.len() {
                let orig = net.theta[k];
                net.theta[k] = orig + eps;
                let lp = net.loss(&bag, &parts).unwrap();
                net.theta[k] = orig - eps;
                let lm = net.loss(&bag, &parts).unwrap();
                net.theta[k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let err = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-3);
                assert!(err < 1e-4, "{strategy:?} param {k}: {num} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = MilNet::new(4, None, 5, DistillStrategy::Afs, 7).unwrap();
        let bag = random_bag(3, 2, 1, true);
        let parts = split_pseudo_bags(&bag, 1, 0).unwrap();
        assert!(matches!(net.forward(&bag, &parts), Err(Error::Shape(_))));
    }
}
