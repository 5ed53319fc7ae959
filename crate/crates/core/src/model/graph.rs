//! A static computation graph over NHWC activations with hand-written
//! backward passes. Convolutions and dense layers go through `sgemm`.

use super::params::ParamRef;

/// Per-sample activation shape `(height, width, channels)`.
pub type SlotShape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv {
        weight: ParamRef,
        bias: ParamRef,
        kernel: usize,
        stride: usize,
        pad: usize,
        src: usize,
        dst: usize,
        relu: bool,
    },
    Linear {
        weight: ParamRef,
        bias: ParamRef,
        src: usize,
        dst: usize,
        relu: bool,
    },
    Add {
        a: usize,
        b: usize,
        dst: usize,
        relu: bool,
    },
    GlobalAvgPool {
        src: usize,
        dst: usize,
    },
}

impl Op {
    fn dst(&self) -> usize {
        match *self {
            Op::Conv { dst, .. } | Op::Linear { dst, .. } | Op::Add { dst, .. } | Op::GlobalAvgPool { dst, .. } => dst,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub ops: Vec<Op>,
    pub shapes: Vec<SlotShape>,
}

/// Activations of one forward pass over `n` samples.
pub struct Tape {
    pub n: usize,
    pub acts: Vec<Vec<f32>>,
}

impl Tape {
    pub fn slot(&self, slot: usize) -> &[f32] {
        &self.acts[slot]
    }
}

fn slot_len(shape: SlotShape) -> usize {
    shape.0 * shape.1 * shape.2
}

/// `c = a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cl: usize| (r - 1) * rs + (cl - 1) * cs;
    assert!(k == 0 || last(rsa, csa, m, k) < a.len());
    assert!(k == 0 || last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], n: usize, g: &ConvGeom, col: &mut Vec<f32>) {
    let cols = g.cols();
    col.clear();
    col.resize(n * g.ho * g.wo * cols, 0.0);
    let mut row = 0;
    for s in 0..n {
        let img = &x[s * g.h * g.w * g.cin..(s + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let at = (ky * g.kernel + kx) * g.cin;
                        dst[at..at + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(col: &[f32], n: usize, g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.cols();
    let mut row = 0;
    for s in 0..n {
        let img = &mut dx[s * g.h * g.w * g.cin..(s + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &col[row * cols..(row + 1) * cols];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let at = (ky * g.kernel + kx) * g.cin;
                        for (o, v) in img[d..d + g.cin].iter_mut().zip(&src[at..at + g.cin]) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Graph {
    pub fn add_slot(&mut self, shape: SlotShape) -> usize {
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    pub fn slot_shape(&self, slot: usize) -> SlotShape {
        self.shapes[slot]
    }

    pub fn slot_width(&self, slot: usize) -> usize {
        slot_len(self.shapes[slot])
    }

    fn geom(&self, src: usize, dst: usize, kernel: usize, stride: usize, pad: usize) -> ConvGeom {
        let (h, w, cin) = self.shapes[src];
        let (ho, wo, _) = self.shapes[dst];
        ConvGeom {
            h,
            w,
            cin,
            ho,
            wo,
            kernel,
            stride,
            pad,
        }
    }

    /// Runs every op needed to produce `target` (all ops when `None`).
    /// `input` holds `n` samples of slot 0.
    pub fn forward(&self, params: &[f32], input: Vec<f32>, n: usize, target: Option<usize>) -> Tape {
        assert_eq!(input.len(), n * self.slot_width(0), "input size mismatch");
        let mut acts: Vec<Vec<f32>> = vec![Vec::new(); self.shapes.len()];
        acts[0] = input;
        let mut col = Vec::new();
        for op in &self.ops {
            let dst = op.dst();
            let mut out = vec![0f32; n * self.slot_width(dst)];
            match *op {
                Op::Conv {
                    weight,
                    bias,
                    kernel,
                    stride,
                    pad,
                    src,
                    relu,
                    ..
                } => {
                    let g = self.geom(src, dst, kernel, stride, pad);
                    let cout = self.shapes[dst].2;
                    let rows = n * g.ho * g.wo;
                    let b = bias.slice(params);
                    for r in out.chunks_exact_mut(cout) {
                        r.copy_from_slice(b);
                    }
                    let k = g.cols();
                    let x: &[f32] = if g.is_pointwise() {
                        &acts[src]
                    } else {
                        im2col(&acts[src], n, &g, &mut col);
                        &col
                    };
                    gemm(rows, k, cout, x, (k, 1), weight.slice(params), (cout, 1), 1.0, &mut out, (cout, 1));
                    if relu {
                        out.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                Op::Linear {
                    weight,
                    bias,
                    src,
                    relu,
                    ..
                } => {
                    let din = self.slot_width(src);
                    let dout = self.slot_width(dst);
                    let b = bias.slice(params);
                    for r in out.chunks_exact_mut(dout) {
                        r.copy_from_slice(b);
                    }
                    gemm(n, din, dout, &acts[src], (din, 1), weight.slice(params), (dout, 1), 1.0, &mut out, (dout, 1));
                    if relu {
                        out.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                Op::Add { a, b, relu, .. } => {
                    for ((o, x), y) in out.iter_mut().zip(&acts[a]).zip(&acts[b]) {
                        let v = x + y;
                        *o = if relu { v.max(0.0) } else { v };
                    }
                }
                Op::GlobalAvgPool { src, .. } => {
                    let (h, w, c) = self.shapes[src];
                    let inv = 1.0 / (h * w) as f32;
                    for (s, o) in out.chunks_exact_mut(c).enumerate() {
                        let x = &acts[src][s * h * w * c..(s + 1) * h * w * c];
                        for px in x.chunks_exact(c) {
                            for (oc, v) in o.iter_mut().zip(px) {
                                *oc += v;
                            }
                        }
                        o.iter_mut().for_each(|v| *v *= inv);
                    }
                }
            }
            acts[dst] = out;
            if Some(dst) == target {
                break;
            }
        }
        Tape { n, acts }
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// for one or more slots.
    pub fn backward(&self, params: &[f32], tape: &Tape, seeds: Vec<(usize, Vec<f32>)>, grads: &mut [f32]) {
        let n = tape.n;
        let mut d: Vec<Option<Vec<f32>>> = vec![None; self.shapes.len()];
        for (slot, g) in seeds {
            assert_eq!(g.len(), n * self.slot_width(slot), "seed gradient size mismatch");
            accumulate(&mut d[slot], g);
        }
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for op in self.ops.iter().rev() {
            let dst = op.dst();
            let Some(mut dy) = d[dst].take() else { continue };
            match *op {
                Op::Conv {
                    weight,
                    bias,
                    kernel,
                    stride,
                    pad,
                    src,
                    relu,
                    ..
                } => {
                    if relu {
                        mask_relu(&mut dy, &tape.acts[dst]);
                    }
                    let g = self.geom(src, dst, kernel, stride, pad);
                    let cout = self.shapes[dst].2;
                    let rows = n * g.ho * g.wo;
                    let k = g.cols();
                    let x: &[f32] = if g.is_pointwise() {
                        &tape.acts[src]
                    } else {
                        im2col(&tape.acts[src], n, &g, &mut col);
                        &col
                    };
                    gemm(k, rows, cout, x, (1, k), &dy, (cout, 1), 1.0, weight.slice_mut(grads), (cout, 1));
                    let gb = bias.slice_mut(grads);
                    for r in dy.chunks_exact(cout) {
                        for (o, v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    if src != 0 {
                        let w = weight.slice(params);
                        if g.is_pointwise() {
                            let mut dx = vec![0f32; rows * k];
                            gemm(rows, cout, k, &dy, (cout, 1), w, (1, cout), 0.0, &mut dx, (k, 1));
                            accumulate(&mut d[src], dx);
                        } else {
                            dcol.clear();
                            dcol.resize(rows * k, 0.0);
                            gemm(rows, cout, k, &dy, (cout, 1), w, (1, cout), 0.0, &mut dcol, (k, 1));
                            let mut dx = vec![0f32; n * self.slot_width(src)];
                            col2im_add(&dcol, n, &g, &mut dx);
                            accumulate(&mut d[src], dx);
                        }
                    }
                }
                Op::Linear {
                    weight,
                    bias,
                    src,
                    relu,
                    ..
                } => {
                    if relu {
                        mask_relu(&mut dy, &tape.acts[dst]);
                    }
                    let din = self.slot_width(src);
                    let dout = self.slot_width(dst);
                    gemm(din, n, dout, &tape.acts[src], (1, din), &dy, (dout, 1), 1.0, weight.slice_mut(grads), (dout, 1));
                    let gb = bias.slice_mut(grads);
                    for r in dy.chunks_exact(dout) {
                        for (o, v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    if src != 0 {
                        let mut dx = vec![0f32; n * din];
                        gemm(n, dout, din, &dy, (dout, 1), weight.slice(params), (1, dout), 0.0, &mut dx, (din, 1));
                        accumulate(&mut d[src], dx);
                    }
                }
                Op::Add { a, b, relu, .. } => {
                    if relu {
                        mask_relu(&mut dy, &tape.acts[dst]);
                    }
                    if b != 0 {
                        accumulate(&mut d[b], dy.clone());
                    }
                    if a != 0 {
                        accumulate(&mut d[a], dy);
                    }
                }
                Op::GlobalAvgPool { src, .. } => {
                    if src != 0 {
                        let (h, w, c) = self.shapes[src];
                        let inv = 1.0 / (h * w) as f32;
                        let mut dx = vec![0f32; n * h * w * c];
                        for (s, g) in dy.chunks_exact(c).enumerate() {
                            for px in dx[s * h * w * c..(s + 1) * h * w * c].chunks_exact_mut(c) {
                                for (o, v) in px.iter_mut().zip(g) {
                                    *o = v * inv;
                                }
                            }
                        }
                        accumulate(&mut d[src], dx);
                    }
                }
            }
        }
    }
}

fn mask_relu(dy: &mut [f32], y: &[f32]) {
    for (g, v) in dy.iter_mut().zip(y) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
