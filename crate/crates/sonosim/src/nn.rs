//! Minimal deterministic CPU neural-network substrate.
//!
//! Every network stores its parameters in one flat `Vec<f32>` described by
//! a named tensor [`Layout`]; layers are descriptors holding offsets into
//! the arena. Gradients mirror the arena. Training is seed-deterministic:
//! initialization draws follow layout order, and the batch-parallel
//! gradient helper reduces a fixed number of chunks in index order
//! regardless of the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// One named tensor inside a parameter arena.
#[derive(Debug, Clone)]
pub struct TensorDef {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl TensorDef {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Arena layout: tensor descriptors plus the total length.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub tensors: Vec<TensorDef>,
    pub len: usize,
}

impl Layout {
    pub fn alloc(&mut self, name: &str, dims: &[usize]) -> usize {
        let offset = self.len;
        self.len += dims.iter().product::<usize>();
        self.tensors.push(TensorDef {
            name: name.to_string(),
            offset,
            dims: dims.to_vec(),
        });
        offset
    }

    pub fn find(&self, name: &str) -> Option<&TensorDef> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Fan-in scaled uniform initialization; biases (rank-1 tensors) start at
/// zero. Draw order follows the layout, so equal layouts + seeds give
/// bitwise-equal parameters.
pub fn init_params(layout: &Layout, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0f32; layout.len];
    for t in &layout.tensors {
        if t.dims.len() < 2 {
            continue; // bias
        }
        let fan_in: usize = t.dims[1..].iter().product();
        let bound = (1.0 / fan_in as f32).sqrt();
        for v in &mut p[t.offset..t.offset + t.len()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    p
}

/// Fully connected layer `y = W x + b`; `W` is `[out, in]` row-major.
#[derive(Debug, Clone)]
pub struct DenseOp {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseOp {
    pub fn new(layout: &mut Layout, name: &str, in_dim: usize, out_dim: usize) -> DenseOp {
        let w = layout.alloc(&format!("{name}.w"), &[out_dim, in_dim]);
        let b = layout.alloc(&format!("{name}.b"), &[out_dim]);
        DenseOp {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        let w = &p[self.w..self.w + self.out_dim * self.in_dim];
        let b = &p[self.b..self.b + self.out_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            for i in 0..self.in_dim {
                acc += row[i] * x[i];
            }
            y[o] = acc;
        }
    }

    /// Accumulates parameter gradients into `g`; writes input gradients
    /// into `dx` when given (skip for the first layer).
    pub fn backward(
        &self,
        p: &[f32],
        x: &[f32],
        dy: &[f32],
        mut dx: Option<&mut [f32]>,
        g: &mut [f32],
    ) {
        let w = &p[self.w..self.w + self.out_dim * self.in_dim];
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        for o in 0..self.out_dim {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut g[self.w + o * self.in_dim..self.w + (o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += d * x[i];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for i in 0..self.in_dim {
                    dx[i] += d * row[i];
                }
            }
            g[self.b + o] += d;
        }
    }
}

/// 3x3 convolution, stride 2, padding 1, CHW layout; halves each spatial
/// dimension. Weights are `[out_c, in_c, 3, 3]`.
#[derive(Debug, Clone)]
pub struct ConvOp {
    pub w: usize,
    pub b: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvOp {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        in_c: usize,
        out_c: usize,
        in_h: usize,
        in_w: usize,
    ) -> ConvOp {
        let w = layout.alloc(&format!("{name}.w"), &[out_c, in_c, 3, 3]);
        let b = layout.alloc(&format!("{name}.b"), &[out_c]);
        ConvOp {
            w,
            b,
            in_c,
            out_c,
            in_h,
            in_w,
        }
    }

    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }

    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn forward(&self, p: &[f32], x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_len());
        debug_assert_eq!(y.len(), self.out_len());
        let (oh, ow) = (self.out_h(), self.out_w());
        let w = &p[self.w..];
        let b = &p[self.b..self.b + self.out_c];
        for oc in 0..self.out_c {
            let wbase = oc * self.in_c * 9;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..self.in_c {
                        let xc = &x[ic * self.in_h * self.in_w..];
                        let wk = &w[wbase + ic * 9..wbase + ic * 9 + 9];
                        for ky in 0..3usize {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let row = iy as usize * self.in_w;
                            for kx in 0..3usize {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                acc += wk[ky * 3 + kx] * xc[row + ix as usize];
                            }
                        }
                    }
                    y[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }

    pub fn backward(
        &self,
        p: &[f32],
        x: &[f32],
        dy: &[f32],
        mut dx: Option<&mut [f32]>,
        g: &mut [f32],
    ) {
        let (oh, ow) = (self.out_h(), self.out_w());
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        for oc in 0..self.out_c {
            let wbase = oc * self.in_c * 9;
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[oc * oh * ow + oy * ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    g[self.b + oc] += d;
                    for ic in 0..self.in_c {
                        let xoff = ic * self.in_h * self.in_w;
                        let wk = wbase + ic * 9;
                        for ky in 0..3usize {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let row = iy as usize * self.in_w;
                            for kx in 0..3usize {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let xi = xoff + row + ix as usize;
                                g[self.w + wk + ky * 3 + kx] += d * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += d * p[self.w + wk + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu(y: &mut [f32]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through ReLU given the post-activation values.
pub fn relu_backward(y: &[f32], dy: &mut [f32]) {
    for (v, d) in y.iter().zip(dy.iter_mut()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy on a logit; returns
/// `(loss, dloss/dlogit)`.
pub fn bce_with_logit(z: f32, target: f32) -> (f32, f32) {
    let loss = z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - target)
}

/// Momentum gradient descent with a fixed step.
pub struct SgdMomentum {
    v: Vec<f32>,
    pub lr: f32,
    pub momentum: f32,
}

impl SgdMomentum {
    pub fn new(n: usize, lr: f32, momentum: f32) -> SgdMomentum {
        SgdMomentum {
            v: vec![0.0; n],
            lr,
            momentum,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        for i in 0..params.len() {
            self.v[i] = self.momentum * self.v[i] + grads[i];
            params[i] -= self.lr * self.v[i];
        }
    }
}

/// Adam with the standard bias correction.
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(n: usize, lr: f32) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scale gradients so the global L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Deterministic batch-parallel gradient accumulation: the batch splits
/// into `n_chunks` contiguous chunks (fixed, independent of the thread
/// count), each chunk accumulates sequentially, and chunk gradients reduce
/// in index order. Returns the summed gradient and per-sample loss sum.
pub fn parallel_grad<S: Sync>(
    samples: &[S],
    n_chunks: usize,
    grad_len: usize,
    per_sample: impl Fn(&S, &mut [f32]) -> f64 + Sync,
) -> (Vec<f32>, f64) {
    let n_chunks = n_chunks.max(1).min(samples.len().max(1));
    let chunk_size = samples.len().div_ceil(n_chunks);
    let parts: Vec<(Vec<f32>, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = (ci * chunk_size).min(samples.len());
            let hi = ((ci + 1) * chunk_size).min(samples.len());
            let mut g = vec![0.0f32; grad_len];
            let mut loss = 0.0f64;
            for s in &samples[lo..hi] {
                loss += per_sample(s, &mut g);
            }
            (g, loss)
        })
        .collect();
    let mut g = vec![0.0f32; grad_len];
    let mut loss = 0.0f64;
    for (pg, pl) in parts {
        for i in 0..grad_len {
            g[i] += pg[i];
        }
        loss += pl;
    }
    (g, loss)
}
