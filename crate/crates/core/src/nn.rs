//! Minimal dense layers with hand-written backward passes. Feature maps are
//! flat `f64` buffers: 2-D maps are `[channel][freq][time]`, 1-D maps are
//! `[channel][time]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// He-style normal initialization for a layer with `fan_in` inputs.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

pub fn leaky_relu(x: &mut [f64], leak: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= leak;
        }
    }
}

/// Multiplies `grad` by the leaky-ReLU derivative at pre-activations `pre`.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64], leak: f64) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p < 0.0 {
            *g *= leak;
        }
    }
}

/// 2-D convolution with a square odd kernel and zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Tensor::he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.weight.shape[0], self.weight.shape[1], self.weight.shape[2])
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (c_out, c_in, k) = self.dims();
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            let out = &mut y[o * h * w..(o + 1) * h * w];
            out.iter_mut().for_each(|v| *v = self.bias.data[o]);
            for i in 0..c_in {
                let inp = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight.data[((o * c_in + i) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for r in 0..h {
                            let sr = r as isize + dy;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            let (c_lo, c_hi) = col_range(w, dx);
                            let src = sr as usize * w;
                            let dst = r * w;
                            for c in c_lo..c_hi {
                                out[dst + c] += wv * inp[src + (c as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input cotangent.
    pub fn backward(&self, x: &[f64], dy: &[f64], h: usize, w: usize, grad: &mut Conv2d) -> Vec<f64> {
        let (c_out, c_in, k) = self.dims();
        let pad = (k / 2) as isize;
        let mut dx = vec![0.0; c_in * h * w];
        for o in 0..c_out {
            let g_out = &dy[o * h * w..(o + 1) * h * w];
            grad.bias.data[o] += g_out.iter().sum::<f64>();
            for i in 0..c_in {
                let inp = &x[i * h * w..(i + 1) * h * w];
                let d_in = &mut dx[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * c_in + i) * k + ky) * k + kx;
                        let wv = self.weight.data[widx];
                        let dyo = ky as isize - pad;
                        let dxo = kx as isize - pad;
                        let mut acc = 0.0;
                        for r in 0..h {
                            let sr = r as isize + dyo;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            let (c_lo, c_hi) = col_range(w, dxo);
                            let src = sr as usize * w;
                            let dst = r * w;
                            for c in c_lo..c_hi {
                                let s = src + (c as isize + dxo) as usize;
                                acc += g_out[dst + c] * inp[s];
                                d_in[s] += g_out[dst + c] * wv;
                            }
                        }
                        grad.weight.data[widx] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Output columns `c` for which `c + offset` stays inside `[0, w)`.
fn col_range(w: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (w as isize - offset).min(w as isize).max(0) as usize;
    (lo.min(w), hi)
}

/// 1-D temporal convolution with an odd kernel and zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Tensor::he_normal(&[c_out, c_in, kernel], c_in * kernel, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.weight.shape[0], self.weight.shape[1], self.weight.shape[2])
    }

    pub fn forward(&self, x: &[f64], t: usize) -> Vec<f64> {
        let (c_out, c_in, k) = self.dims();
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; c_out * t];
        for o in 0..c_out {
            let out = &mut y[o * t..(o + 1) * t];
            out.iter_mut().for_each(|v| *v = self.bias.data[o]);
            for i in 0..c_in {
                let inp = &x[i * t..(i + 1) * t];
                for kk in 0..k {
                    let wv = self.weight.data[(o * c_in + i) * k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let off = kk as isize - pad;
                    let (lo, hi) = col_range(t, off);
                    for c in lo..hi {
                        out[c] += wv * inp[(c as isize + off) as usize];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], t: usize, grad: &mut Conv1d) -> Vec<f64> {
        let (c_out, c_in, k) = self.dims();
        let pad = (k / 2) as isize;
        let mut dx = vec![0.0; c_in * t];
        for o in 0..c_out {
            let g_out = &dy[o * t..(o + 1) * t];
            grad.bias.data[o] += g_out.iter().sum::<f64>();
            for i in 0..c_in {
                let inp = &x[i * t..(i + 1) * t];
                let d_in = &mut dx[i * t..(i + 1) * t];
                for kk in 0..k {
                    let widx = (o * c_in + i) * k + kk;
                    let wv = self.weight.data[widx];
                    let off = kk as isize - pad;
                    let (lo, hi) = col_range(t, off);
                    let mut acc = 0.0;
                    for c in lo..hi {
                        let s = (c as isize + off) as usize;
                        acc += g_out[c] * inp[s];
                        d_in[s] += g_out[c] * wv;
                    }
                    grad.weight.data[widx] += acc;
                }
            }
        }
        dx
    }
}

/// 2×2 max pooling; returns pooled map and the flat source index of each output.
pub fn max_pool2(x: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; channels * ho * wo];
    let mut idx = vec![0; channels * ho * wo];
    for c in 0..channels {
        for r in 0..ho {
            for q in 0..wo {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dr in 0..2 {
                    for dq in 0..2 {
                        let s = (c * h + 2 * r + dr) * w + 2 * q + dq;
                        if x[s] > best_v {
                            best_v = x[s];
                            best = s;
                        }
                    }
                }
                let o = (c * ho + r) * wo + q;
                y[o] = best_v;
                idx[o] = best;
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward(dy: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(idx) {
        dx[i] += g;
    }
    dx
}

/// Collapses the frequency axis of a `[C][F][T]` map with a per-channel
/// softmax over learned logits `[C][F]`.
pub fn softmax_pool(x: &[f64], logits: &Tensor, channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let weights = softmax_rows(&logits.data, channels, h);
    let mut y = vec![0.0; channels * w];
    for c in 0..channels {
        for f in 0..h {
            let a = weights[c * h + f];
            let row = &x[(c * h + f) * w..(c * h + f + 1) * w];
            for (o, v) in y[c * w..(c + 1) * w].iter_mut().zip(row) {
                *o += a * v;
            }
        }
    }
    (y, weights)
}

/// Returns the input cotangent and accumulates the logit gradient.
pub fn softmax_pool_backward(
    x: &[f64],
    weights: &[f64],
    dy: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    d_logits: &mut Tensor,
) -> Vec<f64> {
    let mut dx = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &dy[c * w..(c + 1) * w];
        let mut da = vec![0.0; h];
        for f in 0..h {
            let a = weights[c * h + f];
            let base = (c * h + f) * w;
            for t in 0..w {
                dx[base + t] = a * g[t];
                da[f] += x[base + t] * g[t];
            }
        }
        let mean: f64 = (0..h).map(|f| weights[c * h + f] * da[f]).sum();
        for f in 0..h {
            d_logits.data[c * h + f] += weights[c * h + f] * (da[f] - mean);
        }
    }
    dx
}

fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Nearest-neighbour ×2 upsampling along time.
pub fn unpool2(x: &[f64], channels: usize, t: usize) -> Vec<f64> {
    let mut y = vec![0.0; channels * t * 2];
    for c in 0..channels {
        for i in 0..t {
            let v = x[c * t + i];
            y[c * 2 * t + 2 * i] = v;
            y[c * 2 * t + 2 * i + 1] = v;
        }
    }
    y
}

pub fn unpool2_backward(dy: &[f64], channels: usize, t: usize) -> Vec<f64> {
    let mut dx = vec![0.0; channels * t];
    for c in 0..channels {
        for i in 0..t {
            dx[c * t + i] = dy[c * 2 * t + 2 * i] + dy[c * 2 * t + 2 * i + 1];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, &mut rng);
        conv.bias.data = random(3, &mut rng);
        let (h, w) = (4, 5);
        let x = random(2 * h * w, &mut rng);
        let proj = random(3 * h * w, &mut rng);
        let loss = |c: &Conv2d, x: &[f64]| -> f64 {
            c.forward(x, h, w).iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let mut g = conv.clone();
        g.weight.fill(0.0);
        g.bias.fill(0.0);
        let dx = conv.backward(&x, &proj, h, w, &mut g);
        let ndx = numeric(|xx| loss(&conv, xx), &x);
        for (a, b) in dx.iter().zip(&ndx) {
            assert!((a - b).abs() < 1e-7);
        }
        let nw = numeric(
            |ww| {
                let mut c = conv.clone();
                c.weight.data = ww.to_vec();
                loss(&c, &x)
            },
            &conv.weight.data,
        );
        for (a, b) in g.weight.data.iter().zip(&nw) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::new(3, 2, 3, &mut rng);
        let t = 6;
        let x = random(3 * t, &mut rng);
        let proj = random(2 * t, &mut rng);
        let mut g = Conv1d::zeroed(3, 2, 3);
        let dx = conv.backward(&x, &proj, t, &mut g);
        let loss = |c: &Conv1d, x: &[f64]| -> f64 {
            c.forward(x, t).iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let ndx = numeric(|xx| loss(&conv, xx), &x);
        for (a, b) in dx.iter().zip(&ndx) {
            assert!((a - b).abs() < 1e-7);
        }
        let nw = numeric(
            |ww| {
                let mut c = conv.clone();
                c.weight.data = ww.to_vec();
                loss(&c, &x)
            },
            &conv.weight.data,
        );
        for (a, b) in g.weight.data.iter().zip(&nw) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!((g.bias.data[0] - proj[..t].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn softmax_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 4, 3);
        let x = random(c * h * w, &mut rng);
        let logits = Tensor::from_vec(&[c, h], random(c * h, &mut rng));
        let proj = random(c * w, &mut rng);
        let (_, weights) = softmax_pool(&x, &logits, c, h, w);
        let mut dl = Tensor::zeros(&[c, h]);
        let dx = softmax_pool_backward(&x, &weights, &proj, c, h, w, &mut dl);
        let loss = |l: &[f64], xx: &[f64]| -> f64 {
            let t = Tensor::from_vec(&[c, h], l.to_vec());
            softmax_pool(xx, &t, c, h, w).0.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        for (a, b) in dx.iter().zip(&numeric(|xx| loss(&logits.data, xx), &x)) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in dl.data.iter().zip(&numeric(|l| loss(l, &x), &logits.data)) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_average() {
        let x = vec![1.0, 2.0, 3.0, 5.0];
        let (y, _) = softmax_pool(&x, &Tensor::zeros(&[1, 2]), 1, 2, 2);
        assert_eq!(y, vec![2.0, 3.5]);
    }

    #[test]
    fn pool_and_unpool() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (y, idx) = max_pool2(&x, 1, 4, 4);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = max_pool2_backward(&[1.0, 2.0, 3.0, 4.0], &idx, 16);
        assert_eq!(dx[5], 1.0);
        assert_eq!(dx[15], 4.0);
        assert_eq!(dx.iter().sum::<f64>(), 10.0);
        let u = unpool2(&[1.0, 2.0], 1, 2);
        assert_eq!(u, vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(unpool2_backward(&[1.0, 2.0, 3.0, 4.0], 1, 2), vec![3.0, 7.0]);
    }
}
