//! Plain-loop reference evaluations shared by the integration tests. Each
//! works on one sequence stored as a list of frames.
#![allow(dead_code)]

use branchkit::nn::{uniform, LinearParams, ParamStore};
use branchkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Frames = Vec<Vec<f64>>;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

/// Overwrites every store tensor (buffers included) with random values;
/// running variances are kept positive.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        let mut t = random(&shape, seed.wrapping_mul(7919).wrapping_add(i as u64));
        if store.name(id).ends_with("running_var") {
            t = t.map(|v| 0.5 + v.abs());
        }
        store.set(id, t);
    }
}

pub fn frames_of(x: &Tensor, b: usize) -> Frames {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    (0..t)
        .map(|i| x.data()[(b * t + i) * d..(b * t + i + 1) * d].to_vec())
        .collect()
}

pub fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    (0..dout)
        .map(|o| {
            let s: f64 = (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum();
            s + b.map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

pub fn lin(store: &ParamStore, p: &LinearParams, x: &[f64]) -> Vec<f64> {
    affine(x, store.get(p.weight), p.bias.map(|b| store.get(b)))
}

pub fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..400 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / 2f64.sqrt()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn layer_norm(x: &[f64], gain: &Tensor, shift: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain.data()[i] + shift.data()[i])
        .collect()
}

/// Same-padded depthwise convolution over the first `len` frames; later
/// frames are treated as zeros.
pub fn dwconv(x: &Frames, len: usize, kernel: &Tensor, bias: Option<&Tensor>) -> Frames {
    let (c, k) = (kernel.shape()[0], kernel.shape()[1]);
    let half = (k / 2) as i64;
    let t = x.len() as i64;
    (0..t)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let mut acc = bias.map_or(0.0, |b| b.data()[ch]);
                    for j in 0..k as i64 {
                        let src = i + j - half;
                        if src >= 0 && src < t && (src as usize) < len {
                            acc += kernel.data()[ch * k + j as usize] * x[src as usize][ch];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &Frames, b: &Frames, upto: usize) -> f64 {
    a.iter()
        .zip(b)
        .take(upto)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
