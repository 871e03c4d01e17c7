//! Reference implementations shared by the integration tests. Everything
//! here is plain loops over `f64`, independent of the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unifiq_core::datagen::{apply_distortion, gen_base_image, DistortionKind, DistortionSpec};
use unifiq_core::image::RgbImage;
use unifiq_tensor::Tensor;

pub fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `x[l, c] · w[c, d]` for one batch item of `x: [B, L, C]`.
fn project(x: &[f64], w: &[f64], l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * c];
    for i in 0..l {
        for d in 0..c {
            out[i * c + d] = (0..c).map(|k| x[i * c + k] * w[k * c + d]).sum();
        }
    }
    out
}

/// Full single-head attention of `q_src` over `kv_src` where query `i` may
/// only see keys `j` with `allowed(i, j)`; every other logit is −∞.
/// Shapes: `q_src [B, Lq, C]`, `kv_src [B, Lk, C]`, weights `[C, C]`.
pub fn masked_attention(
    q_src: &Tensor<f64>,
    kv_src: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Tensor<f64> {
    let (b, lq, c) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
    let lk = kv_src.shape()[1];
    let scale = (c as f64).sqrt();
    let mut out = Vec::with_capacity(b * lq * c);
    for bi in 0..b {
        let xq = &q_src.data()[bi * lq * c..(bi + 1) * lq * c];
        let xkv = &kv_src.data()[bi * lk * c..(bi + 1) * lk * c];
        let q = project(xq, wq.data(), lq, c);
        let k = project(xkv, wk.data(), lk, c);
        let v = project(xkv, wv.data(), lk, c);
        for i in 0..lq {
            let logits: Vec<f64> = (0..lk)
                .map(|j| {
                    if allowed(i, j) {
                        (0..c).map(|d| q[i * c + d] * k[j * c + d]).sum::<f64>() / scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for d in 0..c {
                out.push((0..lk).map(|j| e[j] / total * v[j * c + d]).sum());
            }
        }
    }
    Tensor::new(vec![b, lq, c], out).unwrap()
}

/// Index of the `r×r` tile that holds token `t` of a `side×side` grid.
pub fn tile_of(t: usize, side: usize, r: usize) -> usize {
    let tile = side / r;
    (t / side / tile) * r + (t % side) / tile
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A distorted/reference pair built from a synthetic base image.
pub fn distorted_pair(seed: u64, kind: DistortionKind, level: u8) -> (RgbImage, RgbImage) {
    let reference = gen_base_image(seed, 64).unwrap();
    let spec = DistortionSpec::new(kind, level, seed ^ 0x5eed).unwrap();
    (apply_distortion(&reference, &spec), reference)
}
