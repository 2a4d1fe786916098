#![allow(dead_code)]

use std::path::Path;

use ckrm::tensor_io::ConvKernelSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};

/// Writes F32 tensors in the archive layout, in the given order.
pub fn write_archive(path: &Path, tensors: &[(&str, Vec<usize>, Vec<f32>)]) {
    let mut header = Map::new();
    let mut data = Vec::new();
    for (name, shape, values) in tensors {
        let begin = data.len();
        data.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        header.insert(
            name.to_string(),
            json!({"dtype": "F32", "shape": shape, "data_offsets": [begin, data.len()]}),
        );
    }
    let header = Value::Object(header).to_string();
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&data);
    std::fs::write(path, bytes).unwrap();
}

pub fn write_kernels(path: &Path, layers: &[&ConvKernelSet]) {
    let tensors: Vec<(&str, Vec<usize>, Vec<f32>)> = layers
        .iter()
        .map(|k| {
            (
                k.layer_id.as_str(),
                k.dims().to_vec(),
                k.weights().iter().map(|&v| v as f32).collect(),
            )
        })
        .collect();
    write_archive(path, &tensors);
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Entries drawn i.i.d. from `scale * N(0, 1)`.
pub fn gaussian_layer(id: &str, dims: [usize; 4], scale: f64, seed: u64) -> ConvKernelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let w = (0..n).map(|_| scale * normal(&mut rng)).collect();
    ConvKernelSet::new(id, dims, w).unwrap()
}

/// `duplicates` kernels are `template + noise_std * N(0,1)`; the rest are
/// independent draws with the template's scale. Duplicates come first.
pub fn template_layer(
    id: &str,
    dims: [usize; 4],
    duplicates: usize,
    noise_std: f64,
    seed: u64,
) -> ConvKernelSet {
    let [f2, f1, k1, k2] = dims;
    let per_kernel = f1 * k1 * k2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.1;
    let template: Vec<f64> = (0..per_kernel).map(|_| scale * normal(&mut rng)).collect();
    let mut w = Vec::with_capacity(f2 * per_kernel);
    for i in 0..f2 {
        if i < duplicates {
            w.extend(template.iter().map(|t| t + noise_std * normal(&mut rng)));
        } else {
            w.extend((0..per_kernel).map(|_| scale * normal(&mut rng)));
        }
    }
    ConvKernelSet::new(id, dims, w).unwrap()
}

/// `clusters` groups of near-identical kernels, filling F2 round-robin.
pub fn clustered_layer(
    id: &str,
    dims: [usize; 4],
    clusters: usize,
    noise_std: f64,
    seed: u64,
) -> ConvKernelSet {
    let [f2, f1, k1, k2] = dims;
    let per_kernel = f1 * k1 * k2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..per_kernel).map(|_| normal(&mut rng)).collect())
        .collect();
    let mut w = Vec::with_capacity(f2 * per_kernel);
    for i in 0..f2 {
        let t = &templates[i % clusters];
        w.extend(t.iter().map(|v| v + noise_std * normal(&mut rng)));
    }
    ConvKernelSet::new(id, dims, w).unwrap()
}

/// Kernels whose flattened vectors are mutually orthogonal, with every
/// K1 x K2 slice zero-mean. Needs f2 <= f1 * (k1 * k2 - 1).
pub fn orthogonal_layer(id: &str, dims: [usize; 4], seed: u64) -> ConvKernelSet {
    let [f2, f1, k1, k2] = dims;
    let slice = k1 * k2;
    let per_kernel = f1 * slice;
    assert!(f2 <= f1 * (slice - 1), "not enough zero-mean dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |v: &mut Vec<f64>| {
        for s in v.chunks_exact_mut(slice) {
            let m = s.iter().sum::<f64>() / slice as f64;
            s.iter_mut().for_each(|x| *x -= m);
        }
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(f2);
    while basis.len() < f2 {
        let mut v: Vec<f64> = (0..per_kernel).map(|_| normal(&mut rng)).collect();
        center(&mut v);
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = (per_kernel as f64).sqrt();
    let w = basis.into_iter().flatten().map(|x| x * scale).collect();
    ConvKernelSet::new(id, dims, w).unwrap()
}

/// Textbook per-slice similarity, written independently of the library.
pub fn oracle_psi(x: &[f64], y: &[f64], alpha: f64, beta: f64, gamma: f64, eps: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let l = (2.0 * mx * my + eps) / (mx * mx + my * my + eps);
    let c = (2.0 * sx * sy + eps) / (vx + vy + eps);
    let s = (cov + eps) / (sx * sy + eps);
    l.abs().powf(alpha) * c.powf(beta) * s.abs().powf(gamma)
}

/// Brute-force pairwise similarity matrix (upper triangle, row-major).
pub fn oracle_omega(k: &ConvKernelSet, alpha: f64, beta: f64, gamma: f64, eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..k.f2 {
        for j in (i + 1)..k.f2 {
            let total: f64 = (0..k.f1)
                .map(|c| oracle_psi(k.slice(i, c), k.slice(j, c), alpha, beta, gamma, eps))
                .sum();
            out.push(total / k.f1 as f64);
        }
    }
    out
}

pub fn oracle_lambda(values: &[f64], t: f64) -> f64 {
    values.iter().filter(|&&w| w > t).count() as f64 / values.len() as f64
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}
