//! Independent reference computations for the numerical tests.
//!
//! Nothing here calls into the engine: gradients come from finite
//! differences of the loss, cosines from explicitly flattened matrices and
//! moments from a plain two-pass loop.
#![allow(dead_code)]

/// Softmax cross-entropy of a C×D row-major head at latent `z`.
pub fn cross_entropy(weights: &[f64], classes: usize, z: &[f64], label: usize) -> f64 {
    let d = z.len();
    let logits: Vec<f64> = (0..classes)
        .map(|c| (0..d).map(|j| weights[c * d + j] * z[j]).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

pub fn softmax(weights: &[f64], classes: usize, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let logits: Vec<f64> = (0..classes)
        .map(|c| (0..d).map(|j| weights[c * d + j] * z[j]).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central finite-difference gradient of the loss with respect to every
/// head entry (C×D, row major).
pub fn fd_gradient(weights: &[f64], classes: usize, z: &[f64], label: usize, h: f64) -> Vec<f64> {
    let mut w = weights.to_vec();
    (0..weights.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + h;
            let plus = cross_entropy(&w, classes, z, label);
            w[i] = orig - h;
            let minus = cross_entropy(&w, classes, z, label);
            w[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Row-major C×D matrix `a zᵀ`.
pub fn outer(a: &[f64], z: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|&ac| z.iter().map(move |&zj| ac * zj)).collect()
}

pub fn flat_cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}

pub fn frobenius(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `onehot(label) − probs`.
pub fn residual(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(c, p)| if c == label { 1.0 - p } else { -p })
        .collect()
}

/// Two-pass population central moments `[mean, m2, m3, m4]`.
pub fn two_pass(xs: &[f64]) -> [f64; 4] {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m = |k: i32| xs.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    [mean, m(2), m(3), m(4)]
}

/// Relative error of moment `k` measured against its natural scale
/// `max(|expected|, σ^k)` so that near-zero odd moments are not divided
/// by zero.
pub fn moment_rel_err(k: usize, got: f64, expected: f64, m2: f64) -> f64 {
    let sigma = m2.max(0.0).sqrt();
    let scale = expected.abs().max(sigma.powi(k.max(1) as i32)).max(1e-300);
    (got - expected).abs() / scale
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
