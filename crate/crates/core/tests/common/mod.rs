//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use flexcoupler::beamform::PatternDictionary;
use flexcoupler::channel::{ChannelBatch, ChannelMatrix};
use flexcoupler::C64;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn complex_gaussian<R: Rng>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Dense Gaussian channels scaled by `scale`; the core is the first sample.
pub fn random_batch<R: Rng>(rng: &mut R, antennas: usize, users: usize, bins: usize, samples: usize, scale: f64) -> ChannelBatch {
    let draw = |rng: &mut R| ChannelMatrix::from_fn(bins * antennas, users, |_, _| complex_gaussian(rng) * scale);
    let samples: Vec<ChannelMatrix> = (0..samples).map(|_| draw(rng)).collect();
    ChannelBatch {
        core: samples[0].clone(),
        samples,
        positions: (0..antennas).map(|n| n as f64).collect(),
        bins,
        redraws: 0,
    }
}

/// Random point of the product of simplices.
pub fn random_relaxed<R: Rng>(rng: &mut R, antennas: usize, patterns: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(antennas * patterns);
    for _ in 0..antennas {
        let block: Vec<f64> = (0..patterns).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = block.iter().sum();
        v.extend(block.iter().map(|x| x / s));
    }
    v
}

/// `log2 det` through a generic LU decomposition.
pub fn log2_det_lu(a: &DMatrix<C64>) -> f64 {
    a.clone().lu().determinant().re.log2()
}

/// Ergodic rate from the full `MN × UN` matrix `I_N ⊗ Q̄` and `diag(v)`,
/// without any per-sample shortcut.
pub fn dense_ergodic_rate(batch: &ChannelBatch, dict: &PatternDictionary, v: &[f64], snr: f64) -> f64 {
    let (m, u) = (dict.bins(), dict.len());
    let n = batch.num_antennas();
    let k = batch.num_users();
    let mut q = DMatrix::<C64>::zeros(m * n, u * n);
    for a in 0..n {
        for i in 0..m {
            for j in 0..u {
                q[(a * m + i, a * u + j)] = C64::new(dict.matrix()[(i, j)], 0.0);
            }
        }
    }
    let dv = DMatrix::<C64>::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|&x| C64::new(x, 0.0))));
    let mut total = 0.0;
    for h in &batch.samples {
        let w = h.adjoint() * &q;
        let inner = DMatrix::<C64>::identity(k, k) + &w * &dv * w.adjoint() * C64::new(snr, 0.0);
        total += log2_det_lu(&inner);
    }
    total / batch.len() as f64
}

/// Projection onto `{0 ≤ p_1, p_{n+1} − p_n ≥ d, p_N ≤ X}` by enumerating
/// active sets and keeping the KKT point.
pub fn qp_projection(x: &[f64], rail: f64, spacing: f64) -> Vec<f64> {
    let n = x.len();
    // Constraints a·p ≥ b: row 0 is p_1 ≥ 0, rows 1..n−1 spacing, row n is −p_N ≥ −X.
    let mut a = DMatrix::<f64>::zeros(n + 1, n);
    let mut b = DVector::<f64>::zeros(n + 1);
    a[(0, 0)] = 1.0;
    for i in 0..n - 1 {
        a[(i + 1, i + 1)] = 1.0;
        a[(i + 1, i)] = -1.0;
        b[i + 1] = spacing;
    }
    a[(n, n - 1)] = -1.0;
    b[n] = -rail;
    let xv = DVector::from_column_slice(x);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << (n + 1)) {
        let act: Vec<usize> = (0..=n).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > n {
            continue;
        }
        // min ½‖p − x‖² s.t. A_act p = b_act:
        // p = x + A_actᵀ λ with A_act A_actᵀ λ = b_act − A_act x.
        let aa = DMatrix::from_fn(act.len(), n, |r, c| a[(act[r], c)]);
        let ba = DVector::from_fn(act.len(), |r, _| b[act[r]]);
        let lambda = if act.is_empty() {
            DVector::zeros(0)
        } else {
            match (&aa * aa.transpose()).lu().solve(&(&ba - &aa * &xv)) {
                Some(l) => l,
                None => continue,
            }
        };
        if lambda.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let p = &xv + aa.transpose() * &lambda;
        if (0..=n).any(|i| (a.row(i) * &p)[0] < b[i] - 1e-10) {
            continue;
        }
        let dist = (&p - &xv).norm_squared();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("nonempty feasible set").1.iter().copied().collect()
}
