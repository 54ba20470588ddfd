//! Fast-timescale mechanical beamforming: choose one dictionary pattern per
//! antenna to maximize the ergodic sum rate over a batch of channel samples.
//!
//! With `W_t = H_tᴴ Q` (`K × UN`) and a selector `v` stacking the per-antenna
//! one-hot blocks, the ergodic rate is
//!
//! ```text
//! R(v) = 1/Z Σ_t log2 det(I_K + ρ/σ² · W_t diag(v) W_tᴴ)
//! ```
//!
//! which is concave in `v`. Relaxing each block to the probability simplex
//! gives a problem solved here by Frank–Wolfe; group-wise argmax rounding
//! then recovers a binary selection.

use std::f64::consts::{FRAC_PI_2, LN_2, TAU};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{effective_channel, ChannelBatch, ChannelMatrix};
use crate::{Error, Result, C64};

/// Real `M × U` pattern dictionary with unit-norm, nonnegative columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternDictionary {
    patterns: DMatrix<f64>,
    centers: Vec<f64>,
    concentration: f64,
}

/// Concentration `κ` giving a half-power (−3 dB) beamwidth of `beamwidth`
/// radians for an amplitude profile `exp(κ cos x)`.
pub fn concentration_for_beamwidth(beamwidth: f64) -> f64 {
    0.5 * LN_2 / (1.0 - (beamwidth / 2.0).cos())
}

/// `U` von-Mises-shaped beams over `M` bins. Beam `u` peaks at
/// `π/2 + 2πu/U`, so column 0 is the broadside pattern.
pub fn build_dictionary(bins: usize, patterns: usize, beamwidth: f64) -> Result<PatternDictionary> {
    if !(beamwidth > 0.0 && beamwidth.is_finite()) {
        return Err(Error::Config(format!("beamwidth must be positive, got {beamwidth}")));
    }
    build_dictionary_with_concentration(bins, patterns, concentration_for_beamwidth(beamwidth.min(TAU)))
}

pub fn build_dictionary_with_concentration(bins: usize, patterns: usize, kappa: f64) -> Result<PatternDictionary> {
    if bins == 0 || patterns == 0 {
        return Err(Error::Config("dictionary needs at least one bin and one pattern".into()));
    }
    if patterns > bins {
        return Err(Error::Config(format!("{patterns} patterns exceed {bins} angular bins")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Config(format!("concentration must be finite and nonnegative, got {kappa}")));
    }
    let centers: Vec<f64> = (0..patterns)
        .map(|u| (FRAC_PI_2 + TAU * u as f64 / patterns as f64).rem_euclid(TAU))
        .collect();
    let mut q = DMatrix::<f64>::zeros(bins, patterns);
    for (u, &c) in centers.iter().enumerate() {
        // exp(κ(cos − 1)) keeps the peak at 1 and avoids overflow for large κ.
        for m in 0..bins {
            let theta = TAU * m as f64 / bins as f64;
            q[(m, u)] = (kappa * ((theta - c).cos() - 1.0)).exp();
        }
        let norm = q.column(u).norm();
        q.column_mut(u).unscale_mut(norm);
    }
    Ok(PatternDictionary { patterns: q, centers, concentration: kappa })
}

impl PatternDictionary {
    pub fn bins(&self) -> usize {
        self.patterns.nrows()
    }

    pub fn len(&self) -> usize {
        self.patterns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.patterns
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn pattern(&self, u: usize) -> &[f64] {
        let m = self.bins();
        &self.patterns.as_slice()[u * m..(u + 1) * m]
    }

    /// Index of the broadside pattern.
    pub fn broadside(&self) -> usize {
        0
    }

    /// Same dictionary with columns reordered: new column `i` is old column `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PatternDictionary {
        let cols: Vec<_> = perm.iter().map(|&u| self.patterns.column(u).into_owned()).collect();
        PatternDictionary {
            patterns: DMatrix::from_columns(&cols),
            centers: perm.iter().map(|&u| self.centers[u]).collect(),
            concentration: self.concentration,
        }
    }
}

/// Block-diagonal real beamformer `G = blkdiag(g_1, …, g_N)`, stored as the
/// `N` blocks of length `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    bins: usize,
    gains: Vec<f64>,
}

impl Beamformer {
    pub fn from_gains(bins: usize, gains: Vec<f64>) -> Result<Self> {
        if bins == 0 || gains.is_empty() || gains.len() % bins != 0 {
            return Err(Error::Shape(format!("{} gains do not split into blocks of {bins}", gains.len())));
        }
        Ok(Beamformer { bins, gains })
    }

    /// Antenna `n` uses dictionary column `choices[n]`.
    pub fn from_choices(dict: &PatternDictionary, choices: &[usize]) -> Result<Self> {
        let mut gains = Vec::with_capacity(choices.len() * dict.bins());
        for &u in choices {
            if u >= dict.len() {
                return Err(Error::Domain(format!("pattern index {u} outside dictionary of {}", dict.len())));
            }
            gains.extend_from_slice(dict.pattern(u));
        }
        Beamformer::from_gains(dict.bins(), gains)
    }

    /// Every antenna uses pattern `u`.
    pub fn uniform_choice(dict: &PatternDictionary, antennas: usize, u: usize) -> Result<Self> {
        Self::from_choices(dict, &vec![u; antennas])
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn num_antennas(&self) -> usize {
        self.gains.len() / self.bins
    }

    pub fn block(&self, n: usize) -> &[f64] {
        &self.gains[n * self.bins..(n + 1) * self.bins]
    }

    /// Dense `MN × N` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (m, n) = (self.bins, self.num_antennas());
        let mut g = DMatrix::zeros(m * n, n);
        for j in 0..n {
            for (i, &v) in self.block(j).iter().enumerate() {
                g[(j * m + i, j)] = v;
            }
        }
        g
    }
}

/// Per-antenna selection weights, `U` consecutive entries per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    weights: Vec<f64>,
    patterns: usize,
}

impl Selector {
    pub fn new(weights: Vec<f64>, patterns: usize) -> Result<Self> {
        if patterns == 0 || weights.is_empty() || weights.len() % patterns != 0 {
            return Err(Error::Shape(format!("{} weights do not split into blocks of {patterns}", weights.len())));
        }
        Ok(Selector { weights, patterns })
    }

    /// Center of the product of simplices.
    pub fn uniform(antennas: usize, patterns: usize) -> Self {
        Selector { weights: vec![1.0 / patterns as f64; antennas * patterns], patterns }
    }

    pub fn one_hot(choices: &[usize], patterns: usize) -> Result<Self> {
        let mut w = vec![0.0; choices.len() * patterns];
        for (n, &u) in choices.iter().enumerate() {
            if u >= patterns {
                return Err(Error::Domain(format!("pattern index {u} ≥ {patterns}")));
            }
            w[n * patterns + u] = 1.0;
        }
        Selector::new(w, patterns)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn patterns(&self) -> usize {
        self.patterns
    }

    pub fn antennas(&self) -> usize {
        self.weights.len() / self.patterns
    }

    pub fn block(&self, n: usize) -> &[f64] {
        &self.weights[n * self.patterns..(n + 1) * self.patterns]
    }

    /// Every entry in `[0, 1]` and every block sums to one, within `tol`.
    pub fn is_relaxed_feasible(&self, tol: f64) -> bool {
        (0..self.antennas()).all(|n| {
            let b = self.block(n);
            b.iter().all(|&x| x >= -tol && x <= 1.0 + tol) && (b.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn is_binary(&self) -> bool {
        (0..self.antennas()).all(|n| {
            let b = self.block(n);
            b.iter().all(|&x| x == 0.0 || x == 1.0) && b.iter().filter(|&&x| x == 1.0).count() == 1
        })
    }

    /// Per-block argmax, ties to the lowest index.
    pub fn argmax_choices(&self) -> Vec<usize> {
        (0..self.antennas())
            .map(|n| {
                let b = self.block(n);
                let mut best = 0;
                for u in 1..b.len() {
                    if b[u] > b[best] {
                        best = u;
                    }
                }
                best
            })
            .collect()
    }
}

/// Cholesky-based helpers on small row-major Hermitian matrices.
mod herm {
    use super::C64;

    /// In-place lower Cholesky factor; returns false if not positive definite.
    pub fn cholesky(a: &mut [C64], k: usize) -> bool {
        for j in 0..k {
            let mut d = a[j * k + j].re;
            for p in 0..j {
                d -= a[j * k + p].norm_sqr();
            }
            if !(d > 0.0) {
                return false;
            }
            let d = d.sqrt();
            a[j * k + j] = C64::new(d, 0.0);
            for i in j + 1..k {
                let mut s = a[i * k + j];
                for p in 0..j {
                    s -= a[i * k + p] * a[j * k + p].conj();
                }
                a[i * k + j] = s / d;
            }
        }
        true
    }

    pub fn log_det(l: &[C64], k: usize) -> f64 {
        (0..k).map(|i| l[i * k + i].re.ln()).sum::<f64>() * 2.0
    }

    /// Solve `L y = b` in place.
    pub fn forward(l: &[C64], k: usize, b: &mut [C64]) {
        for i in 0..k {
            let mut s = b[i];
            for p in 0..i {
                s -= l[i * k + p] * b[p];
            }
            b[i] = s / l[i * k + i].re;
        }
    }

    /// Solve `Lᴴ x = y` in place.
    pub fn backward(l: &[C64], k: usize, b: &mut [C64]) {
        for i in (0..k).rev() {
            let mut s = b[i];
            for p in i + 1..k {
                s -= l[p * k + i].conj() * b[p];
            }
            b[i] = s / l[i * k + i].re;
        }
    }
}

/// Precomputed `W_t` for every sample, ready for rate and gradient evaluation.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    users: usize,
    columns: usize,
    patterns: usize,
    snr: f64,
    /// One `K × UN` matrix per sample, column-major (`w_i` contiguous).
    w: Vec<Vec<C64>>,
}

impl SelectionProblem {
    pub fn new(batch: &ChannelBatch, dict: &PatternDictionary, rho: f64, sigma2: f64) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Config("empty channel batch".into()));
        }
        if !(rho > 0.0 && sigma2 > 0.0) {
            return Err(Error::Config(format!("rho and sigma2 must be positive, got {rho} and {sigma2}")));
        }
        if batch.bins != dict.bins() {
            return Err(Error::Shape(format!("batch has {} bins, dictionary {}", batch.bins, dict.bins())));
        }
        let m = dict.bins();
        let u_count = dict.len();
        let n_ant = batch.num_antennas();
        let k_count = batch.num_users();
        let columns = u_count * n_ant;
        let w = batch
            .samples
            .iter()
            .map(|h| {
                let mut w = vec![C64::new(0.0, 0.0); k_count * columns];
                for n in 0..n_ant {
                    for u in 0..u_count {
                        let q = dict.pattern(u);
                        let col = n * u_count + u;
                        for k in 0..k_count {
                            let mut acc = C64::new(0.0, 0.0);
                            for (mm, &qv) in q.iter().enumerate() {
                                acc += h[(n * m + mm, k)].conj() * qv;
                            }
                            w[col * k_count + k] = acc;
                        }
                    }
                }
                w
            })
            .collect();
        Ok(SelectionProblem { users: k_count, columns, patterns: u_count, snr: rho / sigma2, w })
    }

    pub fn dimension(&self) -> usize {
        self.columns
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.columns {
            return Err(Error::Shape(format!("selector has {} entries, expected {}", v.len(), self.columns)));
        }
        Ok(())
    }

    /// `I_K + snr · W diag(v) Wᴴ` for sample `t`, row-major.
    fn inner(&self, t: usize, v: &[f64]) -> Vec<C64> {
        let k = self.users;
        let mut a = vec![C64::new(0.0, 0.0); k * k];
        for i in 0..k {
            a[i * k + i] = C64::new(1.0, 0.0);
        }
        self.accumulate(t, v, self.snr, &mut a);
        a
    }

    /// `a += scale · W diag(v) Wᴴ` (lower triangle plus diagonal suffices for
    /// Cholesky, but the full matrix is filled for trace products).
    fn accumulate(&self, t: usize, v: &[f64], scale: f64, a: &mut [C64]) {
        let k = self.users;
        let w = &self.w[t];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let c = &w[i * k..(i + 1) * k];
            let s = scale * vi;
            for r in 0..k {
                let cr = c[r] * s;
                for q in 0..k {
                    a[r * k + q] += cr * c[q].conj();
                }
            }
        }
    }

    /// Ergodic rate in bits/s/Hz.
    pub fn rate(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        let k = self.users;
        let mut total = 0.0;
        for t in 0..self.w.len() {
            let mut a = self.inner(t, v);
            if !herm::cholesky(&mut a, k) {
                return Err(Error::Numeric("inner matrix lost positive definiteness".into()));
            }
            total += herm::log_det(&a, k);
        }
        Ok(total / (self.w.len() as f64 * LN_2))
    }

    /// Exact gradient of [`Self::rate`].
    pub fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.rate_and_gradient(v)?.1)
    }

    pub fn rate_and_gradient(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(v)?;
        let k = self.users;
        let mut grad = vec![0.0; self.columns];
        let mut total = 0.0;
        let mut y = vec![C64::new(0.0, 0.0); k];
        for t in 0..self.w.len() {
            let mut l = self.inner(t, v);
            if !herm::cholesky(&mut l, k) {
                return Err(Error::Numeric("inner matrix lost positive definiteness".into()));
            }
            total += herm::log_det(&l, k);
            let w = &self.w[t];
            for (i, g) in grad.iter_mut().enumerate() {
                y.copy_from_slice(&w[i * k..(i + 1) * k]);
                herm::forward(&l, k, &mut y);
                *g += y.iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
        }
        let z = self.w.len() as f64;
        let scale = self.snr / (LN_2 * z);
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total / (z * LN_2), grad))
    }

    /// Restriction of the rate to the segment `v + γ d`.
    fn line(&self, v: &[f64], d: &[f64]) -> LineFunction {
        let k = self.users;
        let base = (0..self.w.len()).map(|t| self.inner(t, v)).collect();
        let dir = (0..self.w.len())
            .map(|t| {
                let mut a = vec![C64::new(0.0, 0.0); k * k];
                self.accumulate(t, d, self.snr, &mut a);
                a
            })
            .collect();
        LineFunction { k, base, dir }
    }
}

struct LineFunction {
    k: usize,
    base: Vec<Vec<C64>>,
    dir: Vec<Vec<C64>>,
}

impl LineFunction {
    fn matrix(&self, t: usize, gamma: f64) -> Vec<C64> {
        self.base[t].iter().zip(&self.dir[t]).map(|(a, d)| a + d * gamma).collect()
    }

    fn value(&self, gamma: f64) -> f64 {
        let mut s = 0.0;
        for t in 0..self.base.len() {
            let mut a = self.matrix(t, gamma);
            if !herm::cholesky(&mut a, self.k) {
                return f64::NEG_INFINITY;
            }
            s += herm::log_det(&a, self.k);
        }
        s / (self.base.len() as f64 * LN_2)
    }

    /// First and second derivative at `gamma`.
    fn derivatives(&self, gamma: f64) -> Option<(f64, f64)> {
        let k = self.k;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        let mut x = vec![C64::new(0.0, 0.0); k * k];
        let mut col = vec![C64::new(0.0, 0.0); k];
        for t in 0..self.base.len() {
            let mut l = self.matrix(t, gamma);
            if !herm::cholesky(&mut l, k) {
                return None;
            }
            let d = &self.dir[t];
            // X = A⁻¹ D, column by column.
            for j in 0..k {
                for i in 0..k {
                    col[i] = d[i * k + j];
                }
                herm::forward(&l, k, &mut col);
                herm::backward(&l, k, &mut col);
                for i in 0..k {
                    x[i * k + j] = col[i];
                }
            }
            for i in 0..k {
                d1 += x[i * k + i].re;
                for j in 0..k {
                    d2 -= (x[i * k + j] * x[j * k + i]).re;
                }
            }
        }
        let z = self.base.len() as f64 * LN_2;
        Some((d1 / z, d2 / z))
    }
}

/// Step size rule of the Frank–Wolfe iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `2 / (t + 2)`.
    Diminishing,
    /// Golden-section search with the given number of refinements.
    Golden(usize),
    /// Safeguarded Newton on the derivative of the concave line function.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwSettings {
    pub max_iters: usize,
    /// Stop once the duality gap falls below this.
    pub tol: f64,
    pub step: StepRule,
    /// Also try a pairwise (away-to-toward) step each iteration and keep the better one.
    pub pairwise: bool,
}

impl Default for FwSettings {
    fn default() -> Self {
        FwSettings { max_iters: 500, tol: 1e-4, step: StepRule::Exact, pairwise: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSolution {
    pub selector: Selector,
    pub objective: f64,
    /// Frank–Wolfe duality gap at the returned iterate; the relaxed optimum is
    /// at most `objective + gap`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration (starting point first).
    pub trace: Vec<f64>,
}

fn golden(f: &dyn Fn(f64) -> f64, hi: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_895;
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = if fc >= fd { (c, fc) } else { (d, fd) };
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc > best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd > best.1 {
                best = (d, fd);
            }
        }
    }
    let fh = f(hi);
    if fh > best.1 {
        best = (hi, fh);
    }
    best
}

fn exact(line: &LineFunction, hi: f64) -> f64 {
    let slope = |g: f64| line.derivatives(g).map(|d| d.0).unwrap_or(f64::NEG_INFINITY);
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    if slope(hi) >= 0.0 {
        return hi;
    }
    let (mut lo, mut up) = (0.0, hi);
    let mut g = 0.5 * hi;
    for _ in 0..60 {
        let Some((d1, d2)) = line.derivatives(g) else {
            up = g;
            g = 0.5 * (lo + up);
            continue;
        };
        if d1 > 0.0 {
            lo = g;
        } else {
            up = g;
        }
        let newton = if d2 < 0.0 { g - d1 / d2 } else { f64::NAN };
        g = if newton > lo && newton < up { newton } else { 0.5 * (lo + up) };
        if up - lo <= 1e-14 * hi.max(1e-300) || d1.abs() <= 1e-15 {
            break;
        }
    }
    g
}

/// Best step in `[0, hi]` along `d` from `v`; returns `(γ, value)`.
fn line_step(problem: &SelectionProblem, v: &[f64], d: &[f64], hi: f64, rule: StepRule, iter: usize) -> (f64, f64) {
    let line = problem.line(v, d);
    let gamma = match rule {
        StepRule::Diminishing => (2.0 / (iter as f64 + 2.0)).min(hi),
        StepRule::Golden(n) => return golden(&|g| line.value(g), hi, n),
        StepRule::Exact => exact(&line, hi),
    };
    (gamma, line.value(gamma))
}

/// Maximize the relaxed ergodic rate over the product of simplices.
///
/// Starts from the uniform selector. Each iteration computes the gradient,
/// picks the best vertex of every block (ties to the lowest index) and steps
/// toward it; with `pairwise` it also tries moving weight from the worst
/// active pattern to the best one and keeps whichever step gains more.
pub fn solve_relaxed_with(problem: &SelectionProblem, antennas: usize, settings: &FwSettings) -> Result<RelaxedSolution> {
    let u_count = problem.patterns;
    if u_count * antennas != problem.dimension() {
        return Err(Error::Shape("antenna count does not match the selection problem".into()));
    }
    let mut v = Selector::uniform(antennas, u_count).weights;
    let (mut value, mut grad) = problem.rate_and_gradient(&v)?;
    let mut trace = vec![value];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut toward = vec![0usize; antennas];
    let mut away = vec![0usize; antennas];
    for it in 0..=settings.max_iters {
        gap = 0.0;
        for n in 0..antennas {
            let g = &grad[n * u_count..(n + 1) * u_count];
            let b = &v[n * u_count..(n + 1) * u_count];
            let mut s = 0;
            let mut a = usize::MAX;
            for u in 0..u_count {
                if g[u] > g[s] {
                    s = u;
                }
                if b[u] > 0.0 && (a == usize::MAX || g[u] < g[a]) {
                    a = u;
                }
            }
            toward[n] = s;
            away[n] = a;
            gap += g[s] - b.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
        }
        gap = gap.max(0.0);
        if gap < settings.tol {
            converged = true;
            break;
        }
        if it == settings.max_iters {
            break;
        }
        iterations = it + 1;

        let mut d_fw = v.iter().map(|x| -x).collect::<Vec<_>>();
        for n in 0..antennas {
            d_fw[n * u_count + toward[n]] += 1.0;
        }
        let mut best = line_step(problem, &v, &d_fw, 1.0, settings.step, it);
        let mut best_dir = d_fw;

        if settings.pairwise {
            let mut d_pw = vec![0.0; v.len()];
            let mut hi = f64::INFINITY;
            for n in 0..antennas {
                if toward[n] != away[n] {
                    d_pw[n * u_count + toward[n]] = 1.0;
                    d_pw[n * u_count + away[n]] = -1.0;
                    hi = hi.min(v[n * u_count + away[n]]);
                }
            }
            if hi.is_finite() && hi > 0.0 {
                let cand = line_step(problem, &v, &d_pw, hi, settings.step, it);
                if cand.1 > best.1 {
                    best = cand;
                    best_dir = d_pw;
                }
            }
        }

        let (gamma, new_value) = best;
        if !(new_value >= value) || gamma <= 0.0 {
            // No ascent along either direction within numerical precision.
            break;
        }
        for (x, d) in v.iter_mut().zip(&best_dir) {
            *x = (*x + gamma * d).clamp(0.0, 1.0);
        }
        (value, grad) = problem.rate_and_gradient(&v)?;
        trace.push(value);
    }
    Ok(RelaxedSolution {
        selector: Selector { weights: v, patterns: u_count },
        objective: value,
        gap,
        iterations,
        converged,
        trace,
    })
}

pub fn solve_relaxed(
    batch: &ChannelBatch,
    dict: &PatternDictionary,
    rho: f64,
    sigma2: f64,
    max_iters: usize,
    tol: f64,
) -> Result<RelaxedSolution> {
    let problem = SelectionProblem::new(batch, dict, rho, sigma2)?;
    let settings = FwSettings { max_iters, tol, ..FwSettings::default() };
    solve_relaxed_with(&problem, batch.num_antennas(), &settings)
}

pub fn ergodic_rate(v: &Selector, batch: &ChannelBatch, dict: &PatternDictionary, rho: f64, sigma2: f64) -> Result<f64> {
    SelectionProblem::new(batch, dict, rho, sigma2)?.rate(v.weights())
}

pub fn selector_gradient(
    v: &Selector,
    batch: &ChannelBatch,
    dict: &PatternDictionary,
    rho: f64,
    sigma2: f64,
) -> Result<Vec<f64>> {
    SelectionProblem::new(batch, dict, rho, sigma2)?.gradient(v.weights())
}

/// Group-wise rounding: each antenna takes its largest weight (lowest index
/// on ties).
pub fn round_selector(v: &Selector, dict: &PatternDictionary) -> Result<(Selector, Beamformer)> {
    if v.patterns() != dict.len() {
        return Err(Error::Shape("selector block size differs from dictionary size".into()));
    }
    let choices = v.argmax_choices();
    Ok((Selector::one_hot(&choices, dict.len())?, Beamformer::from_choices(dict, &choices)?))
}

/// Largest `U^N` the exhaustive search accepts.
pub const EXHAUSTIVE_LIMIT: usize = 100_000;

/// Enumerate every binary selection; returns the best selection and its rate.
pub fn exhaustive_oracle(
    batch: &ChannelBatch,
    dict: &PatternDictionary,
    rho: f64,
    sigma2: f64,
) -> Result<(Selector, f64)> {
    let n = batch.num_antennas();
    let u = dict.len();
    let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(u).filter(|&x| x <= EXHAUSTIVE_LIMIT));
    let Some(total) = total else {
        return Err(Error::Size(format!("{u}^{n} selections exceed the limit of {EXHAUSTIVE_LIMIT}")));
    };
    let problem = SelectionProblem::new(batch, dict, rho, sigma2)?;
    let mut choices = vec![0usize; n];
    let mut v = vec![0.0; n * u];
    let mut best: Option<(Vec<usize>, f64)> = None;
    for code in 0..total {
        let mut c = code;
        for (i, ch) in choices.iter_mut().enumerate() {
            v[i * u + *ch] = 0.0;
            *ch = c % u;
            c /= u;
            v[i * u + *ch] = 1.0;
        }
        let r = problem.rate(&v)?;
        if best.as_ref().is_none_or(|b| r > b.1) {
            best = Some((choices.clone(), r));
        }
    }
    let (ch, r) = best.expect("at least one selection");
    Ok((Selector::one_hot(&ch, u)?, r))
}

/// Outcome of one fast-timescale pattern decision.
#[derive(Debug, Clone)]
pub struct PatternDecision {
    pub choices: Vec<usize>,
    pub beamformer: Beamformer,
    /// Ergodic rate of the chosen patterns over the batch.
    pub rate: f64,
    pub relaxed: RelaxedSolution,
    /// True when the all-broadside fallback beat the rounded selection.
    pub fell_back: bool,
}

/// Relax-and-round pattern selection with an invocation counter.
///
/// The rounded selection is compared against every antenna using the
/// broadside pattern, and the better of the two is kept, so a decision is
/// never worse than the fixed-pattern configuration on its own batch.
#[derive(Debug)]
pub struct PatternOptimizer {
    pub dict: PatternDictionary,
    pub rho: f64,
    pub sigma2: f64,
    pub settings: FwSettings,
    calls: AtomicUsize,
}

impl Clone for PatternOptimizer {
    fn clone(&self) -> Self {
        PatternOptimizer {
            dict: self.dict.clone(),
            rho: self.rho,
            sigma2: self.sigma2,
            settings: self.settings,
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl PatternOptimizer {
    pub fn new(dict: PatternDictionary, rho: f64, sigma2: f64, settings: FwSettings) -> Self {
        PatternOptimizer { dict, rho, sigma2, settings, calls: AtomicUsize::new(0) }
    }

    /// Number of relaxed solves performed so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn optimize(&self, batch: &ChannelBatch) -> Result<PatternDecision> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let problem = SelectionProblem::new(batch, &self.dict, self.rho, self.sigma2)?;
        let n = batch.num_antennas();
        let relaxed = solve_relaxed_with(&problem, n, &self.settings)?;
        let rounded = relaxed.selector.argmax_choices();
        let fallback = vec![self.dict.broadside(); n];
        let r_round = problem.rate(Selector::one_hot(&rounded, self.dict.len())?.weights())?;
        let r_fall = problem.rate(Selector::one_hot(&fallback, self.dict.len())?.weights())?;
        let (choices, rate, fell_back) =
            if r_round >= r_fall { (rounded, r_round, false) } else { (fallback, r_fall, true) };
        Ok(PatternDecision {
            beamformer: Beamformer::from_choices(&self.dict, &choices)?,
            choices,
            rate,
            relaxed,
            fell_back,
        })
    }
}

/// Dense `MN × N` beamformer `G = Q S` for a binary selector.
pub fn dense_beamformer(dict: &PatternDictionary, v: &Selector) -> DMatrix<f64> {
    let (m, u) = (dict.bins(), dict.len());
    let n = v.antennas();
    let mut g = DMatrix::zeros(m * n, n);
    for j in 0..n {
        for uu in 0..u {
            let w = v.block(j)[uu];
            if w != 0.0 {
                for i in 0..m {
                    g[(j * m + i, j)] += dict.matrix()[(i, uu)] * w;
                }
            }
        }
    }
    g
}

/// Rate of the beamformer on one channel via the antenna-side form; a thin
/// convenience over [`crate::channel::sum_rate`].
pub fn beamformer_rate(h: &ChannelMatrix, g: &Beamformer, rho: f64, sigma2: f64) -> Result<f64> {
    let a = effective_channel(h, g)?;
    crate::channel::rate_antenna_form(&a, rho / sigma2)
}

/// Text form of a selector: header `antenna,pattern,weight`, one row per
/// nonzero weight.
pub fn write_selector<W: std::io::Write>(v: &Selector, mut w: W) -> Result<()> {
    writeln!(w, "antenna,pattern,weight")?;
    for n in 0..v.antennas() {
        for (u, &x) in v.block(n).iter().enumerate() {
            if x != 0.0 {
                writeln!(w, "{n},{u},{x}")?;
            }
        }
    }
    Ok(())
}

/// Text form of a dictionary: header `bin,pattern,gain`, one row per entry.
pub fn write_dictionary<W: std::io::Write>(dict: &PatternDictionary, mut w: W) -> Result<()> {
    writeln!(w, "bin,pattern,gain")?;
    for u in 0..dict.len() {
        for (m, g) in dict.pattern(u).iter().enumerate() {
            writeln!(w, "{m},{u},{g}")?;
        }
    }
    Ok(())
}
