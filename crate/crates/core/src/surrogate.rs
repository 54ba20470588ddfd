//! Learned surrogate of the pattern-optimized sum rate as a function of the
//! cluster-core channel.
//!
//! Feature layout: for an `MN × K` channel the vector holds the real parts of
//! all entries in row-major order (entry `(i, k)` at `i·K + k`), followed by
//! the imaginary parts in the same order, all divided by the input scale Δ.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{Beamformer, PatternOptimizer};
use crate::channel::{cluster_core_channel, sample_multipath_channels, sum_rate, AngularGrid, ChannelMatrix};
use crate::posopt::PositionObjective;
use crate::rng::{self, Purpose};
use crate::scenario::Scenario;
use crate::{Error, Result, C64};

/// Dataset-level scales: inputs are divided by Δ, labels by `R_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_scale: f64,
    pub label_scale: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { input_scale: 1.0, label_scale: 1.0 }
    }
}

pub fn featurize(h: &ChannelMatrix, norm: &NormStats) -> Vec<f64> {
    let (rows, cols) = h.shape();
    let d = rows * cols;
    let mut x = vec![0.0; 2 * d];
    for i in 0..rows {
        for k in 0..cols {
            let z = h[(i, k)] / norm.input_scale;
            x[i * cols + k] = z.re;
            x[d + i * cols + k] = z.im;
        }
    }
    x
}

/// Inverse of [`featurize`].
pub fn defeaturize(x: &[f64], rows: usize, cols: usize, norm: &NormStats) -> Result<ChannelMatrix> {
    let d = rows * cols;
    if x.len() != 2 * d {
        return Err(Error::Shape(format!("{} features for a {rows}×{cols} channel", x.len())));
    }
    Ok(ChannelMatrix::from_fn(rows, cols, |i, k| {
        C64::new(x[i * cols + k], x[d + i * cols + k]) * norm.input_scale
    }))
}

/// Largest complex magnitude encoded in an unscaled feature vector.
pub fn max_magnitude(x: &[f64]) -> f64 {
    let d = x.len() / 2;
    (0..d).map(|i| x[i].hypot(x[d + i])).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrain,
    Finetune,
    Holdout,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pretrain => "pretrain",
            Provenance::Finetune => "finetune",
            Provenance::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Provenance::Pretrain),
            "finetune" => Ok(Provenance::Finetune),
            "holdout" => Ok(Provenance::Holdout),
            _ => Err(Error::Parse(format!("unknown provenance {s:?}"))),
        }
    }
}

/// One labelled position. Features are unscaled (Δ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub position: Vec<f64>,
    pub features: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub provenance: Provenance,
    pub rows: Vec<LabeledRow>,
}

const DATASET_MAGIC: &str = "# flexcoupler dataset v1";

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    /// First `fraction` of the rows and the rest.
    pub fn split(&self, fraction: f64) -> (LabeledDataset, LabeledDataset) {
        let cut = ((self.rows.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.rows.len());
        (
            LabeledDataset { provenance: self.provenance, rows: self.rows[..cut].to_vec() },
            LabeledDataset { provenance: self.provenance, rows: self.rows[cut..].to_vec() },
        )
    }

    /// Text container: a magic line, a `# provenance= antennas= features=`
    /// line, a header `p_1..p_N,f_1..f_D,label`, then one row per sample.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.rows.first().map_or(0, |r| r.position.len());
        let d = self.feature_dim();
        writeln!(w, "{DATASET_MAGIC}")?;
        writeln!(w, "# provenance={} antennas={n} features={d}", self.provenance.as_str())?;
        let header: Vec<String> = (1..=n)
            .map(|i| format!("p_{i}"))
            .chain((1..=d).map(|i| format!("f_{i}")))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for r in &self.rows {
            line.clear();
            for v in r.position.iter().chain(&r.features).chain(std::iter::once(&r.label)) {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Parse("truncated dataset".into()))?.map_err(Error::from)
        };
        if next()?.trim() != DATASET_MAGIC {
            return Err(Error::Parse("not a dataset file".into()));
        }
        let meta = next()?;
        let field = |key: &str| -> Result<&str> {
            meta.split_whitespace()
                .find_map(|t| t.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| Error::Parse(format!("missing {key} in dataset header")))
        };
        let provenance = Provenance::parse(field("provenance")?)?;
        let parse_count = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("bad count {s:?}: {e}")));
        let n = parse_count(field("antennas")?)?;
        let d = parse_count(field("features")?)?;
        next()?;
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let vals = l
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            if vals.len() != n + d + 1 {
                return Err(Error::Parse(format!("row {} has {} values, expected {}", i + 1, vals.len(), n + d + 1)));
            }
            rows.push(LabeledRow {
                position: vals[..n].to_vec(),
                features: vals[n..n + d].to_vec(),
                label: vals[n + d],
            });
        }
        Ok(LabeledDataset { provenance, rows })
    }
}

/// Label every position with the pattern-optimized rate of its core channel.
///
/// Row `j` draws its multipath samples from `derive(seed, j)`, so rows are
/// independent of scheduling. The label is the core-channel rate under the
/// better of the optimized patterns and the all-broadside patterns. Rows that
/// fail are logged and skipped.
pub fn generate_labels(
    scenario: &Scenario,
    positions: &[Vec<f64>],
    optimizer: &PatternOptimizer,
    grid: &AngularGrid,
    samples: usize,
    seed: u64,
    provenance: Provenance,
) -> Result<LabeledDataset> {
    let n = scenario.env.num_antennas;
    let default = Beamformer::uniform_choice(&optimizer.dict, n, optimizer.dict.broadside())?;
    let label_row = |j: usize, p: &Vec<f64>| -> Result<LabeledRow> {
        let batch = sample_multipath_channels(scenario, p, grid, samples, rng::derive(seed, j as u64))?;
        let decision = optimizer.optimize(&batch)?;
        let tuned = sum_rate(&batch.core, &decision.beamformer, optimizer.rho, optimizer.sigma2)?;
        let fixed = sum_rate(&batch.core, &default, optimizer.rho, optimizer.sigma2)?;
        Ok(LabeledRow {
            position: p.clone(),
            features: featurize(&batch.core, &NormStats::identity()),
            label: tuned.max(fixed),
        })
    };
    let results: Vec<Result<LabeledRow>> =
        positions.par_iter().enumerate().map(|(j, p)| label_row(j, p)).collect();
    let mut rows = Vec::with_capacity(results.len());
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => log::warn!("label row {j} skipped: {e}"),
        }
    }
    if rows.is_empty() && !positions.is_empty() {
        return Err(Error::Numeric("every label row failed".into()));
    }
    Ok(LabeledDataset { provenance, rows })
}

/// Fully connected network: rectifier on hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// All-zero parameters for the given layer widths (input first, output last).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("bad layer widths {widths:?}")));
        }
        Ok(Mlp {
            weights: widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&w| DVector::zeros(w)).collect(),
        })
    }

    /// Uniform fan-in initialization `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        for w in &mut m.weights {
            let a = (6.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        }
        Ok(m)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened layer by layer: weights column-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) {
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&v[i..i + n]);
            i += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&v[i..i + n]);
            i += n;
        }
    }

    /// The first `depth` layers and the rest.
    fn split_at(&self, depth: usize) -> (Mlp, Mlp) {
        let (hw, tw) = self.weights.split_at(depth);
        let (hb, tb) = self.biases.split_at(depth);
        (Mlp { weights: hw.to_vec(), biases: hb.to_vec() }, Mlp { weights: tw.to_vec(), biases: tb.to_vec() })
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} entries, network expects {}", x.len(), self.input_dim())));
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let a = acts.last().unwrap();
            let mut z = b.as_slice().to_vec();
            for (j, &aj) in a.iter().enumerate() {
                if aj != 0.0 {
                    for (zi, wij) in z.iter_mut().zip(w.column(j).iter()) {
                        *zi += wij * aj;
                    }
                }
            }
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.activations(x).last().unwrap()[0])
    }

    /// Accumulate `scale · ∂(f(x) − y)²/∂θ` into `grad` and return the squared error.
    fn backprop(&self, x: &[f64], y: f64, scale: f64, grad: &mut Mlp) -> f64 {
        let acts = self.activations(x);
        let err = acts.last().unwrap()[0] - y;
        let mut delta = vec![2.0 * err * scale];
        for l in (0..self.weights.len()).rev() {
            let a = &acts[l];
            let gw = &mut grad.weights[l];
            for (j, &aj) in a.iter().enumerate() {
                if aj != 0.0 {
                    for (g, d) in gw.column_mut(j).iter_mut().zip(&delta) {
                        *g += d * aj;
                    }
                }
            }
            for (g, d) in grad.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = &self.weights[l];
                delta = (0..w.ncols())
                    .map(|j| {
                        if a[j] > 0.0 {
                            w.column(j).iter().zip(&delta).map(|(wv, d)| wv * d).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        err * err
    }

    /// Mean squared error and its gradient over `(xs, ys)`.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(f64, Mlp)> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::Shape("inputs and labels must be nonempty and equally long".into()));
        }
        let mut grad = Mlp::zeros(&self.widths())?;
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.check(x)?;
            loss += self.backprop(x, y, scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let e = self.forward(x)? - y;
            s += e * e;
        }
        Ok(s / xs.len().max(1) as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Pretraining iterations `S_B`.
    pub iterations: usize,
    /// Fine-tuning iterations `S_T`.
    pub finetune_iterations: usize,
    pub batch_size: usize,
    pub adam_epsilon: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Leading layers left untouched by fine-tuning.
    pub freeze_depth: usize,
    /// Largest acceptable ratio of holdout to training MSE in
    /// [`holdout_check`]; exceeding it is reported, not an error.
    #[serde(default = "default_holdout_ratio_limit")]
    pub holdout_ratio_limit: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_holdout_ratio_limit() -> f64 {
    3.0
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            hidden: vec![64, 32, 16, 8],
            learning_rate: 0.01,
            iterations: 1000,
            finetune_iterations: 100,
            batch_size: 32,
            adam_epsilon: 1e-8,
            beta1: default_beta1(),
            beta2: default_beta2(),
            freeze_depth: 3,
            holdout_ratio_limit: default_holdout_ratio_limit(),
        }
    }

    pub fn paper() -> Self {
        TrainConfig { hidden: vec![500, 250, 100, 50], ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.hidden.len() + 1;
        if !(self.learning_rate > 0.0 && self.adam_epsilon > 0.0)
            || self.iterations == 0
            || self.batch_size == 0
            || self.hidden.contains(&0)
        {
            return Err(Error::Config("training parameters must be positive".into()));
        }
        if !(self.holdout_ratio_limit > 0.0) {
            return Err(Error::Config("holdout ratio limit must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if self.freeze_depth >= layers {
            return Err(Error::Config(format!(
                "freeze depth {} leaves nothing to tune in a {layers}-layer network",
                self.freeze_depth
            )));
        }
        Ok(())
    }

    fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Network plus the scales it was trained with; predicts rates in bits/s/Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub params: Mlp,
    pub norm: NormStats,
}

impl Surrogate {
    pub fn predict_features(&self, raw: &[f64]) -> Result<f64> {
        let x: Vec<f64> = raw.iter().map(|v| v / self.norm.input_scale).collect();
        Ok(self.params.forward(&x)? * self.norm.label_scale)
    }

    pub fn predict(&self, core: &ChannelMatrix) -> Result<f64> {
        Ok(self.params.forward(&featurize(core, &self.norm))? * self.norm.label_scale)
    }

    /// Mean squared error in normalized units over a dataset.
    pub fn mse(&self, data: &LabeledDataset) -> Result<f64> {
        let (xs, ys) = normalized(data, &self.norm);
        self.params.loss(&xs, &ys)
    }
}

/// Surrogate evaluated through the exact core-channel map of a scenario.
pub struct SurrogateObjective<'a> {
    pub surrogate: &'a Surrogate,
    pub scenario: &'a Scenario,
    pub grid: &'a AngularGrid,
}

impl PositionObjective for SurrogateObjective<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.surrogate.predict(&cluster_core_channel(self.scenario, p, self.grid)?)
    }
}

fn normalized(data: &LabeledDataset, norm: &NormStats) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs = data.rows.iter().map(|r| r.features.iter().map(|v| v / norm.input_scale).collect()).collect();
    let ys = data.rows.iter().map(|r| r.label / norm.label_scale).collect();
    (xs, ys)
}

/// Dataset scales: Δ is the largest complex magnitude, `R_max` the largest label.
pub fn norm_stats(data: &LabeledDataset) -> Result<NormStats> {
    let input_scale = data.rows.iter().map(|r| max_magnitude(&r.features)).fold(0.0, f64::max);
    let label_scale = data.rows.iter().map(|r| r.label).fold(0.0, f64::max);
    if !(input_scale > 0.0 && label_scale > 0.0) {
        return Err(Error::Numeric(format!(
            "degenerate dataset: input scale {input_scale}, label scale {label_scale}"
        )));
    }
    Ok(NormStats { input_scale, label_scale })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], trainable: &[bool], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            if !trainable[i] {
                continue;
            }
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Surrogate,
    /// Mini-batch loss of every iteration.
    pub losses: Vec<f64>,
}

/// Mini-batch Adam on shuffled epochs; layers below `frozen` are not updated.
/// `checkpoint` sees the network after every `every`-th iteration.
#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut Mlp,
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &TrainConfig,
    iterations: usize,
    frozen: usize,
    rng: &mut impl Rng,
    every: usize,
    mut checkpoint: impl FnMut(&Mlp) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut trainable = Vec::with_capacity(params.param_count());
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        trainable.extend(std::iter::repeat_n(l >= frozen, w.len() + b.len()));
    }
    let mut adam = Adam::new(params.param_count());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut cursor = order.len();
    let bsz = cfg.batch_size.min(xs.len());
    let mut losses = Vec::with_capacity(iterations);
    let mut theta = params.flatten();
    let mut bx = Vec::with_capacity(bsz);
    let mut by = Vec::with_capacity(bsz);
    for it in 0..iterations {
        bx.clear();
        by.clear();
        while bx.len() < bsz {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            bx.push(xs[order[cursor]].clone());
            by.push(ys[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = params.loss_and_gradient(&bx, &by)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss} at iteration {it}")));
        }
        losses.push(loss);
        adam.step(&mut theta, &grad.flatten(), &trainable, cfg);
        params.unflatten(&theta);
        if every > 0 && (it + 1) % every == 0 {
            checkpoint(params)?;
        }
    }
    Ok(losses)
}

/// Fine-tuning keeps the best of these checkpoints.
const FINETUNE_CHECKPOINT_EVERY: usize = 10;

pub fn train(data: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let norm = norm_stats(data)?;
    let (xs, ys) = normalized(data, &norm);
    let mut params = Mlp::init(&cfg.widths(data.feature_dim()), &mut rng::stream(seed, Purpose::Init, 0))?;
    let mut batches = rng::stream(seed, Purpose::Batches, 0);
    let losses = fit(&mut params, &xs, &ys, cfg, cfg.iterations, 0, &mut batches, 0, |_| Ok(()))?;
    Ok(TrainOutcome { model: Surrogate { params, norm }, losses })
}

/// Generalization summary of a surrogate trained on part of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutReport {
    pub train_mse: f64,
    pub holdout_mse: f64,
    /// Holdout MSE of always predicting the mean training label.
    pub baseline_mse: f64,
    pub ratio: f64,
    pub limit: f64,
    pub within_limit: bool,
}

/// Train on the first `fraction` of the rows and score the rest.
pub fn holdout_check(data: &LabeledDataset, cfg: &TrainConfig, fraction: f64, seed: u64) -> Result<HoldoutReport> {
    let (fit_set, held) = data.split(fraction);
    if fit_set.is_empty() || held.is_empty() {
        return Err(Error::Config(format!("split {fraction} leaves an empty side")));
    }
    let model = train(&fit_set, cfg, seed)?.model;
    let (train_mse, holdout_mse) = (model.mse(&fit_set)?, model.mse(&held)?);
    let mean = fit_set.rows.iter().map(|r| r.label).sum::<f64>() / fit_set.len() as f64 / model.norm.label_scale;
    let baseline_mse =
        held.rows.iter().map(|r| (r.label / model.norm.label_scale - mean).powi(2)).sum::<f64>() / held.len() as f64;
    let ratio = holdout_mse / train_mse;
    let limit = cfg.holdout_ratio_limit;
    Ok(HoldoutReport { train_mse, holdout_mse, baseline_mse, ratio, limit, within_limit: ratio <= limit })
}

/// Retrain the layers above `freeze_depth` on a small dataset, keeping the
/// pretraining scales. The returned network is the best of the starting point
/// and a checkpoint every ten iterations, judged by the loss on `data`.
pub fn fine_tune(model: &Surrogate, data: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot fine-tune on an empty dataset".into()));
    }
    if data.feature_dim() != model.params.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, network expects {}",
            data.feature_dim(),
            model.params.input_dim()
        )));
    }
    if cfg.freeze_depth >= model.params.num_layers() {
        return Err(Error::Config("freeze depth covers every layer".into()));
    }
    let (xs, ys) = normalized(data, &model.norm);
    // Frozen layers never change, so their outputs are computed once and
    // only the trainable tail is fitted.
    let depth = cfg.freeze_depth;
    let (head, mut tail) = model.params.split_at(depth);
    let feats: Vec<Vec<f64>> = xs.iter().map(|x| model.params.activations(x).swap_remove(depth)).collect();
    let mut best = (tail.loss(&feats, &ys)?, tail.clone());
    let mut rng = rng::stream(seed, Purpose::Batches, 1);
    let losses = fit(&mut tail, &feats, &ys, cfg, cfg.finetune_iterations, 0, &mut rng, FINETUNE_CHECKPOINT_EVERY, |m| {
        let l = m.loss(&feats, &ys)?;
        if l < best.0 {
            best = (l, m.clone());
        }
        Ok(())
    })?;
    // The last iterate counts even when the run length is not a multiple.
    let l = tail.loss(&feats, &ys)?;
    if l < best.0 {
        best = (l, tail);
    }
    let params = Mlp {
        weights: head.weights.into_iter().chain(best.1.weights).collect(),
        biases: head.biases.into_iter().chain(best.1.biases).collect(),
    };
    Ok(TrainOutcome { model: Surrogate { params, norm: model.norm }, losses })
}

const MODEL_MAGIC: &[u8; 4] = b"FCSM";
const MODEL_VERSION: u32 = 1;

/// Binary layout, little endian: `FCSM`, u32 version, u32 width count, the
/// widths as u32, f64 Δ, f64 `R_max`, then per layer the weights row-major
/// (`out × in`) followed by the bias, all f64.
pub fn write_model<W: Write>(model: &Surrogate, mut w: W) -> Result<()> {
    let widths = model.params.widths();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(widths.len() as u32).to_le_bytes())?;
    for &x in &widths {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    w.write_all(&model.norm.input_scale.to_le_bytes())?;
    w.write_all(&model.norm.label_scale.to_le_bytes())?;
    for (wm, b) in model.params.weights.iter().zip(&model.params.biases) {
        for i in 0..wm.nrows() {
            for j in 0..wm.ncols() {
                w.write_all(&wm[(i, j)].to_le_bytes())?;
            }
        }
        for v in b.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<Surrogate> {
    let mut u32_buf = [0u8; 4];
    let mut f64_buf = [0u8; 8];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Parse("not a surrogate model file".into()));
    }
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Parse(format!("unsupported model version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::Parse(format!("implausible layer count {count}")));
    }
    let widths = (0..count).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut read_f64 = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut f64_buf)?;
        Ok(f64::from_le_bytes(f64_buf))
    };
    let norm = NormStats { input_scale: read_f64(&mut r)?, label_scale: read_f64(&mut r)? };
    let mut params = Mlp::zeros(&widths)?;
    for (wm, b) in params.weights.iter_mut().zip(&mut params.biases) {
        for i in 0..wm.nrows() {
            for j in 0..wm.ncols() {
                wm[(i, j)] = read_f64(&mut r)?;
            }
        }
        for v in b.iter_mut() {
            *v = read_f64(&mut r)?;
        }
    }
    Ok(Surrogate { params, norm })
}
