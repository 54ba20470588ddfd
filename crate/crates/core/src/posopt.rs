//! Slow-timescale antenna positioning.
//!
//! Positions live in the polyhedron
//! `T = { p : 0 ≤ p_1, p_{n+1} − p_n ≥ d_min, p_N ≤ X }`.
//! With `q_n = p_n − (n−1)·d_min` this becomes the monotone box
//! `0 ≤ q_1 ≤ … ≤ q_N ≤ X − (N−1)·d_min`, which is what the projection and
//! the position sampler work in.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beamform::{Beamformer, PatternDecision, PatternOptimizer};
use crate::channel::{cluster_core_channel, mean_sum_rate, sample_multipath_channels, sum_rate, AngularGrid};
use crate::experiments::{decision_seed, evaluate, validation_seed, ExperimentConfig};
use crate::rng::{self, Purpose};
use crate::scenario::{generate_scenario, Environment, Scenario};
use crate::surrogate::{
    fine_tune, generate_labels, train, LabeledDataset, Provenance, Surrogate, SurrogateObjective, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleSet {
    pub rail_length: f64,
    pub min_spacing: f64,
    pub antennas: usize,
}

impl FeasibleSet {
    pub fn new(rail_length: f64, min_spacing: f64, antennas: usize) -> Result<Self> {
        if antennas == 0 {
            return Err(Error::Config("need at least one antenna".into()));
        }
        if !(rail_length > 0.0 && min_spacing >= 0.0) {
            return Err(Error::Config(format!("bad rail length {rail_length} or spacing {min_spacing}")));
        }
        if rail_length < (antennas - 1) as f64 * min_spacing {
            return Err(Error::Config(format!(
                "{antennas} antennas at spacing {min_spacing} do not fit on a {rail_length} m rail"
            )));
        }
        Ok(FeasibleSet { rail_length, min_spacing, antennas })
    }

    pub fn from_env(env: &Environment) -> Result<Self> {
        Self::new(env.rail_length, env.min_spacing, env.num_antennas)
    }

    /// Upper bound of the shifted coordinates, `X − (N−1)·d_min`.
    pub fn slack(&self) -> f64 {
        (self.rail_length - (self.antennas - 1) as f64 * self.min_spacing).max(0.0)
    }

    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        p.len() == self.antennas
            && p.iter().all(|x| x.is_finite())
            && p[0] >= -tol
            && p[self.antennas - 1] <= self.rail_length + tol
            && p.windows(2).all(|w| w[1] - w[0] >= self.min_spacing - tol)
    }

    /// Compact array at minimum spacing, centered on the rail.
    pub fn centered(&self) -> Vec<f64> {
        let start = self.slack() / 2.0;
        (0..self.antennas).map(|n| start + n as f64 * self.min_spacing).collect()
    }

    /// Evenly spread array: antenna `n` at the center of the `n`-th of `N`
    /// equal rail cells, or spaced end to end when cells are narrower than
    /// `d_min`.
    pub fn uniform(&self) -> Vec<f64> {
        let n = self.antennas;
        let cell = self.rail_length / n as f64;
        if cell >= self.min_spacing {
            (0..n).map(|i| (i as f64 + 0.5) * cell).collect()
        } else {
            let step = self.rail_length / (n - 1) as f64;
            (0..n).map(|i| (i as f64 * step).min(self.rail_length)).collect()
        }
    }

    /// Latin-hypercube sample of the shifted box `[0, X']^N`; each point is
    /// sorted and shifted back, which covers `T` uniformly.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let slack = self.slack();
        let strata: Vec<Vec<usize>> = (0..self.antennas)
            .map(|_| {
                let mut s: Vec<usize> = (0..count).collect();
                s.shuffle(rng);
                s
            })
            .collect();
        (0..count)
            .map(|j| {
                let mut q: Vec<f64> = strata
                    .iter()
                    .map(|s| (s[j] as f64 + rng.random::<f64>()) / count as f64 * slack)
                    .collect();
                q.sort_by(f64::total_cmp);
                self.unshift(&q)
            })
            .collect()
    }

    fn unshift(&self, q: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(q.len());
        for (n, &qn) in q.iter().enumerate() {
            let x = qn + n as f64 * self.min_spacing;
            p.push(match p.last() {
                Some(&prev) => x.max(prev + self.min_spacing),
                None => x,
            });
        }
        p
    }
}

/// Unweighted isotonic regression onto the nondecreasing cone.
pub fn isotonic(q: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(q.len());
    let mut sizes: Vec<usize> = Vec::with_capacity(q.len());
    for &x in q {
        means.push(x);
        sizes.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, s2) = (means.pop().unwrap(), sizes.pop().unwrap());
            let (m1, s1) = (means.pop().unwrap(), sizes.pop().unwrap());
            let s = s1 + s2;
            means.push((m1 * s1 as f64 + m2 * s2 as f64) / s as f64);
            sizes.push(s);
        }
    }
    means.iter().zip(&sizes).flat_map(|(&m, &s)| std::iter::repeat_n(m, s)).collect()
}

/// Euclidean projection onto `T`.
pub fn project_feasible(x: &[f64], fs: &FeasibleSet) -> Result<Vec<f64>> {
    if x.len() != fs.antennas {
        return Err(Error::Shape(format!("{} coordinates for {} antennas", x.len(), fs.antennas)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite position".into()));
    }
    let shifted: Vec<f64> = x.iter().enumerate().map(|(n, &v)| v - n as f64 * fs.min_spacing).collect();
    let slack = fs.slack();
    let q: Vec<f64> = isotonic(&shifted).into_iter().map(|v| v.clamp(0.0, slack)).collect();
    let mut p = fs.unshift(&q);
    // Shifting back rounds; nudge by ulps so every constraint holds in floating point.
    let last = fs.antennas - 1;
    for n in 1..=last {
        while p[n] - p[n - 1] < fs.min_spacing {
            p[n] = p[n].next_up();
        }
    }
    if p[last] > fs.rail_length {
        p[last] = fs.rail_length;
        for n in (0..last).rev() {
            p[n] = p[n].min(p[n + 1] - fs.min_spacing);
            while p[n + 1] - p[n] < fs.min_spacing {
                p[n] = p[n].next_down();
            }
        }
    }
    Ok(p)
}

/// A scalar objective of the position vector.
pub trait PositionObjective {
    fn value(&self, p: &[f64]) -> Result<f64>;
}

impl<F: Fn(&[f64]) -> Result<f64>> PositionObjective for F {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self(p)
    }
}

/// Central differences per coordinate; one-sided where `p_n ± δ` would leave
/// the rail.
pub fn position_gradient<O: PositionObjective + ?Sized>(
    obj: &O,
    p: &[f64],
    fs: &FeasibleSet,
    fd_step: f64,
) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {fd_step}")));
    }
    let mut grad = Vec::with_capacity(p.len());
    let mut probe = p.to_vec();
    let centre = if p.iter().any(|&x| x - fd_step < 0.0 || x + fd_step > fs.rail_length) {
        Some(obj.value(p)?)
    } else {
        None
    };
    for n in 0..p.len() {
        let lo_ok = p[n] - fd_step >= 0.0;
        let hi_ok = p[n] + fd_step <= fs.rail_length;
        let mut eval = |x: f64| {
            probe[n] = x;
            let v = obj.value(&probe);
            probe[n] = p[n];
            v
        };
        let g = match (lo_ok, hi_ok) {
            (true, true) => (eval(p[n] + fd_step)? - eval(p[n] - fd_step)?) / (2.0 * fd_step),
            (false, true) => (eval(p[n] + fd_step)? - centre.unwrap()) / fd_step,
            (true, false) => (centre.unwrap() - eval(p[n] - fd_step)?) / fd_step,
            (false, false) => 0.0,
        };
        grad.push(g);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentSettings {
    /// Step size η, meters per unit gradient.
    pub step: f64,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub fd_step: f64,
    pub max_iters: usize,
    /// Halve the step (up to 20 times) whenever the objective would decrease.
    pub backtracking: bool,
    /// Shifted copies of the uniform layout scored before ascending.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Ascents run from the best-scoring probes; the best result wins.
    #[serde(default = "default_starts")]
    pub starts: usize,
}

fn default_probes() -> usize {
    64
}

fn default_starts() -> usize {
    3
}

impl Default for AscentSettings {
    fn default() -> Self {
        AscentSettings {
            step: 0.05,
            tol: 1e-3,
            fd_step: 1e-3,
            max_iters: 200,
            backtracking: true,
            probes: default_probes(),
            starts: default_starts(),
        }
    }
}

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    pub start: Vec<f64>,
    pub positions: Vec<f64>,
    /// Objective at `p0` followed by the value after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Gradient norm fell below the tolerance.
    pub converged: bool,
    /// Stopped by the iteration cap.
    pub hit_max_iters: bool,
}

/// Projected gradient ascent from `p0`.
pub fn optimize_positions<O: PositionObjective + ?Sized>(
    obj: &O,
    fs: &FeasibleSet,
    p0: &[f64],
    settings: &AscentSettings,
) -> Result<AscentResult> {
    if !fs.contains(p0, 1e-12) {
        return Err(Error::Domain(format!("starting point {p0:?} is not feasible")));
    }
    if !(settings.step > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {}", settings.step)));
    }
    let mut p = p0.to_vec();
    let mut value = obj.value(&p)?;
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iters {
        iterations += 1;
        let e = position_gradient(obj, &p, fs, settings.fd_step)?;
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("position gradient is not finite".into()));
        }
        if norm < settings.tol {
            converged = true;
            break;
        }
        let mut eta = settings.step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = p.iter().zip(&e).map(|(x, g)| x + eta * g).collect();
            let cand = project_feasible(&trial, fs)?;
            let v = obj.value(&cand)?;
            if !settings.backtracking || v >= value {
                accepted = Some((cand, v));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            // No ascent along the projected gradient at any tried step.
            converged = true;
            break;
        };
        let moved = cand.iter().zip(&p).any(|(a, b)| a != b);
        p = cand;
        value = v;
        trace.push(value);
        if !moved {
            converged = true;
            break;
        }
    }
    let hit_max_iters = !converged && iterations >= settings.max_iters;
    Ok(AscentResult { start: p0.to_vec(), positions: p, trace, iterations, converged, hit_max_iters })
}

/// The uniform layout followed by `probes` copies of it shifted across the
/// slack of the rail, each projected back onto the feasible set.
pub fn probe_layouts(fs: &FeasibleSet, probes: usize) -> Result<Vec<Vec<f64>>> {
    let base = fs.uniform();
    let slack = fs.slack();
    let mut out = vec![base.clone()];
    for j in 0..probes {
        let shift = slack * ((j as f64 + 0.5) / probes as f64 - 0.5);
        out.push(project_feasible(&base.iter().map(|x| x + shift).collect::<Vec<_>>(), fs)?);
    }
    Ok(out)
}

/// Projected gradient ascent from the `settings.starts` best of the probe
/// layouts; returns the run that ends highest. Ties keep the earlier probe,
/// so the uniform layout wins when nothing beats it.
pub fn optimize_positions_multistart<O: PositionObjective + ?Sized>(
    obj: &O,
    fs: &FeasibleSet,
    settings: &AscentSettings,
) -> Result<AscentResult> {
    let mut scored = Vec::new();
    for p in probe_layouts(fs, settings.probes)? {
        let v = obj.value(&p)?;
        scored.push((p, v));
    }
    // Stable sort keeps probe order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best: Option<AscentResult> = None;
    for (p, _) in scored.iter().take(settings.starts.max(1)) {
        let r = optimize_positions(obj, fs, p, settings)?;
        if best.as_ref().is_none_or(|b| r.trace.last() > b.trace.last()) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Seconds spent in each phase of the two-timescale pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub labels: f64,
    pub training: f64,
    pub measurement: f64,
    pub finetune: f64,
    pub positioning: f64,
    pub final_solve: f64,
}

impl PhaseTimes {
    /// Online latency: fine-tuning, position ascent and the final pattern solve.
    pub fn online(&self) -> f64 {
        self.finetune + self.positioning + self.final_solve
    }
}

#[derive(Debug, Clone)]
pub struct TwoTimescaleReport {
    pub positions: Vec<f64>,
    pub start: Vec<f64>,
    pub choices: Vec<usize>,
    /// Ergodic sum rate of `(p*, G*)` on held-out evaluation samples.
    pub rate: f64,
    /// Ergodic sum rate on the samples `G*` was chosen from.
    pub decision_rate: f64,
    /// True when the broadside sliding layout beat the surrogate-guided one.
    pub kept_sliding: bool,
    /// Surrogate-predicted rate along the ascent.
    pub surrogate_trace: Vec<f64>,
    pub ascent_iterations: usize,
    pub ascent_converged: bool,
    /// Relaxed solves made while labelling data (offline and measurement).
    pub label_calls: usize,
    /// Relaxed solves made inside the position loop; always zero.
    pub position_loop_calls: usize,
    /// Relaxed solves made online (position loop plus the final solve).
    pub online_calls: usize,
    pub train_loss: f64,
    pub finetune_loss: Option<f64>,
    pub times: PhaseTimes,
}

impl TwoTimescaleReport {
    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        line("rate", format!("{}", self.rate));
        line("decision_rate", format!("{}", self.decision_rate));
        line("positions", list(&self.positions));
        line("kept_sliding", self.kept_sliding.to_string());
        line("start", list(&self.start));
        line("patterns", self.choices.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        line("ascent_iterations", self.ascent_iterations.to_string());
        line("ascent_converged", self.ascent_converged.to_string());
        line("surrogate_trace", list(&self.surrogate_trace));
        line("label_calls", self.label_calls.to_string());
        line("position_loop_calls", self.position_loop_calls.to_string());
        line("online_calls", self.online_calls.to_string());
        line("train_loss", format!("{}", self.train_loss));
        line("finetune_loss", self.finetune_loss.map(|v| v.to_string()).unwrap_or_else(|| "none".into()));
        line("seconds_labels", format!("{}", self.times.labels));
        line("seconds_training", format!("{}", self.times.training));
        line("seconds_measurement", format!("{}", self.times.measurement));
        line("seconds_finetune", format!("{}", self.times.finetune));
        line("seconds_positioning", format!("{}", self.times.positioning));
        line("seconds_final_solve", format!("{}", self.times.final_solve));
        line("seconds_online", format!("{}", self.times.online()));
        s
    }
}

#[derive(Debug, Clone)]
pub struct TwoTimescaleOutcome {
    pub positions: Vec<f64>,
    pub beamformer: Beamformer,
    pub decision: PatternDecision,
    pub report: TwoTimescaleReport,
    /// The surrogate used online (fine-tuned when a measurement phase ran).
    pub surrogate: Surrogate,
}

/// Where the agent learns and where it acts.
#[derive(Debug, Clone, Copy)]
pub struct AgentRun<'a> {
    /// Scenario the EM map describes; labels for pretraining come from here.
    pub pretrain: &'a Scenario,
    /// Scenario the array actually operates in.
    pub online: &'a Scenario,
    /// Collect a few labels in the online scenario and fine-tune before positioning.
    pub fine_tune: bool,
    /// Skip pretraining and start from this surrogate.
    pub pretrained: Option<&'a Surrogate>,
}

/// Label set the agent collects in `scenario`: `pretrain_rows` positions for
/// pretraining or `finetune_rows` for fine-tuning, each phase on its own streams.
pub fn agent_labels(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    optimizer: &PatternOptimizer,
    phase: Provenance,
    seed: u64,
) -> Result<LabeledDataset> {
    let grid = AngularGrid::new(cfg.dictionary.bins)?;
    let fs = FeasibleSet::from_env(&scenario.env)?;
    let (rows, positions_rng, label_seed) = match phase {
        Provenance::Finetune => (cfg.sampling.finetune_rows, rng::stream(seed, Purpose::Finetune, 0), rng::derive(seed, 3)),
        Provenance::Holdout => (cfg.sampling.pretrain_rows, rng::stream(seed, Purpose::Holdout, 0), rng::derive(seed, 6)),
        Provenance::Pretrain => (cfg.sampling.pretrain_rows, rng::stream(seed, Purpose::Positions, 0), rng::derive(seed, 1)),
    };
    let mut positions_rng = positions_rng;
    let positions = fs.sample(rows, &mut positions_rng);
    generate_labels(scenario, &positions, optimizer, &grid, cfg.sampling.samples, label_seed, phase)
}

pub fn pretrain(cfg: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> Result<TrainOutcome> {
    train(data, &cfg.training, rng::derive(seed, 2))
}

pub fn adapt(cfg: &ExperimentConfig, model: &Surrogate, data: &LabeledDataset, seed: u64) -> Result<TrainOutcome> {
    fine_tune(model, data, &cfg.training, rng::derive(seed, 4))
}

/// Slide antennas with every pattern fixed to `g` by exact multi-start ascent
/// of the core-channel rate. Returns the better of the
/// ascended and the uniform layout on the decision batch, with its rate there.
pub fn translate_fixed_pattern(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    g: &Beamformer,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let grid = AngularGrid::new(cfg.dictionary.bins)?;
    let fs = FeasibleSet::from_env(&scenario.env)?;
    let objective = |p: &[f64]| sum_rate(&cluster_core_channel(scenario, p, &grid)?, g, cfg.link.rho, cfg.link.sigma2);
    let start = fs.uniform();
    // The exact objective is cheap and backtracking keeps every step uphill,
    // so a long first step and a tight tolerance cost little.
    let settings = AscentSettings { step: 20.0, tol: 1e-6, max_iters: 500, ..cfg.optimizer };
    let moved = optimize_positions_multistart(&objective, &fs, &settings)?.positions;
    let decision_rate = |p: &[f64]| -> Result<f64> {
        let batch = sample_multipath_channels(scenario, p, &grid, cfg.sampling.samples, decision_seed(seed))?;
        mean_sum_rate(&batch, g, cfg.link.rho, cfg.link.sigma2)
    };
    let (r_moved, r_start) = (decision_rate(&moved)?, decision_rate(&start)?);
    Ok(if r_moved >= r_start { (moved, r_moved) } else { (start, r_start) })
}

/// Pretrain, optionally fine-tune, position, then pick patterns once.
///
/// The surrogate-guided layout competes with the broadside layout of
/// [`translate_fixed_pattern`] on a validation batch, so the agent rarely
/// settles for less than sliding alone would give it.
pub fn run_agent(cfg: &ExperimentConfig, run: AgentRun<'_>, seed: u64) -> Result<TwoTimescaleOutcome> {
    let grid = AngularGrid::new(cfg.dictionary.bins)?;
    let optimizer = cfg.pattern_optimizer()?;
    let fs = FeasibleSet::from_env(&run.online.env)?;
    let mut times = PhaseTimes::default();

    let (mut model, train_loss, mut label_calls) = match run.pretrained {
        Some(m) => (m.clone(), f64::NAN, 0),
        None => {
            let t = Instant::now();
            let data = agent_labels(cfg, run.pretrain, &optimizer, Provenance::Pretrain, seed)?;
            times.labels = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let trained = pretrain(cfg, &data, seed)?;
            times.training = t.elapsed().as_secs_f64();
            let loss = trained.losses.last().copied().unwrap_or(f64::NAN);
            (trained.model, loss, optimizer.calls())
        }
    };

    let mut finetune_loss = None;
    if run.fine_tune {
        let t = Instant::now();
        optimizer.reset_calls();
        let data = agent_labels(cfg, run.online, &optimizer, Provenance::Finetune, seed)?;
        label_calls += optimizer.calls();
        times.measurement = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let tuned = adapt(cfg, &model, &data, seed)?;
        times.finetune = t.elapsed().as_secs_f64();
        finetune_loss = tuned.losses.last().copied();
        model = tuned.model;
    }

    optimizer.reset_calls();
    let t = Instant::now();
    let objective = SurrogateObjective { surrogate: &model, scenario: run.online, grid: &grid };
    let ascent = optimize_positions_multistart(&objective, &fs, &cfg.optimizer)?;
    let start = ascent.start.clone();
    times.positioning = t.elapsed().as_secs_f64();
    let position_loop_calls = optimizer.calls();

    let t = Instant::now();
    let batch = sample_multipath_channels(
        run.online,
        &ascent.positions,
        &grid,
        cfg.sampling.samples,
        decision_seed(seed),
    )?;
    let mut decision = optimizer.optimize(&batch)?;
    let mut positions = ascent.positions.clone();
    let broadside = Beamformer::uniform_choice(&optimizer.dict, fs.antennas, optimizer.dict.broadside())?;
    let (slid, slid_rate) = translate_fixed_pattern(cfg, run.online, &broadside, seed)?;
    // The patterns were fitted to the decision batch, so the two candidates
    // are compared on an independent one.
    let validate = |p: &[f64], g: &Beamformer| -> Result<f64> {
        let b = sample_multipath_channels(run.online, p, &grid, cfg.sampling.samples, validation_seed(seed))?;
        mean_sum_rate(&b, g, cfg.link.rho, cfg.link.sigma2)
    };
    let kept_sliding = validate(&slid, &broadside)? > validate(&positions, &decision.beamformer)?;
    if kept_sliding {
        positions = slid;
        decision = PatternDecision {
            choices: vec![optimizer.dict.broadside(); fs.antennas],
            beamformer: broadside,
            rate: slid_rate,
            relaxed: decision.relaxed,
            fell_back: true,
        };
    }
    times.final_solve = t.elapsed().as_secs_f64();
    let online_calls = optimizer.calls();
    let rate = evaluate(cfg, run.online, &positions, &decision.beamformer, seed)?;

    let report = TwoTimescaleReport {
        positions: positions.clone(),
        kept_sliding,
        start,
        choices: decision.choices.clone(),
        rate,
        decision_rate: decision.rate,
        surrogate_trace: ascent.trace.clone(),
        ascent_iterations: ascent.iterations,
        ascent_converged: ascent.converged,
        label_calls,
        position_loop_calls,
        online_calls,
        train_loss,
        finetune_loss,
        times,
    };
    Ok(TwoTimescaleOutcome {
        positions,
        beamformer: decision.beamformer.clone(),
        decision,
        report,
        surrogate: model,
    })
}

/// Full pipeline from a configuration: the EM map reflects the configured
/// statistics, and the array operates in the drifted statistics when a drift
/// block is present.
pub fn run_two_timescale(cfg: &ExperimentConfig, seed: u64) -> Result<TwoTimescaleOutcome> {
    cfg.validate()?;
    let pretrain = generate_scenario(&cfg.scenario, seed)?;
    let online = match cfg.drifted_scenario() {
        Some(sc) => generate_scenario(&sc?, seed)?,
        None => pretrain.clone(),
    };
    run_agent(
        cfg,
        AgentRun { pretrain: &pretrain, online: &online, fine_tune: cfg.sampling.finetune_rows > 0, pretrained: None },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_solved_projection() {
        let fs = FeasibleSet::new(10.0, 1.0, 2).unwrap();
        let p = project_feasible(&[5.0, 4.5], &fs).unwrap();
        assert!((p[0] - 4.25).abs() < 1e-15 && (p[1] - 5.25).abs() < 1e-15, "{p:?}");
    }

    #[test]
    fn feasible_points_are_fixed() {
        let fs = FeasibleSet::new(10.0, 0.5, 4).unwrap();
        let x = [0.0, 2.0, 2.5, 10.0];
        assert_eq!(project_feasible(&x, &fs).unwrap(), x.to_vec());
    }

    #[test]
    fn tight_rail_collapses_to_one_point() {
        let fs = FeasibleSet::new(3.0, 1.0, 4).unwrap();
        let p = project_feasible(&[7.0, -2.0, 1.0, 0.3], &fs).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pav_pools_violators() {
        assert_eq!(isotonic(&[3.0, 1.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn samples_cover_the_set() {
        let fs = FeasibleSet::new(10.0, 0.5, 4).unwrap();
        let pts = fs.sample(500, &mut rng::stream(1, Purpose::Positions, 0));
        assert!(pts.iter().all(|p| fs.contains(p, 1e-12)));
        let lo = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[3]).fold(0.0, f64::max);
        assert!(lo < 0.1 && hi > 9.9, "{lo} {hi}");
    }

    #[test]
    fn constant_objective_stops_at_start() {
        let fs = FeasibleSet::new(10.0, 0.5, 3).unwrap();
        let p0 = fs.centered();
        let r = optimize_positions(&|_: &[f64]| Ok(1.0), &fs, &p0, &AscentSettings::default()).unwrap();
        assert_eq!(r.positions, p0);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
    }

    #[test]
    fn boundary_gradient_is_one_sided() {
        let fs = FeasibleSet::new(10.0, 0.5, 2).unwrap();
        let f = |p: &[f64]| Ok(p[0] + 2.0 * p[1]);
        let g = position_gradient(&f, &[0.0, 10.0], &fs, 1e-3).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9, "{g:?}");
    }
}
