//! Experiment configuration, comparison schemes and parameter sweeps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{build_dictionary, Beamformer, FwSettings, PatternDictionary, PatternOptimizer};
use crate::channel::{cluster_core_channel, mean_sum_rate, sample_multipath_channels, sum_rate, AngularGrid};
use crate::posopt::{
    position_gradient, run_two_timescale, translate_fixed_pattern, AscentSettings, FeasibleSet,
};
use crate::rng;
use crate::scenario::{generate_scenario, Scenario, ScenarioConfig, UserLayout};
use crate::surrogate::TrainConfig;
use crate::{Error, Result};

/// Version of the configuration schema this build reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Flexible,
    FixedAntenna,
    TranslatableFixedPattern,
    RotatableFixedPattern,
    NestedBaseline,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Flexible,
        Scheme::FixedAntenna,
        Scheme::TranslatableFixedPattern,
        Scheme::RotatableFixedPattern,
        Scheme::NestedBaseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Flexible => "flexible",
            Scheme::FixedAntenna => "fixed_antenna",
            Scheme::TranslatableFixedPattern => "translatable_fixed_pattern",
            Scheme::RotatableFixedPattern => "rotatable_fixed_pattern",
            Scheme::NestedBaseline => "nested_baseline",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryBlock {
    /// Angular bins `M`.
    pub bins: usize,
    /// Dictionary size `U`.
    pub patterns: usize,
    /// Half-power beamwidth of each pattern, degrees.
    pub beamwidth_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBlock {
    /// Per-user transmit power ρ.
    pub rho: f64,
    /// Noise power σ².
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    /// Multipath samples per pattern decision, `Z_s`.
    pub samples: usize,
    /// Pretraining rows `N_s`.
    pub pretrain_rows: usize,
    /// Online fine-tuning rows `N_w`; zero disables fine-tuning.
    pub finetune_rows: usize,
    /// Held-out samples used to score every scheme.
    pub evaluation_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineBlock {
    /// Outer position iterations `I`.
    pub outer_iterations: usize,
    /// Pattern solves per outer iteration `T_H`.
    pub frames: usize,
}

/// Online statistics differ from the EM map: nominal cluster distances are
/// redrawn from this range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftBlock {
    pub distance_min: f64,
    pub distance_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Rho,
    RegionSx,
    RegionSy,
    /// Azimuth of the arc center, degrees (arc layout).
    UserAngle,
    /// Angular span of the arc, degrees (arc layout).
    CoverageAngle,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::Rho => "rho",
            SweepVariable::RegionSx => "region_sx",
            SweepVariable::RegionSy => "region_sy",
            SweepVariable::UserAngle => "user_angle",
            SweepVariable::CoverageAngle => "coverage_angle",
        }
    }

    /// Copy of `cfg` with this variable set to `value`.
    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepVariable::Rho => c.link.rho = value,
            SweepVariable::RegionSx => c.scenario.geometry.region_sx = value,
            SweepVariable::RegionSy => c.scenario.geometry.region_sy = value,
            SweepVariable::UserAngle | SweepVariable::CoverageAngle => match &mut c.scenario.population.layout {
                UserLayout::Arc { center_deg, span_deg, .. } => {
                    if *self == SweepVariable::UserAngle {
                        *center_deg = value;
                    } else {
                        *span_deg = value;
                    }
                }
                UserLayout::Region => {
                    return Err(Error::Config(format!("sweeping {} needs the arc user layout", self.name())))
                }
            },
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// Seeds per grid point; seed `i` is `config.seed + i`.
    pub seeds: usize,
    pub schemes: Vec<Scheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub scenario: ScenarioConfig,
    pub dictionary: DictionaryBlock,
    pub link: LinkBlock,
    pub sampling: SamplingBlock,
    pub training: TrainConfig,
    #[serde(default)]
    pub optimizer: AscentSettings,
    #[serde(default = "default_solver")]
    pub solver: FwSettings,
    pub baseline: BaselineBlock,
    #[serde(default)]
    pub drift: Option<DriftBlock>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
}

fn default_scheme() -> Scheme {
    Scheme::Flexible
}

fn default_solver() -> FwSettings {
    FwSettings { max_iters: 200, tol: 1e-3, ..FwSettings::default() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale {s:?}"))),
        }
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            scheme: Scheme::Flexible,
            scenario: ScenarioConfig::desk(),
            dictionary: DictionaryBlock { bins: 36, patterns: 6, beamwidth_deg: 40.0 },
            link: LinkBlock { rho: 1.0, sigma2: 1e-4 },
            sampling: SamplingBlock { samples: 32, pretrain_rows: 2000, finetune_rows: 200, evaluation_samples: 64 },
            training: TrainConfig::desk(),
            optimizer: AscentSettings::default(),
            solver: default_solver(),
            baseline: BaselineBlock { outer_iterations: 50, frames: 10 },
            drift: None,
            sweep: None,
        }
    }

    /// The published setup. Long-running.
    pub fn paper() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::paper(),
            dictionary: DictionaryBlock { bins: 360, patterns: 14, beamwidth_deg: 360.0 / 14.0 },
            training: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario.validate()?;
        let d = &self.dictionary;
        if d.patterns == 0 || d.patterns > d.bins {
            return Err(Error::Config(format!("need 1 ≤ patterns ≤ bins, got {} and {}", d.patterns, d.bins)));
        }
        if !(d.beamwidth_deg > 0.0) {
            return Err(Error::Config("beamwidth must be positive".into()));
        }
        if !(self.link.rho > 0.0 && self.link.sigma2 > 0.0) {
            return Err(Error::Config("rho and sigma2 must be positive".into()));
        }
        let s = &self.sampling;
        if s.samples == 0 || s.pretrain_rows == 0 || s.evaluation_samples == 0 {
            return Err(Error::Config("sample and row counts must be positive".into()));
        }
        self.training.validate()?;
        let o = &self.optimizer;
        if !(o.step > 0.0 && o.tol > 0.0 && o.fd_step > 0.0) {
            return Err(Error::Config("optimizer step, tolerance and fd_step must be positive".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.baseline.outer_iterations == 0 || self.baseline.frames == 0 {
            return Err(Error::Config("baseline budgets must be positive".into()));
        }
        if let Some(dr) = &self.drift {
            if !(dr.distance_max >= dr.distance_min) {
                return Err(Error::Config("drift range is reversed".into()));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() || sw.seeds == 0 || sw.schemes.is_empty() {
                return Err(Error::Config("sweep needs values, seeds and schemes".into()));
            }
        }
        Ok(())
    }

    pub fn dictionary(&self) -> Result<PatternDictionary> {
        build_dictionary(self.dictionary.bins, self.dictionary.patterns, self.dictionary.beamwidth_deg.to_radians())
    }

    pub fn pattern_optimizer(&self) -> Result<PatternOptimizer> {
        Ok(PatternOptimizer::new(self.dictionary()?, self.link.rho, self.link.sigma2, self.solver))
    }

    /// Scenario configuration after drift, if a drift block is present.
    pub fn drifted_scenario(&self) -> Option<Result<ScenarioConfig>> {
        self.drift.map(|d| {
            let mut sc = self.scenario.clone();
            sc.statistics.distance_min = d.distance_min;
            sc.statistics.distance_max = d.distance_max;
            sc.validate().map(|_| sc)
        })
    }

    /// The scenario the array operates in.
    pub fn online_scenario(&self, seed: u64) -> Result<Scenario> {
        match self.drifted_scenario() {
            Some(sc) => generate_scenario(&sc?, seed),
            None => generate_scenario(&self.scenario, seed),
        }
    }
}

/// Seed of the batch a scheme's final pattern decision is made on.
pub fn decision_seed(seed: u64) -> u64 {
    rng::derive(seed, 5)
}

/// Seed of the batch the agent uses to choose between candidate decisions.
pub fn validation_seed(seed: u64) -> u64 {
    rng::derive(seed, 8)
}

/// Seed of the held-out batch every scheme is scored on.
pub fn evaluation_seed(seed: u64) -> u64 {
    rng::derive(seed, 7)
}

/// Ergodic sum rate of `(positions, g)` on the held-out batch of `seed`.
pub fn evaluate(cfg: &ExperimentConfig, scenario: &Scenario, positions: &[f64], g: &Beamformer, seed: u64) -> Result<f64> {
    let grid = AngularGrid::new(cfg.dictionary.bins)?;
    let batch =
        sample_multipath_channels(scenario, positions, &grid, cfg.sampling.evaluation_samples, evaluation_seed(seed))?;
    mean_sum_rate(&batch, g, cfg.link.rho, cfg.link.sigma2)
}

/// Result of running one scheme on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOutcome {
    pub scheme: Scheme,
    pub seed: u64,
    pub rate: f64,
    pub positions: Vec<f64>,
    pub choices: Vec<usize>,
    /// Relaxed pattern solves performed online.
    pub calls: usize,
    /// Online wall-clock seconds.
    pub seconds: f64,
}

pub fn run_scheme(cfg: &ExperimentConfig, seed: u64) -> Result<SchemeOutcome> {
    run_scheme_as(cfg, cfg.scheme, seed)
}

pub fn run_scheme_as(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<SchemeOutcome> {
    cfg.validate()?;
    match scheme {
        Scheme::Flexible => {
            let out = run_two_timescale(cfg, seed)?;
            Ok(SchemeOutcome {
                scheme,
                seed,
                rate: out.report.rate,
                positions: out.positions,
                choices: out.decision.choices,
                calls: out.report.online_calls,
                seconds: out.report.times.online(),
            })
        }
        Scheme::NestedBaseline => run_nested_baseline(cfg, seed),
        Scheme::FixedAntenna | Scheme::TranslatableFixedPattern | Scheme::RotatableFixedPattern => {
            let t = Instant::now();
            let scenario = cfg.online_scenario(seed)?;
            let dict = cfg.dictionary()?;
            let grid = AngularGrid::new(cfg.dictionary.bins)?;
            let fs = FeasibleSet::from_env(&scenario.env)?;
            let n = fs.antennas;
            let broadside = Beamformer::uniform_choice(&dict, n, dict.broadside())?;
            let (positions, choice) = match scheme {
                Scheme::FixedAntenna => (fs.uniform(), dict.broadside()),
                Scheme::TranslatableFixedPattern => {
                    (translate_fixed_pattern(cfg, &scenario, &broadside, seed)?.0, dict.broadside())
                }
                _ => {
                    let p = fs.uniform();
                    let batch = sample_multipath_channels(&scenario, &p, &grid, cfg.sampling.samples, decision_seed(seed))?;
                    let mut best = (dict.broadside(), f64::NEG_INFINITY);
                    for u in 0..dict.len() {
                        let g = Beamformer::uniform_choice(&dict, n, u)?;
                        let r = mean_sum_rate(&batch, &g, cfg.link.rho, cfg.link.sigma2)?;
                        if r > best.1 {
                            best = (u, r);
                        }
                    }
                    (p, best.0)
                }
            };
            let g = Beamformer::uniform_choice(&dict, n, choice)?;
            let rate = evaluate(cfg, &scenario, &positions, &g, seed)?;
            Ok(SchemeOutcome {
                scheme,
                seed,
                rate,
                positions,
                choices: vec![choice; n],
                calls: 0,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Linear maximization over `T`: the vertices of the shifted monotone box are
/// `X'·1{n ≥ j}`, so the best one starts at the largest suffix sum of `g`.
pub fn position_linear_oracle(g: &[f64], fs: &FeasibleSet) -> Vec<f64> {
    let n = g.len();
    let mut best_j = n;
    let mut best = 0.0;
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        suffix += g[j];
        if suffix > best {
            best = suffix;
            best_j = j;
        }
    }
    let slack = fs.slack();
    (0..n).map(|i| if i >= best_j { slack } else { 0.0 } + i as f64 * fs.min_spacing).collect()
}

/// Conventional nested two-timescale optimization: every outer conditional
/// gradient step on the positions re-solves the pattern problem on `T_H`
/// fresh sample batches, then moves along the averaged core-channel rate
/// gradient of those decisions with step `2/(t+2)`.
pub fn run_nested_baseline(cfg: &ExperimentConfig, seed: u64) -> Result<SchemeOutcome> {
    let t0 = Instant::now();
    let scenario = cfg.online_scenario(seed)?;
    let grid = AngularGrid::new(cfg.dictionary.bins)?;
    let optimizer = cfg.pattern_optimizer()?;
    let fs = FeasibleSet::from_env(&scenario.env)?;
    let budget = cfg.baseline;
    let mut p = fs.uniform();
    let mut last = None;
    for t in 0..budget.outer_iterations {
        let mut decisions = Vec::with_capacity(budget.frames);
        for h in 0..budget.frames {
            let frame_seed = rng::derive(rng::derive(seed, 11), (t * budget.frames + h) as u64);
            let batch = sample_multipath_channels(&scenario, &p, &grid, cfg.sampling.samples, frame_seed)?;
            decisions.push(optimizer.optimize(&batch)?);
        }
        if t + 1 < budget.outer_iterations {
            let objective = |q: &[f64]| -> Result<f64> {
                let core = cluster_core_channel(&scenario, q, &grid)?;
                let mut s = 0.0;
                for d in &decisions {
                    s += sum_rate(&core, &d.beamformer, cfg.link.rho, cfg.link.sigma2)?;
                }
                Ok(s / decisions.len() as f64)
            };
            let g = position_gradient(&objective, &p, &fs, cfg.optimizer.fd_step)?;
            let s = position_linear_oracle(&g, &fs);
            let gamma = 2.0 / (t as f64 + 2.0);
            let next: Vec<f64> = p.iter().zip(&s).map(|(a, b)| a + gamma * (b - a)).collect();
            // Convex combinations stay in T; re-projecting only removes rounding.
            p = crate::posopt::project_feasible(&next, &fs)?;
        }
        last = decisions.into_iter().max_by(|a, b| a.rate.total_cmp(&b.rate));
    }
    let decision = last.expect("at least one outer iteration");
    let rate = evaluate(cfg, &scenario, &p, &decision.beamformer, seed)?;
    Ok(SchemeOutcome {
        scheme: Scheme::NestedBaseline,
        seed,
        rate,
        positions: p,
        choices: decision.choices,
        calls: optimizer.calls(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Aggregate of one scheme at one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub scheme: Scheme,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub n_seeds: usize,
    pub calls: f64,
    pub seconds: f64,
    /// Per-seed rates in seed order.
    pub rates: Vec<f64>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn aggregate(sweep_value: f64, scheme: Scheme, outcomes: &[SchemeOutcome]) -> ResultRow {
    let rates: Vec<f64> = outcomes.iter().map(|o| o.rate).collect();
    let (mean_rate, std_rate) = mean_std(&rates);
    let n = outcomes.len().max(1) as f64;
    ResultRow {
        sweep_value,
        scheme,
        mean_rate,
        std_rate,
        n_seeds: outcomes.len(),
        calls: outcomes.iter().map(|o| o.calls as f64).sum::<f64>() / n,
        seconds: outcomes.iter().map(|o| o.seconds).sum::<f64>() / n,
        rates,
    }
}

pub const CSV_HEADER: &str = "sweep_var,scheme,mean_rate,std_rate,n_seeds,calls,seconds";

pub fn write_csv<W: Write>(rows: &[ResultRow], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.sweep_value, r.scheme, r.mean_rate, r.std_rate, r.n_seeds, r.calls, r.seconds
        )?;
    }
    Ok(())
}

/// Run every `(value, scheme, seed)` job of the sweep block. Rows come out
/// ordered by value, then scheme as listed; failed jobs are logged and left
/// out of their row.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config("configuration has no sweep block".into()))?;
    let configs = sweep.values.iter().map(|&v| sweep.variable.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize, u64)> = (0..configs.len())
        .flat_map(|i| {
            (0..sweep.schemes.len()).flat_map(move |s| (0..sweep.seeds).map(move |k| (i, s, k as u64)))
        })
        .collect();
    let results: Vec<Result<SchemeOutcome>> = jobs
        .par_iter()
        .map(|&(i, s, k)| run_scheme_as(&configs[i], sweep.schemes[s], cfg.seed + k))
        .collect();
    let mut rows = Vec::new();
    let mut it = jobs.iter().zip(results);
    for (i, &value) in sweep.values.iter().enumerate() {
        for (s, &scheme) in sweep.schemes.iter().enumerate() {
            let mut ok = Vec::new();
            for _ in 0..sweep.seeds {
                let (&(ji, js, k), r) = it.next().expect("one result per job");
                debug_assert!(ji == i && js == s);
                match r {
                    Ok(o) => ok.push(o),
                    Err(e) => log::warn!("{} = {value}, {scheme}, seed {}: {e}", sweep.variable.name(), cfg.seed + k),
                }
            }
            rows.push(aggregate(value, scheme, &ok));
        }
    }
    Ok(rows)
}

/// Run the sweep and write `sweep_<variable>.csv` into `dir`.
pub fn run_sweep_to(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<ResultRow>, std::path::PathBuf)> {
    let rows = run_sweep(cfg)?;
    let name = cfg.sweep.as_ref().map(|s| s.variable.name()).unwrap_or("sweep");
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("sweep_{name}.csv"));
    write_csv(&rows, std::fs::File::create(&path)?)?;
    Ok((rows, path))
}
