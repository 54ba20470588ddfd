//! Multipath and cluster-core channel synthesis, and the log-det sum rate.
//!
//! A channel matrix is `MN × K`: row `n·M + m` holds the contribution arriving
//! at antenna `n` from angular bin `m`. Every propagation path lands in
//! exactly one bin per antenna.

use std::f64::consts::{LN_2, TAU};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::beamform::Beamformer;
use crate::rng::{self, Purpose};
use crate::scenario::{azimuth, distance, Point3, Scenario};
use crate::{Error, Result, C64};

pub type ChannelMatrix = DMatrix<C64>;

/// Paths whose sampled scatterer lands closer than this to an endpoint are
/// redrawn.
pub const MIN_PATH_DISTANCE: f64 = 1e-3;

const MAX_REDRAWS: usize = 1000;

/// `M` uniform angular bins over `[0, 2π)`; bin `i` is centered at `2πi/M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngularGrid {
    bins: usize,
}

impl AngularGrid {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("angular grid needs at least one bin".into()));
        }
        Ok(AngularGrid { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> f64 {
        TAU / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        TAU * i as f64 / self.bins as f64
    }

    /// Nearest bin center modulo 2π. An angle exactly halfway between two
    /// centers goes to the one at the smaller angle.
    pub fn quantize(&self, theta: f64) -> usize {
        let t = theta.rem_euclid(TAU) / self.width();
        let i = (t - 0.5).ceil();
        (i as usize) % self.bins
    }
}

/// `α / (r_a r_u) · exp(−j 2π (r_a + r_u) / λ)`.
#[inline]
pub fn path_term(alpha: C64, antenna_distance: f64, user_distance: f64, wavelength: f64) -> C64 {
    let phase = -TAU / wavelength * (antenna_distance + user_distance);
    alpha * C64::from_polar(1.0 / (antenna_distance * user_distance), phase)
}

/// One drawn path of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRealization {
    /// Scatterer-to-antenna distance for every antenna.
    pub antenna_distances: Vec<f64>,
    /// User-to-scatterer distance.
    pub user_distance: f64,
    pub coefficient: C64,
    /// Angular bin of the path at every antenna.
    pub bins: Vec<usize>,
}

/// A batch of sampled channels at one position vector, plus its core channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBatch {
    pub samples: Vec<ChannelMatrix>,
    pub core: ChannelMatrix,
    pub positions: Vec<f64>,
    pub bins: usize,
    /// Number of redrawn degenerate paths.
    pub redraws: usize,
}

impl ChannelBatch {
    pub fn num_antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.core.ncols()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_positions(scenario: &Scenario, positions: &[f64]) -> Result<()> {
    if positions.len() != scenario.env.num_antennas {
        return Err(Error::Shape(format!(
            "{} positions for {} antennas",
            positions.len(),
            scenario.env.num_antennas
        )));
    }
    for &p in positions {
        scenario.check_rail(p)?;
    }
    Ok(())
}

fn realize(
    antennas: &[Point3],
    user: &Point3,
    antenna_side: Point3,
    user_side: Point3,
    coefficient: C64,
    grid: &AngularGrid,
) -> Option<PathRealization> {
    let user_distance = distance(user, &user_side);
    if user_distance < MIN_PATH_DISTANCE {
        return None;
    }
    let mut antenna_distances = Vec::with_capacity(antennas.len());
    let mut bins = Vec::with_capacity(antennas.len());
    for a in antennas {
        let r = distance(a, &antenna_side);
        if r < MIN_PATH_DISTANCE {
            return None;
        }
        antenna_distances.push(r);
        bins.push(grid.quantize(azimuth(a, &antenna_side)));
    }
    Some(PathRealization { antenna_distances, user_distance, coefficient, bins })
}

/// Draw one realization of every path of every user.
///
/// Each path perturbs the cluster core twice: once with per-axis standard
/// deviation ς to get the scatterer seen by the antennas, once with ι for the
/// scatterer seen by the user. Perturbations are planar (cores stay at rail
/// height). The draw order does not depend on the antenna positions, so the
/// same `(seed, index)` gives common random numbers across position vectors.
pub fn sample_paths(
    scenario: &Scenario,
    positions: &[f64],
    grid: &AngularGrid,
    seed: u64,
    index: u64,
) -> Result<(Vec<Vec<PathRealization>>, usize)> {
    check_positions(scenario, positions)?;
    let antennas: Vec<Point3> = positions.iter().map(|&p| scenario.env.antenna_point(p)).collect();
    let mut rng = rng::stream(seed, Purpose::Multipath, index);
    let mut redraws = 0;
    let mut out = Vec::with_capacity(scenario.num_users());
    for (k, user) in scenario.users.iter().enumerate() {
        let mut paths = Vec::with_capacity(scenario.geometry.total_paths(k));
        for cluster in scenario.geometry.user(k) {
            let [cx, cy, cz] = cluster.core;
            for &alpha in &cluster.coefficients {
                let mut attempt = 0;
                let path = loop {
                    let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    let a_side = [cx + cluster.antenna_spread * z[0], cy + cluster.antenna_spread * z[1], cz];
                    let u_side = [cx + cluster.user_spread * z[2], cy + cluster.user_spread * z[3], cz];
                    if let Some(p) = realize(&antennas, user, a_side, u_side, alpha, grid) {
                        break p;
                    }
                    attempt += 1;
                    redraws += 1;
                    if attempt >= MAX_REDRAWS {
                        return Err(Error::Numeric(format!(
                            "user {k}: could not draw a path with positive distances after {MAX_REDRAWS} attempts"
                        )));
                    }
                };
                paths.push(path);
            }
        }
        out.push(paths);
    }
    Ok((out, redraws))
}

/// Place realized paths into an `MN × K` channel matrix.
pub fn assemble(paths: &[Vec<PathRealization>], num_antennas: usize, grid: &AngularGrid, wavelength: f64) -> ChannelMatrix {
    let m = grid.bins();
    let mut h = ChannelMatrix::zeros(m * num_antennas, paths.len());
    for (k, user_paths) in paths.iter().enumerate() {
        for path in user_paths {
            for n in 0..num_antennas {
                h[(n * m + path.bins[n], k)] +=
                    path_term(path.coefficient, path.antenna_distances[n], path.user_distance, wavelength);
            }
        }
    }
    h
}

/// Paths placed at the cluster cores: every path of a cluster is evaluated at
/// the nominal distances and the core angle. The core coefficient is thus the
/// sum of the cluster's path coefficients, accumulated in the same order the
/// sampler uses, so zero-spread samples match this channel bit for bit.
pub fn core_paths(scenario: &Scenario, positions: &[f64], grid: &AngularGrid) -> Result<Vec<Vec<PathRealization>>> {
    check_positions(scenario, positions)?;
    let antennas: Vec<Point3> = positions.iter().map(|&p| scenario.env.antenna_point(p)).collect();
    let mut out = Vec::with_capacity(scenario.num_users());
    for (k, user) in scenario.users.iter().enumerate() {
        let mut paths = Vec::new();
        for cluster in scenario.geometry.user(k) {
            for &alpha in &cluster.coefficients {
                let p = realize(&antennas, user, cluster.core, cluster.core, alpha, grid).ok_or_else(|| {
                    Error::Numeric(format!("user {k}: cluster core coincides with an endpoint"))
                })?;
                paths.push(p);
            }
        }
        out.push(paths);
    }
    Ok(out)
}

pub fn cluster_core_channel(scenario: &Scenario, positions: &[f64], grid: &AngularGrid) -> Result<ChannelMatrix> {
    let paths = core_paths(scenario, positions, grid)?;
    Ok(assemble(&paths, positions.len(), grid, scenario.env.wavelength))
}

/// `count` multipath samples at `positions`. Sample `t` uses stream
/// `(seed, t)`, so the batch is identical however the samples are scheduled.
pub fn sample_multipath_channels(
    scenario: &Scenario,
    positions: &[f64],
    grid: &AngularGrid,
    count: usize,
    seed: u64,
) -> Result<ChannelBatch> {
    if count == 0 {
        return Err(Error::Config("need at least one channel sample".into()));
    }
    let core = cluster_core_channel(scenario, positions, grid)?;
    let mut samples = Vec::with_capacity(count);
    let mut redraws = 0;
    for t in 0..count {
        let (paths, r) = sample_paths(scenario, positions, grid, seed, t as u64)?;
        redraws += r;
        samples.push(assemble(&paths, positions.len(), grid, scenario.env.wavelength));
    }
    if redraws > 0 {
        log::warn!("redrew {redraws} degenerate paths while sampling {count} channels");
    }
    Ok(ChannelBatch { samples, core, positions: positions.to_vec(), bins: grid.bins(), redraws })
}

/// `G^H H`, an `N × K` matrix.
pub fn effective_channel(h: &ChannelMatrix, g: &Beamformer) -> Result<DMatrix<C64>> {
    let m = g.bins();
    let n_ant = g.num_antennas();
    if h.nrows() != m * n_ant {
        return Err(Error::Shape(format!(
            "channel has {} rows, beamformer expects {}",
            h.nrows(),
            m * n_ant
        )));
    }
    let mut a = DMatrix::<C64>::zeros(n_ant, h.ncols());
    for k in 0..h.ncols() {
        for n in 0..n_ant {
            let gain = g.block(n);
            let mut acc = C64::new(0.0, 0.0);
            for (i, &gm) in gain.iter().enumerate() {
                acc += h[(n * m + i, k)] * gm;
            }
            a[(n, k)] = acc;
        }
    }
    Ok(a)
}

/// `log2 det(A)` of a Hermitian positive-definite matrix via Cholesky.
pub fn log2_det_hpd(a: &DMatrix<C64>) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let mut s = 0.0;
    for i in 0..a.nrows() {
        s += l[(i, i)].re.ln();
    }
    Ok(2.0 * s / LN_2)
}

fn check_rate_inputs(rho: f64, sigma2: f64) -> Result<f64> {
    if !(rho > 0.0 && sigma2 > 0.0 && rho.is_finite() && sigma2.is_finite()) {
        return Err(Error::Config(format!("rho and sigma2 must be positive, got {rho} and {sigma2}")));
    }
    Ok(rho / sigma2)
}

fn check_finite(a: &DMatrix<C64>) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite channel or beamformer entry".into()))
    }
}

/// `log2 det(I_N + snr · A A^H)` with `A = G^H H`.
pub fn rate_antenna_form(a: &DMatrix<C64>, snr: f64) -> Result<f64> {
    let n = a.nrows();
    let m = DMatrix::<C64>::identity(n, n) + a * a.adjoint() * C64::new(snr, 0.0);
    log2_det_hpd(&m)
}

/// `log2 det(I_K + snr · A^H A)`; equal to the antenna form by Sylvester's
/// determinant identity.
pub fn rate_user_form(a: &DMatrix<C64>, snr: f64) -> Result<f64> {
    let k = a.ncols();
    let m = DMatrix::<C64>::identity(k, k) + a.adjoint() * a * C64::new(snr, 0.0);
    log2_det_hpd(&m)
}

/// Uplink sum rate `log2 det(I_N + ρ/σ² · G^H H H^H G)` in bits/s/Hz,
/// evaluated on the smaller of the two Gram matrices.
pub fn sum_rate(h: &ChannelMatrix, g: &Beamformer, rho: f64, sigma2: f64) -> Result<f64> {
    let snr = check_rate_inputs(rho, sigma2)?;
    check_finite(h)?;
    let a = effective_channel(h, g)?;
    check_finite(&a)?;
    let r = if a.nrows() <= a.ncols() { rate_antenna_form(&a, snr)? } else { rate_user_form(&a, snr)? };
    // log det of I + PSD is ≥ 0; clip roundoff.
    Ok(r.max(0.0))
}

/// Sample-average sum rate of a fixed beamformer over a batch.
pub fn mean_sum_rate(batch: &ChannelBatch, g: &Beamformer, rho: f64, sigma2: f64) -> Result<f64> {
    let mut s = 0.0;
    for h in &batch.samples {
        s += sum_rate(h, g, rho, sigma2)?;
    }
    Ok(s / batch.samples.len() as f64)
}

const BATCH_MAGIC: &str = "# flexcoupler channel batch v1";

/// Write a batch as text: three header comment lines, a column header
/// `sample,user,antenna,bin,real,imag`, then one row per nonzero entry. Core
/// channel rows carry `core` in the sample column. Floats are written in
/// shortest round-trip form.
pub fn write_batch<W: Write>(batch: &ChannelBatch, mut w: W) -> Result<()> {
    let m = batch.bins;
    writeln!(w, "{BATCH_MAGIC}")?;
    writeln!(
        w,
        "# bins={} antennas={} users={} samples={}",
        m,
        batch.num_antennas(),
        batch.num_users(),
        batch.samples.len()
    )?;
    let pos: Vec<String> = batch.positions.iter().map(|p| p.to_string()).collect();
    writeln!(w, "# positions={}", pos.join(","))?;
    writeln!(w, "sample,user,antenna,bin,real,imag")?;
    let mut emit = |label: &str, h: &ChannelMatrix| -> std::io::Result<()> {
        let mut line = String::new();
        for k in 0..h.ncols() {
            for r in 0..h.nrows() {
                let z = h[(r, k)];
                if z.re != 0.0 || z.im != 0.0 {
                    line.clear();
                    let _ = write!(line, "{label},{k},{},{},{},{}", r / m, r % m, z.re, z.im);
                    writeln!(w, "{line}")?;
                }
            }
        }
        Ok(())
    };
    for (t, h) in batch.samples.iter().enumerate() {
        emit(&t.to_string(), h)?;
    }
    emit("core", &batch.core)?;
    Ok(())
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Parse(format!("missing header field {key}")))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
}

pub fn read_batch<R: BufRead>(r: R) -> Result<ChannelBatch> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines.next().ok_or_else(|| Error::Parse("truncated batch file".into()))?.map_err(Error::from)
    };
    if next()?.trim() != BATCH_MAGIC {
        return Err(Error::Parse("not a channel batch file".into()));
    }
    let dims = next()?;
    let m: usize = parse(header_value(&dims, "bins")?, "bins")?;
    let n: usize = parse(header_value(&dims, "antennas")?, "antennas")?;
    let k: usize = parse(header_value(&dims, "users")?, "users")?;
    let z: usize = parse(header_value(&dims, "samples")?, "samples")?;
    let pos_line = next()?;
    let pos_str = header_value(&pos_line, "positions")?;
    let positions: Vec<f64> = pos_str.split(',').map(|s| parse(s, "position")).collect::<Result<_>>()?;
    if positions.len() != n {
        return Err(Error::Parse("position count does not match antennas".into()));
    }
    next()?;
    let mut samples = vec![ChannelMatrix::zeros(m * n, k); z];
    let mut core = ChannelMatrix::zeros(m * n, k);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("expected 6 columns: {line:?}")));
        }
        let user: usize = parse(f[1], "user")?;
        let ant: usize = parse(f[2], "antenna")?;
        let bin: usize = parse(f[3], "bin")?;
        if user >= k || ant >= n || bin >= m {
            return Err(Error::Parse(format!("index out of range: {line:?}")));
        }
        let val = C64::new(parse(f[4], "real")?, parse(f[5], "imag")?);
        let target = if f[0] == "core" {
            &mut core
        } else {
            let t: usize = parse(f[0], "sample")?;
            samples.get_mut(t).ok_or_else(|| Error::Parse(format!("sample {t} out of range")))?
        };
        target[(ant * m + bin, user)] = val;
    }
    Ok(ChannelBatch { samples, core, positions, bins: m, redraws: 0 })
}

/// Random draws for tests and examples that need a generic complex matrix.
pub fn random_complex_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    })
}
