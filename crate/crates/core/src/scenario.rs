//! Physical layout and the electromagnetic (EM) map.
//!
//! Coordinates are Cartesian meters. The rail lies along the x axis at
//! `y = 0`, height `z = rail_height`, spanning `0 ≤ x ≤ rail_length`. Users
//! stand on the ground plane (`z = 0`) in front of the rail (`y > 0`).
//! Scattering-cluster cores sit at rail height, so azimuths seen from the
//! rail are plain planar angles. Azimuth is measured counter-clockwise from
//! the +x axis; broadside (+y) is `π/2`.
//!
//! The EM map is "ideal": it stores every core position and derives distances
//! and angles exactly from geometry, so the two never disagree.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result, C64};

pub type Point3 = [f64; 3];

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    /// Rail length `X`.
    pub rail_length: f64,
    /// Rail height `d`.
    pub rail_height: f64,
    /// Horizontal extent `S_x` of the user region, centered on the rail midpoint.
    pub region_sx: f64,
    /// Depth `S_y` of the user region.
    pub region_sy: f64,
    /// Distance from the rail to the near edge of the user region.
    #[serde(default = "default_region_offset")]
    pub region_offset_y: f64,
    /// Minimum spacing between neighbouring antennas.
    pub min_spacing: f64,
    /// Exactly one of `wavelength` (m) or `carrier_frequency` (Hz).
    #[serde(default)]
    pub wavelength: Option<f64>,
    #[serde(default)]
    pub carrier_frequency: Option<f64>,
}

fn default_region_offset() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserLayout {
    /// Uniform over the `S_x × S_y` region.
    Region,
    /// Users on an arc of horizontal radius `distance` around the rail
    /// midpoint, equally spaced in azimuth over `span_deg` around `center_deg`.
    Arc {
        distance: f64,
        center_deg: f64,
        span_deg: f64,
    },
}

impl Default for UserLayout {
    fn default() -> Self {
        UserLayout::Region
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationBlock {
    pub antennas: usize,
    pub users: usize,
    pub clusters_per_user: usize,
    pub paths_per_cluster: usize,
    #[serde(default)]
    pub layout: UserLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsBlock {
    /// Nominal user-to-core distances are drawn from `[distance_min, distance_max]`.
    pub distance_min: f64,
    pub distance_max: f64,
    /// Per-axis scatterer spread on the antenna side (ς), meters.
    pub antenna_spread: f64,
    /// Per-axis scatterer spread on the user side (ι), meters.
    pub user_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub geometry: GeometryBlock,
    pub population: PopulationBlock,
    pub statistics: StatisticsBlock,
}

impl ScenarioConfig {
    /// Desk-scale defaults: 4 antennas on a 10 m rail, 3 users, 2 clusters of
    /// 2 paths each.
    pub fn desk() -> Self {
        ScenarioConfig {
            geometry: GeometryBlock {
                rail_length: 10.0,
                rail_height: 1.0,
                region_sx: 8.0,
                region_sy: 15.0,
                region_offset_y: default_region_offset(),
                min_spacing: 0.5,
                wavelength: None,
                carrier_frequency: Some(1e9),
            },
            population: PopulationBlock {
                antennas: 4,
                users: 3,
                clusters_per_user: 2,
                paths_per_cluster: 2,
                layout: UserLayout::Region,
            },
            statistics: StatisticsBlock {
                distance_min: 2.0,
                distance_max: 4.0,
                antenna_spread: 0.4,
                user_spread: 0.4,
            },
        }
    }

    /// The published simulation setup: 16 antennas, 10 users, 3×3 paths.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.geometry.rail_length = 20.0;
        cfg.geometry.carrier_frequency = Some(28e9);
        cfg.population.antennas = 16;
        cfg.population.users = 10;
        cfg.population.clusters_per_user = 3;
        cfg.population.paths_per_cluster = 3;
        cfg
    }

    pub fn wavelength(&self) -> Result<f64> {
        match (self.geometry.wavelength, self.geometry.carrier_frequency) {
            (Some(l), None) => Ok(l),
            (None, Some(f)) => {
                if f > 0.0 && f.is_finite() {
                    Ok(SPEED_OF_LIGHT / f)
                } else {
                    Err(Error::Config(format!("carrier_frequency must be positive, got {f}")))
                }
            }
            (Some(_), Some(_)) => Err(Error::Config(
                "give either wavelength or carrier_frequency, not both".into(),
            )),
            (None, None) => Err(Error::Config("wavelength or carrier_frequency is required".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let p = &self.population;
        let s = &self.statistics;
        let positive = [
            ("rail_length", g.rail_length),
            ("rail_height", g.rail_height),
            ("region_sx", g.region_sx),
            ("region_sy", g.region_sy),
            ("region_offset_y", g.region_offset_y),
            ("min_spacing", g.min_spacing),
            ("distance_min", s.distance_min),
            ("distance_max", s.distance_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("antenna_spread", s.antenna_spread), ("user_spread", s.user_spread)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let wl = self.wavelength()?;
        if !(wl > 0.0 && wl.is_finite()) {
            return Err(Error::Config(format!("wavelength must be positive, got {wl}")));
        }
        if p.antennas == 0 || p.users == 0 || p.clusters_per_user == 0 || p.paths_per_cluster == 0 {
            return Err(Error::Config("antenna, user, cluster and path counts must be ≥ 1".into()));
        }
        if s.distance_max < s.distance_min {
            return Err(Error::Config("distance_max < distance_min".into()));
        }
        if s.distance_min <= g.rail_height {
            return Err(Error::Config(format!(
                "distance_min ({}) must exceed rail_height ({}): cores sit at rail height above ground users",
                s.distance_min, g.rail_height
            )));
        }
        let needed = (p.antennas as f64 - 1.0) * g.min_spacing;
        if g.rail_length < needed {
            return Err(Error::Config(format!(
                "rail length {} cannot hold {} antennas at spacing {} (needs {needed})",
                g.rail_length, p.antennas, g.min_spacing
            )));
        }
        if let UserLayout::Arc { distance, .. } = p.layout {
            if !(distance > 0.0) {
                return Err(Error::Config("arc layout distance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Physical constants of one deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub rail_length: f64,
    pub rail_height: f64,
    pub region_sx: f64,
    pub region_sy: f64,
    pub region_offset_y: f64,
    pub wavelength: f64,
    pub min_spacing: f64,
    pub num_antennas: usize,
    pub num_users: usize,
}

impl Environment {
    /// 3D location of an antenna at rail coordinate `p`.
    pub fn antenna_point(&self, p: f64) -> Point3 {
        [p, 0.0, self.rail_height]
    }
}

/// One scattering cluster of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub core: Point3,
    /// ς: per-axis positional spread of antenna-side scatterers.
    pub antenna_spread: f64,
    /// ι: per-axis positional spread of user-side scatterers.
    pub user_spread: f64,
    /// Complex scattering coefficient of each path; its length is `L_{c,k}`.
    pub coefficients: Vec<C64>,
}

impl Cluster {
    pub fn path_count(&self) -> usize {
        self.coefficients.len()
    }
}

/// Cluster geometry indexed `[user][cluster]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGeometry {
    pub clusters: Vec<Vec<Cluster>>,
}

impl ClusterGeometry {
    pub fn user(&self, k: usize) -> &[Cluster] {
        &self.clusters[k]
    }

    /// Total path count `L_k` of user `k`.
    pub fn total_paths(&self, k: usize) -> usize {
        self.clusters[k].iter().map(Cluster::path_count).sum()
    }

    pub fn core_count(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }
}

/// Statistical CSI of one (user, cluster, antenna position) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatCsi {
    pub nominal_antenna_distance: f64,
    pub nominal_user_distance: f64,
    pub antenna_spread_var: f64,
    pub user_spread_var: f64,
    /// Azimuth of the core seen from the antenna, in `[0, 2π)`.
    pub core_angle: f64,
}

/// The EM map: environment, user locations and cluster geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub env: Environment,
    pub geometry: ClusterGeometry,
    pub users: Vec<Point3>,
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Planar azimuth of `to` seen from `from`, in `[0, 2π)`.
pub fn azimuth(from: &Point3, to: &Point3) -> f64 {
    let a = (to[1] - from[1]).atan2(to[0] - from[0]);
    let a = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if a >= TAU {
        0.0
    } else {
        a
    }
}

fn place_users<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<Point3> {
    let g = &cfg.geometry;
    let k_count = cfg.population.users;
    let mid = g.rail_length / 2.0;
    match &cfg.population.layout {
        UserLayout::Region => (0..k_count)
            .map(|_| {
                let x = mid - g.region_sx / 2.0 + rng.random::<f64>() * g.region_sx;
                let y = g.region_offset_y + rng.random::<f64>() * g.region_sy;
                [x, y, 0.0]
            })
            .collect(),
        UserLayout::Arc { distance, center_deg, span_deg } => (0..k_count)
            .map(|k| {
                let frac = if k_count == 1 { 0.5 } else { k as f64 / (k_count - 1) as f64 };
                let deg = center_deg - span_deg / 2.0 + span_deg * frac;
                let th = deg.to_radians();
                [mid + distance * th.cos(), distance * th.sin(), 0.0]
            })
            .collect(),
    }
}

/// Smallest y a cluster core may take; cores behind this line are mirrored
/// to the user's side.
const CORE_MIN_Y: f64 = 0.25;

/// Build a scenario. Deterministic in `(config, seed)`.
///
/// User `k`'s cores are drawn from their own stream, so changing the distance
/// range while keeping the seed moves every core radially and nothing else.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let g = &config.geometry;
    let pop = &config.population;
    let st = &config.statistics;
    let env = Environment {
        rail_length: g.rail_length,
        rail_height: g.rail_height,
        region_sx: g.region_sx,
        region_sy: g.region_sy,
        region_offset_y: g.region_offset_y,
        wavelength: config.wavelength()?,
        min_spacing: g.min_spacing,
        num_antennas: pop.antennas,
        num_users: pop.users,
    };

    let users = place_users(config, &mut rng::stream(seed, Purpose::Geometry, 0));

    let mut clusters = Vec::with_capacity(pop.users);
    for (k, user) in users.iter().enumerate() {
        let mut geo = rng::stream(seed, Purpose::Geometry, 1 + k as u64);
        let mut coef = rng::stream(seed, Purpose::Coefficients, k as u64);
        let mut row = Vec::with_capacity(pop.clusters_per_user);
        for _ in 0..pop.clusters_per_user {
            let u: f64 = geo.random();
            let phi = geo.random::<f64>() * TAU;
            let r = st.distance_min + u * (st.distance_max - st.distance_min);
            let horizontal = (r * r - g.rail_height * g.rail_height).sqrt();
            let x = user[0] + horizontal * phi.cos();
            let mut y = user[1] + horizontal * phi.sin();
            if y < CORE_MIN_Y {
                y = user[1] + horizontal * phi.sin().abs();
            }
            let coefficients = (0..pop.paths_per_cluster)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut coef);
                    let im: f64 = StandardNormal.sample(&mut coef);
                    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                })
                .collect();
            row.push(Cluster {
                core: [x, y, g.rail_height],
                antenna_spread: st.antenna_spread,
                user_spread: st.user_spread,
                coefficients,
            });
        }
        clusters.push(row);
    }

    Ok(Scenario { env, geometry: ClusterGeometry { clusters }, users })
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn check_rail(&self, p: f64) -> Result<()> {
        if !(p >= 0.0 && p <= self.env.rail_length) {
            return Err(Error::Domain(format!(
                "antenna position {p} outside rail [0, {}]",
                self.env.rail_length
            )));
        }
        Ok(())
    }

    /// Statistical CSI of every cluster of user `k` for an antenna at `p`.
    pub fn query_stat_csi(&self, k: usize, p: f64) -> Result<Vec<StatCsi>> {
        if k >= self.users.len() {
            return Err(Error::Domain(format!("user index {k} out of range ({} users)", self.users.len())));
        }
        self.check_rail(p)?;
        let ant = self.env.antenna_point(p);
        let user = &self.users[k];
        Ok(self.geometry.clusters[k]
            .iter()
            .map(|c| StatCsi {
                nominal_antenna_distance: distance(&ant, &c.core),
                nominal_user_distance: distance(user, &c.core),
                antenna_spread_var: c.antenna_spread * c.antenna_spread,
                user_spread_var: c.user_spread * c.user_spread,
                core_angle: azimuth(&ant, &c.core),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tiny() -> ScenarioConfig {
        let mut c = ScenarioConfig::desk();
        c.population.users = 1;
        c.population.clusters_per_user = 1;
        c.population.paths_per_cluster = 1;
        c.statistics.antenna_spread = 0.0;
        c.statistics.user_spread = 0.0;
        c
    }

    #[test]
    fn paper_scale_has_thirty_cores() {
        let s = generate_scenario(&ScenarioConfig::paper(), 3).unwrap();
        assert_eq!(s.geometry.core_count(), 30);
        for k in 0..10 {
            assert_eq!(s.geometry.total_paths(k), 9);
            for (c, core) in s.geometry.user(k).iter().enumerate() {
                let r = distance(&s.users[k], &core.core);
                assert!((2.0 - 1e-12..=4.0 + 1e-12).contains(&r), "user {k} cluster {c}: {r}");
                assert!(core.core[1] > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_single_path() {
        let s = generate_scenario(&tiny(), 11).unwrap();
        assert_eq!(s.geometry.core_count(), 1);
        assert_eq!(s.geometry.total_paths(0), 1);
        assert_eq!(s.geometry.user(0)[0].antenna_spread, 0.0);
    }

    #[test]
    fn same_seed_same_geometry() {
        let cfg = ScenarioConfig::desk();
        assert_eq!(generate_scenario(&cfg, 5).unwrap(), generate_scenario(&cfg, 5).unwrap());
        assert_ne!(generate_scenario(&cfg, 5).unwrap(), generate_scenario(&cfg, 6).unwrap());
    }

    #[test]
    fn infeasible_rail_is_rejected() {
        let mut cfg = ScenarioConfig::desk();
        cfg.geometry.rail_length = 1.0;
        cfg.geometry.min_spacing = 0.5;
        assert!(matches!(generate_scenario(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn broadside_core() {
        let mut s = generate_scenario(&tiny(), 1).unwrap();
        s.geometry.clusters[0][0].core = [3.0, 2.5, s.env.rail_height];
        let csi = s.query_stat_csi(0, 3.0).unwrap();
        assert!((csi[0].nominal_antenna_distance - 2.5).abs() < 1e-15);
        assert!((csi[0].core_angle - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn approaching_the_core_shortens_distance() {
        let s = generate_scenario(&ScenarioConfig::desk(), 9).unwrap();
        let core_x = s.geometry.user(0)[0].core[0].clamp(0.0, s.env.rail_length);
        let start = if core_x > 5.0 { 0.0 } else { s.env.rail_length };
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let p = start + (core_x - start) * i as f64 / 20.0;
            let d = s.query_stat_csi(0, p).unwrap()[0].nominal_antenna_distance;
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn out_of_rail_query_fails() {
        let s = generate_scenario(&ScenarioConfig::desk(), 0).unwrap();
        assert!(matches!(s.query_stat_csi(0, -0.1), Err(Error::Domain(_))));
        assert!(matches!(s.query_stat_csi(0, 10.1), Err(Error::Domain(_))));
        assert!(matches!(s.query_stat_csi(9, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn arc_layout_places_users_on_the_arc() {
        let mut cfg = ScenarioConfig::desk();
        cfg.population.layout = UserLayout::Arc { distance: 6.0, center_deg: 90.0, span_deg: 60.0 };
        let s = generate_scenario(&cfg, 0).unwrap();
        let mid = [5.0, 0.0, 0.0];
        for u in &s.users {
            assert!((distance(u, &mid) - 6.0).abs() < 1e-12);
        }
        assert!((azimuth(&mid, &s.users[0]) - 60f64.to_radians()).abs() < 1e-12);
        assert!((azimuth(&mid, &s.users[2]) - 120f64.to_radians()).abs() < 1e-12);
    }
}
