use flexcoupler::beamform::Beamformer;
use flexcoupler::channel::{cluster_core_channel, sample_multipath_channels, sum_rate, AngularGrid};
use flexcoupler::experiments::*;
use flexcoupler::posopt::FeasibleSet;
use flexcoupler::Error;

/// Desk preset cut down so every scheme finishes in well under a second.
fn quick() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.scenario.population.users = 2;
    c.scenario.population.antennas = 2;
    c.sampling.samples = 8;
    c.sampling.pretrain_rows = 120;
    c.sampling.finetune_rows = 20;
    c.sampling.evaluation_samples = 16;
    c.training.hidden = vec![8, 8, 4, 4];
    c.training.iterations = 100;
    c.training.finetune_iterations = 10;
    c.baseline = BaselineBlock { outer_iterations: 3, frames: 2 };
    c
}

fn outcome(rate: f64, calls: usize, seconds: f64) -> SchemeOutcome {
    SchemeOutcome { scheme: Scheme::FixedAntenna, seed: 0, rate, positions: vec![], choices: vec![], calls, seconds }
}

#[test]
fn aggregation_matches_hand_computation() {
    let rates = [3.0, 5.5, 4.25, 7.0];
    let outs: Vec<_> = rates.iter().enumerate().map(|(i, &r)| outcome(r, 2 * i, 0.5 * i as f64)).collect();
    let row = aggregate(2.5, Scheme::FixedAntenna, &outs);
    let mean = 19.75 / 4.0;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 3.0;
    assert!((row.mean_rate - mean).abs() <= 1e-12);
    assert!((row.std_rate - var.sqrt()).abs() <= 1e-12);
    assert_eq!(row.n_seeds, 4);
    assert!((row.calls - 3.0).abs() <= 1e-12);
    assert!((row.seconds - 0.75).abs() <= 1e-12);
    assert_eq!(row.rates, rates);
    let single = aggregate(0.0, Scheme::Flexible, &outs[..1]);
    assert_eq!((single.mean_rate, single.std_rate), (3.0, 0.0));
}

#[test]
fn csv_has_fixed_header_and_one_line_per_row() {
    let rows = vec![
        aggregate(1.0, Scheme::Flexible, &[outcome(2.0, 1, 0.1), outcome(4.0, 3, 0.3)]),
        aggregate(2.0, Scheme::NestedBaseline, &[outcome(1.5, 8, 1.0)]),
    ];
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sweep_var,scheme,mean_rate,std_rate,n_seeds,calls,seconds");
    assert_eq!(lines.len(), 3);
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f.len(), 7);
    assert_eq!((f[0], f[1], f[4]), ("1", "flexible", "2"));
    assert!((f[2].parse::<f64>().unwrap() - 3.0).abs() <= 1e-12);
    assert!((f[3].parse::<f64>().unwrap() - 2f64.sqrt()).abs() <= 1e-12);
    assert!(lines[2].starts_with("2,nested_baseline,1.5,0,1,8,"));
}

#[test]
fn scheme_names_round_trip() {
    for s in Scheme::ALL {
        assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
    }
    assert!("flexble".parse::<Scheme>().is_err());
}

#[test]
fn config_file_rejects_unknown_keys_and_bad_versions() {
    let text = quick().to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), quick());
    let nested_unknown = text.replacen("[link]\n", "[link]\ngain = 2.0\n", 1);
    assert!(matches!(ExperimentConfig::from_toml_str(&nested_unknown), Err(Error::Config(_))));
    assert!(ExperimentConfig::from_toml_str(&text.replacen("schema_version = 1\n", "", 1)).is_err());
    assert!(ExperimentConfig::from_toml_str(&text.replacen("schema_version = 1", "schema_version = 0", 1)).is_err());
    let mut c = quick();
    c.link.sigma2 = 0.0;
    assert!(c.validate().is_err());
    let mut c = quick();
    c.baseline.frames = 0;
    assert!(c.validate().is_err());
}

#[test]
fn arc_sweeps_need_arc_layout() {
    assert!(SweepVariable::UserAngle.apply(&quick(), 60.0).is_err());
    let c = SweepVariable::Rho.apply(&quick(), 7.0).unwrap();
    assert_eq!(c.link.rho, 7.0);
}

#[test]
fn fixed_antenna_uses_uniform_positions_and_broadside() {
    let cfg = quick();
    let out = run_scheme_as(&cfg, Scheme::FixedAntenna, 3).unwrap();
    let sc = cfg.online_scenario(3).unwrap();
    let fs = FeasibleSet::from_env(&sc.env).unwrap();
    assert_eq!(out.positions, fs.uniform());
    let dict = cfg.dictionary().unwrap();
    assert_eq!(out.choices, vec![dict.broadside(); 2]);
    assert_eq!(out.calls, 0);
    let g = Beamformer::uniform_choice(&dict, 2, dict.broadside()).unwrap();
    assert_eq!(out.rate, evaluate(&cfg, &sc, &out.positions, &g, 3).unwrap());
}

#[test]
fn evaluation_is_the_mean_of_per_sample_rates() {
    let cfg = quick();
    let sc = cfg.online_scenario(4).unwrap();
    let dict = cfg.dictionary().unwrap();
    let g = Beamformer::uniform_choice(&dict, 2, 1).unwrap();
    let p = [1.0, 6.0];
    let grid = AngularGrid::new(cfg.dictionary.bins).unwrap();
    let batch = sample_multipath_channels(&sc, &p, &grid, cfg.sampling.evaluation_samples, evaluation_seed(4)).unwrap();
    let by_hand = batch.samples.iter().map(|h| sum_rate(h, &g, cfg.link.rho, cfg.link.sigma2).unwrap()).sum::<f64>()
        / batch.len() as f64;
    assert!((evaluate(&cfg, &sc, &p, &g, 4).unwrap() - by_hand).abs() <= 1e-12 * by_hand);
}

#[test]
fn nested_baseline_with_one_outer_iteration_is_one_round_of_solves() {
    let mut cfg = quick();
    cfg.baseline = BaselineBlock { outer_iterations: 1, frames: 1 };
    let out = run_nested_baseline(&cfg, 2).unwrap();
    assert_eq!(out.calls, 1);
    let sc = cfg.online_scenario(2).unwrap();
    assert_eq!(out.positions, FeasibleSet::from_env(&sc.env).unwrap().uniform());
    cfg.baseline = BaselineBlock { outer_iterations: 3, frames: 2 };
    let out = run_nested_baseline(&cfg, 2).unwrap();
    assert_eq!(out.calls, 6);
    assert!(FeasibleSet::from_env(&sc.env).unwrap().contains(&out.positions, 1e-12));
}

#[test]
fn linear_oracle_picks_the_best_vertex() {
    let fs = FeasibleSet::new(10.0, 1.0, 3).unwrap();
    for g in [[1.0, -2.0, 0.5], [-1.0, -1.0, -1.0], [0.2, 0.3, 0.1], [-3.0, 1.0, 1.0]] {
        let s = position_linear_oracle(&g, &fs);
        assert!(fs.contains(&s, 1e-12));
        let value = |p: &[f64]| p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        // Vertices of the feasible set: a suffix of antennas pushed to the far end.
        let best = (0..=3)
            .map(|j| (0..3).map(|i| i as f64 + if i >= j { 8.0 } else { 0.0 }).collect::<Vec<_>>())
            .map(|v| value(&v))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((value(&s) - best).abs() <= 1e-12, "{g:?}");
    }
}

#[test]
fn every_scheme_gains_from_more_power() {
    let base = quick();
    for scheme in Scheme::ALL {
        let mut last = f64::NEG_INFINITY;
        for rho in [0.1, 1.0, 10.0] {
            let cfg = SweepVariable::Rho.apply(&base, rho).unwrap();
            let r = (0..2).map(|s| run_scheme_as(&cfg, scheme, s).unwrap().rate).sum::<f64>() / 2.0;
            assert!(r > last, "{scheme} at rho {rho}: {r} after {last}");
            last = r;
        }
    }
}

#[test]
fn sweep_rows_are_ordered_and_reproducible() {
    let mut cfg = quick();
    cfg.sweep = Some(SweepBlock {
        variable: SweepVariable::RegionSx,
        values: vec![5.0, 8.0],
        seeds: 2,
        schemes: vec![Scheme::TranslatableFixedPattern, Scheme::FixedAntenna],
    });
    let dir = tempfile::tempdir().unwrap();
    let (rows, path) = run_sweep_to(&cfg, dir.path()).unwrap();
    assert_eq!(path.file_name().unwrap(), "sweep_region_sx.csv");
    let order: Vec<(f64, Scheme)> = rows.iter().map(|r| (r.sweep_value, r.scheme)).collect();
    assert_eq!(
        order,
        vec![
            (5.0, Scheme::TranslatableFixedPattern),
            (5.0, Scheme::FixedAntenna),
            (8.0, Scheme::TranslatableFixedPattern),
            (8.0, Scheme::FixedAntenna),
        ]
    );
    for r in &rows {
        assert_eq!(r.n_seeds, 2);
        let expected: Vec<f64> = (0..2)
            .map(|k| run_scheme_as(&SweepVariable::RegionSx.apply(&cfg, r.sweep_value).unwrap(), r.scheme, k).unwrap().rate)
            .collect();
        assert_eq!(r.rates, expected);
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
}

#[test]
fn drift_changes_only_the_online_scenario() {
    let mut cfg = quick();
    assert_eq!(cfg.online_scenario(1).unwrap(), flexcoupler::scenario::generate_scenario(&cfg.scenario, 1).unwrap());
    cfg.drift = Some(DriftBlock { distance_min: 3.0, distance_max: 5.0 });
    let online = cfg.online_scenario(1).unwrap();
    let grid = AngularGrid::new(36).unwrap();
    let p = [2.0, 7.0];
    let a = cluster_core_channel(&online, &p, &grid).unwrap();
    let b = cluster_core_channel(&flexcoupler::scenario::generate_scenario(&cfg.scenario, 1).unwrap(), &p, &grid).unwrap();
    assert_ne!(a, b);
    cfg.drift = Some(DriftBlock { distance_min: 5.0, distance_max: 3.0 });
    assert!(cfg.validate().is_err());
}

#[test]
fn fixed_antenna_on_a_zero_channel_has_zero_rate() {
    let cfg = quick();
    let mut sc = cfg.online_scenario(5).unwrap();
    for user in &mut sc.geometry.clusters {
        for cl in user {
            cl.coefficients.iter_mut().for_each(|a| *a = flexcoupler::C64::new(0.0, 0.0));
        }
    }
    let dict = cfg.dictionary().unwrap();
    let g = Beamformer::uniform_choice(&dict, 2, dict.broadside()).unwrap();
    let p = FeasibleSet::from_env(&sc.env).unwrap().uniform();
    assert_eq!(evaluate(&cfg, &sc, &p, &g, 5).unwrap(), 0.0);
}
