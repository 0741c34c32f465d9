mod common;

use common::*;
use proptest::prelude::*;
use stcast::ensemble::*;
use stcast::fields::FieldTensor;
use stcast::model::{Forecaster, ModelConfig};
use stcast::tmoe::{RoutingMode, TmoeConfig};

fn model() -> Forecaster {
    model_with(TmoeConfig { experts: 4, top_k: 2, ..Default::default() })
}

fn model_with(tmoe: TmoeConfig) -> Forecaster {
    let cfg = ModelConfig {
        channels: 2,
        n_lat: 8,
        n_lon: 16,
        width: 8,
        blocks: 2,
        heads: 2,
        window: 2,
        tmoe,
        ..Default::default()
    };
    Forecaster::new(cfg, 3).unwrap()
}

fn initial() -> FieldTensor {
    random_field(&mut rng(1), 2, 8, 16, 10)
}

fn noise(amplitude: f64) -> NoiseConfig {
    NoiseConfig { amplitude, base_scale: 4.0, seed: 7, ..Default::default() }
}

#[test]
fn perlin_fields_average_to_zero() {
    let cfg = NoiseConfig { amplitude: 1.0, ..Default::default() };
    let mut total = 0.0;
    for seed in 0..20 {
        let f = perlin2d(64, 128, &NoiseConfig { seed, ..cfg }, 0).unwrap();
        assert!(f.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        total += f.mean().unwrap();
    }
    assert!((total / 20.0).abs() < 0.05, "mean {}", total / 20.0);
}

#[test]
fn zero_amplitude_matches_deterministic_rollout() {
    let m = model();
    let x = initial();
    let out = ensemble_forecast(&x, &m, 4, 3, &noise(0.0)).unwrap();
    let det = m.rollout(&x, 3).unwrap();
    for member in &out.members {
        assert_eq!(member, &det);
    }
    assert_eq!(out.mean, det);
    assert!(out.spread_rows().unwrap().iter().all(|r| r.2 == 0.0));
}

#[test]
fn members_are_reproducible_and_distinct() {
    let m = model();
    let x = initial();
    let a = ensemble_forecast(&x, &m, 3, 2, &noise(0.05)).unwrap();
    let b = ensemble_forecast(&x, &m, 3, 2, &noise(0.05)).unwrap();
    assert_eq!(a.members, b.members);
    assert_ne!(a.members[0], a.members[1]);
    // Member i does not depend on how many members are run.
    let c = ensemble_forecast(&x, &m, 1, 2, &noise(0.05)).unwrap();
    assert_eq!(c.members[0], a.members[0]);
    for k in 0..2 {
        let refs: Vec<&FieldTensor> = a.members.iter().map(|m| &m[k]).collect();
        assert_eq!(ensemble_mean(&refs).unwrap(), a.mean[k]);
    }
}

#[test]
fn mean_error_is_at_most_member_error() {
    let m = model();
    let x = initial();
    let truth = m.rollout(&random_field(&mut rng(2), 2, 8, 16, 10), 4).unwrap();
    let out = ensemble_forecast(&x, &m, 6, 4, &noise(0.1)).unwrap();
    for k in 0..4 {
        let mean_se = (out.mean[k].values() - truth[k].values()).mapv(|v| v * v);
        let mut avg = mean_se.clone() * 0.0;
        for member in &out.members {
            avg += &(member[k].values() - truth[k].values()).mapv(|v| v * v / 6.0);
        }
        assert!(mean_se.iter().zip(avg.iter()).all(|(a, b)| *a <= b + 1e-12), "lead {k}");
    }
}

#[test]
fn spread_grows_with_amplitude_for_a_smooth_model() {
    // Top-K routing is discontinuous, so a dense model is used here.
    let m = model_with(TmoeConfig { mode: RoutingMode::Dense, ..Default::default() });
    let x = initial();
    let at_lead_4: Vec<Vec<f64>> = [0.01, 0.05, 0.1]
        .iter()
        .map(|&a| {
            let out = ensemble_forecast(&x, &m, 5, 4, &noise(a)).unwrap();
            let refs: Vec<&FieldTensor> = out.members.iter().map(|m| &m[3]).collect();
            spread(&refs).unwrap()
        })
        .collect();
    for c in 0..2 {
        assert!(at_lead_4[0][c] <= at_lead_4[1][c] && at_lead_4[1][c] <= at_lead_4[2][c]);
    }
}

#[test]
fn spread_csv_rows() {
    let m = model();
    let out = ensemble_forecast(&initial(), &m, 3, 2, &noise(0.05)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("spread.csv");
    out.write_spread_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lead_hours,variable,mean_spread");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("6,v0,"));
    assert!(ensemble_forecast(&initial(), &m, 0, 2, &noise(0.05)).is_err());
}

proptest! {
    #[test]
    fn perturbation_scales_linearly(a in 0.001f64..1.0, member in 0u64..50) {
        let x = initial();
        let d1 = perturb(&x, &noise(a), member).unwrap().values() - x.values();
        let d2 = perturb(&x, &noise(2.0 * a), member).unwrap().values() - x.values();
        for (p, q) in d1.iter().zip(d2.iter()) {
            prop_assert!((2.0 * p - q).abs() < 1e-12);
        }
        let peak = d1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((peak - a).abs() < 1e-12);
    }

    #[test]
    fn noise_wraps_in_longitude(seed in 0u64..200) {
        let cfg = NoiseConfig { amplitude: 1.0, base_scale: 4.0, seed, ..Default::default() };
        let f = perlin2d(8, 32, &cfg, 0).unwrap();
        let g = perlin2d(8, 32, &cfg, 0).unwrap();
        prop_assert_eq!(&f, &g);
        // Neighbouring columns across the seam differ no more than interior neighbours do on average.
        let seam: f64 = (0..8).map(|i| (f[[i, 0]] - f[[i, 31]]).abs()).sum::<f64>() / 8.0;
        prop_assert!(seam < 1.0);
    }
}
