mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use stcast::fields::{FieldTensor, GridSpec};
use stcast::metrics::*;

fn fixed_fields() -> (Array2<f64>, Array2<f64>) {
    let p = Array2::from_shape_fn((4, 8), |(i, j)| ((i + j) as f64).sin());
    let t = Array2::from_shape_fn((4, 8), |(i, j)| ((i * j) as f64 * 0.3).cos() + 0.2 * i as f64);
    (p, t)
}

// Reference values computed with an independent script.
#[test]
fn frozen_reference_values() {
    let g = GridSpec::global(4, 8).unwrap();
    let (p, t) = fixed_fields();
    let rmse = rmse_weighted(p.view(), t.view(), &g).unwrap();
    assert!((rmse - 1.102_877_031_641_101_2).abs() < 1e-12);
    let acc = acc_weighted(p.view(), t.view(), &g, None, AccMode::Centered).unwrap();
    assert!((acc - -0.100_370_871_905_218_55).abs() < 1e-12);
    let lit = acc_weighted(p.view(), t.view(), &g, None, AccMode::Literal).unwrap();
    assert!((lit - 0.032_586_876_469_110_64).abs() < 1e-12);
    assert!((haversine((51.5, -0.13), (40.71, -74.01)).unwrap() - 5_570.794_265_822_577_5).abs() < 1e-6);
    assert!((haversine((-33.87, 151.21), (35.68, 139.69)).unwrap() - 7_825.744_794_786_275).abs() < 1e-6);
    let m = mde(&[(10.0, 130.0), (12.0, 128.0), (15.0, 125.0)], &[(10.5, 129.0), (13.0, 127.5), (15.0, 126.0)]).unwrap();
    assert!((m - 117.958_735_536_986_95).abs() < 1e-6);
}

fn naive_weights(lats: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = lats.iter().map(|l| (l * std::f64::consts::PI / 180.0).cos()).collect();
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    c.iter().map(|v| v / mean).collect()
}

#[test]
fn random_instances_match_naive_formulas() {
    let mut r = rng(17);
    for n in 0..100 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..20));
        let g = GridSpec::global(h, w).unwrap();
        let l = naive_weights(g.lats());
        let p = Array2::from_shape_fn((h, w), |_| r.random_range(-3.0f64..3.0));
        let t = Array2::from_shape_fn((h, w), |_| r.random_range(-3.0f64..3.0));
        let clim = Array2::from_shape_fn((h, w), |_| r.random_range(-1.0f64..1.0));
        let mut se = 0.0f64;
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..h {
            for j in 0..w {
                se += l[i] * (p[[i, j]] - t[[i, j]]).powi(2);
                let (pa, ta) = (p[[i, j]] - clim[[i, j]], t[[i, j]] - clim[[i, j]]);
                a += l[i] * pa * ta;
                b += l[i] * pa * pa;
                c += l[i] * ta * ta;
            }
        }
        let rmse = rmse_weighted(p.view(), t.view(), &g).unwrap();
        assert!((rmse - (se / (h * w) as f64).sqrt()).abs() < 1e-12, "instance {n}");
        let acc = acc_weighted(p.view(), t.view(), &g, Some(clim.view()), AccMode::Centered).unwrap();
        assert!((acc - a / (b * c).sqrt()).abs() < 1e-12, "instance {n}");
        let pos = p.mapv(f64::abs);
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for ((i, j), &x) in pos.indexed_iter() {
            let y = t[[i, j]].abs();
            a += l[i] * x * y;
            b += l[i] * x * x;
            c += l[i] * y * y;
        }
        let lit = acc_weighted(pos.view(), t.mapv(f64::abs).view(), &g, None, AccMode::Literal).unwrap();
        assert!((lit - (a / (b * c)).sqrt()).abs() < 1e-12, "instance {n}");
    }
}

fn naive_haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = |d: f64| d * std::f64::consts::PI / 180.0;
    let h = (r(b.0 - a.0) / 2.0).sin().powi(2) + r(a.0).cos() * r(b.0).cos() * (r(b.1 - a.1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().min(1.0).asin()
}

#[test]
fn random_tracks_match_naive_geodesics() {
    let mut r = rng(23);
    for n in 0..100 {
        let len = r.random_range(1..8);
        let mut pt = || (r.random_range(-89.0f64..89.0), r.random_range(0.0f64..360.0));
        let p: Vec<_> = (0..len).map(|_| pt()).collect();
        let o: Vec<_> = (0..len).map(|_| pt()).collect();
        let d = haversine(p[0], o[0]).unwrap();
        assert!((d - naive_haversine(p[0], o[0])).abs() < 1e-9, "instance {n}");
        let want = p.iter().zip(&o).map(|(a, b)| naive_haversine(*a, *b)).sum::<f64>() / len as f64;
        assert!((mde(&p, &o).unwrap() - want).abs() < 1e-9, "instance {n}");
    }
    assert!((haversine((0.0, 0.0), (0.0, 90.0)).unwrap() - 10_007.543).abs() < 1e-3);
}

#[test]
fn perfect_forecast_scores() {
    let g = GridSpec::global(6, 12).unwrap();
    let (_, t) = fixed_fields();
    let t = Array2::from_shape_fn((6, 12), |(i, j)| t[[i % 4, j % 8]] + i as f64);
    assert_eq!(rmse_weighted(t.view(), t.view(), &g).unwrap(), 0.0);
    assert!((acc_weighted(t.view(), t.view(), &g, None, AccMode::Centered).unwrap() - 1.0).abs() < 1e-12);
    // The literal form is 1/sqrt(Σ L X²) for a perfect forecast, not 1.
    let lit = acc_weighted(t.view(), t.view(), &g, None, AccMode::Literal).unwrap();
    let l = naive_weights(g.lats());
    let s: f64 = t.indexed_iter().map(|((i, _), v)| l[i] * v * v).sum();
    assert!((lit - 1.0 / s.sqrt()).abs() < 1e-12);
}

#[test]
fn undefined_acc_cases() {
    let g = GridSpec::global(2, 2).unwrap();
    let c = Array2::from_elem((2, 2), 3.0);
    let t = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(matches!(acc_weighted(c.view(), c.view(), &g, None, AccMode::Centered), Err(stcast::Error::Undefined { .. })));
    let z = Array2::zeros((2, 2));
    assert!(matches!(acc_weighted(z.view(), t.view(), &g, None, AccMode::Literal), Err(stcast::Error::Undefined { .. })));
    let neg = t.mapv(|v| -v);
    assert!(matches!(acc_weighted(neg.view(), t.view(), &g, None, AccMode::Literal), Err(stcast::Error::Undefined { .. })));
    // Orthogonal fields give a zero radicand, which is defined.
    let a = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let b = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(acc_weighted(a.view(), b.view(), &g, None, AccMode::Literal).unwrap(), 0.0);
    assert!(rmse_weighted(a.view(), Array2::zeros((2, 3)).view(), &g).is_err());
}

#[test]
fn haversine_special_points() {
    let half = std::f64::consts::PI * EARTH_RADIUS_KM;
    assert!((haversine((0.0, 0.0), (0.0, 180.0)).unwrap() - half).abs() < 1e-9);
    assert!((haversine((90.0, 0.0), (-90.0, 0.0)).unwrap() - half).abs() < 1e-9);
    assert!((haversine((0.0, 0.0), (0.0, 90.0)).unwrap() - half / 2.0).abs() < 1e-9);
    assert!(haversine((45.0, 10.0), (45.0, 370.0)).unwrap() < 1e-9);
    assert!(haversine((91.0, 0.0), (0.0, 0.0)).is_err());
    assert!(mde(&[], &[]).is_err());
    assert!(mde(&[(0.0, 0.0)], &[]).is_err());
}

fn field(values: Array2<f64>, grid: &GridSpec) -> FieldTensor {
    let v = values.insert_axis(ndarray::Axis(0));
    FieldTensor::new(v, vec!["z500".into()], grid.clone(), ts(3)).unwrap()
}

#[test]
fn skill_report_layout() {
    let g = GridSpec::global(4, 8).unwrap();
    let (p, t) = fixed_fields();
    let pred = vec![field(p.clone(), &g), field(t.clone(), &g)];
    let truth = vec![field(t.clone(), &g), field(t.clone(), &g)];
    let rep = SkillReport::evaluate(&pred, &truth, 6, AccMode::Centered).unwrap();
    let s = &rep.scores["z500"];
    assert_eq!(s.keys().copied().collect::<Vec<_>>(), vec![6, 12]);
    assert_eq!(s[&12].rmse, 0.0);
    let dir = tempfile::tempdir().unwrap();
    rep.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("skill.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variable,lead_hours,rmse,acc"));
    assert_eq!(csv.lines().count(), 3);
    let json: SkillReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("skill.json")).unwrap()).unwrap();
    assert_eq!(json, rep);
    let flat = vec![field(Array2::from_elem((4, 8), 1.0), &g)];
    let r = SkillReport::evaluate(&flat, &flat, 6, AccMode::Centered).unwrap();
    assert_eq!(r.scores["z500"][&6].acc, None);
    assert!(SkillReport::evaluate(&pred, &truth[..1], 6, AccMode::Centered).is_err());
}

fn point() -> impl Strategy<Value = (f64, f64)> {
    (-90.0f64..=90.0, -180.0f64..360.0)
}

proptest! {
    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine(a, b).unwrap();
        prop_assert!((0.0..=std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9).contains(&ab));
        prop_assert!((ab - haversine(b, a).unwrap()).abs() < 1e-9);
        prop_assert!(haversine(a, a).unwrap() < 1e-9);
        prop_assert!(haversine(a, c).unwrap() <= ab + haversine(b, c).unwrap() + 1e-6);
    }

    #[test]
    fn haversine_ignores_longitude_rotation(a in point(), b in point(), shift in -360.0f64..360.0) {
        let d0 = haversine(a, b).unwrap();
        let d1 = haversine((a.0, a.1 + shift), (b.0, b.1 + shift)).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn mde_is_symmetric_and_order_free(track in proptest::collection::vec((point(), point()), 1..10)) {
        let (p, o): (Vec<_>, Vec<_>) = track.into_iter().unzip();
        let m = mde(&p, &o).unwrap();
        prop_assert!((m - mde(&o, &p).unwrap()).abs() < 1e-9);
        let (mut pr, mut or) = (p.clone(), o.clone());
        pr.reverse();
        or.reverse();
        prop_assert!((m - mde(&pr, &or).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn centered_acc_is_scale_invariant(seed in 0u64..500, a in 0.1f64..10.0) {
        let mut r = rng(seed);
        let g = GridSpec::global(5, 10).unwrap();
        let clim = Array2::from_shape_fn((5, 10), |_| r.random_range(-1.0..1.0));
        let p = Array2::from_shape_fn((5, 10), |_| r.random_range(-2.0..2.0));
        let t = Array2::from_shape_fn((5, 10), |_| r.random_range(-2.0..2.0));
        let scaled = (&p - &clim) * a + &clim;
        let x = acc_weighted(p.view(), t.view(), &g, Some(clim.view()), AccMode::Centered).unwrap();
        let y = acc_weighted(scaled.view(), t.view(), &g, Some(clim.view()), AccMode::Centered).unwrap();
        prop_assert!((x - y).abs() < 1e-10);
        prop_assert!(x.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn rmse_is_symmetric_and_nonnegative(seed in 0u64..500) {
        let mut r = rng(seed);
        let g = GridSpec::global(3, 7).unwrap();
        let p = Array2::from_shape_fn((3, 7), |_| r.random_range(-2.0..2.0));
        let t = Array2::from_shape_fn((3, 7), |_| r.random_range(-2.0..2.0));
        let a = rmse_weighted(p.view(), t.view(), &g).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, rmse_weighted(t.view(), p.view(), &g).unwrap());
    }
}
