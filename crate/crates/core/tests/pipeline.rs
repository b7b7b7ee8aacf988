mod support;

use advshift::data::{gaussian_mixture_dataset, load_csv, save_csv, SynthConfig};
use advshift::evaluator::{per_class_errors, shift_sweep, ShiftCurve};
use advshift::simplex::{euclidean_project_simplex, kl_divergence};
use advshift::trainer::{train, Method, TrainConfig};
use advshift::ModelParams;
use proptest::prelude::*;

fn small_data(seed: u64) -> advshift::Dataset {
    gaussian_mixture_dataset(&SynthConfig::uniform(3, 2, 2.0, 1.0, 120, seed)).unwrap()
}

#[test]
fn train_save_reload_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(1);
    let data_path = dir.path().join("train.csv");
    save_csv(&data, &data_path).unwrap();
    let reloaded = load_csv(&data_path).unwrap();
    assert_eq!(reloaded, data);

    let cfg = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
    let (params, history) = train(&cfg, &reloaded).unwrap();
    assert_eq!(history.records.len(), 3);
    let ckpt = dir.path().join("model.ckpt");
    params.save(&ckpt).unwrap();
    let loaded = ModelParams::load(&ckpt).unwrap();
    assert_eq!(loaded, params);

    let profile = per_class_errors(&loaded, &data).unwrap();
    let curve = shift_sweep(&profile, &[0.0, 0.5, 1.0]).unwrap();
    let curve_dir = dir.path().join("curve");
    curve.save_dir(&curve_dir).unwrap();
    let back = ShiftCurve::load_dir(&curve_dir).unwrap();
    assert_eq!(back.points.len(), 3);
    for (a, b) in back.points.iter().zip(&curve.points) {
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(a.witness.l1_distance(&b.witness) < 1e-12);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_data(2);
    for method in [Method::AdvShift, Method::Erm, Method::Balanced, Method::Agnostic] {
        let cfg = TrainConfig { method: method.clone(), epochs: 2, batch_size: 10, seed: 4, ..TrainConfig::default() };
        let (a, ha) = train(&cfg, &data).unwrap();
        let (b, hb) = train(&cfg, &data).unwrap();
        assert_eq!(a, b, "{}", method.name());
        assert_eq!(ha, hb);
        let (c, _) = train(&TrainConfig { seed: 5, ..cfg }, &data).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn adversary_stays_near_reference_with_tight_radius() {
    let data = small_data(3);
    let mut cfg = TrainConfig { method: Method::AdvShift, epochs: 5, batch_size: 8, ..TrainConfig::default() };
    cfg.adversary.r = 0.01;
    let (_, history) = train(&cfg, &data).unwrap();
    let loose = {
        let mut c = cfg.clone();
        c.adversary.r = 5.0;
        train(&c, &data).unwrap().1
    };
    assert!(history.max_kl() < loose.max_kl(), "{} {}", history.max_kl(), loose.max_kl());
    for rec in &history.records {
        let kl = kl_divergence(&rec.pi, &rec.p_emp).unwrap();
        assert!((kl - rec.kl_pi_pemp).abs() < 1e-12);
        assert!(rec.min_pi >= cfg.adversary.epsilon / 3.0 - 1e-15);
    }
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        a in prop::collection::vec(-3.0f64..3.0, 4),
        b in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let pa = euclidean_project_simplex(&a).unwrap();
        let pb = euclidean_project_simplex(&b).unwrap();
        let again = euclidean_project_simplex(pa.probs()).unwrap();
        prop_assert!(pa.l1_distance(&again) < 1e-12);
        let d_in = support::norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        let d_out = support::norm(&pa.probs().iter().zip(pb.probs()).map(|(x, y)| x - y).collect::<Vec<_>>());
        prop_assert!(d_out <= d_in + 1e-12);
    }

    #[test]
    fn projection_is_nearest_grid_point_or_better(v in prop::collection::vec(-2.0f64..2.0, 3)) {
        let p = euclidean_project_simplex(&v).unwrap();
        let dist = |x: &[f64]| x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut grid_best = f64::INFINITY;
        support::for_each_grid_point(3, 60, &mut |x| grid_best = grid_best.min(dist(x)));
        prop_assert!(dist(p.probs()) <= grid_best + 1e-12);
    }

    #[test]
    fn kl_matches_direct_sum(w in prop::collection::vec(0.01f64..1.0, 5), u in prop::collection::vec(0.01f64..1.0, 5)) {
        let p = advshift::simplex::normalize(&w).unwrap();
        let q = advshift::simplex::normalize(&u).unwrap();
        let got = kl_divergence(&p, &q).unwrap();
        prop_assert!((got - support::kl(p.probs(), q.probs())).abs() < 1e-12);
        prop_assert!(got >= 0.0);
    }
}
