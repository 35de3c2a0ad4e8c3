use laoc::controllers::{run_controller, ControllerConfig, ControllerKind, UniformRandomPolicy};
use laoc::harness::{evaluate, run_batch, summarize, sweep_lambda, EvalOptions};
use laoc::learning::{train_pure, TrainConfig};
use laoc::model::SystemParams;
use laoc::priors::PriorConfig;
use laoc::safeset::SafeSetParams;
use laoc::traces::{gen_synthetic, TraceProfile};

fn config(kind: ControllerKind) -> ControllerConfig {
    ControllerConfig::new(kind, 0.4, PriorConfig::ogd())
}

#[test]
fn prior_row_has_unit_ratio() {
    let p = SystemParams::default();
    let eps = gen_synthetic(40, 60, 24, &TraceProfile::default()).unwrap();
    let t =
        evaluate(&[config(ControllerKind::PriorOnly)], &eps, &[0.4], "syn", &p, &UniformRandomPolicy { seed: 0 }, EvalOptions::default()).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0].max_risk_ratio, 1.0);
    assert_eq!(t.rows[0].violation_prob, 0.0);
}

#[test]
fn laoc_rows_never_violate() {
    let p = SystemParams::default();
    let eps = gen_synthetic(41, 200, 24, &TraceProfile::default()).unwrap();
    let ml = UniformRandomPolicy { seed: 4 };
    let t = evaluate(&[config(ControllerKind::Laoc), config(ControllerKind::PureMl)], &eps, &[0.1, 0.4, 0.8], "syn", &p, &ml, EvalOptions::default())
        .unwrap();
    assert_eq!(t.rows.len(), 6);
    for lambda in [0.1, 0.4, 0.8] {
        let row = t.find("laoc", lambda).unwrap();
        assert_eq!(row.violation_prob, 0.0);
        assert!(row.max_risk_ratio <= 1.0 + lambda + 1e-9);
        // Random actions are unsafe on their own, so the comparison is not vacuous.
        assert!(t.find("pure_ml", lambda).unwrap().violation_prob > 0.0);
    }
}

#[test]
fn sweep_endpoints() {
    let p = SystemParams::default();
    let train = gen_synthetic(42, 40, 24, &TraceProfile::default()).unwrap();
    let net = train_pure(&train, &p, &TrainConfig { epochs: 30, ..TrainConfig::default() }).unwrap().policy;
    let eps = gen_synthetic(43, 50, 24, &TraceProfile::default()).unwrap();
    let opts = EvalOptions { jobs: Some(2), ..EvalOptions::default() };
    let rows = sweep_lambda(&[0.0, 0.4, 1e6], &eps, &config(ControllerKind::Laoc), &p, &net, opts).unwrap();
    let base = evaluate(&[config(ControllerKind::PriorOnly), config(ControllerKind::PureMl)], &eps, &[0.0], "sweep", &p, &net, opts).unwrap();
    let strip = |r: &laoc::harness::MetricsRow| (r.avg_loss, r.avg_energy_usd, r.avg_carbon_g, r.max_risk_ratio);
    assert_eq!(strip(&rows[0]), strip(base.find("prior", 0.0).unwrap()));
    assert_eq!(strip(&rows[2]).0, strip(base.find("pure_ml", 0.0).unwrap()).0);
    assert!(sweep_lambda(&[0.4, 0.1], &eps, &config(ControllerKind::Laoc), &p, &net, opts).is_err());
}

#[test]
fn accounting_recomputes_from_trajectories() {
    let p = SystemParams::default();
    let eps = gen_synthetic(44, 80, 24, &TraceProfile::default()).unwrap();
    let ml = UniformRandomPolicy { seed: 5 };
    let cfg = config(ControllerKind::Laoc);
    let safe = SafeSetParams::new(&p, 0.4).unwrap();
    let results = run_batch(&cfg, &p, Some(&safe), &eps, &ml, EvalOptions::default()).unwrap();
    let row = summarize("laoc", 0.4, "syn", &results);
    let (mut energy, mut carbon, mut total) = (0.0, 0.0, 0.0);
    for (ep, r) in eps.iter().zip(&results) {
        assert_eq!(ep.id, r.trace_id);
        let per_round: f64 = r.losses.iter().map(|l| l.total).sum();
        assert!((per_round - r.total_loss).abs() < 1e-9);
        for (u, s) in r.u.iter().zip(&ep.steps) {
            energy += s.price * p.eta * u;
            carbon += s.carbon_intensity * p.eta * u;
        }
        total += r.total_loss;
    }
    let n = eps.len() as f64;
    assert!((row.avg_energy_usd - energy / n).abs() < 1e-9);
    assert!((row.avg_carbon_g - carbon / n).abs() < 1e-9);
    assert!((row.avg_loss - total / n).abs() < 1e-9);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let p = SystemParams::default();
    let eps = gen_synthetic(45, 120, 24, &TraceProfile::default()).unwrap();
    let ml = UniformRandomPolicy { seed: 6 };
    let controllers = [config(ControllerKind::Laoc), config(ControllerKind::LinPlus), ControllerConfig::lin(0.5, 0.4, PriorConfig::robd())];
    let run = |jobs| {
        evaluate(&controllers, &eps, &[0.2, 0.4], "syn", &p, &ml, EvalOptions { jobs: Some(jobs), ..EvalOptions::default() })
            .unwrap()
            .to_csv_string(Some("cfg"))
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}

#[test]
fn single_episode_runs_agree_with_the_batch() {
    let p = SystemParams::default();
    let eps = gen_synthetic(46, 10, 24, &TraceProfile::default()).unwrap();
    let ml = UniformRandomPolicy { seed: 7 };
    let cfg = config(ControllerKind::LinPlus);
    let batch = run_batch(&cfg, &p, None, &eps, &ml, EvalOptions::default()).unwrap();
    for (ep, r) in eps.iter().zip(&batch) {
        assert_eq!(run_controller(&cfg, ep, &p, None, &ml).unwrap().u, r.u);
    }
}

#[test]
fn reservation_overrides_reach_the_batch() {
    use laoc::safeset::ReservationConstants;
    let p = SystemParams::default();
    let eps = gen_synthetic(47, 40, 24, &TraceProfile::default()).unwrap();
    let ml = UniformRandomPolicy { seed: 8 };
    let run = |constants| {
        evaluate(&[config(ControllerKind::Laoc)], &eps, &[0.4], "syn", &p, &ml, EvalOptions { jobs: Some(1), constants }).unwrap().rows[0].clone()
    };
    let base = run(ReservationConstants::default());
    let wide = run(ReservationConstants { c1: Some(4.0), c2: None });
    assert_eq!(wide.violation_prob, 0.0);
    // A larger reservation keeps LAOC closer to the prior.
    assert_ne!(base.avg_loss, wide.avg_loss);
    assert!(evaluate(
        &[config(ControllerKind::Laoc)],
        &eps,
        &[0.4],
        "syn",
        &p,
        &ml,
        EvalOptions { jobs: Some(1), constants: ReservationConstants { c1: Some(0.5), c2: None } }
    )
    .is_err());
}
