use dtbregman::harness::checks::{desk_instance, DESK_FACTORS};
use dtbregman::harness::run_traced;
use dtbregman::problem::{generate, DataGenConfig};
use dtbregman::runtime::{self, Backend, Control, DelayModel, RunConfig, RunReport, Snapshot, StopReason, TimeLaw};
use dtbregman::{AlgorithmKind, AlgorithmVariant, CompositeProblem, GeometryKind, StepConfig};

struct Iterate {
    k: u64,
    worker: Option<usize>,
    x: Vec<f64>,
}

fn variant(p: &CompositeProblem, kind: AlgorithmKind) -> AlgorithmVariant {
    AlgorithmVariant::new(kind, StepConfig::for_problem(p, GeometryKind::Entropy.build(), 0.99).unwrap())
}

fn record(
    variant: &AlgorithmVariant,
    p: &CompositeProblem,
    delays: &DelayModel,
    config: &RunConfig,
) -> (Vec<Iterate>, RunReport) {
    let mut seen = Vec::new();
    let mut observer = |s: &Snapshot<'_>| {
        seen.push(Iterate {
            k: s.k,
            worker: s.worker,
            x: s.x.to_vec(),
        });
        Ok(Control::Continue)
    };
    let report = runtime::run(variant, p, &vec![1.0; p.dim()], delays, config, &mut observer).unwrap();
    (seen, report)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn event_sim_csv_is_byte_identical_across_runs() {
    let (p, r) = desk_instance(4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut delays = DelayModel::new(DESK_FACTORS.to_vec());
    delays.base_time = TimeLaw::Exponential { mean: 1.0 };
    let mut config = RunConfig::event_sim(3000);
    config.seed = 17;
    let paths = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for path in &paths {
        run_traced(
            &variant(&p, AlgorithmKind::Dave),
            &p,
            &vec![1.0; p.dim()],
            &delays,
            &config,
            &r,
            Some(path),
        )
        .unwrap();
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert!(a.len() > 3000 * 40);
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());

    config.seed = 18;
    let other = dir.path().join("c.csv");
    run_traced(
        &variant(&p, AlgorithmKind::Dave),
        &p,
        &vec![1.0; p.dim()],
        &delays,
        &config,
        &r,
        Some(&other),
    )
    .unwrap();
    assert_ne!(a, std::fs::read(&other).unwrap());
}

#[test]
fn every_worker_exchanges_within_the_liveness_window() {
    let (p, _) = desk_instance(2).unwrap();
    let factors = DESK_FACTORS.to_vec();
    let slowest = factors.iter().cloned().fold(0.0, f64::max);
    let window: usize = factors.iter().map(|f| (slowest / f).ceil() as usize + 1).sum();
    let (seen, _) = record(
        &variant(&p, AlgorithmKind::Dave),
        &p,
        &DelayModel::new(factors),
        &RunConfig::event_sim(2000),
    );
    let workers: Vec<usize> = seen.iter().filter_map(|s| s.worker).collect();
    assert_eq!(workers.len(), 2000);
    for w in workers.windows(window) {
        for i in 0..4 {
            assert!(w.contains(&i), "worker {i} silent for {window} iterations");
        }
    }
}

#[test]
fn single_worker_reproduces_the_sequential_iteration() {
    let p = generate(&DataGenConfig::new(8, 12, 1, 3)).unwrap();
    let step = StepConfig::for_problem(&p, GeometryKind::Entropy.build(), 0.99).unwrap();
    let mut x = vec![1.0; p.dim()];
    let mut expected = vec![x.clone()];
    for _ in 0..100 {
        let g = p.data_gradient(&x).unwrap();
        let grad_h = step.geometry.gradient(&x).unwrap();
        let u: Vec<f64> = g.iter().zip(&grad_h).map(|(g, h)| step.gamma * g - h).collect();
        x = step.apply(&u).unwrap();
        expected.push(x.clone());
    }
    for kind in AlgorithmKind::ALL {
        let (seen, _) = record(
            &AlgorithmVariant::new(kind, step.clone()),
            &p,
            &DelayModel::uniform(1),
            &RunConfig::event_sim(100),
        );
        assert_eq!(seen.len(), 101);
        for (s, e) in seen.iter().zip(&expected) {
            assert!(max_rel_diff(&s.x, e) <= 1e-12, "{kind} at k = {}", s.k);
        }
    }
}

#[test]
fn straggler_delay_tracks_the_speed_ratio() {
    let p = generate(&DataGenConfig::new(6, 10, 2, 1)).unwrap();
    let (_, report) = record(
        &variant(&p, AlgorithmKind::Dave),
        &p,
        &DelayModel::new(vec![1.0, 10.0]),
        &RunConfig::event_sim(2000),
    );
    // the slow worker's contribution is two of its own periods old: ≈ 2·10 fast exchanges
    assert!((19..=22).contains(&report.max_delay[1]), "{:?}", report.max_delay);
    assert!(report.max_delay[0] <= 3, "{:?}", report.max_delay);
    let ratio = report.exchange_counts[0] as f64 / report.exchange_counts[1] as f64;
    assert!((ratio - 10.0).abs() < 0.1, "{:?}", report.exchange_counts);
}

#[test]
fn barrier_mode_collapses_async_variants_onto_sync() {
    let (p, _) = desk_instance(5).unwrap();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    let mut config = RunConfig::event_sim(200);
    config.barrier = true;
    let (sync, _) = record(&variant(&p, AlgorithmKind::Sync), &p, &delays, &config);
    for kind in [AlgorithmKind::Piag, AlgorithmKind::Dave] {
        let (other, _) = record(&variant(&p, kind), &p, &delays, &config);
        assert_eq!(other.len(), sync.len());
        for (a, b) in other.iter().zip(&sync) {
            assert_eq!(a.k, b.k);
            assert!(max_rel_diff(&a.x, &b.x) <= 1e-10, "{kind} at k = {}", a.k);
        }
    }
}

#[test]
fn piag_and_delay_tolerant_differ_under_a_straggler() {
    let (p, _) = desk_instance(1).unwrap();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    let config = RunConfig::event_sim(500);
    let (_, piag) = record(&variant(&p, AlgorithmKind::Piag), &p, &delays, &config);
    let (_, dave) = record(&variant(&p, AlgorithmKind::Dave), &p, &delays, &config);
    assert_eq!(piag.exchange_counts, dave.exchange_counts);
    assert!(max_rel_diff(&piag.x, &dave.x) > 1e-3);
}

#[test]
fn event_sim_wall_budget_is_virtual_time() {
    let (p, _) = desk_instance(1).unwrap();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    let config = RunConfig {
        max_iterations: None,
        wall_budget_seconds: Some(500.0),
        ..RunConfig::event_sim(1)
    };
    let report = runtime::run(
        &variant(&p, AlgorithmKind::Dave),
        &p,
        &vec![1.0; p.dim()],
        &delays,
        &config,
        &mut runtime::NoObserver,
    )
    .unwrap();
    assert_eq!(report.stop, StopReason::WallBudget);
    assert!(report.seconds <= 500.0);
    // per 10 seconds: 10 + 10 + 2 + 1 exchanges, after a 10 second warm-up
    let expected = 49.0 * 23.0;
    assert!((report.iterations as f64 - expected).abs() <= 25.0, "{}", report.iterations);
}

#[test]
fn observer_stop_ends_the_run() {
    let (p, _) = desk_instance(1).unwrap();
    let mut observer = |s: &Snapshot<'_>| Ok(if s.k == 37 { Control::Stop } else { Control::Continue });
    let report = runtime::run(
        &variant(&p, AlgorithmKind::Sync),
        &p,
        &vec![1.0; p.dim()],
        &DelayModel::uniform(4),
        &RunConfig::event_sim(1000),
        &mut observer,
    )
    .unwrap();
    assert_eq!((report.iterations, report.stop), (37, StopReason::Observer));
}

#[test]
fn concurrent_master_serializes_messages() {
    let (p, _) = desk_instance(3).unwrap();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    for kind in AlgorithmKind::ALL {
        let mut config = RunConfig::concurrent(300);
        config.master.audit = true;
        let (seen, report) = record(&variant(&p, kind), &p, &delays, &config);
        assert_eq!(report.backend, Backend::Concurrent);
        assert_eq!(report.iterations, 300);
        let ks: Vec<u64> = seen.iter().map(|s| s.k).collect();
        assert_eq!(ks, (0..=300).collect::<Vec<_>>());
        let per_iteration = if kind == AlgorithmKind::Sync { 4 } else { 1 };
        assert_eq!(
            report.messages,
            300 * per_iteration + if kind == AlgorithmKind::Sync { 0 } else { 4 }
        );
        assert!(report.messages_sent >= report.messages);
        assert!(report.messages_sent - report.messages <= 4, "{kind}: {report:?}");
        assert!(report.max_audit_residual <= 1e-10);
    }
}

#[test]
fn backends_agree_on_final_gap() {
    let (p, r) = desk_instance(2).unwrap();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    let v = variant(&p, AlgorithmKind::Dave);
    let x0 = vec![1.0; p.dim()];
    let (sim, _) = run_traced(&v, &p, &x0, &delays, &RunConfig::event_sim(4000), &r, None).unwrap();
    let (threads, _) = run_traced(&v, &p, &x0, &delays, &RunConfig::concurrent(4000), &r, None).unwrap();
    let a = sim.last().unwrap().f_gap;
    let b = threads.last().unwrap().f_gap;
    assert!(a > 0.0 && b > 0.0);
    assert!((a / b).max(b / a) <= 10.0, "event_sim {a:e}, concurrent {b:e}");
    assert!(threads.validate().is_ok());
}
