mod common;

use common::{geometric_backend, rel_l2, MixtureScenario};
use taocache::backends::{CallCounter, GeometricBackend};
use taocache::calibration::{Moments, Prompt};
use taocache::metrics::{eps_divergence, mse};
use taocache::policy::*;
use taocache::schedule::{initial_noise, make_schedule, ScheduleKind};
use taocache::{calibrate, CalibrationTable, DenoiserBackend, Error, Latent, NoisePred, SamplerMode, Stream};

/// Output minus input is the same for every input and timestep.
struct ConstantResidualBackend {
    residual: NoisePred,
    calls: CallCounter,
}

impl DenoiserBackend for ConstantResidualBackend {
    fn id(&self) -> String {
        "constant_residual".into()
    }
    fn shape(&self) -> &[usize] {
        self.residual.shape()
    }
    fn streams(&self) -> Vec<Stream> {
        Stream::ALL.to_vec()
    }
    fn predict(&self, x: &Latent, _t: usize, _s: Stream) -> taocache::Result<NoisePred> {
        self.calls.bump();
        x.add(&self.residual)
    }
    fn calls(&self) -> u64 {
        self.calls.get()
    }
    fn reset_calls(&self) {
        self.calls.reset()
    }
}

fn geometric_setup(r: f64, steps: usize) -> (GeometricBackend, taocache::NoiseSchedule, CalibrationTable) {
    let sched = make_schedule(ScheduleKind::VariancePreservingCosine, steps).unwrap();
    let g = geometric_backend(&[8, 8], r, steps, 1);
    let prompts: Vec<Prompt> = (0..2).map(|s| Prompt { backend: &g, seed: s }).collect();
    let table = calibrate(&prompts, &sched, SamplerMode::Ddim).unwrap();
    (g, sched, table)
}

fn ctx<'a>(b: &'a dyn DenoiserBackend, sched: &'a taocache::NoiseSchedule) -> Sampling<'a> {
    Sampling {
        backend: b,
        sched,
        mode: SamplerMode::Ddim,
    }
}

#[test]
fn model_calls_equal_steps_minus_skips() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 30);
    let table = calibrate(&sc.prompts(4, 0), &sc.sched, SamplerMode::Ddim).unwrap();
    let plan = SkipPlan::manual(30, 3, 12, Some(3), Stream::Guided).unwrap();
    let (b, x) = sc.eval_case(2);
    let c = ctx(b, &sc.sched);
    let runs = [
        taocache_forward(c, x.clone(), 2, &table, &plan),
        tao_window_residual_forward(c, x.clone(), 2, &plan),
        residual_forward(c, x.clone(), 2, &ResidualRule::default()),
        magnitude_forward(c, x.clone(), 2, &table, &MagnitudeRule::default()),
        hybrid_forward(c, x.clone(), 2, &table, &plan, &ResidualRule::default(), 2),
    ];
    for r in runs {
        let r = r.unwrap();
        b.reset_calls();
        let before = b.calls();
        assert_eq!(before, 0);
        assert_eq!(r.model_calls, 30 - r.skipped, "{}", r.policy);
        assert_eq!(r.log.len(), 30);
        assert_eq!(r.log.iter().filter(|l| l.action.is_skip()).count(), r.skipped);
    }
    b.reset_calls();
    let r = taocache_forward(c, x, 2, &table, &plan).unwrap();
    assert_eq!(b.calls() as usize, r.model_calls);
    assert_eq!(r.skipped, plan.n_skip());
    assert_eq!(plan.refresh_points, vec![9, 5]);
}

#[test]
fn zero_residual_threshold_never_skips() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 20);
    let (b, x) = sc.eval_case(0);
    let rule = ResidualRule {
        rel_l1_thresh: 0.0,
        ..Default::default()
    };
    let r = residual_forward(ctx(b, &sc.sched), x, 0, &rule).unwrap();
    assert_eq!(r.skipped, 0);
}

#[test]
fn constant_residual_backend_reuse_is_exact() {
    let sched = make_schedule(ScheduleKind::VariancePreservingCosine, 20).unwrap();
    let b = ConstantResidualBackend {
        residual: initial_noise(&[4, 4], 3).scale(0.5),
        calls: CallCounter::default(),
    };
    let x = initial_noise(&[4, 4], 8);
    let full = full_forward(ctx(&b, &sched), x.clone(), 0).unwrap();
    let rule = ResidualRule {
        rel_l1_thresh: 1e9,
        max_consecutive: 100,
        max_skips: None,
    };
    let r = residual_forward(ctx(&b, &sched), x, 0, &rule).unwrap();
    // first and last steps must be computed; everything in between is skipped
    assert_eq!(r.skipped, 18);
    for (e, f) in r.eps_history.iter().zip(&full.eps_history) {
        let err = e.sub(f).unwrap().norm_l2() / f.norm_l2();
        assert!(err < 1e-12);
    }
    assert!(rel_l2(&full.x0, &r.x0) < 1e-12);
}

#[test]
fn residual_skips_grow_with_threshold() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 30);
    let (b, x) = sc.eval_case(1);
    let mut last = 0;
    for th in [0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0] {
        let rule = ResidualRule {
            rel_l1_thresh: th,
            max_consecutive: 4,
            max_skips: None,
        };
        let n = residual_forward(ctx(b, &sc.sched), x.clone(), 1, &rule)
            .unwrap()
            .skipped;
        assert!(n >= last, "threshold {th}: {n} < {last}");
        last = n;
    }
    assert!(last > 0);
}

#[test]
fn budget_search_hits_budget_exactly() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 30);
    let (b, x) = sc.eval_case(4);
    for budget in [1, 5, 9] {
        let eval = |th: f64| {
            let rule = ResidualRule {
                rel_l1_thresh: th,
                max_consecutive: 3,
                max_skips: Some(budget),
            };
            Ok(residual_forward(ctx(b, &sc.sched), x.clone(), 4, &rule)?.skipped)
        };
        let th = find_threshold_for_budget(budget, eval).unwrap();
        assert_eq!(eval(th).unwrap(), budget);
    }
}

#[test]
fn magnitude_rule_limits() {
    let (g, sched, table) = geometric_setup(1.0, 20);
    let x = initial_noise(&[8, 8], 0);
    let none = MagnitudeRule {
        mag_thresh: 0.0,
        ..Default::default()
    };
    assert_eq!(
        magnitude_forward(ctx(&g, &sched), x.clone(), 0, &table, &none)
            .unwrap()
            .skipped,
        0
    );
    let rule = MagnitudeRule {
        mag_thresh: 0.01,
        max_consecutive: 2,
        ..Default::default()
    };
    let r = magnitude_forward(ctx(&g, &sched), x, 0, &table, &rule).unwrap();
    // ratios exactly one on t = 1..=18: pattern is compute, skip, skip, ...
    let skipped: Vec<usize> = r.log.iter().filter(|l| l.action.is_skip()).map(|l| l.t).collect();
    assert_eq!(skipped, vec![18, 17, 15, 14, 12, 11, 9, 8, 6, 5, 3, 2]);
}

#[test]
fn geometric_backend_is_reproduced_exactly_and_residual_is_not() {
    let (g, sched, table) = geometric_setup(0.9, 50);
    let x = initial_noise(&[8, 8], 5);
    let full = full_forward(ctx(&g, &sched), x.clone(), 5).unwrap();
    for (lo, hi) in [(1, 8), (10, 29), (29, 48), (1, 20)] {
        let plan = SkipPlan::manual(50, lo, hi, None, Stream::Guided).unwrap();
        let tao = taocache_forward(ctx(&g, &sched), x.clone(), 5, &table, &plan).unwrap();
        let res = tao_window_residual_forward(ctx(&g, &sched), x.clone(), 5, &plan).unwrap();
        let e_tao = rel_l2(&full.x0, &tao.x0);
        let e_res = rel_l2(&full.x0, &res.x0);
        assert!(e_tao < 1e-7, "[{lo}, {hi}]: {e_tao:e}");
        assert!(e_res > 10.0 * e_tao.max(1e-12), "[{lo}, {hi}]: residual {e_res:e}");
    }
}

fn perturbed(table: &CalibrationTable, factor: f64) -> CalibrationTable {
    let st = table.stream(Stream::Guided).unwrap();
    let n = table.steps() - 1;
    let cos = (0..n)
        .map(|t| {
            st.c_cos(t)
                .map_or(Moments::default(), |c| Moments::from_parts(2, c, 0.0))
        })
        .collect();
    let ratio = (0..n)
        .map(|t| {
            st.c_ratio(t)
                .map_or(Moments::default(), |r| Moments::from_parts(2, r * factor, 0.0))
        })
        .collect();
    CalibrationTable::from_moments(table.steps(), table.meta.clone(), Stream::Guided, cos, ratio).unwrap()
}

#[test]
fn ratio_miscalibration_error_grows_monotonically() {
    let (g, sched, table) = geometric_setup(0.9, 50);
    let x = initial_noise(&[8, 8], 2);
    let full = full_forward(ctx(&g, &sched), x.clone(), 2).unwrap();
    let plan = SkipPlan::manual(50, 1, 12, None, Stream::Guided).unwrap();
    let mut last = -1.0;
    for f in [1.0, 1.01, 1.02, 1.05, 1.1, 1.2] {
        let r = taocache_forward(ctx(&g, &sched), x.clone(), 2, &perturbed(&table, f), &plan).unwrap();
        let e = mse(&full.x0, &r.x0).unwrap();
        assert!(e > last, "factor {f}");
        last = e;
    }
}

#[test]
fn hybrid_limits_reduce_to_single_policies() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 30);
    let table = calibrate(&sc.prompts(4, 0), &sc.sched, SamplerMode::Ddim).unwrap();
    let plan = SkipPlan::manual(30, 2, 7, None, Stream::Guided).unwrap();
    let (b, x) = sc.eval_case(3);
    let c = ctx(b, &sc.sched);

    let never = ResidualRule {
        rel_l1_thresh: 0.0,
        ..Default::default()
    };
    let h = hybrid_forward(c, x.clone(), 3, &table, &plan, &never, 2).unwrap();
    let t = taocache_forward(c, x.clone(), 3, &table, &plan).unwrap();
    assert_eq!(h.x0, t.x0);
    assert_eq!(h.skipped, t.skipped);

    let rule = ResidualRule {
        rel_l1_thresh: 0.2,
        ..Default::default()
    };
    let h = hybrid_forward(c, x.clone(), 3, &table, &SkipPlan::empty(30), &rule, 0).unwrap();
    let r = residual_forward(c, x, 3, &rule).unwrap();
    assert_eq!(h.x0, r.x0);
    assert_eq!(h.log, r.log);
}

#[test]
fn hybrid_guard_band_is_always_computed() {
    let sc = MixtureScenario::with_schedule(ScheduleKind::VariancePreservingCosine, 30);
    let table = calibrate(&sc.prompts(4, 0), &sc.sched, SamplerMode::Ddim).unwrap();
    let plan = SkipPlan::manual(30, 2, 7, None, Stream::Guided).unwrap();
    let (b, x) = sc.eval_case(0);
    let rule = ResidualRule {
        rel_l1_thresh: 1e9,
        max_consecutive: 100,
        max_skips: None,
    };
    let h = hybrid_forward(ctx(b, &sc.sched), x, 0, &table, &plan, &rule, 3).unwrap();
    for l in &h.log {
        match l.t {
            8..=10 => assert_eq!(l.action, StepAction::Refreshed),
            2..=7 => assert_eq!(l.action, StepAction::Extrapolated),
            30 => assert_eq!(l.action, StepAction::Computed),
            11..=29 => assert_eq!(l.action, StepAction::ResidualReuse),
            _ => assert_eq!(l.action, StepAction::Computed),
        }
    }
}

#[test]
fn invalid_plans_are_rejected() {
    let (g, sched, table) = geometric_setup(0.9, 20);
    let x = initial_noise(&[8, 8], 0);
    let c = ctx(&g, &sched);
    let wrong_t = SkipPlan::manual(30, 2, 5, None, Stream::Guided).unwrap();
    assert!(matches!(
        taocache_forward(c, x.clone(), 0, &table, &wrong_t),
        Err(Error::PlanInvalid(_))
    ));
    assert!(matches!(
        SkipPlan::manual(20, 12, 19, None, Stream::Guided),
        Err(Error::PlanInvalid(_))
    ));
    assert!(matches!(
        SkipPlan::manual(20, 0, 4, None, Stream::Guided),
        Err(Error::PlanInvalid(_))
    ));

    let mut hand = SkipPlan::manual(20, 2, 5, None, Stream::Guided).unwrap();
    hand.skip_set = vec![19, 18];
    assert!(matches!(
        taocache_forward(c, x.clone(), 0, &table, &hand),
        Err(Error::PlanInvalid(_))
    ));

    let guided_only = {
        let st = table.stream(Stream::Cond).unwrap();
        let cos = (0..19)
            .map(|t| {
                st.c_cos(t)
                    .map_or(Moments::default(), |v| Moments::from_parts(1, v, 0.0))
            })
            .collect();
        let ratio = (0..19)
            .map(|t| {
                st.c_ratio(t)
                    .map_or(Moments::default(), |v| Moments::from_parts(1, v, 0.0))
            })
            .collect();
        CalibrationTable::from_moments(20, table.meta.clone(), Stream::Cond, cos, ratio).unwrap()
    };
    let plan = SkipPlan::manual(20, 2, 5, None, Stream::Guided).unwrap();
    assert!(matches!(
        taocache_forward(c, x, 0, &guided_only, &plan),
        Err(Error::PlanInvalid(_))
    ));
}

#[test]
fn ancestral_sampling_with_window_stays_close_on_geometric_backend() {
    let sched = make_schedule(ScheduleKind::VariancePreservingCosine, 40).unwrap();
    let g = geometric_backend(&[8, 8], 0.95, 40, 4);
    let mode = SamplerMode::AncestralDdpm { eta: 1.0 };
    let prompts: Vec<Prompt> = (0..2).map(|s| Prompt { backend: &g, seed: s }).collect();
    let table = calibrate(&prompts, &sched, mode).unwrap();
    let c = Sampling {
        backend: &g,
        sched: &sched,
        mode,
    };
    let x = initial_noise(&[8, 8], 1);
    let full = full_forward(c, x.clone(), 1).unwrap();
    let plan = SkipPlan::manual(40, 3, 15, None, Stream::Guided).unwrap();
    let r = taocache_forward(c, x, 1, &table, &plan).unwrap();
    assert!(rel_l2(&full.x0, &r.x0) < 1e-7);
}

#[test]
fn eps_divergence_examples() {
    let (g, sched, table) = geometric_setup(0.9, 30);
    let x = initial_noise(&[8, 8], 0);
    let full = full_forward(ctx(&g, &sched), x.clone(), 0).unwrap();
    let ft = full.eps_trace("geometric", 0).unwrap();
    for (_, e) in eps_divergence(&ft, &ft).unwrap() {
        assert_eq!(e, Some(0.0));
    }

    let mut scaled = ft.clone();
    for rec in &mut scaled.records {
        rec.eps.iter_mut().for_each(|v| *v = (*v as f64 * 1.1) as f32);
    }
    for (_, e) in eps_divergence(&ft, &scaled).unwrap() {
        assert!((e.unwrap() - 0.1).abs() < 1e-6);
    }

    let plan = SkipPlan::manual(30, 2, 20, None, Stream::Guided).unwrap();
    let tao = taocache_forward(ctx(&g, &sched), x, 0, &table, &plan).unwrap();
    let div = eps_divergence(&ft, &tao.eps_trace("geometric", 0).unwrap()).unwrap();
    assert_eq!(div.len(), 30);
    assert_eq!(div[0].0, 30);
    for (_, e) in div {
        assert!(e.unwrap() < 1e-7);
    }
}
