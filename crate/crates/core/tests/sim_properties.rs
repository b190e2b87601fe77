use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rtmw_core::{
    ms, us, EventKind, ExecModel, Horizon, LockingStrategy, MappingScheme, Middleware, Nanos, PolicyConfig,
    PriorityAssignment, ScriptedActivation, SimJobModel, SimOutcome, TaskDescriptor, TaskId, Trace, VSelect,
    VersionDescriptor, WaitingStrategy,
};

const PERIODS_MS: [u64; 5] = [10, 20, 25, 50, 100];
// Offsets are not tick-aligned, so one hyperperiod can end before the
// first detection tick.
const HORIZON: Horizon = Horizon::Hyperperiods(2);

#[derive(Clone, Debug)]
struct TaskGen {
    period_idx: usize,
    /// Deadline as a fraction of the period, in percent.
    deadline_pct: u64,
    /// wcet as a fraction of the period, in per mille.
    load_permille: u64,
    offset_ms: u64,
    gpu: bool,
}

#[derive(Clone, Debug)]
struct SetGen {
    mapping: MappingScheme,
    priority: PriorityAssignment,
    preemptive: bool,
    workers: usize,
    tasks: Vec<TaskGen>,
    model: SimJobModel,
    seed: u64,
}

fn task_gen() -> impl Strategy<Value = TaskGen> {
    (0..PERIODS_MS.len(), 50u64..=100, 10u64..=400, 0u64..5, any::<bool>()).prop_map(
        |(period_idx, deadline_pct, load_permille, offset_ms, gpu)| TaskGen {
            period_idx,
            deadline_pct,
            load_permille,
            offset_ms,
            gpu,
        },
    )
}

fn model_gen() -> impl Strategy<Value = SimJobModel> {
    (0u64..5, 0u64..3, 0u64..1000, 0u64..10, prop::option::of(0.2f64..=1.0)).prop_map(|(g, scan, sort, ctx, frac)| {
        SimJobModel {
            get_task_cost: us(g),
            sched_scan_cost_per_task: us(scan),
            sort_cost_per_element: sort,
            context_switch_cost: us(ctx),
            exec: frac.map_or(ExecModel::Fixed, |min_fraction| ExecModel::Uniform { min_fraction }),
            ..SimJobModel::zero()
        }
    })
}

fn set_gen() -> impl Strategy<Value = SetGen> {
    (
        prop_oneof![Just(MappingScheme::Global), Just(MappingScheme::Partitioned)],
        prop_oneof![
            Just(PriorityAssignment::Edf),
            Just(PriorityAssignment::Dm),
            Just(PriorityAssignment::Rm)
        ],
        any::<bool>(),
        1usize..=3,
        prop::collection::vec(task_gen(), 1..=6),
        model_gen(),
        any::<u64>(),
    )
        .prop_map(|(mapping, priority, preemptive, workers, tasks, model, seed)| SetGen {
            mapping,
            priority,
            preemptive,
            workers,
            tasks,
            model,
            seed,
        })
}

fn build(g: &SetGen, tweak: impl FnOnce(&mut PolicyConfig)) -> Middleware {
    let mut config = PolicyConfig::new(g.mapping, g.priority, g.workers).preemptive(g.preemptive);
    tweak(&mut config);
    let mut mw = Middleware::init(config).unwrap();
    let gpu = mw.hwaccel_decl("gpu").unwrap();
    for (i, t) in g.tasks.iter().enumerate() {
        let period = ms(PERIODS_MS[t.period_idx]);
        let desc = TaskDescriptor::periodic(&format!("t{i}"), period)
            .with_deadline(period * t.deadline_pct / 100)
            .with_offset(ms(t.offset_ms))
            .on_core(i % g.workers);
        let id = mw.task_decl(desc).unwrap();
        let wcet = (period * t.load_permille / 1000).max(1);
        let v = mw.version_decl(id, VersionDescriptor::new("v", wcet, VSelect::Unspecified)).unwrap();
        if t.gpu {
            mw.hwaccel_use(id, v, gpu).unwrap();
        }
    }
    mw
}

fn sim(g: &SetGen) -> SimOutcome {
    build(g, |_| {}).simulate(&g.model, Some(HORIZON), g.seed).unwrap()
}

type Key = (TaskId, u64);

fn by_job(trace: &Trace, kind: EventKind) -> BTreeMap<Key, Nanos> {
    trace
        .of_kind(kind)
        .filter_map(|e| e.job.map(|j| ((j.task, j.seq), e.t)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn job_events_are_ordered_and_complete(g in set_gen()) {
        let out = sim(&g);
        let rt = by_job(&out.trace, EventKind::ReleaseTheoretical);
        let re = by_job(&out.trace, EventKind::ReleaseEffective);
        let start = by_job(&out.trace, EventKind::JobStart);
        let done = by_job(&out.trace, EventKind::JobComplete);
        prop_assert!(!rt.is_empty());
        prop_assert_eq!(rt.len(), done.len());
        for (k, &t0) in &rt {
            let (t1, t2, t3) = (re[k], start[k], done[k]);
            prop_assert!(t0 <= t1 && t1 <= t2 && t2 <= t3, "{:?}: {} {} {} {}", k, t0, t1, t2, t3);
        }
        let mut last: HashMap<Option<usize>, Nanos> = HashMap::new();
        for e in &out.trace.events {
            let prev = last.insert(e.worker, e.t).unwrap_or(0);
            prop_assert!(prev <= e.t);
        }
    }

    #[test]
    fn releases_are_exact(g in set_gen()) {
        let out = sim(&g);
        for ((task, seq), t) in by_job(&out.trace, EventKind::ReleaseTheoretical) {
            let spec = &g.tasks[task.index()];
            prop_assert_eq!(t, ms(spec.offset_ms) + seq * ms(PERIODS_MS[spec.period_idx]));
        }
    }

    #[test]
    fn one_job_per_worker_and_no_migration(g in set_gen()) {
        let out = sim(&g);
        let mut running: HashMap<usize, Key> = HashMap::new();
        let mut home: HashMap<Key, usize> = HashMap::new();
        for e in &out.trace.events {
            let (Some(j), Some(w)) = (e.job, e.worker) else { continue };
            let k = (j.task, j.seq);
            match e.kind {
                EventKind::JobStart | EventKind::Resume => {
                    prop_assert!(running.insert(w, k).is_none(), "worker {} runs two jobs at {}", w, e.t);
                    prop_assert_eq!(*home.entry(k).or_insert(w), w, "{:?} migrated", k);
                }
                EventKind::Preempt | EventKind::JobComplete => {
                    prop_assert_eq!(running.remove(&w), Some(k));
                }
                _ => {}
            }
        }
        prop_assert!(running.is_empty());
    }

    #[test]
    fn misses_match_deadlines(g in set_gen()) {
        let out = sim(&g);
        let mut misses = 0;
        for ((task, seq), end) in by_job(&out.trace, EventKind::JobComplete) {
            let spec = &g.tasks[task.index()];
            let period = ms(PERIODS_MS[spec.period_idx]);
            let deadline = ms(spec.offset_ms) + seq * period + period * spec.deadline_pct / 100;
            if end > deadline {
                misses += 1;
            }
        }
        prop_assert_eq!(out.report.misses, misses);
        prop_assert_eq!(out.trace.count(EventKind::DeadlineMiss) as u64, misses);
    }

    #[test]
    fn accelerator_is_never_shared(g in set_gen()) {
        let out = sim(&g);
        let mut holder: Option<Key> = None;
        for e in &out.trace.events {
            let Some(j) = e.job else { continue };
            match e.kind {
                EventKind::AccelAcquire => {
                    prop_assert!(holder.is_none(), "gpu acquired twice at {}", e.t);
                    holder = Some((j.task, j.seq));
                }
                EventKind::AccelRelease => prop_assert_eq!(holder.take(), Some((j.task, j.seq))),
                _ => {}
            }
        }
    }

    #[test]
    fn simulation_is_deterministic(g in set_gen()) {
        prop_assert_eq!(sim(&g).trace, sim(&g).trace);
    }

    #[test]
    fn strategies_do_not_change_virtual_time(g in set_gen()) {
        let base = sim(&g).trace;
        for (w, l) in [(WaitingStrategy::Spin, LockingStrategy::OsLock), (WaitingStrategy::Sleep, LockingStrategy::LockFree)] {
            let mw = build(&g, |c| {
                c.waiting_strategy = w;
                c.locking_strategy = l;
            });
            let other = mw.simulate(&g.model, Some(HORIZON), g.seed).unwrap().trace;
            prop_assert_eq!(&base, &other);
        }
    }

    #[test]
    fn zero_knobs_mean_zero_overheads(mut g in set_gen()) {
        g.model = SimJobModel::zero();
        let o = sim(&g).report.overheads;
        prop_assert_eq!(o.get_task.max, 0);
        prop_assert_eq!(o.scheduling.max, 0);
        prop_assert_eq!(o.worker_lock_wait.max, 0);
        prop_assert_eq!(o.scheduler_lock_wait.max, 0);
        prop_assert_eq!(o.preemption_overhead, 0);
    }

    /// Isolated job on an idle worker: completion minus theoretical release
    /// is scheduling, get-task and body, nothing else.
    #[test]
    fn overheads_compose_exactly(
        g in 0u64..20,
        scan in 0u64..20,
        sort in 0u64..2000,
        wcet_us in 1u64..5000,
        mapping in prop_oneof![Just(MappingScheme::Global), Just(MappingScheme::Partitioned)],
    ) {
        let mut mw = Middleware::init(PolicyConfig::new(mapping, PriorityAssignment::Edf, 1)).unwrap();
        let t = mw.task_decl(TaskDescriptor::periodic("t", ms(10)).on_core(0)).unwrap();
        mw.version_decl(t, VersionDescriptor::new("v", us(wcet_us), VSelect::Unspecified)).unwrap();
        let model = SimJobModel {
            get_task_cost: us(g),
            sched_scan_cost_per_task: us(scan),
            sort_cost_per_element: sort,
            ..SimJobModel::zero()
        };
        let out = mw.simulate(&model, Some(Horizon::Hyperperiods(3)), 0).unwrap();
        let rt = by_job(&out.trace, EventKind::ReleaseTheoretical);
        let done = by_job(&out.trace, EventKind::JobComplete);
        prop_assert_eq!(rt.len(), 3);
        for (k, t0) in rt {
            prop_assert_eq!(done[&k] - t0, us(scan) + sort + us(g) + us(wcet_us));
        }
    }

    #[test]
    fn sporadic_releases_are_separated(gaps in prop::collection::vec(0u64..12, 1..12)) {
        let mut mw = Middleware::init(PolicyConfig::new(MappingScheme::Global, PriorityAssignment::Edf, 1)).unwrap();
        let p = mw.task_decl(TaskDescriptor::periodic("tick", ms(1))).unwrap();
        mw.version_decl(p, VersionDescriptor::new("v", us(10), VSelect::Unspecified)).unwrap();
        let s = mw.task_decl(TaskDescriptor::sporadic("s", ms(5))).unwrap();
        mw.version_decl(s, VersionDescriptor::new("v", us(100), VSelect::Unspecified)).unwrap();
        let mut at = 0;
        let activations = gaps
            .iter()
            .map(|g| {
                at += ms(*g);
                ScriptedActivation { task: "s".into(), at }
            })
            .collect();
        let model = SimJobModel { activations, ..SimJobModel::zero() };
        let out = mw.simulate(&model, Some(Horizon::Nanos(at + ms(100))), 0).unwrap();
        let releases: Vec<Nanos> = by_job(&out.trace, EventKind::ReleaseTheoretical)
            .into_iter()
            .filter(|((t, _), _)| *t == s)
            .map(|(_, t)| t)
            .collect();
        prop_assert_eq!(releases.len(), gaps.len());
        for w in releases.windows(2) {
            prop_assert!(w[1] - w[0] >= ms(5), "{:?}", releases);
        }
    }
}

#[test]
fn graph_nodes_wait_for_their_producers() {
    let mut config = PolicyConfig::new(MappingScheme::Global, PriorityAssignment::Edf, 2);
    config.scheduler_tick = Some(ms(1));
    let mut mw = Middleware::init(config).unwrap();
    let src = mw.task_decl(TaskDescriptor::periodic("src", ms(20))).unwrap();
    let mid = mw.task_decl(TaskDescriptor::graph_node("mid")).unwrap();
    let dst = mw.task_decl(TaskDescriptor::graph_node("dst")).unwrap();
    for (t, w) in [(src, 3), (mid, 4), (dst, 2)] {
        mw.version_decl(t, VersionDescriptor::new("v", ms(w), VSelect::Unspecified)).unwrap();
    }
    let a = mw.channel_decl("a", 8, 4).unwrap();
    let b = mw.channel_decl("b", 8, 4).unwrap();
    mw.channel_connect(src, mid, a).unwrap();
    mw.channel_connect(mid, dst, b).unwrap();
    let out = mw.simulate(&SimJobModel::zero(), Some(Horizon::Hyperperiods(5)), 0).unwrap();
    let start = by_job(&out.trace, EventKind::JobStart);
    let done = by_job(&out.trace, EventKind::JobComplete);
    for seq in 0..5 {
        assert!(start[&(mid, seq)] >= done[&(src, seq)]);
        assert!(start[&(dst, seq)] >= done[&(mid, seq)]);
    }
    assert_eq!(out.report.misses, 0);
}
