use std::time::Duration;

use rtmw_core::{
    ms, EventKind, MappingScheme, Middleware, Phase, PolicyConfig, PriorityAssignment, RealtimeOptions, TaskDescriptor,
    TaskId, VSelect, VersionDescriptor,
};

#[derive(Clone, Copy, Debug)]
enum Op {
    Declare,
    Start,
    Stop,
    Cleanup,
    Activate,
}

const OPS: [Op; 5] = [Op::Declare, Op::Start, Op::Stop, Op::Cleanup, Op::Activate];

fn options() -> RealtimeOptions {
    RealtimeOptions {
        oversubscribe: true,
        lock_memory: false,
        pin_threads: false,
        drain_timeout: Duration::from_secs(5),
        ..RealtimeOptions::default()
    }
}

fn fresh() -> (Middleware, TaskId) {
    let mut mw = Middleware::init(PolicyConfig::new(MappingScheme::Global, PriorityAssignment::Edf, 1)).unwrap();
    mw.set_realtime_options(options());
    let s = mw.task_decl(TaskDescriptor::sporadic("s", ms(5))).unwrap();
    mw.version_decl(s, VersionDescriptor::new("v", 100_000, VSelect::Unspecified)).unwrap();
    (mw, s)
}

/// Expected phase after `op`, or `None` when the transition is illegal.
fn model(phase: Phase, op: Op) -> Option<Phase> {
    use Phase::*;
    match (op, phase) {
        (Op::Declare, Initialized | Stopped) => Some(phase),
        (Op::Start, Initialized | Stopped) => Some(Running),
        (Op::Stop, Running) => Some(Stopped),
        (Op::Cleanup, Stopped) => Some(Cleaned),
        (Op::Activate, Running) => Some(Running),
        _ => None,
    }
}

fn apply(mw: &mut Middleware, s: TaskId, op: Op, n: usize) -> bool {
    match op {
        Op::Declare => mw
            .task_decl(TaskDescriptor::periodic(&format!("p{n}"), ms(10)))
            .and_then(|t| mw.version_decl(t, VersionDescriptor::new("v", 100_000, VSelect::Unspecified)))
            .is_ok(),
        Op::Start => mw.start().is_ok(),
        Op::Stop => mw.stop().is_ok(),
        Op::Cleanup => mw.cleanup().is_ok(),
        Op::Activate => mw.task_activate(s).is_ok(),
    }
}

#[test]
fn phase_machine_matches_model_on_every_short_sequence() {
    let mut level: Vec<Vec<Op>> = vec![vec![]];
    let mut seqs = Vec::new();
    for _ in 0..4 {
        level = level
            .iter()
            .flat_map(|s| OPS.iter().map(move |&op| [s.as_slice(), &[op]].concat()))
            .collect();
        seqs.extend(level.iter().cloned());
    }
    let mut checked = 0;
    for seq in &seqs {
        let (mut mw, s) = fresh();
        let mut expected = Phase::Initialized;
        for (n, &op) in seq.iter().enumerate() {
            let want = model(expected, op);
            let ok = apply(&mut mw, s, op, n);
            assert_eq!(ok, want.is_some(), "{seq:?}: {op:?} in {expected}");
            if let Some(p) = want {
                expected = p;
            }
            assert_eq!(mw.phase(), expected, "{seq:?} after {op:?}");
        }
        if mw.phase() == Phase::Running {
            mw.stop().unwrap();
        }
        checked += 1;
    }
    assert_eq!(checked, 5 + 25 + 125 + 625);
}

#[test]
fn stop_releases_nothing_new_and_drains() {
    let (mut mw, _) = fresh();
    let p = mw.task_decl(TaskDescriptor::periodic("p", ms(2))).unwrap();
    mw.version_decl(p, VersionDescriptor::new("v", 200_000, VSelect::Unspecified)).unwrap();
    mw.start().unwrap();
    std::thread::sleep(Duration::from_millis(30));
    mw.stop().unwrap();
    let (trace, report) = mw.last_run().unwrap();
    let released = trace.count(EventKind::ReleaseEffective);
    assert!(released > 0);
    assert_eq!(report.released, report.completed);
    assert_eq!(trace.count(EventKind::JobComplete), released);
}

#[test]
fn stopped_task_set_can_be_altered_and_restarted() {
    let (mut mw, _) = fresh();
    let a = mw.task_decl(TaskDescriptor::periodic("a", ms(4))).unwrap();
    mw.version_decl(a, VersionDescriptor::new("v", 100_000, VSelect::Unspecified)).unwrap();
    mw.start().unwrap();
    std::thread::sleep(Duration::from_millis(10));
    mw.stop().unwrap();
    let b = mw.task_decl(TaskDescriptor::periodic("b", ms(4))).unwrap();
    mw.version_decl(b, VersionDescriptor::new("v", 100_000, VSelect::Unspecified)).unwrap();
    mw.start().unwrap();
    std::thread::sleep(Duration::from_millis(10));
    let report = mw.stop().unwrap();
    assert!(report.task("b").is_some_and(|t| t.released > 0));
    mw.cleanup().unwrap();
    assert!(mw.start().is_err());
}
