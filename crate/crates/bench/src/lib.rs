//! Workload generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtmw_core::graph::SdfGraph;
use rtmw_core::{
    ms, JobClass, MappingScheme, Middleware, PolicyConfig, PriorityAssignment, PriorityKey, TaskDescriptor, TaskId,
    VSelect, VersionDescriptor,
};

const PERIODS_MS: [u64; 6] = [10, 20, 25, 40, 50, 100];

/// `n` utilizations summing to `total` (UUniFast).
pub fn uunifast(rng: &mut impl Rng, n: usize, total: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut sum = total;
    for i in 1..n {
        let next = sum * rng.gen::<f64>().powf(1.0 / (n - i) as f64);
        out.push(sum - next);
        sum = next;
    }
    out.push(sum);
    out
}

/// `tasks` implicit-deadline periodic tasks spread over `workers`, with
/// total utilization `util_per_worker * workers`.
pub fn periodic_set(
    mapping: MappingScheme,
    priority: PriorityAssignment,
    workers: usize,
    tasks: usize,
    util_per_worker: f64,
    seed: u64,
) -> Middleware {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mw = Middleware::init(PolicyConfig::new(mapping, priority, workers)).expect("valid config");
    let utils = uunifast(&mut rng, tasks, util_per_worker * workers as f64);
    for (i, u) in utils.into_iter().enumerate() {
        let period = ms(PERIODS_MS[rng.gen_range(0..PERIODS_MS.len())]);
        let wcet = ((u.min(1.0) * period as f64) as u64).max(1);
        let t = mw
            .task_decl(TaskDescriptor::periodic(&format!("t{i}"), period).on_core(i % workers))
            .expect("valid task");
        mw.version_decl(t, VersionDescriptor::new("v", wcet, VSelect::Unspecified))
            .expect("valid version");
    }
    mw
}

/// A shuffled ready queue of `len` EDF keys.
pub fn ready_queue(len: usize, seed: u64) -> Vec<PriorityKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| PriorityKey {
            class: JobClass::Recurring,
            primary: rng.gen_range(0..ms(100)),
            task: TaskId(i as u32),
            seq: 0,
        })
        .collect()
}

/// A chain `a0 -> a1 -> ...` whose repetition vector grows with `actors`.
pub fn sdf_chain(actors: usize) -> SdfGraph {
    let names: Vec<String> = (0..actors).map(|i| format!("a{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut g = SdfGraph::new(&refs);
    for i in 1..actors {
        let (p, c) = if i % 2 == 0 { (2, 3) } else { (3, 2) };
        g = g.edge(&names[i - 1], &names[i], p, c);
    }
    g
}
