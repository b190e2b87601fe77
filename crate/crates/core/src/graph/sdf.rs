//! Synchronous dataflow graphs and their expansion into a precedence DAG.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::gcd;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdfActor {
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdfEdge {
    pub src: String,
    pub dst: String,
    pub produce: u32,
    pub consume: u32,
    #[serde(default)]
    pub initial_tokens: u32,
}

impl SdfEdge {
    fn label(&self) -> String {
        format!("{}->{} ({},{})", self.src, self.dst, self.produce, self.consume)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdfGraph {
    pub actors: Vec<SdfActor>,
    pub edges: Vec<SdfEdge>,
}

impl SdfGraph {
    pub fn new(actors: &[&str]) -> Self {
        SdfGraph {
            actors: actors
                .iter()
                .map(|a| SdfActor {
                    name: a.to_string(),
                })
                .collect(),
            edges: Vec::new(),
        }
    }

    pub fn edge(mut self, src: &str, dst: &str, produce: u32, consume: u32) -> Self {
        self.edges.push(SdfEdge {
            src: src.into(),
            dst: dst.into(),
            produce,
            consume,
            initial_tokens: 0,
        });
        self
    }

    fn index(&self) -> Result<Vec<(usize, usize)>> {
        let mut by_name = BTreeMap::new();
        for (i, a) in self.actors.iter().enumerate() {
            if by_name.insert(a.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate SDF actor {}", a.name)));
            }
        }
        let lookup = |n: &str| {
            by_name
                .get(n)
                .copied()
                .ok_or_else(|| Error::unknown("SDF actor", n))
        };
        self.edges
            .iter()
            .map(|e| {
                if e.produce == 0 || e.consume == 0 {
                    return Err(Error::Config(format!("SDF edge {} has a zero rate", e.label())));
                }
                Ok((lookup(&e.src)?, lookup(&e.dst)?))
            })
            .collect()
    }
}

/// One node of the expanded DAG: firing `copy` of `actor` within an iteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExpandedNode {
    pub name: String,
    pub actor: usize,
    pub copy: u64,
}

/// Precedence edge between two expanded nodes, carrying `tokens` tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExpandedEdge {
    pub src: usize,
    pub dst: usize,
    pub tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Expansion {
    /// Repetition count per actor, in actor declaration order.
    pub repetition: Vec<(String, u64)>,
    pub nodes: Vec<ExpandedNode>,
    pub edges: Vec<ExpandedEdge>,
}

impl Expansion {
    /// `"A:3 B:2"`.
    pub fn repetition_line(&self) -> String {
        self.repetition
            .iter()
            .map(|(a, q)| format!("{a}:{q}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Minimal positive integer solution of the balance equations.
pub fn repetition_vector(g: &SdfGraph) -> Result<Vec<u64>> {
    let ends = g.index()?;
    let n = g.actors.len();
    if n == 0 {
        return Err(Error::Config("SDF graph has no actors".into()));
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, &(s, d)) in ends.iter().enumerate() {
        adj[s].push(k);
        adj[d].push(k);
    }
    // rational firing rates relative to actor 0, as reduced (num, den)
    let mut rate: Vec<Option<(u128, u128)>> = vec![None; n];
    rate[0] = Some((1, 1));
    let mut queue = VecDeque::from([0usize]);
    let overflow = || Error::Config("SDF repetition vector overflows".into());
    while let Some(a) = queue.pop_front() {
        let (num, den) = rate[a].expect("visited");
        for &k in &adj[a] {
            let e = &g.edges[k];
            let (s, d) = ends[k];
            // p * q[s] = c * q[d]
            let (p, c) = (u128::from(e.produce), u128::from(e.consume));
            let (other, n2, d2) = if s == a {
                (d, num.checked_mul(p).ok_or_else(overflow)?, den.checked_mul(c).ok_or_else(overflow)?)
            } else {
                (s, num.checked_mul(c).ok_or_else(overflow)?, den.checked_mul(p).ok_or_else(overflow)?)
            };
            let g2 = gcd128(n2, d2);
            let r = (n2 / g2, d2 / g2);
            match rate[other] {
                None => {
                    rate[other] = Some(r);
                    queue.push_back(other);
                }
                Some(prev) if prev != r => {
                    return Err(Error::Inconsistent { edge: e.label() })
                }
                Some(_) => {}
            }
        }
    }
    if let Some(i) = rate.iter().position(Option::is_none) {
        return Err(Error::Config(format!(
            "SDF graph is not connected: actor {} unreachable",
            g.actors[i].name
        )));
    }
    let rate: Vec<(u128, u128)> = rate.into_iter().map(Option::unwrap).collect();
    let mut l: u128 = 1;
    for &(_, den) in &rate {
        l = (l / gcd128(l, den)).checked_mul(den).ok_or_else(overflow)?;
    }
    let scaled: Vec<u128> = rate.iter().map(|&(num, den)| num * (l / den)).collect();
    let common = scaled.iter().copied().fold(0, gcd128);
    let q: Vec<u64> = scaled
        .iter()
        .map(|&v| u64::try_from(v / common).map_err(|_| overflow()))
        .collect::<Result<_>>()?;
    // parallel edges that never got traversed as tree edges still need checking
    for (k, &(s, d)) in ends.iter().enumerate() {
        let e = &g.edges[k];
        if u128::from(e.produce) * u128::from(q[s]) != u128::from(e.consume) * u128::from(q[d]) {
            return Err(Error::Inconsistent { edge: e.label() });
        }
    }
    Ok(q)
}

fn gcd128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Expands one iteration of `g` into a DAG of `actor#k` nodes.
///
/// Firings follow a class-S schedule that always picks the lowest-indexed
/// fireable actor. Every token is labelled with the node that produced it;
/// a consumer gets one edge per distinct producer it drew tokens from.
/// Tokens present before the iteration (initial tokens) create no edge.
pub fn expand_sdf(g: &SdfGraph) -> Result<Expansion> {
    let q = repetition_vector(g)?;
    let ends = g.index()?;
    let total: u64 = q.iter().sum();
    if total > 100_000 {
        return Err(Error::Config(format!(
            "SDF expansion would create {total} nodes"
        )));
    }
    let mut fifo: Vec<VecDeque<Option<usize>>> = g
        .edges
        .iter()
        .map(|e| std::iter::repeat_n(None, e.initial_tokens as usize).collect())
        .collect();
    let mut fired = vec![0u64; q.len()];
    let mut nodes = Vec::with_capacity(total as usize);
    let mut edges = Vec::new();
    let inputs: Vec<Vec<usize>> = (0..q.len())
        .map(|a| (0..ends.len()).filter(|&k| ends[k].1 == a).collect())
        .collect();
    let outputs: Vec<Vec<usize>> = (0..q.len())
        .map(|a| (0..ends.len()).filter(|&k| ends[k].0 == a).collect())
        .collect();

    while nodes.len() < total as usize {
        let next = (0..q.len()).find(|&a| {
            fired[a] < q[a]
                && inputs[a]
                    .iter()
                    .all(|&k| fifo[k].len() >= g.edges[k].consume as usize)
        });
        let Some(a) = next else {
            let blocked: Vec<String> = (0..q.len())
                .filter(|&a| fired[a] < q[a])
                .map(|a| g.actors[a].name.clone())
                .collect();
            return Err(Error::Deadlock(blocked.join(", ")));
        };
        let node = nodes.len();
        nodes.push(ExpandedNode {
            name: format!("{}#{}", g.actors[a].name, fired[a]),
            actor: a,
            copy: fired[a],
        });
        fired[a] += 1;
        let mut from: BTreeMap<usize, u32> = BTreeMap::new();
        for &k in &inputs[a] {
            for label in fifo[k].drain(..g.edges[k].consume as usize).flatten() {
                *from.entry(label).or_default() += 1;
            }
        }
        edges.extend(from.into_iter().map(|(src, tokens)| ExpandedEdge {
            src,
            dst: node,
            tokens,
        }));
        for &k in &outputs[a] {
            fifo[k].extend(std::iter::repeat_n(Some(node), g.edges[k].produce as usize));
        }
    }
    Ok(Expansion {
        repetition: g
            .actors
            .iter()
            .zip(&q)
            .map(|(a, &n)| (a.name.clone(), n))
            .collect(),
        nodes,
        edges,
    })
}

/// Reference search used by tests: scans q[0] = 1, 2, … up to `limit` and
/// derives the remaining entries edge by edge.
#[doc(hidden)]
pub fn brute_force_repetition(g: &SdfGraph, limit: u64) -> Option<Vec<u64>> {
    let ends = g.index().ok()?;
    let n = g.actors.len();
    'outer: for q0 in 1..=limit {
        let mut q: Vec<Option<u64>> = vec![None; n];
        q[0] = Some(q0);
        let mut changed = true;
        while changed {
            changed = false;
            for (k, &(s, d)) in ends.iter().enumerate() {
                let (p, c) = (u64::from(g.edges[k].produce), u64::from(g.edges[k].consume));
                match (q[s], q[d]) {
                    (Some(qs), None) => {
                        if (p * qs) % c != 0 {
                            continue 'outer;
                        }
                        q[d] = Some(p * qs / c);
                        changed = true;
                    }
                    (None, Some(qd)) => {
                        if (c * qd) % p != 0 {
                            continue 'outer;
                        }
                        q[s] = Some(c * qd / p);
                        changed = true;
                    }
                    (Some(qs), Some(qd)) if p * qs != c * qd => continue 'outer,
                    _ => {}
                }
            }
        }
        let q: Option<Vec<u64>> = q.into_iter().collect();
        if let Some(q) = q {
            if q.iter().copied().fold(0, gcd) == 1 {
                return Some(q);
            }
        }
    }
    None
}
