use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Label, Semiring, StateId, Wfst, EPSILON};
use crate::error::{Error, Result};

/// ⊕-sum of path weights from the start to each state.
///
/// Log mode needs an acyclic machine. Tropical mode runs in topological
/// order when possible and falls back to Dijkstra (weights are
/// non-negative) otherwise.
pub fn shortest_distance(m: &Wfst, semiring: Semiring) -> Result<Vec<f64>> {
    let mut dist = vec![f64::INFINITY; m.num_states()];
    let Some(start) = m.start() else {
        return Ok(dist);
    };
    match m.topological_order() {
        Some(order) => {
            dist[start as usize] = 0.0;
            for s in order {
                let ds = dist[s as usize];
                if ds == f64::INFINITY {
                    continue;
                }
                for a in m.arcs(s) {
                    let t = a.nextstate as usize;
                    dist[t] = semiring.plus(dist[t], ds + a.weight);
                }
            }
            Ok(dist)
        }
        None if semiring == Semiring::Log => Err(Error::Cyclic),
        None => {
            let adj: Vec<Vec<(StateId, f64)>> = m
                .states()
                .map(|s| m.arcs(s).iter().map(|a| (a.nextstate, a.weight)).collect())
                .collect();
            dijkstra(&adj, &[(start, 0.0)], &mut dist);
            Ok(dist)
        }
    }
}

/// ⊕-sum of path weights from each state to a final state, including the
/// final weight.
pub fn shortest_distance_to_final(m: &Wfst, semiring: Semiring) -> Result<Vec<f64>> {
    let mut dist = vec![f64::INFINITY; m.num_states()];
    let order = match m.topological_order() {
        Some(o) => o,
        None if semiring == Semiring::Log => return Err(Error::Cyclic),
        None => {
            let mut rev: Vec<Vec<(StateId, f64)>> = vec![Vec::new(); m.num_states()];
            for s in m.states() {
                for a in m.arcs(s) {
                    rev[a.nextstate as usize].push((s, a.weight));
                }
            }
            let sources: Vec<(StateId, f64)> = m
                .states()
                .filter(|&s| m.is_final(s))
                .map(|s| (s, m.final_weight(s)))
                .collect();
            dijkstra(&rev, &sources, &mut dist);
            return Ok(dist);
        }
    };
    // States unreachable from the start are left at +inf.
    for &s in order.iter().rev() {
        let mut d = m.final_weight(s);
        for a in m.arcs(s) {
            d = semiring.plus(d, a.weight + dist[a.nextstate as usize]);
        }
        dist[s as usize] = d;
    }
    Ok(dist)
}

#[derive(PartialEq)]
struct MinF64<T>(f64, T);

impl<T: Ord> Eq for MinF64<T> {}

impl<T: Ord> PartialOrd for MinF64<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Ord> Ord for MinF64<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

fn dijkstra(adj: &[Vec<(StateId, f64)>], sources: &[(StateId, f64)], dist: &mut [f64]) {
    let mut heap = BinaryHeap::new();
    for &(s, w) in sources {
        if w < dist[s as usize] {
            dist[s as usize] = w;
            heap.push(MinF64(w, s));
        }
    }
    while let Some(MinF64(d, s)) = heap.pop() {
        if d > dist[s as usize] {
            continue;
        }
        for &(t, w) in &adj[s as usize] {
            let nd = d + w;
            if nd < dist[t as usize] {
                dist[t as usize] = nd;
                heap.push(MinF64(nd, t));
            }
        }
    }
}

/// A successful path. Label vectors omit ε.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub input: Vec<Label>,
    pub output: Vec<Label>,
    /// Sum of arc weights plus the final weight, added in path order.
    pub weight: f64,
    /// `(state, arc index)` for each arc taken.
    pub arcs: Vec<(StateId, u32)>,
}

impl Path {
    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then_with(|| self.output.cmp(&other.output))
            .then_with(|| self.arcs.cmp(&other.arcs))
    }
}

pub fn shortest_path(m: &Wfst) -> Result<Option<Path>> {
    Ok(n_shortest_paths(m, 1)?.into_iter().next())
}

/// The `n` lightest successful paths, lightest first; ties are ordered by
/// output labels, then by arc sequence. Paths that realize the same string
/// pair through different arcs are reported separately.
///
/// Best-first search with the exact distance-to-final as heuristic, so
/// completed paths come off the queue in weight order.
pub fn n_shortest_paths(m: &Wfst, n: usize) -> Result<Vec<Path>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let Some(start) = m.start() else {
        return Ok(Vec::new());
    };
    let h = shortest_distance_to_final(m, Semiring::Tropical)?;
    if !h[start as usize].is_finite() {
        return Ok(Vec::new());
    }

    // Partial paths live in an arena; each node links to its parent.
    struct Node {
        parent: u32,
        state: StateId,
        arc: u32,
        g: f64,
    }
    const ROOT: u32 = u32::MAX;
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    enum Item {
        Complete(u32),
        Partial(u32),
    }
    let mut nodes = vec![Node {
        parent: ROOT,
        state: start,
        arc: 0,
        g: 0.0,
    }];
    let mut heap = BinaryHeap::new();
    heap.push(MinF64(h[start as usize], Item::Partial(0)));

    let unwind = |nodes: &[Node], leaf: u32, weight: f64| -> Path {
        let mut arcs = Vec::new();
        let mut cur = leaf;
        while nodes[cur as usize].parent != ROOT {
            let node = &nodes[cur as usize];
            arcs.push((nodes[node.parent as usize].state, node.arc));
            cur = node.parent;
        }
        arcs.reverse();
        let mut input = Vec::new();
        let mut output = Vec::new();
        for &(s, i) in &arcs {
            let a = &m.arcs(s)[i as usize];
            if a.ilabel != EPSILON {
                input.push(a.ilabel);
            }
            if a.olabel != EPSILON {
                output.push(a.olabel);
            }
        }
        Path {
            input,
            output,
            weight,
            arcs,
        }
    };

    let mut out: Vec<Path> = Vec::new();
    let mut pending: Vec<Path> = Vec::new();
    while let Some(MinF64(f, item)) = heap.pop() {
        // Ties with the pending group must all be collected before the
        // group can be ordered and released.
        if let Some(first) = pending.first() {
            if f > first.weight + 1e-9 * first.weight.abs().max(1.0) {
                pending.sort_by(Path::sort_key_cmp);
                out.append(&mut pending);
                if out.len() >= n {
                    break;
                }
            }
        }
        match item {
            Item::Complete(leaf) => pending.push(unwind(&nodes, leaf, f)),
            Item::Partial(id) => {
                let (state, g) = (nodes[id as usize].state, nodes[id as usize].g);
                let fw = m.final_weight(state);
                if fw.is_finite() {
                    heap.push(MinF64(g + fw, Item::Complete(id)));
                }
                for (i, a) in m.arcs(state).iter().enumerate() {
                    let ht = h[a.nextstate as usize];
                    if !ht.is_finite() || !a.weight.is_finite() {
                        continue;
                    }
                    let g2 = g + a.weight;
                    nodes.push(Node {
                        parent: id,
                        state: a.nextstate,
                        arc: i as u32,
                        g: g2,
                    });
                    heap.push(MinF64(g2 + ht, Item::Partial(nodes.len() as u32 - 1)));
                }
            }
        }
    }
    pending.sort_by(Path::sort_key_cmp);
    out.append(&mut pending);
    out.truncate(n);
    Ok(out)
}
