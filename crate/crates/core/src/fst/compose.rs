use std::collections::VecDeque;

use rustc_hash::FxHashMap;

use super::{Arc, Label, StateId, Wfst, EPSILON};
use crate::error::{Error, Result};

/// Position of an arc inside a machine: `(state, index into arcs(state))`.
pub type ArcRef = (StateId, u32);

/// Result of [`compose_with_origin`]: the machine plus, for every arc, the
/// operand arcs it was built from. `None` means that side did not move.
#[derive(Debug, Clone)]
pub struct Composed {
    pub fst: Wfst,
    pub origin: Vec<Vec<(Option<ArcRef>, Option<ArcRef>)>>,
}

pub fn compose(a: &Wfst, b: &Wfst) -> Result<Wfst> {
    Ok(compose_with_origin(a, b)?.fst)
}

/// Composes `a` with `b`, keeping only states reachable from the start.
///
/// ε-handling uses a two-state sequencing filter. Between two matched
/// moves, every path first takes `a`'s output-ε arcs (filter state 0),
/// then `b`'s input-ε arcs (filter state 1). Once `b` has moved alone, `a`
/// may not, so each pair of operand paths yields exactly one composed path.
pub fn compose_with_origin(a: &Wfst, b: &Wfst) -> Result<Composed> {
    if a.output_symbols() != b.input_symbols() {
        return Err(Error::AlphabetMismatch {
            left: a.output_symbols(),
            right: b.input_symbols(),
        });
    }
    let mut fst = Wfst::new(a.input_symbols(), b.output_symbols());
    let mut origin: Vec<Vec<(Option<ArcRef>, Option<ArcRef>)>> = Vec::new();
    let (Some(sa), Some(sb)) = (a.start(), b.start()) else {
        return Ok(Composed { fst, origin });
    };

    // b's arcs per state, sorted by input label for matching.
    let b_index: Vec<Vec<u32>> = b
        .states()
        .map(|s| {
            let arcs = b.arcs(s);
            let mut idx: Vec<u32> = (0..arcs.len() as u32).collect();
            idx.sort_by_key(|&i| arcs[i as usize].ilabel);
            idx
        })
        .collect();
    let matching = |s: StateId, label: Label| -> &[u32] {
        let idx = &b_index[s as usize];
        let arcs = b.arcs(s);
        let lo = idx.partition_point(|&i| arcs[i as usize].ilabel < label);
        let hi = idx.partition_point(|&i| arcs[i as usize].ilabel <= label);
        &idx[lo..hi]
    };

    let mut ids: FxHashMap<(StateId, StateId, u8), StateId> = FxHashMap::default();
    let mut queue = VecDeque::new();
    let mut intern = |fst: &mut Wfst,
                      origin: &mut Vec<Vec<_>>,
                      queue: &mut VecDeque<(StateId, StateId, u8, StateId)>,
                      key: (StateId, StateId, u8)| {
        *ids.entry(key).or_insert_with(|| {
            let id = fst.add_state();
            origin.push(Vec::new());
            queue.push_back((key.0, key.1, key.2, id));
            id
        })
    };

    let start = intern(&mut fst, &mut origin, &mut queue, (sa, sb, 0));
    fst.set_start(start);
    while let Some((qa, qb, filter, id)) = queue.pop_front() {
        let fw = a.final_weight(qa) + b.final_weight(qb);
        if fw.is_finite() {
            fst.set_final(id, fw);
        }
        for (ia, ea) in a.arcs(qa).iter().enumerate() {
            let ra = Some((qa, ia as u32));
            if ea.olabel == EPSILON {
                if filter == 0 {
                    let t = intern(&mut fst, &mut origin, &mut queue, (ea.nextstate, qb, 0));
                    fst.add_arc(id, Arc::new(ea.ilabel, EPSILON, ea.weight, t));
                    origin[id as usize].push((ra, None));
                }
                continue;
            }
            for &ib in matching(qb, ea.olabel) {
                let eb = &b.arcs(qb)[ib as usize];
                let t = intern(&mut fst, &mut origin, &mut queue, (ea.nextstate, eb.nextstate, 0));
                fst.add_arc(id, Arc::new(ea.ilabel, eb.olabel, ea.weight + eb.weight, t));
                origin[id as usize].push((ra, Some((qb, ib))));
            }
        }
        for &ib in matching(qb, EPSILON) {
            let eb = &b.arcs(qb)[ib as usize];
            let t = intern(&mut fst, &mut origin, &mut queue, (qa, eb.nextstate, 1));
            fst.add_arc(id, Arc::new(EPSILON, eb.olabel, eb.weight, t));
            origin[id as usize].push((None, Some((qb, ib))));
        }
    }
    Ok(Composed { fst, origin })
}
