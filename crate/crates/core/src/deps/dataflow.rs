use std::collections::BTreeSet;

use crate::asm::Function;
use crate::error::Result;

use super::cfg::Cfg;
use super::locations::{def_use, step_frame, AnalysisOptions, DefUse, Frame, Location};

/// Stack state before every instruction, by forward propagation over the
/// CFG. States that disagree at a join become untracked; unreachable code
/// gets [`Frame::UNKNOWN`].
pub fn frame_states(func: &Function, cfg: &Cfg) -> Vec<Frame> {
    let n = cfg.num_blocks();
    let mut entry: Vec<Option<Frame>> = vec![None; n];
    if n > 0 {
        entry[0] = Some(Frame::ENTRY);
    }
    let mut work: Vec<usize> = (0..n).rev().collect();
    while let Some(b) = work.pop() {
        let Some(mut state) = entry[b] else { continue };
        for i in cfg.blocks[b].instructions() {
            state = step_frame(&func.instructions[i], state);
        }
        for s in cfg.successors(b) {
            if s == cfg.exit() {
                continue;
            }
            let merged = match entry[s] {
                None => state,
                Some(old) => old.meet(state),
            };
            if entry[s] != Some(merged) {
                entry[s] = Some(merged);
                if !work.contains(&s) {
                    work.push(s);
                }
            }
        }
    }

    let mut out = vec![Frame::UNKNOWN; func.instructions.len()];
    for (b, blk) in cfg.blocks.iter().enumerate() {
        let Some(mut state) = entry[b] else { continue };
        for i in blk.instructions() {
            out[i] = state;
            state = step_frame(&func.instructions[i], state);
        }
    }
    out
}

/// Def/use sets for every instruction under the tracked stack states.
pub fn def_use_table(func: &Function, frames: &[Frame], opts: &AnalysisOptions) -> Result<Vec<DefUse>> {
    func.instructions
        .iter()
        .zip(frames)
        .map(|(inst, frame)| def_use(inst, frame, opts))
        .collect()
}

struct BitSet(Vec<u64>);

impl BitSet {
    fn new(n: usize) -> Self {
        BitSet(vec![0; n.div_ceil(64)])
    }
    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn remove(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
    fn union_with(&mut self, other: &BitSet) -> bool {
        let mut changed = false;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            let new = *a | *b;
            changed |= new != *a;
            *a = new;
        }
        changed
    }
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &bits)| {
            (0..64).filter(move |b| bits & (1 << b) != 0).map(move |b| w * 64 + b)
        })
    }
}

impl Clone for BitSet {
    fn clone(&self) -> Self {
        BitSet(self.0.clone())
    }
}

/// Data dependences `(u, v)`, meaning instruction `u` may read a value
/// written by `v`, from a reaching-definitions fixpoint.
///
/// A definition is killed only by a later write to the same precise location
/// (register, flags, or one stack slot). A use depends on every reaching
/// definition whose location may overlap it.
pub fn data_dependences(cfg: &Cfg, table: &[DefUse]) -> BTreeSet<(usize, usize)> {
    // Enumerate definitions.
    let mut defs: Vec<(usize, Location)> = Vec::new();
    let mut defs_of: Vec<Vec<usize>> = vec![Vec::new(); table.len()];
    for (i, du) in table.iter().enumerate() {
        for &loc in &du.defs {
            defs_of[i].push(defs.len());
            defs.push((i, loc));
        }
    }
    let nd = defs.len();
    let killers = |i: usize, set: &mut BitSet| {
        for &loc in &table[i].defs {
            if loc.is_precise() {
                for (d, &(_, l)) in defs.iter().enumerate() {
                    if l == loc {
                        set.remove(d);
                    }
                }
            }
        }
        for &d in &defs_of[i] {
            set.insert(d);
        }
    };

    let n = cfg.num_blocks();
    let mut block_in = vec![BitSet::new(nd); n];
    let mut block_out = vec![BitSet::new(nd); n];
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..n {
            let mut inset = BitSet::new(nd);
            for &p in &cfg.preds[b] {
                inset.union_with(&block_out[p]);
            }
            let mut out = inset.clone();
            for i in cfg.blocks[b].instructions() {
                killers(i, &mut out);
            }
            block_in[b] = inset;
            if block_out[b].union_with(&out) {
                changed = true;
            }
        }
    }

    let mut edges = BTreeSet::new();
    for b in 0..n {
        let mut reaching = block_in[b].clone();
        for u in cfg.blocks[b].instructions() {
            for use_loc in &table[u].uses {
                for d in reaching.iter() {
                    let (v, def_loc) = defs[d];
                    if v != u && use_loc.overlaps(def_loc) {
                        edges.insert((u, v));
                    }
                }
            }
            killers(u, &mut reaching);
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_listing;
    use crate::deps::build_cfg;
    use crate::deps::locations::Track;

    fn deps(body: &str) -> BTreeSet<(usize, usize)> {
        let f = parse_listing(&format!(".func f\n{body}\n")).unwrap().remove(0);
        let cfg = build_cfg(&f).unwrap();
        let frames = frame_states(&f, &cfg);
        let table = def_use_table(&f, &frames, &AnalysisOptions::default()).unwrap();
        data_dependences(&cfg, &table)
    }

    fn set(xs: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
        xs.iter().copied().collect()
    }

    #[test]
    fn four_instruction_example() {
        let got = deps("mov rax, rbx\nmov [rsp + 0x10], rax\nmov rcx, [rsp + 0x10]\nmov rdx, [rcx]");
        assert_eq!(got, set(&[(1, 0), (2, 1), (3, 1)]));
    }

    #[test]
    fn single_instruction_has_no_dependences() {
        assert!(deps("add rax, rbx").is_empty());
    }

    #[test]
    fn diamond_join_sees_both_definitions() {
        let got = deps("test edi, edi\nje .else\nmov eax, 1\njmp .join\n.else:\nmov eax, 2\n.join:\nmov ebx, eax");
        // 0 test, 1 je, 2 mov, 3 jmp, 4 mov, 5 mov
        assert_eq!(got, set(&[(5, 2), (5, 4)]));
    }

    #[test]
    fn kills_are_precise_only() {
        // The memory-wide store does not kill the slot store.
        let got = deps("mov [rsp+8], rax\nmov [rbx], rcx\nmov rdx, [rsp+8]");
        assert_eq!(got, set(&[(2, 0), (2, 1)]));
        // A second store to the same slot does.
        let got = deps("mov [rsp+8], rax\nmov [rsp+8], rcx\nmov rdx, [rsp+8]");
        assert_eq!(got, set(&[(2, 1)]));
    }

    #[test]
    fn loop_carried_dependences() {
        let got = deps("mov ecx, 10\n.top:\nadd eax, ecx\ndec ecx\njnz .top\nret");
        // 0 mov, 1 add, 2 dec, 3 jnz, 4 ret
        assert_eq!(got, set(&[(1, 0), (1, 2), (2, 0), (4, 1)]));
    }

    #[test]
    fn frames_meet_at_joins() {
        let f = parse_listing(".func f\ntest eax, eax\nje .skip\npush rbx\n.skip:\nmov rax, [rsp]\nret\n")
            .unwrap()
            .remove(0);
        let cfg = build_cfg(&f).unwrap();
        let frames = frame_states(&f, &cfg);
        assert_eq!(frames[2].rsp, Track::Known(0));
        assert_eq!(frames[3].rsp, Track::Untracked);
    }

    #[test]
    fn stack_round_trip_through_push_pop() {
        let got = deps("push rbx\nmov rbx, rdi\npop rbx\nmov rax, rbx");
        assert_eq!(got, set(&[(2, 0), (3, 2)]));
    }
}
