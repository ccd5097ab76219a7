//! Random program generators and brute-force reference implementations
//! shared by the oracle, property and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use depattn::asm::{parse_listing, Function, TokenSequence};
use depattn::deps::{BasicBlock, Cfg, DefUse, DependenceGraph, EdgeKind};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const FIG5: &str = ".func fig5\n\
    mov eax, edi\n\
    mov ecx, esi\n\
    mov edx, 0x8\n\
    shl edx, 0x2\n\
    add edx, eax\n\
    mov esi, edx\n";

pub const FOUR: &str = ".func four\n\
    mov rax, rbx\n\
    mov [rsp + 0x10], rax\n\
    mov rcx, [rsp + 0x10]\n\
    mov rdx, [rcx]\n";

pub fn parse_one(text: &str) -> Function {
    parse_listing(text).unwrap().remove(0)
}

const REGS: [&str; 6] = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi"];
const SMALL: [&str; 4] = ["al", "bx", "ecx", "dl"];
const MEMS: [&str; 7] = [
    "[rsp + 8]",
    "[rsp + 16]",
    "qword ptr [rsp + 8]",
    "[rsp + rax*8 + 16]",
    "[rbx]",
    "[rdi + 8]",
    "[rbp - 8]",
];

fn straight_instruction(rng: &mut ChaCha8Rng) -> String {
    let reg = |rng: &mut ChaCha8Rng| *REGS.choose(rng).unwrap();
    let mem = |rng: &mut ChaCha8Rng| *MEMS.choose(rng).unwrap();
    match rng.random_range(0..16) {
        0 => format!("mov {}, {}", reg(rng), reg(rng)),
        1 => format!("mov {}, {}", reg(rng), rng.random_range(0..300)),
        2 => format!("add {}, {}", reg(rng), reg(rng)),
        3 => format!("sub {}, {}", reg(rng), rng.random_range(1..9)),
        4 => format!("mov {}, {}", reg(rng), mem(rng)),
        5 => format!("mov {}, {}", mem(rng), reg(rng)),
        6 => format!("cmp {}, {}", reg(rng), reg(rng)),
        7 => format!("lea {}, {}", reg(rng), mem(rng)),
        8 => format!("push {}", reg(rng)),
        9 => format!("pop {}", reg(rng)),
        10 => {
            let x = reg(rng);
            format!("xor {x}, {x}")
        }
        11 => format!("imul {}, {}", reg(rng), reg(rng)),
        12 => format!("mov {}, {}", SMALL.choose(rng).unwrap(), rng.random_range(0..9)),
        13 => format!("add {}, {}", mem(rng), reg(rng)),
        14 => "call helper".to_string(),
        _ => format!("test {}, {}", reg(rng), reg(rng)),
    }
}

/// Random loop-free program of `1..=max_len` instructions with forward
/// branches only.
pub fn loop_free_program(rng: &mut ChaCha8Rng, max_len: usize) -> Function {
    let n = rng.random_range(1..=max_len);
    let mut lines: Vec<String> = Vec::new();
    let mut pending: Vec<(usize, String)> = Vec::new();
    let mut next_label = 0;
    for i in 0..n {
        for (_, l) in pending.iter().filter(|(at, _)| *at == i) {
            lines.push(format!("{l}:"));
        }
        let roll = rng.random_range(0..10);
        if roll < 3 && i + 1 < n {
            let target = rng.random_range(i + 1..=n);
            let label = format!(".L{next_label}");
            next_label += 1;
            let op = if roll == 0 { "jmp" } else { *["je", "jne", "jl", "jge", "ja"].choose(rng).unwrap() };
            lines.push(format!("{op} {label}"));
            pending.push((target, label));
        } else if roll == 3 && i + 1 < n && rng.random_bool(0.3) {
            lines.push("ret".to_string());
        } else {
            lines.push(straight_instruction(rng));
        }
    }
    for (_, l) in pending.iter().filter(|(at, _)| *at == n) {
        lines.push(format!("{l}:"));
    }
    let text = format!(".func rand\n{}\n", lines.join("\n"));
    parse_one(&text)
}

/// Instruction-level successors computed straight from the listing;
/// `None` is the function exit.
pub fn instruction_successors(func: &Function) -> Vec<Vec<Option<usize>>> {
    let n = func.instructions.len();
    let next = |i: usize| if i + 1 < n { Some(i + 1) } else { None };
    let target = |label: &str| {
        let t = func.labels[label];
        if t < n {
            Some(t)
        } else {
            None
        }
    };
    func.instructions
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let label = inst.operands.first().and_then(|o| match o {
                depattn::asm::Operand::Label(l) => Some(l.as_str()),
                _ => None,
            });
            match inst.mnemonic.as_str() {
                "ret" => vec![],
                "jmp" => vec![target(label.unwrap())],
                m if m.starts_with('j') => vec![target(label.unwrap()), next(i)],
                _ => vec![next(i)],
            }
        })
        .collect()
}

/// Data dependences by enumerating every path through a loop-free program.
/// A definition `(v, L)` reaches `u` along a path unless some instruction
/// between them writes exactly `L` and `L` is precise.
pub fn path_data_oracle(func: &Function, table: &[DefUse]) -> BTreeSet<(usize, usize)> {
    let n = func.instructions.len();
    let succ = instruction_successors(func);
    let mut has_pred = vec![false; n];
    for ss in &succ {
        for s in ss.iter().flatten() {
            has_pred[*s] = true;
        }
    }
    let mut paths: Vec<Vec<usize>> = Vec::new();
    let mut stack: Vec<Vec<usize>> = (0..n).filter(|&i| i == 0 || !has_pred[i]).map(|i| vec![i]).collect();
    while let Some(path) = stack.pop() {
        let last = *path.last().unwrap();
        let mut ended = false;
        for s in &succ[last] {
            match s {
                Some(s) => {
                    let mut p = path.clone();
                    p.push(*s);
                    stack.push(p);
                }
                None => ended = true,
            }
        }
        if ended || succ[last].is_empty() {
            paths.push(path);
        }
    }

    let mut out = BTreeSet::new();
    for path in &paths {
        for p in 0..path.len() {
            let u = path[p];
            for q in 0..p {
                let v = path[q];
                for &ld in &table[v].defs {
                    if !table[u].uses.iter().any(|&lu| lu.overlaps(ld)) {
                        continue;
                    }
                    let killed = ld.is_precise()
                        && path[q + 1..p].iter().any(|&w| table[w].defs.contains(&ld));
                    if !killed && u != v {
                        out.insert((u, v));
                    }
                }
            }
        }
    }
    out
}

/// Random CFG of `1..=max_blocks` blocks, each holding 1 to 3 instructions
/// and one or two successors anywhere in the graph (exit included).
pub fn random_cfg(rng: &mut ChaCha8Rng, max_blocks: usize) -> Cfg {
    let nb = rng.random_range(1..=max_blocks);
    let mut blocks = Vec::new();
    let mut start = 0;
    for _ in 0..nb {
        let len = rng.random_range(1..=3);
        blocks.push(BasicBlock { start, end: start + len });
        start += len;
    }
    let succs = (0..nb)
        .map(|_| {
            let k = if rng.random_bool(0.5) { 2 } else { 1 };
            (0..k).map(|_| rng.random_range(0..=nb)).collect::<BTreeSet<_>>()
        })
        .collect();
    Cfg::from_edges(blocks, succs)
}

/// Control dependences from explicit post-dominator sets: block `x`
/// depends on `a` when `x` post-dominates some successor of `a` but does not
/// strictly post-dominate `a`.
pub fn control_oracle(cfg: &Cfg) -> BTreeSet<(usize, usize)> {
    let exit = cfg.exit();
    let n = exit + 1;
    let full: BTreeSet<usize> = (0..n).collect();
    let mut pdom: Vec<BTreeSet<usize>> = vec![full.clone(); n];
    pdom[exit] = BTreeSet::from([exit]);
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..exit {
            let mut new = full.clone();
            for s in cfg.successors(b) {
                new = new.intersection(&pdom[s]).copied().collect();
            }
            new.insert(b);
            if new != pdom[b] {
                pdom[b] = new;
                changed = true;
            }
        }
    }
    let mut out = BTreeSet::new();
    for a in 0..exit {
        for x in 0..exit {
            let strictly = x != a && pdom[a].contains(&x);
            if !strictly && cfg.successors(a).any(|s| pdom[s].contains(&x)) {
                let branch = cfg.blocks[a].last();
                for i in cfg.blocks[x].instructions() {
                    if i != branch {
                        out.insert((i, branch));
                    }
                }
            }
        }
    }
    out
}

/// Random digraph without self-loops.
pub fn random_digraph(rng: &mut ChaCha8Rng, max_nodes: usize) -> DependenceGraph {
    let n = rng.random_range(1..=max_nodes);
    let density = rng.random_range(0.0..0.15);
    let mut g = DependenceGraph::new(n);
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random_bool(density) {
                g.add(u, v, if rng.random_bool(0.5) { EdgeKind::Data } else { EdgeKind::Control });
            }
        }
    }
    g
}

/// Directed shortest path lengths from every node, by BFS.
pub fn bfs_distances(g: &DependenceGraph) -> Vec<Vec<Option<u32>>> {
    let adj = g.successors();
    (0..g.nodes)
        .map(|src| {
            let mut dist = vec![None; g.nodes];
            dist[src] = Some(0);
            let mut q = VecDeque::from([src]);
            while let Some(x) = q.pop_front() {
                for &y in &adj[x] {
                    if dist[y].is_none() {
                        dist[y] = Some(dist[x].unwrap() + 1);
                        q.push_back(y);
                    }
                }
            }
            dist
        })
        .collect()
}

/// Undirected connectivity distances: the shorter of the two directions.
pub fn bfs_connectivity(g: &DependenceGraph) -> HashMap<(usize, usize), u32> {
    let d = bfs_distances(g);
    let mut out = HashMap::new();
    for u in 0..g.nodes {
        for v in u + 1..g.nodes {
            let best = match (d[u][v], d[v][u]) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            if let Some(x) = best {
                out.insert((u, v), x);
            }
        }
    }
    out
}

/// Per-pair evaluation of the global, local and dependence definitions plus
/// the padding rule. Returns `(allowed, r)` as dense row-major vectors.
pub fn naive_bundle(seq: &TokenSequence, dep: &DependenceGraph) -> (Vec<bool>, Vec<u32>) {
    let n = seq.len();
    let con = bfs_connectivity(dep);
    let kept = seq.num_instructions();
    let inst = |p: usize| seq.surface[p] == "<INST>" && seq.inst_of[p] >= 0;
    let cls = |p: usize| seq.surface[p] == "[CLS]" && seq.inst_of[p] < 0;
    let pad = |p: usize| seq.surface[p] == "[PAD]" && seq.inst_of[p] < 0;
    let mut allowed = vec![false; n * n];
    let mut r = vec![0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (ti, tj) = (seq.inst_of[i], seq.inst_of[j]);
            let dist = if inst(i) && inst(j) && ti != tj && (ti as usize) < kept && (tj as usize) < kept {
                let (a, b) = (ti.min(tj) as usize, ti.max(tj) as usize);
                con.get(&(a, b)).copied()
            } else {
                None
            };
            let global = cls(i) || cls(j);
            let local = ti >= 0 && ti == tj;
            let dependence = dist.is_some();
            allowed[i * n + j] = if pad(i) || pad(j) { i == j } else { global || local || dependence };
            r[i * n + j] = dist.unwrap_or(0);
        }
    }
    (allowed, r)
}
