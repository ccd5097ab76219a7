use std::collections::BTreeSet;

use crate::asm::{Function, Operand};
use crate::error::{Error, Result};

use super::{is_conditional_jump, is_return};

/// Half-open range of instruction indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub start: usize,
    pub end: usize,
}

impl BasicBlock {
    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn instructions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Control flow graph over basic blocks with a virtual exit node.
///
/// Block ids are `0..blocks.len()`; [`Cfg::exit`] is the id one past the
/// last block. The virtual entry always flows into block 0 (or straight to
/// the exit for an empty function).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub succs: Vec<BTreeSet<usize>>,
    pub preds: Vec<BTreeSet<usize>>,
    /// Block containing each instruction.
    pub block_of: Vec<usize>,
    /// Blocks that received an extra edge to the exit so that every block
    /// reaches it.
    pub augmented: Vec<usize>,
}

impl Cfg {
    pub fn exit(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Successors, where [`Cfg::exit`] stands for the virtual exit.
    pub fn successors(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.succs[block].iter().copied()
    }

    /// Builds a CFG from explicit block boundaries and successor lists, then
    /// adds exit edges as needed. Used by tests that generate graphs
    /// directly.
    pub fn from_edges(blocks: Vec<BasicBlock>, succs: Vec<BTreeSet<usize>>) -> Cfg {
        let n_inst = blocks.last().map_or(0, |b| b.end);
        let mut block_of = vec![0; n_inst];
        for (b, blk) in blocks.iter().enumerate() {
            for i in blk.instructions() {
                block_of[i] = b;
            }
        }
        let mut cfg = Cfg {
            preds: vec![BTreeSet::new(); blocks.len() + 1],
            blocks,
            succs,
            block_of,
            augmented: Vec::new(),
        };
        cfg.augment();
        cfg.rebuild_preds();
        cfg
    }

    fn rebuild_preds(&mut self) {
        self.preds = vec![BTreeSet::new(); self.blocks.len() + 1];
        for (b, ss) in self.succs.iter().enumerate() {
            for &s in ss {
                self.preds[s].insert(b);
            }
        }
    }

    fn reaches_exit(&self) -> Vec<bool> {
        let n = self.blocks.len();
        let mut preds = vec![Vec::new(); n + 1];
        for (b, ss) in self.succs.iter().enumerate() {
            for &s in ss {
                preds[s].push(b);
            }
        }
        let mut seen = vec![false; n + 1];
        let mut stack = vec![n];
        seen[n] = true;
        while let Some(x) = stack.pop() {
            for &p in &preds[x] {
                if !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Adds block→exit edges until the exit is reachable from every block.
    /// The highest-numbered stranded block gets the edge first, which for a
    /// stranded loop is its latch in listing order.
    fn augment(&mut self) {
        loop {
            let seen = self.reaches_exit();
            let Some(b) = (0..self.blocks.len()).rev().find(|&b| !seen[b]) else {
                break;
            };
            let exit = self.exit();
            self.succs[b].insert(exit);
            self.augmented.push(b);
        }
    }
}

/// Splits a function into basic blocks and connects them.
///
/// Blocks start at the first instruction, at every label target and after
/// every `jmp`, conditional jump and `ret`.
pub fn build_cfg(func: &Function) -> Result<Cfg> {
    let insts = &func.instructions;
    let n = insts.len();
    let resolve = |label: &str| -> Result<usize> {
        func.labels.get(label).copied().ok_or_else(|| Error::UnresolvedLabel {
            function: func.name.clone(),
            label: label.to_string(),
        })
    };

    let mut leaders = BTreeSet::new();
    if n > 0 {
        leaders.insert(0);
    }
    for &target in func.labels.values() {
        if target < n {
            leaders.insert(target);
        }
    }
    for (i, inst) in insts.iter().enumerate() {
        let m = inst.mnemonic.as_str();
        if m == "jmp" || is_conditional_jump(m) || is_return(m) {
            if i + 1 < n {
                leaders.insert(i + 1);
            }
            if let Some(Operand::Label(l)) = inst.operands.first() {
                resolve(l)?;
            }
        }
    }

    let starts: Vec<usize> = leaders.into_iter().collect();
    let mut blocks = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let e = starts.get(k + 1).copied().unwrap_or(n);
        blocks.push(BasicBlock { start: s, end: e });
    }
    let mut block_of = vec![0; n];
    for (b, blk) in blocks.iter().enumerate() {
        for i in blk.instructions() {
            block_of[i] = b;
        }
    }
    let exit = blocks.len();
    let block_at = |idx: usize| if idx >= n { exit } else { block_of[idx] };

    let mut succs = vec![BTreeSet::new(); blocks.len()];
    for (b, blk) in blocks.iter().enumerate() {
        let last = &insts[blk.last()];
        let m = last.mnemonic.as_str();
        let fall = block_at(blk.end);
        let is_jump = m == "jmp" || is_conditional_jump(m);
        let target = match last.operands.first() {
            Some(Operand::Label(l)) if is_jump => Some(block_at(resolve(l)?)),
            // Register, memory and absolute targets are not followed.
            _ => None,
        };
        if m == "jmp" {
            succs[b].insert(target.unwrap_or(exit));
        } else if is_conditional_jump(m) {
            succs[b].insert(target.unwrap_or(exit));
            succs[b].insert(fall);
        } else if is_return(m) {
            succs[b].insert(exit);
        } else {
            succs[b].insert(fall);
        }
    }

    let mut cfg = Cfg {
        preds: Vec::new(),
        blocks,
        succs,
        block_of,
        augmented: Vec::new(),
    };
    cfg.augment();
    cfg.rebuild_preds();
    Ok(cfg)
}
