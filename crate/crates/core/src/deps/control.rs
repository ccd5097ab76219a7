use std::collections::BTreeSet;

use super::cfg::Cfg;

/// Immediate post-dominators of every block; the exit is its own root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostDominatorTree {
    ipdom: Vec<usize>,
}

impl PostDominatorTree {
    /// Cooper, Harvey and Kennedy's iterative algorithm, run on the reversed
    /// CFG from the virtual exit.
    pub fn compute(cfg: &Cfg) -> Self {
        let exit = cfg.exit();
        let n = exit + 1;
        const UNDEF: usize = usize::MAX;

        // Postorder of the reverse graph.
        let mut po_num = vec![UNDEF; n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(exit, cfg.preds[exit].iter().rev().copied().collect())];
        visited[exit] = true;
        while let Some((node, pending)) = stack.last_mut() {
            if let Some(next) = pending.pop() {
                if !visited[next] {
                    visited[next] = true;
                    let kids = cfg.preds[next].iter().rev().copied().collect();
                    stack.push((next, kids));
                }
            } else {
                po_num[*node] = order.len();
                order.push(*node);
                stack.pop();
            }
        }

        let mut ipdom = vec![UNDEF; n];
        ipdom[exit] = exit;
        let intersect = |ipdom: &[usize], mut a: usize, mut b: usize| {
            while a != b {
                while po_num[a] < po_num[b] {
                    a = ipdom[a];
                }
                while po_num[b] < po_num[a] {
                    b = ipdom[b];
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &node in order.iter().rev() {
                if node == exit {
                    continue;
                }
                let mut new = UNDEF;
                for s in cfg.successors(node) {
                    if ipdom[s] == UNDEF {
                        continue;
                    }
                    new = if new == UNDEF { s } else { intersect(&ipdom, s, new) };
                }
                if new != UNDEF && ipdom[node] != new {
                    ipdom[node] = new;
                    changed = true;
                }
            }
        }
        PostDominatorTree { ipdom }
    }

    pub fn ipdom(&self, block: usize) -> usize {
        self.ipdom[block]
    }

    /// Whether `a` post-dominates `b` (reflexively).
    pub fn post_dominates(&self, a: usize, mut b: usize) -> bool {
        loop {
            if a == b {
                return true;
            }
            let up = self.ipdom[b];
            if up == b || up == usize::MAX {
                return false;
            }
            b = up;
        }
    }
}

/// Block-level control dependences `(dependent, branch_block)`, by walking
/// the post-dominator tree from each branch successor up to the branch's
/// immediate post-dominator.
pub fn block_control_dependences(cfg: &Cfg) -> BTreeSet<(usize, usize)> {
    let tree = PostDominatorTree::compute(cfg);
    let mut out = BTreeSet::new();
    for a in 0..cfg.num_blocks() {
        let stop = tree.ipdom(a);
        for s in cfg.successors(a) {
            let mut runner = s;
            while runner != stop && runner != cfg.exit() {
                out.insert((runner, a));
                runner = tree.ipdom(runner);
            }
        }
    }
    out
}

/// Instruction-level control dependences: every instruction of a dependent
/// block depends on the last instruction of the branch block.
pub fn control_dependences(cfg: &Cfg) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for (dep, branch) in block_control_dependences(cfg) {
        let branch_inst = cfg.blocks[branch].last();
        for i in cfg.blocks[dep].instructions() {
            if i != branch_inst {
                out.insert((i, branch_inst));
            }
        }
    }
    out
}
