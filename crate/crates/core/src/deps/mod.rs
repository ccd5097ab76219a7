//! Control and data dependences between the instructions of one function.
//!
//! Memory is over-approximated three ways: stack accesses at a statically
//! known offset touch one slot, stack accesses at an unknown offset touch the
//! whole frame, and anything else may touch all of memory. Each function is
//! analyzed in isolation.

mod cfg;
mod control;
mod dataflow;
mod graph;
mod locations;

pub use cfg::{build_cfg, BasicBlock, Cfg};
pub use control::{block_control_dependences, control_dependences, PostDominatorTree};
pub use dataflow::{data_dependences, def_use_table, frame_states};
pub use graph::{DependenceGraph, EdgeKind};
pub use locations::{
    def_use, is_supported, may_locations, memory_location, step_frame, AnalysisOptions, CallModel, DefUse, Frame,
    Location, LocationSet, Track, UnsupportedPolicy,
};

use crate::asm::Function;
use crate::error::Result;

const CONDITIONS: &[&str] = &[
    "o", "no", "b", "c", "nae", "ae", "nb", "nc", "e", "z", "ne", "nz", "be", "na", "a", "nbe", "s", "ns", "p", "pe",
    "np", "po", "l", "nge", "ge", "nl", "le", "ng", "g", "nle",
];

pub fn is_conditional_jump(mnemonic: &str) -> bool {
    match mnemonic.strip_prefix('j') {
        Some(cc) => CONDITIONS.contains(&cc) || matches!(cc, "cxz" | "ecxz" | "rcxz"),
        None => false,
    }
}

pub fn is_return(mnemonic: &str) -> bool {
    matches!(mnemonic, "ret" | "retn" | "hlt" | "ud2")
}

/// Every intermediate result of analysing one function.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub cfg: Cfg,
    pub frames: Vec<Frame>,
    pub def_use: Vec<DefUse>,
    pub data: std::collections::BTreeSet<(usize, usize)>,
    pub control: std::collections::BTreeSet<(usize, usize)>,
}

impl Analysis {
    pub fn run(func: &Function, opts: &AnalysisOptions) -> Result<Self> {
        let cfg = build_cfg(func)?;
        let frames = frame_states(func, &cfg);
        let def_use = def_use_table(func, &frames, opts)?;
        let data = data_dependences(&cfg, &def_use);
        let control = control_dependences(&cfg);
        Ok(Analysis {
            cfg,
            frames,
            def_use,
            data,
            control,
        })
    }

    pub fn graph(&self) -> DependenceGraph {
        let mut g = DependenceGraph::new(self.frames.len());
        for &(u, v) in &self.data {
            g.add(u, v, EdgeKind::Data);
        }
        for &(u, v) in &self.control {
            g.add(u, v, EdgeKind::Control);
        }
        g
    }
}

/// Data and control dependences of a function as one graph.
///
/// ```
/// use depattn::asm::parse_listing;
/// use depattn::deps::{dependence_graph, AnalysisOptions};
///
/// let f = &parse_listing(".func f\n mov rax, rbx\n mov [rsp+0x10], rax\n mov rcx, [rsp+0x10]\n mov rdx, [rcx]\n").unwrap()[0];
/// let g = dependence_graph(f, &AnalysisOptions::default()).unwrap();
/// let pairs: Vec<(usize, usize)> = g.edges.iter().map(|&(u, v, _)| (u, v)).collect();
/// assert_eq!(pairs, vec![(1, 0), (2, 1), (3, 1)]);
/// ```
pub fn dependence_graph(func: &Function, opts: &AnalysisOptions) -> Result<DependenceGraph> {
    Ok(Analysis::run(func, opts)?.graph())
}
