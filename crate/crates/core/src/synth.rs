//! Random functions over the supported instruction subset, with
//! semantics-preserving variants and synthetic labels for the downstream
//! tasks.
//!
//! A variant reorders independent instructions inside each basic block and
//! then renames registers under a random bijection. `rax`, `rsp` and `rbp`
//! keep their roles. Generated code never calls, so no register carries an
//! ABI meaning either.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asm::{parse_listing, Function, Gpr, Instruction, MemoryOperand, Operand, PtrSize, Register, Width};
use crate::deps::{is_conditional_jump, is_return, Analysis, AnalysisOptions, Location};
use crate::error::{Error, Result};

/// Registers that variants may permute.
pub const RENAMABLE: [Gpr; 13] = [
    Gpr::Rbx,
    Gpr::Rcx,
    Gpr::Rdx,
    Gpr::Rsi,
    Gpr::Rdi,
    Gpr::R8,
    Gpr::R9,
    Gpr::R10,
    Gpr::R11,
    Gpr::R12,
    Gpr::R13,
    Gpr::R14,
    Gpr::R15,
];

const VALUE_REGS: [Gpr; 8] = [Gpr::Rax, Gpr::Rbx, Gpr::Rcx, Gpr::Rdx, Gpr::Rsi, Gpr::Rdi, Gpr::R8, Gpr::R9];
const BINOPS: [&str; 6] = ["add", "sub", "and", "or", "xor", "imul"];
const JCC: [&str; 6] = ["je", "jne", "jl", "jge", "jb", "ja"];

/// Type labels for stack variables, grouped by access width.
pub const TYPES_BY_WIDTH: [(u8, &[&str]); 4] = [
    (1, &["bool", "char", "unsigned char", "int8_t", "uint8_t"]),
    (2, &["short", "unsigned short", "int16_t", "uint16_t"]),
    (4, &["int", "unsigned int", "float", "enum", "int32_t", "uint32_t"]),
    (
        8,
        &[
            "long",
            "unsigned long",
            "long long",
            "unsigned long long",
            "double",
            "long double",
            "size_t",
            "ssize_t",
            "int64_t",
            "uint64_t",
            "void*",
            "char*",
            "const char*",
            "int*",
            "long*",
            "struct*",
            "union*",
            "FILE*",
            "array",
            "function pointer",
        ],
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub functions: usize,
    pub min_instructions: usize,
    pub max_instructions: usize,
    pub stack_slots: usize,
    pub branch_prob: f64,
    pub variants: bool,
    pub mlc_samples: usize,
    pub mlc_group: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            functions: 200,
            min_instructions: 8,
            max_instructions: 20,
            stack_slots: 4,
            branch_prob: 0.15,
            variants: true,
            mlc_samples: 60,
            mlc_group: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.min_instructions < 2 || self.min_instructions > self.max_instructions {
            return bad("need 2 <= min_instructions <= max_instructions");
        }
        if self.stack_slots == 0 || self.stack_slots > 16 {
            return bad("stack_slots must be in 1..=16");
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must be in [0, 1]");
        }
        if self.mlc_group == 0 {
            return bad("mlc_group must be positive");
        }
        Ok(())
    }
}

/// A function and the types of the stack slots it accesses.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFunction {
    pub func: Function,
    /// Entry-relative slot offset to its type label.
    pub slot_types: BTreeMap<i64, String>,
}

/// A rewritten copy of `source`. Instruction `i` of the variant is
/// instruction `perm[i]` of the source.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub source: usize,
    pub func: Function,
    pub perm: Vec<usize>,
    pub renaming: BTreeMap<Gpr, Gpr>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub functions: Vec<SynthFunction>,
    pub variants: Vec<Variant>,
}

impl SynthCorpus {
    /// Every function, originals first, as one listing.
    pub fn listing(&self) -> String {
        let mut s = String::new();
        for f in &self.functions {
            s.push_str(&f.func.to_listing());
            s.push('\n');
        }
        for v in &self.variants {
            s.push_str(&v.func.to_listing());
            s.push('\n');
        }
        s
    }

    pub fn all_functions(&self) -> Vec<Function> {
        self.functions
            .iter()
            .map(|f| f.func.clone())
            .chain(self.variants.iter().map(|v| v.func.clone()))
            .collect()
    }
}

fn reg(g: Gpr) -> Operand {
    Operand::Register(Register::new(g, Width::Q))
}

fn slot(off: i64, size: PtrSize) -> Operand {
    Operand::Memory(MemoryOperand {
        size: Some(size),
        base: Some(Register::new(Gpr::Rsp, Width::Q)),
        index: None,
        scale: 1,
        disp: off,
    })
}

fn ptr_size(bytes: u8) -> PtrSize {
    match bytes {
        1 => PtrSize::Byte,
        2 => PtrSize::Word,
        4 => PtrSize::Dword,
        _ => PtrSize::Qword,
    }
}

fn width_of(bytes: u8) -> Width {
    match bytes {
        1 => Width::B,
        2 => Width::W,
        4 => Width::D,
        _ => Width::Q,
    }
}

struct Gen<'a, R: Rng> {
    rng: &'a mut R,
    /// `(offset, width in bytes)` of each slot.
    slots: Vec<(i64, u8)>,
}

impl<R: Rng> Gen<'_, R> {
    fn any_reg(&mut self) -> Gpr {
        *VALUE_REGS.choose(self.rng).expect("nonempty")
    }

    fn imm(&mut self) -> Operand {
        if self.rng.random_bool(0.85) {
            Operand::Immediate(self.rng.random_range(1..64))
        } else {
            Operand::Immediate(self.rng.random_range(256..100_000))
        }
    }

    fn instruction(&mut self) -> (String, Vec<Operand>) {
        let d = self.any_reg();
        let s = self.any_reg();
        match self.rng.random_range(0..14) {
            0 => ("mov".into(), vec![reg(d), reg(s)]),
            1 => ("mov".into(), vec![reg(d), self.imm()]),
            2 | 3 => {
                let op = BINOPS.choose(self.rng).expect("nonempty");
                (op.to_string(), vec![reg(d), reg(s)])
            }
            4 => {
                let op = ["add", "sub", "and"].choose(self.rng).expect("nonempty");
                (op.to_string(), vec![reg(d), self.imm()])
            }
            5 => {
                let op = ["shl", "shr", "sar"].choose(self.rng).expect("nonempty");
                (op.to_string(), vec![reg(d), Operand::Immediate(self.rng.random_range(1..6))])
            }
            6 => {
                let i = self.any_reg();
                let m = MemoryOperand {
                    size: None,
                    base: Some(Register::new(s, Width::Q)),
                    index: Some(Register::new(i, Width::Q)),
                    scale: *[1u8, 2, 4, 8].choose(self.rng).expect("nonempty"),
                    disp: self.rng.random_range(0..4) * 8,
                };
                ("lea".into(), vec![reg(d), Operand::Memory(m)])
            }
            7 | 8 => {
                let (off, w) = *self.slots.choose(self.rng).expect("slots");
                let mnemonic = if w < 4 { "movzx" } else { "mov" };
                let dst = Register::new(d, if w == 8 { Width::Q } else { Width::D });
                (mnemonic.into(), vec![Operand::Register(dst), slot(off, ptr_size(w))])
            }
            9 | 10 => {
                let (off, w) = *self.slots.choose(self.rng).expect("slots");
                let src = Register::new(s, width_of(w));
                ("mov".into(), vec![slot(off, ptr_size(w)), Operand::Register(src)])
            }
            11 => {
                let m = MemoryOperand {
                    size: Some(PtrSize::Qword),
                    base: Some(Register::new(s, Width::Q)),
                    index: None,
                    scale: 1,
                    disp: self.rng.random_range(0..4) * 8,
                };
                if self.rng.random_bool(0.5) {
                    ("mov".into(), vec![reg(d), Operand::Memory(m)])
                } else {
                    ("mov".into(), vec![Operand::Memory(m), reg(d)])
                }
            }
            12 => {
                let op = ["inc", "dec", "neg", "not"].choose(self.rng).expect("nonempty");
                (op.to_string(), vec![reg(d)])
            }
            _ => ("mov".into(), vec![reg(d), reg(s)]),
        }
    }
}

/// Draws one random function named `name`.
pub fn random_function(name: &str, cfg: &SynthConfig, rng: &mut impl Rng) -> SynthFunction {
    let n_slots = rng.random_range(1..=cfg.stack_slots);
    let mut slots = Vec::new();
    let mut slot_types = BTreeMap::new();
    for k in 0..n_slots {
        let (w, names) = TYPES_BY_WIDTH[rng.random_range(0..TYPES_BY_WIDTH.len())];
        let off = 8 * (k as i64 + 1);
        slots.push((off, w));
        slot_types.insert(off, names.choose(rng).expect("nonempty").to_string());
    }
    let mut g = Gen { rng, slots };
    let body = g.rng.random_range(cfg.min_instructions..=cfg.max_instructions);
    let mut insts: Vec<(String, Vec<Operand>)> = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<(String, usize)> = Vec::new();
    for i in 0..body {
        pending.retain(|(label, at)| {
            if *at == i {
                labels.insert(label.clone(), insts.len());
                false
            } else {
                true
            }
        });
        if i + 2 < body && g.rng.random_bool(cfg.branch_prob) {
            let a = g.any_reg();
            let b = g.any_reg();
            let cmp = if g.rng.random_bool(0.5) { "cmp" } else { "test" };
            insts.push((cmp.into(), vec![reg(a), reg(b)]));
            let label = format!(".L{}", labels.len() + pending.len());
            let target = g.rng.random_range(i + 1..=body);
            let jcc = JCC.choose(g.rng).expect("nonempty");
            insts.push((jcc.to_string(), vec![Operand::Label(label.clone())]));
            pending.push((label, target));
        }
        insts.push(g.instruction());
    }
    for (label, _) in pending {
        labels.insert(label, insts.len());
    }
    let r = g.any_reg();
    insts.push(("mov".into(), vec![reg(Gpr::Rax), reg(r)]));
    insts.push(("ret".into(), vec![]));

    let mut func = Function::new(name);
    func.instructions = insts
        .into_iter()
        .enumerate()
        .map(|(i, (m, ops))| Instruction::new(i, &m, ops))
        .collect();
    func.labels = labels;
    SynthFunction {
        func: normalize(&func),
        slot_types,
    }
}

fn normalize(func: &Function) -> Function {
    parse_listing(&func.to_listing())
        .expect("generated listings parse")
        .remove(0)
}

fn conflicts(a: &crate::deps::DefUse, b: &crate::deps::DefUse) -> bool {
    let hit = |x: &crate::deps::LocationSet, y: &crate::deps::LocationSet| {
        x.iter().any(|l: &Location| y.iter().any(|m| l.overlaps(*m)))
    };
    hit(&a.defs, &b.defs) || hit(&a.defs, &b.uses) || hit(&a.uses, &b.defs)
}

/// Randomly reorders instructions inside each basic block while keeping
/// every pair that touches a common location (including flags and address
/// registers) in its original order. Block terminators stay in place.
/// Returns the new function and `perm`, where new instruction `i` is old
/// instruction `perm[i]`.
pub fn reorder(func: &Function, rng: &mut impl Rng) -> Result<(Function, Vec<usize>)> {
    let opts = AnalysisOptions {
        flags: true,
        address_uses: true,
        ..Default::default()
    };
    let a = Analysis::run(func, &opts)?;
    let mut perm = Vec::with_capacity(func.instructions.len());
    for b in &a.cfg.blocks {
        let mut movable: Vec<usize> = b.instructions().collect();
        let last = func.instructions[b.last()].mnemonic.as_str();
        let fixed = (last == "jmp" || is_conditional_jump(last) || is_return(last)).then(|| movable.pop());
        let mut placed = vec![false; movable.len()];
        for _ in 0..movable.len() {
            let ready: Vec<usize> = (0..movable.len())
                .filter(|&j| {
                    !placed[j]
                        && (0..j).all(|i| placed[i] || !conflicts(&a.def_use[movable[i]], &a.def_use[movable[j]]))
                })
                .collect();
            let j = *ready.choose(rng).expect("a minimal element exists");
            placed[j] = true;
            perm.push(movable[j]);
        }
        if let Some(Some(t)) = fixed {
            perm.push(t);
        }
    }
    let mut out = Function::new(func.name.clone());
    out.labels = func.labels.clone();
    out.instructions = perm
        .iter()
        .enumerate()
        .map(|(i, &old)| {
            let src = &func.instructions[old];
            Instruction::new(i, &src.mnemonic, src.operands.clone())
        })
        .collect();
    Ok((normalize(&out), perm))
}

fn rename_reg(r: Register, map: &BTreeMap<Gpr, Gpr>) -> Register {
    match map.get(&r.gpr) {
        Some(&g) if !r.high_byte => Register::new(g, r.width),
        _ => r,
    }
}

/// Applies a register bijection to every operand.
pub fn rename(func: &Function, map: &BTreeMap<Gpr, Gpr>) -> Function {
    let mut out = Function::new(func.name.clone());
    out.labels = func.labels.clone();
    out.instructions = func
        .instructions
        .iter()
        .map(|inst| {
            let ops = inst
                .operands
                .iter()
                .map(|op| match op {
                    Operand::Register(r) => Operand::Register(rename_reg(*r, map)),
                    Operand::Memory(m) => Operand::Memory(MemoryOperand {
                        base: m.base.map(|r| rename_reg(r, map)),
                        index: m.index.map(|r| rename_reg(r, map)),
                        ..m.clone()
                    }),
                    other => other.clone(),
                })
                .collect();
            Instruction::new(inst.index, &inst.mnemonic, ops)
        })
        .collect();
    normalize(&out)
}

/// A random bijection over [`RENAMABLE`].
pub fn random_renaming(rng: &mut impl Rng) -> BTreeMap<Gpr, Gpr> {
    let mut image = RENAMABLE;
    image.shuffle(rng);
    RENAMABLE.into_iter().zip(image).collect()
}

/// Reorders, then renames.
pub fn make_variant(source: usize, func: &Function, name: &str, rng: &mut impl Rng) -> Result<Variant> {
    let (reordered, perm) = reorder(func, rng)?;
    let renaming = random_renaming(rng);
    let mut renamed = rename(&reordered, &renaming);
    renamed.name = name.to_string();
    Ok(Variant {
        source,
        func: renamed,
        perm,
        renaming,
    })
}

pub fn variant_name(name: &str) -> String {
    format!("{name}.v")
}

/// Generates the whole corpus from `seed`.
///
/// ```
/// use depattn::synth::{synthesize, SynthConfig};
///
/// let cfg = SynthConfig { functions: 3, ..Default::default() };
/// let a = synthesize(&cfg, 1).unwrap();
/// assert_eq!(a.functions.len(), 3);
/// assert_eq!(a.variants.len(), 3);
/// assert_eq!(a.listing(), synthesize(&cfg, 1).unwrap().listing());
/// ```
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SynthCorpus::default();
    for i in 0..cfg.functions {
        out.functions.push(random_function(&format!("fn{i}"), cfg, &mut rng));
    }
    if cfg.variants {
        for (i, f) in out.functions.iter().enumerate() {
            let name = variant_name(&f.func.name);
            out.variants.push(make_variant(i, &f.func, &name, &mut rng)?);
        }
    }
    Ok(out)
}

/// Per-token type labels of a function: the `[` token of each access to a
/// typed stack slot carries the slot's type. Positions index the token
/// sequence with `[CLS]` at 0 and count only instructions that fit in
/// `max_len`.
pub fn type_labels(sf: &SynthFunction, max_len: usize) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut pos = 1;
    for inst in &sf.func.instructions {
        let toks = crate::asm::instruction_tokens(inst);
        if pos + 1 + toks.len() > max_len {
            break;
        }
        let slot = inst.operands.iter().find_map(|op| match op {
            Operand::Memory(m) if m.base.map(|b| b.gpr) == Some(Gpr::Rsp) && m.index.is_none() => Some(m.disp),
            _ => None,
        });
        if let Some(ty) = slot.and_then(|d| sf.slot_types.get(&d)) {
            let bracket = toks.iter().position(|t| t == "[").expect("memory operand has a bracket");
            out.push((pos + 1 + bracket, ty.clone()));
        }
        pos += 1 + toks.len();
    }
    out
}

/// Boolean features used as multi-label targets.
pub const MLC_FEATURES: [&str; 8] = [
    "branches",
    "multiplies",
    "shifts",
    "heap_store",
    "heap_load",
    "byte_access",
    "address_arith",
    "long_body",
];

pub fn function_features(f: &Function) -> [bool; 8] {
    let has = |p: &dyn Fn(&Instruction) -> bool| f.instructions.iter().any(p);
    let heap = |op: &Operand| matches!(op, Operand::Memory(m) if m.base.map(|b| b.gpr) != Some(Gpr::Rsp));
    [
        has(&|i| is_conditional_jump(&i.mnemonic)),
        has(&|i| i.mnemonic == "imul"),
        has(&|i| matches!(i.mnemonic.as_str(), "shl" | "shr" | "sar")),
        has(&|i| i.mnemonic == "mov" && i.operands.first().is_some_and(heap)),
        has(&|i| i.mnemonic == "mov" && i.operands.get(1).is_some_and(heap)),
        has(&|i| {
            i.operands
                .iter()
                .any(|o| matches!(o, Operand::Memory(m) if m.size == Some(PtrSize::Byte)))
        }),
        has(&|i| i.mnemonic == "lea"),
        f.instructions.len() >= 20,
    ]
}

/// One multi-label sample: a group of functions and the features present in
/// at least one of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlcSample {
    pub functions: Vec<String>,
    pub labels: Vec<u8>,
}

pub fn mlc_samples(corpus: &SynthCorpus, cfg: &SynthConfig, seed: u64) -> Vec<MlcSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3C1A55);
    let n = corpus.functions.len();
    if n == 0 {
        return Vec::new();
    }
    (0..cfg.mlc_samples)
        .map(|_| {
            let k = cfg.mlc_group.min(n);
            let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            let mut labels = vec![0u8; MLC_FEATURES.len()];
            for &i in &idx {
                for (l, on) in function_features(&corpus.functions[i].func).iter().enumerate() {
                    labels[l] |= *on as u8;
                }
            }
            MlcSample {
                functions: idx.iter().map(|&i| corpus.functions[i].func.name.clone()).collect(),
                labels,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deps::dependence_graph;

    #[test]
    fn generated_functions_analyze() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..50 {
            let f = random_function(&format!("f{i}"), &cfg, &mut rng);
            assert!(dependence_graph(&f.func, &AnalysisOptions::default()).is_ok());
            assert_eq!(f.func.instructions.last().unwrap().mnemonic, "ret");
        }
    }

    #[test]
    fn type_label_count_matches_reference() {
        let total: usize = TYPES_BY_WIDTH.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(total, 35);
    }

    #[test]
    fn labels_point_at_brackets() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_function("f", &cfg, &mut rng);
        let vocab = crate::asm::Vocabulary::from_functions(std::slice::from_ref(&f.func), 1);
        let seq = crate::asm::tokenize(&f.func.instructions, &vocab, 512);
        for (p, _) in type_labels(&f, 512) {
            assert_eq!(seq.surface[p], "[");
        }
    }

    #[test]
    fn renaming_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_renaming(&mut rng);
        let mut image: Vec<Gpr> = m.values().copied().collect();
        image.sort();
        let mut dom: Vec<Gpr> = m.keys().copied().collect();
        dom.sort();
        assert_eq!(image, dom);
    }

    #[test]
    fn mlc_rows_match_features() {
        let cfg = SynthConfig {
            functions: 10,
            mlc_samples: 5,
            ..Default::default()
        };
        let c = synthesize(&cfg, 2).unwrap();
        let s = mlc_samples(&c, &cfg, 2);
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|r| r.functions.len() == 4 && r.labels.len() == 8));
    }
}
