use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::asm::{Gpr, Instruction, MemoryOperand, Operand, Register};
use crate::error::{Error, Result};

use super::{is_conditional_jump, is_return};

/// Over-approximated storage unit an instruction may read or write.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Location {
    /// Canonical 64-bit register; sub-registers alias onto it.
    Register(Gpr),
    Flags,
    /// Stack slot at a byte offset relative to the stack pointer on entry.
    StackSlot(i64),
    /// Anywhere in the current stack frame.
    StackFrame,
    /// Anywhere in memory.
    Memory,
}

impl Location {
    pub fn is_memory(self) -> bool {
        matches!(self, Location::StackSlot(_) | Location::StackFrame | Location::Memory)
    }

    /// Whether a write here certainly replaces the previous value, so that it
    /// kills earlier definitions of the same location.
    pub fn is_precise(self) -> bool {
        matches!(self, Location::Register(_) | Location::Flags | Location::StackSlot(_))
    }

    /// Whether the two locations may share storage.
    pub fn overlaps(self, other: Location) -> bool {
        use Location::*;
        match (self, other) {
            (Register(a), Register(b)) => a == b,
            (Flags, Flags) => true,
            (StackSlot(a), StackSlot(b)) => a == b,
            (StackSlot(_) | StackFrame, StackSlot(_) | StackFrame) => true,
            (Memory, b) | (b, Memory) => b.is_memory(),
            _ => false,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Register(r) => write!(f, "{r}"),
            Location::Flags => f.write_str("flags"),
            Location::StackSlot(o) => write!(f, "stack[{o}]"),
            Location::StackFrame => f.write_str("stack[*]"),
            Location::Memory => f.write_str("mem[*]"),
        }
    }
}

pub type LocationSet = BTreeSet<Location>;

/// Known offset of a stack-pointer-like register from the entry stack
/// pointer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Track {
    Known(i64),
    Untracked,
}

impl Track {
    fn meet(self, other: Track) -> Track {
        match (self, other) {
            (Track::Known(a), Track::Known(b)) if a == b => Track::Known(a),
            _ => Track::Untracked,
        }
    }

    pub fn known(self) -> Option<i64> {
        match self {
            Track::Known(k) => Some(k),
            Track::Untracked => None,
        }
    }

    fn shift(self, delta: i64) -> Track {
        match self {
            Track::Known(k) => Track::Known(k + delta),
            Track::Untracked => Track::Untracked,
        }
    }
}

/// Stack pointer tracking state at one program point. `rbp` is tracked once
/// it is loaded from a tracked `rsp` (`mov rbp, rsp`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub rsp: Track,
    pub rbp: Track,
}

impl Frame {
    pub const ENTRY: Frame = Frame {
        rsp: Track::Known(0),
        rbp: Track::Untracked,
    };

    pub const UNKNOWN: Frame = Frame {
        rsp: Track::Untracked,
        rbp: Track::Untracked,
    };

    pub fn meet(self, other: Frame) -> Frame {
        Frame {
            rsp: self.rsp.meet(other.rsp),
            rbp: self.rbp.meet(other.rbp),
        }
    }

    fn get(&self, gpr: Gpr) -> Option<Track> {
        match gpr {
            Gpr::Rsp => Some(self.rsp),
            Gpr::Rbp => Some(self.rbp),
            _ => None,
        }
    }

    /// `rsp` is modelled symbolically while tracked and is then not a
    /// register location of its own.
    fn hides(&self, gpr: Gpr) -> bool {
        gpr == Gpr::Rip || (gpr == Gpr::Rsp && self.rsp.known().is_some())
    }
}

/// What to assume for mnemonics outside the supported subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupportedPolicy {
    #[default]
    Error,
    Conservative,
}

/// Definitions and uses assumed for a `call`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallModel {
    pub defs: Vec<Location>,
    pub uses: Vec<Location>,
}

impl Default for CallModel {
    /// System V: caller-saved registers are clobbered, argument registers
    /// are read, and all memory may be read and written.
    fn default() -> Self {
        use Gpr::*;
        let r = Location::Register;
        CallModel {
            defs: vec![r(Rax), r(Rcx), r(Rdx), r(Rsi), r(Rdi), r(R8), r(R9), r(R10), r(R11), Location::Memory],
            uses: vec![r(Rdi), r(Rsi), r(Rdx), r(Rcx), r(R8), r(R9), r(Rsp), Location::Memory],
        }
    }
}

/// Knobs of the def/use model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Model the status flags as a location written by arithmetic and read by
    /// conditional instructions.
    pub flags: bool,
    /// Treat registers inside memory operands as uses of the instruction.
    /// Off by default: an access depends on the location it reaches, not on
    /// how its address was computed.
    pub address_uses: bool,
    pub unsupported: UnsupportedPolicy,
    pub call: CallModel,
}

/// Locations an operand may denote at a program point with stack state
/// `frame`. Memory operands denote the memory they reach, never their
/// address registers.
///
/// ```
/// use depattn::asm::parse_listing;
/// use depattn::deps::{may_locations, Frame, Location};
///
/// let f = &parse_listing(".func f\n mov rax, [rsp + 0x20]\n").unwrap()[0];
/// let locs = may_locations(&f.instructions[0].operands[1], &Frame::ENTRY);
/// assert_eq!(locs.into_iter().collect::<Vec<_>>(), vec![Location::StackSlot(0x20)]);
/// ```
pub fn may_locations(op: &Operand, frame: &Frame) -> LocationSet {
    let mut out = LocationSet::new();
    match op {
        Operand::Register(r) => {
            if !frame.hides(r.gpr) {
                out.insert(Location::Register(r.gpr));
            }
        }
        Operand::Memory(m) => {
            out.insert(memory_location(m, frame));
        }
        Operand::Immediate(_) | Operand::Label(_) => {}
    }
    out
}

/// Classifies the memory reached by an address expression.
pub fn memory_location(m: &MemoryOperand, frame: &Frame) -> Location {
    let Some(base) = m.base else {
        return Location::Memory;
    };
    match (base.gpr, frame.get(base.gpr)) {
        (Gpr::Rsp | Gpr::Rbp, Some(Track::Known(k))) => match m.index {
            None => Location::StackSlot(k + m.disp),
            Some(_) => Location::StackFrame,
        },
        (Gpr::Rsp, _) => Location::StackFrame,
        _ => Location::Memory,
    }
}

fn address_locations(m: &MemoryOperand, frame: &Frame) -> LocationSet {
    m.address_registers()
        .filter(|r| !frame.hides(r.gpr))
        .map(|r| Location::Register(r.gpr))
        .collect()
}

/// Definitions and uses of one instruction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefUse {
    pub defs: LocationSet,
    pub uses: LocationSet,
}

const MOVES: &[&str] = &["mov", "movzx", "movsx", "movsxd", "movabs"];
const BINARY: &[&str] = &[
    "add", "sub", "and", "or", "xor", "shl", "shr", "sar", "sal", "rol", "ror", "adc", "sbb",
];
const UNARY_FLAGS: &[&str] = &["inc", "dec", "neg"];
const NOPS: &[&str] = &["nop", "endbr64", "hlt", "ud2", "int3"];

pub fn is_supported(mnemonic: &str) -> bool {
    let m = mnemonic;
    MOVES.contains(&m)
        || BINARY.contains(&m)
        || UNARY_FLAGS.contains(&m)
        || NOPS.contains(&m)
        || matches!(
            m,
            "lea" | "not" | "imul" | "mul" | "div" | "idiv" | "cmp" | "test" | "push" | "pop" | "leave" | "jmp"
                | "call" | "ret" | "cdq" | "cqo" | "cdqe" | "cwde" | "cbw" | "xchg"
        )
        || is_conditional_jump(m)
        || is_return(m)
        || is_setcc(m)
        || is_cmov(m)
}

fn is_setcc(m: &str) -> bool {
    m.len() > 3 && m.starts_with("set") && is_conditional_jump(&format!("j{}", &m[3..]))
}

fn is_cmov(m: &str) -> bool {
    m.len() > 4 && m.starts_with("cmov") && is_conditional_jump(&format!("j{}", &m[4..]))
}

fn dst_gpr(inst: &Instruction) -> Option<Gpr> {
    inst.operands.first().and_then(Operand::as_register).map(|r| r.gpr)
}

fn imm(op: Option<&Operand>) -> Option<i64> {
    match op {
        Some(Operand::Immediate(v)) => Some(*v),
        _ => None,
    }
}

/// Registers an instruction overwrites through its first operand (plus the
/// implicit ones), ignoring the stack-pointer special cases.
fn writes_register(inst: &Instruction, gpr: Gpr) -> bool {
    let m = inst.mnemonic.as_str();
    let writes_dst = MOVES.contains(&m)
        || BINARY.contains(&m)
        || UNARY_FLAGS.contains(&m)
        || matches!(m, "lea" | "not" | "pop" | "xchg")
        || is_setcc(m)
        || is_cmov(m)
        || (m == "imul" && inst.operands.len() >= 2);
    if writes_dst && dst_gpr(inst) == Some(gpr) {
        return true;
    }
    if m == "xchg" && inst.operands.get(1).and_then(Operand::as_register).map(|r| r.gpr) == Some(gpr) {
        return true;
    }
    if !is_supported(m) {
        return true;
    }
    false
}

/// Stack state after executing `inst` in state `pre`.
pub fn step_frame(inst: &Instruction, pre: Frame) -> Frame {
    let m = inst.mnemonic.as_str();
    let ops = &inst.operands;
    let mut post = pre;
    let dst = dst_gpr(inst);
    match m {
        "push" => {
            post.rsp = pre.rsp.shift(-8);
            return post;
        }
        "pop" => {
            post.rsp = pre.rsp.shift(8);
            if dst == Some(Gpr::Rbp) {
                post.rbp = Track::Untracked;
            }
            if dst == Some(Gpr::Rsp) {
                post.rsp = Track::Untracked;
            }
            return post;
        }
        "leave" => {
            post.rsp = pre.rbp.shift(8);
            post.rbp = Track::Untracked;
            return post;
        }
        "call" => return post,
        "add" | "sub" if dst == Some(Gpr::Rsp) => {
            post.rsp = match imm(ops.get(1)) {
                Some(v) if m == "add" => pre.rsp.shift(v),
                Some(v) => pre.rsp.shift(-v),
                None => Track::Untracked,
            };
            return post;
        }
        "mov" if ops.len() == 2 => {
            let src = ops[1].as_register().map(|r| r.gpr);
            match (dst, src) {
                (Some(Gpr::Rsp), Some(Gpr::Rbp)) => {
                    post.rsp = pre.rbp;
                    return post;
                }
                (Some(Gpr::Rbp), Some(Gpr::Rsp)) => {
                    post.rbp = pre.rsp;
                    return post;
                }
                _ => {}
            }
        }
        "lea" if ops.len() == 2 && matches!(dst, Some(Gpr::Rsp | Gpr::Rbp)) => {
            let value = match ops[1].as_memory() {
                Some(mem) if mem.index.is_none() => match mem.base.map(|b| b.gpr) {
                    Some(Gpr::Rsp) => pre.rsp.shift(mem.disp),
                    Some(Gpr::Rbp) => pre.rbp.shift(mem.disp),
                    _ => Track::Untracked,
                },
                _ => Track::Untracked,
            };
            if dst == Some(Gpr::Rsp) {
                post.rsp = value;
            } else {
                post.rbp = value;
            }
            return post;
        }
        _ => {}
    }
    if writes_register(inst, Gpr::Rsp) {
        post.rsp = Track::Untracked;
    }
    if writes_register(inst, Gpr::Rbp) {
        post.rbp = Track::Untracked;
    }
    post
}

/// Definitions and uses of `inst` executed in state `pre`.
///
/// ```
/// use depattn::asm::parse_listing;
/// use depattn::deps::{def_use, AnalysisOptions, Frame, Location};
///
/// let f = &parse_listing(".func f\n mov [rsp+0x10], rax\n").unwrap()[0];
/// let du = def_use(&f.instructions[0], &Frame::ENTRY, &AnalysisOptions::default()).unwrap();
/// assert!(du.defs.contains(&Location::StackSlot(0x10)) && du.defs.len() == 1);
/// assert_eq!(du.uses.len(), 1);
/// ```
pub fn def_use(inst: &Instruction, pre: &Frame, opts: &AnalysisOptions) -> Result<DefUse> {
    use Location as L;
    let m = inst.mnemonic.as_str();
    let ops = &inst.operands;
    let post = step_frame(inst, *pre);
    let mut du = DefUse::default();
    let reg = |g: Gpr| L::Register(g);

    // Reads of an operand's value (memory contents or register).
    let read = |du: &mut DefUse, op: &Operand| {
        du.uses.extend(may_locations(op, pre));
        if let Operand::Memory(mem) = op {
            if opts.address_uses {
                du.uses.extend(address_locations(mem, pre));
            }
        }
    };
    // Writes through an operand. Partial register writes merge with the old
    // value, so they also read it.
    let write = |du: &mut DefUse, op: &Operand| match op {
        Operand::Register(r) => {
            if !post.hides(r.gpr) {
                du.defs.insert(reg(r.gpr));
                if partial(r) && !pre.hides(r.gpr) {
                    du.uses.insert(reg(r.gpr));
                }
            }
        }
        Operand::Memory(mem) => {
            du.defs.insert(memory_location(mem, pre));
            if opts.address_uses {
                du.uses.extend(address_locations(mem, pre));
            }
        }
        Operand::Immediate(_) | Operand::Label(_) => {}
    };
    let arity = |n: usize| -> Result<()> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "instruction {} `{}` expects {n} operand(s)",
                inst.index, inst.raw_text
            )))
        }
    };

    if MOVES.contains(&m) {
        arity(2)?;
        write(&mut du, &ops[0]);
        read(&mut du, &ops[1]);
    } else if m == "lea" {
        arity(2)?;
        write(&mut du, &ops[0]);
        if let Some(mem) = ops[1].as_memory() {
            du.uses.extend(address_locations(mem, pre));
        }
    } else if BINARY.contains(&m) || (m == "imul" && ops.len() == 2) {
        if ops.is_empty() || ops.len() > 2 {
            arity(2)?;
        }
        let zeroing = matches!(m, "xor" | "sub")
            && ops.len() == 2
            && ops[0].as_register().is_some()
            && ops[0].as_register().map(|r| r.gpr) == ops[1].as_register().map(|r| r.gpr);
        write(&mut du, &ops[0]);
        if zeroing {
            du.uses.clear();
        } else {
            read(&mut du, &ops[0]);
            if let Some(src) = ops.get(1) {
                read(&mut du, src);
            }
        }
        if opts.flags {
            du.defs.insert(L::Flags);
            if matches!(m, "adc" | "sbb") {
                du.uses.insert(L::Flags);
            }
        }
    } else if m == "imul" && ops.len() == 3 {
        write(&mut du, &ops[0]);
        read(&mut du, &ops[1]);
        if opts.flags {
            du.defs.insert(L::Flags);
        }
    } else if matches!(m, "imul" | "mul" | "div" | "idiv") {
        arity(1)?;
        read(&mut du, &ops[0]);
        du.uses.insert(reg(Gpr::Rax));
        if matches!(m, "div" | "idiv") {
            du.uses.insert(reg(Gpr::Rdx));
        }
        du.defs.insert(reg(Gpr::Rax));
        du.defs.insert(reg(Gpr::Rdx));
        if opts.flags {
            du.defs.insert(L::Flags);
        }
    } else if matches!(m, "cmp" | "test") {
        arity(2)?;
        read(&mut du, &ops[0]);
        read(&mut du, &ops[1]);
        if opts.flags {
            du.defs.insert(L::Flags);
        }
    } else if UNARY_FLAGS.contains(&m) || m == "not" {
        arity(1)?;
        write(&mut du, &ops[0]);
        read(&mut du, &ops[0]);
        if opts.flags && m != "not" {
            du.defs.insert(L::Flags);
        }
    } else if m == "push" {
        arity(1)?;
        read(&mut du, &ops[0]);
        du.defs.insert(match post.rsp {
            Track::Known(k) => L::StackSlot(k),
            Track::Untracked => L::StackFrame,
        });
        if pre.rsp.known().is_none() {
            du.uses.insert(reg(Gpr::Rsp));
            du.defs.insert(reg(Gpr::Rsp));
        }
    } else if m == "pop" {
        arity(1)?;
        du.uses.insert(match pre.rsp {
            Track::Known(k) => L::StackSlot(k),
            Track::Untracked => L::StackFrame,
        });
        if pre.rsp.known().is_none() {
            du.uses.insert(reg(Gpr::Rsp));
            du.defs.insert(reg(Gpr::Rsp));
        }
        write(&mut du, &ops[0]);
    } else if m == "leave" {
        match pre.rbp {
            Track::Known(b) => {
                du.uses.insert(L::StackSlot(b));
            }
            Track::Untracked => {
                du.uses.insert(reg(Gpr::Rbp));
                du.uses.insert(L::StackFrame);
                du.defs.insert(reg(Gpr::Rsp));
            }
        }
        du.defs.insert(reg(Gpr::Rbp));
    } else if m == "jmp" {
        arity(1)?;
        if !matches!(ops[0], Operand::Label(_) | Operand::Immediate(_)) {
            read(&mut du, &ops[0]);
            if let Operand::Memory(mem) = &ops[0] {
                du.uses.extend(address_locations(mem, pre));
            }
        }
    } else if is_conditional_jump(m) {
        if opts.flags {
            du.uses.insert(L::Flags);
        }
    } else if is_setcc(m) {
        arity(1)?;
        write(&mut du, &ops[0]);
        if opts.flags {
            du.uses.insert(L::Flags);
        }
    } else if is_cmov(m) {
        arity(2)?;
        write(&mut du, &ops[0]);
        read(&mut du, &ops[0]);
        read(&mut du, &ops[1]);
        if opts.flags {
            du.uses.insert(L::Flags);
        }
    } else if m == "call" {
        du.defs.extend(opts.call.defs.iter().copied());
        du.uses.extend(opts.call.uses.iter().copied());
        if let Some(op) = ops.first() {
            if !matches!(op, Operand::Label(_) | Operand::Immediate(_)) {
                read(&mut du, op);
                if let Operand::Memory(mem) = op {
                    du.uses.extend(address_locations(mem, pre));
                }
            }
        }
        if !opts.flags {
            du.defs.remove(&L::Flags);
            du.uses.remove(&L::Flags);
        }
    } else if is_return(m) {
        du.uses.insert(reg(Gpr::Rax));
    } else if matches!(m, "cdq" | "cqo") {
        du.uses.insert(reg(Gpr::Rax));
        du.defs.insert(reg(Gpr::Rdx));
    } else if matches!(m, "cdqe" | "cwde" | "cbw") {
        du.uses.insert(reg(Gpr::Rax));
        du.defs.insert(reg(Gpr::Rax));
    } else if m == "xchg" {
        arity(2)?;
        for op in ops {
            write(&mut du, op);
            read(&mut du, op);
        }
    } else if NOPS.contains(&m) {
    } else {
        match opts.unsupported {
            UnsupportedPolicy::Error => {
                return Err(Error::UnsupportedMnemonic {
                    mnemonic: m.to_string(),
                    index: inst.index,
                })
            }
            UnsupportedPolicy::Conservative => {
                du.defs.insert(L::Memory);
                du.uses.insert(L::Memory);
                for loc in CallModel::default().defs {
                    du.defs.insert(loc);
                    du.uses.insert(loc);
                }
                for op in ops {
                    read(&mut du, op);
                    write(&mut du, op);
                }
            }
        }
    }
    Ok(du)
}

fn partial(r: &Register) -> bool {
    r.width.is_partial()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_listing;

    fn inst(text: &str) -> Instruction {
        parse_listing(&format!(".func f\n{text}\n")).unwrap().remove(0).instructions.remove(0)
    }

    fn set(xs: &[Location]) -> LocationSet {
        xs.iter().copied().collect()
    }

    fn du(text: &str, flags: bool) -> DefUse {
        let opts = AnalysisOptions {
            flags,
            ..Default::default()
        };
        def_use(&inst(text), &Frame::ENTRY, &opts).unwrap()
    }

    use Location::*;

    #[test]
    fn operand_classification() {
        let op = |text: &str| inst(&format!("mov rax, {text}")).operands[1].clone();
        assert_eq!(may_locations(&op("[rsp + 0x20]"), &Frame::ENTRY), set(&[StackSlot(0x20)]));
        assert_eq!(may_locations(&op("[rsp + rax*8 + 0x30]"), &Frame::ENTRY), set(&[StackFrame]));
        assert_eq!(may_locations(&op("[rbx + rax]"), &Frame::ENTRY), set(&[Memory]));
        assert_eq!(may_locations(&op("[rsp + 8]"), &Frame::UNKNOWN), set(&[StackFrame]));
        assert_eq!(may_locations(&op("[rbp - 8]"), &Frame::UNKNOWN), set(&[Memory]));
        let framed = Frame {
            rsp: Track::Known(-16),
            rbp: Track::Known(-8),
        };
        assert_eq!(may_locations(&op("[rbp - 8]"), &framed), set(&[StackSlot(-16)]));
        assert_eq!(may_locations(&op("eax"), &framed), set(&[Register(Gpr::Rax)]));
        assert_eq!(may_locations(&op("rsp"), &framed), set(&[]));
        assert_eq!(may_locations(&op("rsp"), &Frame::UNKNOWN), set(&[Register(Gpr::Rsp)]));
        assert_eq!(may_locations(&op("0x10"), &framed), set(&[]));
    }

    #[test]
    fn table_examples() {
        let d = du("mov [rsp+0x10], rax", false);
        assert_eq!((d.defs, d.uses), (set(&[StackSlot(0x10)]), set(&[Register(Gpr::Rax)])));

        let d = du("nop", false);
        assert!(d.defs.is_empty() && d.uses.is_empty());

        let d = du("add rax, rbx", true);
        assert_eq!(d.defs, set(&[Register(Gpr::Rax), Flags]));
        assert_eq!(d.uses, set(&[Register(Gpr::Rax), Register(Gpr::Rbx)]));
        let d = du("add rax, rbx", false);
        assert_eq!(d.defs, set(&[Register(Gpr::Rax)]));
    }

    #[test]
    fn loads_do_not_use_address_registers_by_default() {
        let d = du("mov rdx, [rcx]", false);
        assert_eq!(d.uses, set(&[Memory]));
        let opts = AnalysisOptions {
            address_uses: true,
            ..Default::default()
        };
        let d = def_use(&inst("mov rdx, [rcx]"), &Frame::ENTRY, &opts).unwrap();
        assert_eq!(d.uses, set(&[Memory, Register(Gpr::Rcx)]));
    }

    #[test]
    fn lea_uses_address_registers() {
        let d = du("lea rax, [rbx + rcx*4 + 8]", false);
        assert_eq!(d.defs, set(&[Register(Gpr::Rax)]));
        assert_eq!(d.uses, set(&[Register(Gpr::Rbx), Register(Gpr::Rcx)]));
        let d = du("lea rdi, [rsp + 0x10]", false);
        assert!(d.uses.is_empty());
    }

    #[test]
    fn push_pop_and_frame_tracking() {
        let d = du("push rbx", false);
        assert_eq!(d.defs, set(&[StackSlot(-8)]));
        assert_eq!(d.uses, set(&[Register(Gpr::Rbx)]));
        let after = step_frame(&inst("push rbx"), Frame::ENTRY);
        assert_eq!(after.rsp, Track::Known(-8));
        let d = def_use(&inst("pop rbx"), &after, &AnalysisOptions::default()).unwrap();
        assert_eq!(d.uses, set(&[StackSlot(-8)]));
        assert_eq!(d.defs, set(&[Register(Gpr::Rbx)]));

        let f = step_frame(&inst("sub rsp, 0x20"), Frame::ENTRY);
        assert_eq!(f.rsp, Track::Known(-0x20));
        let f = step_frame(&inst("mov rbp, rsp"), f);
        assert_eq!(f.rbp, Track::Known(-0x20));
        let f = step_frame(&inst("and rsp, -16"), f);
        assert_eq!(f.rsp, Track::Untracked);
        let f = step_frame(&inst("leave"), f);
        assert_eq!(f.rsp, Track::Known(-0x18));
        assert_eq!(f.rbp, Track::Untracked);
        let d = du("sub rsp, 0x20", false);
        assert!(d.defs.is_empty() && d.uses.is_empty());
        let d = du("and rsp, -16", false);
        assert_eq!(d.defs, set(&[Register(Gpr::Rsp)]));
    }

    #[test]
    fn sub_registers_alias_and_partial_writes_merge() {
        let d = du("mov eax, ebx", false);
        assert_eq!(d.defs, set(&[Register(Gpr::Rax)]));
        assert_eq!(d.uses, set(&[Register(Gpr::Rbx)]));
        let d = du("mov al, bl", false);
        assert_eq!(d.uses, set(&[Register(Gpr::Rax), Register(Gpr::Rbx)]));
    }

    #[test]
    fn zeroing_idiom_and_call() {
        let d = du("xor eax, eax", true);
        assert_eq!(d.defs, set(&[Register(Gpr::Rax), Flags]));
        assert!(d.uses.is_empty());
        let d = du("call foo", false);
        assert!(d.defs.contains(&Memory) && d.defs.contains(&Register(Gpr::R11)));
        assert!(d.uses.contains(&Register(Gpr::Rdi)) && !d.uses.contains(&Register(Gpr::Rax)));
        let d = du("call rax", false);
        assert!(d.uses.contains(&Register(Gpr::Rax)));
    }

    #[test]
    fn flags_channel() {
        assert_eq!(du("jnz .L", true).uses, set(&[Flags]));
        assert!(du("jnz .L", false).uses.is_empty());
        assert_eq!(du("cmp eax, 1", true).defs, set(&[Flags]));
        assert_eq!(du("sete al", true).uses, set(&[Register(Gpr::Rax), Flags]));
        assert!(du("cmovz eax, ebx", true).uses.contains(&Flags));
    }

    #[test]
    fn unsupported_mnemonic_policy() {
        let i = inst("cpuid");
        assert!(matches!(
            def_use(&i, &Frame::ENTRY, &AnalysisOptions::default()),
            Err(Error::UnsupportedMnemonic { .. })
        ));
        let opts = AnalysisOptions {
            unsupported: UnsupportedPolicy::Conservative,
            ..Default::default()
        };
        let d = def_use(&i, &Frame::ENTRY, &opts).unwrap();
        assert!(d.defs.contains(&Memory) && d.uses.contains(&Register(Gpr::Rax)));
    }

    #[test]
    fn overlap_relation() {
        assert!(StackSlot(8).overlaps(StackFrame));
        assert!(StackSlot(8).overlaps(Memory));
        assert!(!StackSlot(8).overlaps(StackSlot(16)));
        assert!(Memory.overlaps(StackFrame));
        assert!(!Memory.overlaps(Register(Gpr::Rax)));
        assert!(!Flags.overlaps(Memory));
        for a in [Register(Gpr::Rax), Flags, StackSlot(0), StackFrame, Memory] {
            for b in [Register(Gpr::Rbx), Flags, StackSlot(0), StackSlot(4), StackFrame, Memory] {
                assert_eq!(a.overlaps(b), b.overlaps(a));
            }
        }
    }
}
