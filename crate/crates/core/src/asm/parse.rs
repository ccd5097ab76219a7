use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::register::Register;
use crate::error::{Error, Result};

/// Size annotation on a memory operand (`qword ptr [...]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PtrSize {
    Byte,
    Word,
    Dword,
    Qword,
}

impl PtrSize {
    fn parse(s: &str) -> Option<PtrSize> {
        match s {
            "byte" => Some(PtrSize::Byte),
            "word" => Some(PtrSize::Word),
            "dword" => Some(PtrSize::Dword),
            "qword" => Some(PtrSize::Qword),
            _ => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            PtrSize::Byte => "byte",
            PtrSize::Word => "word",
            PtrSize::Dword => "dword",
            PtrSize::Qword => "qword",
        }
    }
}

/// `[base + scale*index + disp]` with any subset present.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryOperand {
    pub size: Option<PtrSize>,
    pub base: Option<Register>,
    pub index: Option<Register>,
    /// Only meaningful when `index` is present; always one of 1, 2, 4, 8.
    pub scale: u8,
    pub disp: i64,
}

impl MemoryOperand {
    pub fn address_registers(&self) -> impl Iterator<Item = Register> + '_ {
        self.base.iter().chain(self.index.iter()).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Register(Register),
    Immediate(i64),
    Memory(MemoryOperand),
    Label(String),
}

impl Operand {
    pub fn as_register(&self) -> Option<Register> {
        match self {
            Operand::Register(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_memory(&self) -> Option<&MemoryOperand> {
        match self {
            Operand::Memory(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Register(r) => write!(f, "{r}"),
            Operand::Immediate(v) if *v < 0 => write!(f, "-{:#x}", v.unsigned_abs()),
            Operand::Immediate(v) => write!(f, "{v:#x}"),
            Operand::Label(l) => f.write_str(l),
            Operand::Memory(m) => {
                if let Some(size) = m.size {
                    write!(f, "{} ptr ", size.keyword())?;
                }
                f.write_str("[")?;
                let mut first = true;
                if let Some(base) = m.base {
                    write!(f, "{base}")?;
                    first = false;
                }
                if let Some(index) = m.index {
                    if !first {
                        f.write_str("+")?;
                    }
                    if m.scale != 1 {
                        write!(f, "{}*", m.scale)?;
                    }
                    write!(f, "{index}")?;
                    first = false;
                }
                if m.disp != 0 || first {
                    if first {
                        if m.disp < 0 {
                            write!(f, "-{:#x}", m.disp.unsigned_abs())?;
                        } else {
                            write!(f, "{:#x}", m.disp)?;
                        }
                    } else if m.disp < 0 {
                        write!(f, "-{:#x}", m.disp.unsigned_abs())?;
                    } else {
                        write!(f, "+{:#x}", m.disp)?;
                    }
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    /// Dense 0-based position within the function.
    pub index: usize,
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub raw_text: String,
    /// 1-based line in the listing this instruction came from.
    pub line: usize,
}

impl Instruction {
    /// Builds an instruction from its parts, rendering a canonical
    /// `raw_text`.
    pub fn new(index: usize, mnemonic: &str, operands: Vec<Operand>) -> Self {
        let mut raw_text = mnemonic.to_string();
        for (i, op) in operands.iter().enumerate() {
            raw_text.push_str(if i == 0 { " " } else { ", " });
            raw_text.push_str(&op.to_string());
        }
        Instruction {
            index,
            mnemonic: mnemonic.to_string(),
            operands,
            raw_text,
            line: 0,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_text)
    }
}

/// One `.func` block of a listing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub instructions: Vec<Instruction>,
    /// Label name to the index of the instruction that follows it. A label
    /// at the end of the function maps to `instructions.len()`.
    pub labels: BTreeMap<String, usize>,
}

impl Function {
    pub fn new(name: impl Into<String>) -> Self {
        Function {
            name: name.into(),
            instructions: Vec::new(),
            labels: BTreeMap::new(),
        }
    }

    /// Renders the function back into listing syntax.
    pub fn to_listing(&self) -> String {
        let mut out = format!(".func {}\n", self.name);
        let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (label, &idx) in &self.labels {
            by_index.entry(idx).or_default().push(label);
        }
        for i in 0..=self.instructions.len() {
            if let Some(labels) = by_index.get(&i) {
                for l in labels {
                    out.push_str(l);
                    out.push_str(":\n");
                }
            }
            if let Some(inst) = self.instructions.get(i) {
                out.push_str("    ");
                out.push_str(&inst.raw_text);
                out.push('\n');
            }
        }
        out
    }
}

/// Parses a textual listing into its functions.
///
/// ```
/// let fns = depattn::asm::parse_listing(".func f\n  mov rdx, [rbx+4*rax]\n  ret\n").unwrap();
/// assert_eq!(fns[0].instructions.len(), 2);
/// assert_eq!(fns[0].instructions[0].mnemonic, "mov");
/// ```
pub fn parse_listing(text: &str) -> Result<Vec<Function>> {
    let mut functions: Vec<Function> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let body = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix(".func") {
            let name = rest.trim();
            if name.is_empty() || name.contains(char::is_whitespace) || !rest.starts_with(char::is_whitespace) {
                return Err(Error::Syntax {
                    line,
                    message: format!("malformed function header `{body}`"),
                });
            }
            functions.push(Function::new(name));
            continue;
        }
        let Some(func) = functions.last_mut() else {
            return Err(Error::Syntax {
                line,
                message: "instruction outside of a `.func` block".into(),
            });
        };
        if let Some(label) = body.strip_suffix(':') {
            if !is_identifier(label) {
                return Err(Error::Syntax {
                    line,
                    message: format!("malformed label `{body}`"),
                });
            }
            if func.labels.insert(label.to_string(), func.instructions.len()).is_some() {
                return Err(Error::Syntax {
                    line,
                    message: format!("duplicate label `{label}`"),
                });
            }
            continue;
        }
        let index = func.instructions.len();
        func.instructions.push(parse_instruction(body, index, line)?);
    }
    Ok(functions)
}

fn parse_instruction(body: &str, index: usize, line: usize) -> Result<Instruction> {
    let (mnemonic, rest) = match body.find(char::is_whitespace) {
        Some(pos) => (&body[..pos], body[pos..].trim()),
        None => (body, ""),
    };
    let mnemonic = mnemonic.to_ascii_lowercase();
    if !mnemonic.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(Error::Syntax {
            line,
            message: format!("malformed mnemonic `{mnemonic}`"),
        });
    }
    let mut operands = Vec::new();
    if !rest.is_empty() {
        for piece in rest.split(',') {
            operands.push(parse_operand(piece.trim(), line)?);
        }
    }
    Ok(Instruction {
        index,
        mnemonic,
        operands,
        raw_text: body.to_string(),
        line,
    })
}

fn parse_operand(text: &str, line: usize) -> Result<Operand> {
    let unknown = || Error::UnknownOperand {
        line,
        text: text.to_string(),
    };
    if text.is_empty() {
        return Err(Error::Syntax {
            line,
            message: "empty operand".into(),
        });
    }
    let lower = text.to_ascii_lowercase();
    let mut size = None;
    let mut mem_text = lower.as_str();
    if let Some((kw, rest)) = lower.split_once(char::is_whitespace).filter(|_| !lower.starts_with('[')) {
        let rest = rest.trim_start();
        let Some(ptr_size) = PtrSize::parse(kw) else {
            return Err(unknown());
        };
        let Some(rest) = rest.strip_prefix("ptr") else {
            return Err(unknown());
        };
        size = Some(ptr_size);
        mem_text = rest.trim_start();
    }
    if let Some(inner) = mem_text.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or_else(unknown)?;
        return parse_memory(inner, size).map(Operand::Memory).ok_or_else(unknown);
    }
    if size.is_some() {
        return Err(unknown());
    }
    if let Some(reg) = Register::parse(&lower) {
        return Ok(Operand::Register(reg));
    }
    if let Some(v) = parse_number(&lower) {
        return Ok(Operand::Immediate(v));
    }
    if is_identifier(text) {
        return Ok(Operand::Label(text.to_string()));
    }
    Err(unknown())
}

fn parse_memory(inner: &str, size: Option<PtrSize>) -> Option<MemoryOperand> {
    let mut mem = MemoryOperand {
        size,
        base: None,
        index: None,
        scale: 1,
        disp: 0,
    };
    let compact: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return None;
    }
    // Split into signed terms.
    let mut terms: Vec<(bool, &str)> = Vec::new();
    let mut start = 0;
    let mut negative = false;
    let bytes = compact.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'+' || b == b'-' {
            if i == start {
                if i != 0 {
                    return None;
                }
            } else {
                terms.push((negative, &compact[start..i]));
            }
            negative = b == b'-';
            start = i + 1;
        }
    }
    if start >= compact.len() {
        return None;
    }
    terms.push((negative, &compact[start..]));

    let mut saw_disp = false;
    for (negative, term) in terms {
        if let Some((a, b)) = term.split_once('*') {
            if negative || mem.index.is_some() {
                return None;
            }
            let (reg, scale) = match (Register::parse(a), Register::parse(b)) {
                (Some(r), None) => (r, parse_number(b)?),
                (None, Some(r)) => (r, parse_number(a)?),
                _ => return None,
            };
            if ![1, 2, 4, 8].contains(&scale) {
                return None;
            }
            mem.index = Some(reg);
            mem.scale = scale as u8;
        } else if let Some(reg) = Register::parse(term) {
            if negative {
                return None;
            }
            if mem.base.is_none() {
                mem.base = Some(reg);
            } else if mem.index.is_none() {
                mem.index = Some(reg);
                mem.scale = 1;
            } else {
                return None;
            }
        } else {
            let v = parse_number(term)?;
            let v = if negative { v.checked_neg()? } else { v };
            mem.disp = mem.disp.checked_add(v)?;
            saw_disp = true;
        }
    }
    if mem.base.is_none() && mem.index.is_none() && !saw_disp {
        return None;
    }
    Some(mem)
}

/// Decimal or `0x` hexadecimal, optionally negative. Hex values up to
/// `u64::MAX` wrap into the signed range.
pub(crate) fn parse_number(s: &str) -> Option<i64> {
    let (negative, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude = if let Some(hex) = digits.strip_prefix("0x").or_else(|| digits.strip_prefix("0X")) {
        if hex.is_empty() {
            return None;
        }
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse::<i64>().ok()?
    };
    Some(if negative { magnitude.wrapping_neg() } else { magnitude })
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || "_.$@".contains(c) => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || "_.$@".contains(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::register::{Gpr, Width};

    fn reg(name: &str) -> Register {
        Register::parse(name).unwrap()
    }

    fn one(line: &str) -> Instruction {
        let fns = parse_listing(&format!(".func f\n{line}\n")).unwrap();
        fns[0].instructions[0].clone()
    }

    #[test]
    fn scaled_index_memory_operand() {
        let inst = one("mov rdx, [rbx+4*rax]");
        assert_eq!(inst.mnemonic, "mov");
        assert_eq!(
            inst.operands,
            vec![
                Operand::Register(reg("rdx")),
                Operand::Memory(MemoryOperand {
                    size: None,
                    base: Some(reg("rbx")),
                    index: Some(reg("rax")),
                    scale: 4,
                    disp: 0,
                }),
            ]
        );
    }

    #[test]
    fn zero_operand_and_label_operand() {
        let ret = one("ret");
        assert_eq!(ret.mnemonic, "ret");
        assert!(ret.operands.is_empty());

        let jnz = one("jnz .L2");
        assert_eq!(jnz.mnemonic, "jnz");
        assert_eq!(jnz.operands, vec![Operand::Label(".L2".into())]);
    }

    #[test]
    fn memory_forms() {
        let m = |s: &str| match parse_operand(s, 1).unwrap() {
            Operand::Memory(m) => m,
            other => panic!("not memory: {other:?}"),
        };
        let a = m("[rsp + rax*8 + 0x30]");
        assert_eq!(a.base.unwrap().gpr, Gpr::Rsp);
        assert_eq!(a.index.unwrap().gpr, Gpr::Rax);
        assert_eq!((a.scale, a.disp), (8, 0x30));

        let b = m("qword ptr [rbp-0x8]");
        assert_eq!(b.size, Some(PtrSize::Qword));
        assert_eq!(b.disp, -8);

        let c = m("[0x601040]");
        assert!(c.base.is_none() && c.index.is_none());
        assert_eq!(c.disp, 0x601040);

        let d = m("[rbx + rax]");
        assert_eq!(d.index.unwrap().gpr, Gpr::Rax);
        assert_eq!(d.scale, 1);
    }

    #[test]
    fn rejects_bad_operands() {
        for bad in ["[rax*3]", "[]", "[rax+rbx+rcx]", "[-rax]", "foo bar", "qword [rax]", "%eax"] {
            let err = parse_listing(&format!(".func f\nmov rax, {bad}\n")).unwrap_err();
            assert!(
                matches!(err, Error::UnknownOperand { line: 2, .. }),
                "{bad}: {err}"
            );
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_listing("mov rax, rbx\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 1, .. }));
        let err = parse_listing(".func f\n\n  mov rax,\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 3, .. }));
        let err = parse_listing(".func f\nL:\nL:\n").unwrap_err();
        assert!(matches!(err, Error::Syntax { line: 3, .. }));
    }

    #[test]
    fn functions_labels_and_comments() {
        let text = "# header\n.func a\n  cmp eax, 1  # compare\n  jnz .L1\n  nop\n.L1:\n  ret\n.func b\n  ret\n.end:\n";
        let fns = parse_listing(text).unwrap();
        assert_eq!(fns.len(), 2);
        assert_eq!(fns[0].name, "a");
        assert_eq!(fns[0].labels[".L1"], 3);
        assert_eq!(fns[0].instructions[0].raw_text, "cmp eax, 1");
        assert_eq!(fns[0].instructions[3].line, 7);
        assert_eq!(fns[1].labels[".end"], 1);
        let idx: Vec<usize> = fns[0].instructions.iter().map(|i| i.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn listing_render_reparses() {
        let text = ".func a\n  mov dword ptr [rsp+0x10], eax\n  lea rdi, [rbx+8*rcx-0x4]\n.L1:\n  jmp .L1\n";
        let f = &parse_listing(text).unwrap()[0];
        let rendered: Vec<Instruction> = f
            .instructions
            .iter()
            .map(|i| Instruction::new(i.index, &i.mnemonic, i.operands.clone()))
            .collect();
        let mut g = f.clone();
        g.instructions = rendered;
        let again = &parse_listing(&g.to_listing()).unwrap()[0];
        for (x, y) in f.instructions.iter().zip(&again.instructions) {
            assert_eq!(x.operands, y.operands);
        }
        assert_eq!(again.labels, f.labels);
        assert_eq!(reg("eax").width, Width::D);
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_number("0x10"), Some(16));
        assert_eq!(parse_number("-12"), Some(-12));
        assert_eq!(parse_number("0xffffffffffffffff"), Some(-1));
        assert_eq!(parse_number("12a"), None);
    }
}
