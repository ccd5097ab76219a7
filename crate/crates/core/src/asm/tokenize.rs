use serde::{Deserialize, Serialize};

use super::parse::{Instruction, Operand};
use super::vocab::{self, TokenId, Vocabulary, CLS_ID, INST_ID, PAD_ID};

/// Tokenized function: `[CLS]`, then per instruction an `<INST>` delimiter
/// followed by the instruction's own tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub surface: Vec<String>,
    /// Instruction index of each position, `-1` for `[CLS]` and `[PAD]`.
    pub inst_of: Vec<i32>,
    /// Position of the `<INST>` token of each retained instruction.
    pub inst_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of instructions that survived truncation.
    pub fn num_instructions(&self) -> usize {
        self.inst_positions.len()
    }

    pub fn is_cls(&self, pos: usize) -> bool {
        self.tokens[pos] == CLS_ID && self.inst_of[pos] < 0
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        self.tokens[pos] == PAD_ID && self.inst_of[pos] < 0
    }

    pub fn is_inst(&self, pos: usize) -> bool {
        self.inst_of[pos] >= 0 && self.inst_positions[self.inst_of[pos] as usize] == pos
    }

    pub fn instruction_of(&self, pos: usize) -> Option<usize> {
        usize::try_from(self.inst_of[pos]).ok()
    }

    /// Appends `[PAD]` tokens up to `len`.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut out = self.clone();
        while out.tokens.len() < len {
            out.tokens.push(PAD_ID);
            out.surface.push(vocab::PAD.to_string());
            out.inst_of.push(-1);
        }
        out
    }

    /// Tokens of each retained instruction (delimiter excluded).
    pub fn regroup(&self) -> Vec<Vec<String>> {
        let mut groups = vec![Vec::new(); self.num_instructions()];
        for pos in 0..self.len() {
            if let Some(t) = self.instruction_of(pos) {
                if !self.is_inst(pos) {
                    groups[t].push(self.surface[pos].clone());
                }
            }
        }
        groups
    }
}

/// Bucket for an immediate: small values stay literal, larger ones collapse
/// to a width token.
pub fn immediate_token(v: i64) -> String {
    let mag = v.unsigned_abs();
    if mag < 256 {
        v.to_string()
    } else if mag < 1 << 16 {
        vocab::IMM16.to_string()
    } else if mag < 1 << 32 {
        vocab::IMM32.to_string()
    } else {
        vocab::IMM64.to_string()
    }
}

fn is_branch(mnemonic: &str) -> bool {
    mnemonic == "call" || mnemonic == "jmp" || crate::deps::is_conditional_jump(mnemonic)
}

/// Surface tokens of one instruction, excluding its `<INST>` delimiter.
pub fn instruction_tokens(inst: &Instruction) -> Vec<String> {
    let mut out = vec![inst.mnemonic.clone()];
    for (i, op) in inst.operands.iter().enumerate() {
        if i > 0 {
            out.push(",".into());
        }
        match op {
            Operand::Register(r) => out.push(r.spelling().into()),
            Operand::Immediate(_) if is_branch(&inst.mnemonic) => out.push(vocab::ADDR.into()),
            Operand::Immediate(v) => out.push(immediate_token(*v)),
            Operand::Label(_) => out.push(vocab::ADDR.into()),
            Operand::Memory(m) => {
                if let Some(size) = m.size {
                    out.push(size.keyword().into());
                    out.push("ptr".into());
                }
                out.push("[".into());
                let mut first = true;
                if let Some(base) = m.base {
                    out.push(base.spelling().into());
                    first = false;
                }
                if let Some(index) = m.index {
                    if !first {
                        out.push("+".into());
                    }
                    if m.scale != 1 {
                        out.push(m.scale.to_string());
                        out.push("*".into());
                    }
                    out.push(index.spelling().into());
                    first = false;
                }
                if first {
                    out.push(immediate_token(m.disp));
                } else if m.disp != 0 {
                    out.push(if m.disp < 0 { "-" } else { "+" }.into());
                    out.push(immediate_token(m.disp.unsigned_abs() as i64));
                }
                out.push("]".into());
            }
        }
    }
    out
}

/// Tokenizes a function. Instructions are dropped whole from the end until
/// the sequence fits in `max_len`.
pub fn tokenize(instrs: &[Instruction], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    debug_assert!(max_len >= 1);
    let mut seq = TokenSequence {
        tokens: vec![CLS_ID],
        surface: vec![vocab::CLS.to_string()],
        inst_of: vec![-1],
        inst_positions: Vec::new(),
    };
    for (t, inst) in instrs.iter().enumerate() {
        let toks = instruction_tokens(inst);
        if seq.len() + 1 + toks.len() > max_len {
            break;
        }
        seq.inst_positions.push(seq.len());
        seq.tokens.push(INST_ID);
        seq.surface.push(vocab::INST.to_string());
        seq.inst_of.push(t as i32);
        for tok in toks {
            seq.tokens.push(vocab.id(&tok));
            seq.surface.push(tok);
            seq.inst_of.push(t as i32);
        }
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_listing;
    use crate::asm::vocab::UNK_ID;
    use proptest::prelude::*;

    fn instrs(text: &str) -> Vec<Instruction> {
        parse_listing(&format!(".func f\n{text}\n")).unwrap().remove(0).instructions
    }

    #[test]
    fn memory_read_tokenization() {
        let ins = instrs("mov rdx,[rbx+4*rax]");
        let vocab = Vocabulary::from_functions(&parse_listing(".func f\nmov rdx,[rbx+4*rax]\n").unwrap(), 1);
        let seq = tokenize(&ins, &vocab, 512);
        assert_eq!(
            seq.surface,
            ["[CLS]", "<INST>", "mov", "rdx", ",", "[", "rbx", "+", "4", "*", "rax", "]"]
        );
        assert!(seq.tokens.iter().all(|&t| t != UNK_ID));
        assert_eq!(seq.inst_of[0], -1);
        assert_eq!(seq.inst_positions, vec![1]);
    }

    #[test]
    fn empty_function() {
        let seq = tokenize(&[], &Vocabulary::default(), 512);
        assert_eq!(seq.surface, ["[CLS]"]);
        assert_eq!(seq.num_instructions(), 0);
    }

    #[test]
    fn truncation_keeps_whole_instructions() {
        // Each instruction spans five positions: <INST> add eax , ebx.
        // 1 + 5 = 6 fits in nine, 6 + 5 = 11 does not.
        let ins = instrs("add eax, ebx\nadd eax, ebx\nadd eax, ebx");
        assert_eq!(instruction_tokens(&ins[0]).len(), 4);
        let seq = tokenize(&ins, &Vocabulary::default(), 9);
        assert_eq!(seq.num_instructions(), 1);
        assert_eq!(seq.len(), 6);

        // Six tokens plus the delimiter: 1 + 7 = 8 fits, 15 does not.
        let ins = instrs("mov eax, [rbx]\nmov eax, [rbx]\nmov eax, [rbx]");
        let seq = tokenize(&ins, &Vocabulary::default(), 9);
        assert_eq!(seq.num_instructions(), 1);
        assert_eq!(seq.len(), 8);

        let seq = tokenize(&ins, &Vocabulary::default(), 7);
        assert_eq!(seq.surface, ["[CLS]"]);
    }

    #[test]
    fn addresses_and_negative_displacements() {
        let ins = instrs("call 0x401000\njnz .L2\nmov eax, [rbp-0x14]\nmov eax, 0x1234\nmov rax, 0x123456789");
        let t = |i: usize| instruction_tokens(&ins[i]);
        assert_eq!(t(0), ["call", "<addr>"]);
        assert_eq!(t(1), ["jnz", "<addr>"]);
        assert_eq!(t(2), ["mov", "eax", ",", "[", "rbp", "-", "20", "]"]);
        assert_eq!(t(3), ["mov", "eax", ",", "<imm16>"]);
        assert_eq!(t(4), ["mov", "rax", ",", "<imm64>"]);
        assert_eq!(immediate_token(-5), "-5");
        assert_eq!(immediate_token(0x401000), "<imm32>");
    }

    #[test]
    fn padding() {
        let ins = instrs("ret");
        let seq = tokenize(&ins, &Vocabulary::default(), 512).padded(5);
        assert_eq!(seq.len(), 5);
        assert!(seq.is_pad(4) && !seq.is_pad(0) && seq.is_cls(0));
    }

    fn arb_program() -> impl Strategy<Value = Vec<Instruction>> {
        let line = prop_oneof![
            Just("ret"),
            Just("add eax, 1"),
            Just("mov rdx, [rbx+4*rax]"),
            Just("push rbp"),
            Just("lea rdi, [rsp+0x10]"),
            Just("jnz .L"),
            Just("mov dword ptr [rbp-0x8], 0x1000"),
        ];
        prop::collection::vec(line, 0..20).prop_map(|lines| {
            let body = lines.join("\n");
            parse_listing(&format!(".func f\n.L:\n{body}\n")).unwrap().remove(0).instructions
        })
    }

    proptest! {
        #[test]
        fn structure_invariants(ins in arb_program(), max_len in 2usize..80) {
            let seq = tokenize(&ins, &Vocabulary::default(), max_len);
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(&seq.surface[0], "[CLS]");
            let inst_count = seq.surface.iter().filter(|s| *s == "<INST>").count();
            prop_assert_eq!(inst_count, seq.num_instructions());
            for (t, &p) in seq.inst_positions.iter().enumerate() {
                prop_assert_eq!(&seq.surface[p], "<INST>");
                prop_assert_eq!(seq.inst_of[p], t as i32);
            }
            // Regrouping gives back each retained instruction's tokens in order.
            for (t, group) in seq.regroup().iter().enumerate() {
                prop_assert_eq!(group, &instruction_tokens(&ins[t]));
            }
            // Retained instructions form a prefix.
            let kept = seq.num_instructions();
            prop_assert!(kept <= ins.len());
            if kept < ins.len() {
                prop_assert!(seq.len() + 1 + instruction_tokens(&ins[kept]).len() > max_len);
            }
        }

        #[test]
        fn truncation_is_monotone(ins in arb_program(), a in 2usize..60, b in 2usize..60) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = Vocabulary::default();
            prop_assert!(tokenize(&ins, &v, lo).len() <= tokenize(&ins, &v, hi).len());
        }
    }
}
