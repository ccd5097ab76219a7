use std::fmt;

use serde::{Deserialize, Serialize};

/// A 64-bit general purpose register (or `rip`); sub-register spellings
/// alias onto one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gpr {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
    Rip,
}

impl Gpr {
    pub const ALL: [Gpr; 17] = [
        Gpr::Rax,
        Gpr::Rbx,
        Gpr::Rcx,
        Gpr::Rdx,
        Gpr::Rsi,
        Gpr::Rdi,
        Gpr::Rbp,
        Gpr::Rsp,
        Gpr::R8,
        Gpr::R9,
        Gpr::R10,
        Gpr::R11,
        Gpr::R12,
        Gpr::R13,
        Gpr::R14,
        Gpr::R15,
        Gpr::Rip,
    ];

    pub fn name(self) -> &'static str {
        self.spelling(Width::Q)
    }

    /// Surface name of this register at the given width. `rip` only has a
    /// 64-bit spelling.
    pub fn spelling(self, width: Width) -> &'static str {
        use Gpr::*;
        use Width::*;
        match (self, width) {
            (Rip, _) => "rip",
            (Rax, Q) => "rax",
            (Rax, D) => "eax",
            (Rax, W) => "ax",
            (Rax, B) => "al",
            (Rbx, Q) => "rbx",
            (Rbx, D) => "ebx",
            (Rbx, W) => "bx",
            (Rbx, B) => "bl",
            (Rcx, Q) => "rcx",
            (Rcx, D) => "ecx",
            (Rcx, W) => "cx",
            (Rcx, B) => "cl",
            (Rdx, Q) => "rdx",
            (Rdx, D) => "edx",
            (Rdx, W) => "dx",
            (Rdx, B) => "dl",
            (Rsi, Q) => "rsi",
            (Rsi, D) => "esi",
            (Rsi, W) => "si",
            (Rsi, B) => "sil",
            (Rdi, Q) => "rdi",
            (Rdi, D) => "edi",
            (Rdi, W) => "di",
            (Rdi, B) => "dil",
            (Rbp, Q) => "rbp",
            (Rbp, D) => "ebp",
            (Rbp, W) => "bp",
            (Rbp, B) => "bpl",
            (Rsp, Q) => "rsp",
            (Rsp, D) => "esp",
            (Rsp, W) => "sp",
            (Rsp, B) => "spl",
            (R8, Q) => "r8",
            (R8, D) => "r8d",
            (R8, W) => "r8w",
            (R8, B) => "r8b",
            (R9, Q) => "r9",
            (R9, D) => "r9d",
            (R9, W) => "r9w",
            (R9, B) => "r9b",
            (R10, Q) => "r10",
            (R10, D) => "r10d",
            (R10, W) => "r10w",
            (R10, B) => "r10b",
            (R11, Q) => "r11",
            (R11, D) => "r11d",
            (R11, W) => "r11w",
            (R11, B) => "r11b",
            (R12, Q) => "r12",
            (R12, D) => "r12d",
            (R12, W) => "r12w",
            (R12, B) => "r12b",
            (R13, Q) => "r13",
            (R13, D) => "r13d",
            (R13, W) => "r13w",
            (R13, B) => "r13b",
            (R14, Q) => "r14",
            (R14, D) => "r14d",
            (R14, W) => "r14w",
            (R14, B) => "r14b",
            (R15, Q) => "r15",
            (R15, D) => "r15d",
            (R15, W) => "r15w",
            (R15, B) => "r15b",
        }
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operand width of a register spelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Width {
    B,
    W,
    D,
    Q,
}

impl Width {
    pub fn bytes(self) -> u8 {
        match self {
            Width::B => 1,
            Width::W => 2,
            Width::D => 4,
            Width::Q => 8,
        }
    }

    /// Writes narrower than 32 bits leave the upper bits of the register
    /// intact.
    pub fn is_partial(self) -> bool {
        matches!(self, Width::B | Width::W)
    }
}

/// A register as written in the listing: the canonical register plus the
/// width implied by its spelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Register {
    pub gpr: Gpr,
    pub width: Width,
    /// `ah`/`bh`/`ch`/`dh` share a canonical register with `al` etc.
    pub high_byte: bool,
}

impl Register {
    pub fn new(gpr: Gpr, width: Width) -> Self {
        Register {
            gpr,
            width,
            high_byte: false,
        }
    }

    pub fn parse(name: &str) -> Option<Register> {
        let high = match name {
            "ah" => Some(Gpr::Rax),
            "bh" => Some(Gpr::Rbx),
            "ch" => Some(Gpr::Rcx),
            "dh" => Some(Gpr::Rdx),
            _ => None,
        };
        if let Some(gpr) = high {
            return Some(Register {
                gpr,
                width: Width::B,
                high_byte: true,
            });
        }
        for gpr in Gpr::ALL {
            for width in [Width::Q, Width::D, Width::W, Width::B] {
                if gpr == Gpr::Rip && width != Width::Q {
                    continue;
                }
                if gpr.spelling(width) == name {
                    return Some(Register::new(gpr, width));
                }
            }
        }
        None
    }

    pub fn spelling(&self) -> &'static str {
        if self.high_byte {
            match self.gpr {
                Gpr::Rax => "ah",
                Gpr::Rbx => "bh",
                Gpr::Rcx => "ch",
                _ => "dh",
            }
        } else {
            self.gpr.spelling(self.width)
        }
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spelling())
    }
}
