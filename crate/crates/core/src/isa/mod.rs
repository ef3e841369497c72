//! Toy 64-bit load/store ISA used by every program the simulator runs.
//!
//! Instruction storage is separate from data memory: the program counter is
//! an instruction index, and instruction `i` lives at byte `i * 8` of a
//! private code address space for the purposes of the I-cache model.

mod asm;
mod image;
mod interp;
mod memory;

pub use asm::{assemble, disassemble, AsmError};
pub use image::{parse_image, write_image, ImageError};
pub use interp::{alu_result, branch_taken, effective_addr, interpret, interpret_with, ArchState, TrapError};
pub use memory::Memory;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const NUM_REGS: usize = 32;
/// Link register written by `call` and read by `ret`.
pub const LINK_REG: u8 = 31;
/// Default byte address where the `.data` section starts.
pub const DATA_BASE: u64 = 0x1000;
/// Default data memory size (16 MiB).
pub const DEFAULT_MEM_SIZE: u64 = 16 << 20;
/// Bytes of code address space per instruction.
pub const INSN_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
    Xor,
    Sll,
    Srl,
    Addi,
    Andi,
    Slli,
    Srli,
    Li,
    Ld,
    St,
    Clflush,
    Beq,
    Bne,
    Blt,
    Bge,
    Jmp,
    Jalr,
    Call,
    Ret,
    Nop,
    Rdcycle,
    Halt,
}

/// How the front end predicts a control-flow instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Conditional,
    Direct,
    Indirect,
    Return,
}

/// Functional unit class an instruction executes on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnitClass {
    IntAdd,
    IntMul,
    IntDiv,
    Mem,
    /// Completes at dispatch without an execution unit.
    None,
}

impl Opcode {
    pub const ALL: [Opcode; 28] = [
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Div,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Sll,
        Opcode::Srl,
        Opcode::Addi,
        Opcode::Andi,
        Opcode::Slli,
        Opcode::Srli,
        Opcode::Li,
        Opcode::Ld,
        Opcode::St,
        Opcode::Clflush,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Bge,
        Opcode::Jmp,
        Opcode::Jalr,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Nop,
        Opcode::Rdcycle,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Div => "div",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Sll => "sll",
            Opcode::Srl => "srl",
            Opcode::Addi => "addi",
            Opcode::Andi => "andi",
            Opcode::Slli => "slli",
            Opcode::Srli => "srli",
            Opcode::Li => "li",
            Opcode::Ld => "ld",
            Opcode::St => "st",
            Opcode::Clflush => "clflush",
            Opcode::Beq => "beq",
            Opcode::Bne => "bne",
            Opcode::Blt => "blt",
            Opcode::Bge => "bge",
            Opcode::Jmp => "jmp",
            Opcode::Jalr => "jalr",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Nop => "nop",
            Opcode::Rdcycle => "rdcycle",
            Opcode::Halt => "halt",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        let lower = s.to_ascii_lowercase();
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == lower)
    }

    pub fn is_reg_reg(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::Div
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Sll
                | Opcode::Srl
        )
    }

    pub fn is_reg_imm(self) -> bool {
        matches!(self, Opcode::Addi | Opcode::Andi | Opcode::Slli | Opcode::Srli)
    }

    pub fn is_cond_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge)
    }

    pub fn branch_kind(self) -> Option<BranchKind> {
        match self {
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge => Some(BranchKind::Conditional),
            Opcode::Jmp | Opcode::Call => Some(BranchKind::Direct),
            Opcode::Jalr => Some(BranchKind::Indirect),
            Opcode::Ret => Some(BranchKind::Return),
            _ => None,
        }
    }

    pub fn unit(self) -> UnitClass {
        match self {
            Opcode::Mul => UnitClass::IntMul,
            Opcode::Div => UnitClass::IntDiv,
            Opcode::Ld | Opcode::St | Opcode::Clflush => UnitClass::Mem,
            Opcode::Nop | Opcode::Li | Opcode::Jmp | Opcode::Call | Opcode::Halt => UnitClass::None,
            _ => UnitClass::IntAdd,
        }
    }
}

/// One decoded instruction. Fields an opcode does not use are always zero,
/// so structural equality is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i64,
    pub target: usize,
}

impl Instruction {
    fn base(op: Opcode) -> Self {
        Instruction { op, rd: 0, rs1: 0, rs2: 0, imm: 0, target: 0 }
    }

    pub fn reg_reg(op: Opcode, rd: u8, rs1: u8, rs2: u8) -> Self {
        debug_assert!(op.is_reg_reg());
        Instruction { rd, rs1, rs2, ..Self::base(op) }
    }

    pub fn reg_imm(op: Opcode, rd: u8, rs1: u8, imm: i64) -> Self {
        debug_assert!(op.is_reg_imm());
        Instruction { rd, rs1, imm, ..Self::base(op) }
    }

    pub fn li(rd: u8, imm: i64) -> Self {
        Instruction { rd, imm, ..Self::base(Opcode::Li) }
    }

    pub fn ld(rd: u8, rs1: u8, imm: i64) -> Self {
        Instruction { rd, rs1, imm, ..Self::base(Opcode::Ld) }
    }

    pub fn st(rs2: u8, rs1: u8, imm: i64) -> Self {
        Instruction { rs1, rs2, imm, ..Self::base(Opcode::St) }
    }

    pub fn clflush(rs1: u8, imm: i64) -> Self {
        Instruction { rs1, imm, ..Self::base(Opcode::Clflush) }
    }

    pub fn branch(op: Opcode, rs1: u8, rs2: u8, target: usize) -> Self {
        debug_assert!(op.is_cond_branch());
        Instruction { rs1, rs2, target, ..Self::base(op) }
    }

    pub fn jmp(target: usize) -> Self {
        Instruction { target, ..Self::base(Opcode::Jmp) }
    }

    pub fn call(target: usize) -> Self {
        Instruction { target, ..Self::base(Opcode::Call) }
    }

    pub fn jalr(rd: u8, rs1: u8) -> Self {
        Instruction { rd, rs1, ..Self::base(Opcode::Jalr) }
    }

    pub fn ret() -> Self {
        Instruction { rs1: LINK_REG, ..Self::base(Opcode::Ret) }
    }

    pub fn rdcycle(rd: u8) -> Self {
        Instruction { rd, ..Self::base(Opcode::Rdcycle) }
    }

    pub fn nop() -> Self {
        Self::base(Opcode::Nop)
    }

    pub fn halt() -> Self {
        Self::base(Opcode::Halt)
    }

    /// Architectural destination register, `None` for r0 or no destination.
    pub fn dest(&self) -> Option<u8> {
        let rd = match self.op {
            Opcode::Call => LINK_REG,
            op if op.is_reg_reg() || op.is_reg_imm() => self.rd,
            Opcode::Li | Opcode::Ld | Opcode::Jalr | Opcode::Rdcycle => self.rd,
            _ => return None,
        };
        (rd != 0).then_some(rd)
    }

    /// Source registers read by the instruction (r0 omitted).
    pub fn sources(&self) -> [Option<u8>; 2] {
        let (a, b) = match self.op {
            op if op.is_reg_reg() => (Some(self.rs1), Some(self.rs2)),
            op if op.is_cond_branch() => (Some(self.rs1), Some(self.rs2)),
            op if op.is_reg_imm() => (Some(self.rs1), None),
            Opcode::Ld | Opcode::Clflush | Opcode::Jalr => (Some(self.rs1), None),
            Opcode::St => (Some(self.rs1), Some(self.rs2)),
            Opcode::Ret => (Some(LINK_REG), None),
            _ => (None, None),
        };
        [a.filter(|&r| r != 0), b.filter(|&r| r != 0)]
    }

    pub fn has_target(&self) -> bool {
        self.op.is_cond_branch() || matches!(self.op, Opcode::Jmp | Opcode::Call)
    }

    pub fn is_load(&self) -> bool {
        self.op == Opcode::Ld
    }

    pub fn is_store(&self) -> bool {
        self.op == Opcode::St
    }

}

impl fmt::Display for Instruction {
    /// Canonical text form with numeric control-flow targets.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op.mnemonic();
        match self.op {
            op if op.is_reg_reg() => write!(f, "{m} r{}, r{}, r{}", self.rd, self.rs1, self.rs2),
            op if op.is_reg_imm() => write!(f, "{m} r{}, r{}, {}", self.rd, self.rs1, self.imm),
            op if op.is_cond_branch() => write!(f, "{m} r{}, r{}, {}", self.rs1, self.rs2, self.target),
            Opcode::Li => write!(f, "li r{}, {}", self.rd, self.imm),
            Opcode::Ld => write!(f, "ld r{}, {}(r{})", self.rd, self.imm, self.rs1),
            Opcode::St => write!(f, "st r{}, {}(r{})", self.rs2, self.imm, self.rs1),
            Opcode::Clflush => write!(f, "clflush {}(r{})", self.imm, self.rs1),
            Opcode::Jmp | Opcode::Call => write!(f, "{m} {}", self.target),
            Opcode::Jalr => write!(f, "jalr r{}, r{}", self.rd, self.rs1),
            Opcode::Rdcycle => write!(f, "rdcycle r{}", self.rd),
            _ => f.write_str(m),
        }
    }
}

/// Static guarded region of a forward conditional branch: the fall-through
/// instructions `[scope_start, scope_end)` skipped when the branch is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BranchScope {
    pub branch_pc: usize,
    pub scope_start: usize,
    pub scope_end: usize,
}

impl BranchScope {
    pub fn contains(&self, pc: usize) -> bool {
        (self.scope_start..self.scope_end).contains(&pc)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScopeError {
    #[error("scopes of branches at {outer} and {inner} partially overlap")]
    PartialOverlap { outer: usize, inner: usize },
    #[error("branch at {pc} targets {target}, outside the program")]
    TargetOutOfRange { pc: usize, target: usize },
}

/// Emits one scope per forward conditional branch and rejects partially
/// overlapping scopes.
pub fn compute_branch_scopes(instructions: &[Instruction]) -> Result<Vec<BranchScope>, ScopeError> {
    let mut scopes = Vec::new();
    for (pc, insn) in instructions.iter().enumerate() {
        if !insn.op.is_cond_branch() {
            continue;
        }
        if insn.target > instructions.len() {
            return Err(ScopeError::TargetOutOfRange { pc, target: insn.target });
        }
        if insn.target > pc {
            scopes.push(BranchScope { branch_pc: pc, scope_start: pc + 1, scope_end: insn.target });
        }
    }

    // Scopes arrive sorted by start; a stack of open ends detects any scope
    // that starts inside another and ends past it.
    let mut open: Vec<&BranchScope> = Vec::new();
    for scope in &scopes {
        while open.last().is_some_and(|top| top.scope_end <= scope.scope_start) {
            open.pop();
        }
        if scope.scope_start == scope.scope_end {
            continue;
        }
        if let Some(top) = open.last() {
            if scope.scope_end > top.scope_end {
                return Err(ScopeError::PartialOverlap { outer: top.branch_pc, inner: scope.branch_pc });
            }
        }
        open.push(scope);
    }
    Ok(scopes)
}

/// An assembled program.
#[derive(Clone, Debug, Default)]
pub struct ProgramImage {
    pub instructions: Vec<Instruction>,
    /// Initialized bytes, sorted by address, no duplicates.
    pub data_init: Vec<(u64, u8)>,
    pub scope_table: Vec<BranchScope>,
    pub entry: usize,
    /// Label name to instruction index or data address; diagnostics only.
    pub labels: BTreeMap<String, u64>,
}

impl PartialEq for ProgramImage {
    /// Labels are diagnostic and do not take part in equality.
    fn eq(&self, other: &Self) -> bool {
        self.instructions == other.instructions
            && self.data_init == other.data_init
            && self.scope_table == other.scope_table
            && self.entry == other.entry
    }
}

impl ProgramImage {
    /// Builds an image from parts, computing the scope table.
    pub fn from_parts(
        instructions: Vec<Instruction>,
        data: impl IntoIterator<Item = (u64, u8)>,
        entry: usize,
    ) -> Result<Self, ScopeError> {
        let scope_table = compute_branch_scopes(&instructions)?;
        let data_init: BTreeMap<u64, u8> = data.into_iter().collect();
        Ok(ProgramImage {
            instructions,
            data_init: data_init.into_iter().collect(),
            scope_table,
            entry,
            labels: BTreeMap::new(),
        })
    }

    pub fn label(&self, name: &str) -> Option<u64> {
        self.labels.get(name).copied()
    }

    pub fn scope_of(&self, branch_pc: usize) -> Option<&BranchScope> {
        self.scope_table
            .binary_search_by_key(&branch_pc, |s| s.branch_pc)
            .ok()
            .map(|i| &self.scope_table[i])
    }

    pub fn uses_rdcycle(&self) -> bool {
        self.instructions.iter().any(|i| i.op == Opcode::Rdcycle)
    }

    /// Initial data memory image.
    pub fn initial_memory(&self) -> Memory {
        let mut mem = Memory::new();
        for &(addr, byte) in &self.data_init {
            mem.write_u8(addr, byte);
        }
        mem
    }
}
