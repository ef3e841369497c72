//! In-order functional interpreter; the architectural oracle for the
//! out-of-order core.

use thiserror::Error;

use super::{Instruction, Memory, Opcode, ProgramImage, DEFAULT_MEM_SIZE, LINK_REG, NUM_REGS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrapError {
    #[error("memory access at {addr:#x} (pc {pc}) outside {size:#x}-byte memory")]
    MemoryOutOfRange { pc: usize, addr: u64, size: u64 },
    #[error("pc {pc} outside the {len}-instruction program")]
    PcOutOfRange { pc: usize, len: usize },
}

/// Architectural state after a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u64; NUM_REGS],
    pub memory: Memory,
    pub pc: usize,
    pub halted: bool,
    pub retired_count: u64,
}

impl ArchState {
    pub fn new(program: &ProgramImage) -> Self {
        ArchState {
            regs: [0; NUM_REGS],
            memory: program.initial_memory(),
            pc: program.entry,
            halted: false,
            retired_count: 0,
        }
    }
}

/// Result of a register-only operation; `a`/`b` are the rs1/rs2 values.
/// Division by zero yields all ones.
pub fn alu_result(insn: &Instruction, a: u64, b: u64) -> u64 {
    let imm = insn.imm as u64;
    match insn.op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Mul => a.wrapping_mul(b),
        Opcode::Div => a.checked_div(b).unwrap_or(u64::MAX),
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Xor => a ^ b,
        Opcode::Sll => a << (b & 63),
        Opcode::Srl => a >> (b & 63),
        Opcode::Addi => a.wrapping_add(imm),
        Opcode::Andi => a & imm,
        Opcode::Slli => a << (imm & 63),
        Opcode::Srli => a >> (imm & 63),
        Opcode::Li => imm,
        _ => 0,
    }
}

/// Signed comparison outcome of a conditional branch.
pub fn branch_taken(op: Opcode, a: u64, b: u64) -> bool {
    match op {
        Opcode::Beq => a == b,
        Opcode::Bne => a != b,
        Opcode::Blt => (a as i64) < (b as i64),
        Opcode::Bge => (a as i64) >= (b as i64),
        _ => false,
    }
}

pub fn effective_addr(insn: &Instruction, base: u64) -> u64 {
    base.wrapping_add(insn.imm as u64)
}

/// Runs with the default 16 MiB memory.
pub fn interpret(program: &ProgramImage, max_steps: u64) -> Result<ArchState, TrapError> {
    interpret_with(program, max_steps, DEFAULT_MEM_SIZE)
}

pub fn interpret_with(program: &ProgramImage, max_steps: u64, mem_size: u64) -> Result<ArchState, TrapError> {
    let mut st = ArchState::new(program);
    let len = program.instructions.len();
    let check = |pc: usize, addr: u64| -> Result<(), TrapError> {
        if addr.checked_add(8).is_some_and(|end| end <= mem_size) {
            Ok(())
        } else {
            Err(TrapError::MemoryOutOfRange { pc, addr, size: mem_size })
        }
    };

    for _ in 0..max_steps {
        let pc = st.pc;
        let insn = *program.instructions.get(pc).ok_or(TrapError::PcOutOfRange { pc, len })?;
        let r = |i: u8| st.regs[i as usize];
        let (a, b) = (r(insn.rs1), r(insn.rs2));
        let mut next = pc + 1;
        let mut write: Option<u64> = None;

        match insn.op {
            op if op.is_reg_reg() || op.is_reg_imm() || op == Opcode::Li => write = Some(alu_result(&insn, a, b)),
            Opcode::Ld => {
                let addr = effective_addr(&insn, a);
                check(pc, addr)?;
                write = Some(st.memory.read_u64(addr));
            }
            Opcode::St => {
                let addr = effective_addr(&insn, a);
                check(pc, addr)?;
                st.memory.write_u64(addr, b);
            }
            Opcode::Clflush => check(pc, effective_addr(&insn, a))?,
            op if op.is_cond_branch() => {
                if branch_taken(op, a, b) {
                    next = insn.target;
                }
            }
            Opcode::Jmp => next = insn.target,
            Opcode::Call => {
                write = Some(pc as u64 + 1);
                next = insn.target;
            }
            Opcode::Jalr => {
                write = Some(pc as u64 + 1);
                next = a as usize;
            }
            Opcode::Ret => next = st.regs[LINK_REG as usize] as usize,
            Opcode::Rdcycle => write = Some(0),
            Opcode::Nop => {}
            Opcode::Halt => {
                st.halted = true;
                st.retired_count += 1;
                return Ok(st);
            }
            _ => unreachable!(),
        }

        if let (Some(v), Some(rd)) = (write, insn.dest()) {
            st.regs[rd as usize] = v;
        }
        st.retired_count += 1;
        st.pc = next;
    }
    Ok(st)
}
