//! Two-pass line assembler and canonical disassembler.
//!
//! ```text
//! ; comment
//! .data
//! array1: .byte 1, 2, 3
//!         .align 64
//! probe:  .space 4096
//! .text
//! .entry main
//! main:   li r1, array1
//!         ld r2, 0(r1)
//!         bge r2, r3, done
//! done:   halt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{compute_branch_scopes, Instruction, Opcode, ProgramImage, ScopeError, DATA_BASE, DEFAULT_MEM_SIZE, NUM_REGS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown opcode `{op}`")]
    UnknownOpcode { line: usize, op: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: register `{reg}` out of range")]
    BadRegister { line: usize, reg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("branch scope: {0}")]
    Scope(#[from] ScopeError),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Data,
    Text,
}

struct PendingInsn {
    line: usize,
    op: Opcode,
    operands: Vec<String>,
}

enum DataItem {
    Bytes(Vec<String>),
    Words(Vec<String>),
}

struct PendingData {
    line: usize,
    addr: u64,
    item: DataItem,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

fn strip_comment(line: &str) -> &str {
    match line.find(';') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_operands(s: &str) -> Vec<String> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(|t| t.trim().to_string()).collect()
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let mag = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        body.parse::<u64>().ok()? as i64
    };
    Some(if neg { mag.wrapping_neg() } else { mag })
}

struct Resolver<'a> {
    labels: &'a BTreeMap<String, u64>,
}

impl Resolver<'_> {
    /// Integer, label, or `label+n` / `label-n`.
    fn value(&self, line: usize, tok: &str) -> Result<i64, AsmError> {
        let tok = tok.trim();
        if tok.is_empty() {
            return Err(syntax(line, "missing operand"));
        }
        if let Some(v) = parse_int(tok) {
            return Ok(v);
        }
        let split = tok[1..].find(['+', '-']).map(|i| i + 1);
        let (name, offset) = match split {
            Some(i) => {
                let off = parse_int(&tok[i..]).ok_or_else(|| syntax(line, format!("bad offset in `{tok}`")))?;
                (tok[..i].trim(), off)
            }
            None => (tok, 0),
        };
        if !is_label_name(name) {
            return Err(syntax(line, format!("bad operand `{tok}`")));
        }
        self.labels
            .get(name)
            .map(|&v| (v as i64).wrapping_add(offset))
            .ok_or_else(|| AsmError::UndefinedLabel { line, label: name.to_string() })
    }

    fn target(&self, line: usize, tok: &str) -> Result<usize, AsmError> {
        let v = self.value(line, tok)?;
        usize::try_from(v).map_err(|_| syntax(line, format!("negative target `{tok}`")))
    }
}

fn parse_reg(line: usize, tok: &str) -> Result<u8, AsmError> {
    let tok = tok.trim();
    let digits = tok
        .strip_prefix('r')
        .or_else(|| tok.strip_prefix('R'))
        .ok_or_else(|| syntax(line, format!("expected register, found `{tok}`")))?;
    match digits.parse::<usize>() {
        Ok(n) if n < NUM_REGS => Ok(n as u8),
        Ok(_) => Err(AsmError::BadRegister { line, reg: tok.to_string() }),
        Err(_) => Err(syntax(line, format!("expected register, found `{tok}`"))),
    }
}

/// Splits `imm(rs1)` into its parts.
fn parse_mem_operand(line: usize, tok: &str) -> Result<(&str, &str), AsmError> {
    let open = tok.find('(').ok_or_else(|| syntax(line, format!("expected imm(reg), found `{tok}`")))?;
    let close = tok.rfind(')').filter(|&c| c > open).ok_or_else(|| syntax(line, "unclosed `(`"))?;
    let imm = tok[..open].trim();
    Ok((if imm.is_empty() { "0" } else { imm }, &tok[open + 1..close]))
}

fn expect_operands(line: usize, op: Opcode, operands: &[String], n: usize) -> Result<(), AsmError> {
    if operands.len() != n {
        return Err(syntax(
            line,
            format!("`{}` takes {n} operand(s), found {}", op.mnemonic(), operands.len()),
        ));
    }
    Ok(())
}

fn encode(p: &PendingInsn, r: &Resolver<'_>) -> Result<Instruction, AsmError> {
    let (line, op, ops) = (p.line, p.op, &p.operands);
    let insn = match op {
        op if op.is_reg_reg() => {
            expect_operands(line, op, ops, 3)?;
            Instruction::reg_reg(op, parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?, parse_reg(line, &ops[2])?)
        }
        op if op.is_reg_imm() => {
            expect_operands(line, op, ops, 3)?;
            Instruction::reg_imm(op, parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?, r.value(line, &ops[2])?)
        }
        op if op.is_cond_branch() => {
            expect_operands(line, op, ops, 3)?;
            Instruction::branch(op, parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?, r.target(line, &ops[2])?)
        }
        Opcode::Li => {
            expect_operands(line, op, ops, 2)?;
            Instruction::li(parse_reg(line, &ops[0])?, r.value(line, &ops[1])?)
        }
        Opcode::Ld => {
            expect_operands(line, op, ops, 2)?;
            let (imm, base) = parse_mem_operand(line, &ops[1])?;
            Instruction::ld(parse_reg(line, &ops[0])?, parse_reg(line, base)?, r.value(line, imm)?)
        }
        Opcode::St => {
            expect_operands(line, op, ops, 2)?;
            let (imm, base) = parse_mem_operand(line, &ops[1])?;
            Instruction::st(parse_reg(line, &ops[0])?, parse_reg(line, base)?, r.value(line, imm)?)
        }
        Opcode::Clflush => {
            expect_operands(line, op, ops, 1)?;
            let (imm, base) = parse_mem_operand(line, &ops[0])?;
            Instruction::clflush(parse_reg(line, base)?, r.value(line, imm)?)
        }
        Opcode::Jmp | Opcode::Call => {
            expect_operands(line, op, ops, 1)?;
            let t = r.target(line, &ops[0])?;
            if op == Opcode::Jmp {
                Instruction::jmp(t)
            } else {
                Instruction::call(t)
            }
        }
        Opcode::Jalr => {
            expect_operands(line, op, ops, 2)?;
            Instruction::jalr(parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?)
        }
        Opcode::Rdcycle => {
            expect_operands(line, op, ops, 1)?;
            Instruction::rdcycle(parse_reg(line, &ops[0])?)
        }
        Opcode::Ret => {
            expect_operands(line, op, ops, 0)?;
            Instruction::ret()
        }
        Opcode::Nop | Opcode::Halt => {
            expect_operands(line, op, ops, 0)?;
            if op == Opcode::Nop {
                Instruction::nop()
            } else {
                Instruction::halt()
            }
        }
        _ => unreachable!("all opcodes covered"),
    };
    Ok(insn)
}

/// Parses one canonical instruction with numeric operands only.
pub(crate) fn parse_instruction(line: usize, text: &str) -> Result<Instruction, AsmError> {
    let text = strip_comment(text).trim();
    let (head, tail) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let op = Opcode::from_mnemonic(head).ok_or_else(|| AsmError::UnknownOpcode { line, op: head.to_string() })?;
    let labels = BTreeMap::new();
    encode(&PendingInsn { line, op, operands: split_operands(tail) }, &Resolver { labels: &labels })
}

/// Assembles source text into a [`ProgramImage`].
pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut insns: Vec<PendingInsn> = Vec::new();
    let mut data: Vec<PendingData> = Vec::new();
    let mut entry: Option<(usize, String)> = None;
    let mut section = Section::Text;
    let mut data_addr = DATA_BASE;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut rest = strip_comment(raw).trim();

        // Any number of leading `label:` prefixes.
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if !is_label_name(name) {
                break;
            }
            let value = match section {
                Section::Text => insns.len() as u64,
                Section::Data => data_addr,
            };
            if labels.insert(name.to_string(), value).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: name.to_string() });
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }

        let (head, tail) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim()),
            None => (rest, ""),
        };

        if let Some(directive) = head.strip_prefix('.') {
            match directive {
                "data" => section = Section::Data,
                "text" => section = Section::Text,
                "entry" => entry = Some((line, tail.to_string())),
                "org" | "align" | "byte" | "word" | "space" if section != Section::Data => {
                    return Err(syntax(line, format!("`.{directive}` outside .data")));
                }
                "org" => {
                    let v = parse_int(tail).ok_or_else(|| syntax(line, format!("bad address `{tail}`")))?;
                    data_addr = v as u64;
                }
                "align" => {
                    let v = parse_int(tail).filter(|&v| v > 0).ok_or_else(|| syntax(line, "bad alignment"))? as u64;
                    data_addr = data_addr.div_ceil(v) * v;
                }
                "space" => {
                    let v = parse_int(tail).filter(|&v| v >= 0).ok_or_else(|| syntax(line, "bad size"))?;
                    data_addr += v as u64;
                }
                "byte" | "word" => {
                    let items = split_operands(tail);
                    if items.is_empty() {
                        return Err(syntax(line, format!("`.{directive}` needs values")));
                    }
                    let width = if directive == "byte" { 1 } else { 8 };
                    let n = items.len() as u64;
                    let item = if directive == "byte" { DataItem::Bytes(items) } else { DataItem::Words(items) };
                    data.push(PendingData { line, addr: data_addr, item });
                    data_addr += n * width;
                }
                other => return Err(syntax(line, format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        if section != Section::Text {
            return Err(syntax(line, format!("instruction `{head}` inside .data")));
        }
        let op = Opcode::from_mnemonic(head).ok_or_else(|| AsmError::UnknownOpcode { line, op: head.to_string() })?;
        insns.push(PendingInsn { line, op, operands: split_operands(tail) });
    }

    let resolver = Resolver { labels: &labels };
    let instructions = insns.iter().map(|p| encode(p, &resolver)).collect::<Result<Vec<_>, _>>()?;
    for (p, insn) in insns.iter().zip(&instructions) {
        if insn.has_target() && insn.target >= instructions.len() {
            return Err(syntax(p.line, format!("target {} outside program", insn.target)));
        }
    }

    let mut bytes: BTreeMap<u64, u8> = BTreeMap::new();
    for d in &data {
        let mut put = |addr: u64, b: u8| -> Result<(), AsmError> {
            if addr >= DEFAULT_MEM_SIZE {
                return Err(syntax(d.line, format!("data address {addr:#x} outside memory")));
            }
            if bytes.insert(addr, b).is_some() {
                return Err(syntax(d.line, format!("data overlaps at {addr:#x}")));
            }
            Ok(())
        };
        match &d.item {
            DataItem::Bytes(items) => {
                for (i, tok) in items.iter().enumerate() {
                    let v = resolver.value(d.line, tok)?;
                    if !(-128..=255).contains(&v) {
                        return Err(syntax(d.line, format!("byte value {v} out of range")));
                    }
                    put(d.addr + i as u64, v as u8)?;
                }
            }
            DataItem::Words(items) => {
                for (i, tok) in items.iter().enumerate() {
                    let v = resolver.value(d.line, tok)? as u64;
                    for (j, b) in v.to_le_bytes().into_iter().enumerate() {
                        put(d.addr + 8 * i as u64 + j as u64, b)?;
                    }
                }
            }
        }
    }

    let entry = match entry {
        None => 0,
        Some((line, tok)) => {
            let t = resolver.target(line, &tok)?;
            if t >= instructions.len().max(1) {
                return Err(syntax(line, format!("entry {t} outside program")));
            }
            t
        }
    };

    let scope_table = compute_branch_scopes(&instructions)?;
    Ok(ProgramImage {
        instructions,
        data_init: bytes.into_iter().collect(),
        scope_table,
        entry,
        labels,
    })
}

/// Canonical source text: `assemble(&disassemble(p)) == p`.
pub fn disassemble(program: &ProgramImage) -> String {
    let mut out = String::new();
    out.push_str("; canonical disassembly\n");
    let _ = writeln!(
        out,
        "; {} instructions, {} data bytes, {} branch scopes",
        program.instructions.len(),
        program.data_init.len(),
        program.scope_table.len()
    );

    if !program.data_init.is_empty() {
        out.push_str(".data\n");
        let mut run_start: Option<u64> = None;
        let mut prev = 0u64;
        let mut run: Vec<u8> = Vec::new();
        let flush = |out: &mut String, start: u64, run: &[u8]| {
            let _ = writeln!(out, ".org {start:#x}");
            for chunk in run.chunks(16) {
                let vals: Vec<String> = chunk.iter().map(|b| b.to_string()).collect();
                let _ = writeln!(out, ".byte {}", vals.join(", "));
            }
        };
        for &(addr, byte) in &program.data_init {
            match run_start {
                Some(_) if addr == prev + 1 => {}
                Some(start) => {
                    flush(&mut out, start, &run);
                    run.clear();
                    run_start = Some(addr);
                }
                None => run_start = Some(addr),
            }
            run.push(byte);
            prev = addr;
        }
        if let Some(start) = run_start {
            flush(&mut out, start, &run);
        }
    }

    out.push_str(".text\n");
    if program.entry != 0 {
        let _ = writeln!(out, ".entry {}", program.entry);
    }
    for insn in &program.instructions {
        let _ = writeln!(out, "{insn}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::BranchScope;

    #[test]
    fn empty_source() {
        let p = assemble("").unwrap();
        assert!(p.instructions.is_empty());
        assert!(p.scope_table.is_empty());
    }

    #[test]
    fn straight_line_program() {
        let p = assemble("li r1, 2\nli r2, 3\nadd r3, r1, r2\nhalt\n").unwrap();
        assert_eq!(p.instructions.len(), 4);
        assert!(p.scope_table.is_empty());
        assert_eq!(p.instructions[2], Instruction::reg_reg(Opcode::Add, 3, 1, 2));
    }

    #[test]
    fn labels_data_and_scopes() {
        let src = "
            .data
            size: .word 16
                  .align 64
            arr:  .byte 1, 2, 0xff
            .text
            .entry main
            pad:  nop
            main: li r1, arr
                  ld r2, size(r0)
                  bge r3, r2, out   ; bounds check
                  ld r4, 0(r1)
            out:  halt
        ";
        let p = assemble(src).unwrap();
        assert_eq!(p.entry, 1);
        assert_eq!(p.label("arr"), Some(DATA_BASE + 64));
        assert_eq!(p.instructions[1], Instruction::li(1, (DATA_BASE + 64) as i64));
        assert_eq!(p.instructions[2], Instruction::ld(2, 0, DATA_BASE as i64));
        assert_eq!(p.scope_table, vec![BranchScope { branch_pc: 3, scope_start: 4, scope_end: 5 }]);
        assert_eq!(p.data_init[0], (DATA_BASE, 16));
        assert_eq!(*p.data_init.last().unwrap(), (DATA_BASE + 66, 0xff));
    }

    #[test]
    fn error_cases_carry_line_numbers() {
        assert_eq!(
            assemble("nop\nfrob r1, r2").unwrap_err(),
            AsmError::UnknownOpcode { line: 2, op: "frob".into() }
        );
        assert_eq!(
            assemble("jmp nowhere").unwrap_err(),
            AsmError::UndefinedLabel { line: 1, label: "nowhere".into() }
        );
        assert_eq!(
            assemble("nop\n\nli r32, 1").unwrap_err(),
            AsmError::BadRegister { line: 3, reg: "r32".into() }
        );
        assert_eq!(
            assemble("a: nop\na: nop").unwrap_err(),
            AsmError::DuplicateLabel { line: 2, label: "a".into() }
        );
    }

    #[test]
    fn label_arithmetic() {
        let p = assemble(".data\nx: .space 8\ny: .word 1\n.text\nli r1, y-8\nld r2, x+8(r0)\nhalt").unwrap();
        assert_eq!(p.instructions[0].imm, DATA_BASE as i64);
        assert_eq!(p.instructions[1].imm, DATA_BASE as i64 + 8);
    }

    #[test]
    fn disassembly_round_trips() {
        let src = ".data\n.org 0x2000\nv: .byte 7, 0, 9\nw: .word -1\n.text\n.entry 1\nnop\nbeq r1, r0, 4\nclflush 8(r2)\nst r3, -4(r2)\ncall 6\njalr r5, r6\nret\nrdcycle r7\nhalt";
        let p = assemble(src).unwrap();
        let text = disassemble(&p);
        assert_eq!(assemble(&text).unwrap(), p);
        assert_eq!(text.lines().filter(|l| !l.starts_with(';') && !l.starts_with('.')).count(), 9);
    }
}
