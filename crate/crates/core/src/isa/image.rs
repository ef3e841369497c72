//! Record-per-line ProgramImage file:
//!
//! ```text
//! E <entry>
//! I <idx> <canonical instruction>
//! D <addr> <byte>
//! S <branch_pc> <start> <end>
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use super::asm::parse_instruction;
use super::{compute_branch_scopes, AsmError, BranchScope, ProgramImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("image line {line}: instruction: {source}")]
    Instruction { line: usize, source: AsmError },
    #[error("scope records do not match the instructions")]
    ScopeMismatch,
}

pub fn write_image(program: &ProgramImage) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "E {}", program.entry);
    for (i, insn) in program.instructions.iter().enumerate() {
        let _ = writeln!(out, "I {i} {insn}");
    }
    for (addr, byte) in &program.data_init {
        let _ = writeln!(out, "D {addr} {byte}");
    }
    for s in &program.scope_table {
        let _ = writeln!(out, "S {} {} {}", s.branch_pc, s.scope_start, s.scope_end);
    }
    out
}

pub fn parse_image(text: &str) -> Result<ProgramImage, ImageError> {
    let mut entry = 0usize;
    let mut insns = Vec::new();
    let mut data = Vec::new();
    let mut scopes = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with(';') || raw.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| ImageError::Malformed { line, msg: msg.to_string() };
        let (tag, rest) = raw.split_once(char::is_whitespace).ok_or_else(|| bad("record has no fields"))?;
        let rest = rest.trim();
        match tag {
            "E" => entry = rest.parse().map_err(|_| bad("bad entry"))?,
            "I" => {
                let (i, text) = rest.split_once(char::is_whitespace).ok_or_else(|| bad("missing instruction"))?;
                let i: usize = i.parse().map_err(|_| bad("bad index"))?;
                if i != insns.len() {
                    return Err(bad("instruction indices must be dense and ascending"));
                }
                let insn = parse_instruction(line, text).map_err(|e| ImageError::Instruction { line, source: e })?;
                insns.push(insn);
            }
            "D" => {
                let mut it = rest.split_whitespace();
                let addr: u64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad address"))?;
                let byte: u8 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad byte"))?;
                data.push((addr, byte));
            }
            "S" => {
                let v: Vec<usize> = rest.split_whitespace().filter_map(|s| s.parse().ok()).collect();
                let [branch_pc, scope_start, scope_end] = v[..] else {
                    return Err(bad("scope needs three indices"));
                };
                scopes.push(BranchScope { branch_pc, scope_start, scope_end });
            }
            _ => return Err(bad("unknown record tag")),
        }
    }

    // Branch targets were accepted without the whole program in view.
    if insns.iter().any(|i| i.has_target() && i.target >= insns.len()) {
        return Err(ImageError::Malformed { line: 0, msg: "branch target outside program".into() });
    }
    let computed = compute_branch_scopes(&insns).map_err(|_| ImageError::ScopeMismatch)?;
    if computed != scopes {
        return Err(ImageError::ScopeMismatch);
    }
    let program = ProgramImage::from_parts(insns, data, entry).map_err(|_| ImageError::ScopeMismatch)?;
    if !program.instructions.is_empty() && entry >= program.instructions.len() {
        return Err(ImageError::Malformed { line: 0, msg: "entry outside program".into() });
    }
    Ok(program)
}
