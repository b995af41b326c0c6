//! Line-oriented text format for target programs.
//!
//! Grammar (one item per line, `#` starts a comment):
//!
//! ```text
//! entry <id>
//! base <u64>                  # optional address base, decimal or 0x hex
//! block <id>:
//!   load r<n>
//!   set r<n> <u64>
//!   add r<d> r<a> r<b>
//!   sub r<d> r<a> r<b>
//!   br <pred> <true-id> <false-id>
//!   jmp <id>
//!   ijmp r<n> [<id>,<id>,...]
//!   call <id> <return-id>
//!   ret
//!   exit <code>
//!   trap <kind>
//! ```
//!
//! Predicates: `eq r<n> <c>`, `ne r<n> <c>`, `lt r<n> <c>`, `gt r<n> <c>`,
//! `in r<n> [<c>,...]`, `eof`. Exactly one terminator per block, last.

use super::program::{
    Block, BlockId, MicroOp, Predicate, ProgramError, Reg, TargetProgram, Terminator,
    DEFAULT_ADDRESS_BASE,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("program is empty")]
    Empty,
    #[error("no entry directive")]
    NoEntry,
    #[error(transparent)]
    Semantic(#[from] ProgramError),
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_u64(tok: &str, line: usize) -> Result<u64, ParseError> {
    let res = if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        tok.parse()
    };
    res.map_err(|_| syntax(line, format!("expected number, got `{tok}`")))
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, ParseError> {
    let idx = tok
        .strip_prefix('r')
        .and_then(|s| s.parse::<u8>().ok())
        .ok_or_else(|| syntax(line, format!("expected register, got `{tok}`")))?;
    Reg::new(idx).map_err(ParseError::Semantic)
}

fn parse_list(tok: &str, line: usize) -> Result<Vec<u64>, ParseError> {
    let inner = tok
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("expected [..] list, got `{tok}`")))?;
    if inner.is_empty() {
        return Ok(vec![]);
    }
    inner.split(',').map(|t| parse_u64(t.trim(), line)).collect()
}

fn parse_pred(toks: &[&str], line: usize) -> Result<(Predicate, usize), ParseError> {
    match toks.first() {
        Some(&"eof") => Ok((Predicate::Eof, 1)),
        Some(&op @ ("eq" | "ne" | "lt" | "gt")) => {
            if toks.len() < 3 {
                return Err(syntax(line, "predicate needs register and constant"));
            }
            let reg = parse_reg(toks[1], line)?;
            let c = parse_u64(toks[2], line)?;
            let pred = match op {
                "eq" => Predicate::Eq(reg, c),
                "ne" => Predicate::Ne(reg, c),
                "lt" => Predicate::Lt(reg, c),
                _ => Predicate::Gt(reg, c),
            };
            Ok((pred, 3))
        }
        Some(&"in") => {
            if toks.len() < 3 {
                return Err(syntax(line, "in-set predicate needs register and list"));
            }
            let reg = parse_reg(toks[1], line)?;
            let set = parse_list(toks[2], line)?;
            Ok((Predicate::InSet(reg, set), 3))
        }
        other => Err(syntax(line, format!("unknown predicate {other:?}"))),
    }
}

/// Parses and validates a program from its text form.
pub fn load_program(text: &str) -> Result<TargetProgram, ParseError> {
    let mut entry: Option<BlockId> = None;
    let mut base = DEFAULT_ADDRESS_BASE;
    let mut blocks: Vec<Block> = Vec::new();
    let mut cur: Option<(BlockId, Vec<MicroOp>, Option<Terminator>)> = None;

    let finish =
        |cur: &mut Option<(BlockId, Vec<MicroOp>, Option<Terminator>)>,
         blocks: &mut Vec<Block>,
         line: usize|
         -> Result<(), ParseError> {
            if let Some((id, ops, term)) = cur.take() {
                let terminator =
                    term.ok_or_else(|| syntax(line, format!("block {id} has no terminator")))?;
                blocks.push(Block {
                    id,
                    micro_ops: ops,
                    terminator,
                });
            }
            Ok(())
        };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let toks: Vec<&str> = stripped.split_whitespace().collect();
        match toks[0] {
            "entry" => {
                if toks.len() != 2 {
                    return Err(syntax(line, "entry takes one block id"));
                }
                entry = Some(parse_u64(toks[1], line)? as BlockId);
            }
            "base" => {
                if toks.len() != 2 {
                    return Err(syntax(line, "base takes one address"));
                }
                base = parse_u64(toks[1], line)?;
            }
            "block" => {
                finish(&mut cur, &mut blocks, line)?;
                if toks.len() != 2 {
                    return Err(syntax(line, "block takes one id followed by `:`"));
                }
                let id_tok = toks[1]
                    .strip_suffix(':')
                    .ok_or_else(|| syntax(line, "block header must end with `:`"))?;
                cur = Some((parse_u64(id_tok, line)? as BlockId, Vec::new(), None));
            }
            op => {
                let (_, ops, term) = cur
                    .as_mut()
                    .ok_or_else(|| syntax(line, format!("`{op}` outside of a block")))?;
                if term.is_some() {
                    return Err(syntax(line, "instruction after terminator"));
                }
                match op {
                    "load" => {
                        if toks.len() != 2 {
                            return Err(syntax(line, "load takes one register"));
                        }
                        ops.push(MicroOp::LoadInput {
                            reg: parse_reg(toks[1], line)?,
                        });
                    }
                    "set" => {
                        if toks.len() != 3 {
                            return Err(syntax(line, "set takes register and value"));
                        }
                        ops.push(MicroOp::SetConst {
                            reg: parse_reg(toks[1], line)?,
                            value: parse_u64(toks[2], line)?,
                        });
                    }
                    "add" | "sub" => {
                        if toks.len() != 4 {
                            return Err(syntax(line, format!("{op} takes three registers")));
                        }
                        let dst = parse_reg(toks[1], line)?;
                        let a = parse_reg(toks[2], line)?;
                        let b = parse_reg(toks[3], line)?;
                        ops.push(if op == "add" {
                            MicroOp::Add { dst, a, b }
                        } else {
                            MicroOp::Sub { dst, a, b }
                        });
                    }
                    "br" => {
                        let (pred, used) = parse_pred(&toks[1..], line)?;
                        let rest = &toks[1 + used..];
                        if rest.len() != 2 {
                            return Err(syntax(line, "br needs true and false targets"));
                        }
                        *term = Some(Terminator::CondBranch {
                            pred,
                            true_target: parse_u64(rest[0], line)? as BlockId,
                            false_target: parse_u64(rest[1], line)? as BlockId,
                        });
                    }
                    "jmp" => {
                        if toks.len() != 2 {
                            return Err(syntax(line, "jmp takes one target"));
                        }
                        *term = Some(Terminator::Jump {
                            target: parse_u64(toks[1], line)? as BlockId,
                        });
                    }
                    "ijmp" => {
                        if toks.len() != 3 {
                            return Err(syntax(line, "ijmp takes register and table"));
                        }
                        let selector = parse_reg(toks[1], line)?;
                        let table = parse_list(toks[2], line)?
                            .into_iter()
                            .map(|v| v as BlockId)
                            .collect();
                        *term = Some(Terminator::IndirectJump { selector, table });
                    }
                    "call" => {
                        if toks.len() != 3 {
                            return Err(syntax(line, "call takes target and return site"));
                        }
                        *term = Some(Terminator::Call {
                            target: parse_u64(toks[1], line)? as BlockId,
                            return_to: parse_u64(toks[2], line)? as BlockId,
                        });
                    }
                    "ret" => *term = Some(Terminator::Return),
                    "exit" => {
                        if toks.len() != 2 {
                            return Err(syntax(line, "exit takes one code"));
                        }
                        *term = Some(Terminator::Exit {
                            code: parse_u64(toks[1], line)?,
                        });
                    }
                    "trap" => {
                        if toks.len() != 2 {
                            return Err(syntax(line, "trap takes one kind"));
                        }
                        *term = Some(Terminator::Trap {
                            kind: parse_u64(toks[1], line)? as u8,
                        });
                    }
                    other => return Err(syntax(line, format!("unknown instruction `{other}`"))),
                }
            }
        }
    }
    let last = text.lines().count();
    finish(&mut cur, &mut blocks, last)?;

    if blocks.is_empty() {
        return Err(ParseError::Empty);
    }
    let entry = entry.ok_or(ParseError::NoEntry)?;
    TargetProgram::new(blocks, entry, base).map_err(ParseError::Semantic)
}

/// Canonical text form; `load_program(serialize_program(p))` reproduces `p`.
pub fn serialize_program(p: &TargetProgram) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "entry {}", p.entry()).unwrap();
    writeln!(out, "base 0x{:x}", p.address_base()).unwrap();
    for b in p.blocks() {
        writeln!(out, "block {}:", b.id).unwrap();
        for op in &b.micro_ops {
            match op {
                MicroOp::LoadInput { reg } => writeln!(out, "  load r{}", reg.index()),
                MicroOp::SetConst { reg, value } => {
                    writeln!(out, "  set r{} {}", reg.index(), value)
                }
                MicroOp::Add { dst, a, b } => writeln!(
                    out,
                    "  add r{} r{} r{}",
                    dst.index(),
                    a.index(),
                    b.index()
                ),
                MicroOp::Sub { dst, a, b } => writeln!(
                    out,
                    "  sub r{} r{} r{}",
                    dst.index(),
                    a.index(),
                    b.index()
                ),
            }
            .unwrap();
        }
        let fmt_list = |items: &[u64]| {
            let strs: Vec<String> = items.iter().map(|v| v.to_string()).collect();
            format!("[{}]", strs.join(","))
        };
        match &b.terminator {
            Terminator::CondBranch {
                pred,
                true_target,
                false_target,
            } => {
                let pred_str = match pred {
                    Predicate::Eq(r, c) => format!("eq r{} {}", r.index(), c),
                    Predicate::Ne(r, c) => format!("ne r{} {}", r.index(), c),
                    Predicate::Lt(r, c) => format!("lt r{} {}", r.index(), c),
                    Predicate::Gt(r, c) => format!("gt r{} {}", r.index(), c),
                    Predicate::InSet(r, set) => {
                        format!("in r{} {}", r.index(), fmt_list(set))
                    }
                    Predicate::Eof => "eof".to_string(),
                };
                writeln!(out, "  br {pred_str} {true_target} {false_target}")
            }
            Terminator::Jump { target } => writeln!(out, "  jmp {target}"),
            Terminator::IndirectJump { selector, table } => {
                let ids: Vec<u64> = table.iter().map(|&t| t as u64).collect();
                writeln!(out, "  ijmp r{} {}", selector.index(), fmt_list(&ids))
            }
            Terminator::Call { target, return_to } => {
                writeln!(out, "  call {target} {return_to}")
            }
            Terminator::Return => writeln!(out, "  ret"),
            Terminator::Exit { code } => writeln!(out, "  exit {code}"),
            Terminator::Trap { kind } => writeln!(out, "  trap {kind}"),
        }
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# tiny two-block program
entry 0
block 0:
  load r1
  br eq r1 40 1 1
block 1:
  exit 0
";

    #[test]
    fn parses_and_roundtrips() {
        let p = load_program(SAMPLE).unwrap();
        assert_eq!(p.block_count(), 2);
        let text = serialize_program(&p);
        let p2 = load_program(&text).unwrap();
        assert_eq!(p, p2);
        assert_eq!(serialize_program(&p2), text);
    }

    #[test]
    fn empty_file_is_a_syntax_error() {
        assert_eq!(load_program("").unwrap_err(), ParseError::Empty);
        assert_eq!(load_program("# only comments\n").unwrap_err(), ParseError::Empty);
    }

    #[test]
    fn missing_block_reference_names_the_block() {
        let text = "entry 0\nblock 0:\n  jmp 99\n";
        match load_program(text).unwrap_err() {
            ParseError::Semantic(ProgramError::DanglingTarget { target: 99, .. }) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = "entry 0\nblock 0:\n  frobnicate\n";
        match load_program(text).unwrap_err() {
            ParseError::Syntax { line: 3, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn terminator_required() {
        let text = "entry 0\nblock 0:\n  load r1\n";
        assert!(matches!(
            load_program(text).unwrap_err(),
            ParseError::Syntax { .. }
        ));
    }
}
