//! Three-address code: data types, text rendering and a parser for the
//! rendered form.
//!
//! ```text
//! Begin block 0x58
//! prev=[0x50], succ=[0xf0]
//! =================================
//! 0x5a: v5a(0x77) = CONST
//! 0x5f: v5f = CALLDATALOAD v5d(0x84)
//! 0x71: CALLPRIVATE v6e(0x1c7), v6d, v6a, v66(0xf0)
//! ```

use std::fmt::{self, Write as _};

use ruint::aliases::U256;
use thiserror::Error;

use crate::bytecode::BlockId;
use crate::opcode::Opcode;

pub const SEPARATOR: &str = "=================================";

/// Placeholder for an operand whose value the analysis never saw.
pub const UNRESOLVED: &str = "??";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TacVar {
    pub name: String,
    pub constant: Option<U256>,
}

impl fmt::Display for TacVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.constant {
            Some(c) => write!(f, "{}({c:#x})", self.name),
            None => f.write_str(&self.name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TacOperand {
    Var(TacVar),
    Unresolved,
}

impl fmt::Display for TacOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TacOperand::Var(v) => v.fmt(f),
            TacOperand::Unresolved => f.write_str(UNRESOLVED),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TacStatement {
    /// Source pc, or `0xBLOCK_0xSLOT` for PHIs.
    pub label: String,
    pub def: Option<TacVar>,
    pub op: String,
    pub operands: Vec<TacOperand>,
}

impl TacStatement {
    pub fn is_phi(&self) -> bool {
        self.op == "PHI"
    }

    pub fn has_unresolved(&self) -> bool {
        self.operands.contains(&TacOperand::Unresolved)
    }
}

impl fmt::Display for TacStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.label)?;
        if let Some(d) = &self.def {
            write!(f, "{d} = ")?;
        }
        f.write_str(&self.op)?;
        for (i, o) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TacBlockKind {
    Jump,
    ConditionalJump,
    Halt,
    Fallthrough,
    CallPrivate,
    ReturnPrivate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TacBlock {
    pub id: BlockId,
    pub kind: TacBlockKind,
    pub statements: Vec<TacStatement>,
    pub preds: Vec<BlockId>,
    pub succs: Vec<BlockId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TacProgram {
    /// Ascending by id.
    pub blocks: Vec<TacBlock>,
    /// Reached blocks left out because their operands were inconsistent or
    /// they could never execute.
    pub dropped: Vec<BlockId>,
}

impl TacProgram {
    pub fn block(&self, id: BlockId) -> Option<&TacBlock> {
        self.blocks.binary_search_by_key(&id, |b| b.id).ok().map(|i| &self.blocks[i])
    }

    pub fn statements(&self) -> impl Iterator<Item = &TacStatement> {
        self.blocks.iter().flat_map(|b| b.statements.iter())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "Begin block {}", b.id).unwrap();
            writeln!(out, "prev=[{}], succ=[{}]", id_list(&b.preds), id_list(&b.succs)).unwrap();
            writeln!(out, "{SEPARATOR}").unwrap();
            for s in &b.statements {
                writeln!(out, "{s}").unwrap();
            }
        }
        out
    }
}

fn id_list(ids: &[BlockId]) -> String {
    ids.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct TacParseError {
    pub line: usize,
    pub message: String,
}

/// Kind implied by the final statement of a rendered block.
pub fn infer_kind(statements: &[TacStatement], succs: &[BlockId]) -> TacBlockKind {
    match statements.last().map(|s| s.op.as_str()) {
        Some("JUMP") => TacBlockKind::Jump,
        Some("JUMPI") => TacBlockKind::ConditionalJump,
        Some("CALLPRIVATE") => TacBlockKind::CallPrivate,
        Some("RETURNPRIVATE") => TacBlockKind::ReturnPrivate,
        Some(op) if Opcode::from_name(op).is_some_and(|o| o.is_halt()) => TacBlockKind::Halt,
        _ if succs.is_empty() => TacBlockKind::Halt,
        _ => TacBlockKind::Fallthrough,
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), TacParseError> {
        let last = self.inner.peek().map_or(0, |(i, _)| *i);
        self.next().ok_or(TacParseError { line: last + 1, message: format!("expected {what}, found end of input") })
    }
}

fn err(line: usize, message: impl Into<String>) -> TacParseError {
    TacParseError { line, message: message.into() }
}

fn parse_id(line: usize, s: &str) -> Result<BlockId, TacParseError> {
    let hex = s.strip_prefix("0x").ok_or_else(|| err(line, format!("bad block id {s:?}")))?;
    u32::from_str_radix(hex, 16).map(BlockId).map_err(|_| err(line, format!("bad block id {s:?}")))
}

fn parse_ids(line: usize, s: &str) -> Result<Vec<BlockId>, TacParseError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(", ").map(|x| parse_id(line, x)).collect()
}

fn parse_var(line: usize, s: &str) -> Result<TacVar, TacParseError> {
    let bad = || err(line, format!("bad variable {s:?}"));
    let (name, constant) = match s.split_once('(') {
        Some((name, rest)) => {
            let hex = rest.strip_suffix(')').and_then(|h| h.strip_prefix("0x")).ok_or_else(bad)?;
            (name, Some(U256::from_str_radix(hex, 16).map_err(|_| bad())?))
        }
        None => (s, None),
    };
    if !name.starts_with('v') || name.len() < 2 || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(bad());
    }
    Ok(TacVar { name: name.to_string(), constant })
}

fn parse_operand(line: usize, s: &str) -> Result<TacOperand, TacParseError> {
    if s == UNRESOLVED {
        Ok(TacOperand::Unresolved)
    } else {
        parse_var(line, s).map(TacOperand::Var)
    }
}

fn parse_statement(line: usize, s: &str) -> Result<TacStatement, TacParseError> {
    let (label, rest) = s.split_once(": ").ok_or_else(|| err(line, "missing statement label"))?;
    let (def, rest) = match rest.split_once(" = ") {
        Some((d, r)) => (Some(parse_var(line, d)?), r),
        None => (None, rest),
    };
    let (op, operands) = match rest.split_once(' ') {
        Some((op, ops)) => (op, ops.split(", ").map(|o| parse_operand(line, o)).collect::<Result<_, _>>()?),
        None => (rest, Vec::new()),
    };
    if op.is_empty() || !op.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()) {
        return Err(err(line, format!("bad opcode {op:?}")));
    }
    Ok(TacStatement { label: label.to_string(), def, op: op.to_string(), operands })
}

/// Parses rendered TAC. `dropped` is not part of the text and comes back
/// empty.
pub fn parse(text: &str) -> Result<TacProgram, TacParseError> {
    let mut lines = Lines { inner: text.lines().enumerate().peekable() };
    let mut blocks = Vec::new();
    while let Some((n, header)) = lines.next() {
        if !blocks.is_empty() {
            if !header.is_empty() {
                return Err(err(n, "expected blank line between blocks"));
            }
            let (n2, h2) = lines.expect("block header")?;
            blocks.push(parse_block(&mut lines, n2, h2)?);
        } else {
            blocks.push(parse_block(&mut lines, n, header)?);
        }
    }
    Ok(TacProgram { blocks, dropped: Vec::new() })
}

fn parse_block(lines: &mut Lines<'_>, n: usize, header: &str) -> Result<TacBlock, TacParseError> {
    let id = header.strip_prefix("Begin block ").ok_or_else(|| err(n, "expected \"Begin block\""))?;
    let id = parse_id(n, id)?;
    let (n, edges) = lines.expect("prev/succ line")?;
    let (prev, succ) = edges
        .strip_prefix("prev=[")
        .and_then(|r| r.strip_suffix(']'))
        .and_then(|r| r.split_once("], succ=["))
        .ok_or_else(|| err(n, "malformed prev/succ line"))?;
    let preds = parse_ids(n, prev)?;
    let succs = parse_ids(n, succ)?;
    let (n, sep) = lines.expect("separator")?;
    if sep != SEPARATOR {
        return Err(err(n, "malformed separator"));
    }
    let mut statements = Vec::new();
    while let Some((_, l)) = lines.inner.peek() {
        if l.is_empty() {
            break;
        }
        let (n, l) = lines.next().unwrap();
        statements.push(parse_statement(n, l)?);
    }
    let kind = infer_kind(&statements, &succs);
    Ok(TacBlock { id, kind, statements, preds, succs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "Begin block 0x58
prev=[0x50], succ=[0xf0]
=================================
0x5a: v5a(0x77) = CONST
0x5f: v5f = CALLDATALOAD v5d(0x84)
0x71: CALLPRIVATE v6e(0x1c7), v6d, ??, v66(0xf0)

Begin block 0x72
prev=[0x58, 0x72], succ=[]
=================================
0x72_0x1: v72_1 = PHI v47(0x20), v5f
0x76: STOP
";

    #[test]
    fn sample_round_trips() {
        let p = parse(SAMPLE).unwrap();
        assert_eq!(p.blocks.len(), 2);
        assert_eq!(p.blocks[0].kind, TacBlockKind::CallPrivate);
        assert_eq!(p.blocks[1].kind, TacBlockKind::Halt);
        assert!(p.blocks[0].statements[2].has_unresolved());
        assert_eq!(p.render(), SAMPLE);
    }

    #[test]
    fn statement_forms() {
        let s = parse_statement(1, "0x5a: v5a(0x77) = CONST").unwrap();
        assert_eq!(s.def.unwrap().constant, Some(U256::from(0x77)));
        assert!(s.operands.is_empty());
        let s = parse_statement(1, "0x10: SSTORE v1, v2").unwrap();
        assert!(s.def.is_none());
        assert_eq!(s.operands.len(), 2);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse("Begin block 58\n").is_err());
        assert!(parse("Begin block 0x0\nprev=[], succ=[]\n====\n").is_err());
        assert!(parse("Begin block 0x0\nprev=[], succ=[]\n").is_err());
        let e = parse("Begin block 0x0\nprev=[], succ=[]\n=================================\n0x1 STOP\n").unwrap_err();
        assert_eq!(e.line, 4);
    }

    #[test]
    fn empty_block_kind_follows_successors() {
        assert_eq!(infer_kind(&[], &[BlockId(1)]), TacBlockKind::Fallthrough);
        assert_eq!(infer_kind(&[], &[]), TacBlockKind::Halt);
    }

    fn arb_var() -> impl Strategy<Value = TacVar> {
        ("v[0-9a-f]{1,4}(_[0-9]{1,2})?", proptest::option::of(any::<u64>()))
            .prop_map(|(name, c)| TacVar { name, constant: c.map(U256::from) })
    }

    fn arb_statement() -> impl Strategy<Value = TacStatement> {
        let operand = prop_oneof![arb_var().prop_map(TacOperand::Var), Just(TacOperand::Unresolved)];
        (
            "0x[0-9a-f]{1,4}(_0x[0-9a-f])?",
            proptest::option::of(arb_var()),
            "[A-Z]{2,8}[0-9]?",
            proptest::collection::vec(operand, 0..4),
        )
            .prop_map(|(label, def, op, operands)| TacStatement { label, def, op, operands })
    }

    fn arb_program() -> impl Strategy<Value = TacProgram> {
        let block = (
            any::<u16>(),
            proptest::collection::vec(arb_statement(), 0..5),
            proptest::collection::vec(any::<u16>(), 0..3),
            proptest::collection::vec(any::<u16>(), 0..3),
        );
        proptest::collection::vec(block, 0..4).prop_map(|bs| {
            let mut blocks: Vec<TacBlock> = bs
                .into_iter()
                .map(|(id, statements, p, s)| {
                    let ids = |v: Vec<u16>| {
                        let mut v: Vec<BlockId> = v.into_iter().map(|x| BlockId(x as u32)).collect();
                        v.sort();
                        v.dedup();
                        v
                    };
                    let succs = ids(s);
                    let kind = infer_kind(&statements, &succs);
                    TacBlock { id: BlockId(id as u32), kind, statements, preds: ids(p), succs }
                })
                .collect();
            blocks.sort_by_key(|b| b.id);
            blocks.dedup_by_key(|b| b.id);
            TacProgram { blocks, dropped: Vec::new() }
        })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(p in arb_program()) {
            let text = p.render();
            let parsed = parse(&text).unwrap();
            prop_assert_eq!(&parsed, &p);
            prop_assert_eq!(parsed.render(), text);
        }
    }
}
