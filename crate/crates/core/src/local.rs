//! Per-block stack summaries and the local call/return/dispatch patterns.
//!
//! Each block is executed symbolically over an unbounded stack of entry-slot
//! placeholders. The resulting [`BlockSummary`] describes the exit stack as
//! expressions over entry slots and value definitions, which is all the
//! global analysis needs to push value sets through the block.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ruint::aliases::U256;

use crate::bytecode::{BasicBlock, BlockId, BytecodeProgram, Terminator};
use crate::opcode::Opcode;
use crate::value::{AbstractValue, SymValue};

/// Deepest entry slot a block may read before it is considered unreachable.
pub const EVM_STACK_LIMIT: usize = 1024;

/// Operands and result of one instruction inside a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstrEffect {
    pub pc: u32,
    pub opcode: Opcode,
    /// Popped values, top of stack first. Empty for pure stack motion.
    pub operands: Vec<SymValue>,
    pub result: Option<SymValue>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSummary {
    pub block: BlockId,
    /// Number of entry slots the block reads.
    pub consumed_depth: usize,
    /// Exit stack (top first) above the untouched part; slot `exit.len() + i`
    /// holds entry slot `consumed_depth + i`.
    pub exit: Vec<SymValue>,
    pub effects: Vec<InstrEffect>,
    /// Target operand of a terminating `JUMP`/`JUMPI`.
    pub jump_target: Option<SymValue>,
    /// Condition operand of a terminating `JUMPI`.
    pub jump_condition: Option<SymValue>,
    /// Target when it is a constant produced inside the block and lands on a
    /// valid jump destination.
    pub local_jump_target: Option<BlockId>,
    /// The block reads deeper than the EVM stack limit; never executable.
    pub underflow: bool,
}

impl BlockSummary {
    /// Symbolic value of exit slot `i` (0 = top).
    pub fn exit_slot(&self, i: usize) -> SymValue {
        match self.exit.get(i) {
            Some(v) => *v,
            None => SymValue::Entry(self.consumed_depth + i - self.exit.len()),
        }
    }

    pub fn effect_at(&self, pc: u32) -> Option<&InstrEffect> {
        self.effects.iter().find(|e| e.pc == pc)
    }
}

pub type Summaries = BTreeMap<BlockId, BlockSummary>;

struct SymStack {
    // Back is the top of the stack.
    items: VecDeque<SymValue>,
    materialized: usize,
}

impl SymStack {
    fn ensure(&mut self, depth: usize) -> bool {
        while self.items.len() < depth {
            if self.materialized >= EVM_STACK_LIMIT {
                return false;
            }
            self.items.push_front(SymValue::Entry(self.materialized));
            self.materialized += 1;
        }
        true
    }

    fn peek(&self, i: usize) -> SymValue {
        self.items[self.items.len() - 1 - i]
    }
}

pub fn summarize_block(block: &BasicBlock, program: &BytecodeProgram) -> BlockSummary {
    let mut stack = SymStack { items: VecDeque::new(), materialized: 0 };
    let mut effects = Vec::with_capacity(block.instructions.len());
    let mut underflow = false;
    let mut jump_target = None;
    let mut jump_condition = None;

    for ins in &block.instructions {
        let op = ins.opcode;
        if !stack.ensure(op.stack_pops()) {
            underflow = true;
            break;
        }
        if let Some(n) = op.dup_depth() {
            let v = stack.peek(n - 1);
            stack.items.push_back(v);
            effects.push(InstrEffect { pc: ins.pc, opcode: op, operands: vec![], result: None });
            continue;
        }
        if let Some(n) = op.swap_depth() {
            let top = stack.items.len() - 1;
            stack.items.swap(top, top - n);
            effects.push(InstrEffect { pc: ins.pc, opcode: op, operands: vec![], result: None });
            continue;
        }
        let operands: Vec<SymValue> = (0..op.stack_pops()).map(|_| stack.items.pop_back().unwrap()).collect();
        match op {
            Opcode::JUMP => jump_target = Some(operands[0]),
            Opcode::JUMPI => {
                jump_target = Some(operands[0]);
                jump_condition = Some(operands[1]);
            }
            _ => {}
        }
        let result = (op.stack_pushes() == 1).then(|| {
            let constant = match ins.pushed_value {
                Some(v) => Some(v),
                None => fold(op, &operands),
            };
            SymValue::Value(AbstractValue::def(ins.pc, constant))
        });
        if let Some(r) = result {
            stack.items.push_back(r);
        }
        let operands = if op == Opcode::POP { vec![] } else { operands };
        effects.push(InstrEffect { pc: ins.pc, opcode: op, operands, result });
    }

    let exit: Vec<SymValue> = stack.items.iter().rev().copied().collect();
    let local_jump_target = if underflow {
        None
    } else {
        jump_target.and_then(|t| t.constant()).and_then(BlockId::from_value).filter(|id| program.is_valid_target(*id))
    };
    BlockSummary {
        block: block.id,
        consumed_depth: stack.materialized,
        exit,
        effects,
        jump_target: if underflow { None } else { jump_target },
        jump_condition: if underflow { None } else { jump_condition },
        local_jump_target,
        underflow,
    }
}

pub fn summarize_program(program: &BytecodeProgram) -> Summaries {
    program.blocks.values().map(|b| (b.id, summarize_block(b, program))).collect()
}

/// Constant folding over the opcodes that matter for dispatch and jump
/// target computation.
fn fold(op: Opcode, operands: &[SymValue]) -> Option<U256> {
    let consts: Option<Vec<U256>> = operands.iter().map(|v| v.constant()).collect();
    let c = consts?;
    let bool_word = |b: bool| if b { U256::from(1) } else { U256::ZERO };
    Some(match op {
        Opcode::ADD => c[0].wrapping_add(c[1]),
        Opcode::SUB => c[0].wrapping_sub(c[1]),
        Opcode::AND => c[0] & c[1],
        Opcode::DIV => c[0].checked_div(c[1]).unwrap_or(U256::ZERO),
        Opcode::EQ => bool_word(c[0] == c[1]),
        Opcode::ISZERO => bool_word(c[0].is_zero()),
        Opcode::SHL => shift(c[0]).map_or(U256::ZERO, |s| c[1] << s),
        Opcode::SHR => shift(c[0]).map_or(U256::ZERO, |s| c[1] >> s),
        _ => return None,
    })
}

fn shift(amount: U256) -> Option<usize> {
    usize::try_from(amount).ok().filter(|s| *s < 256)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicCallCandidate {
    pub block: BlockId,
    pub selector: u32,
    pub target: BlockId,
    /// The `EQ` statement comparing against the selector constant.
    pub eq_pc: u32,
    /// The operand compared against `selector`.
    pub compared: SymValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrivateCallCandidate {
    pub caller: BlockId,
    pub continuation: BlockId,
    pub push_pc: u32,
}

/// Locally detected patterns, before any global confirmation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatternFacts {
    pub public_call_candidates: BTreeSet<PublicCallCandidate>,
    pub private_call_candidates: BTreeSet<PrivateCallCandidate>,
    pub private_returns: BTreeSet<BlockId>,
    pub stack_balancing: BTreeSet<BlockId>,
}

impl PatternFacts {
    pub fn detect(program: &BytecodeProgram, summaries: &Summaries) -> PatternFacts {
        PatternFacts {
            public_call_candidates: detect_public_call_candidates(program, summaries),
            private_call_candidates: detect_private_call_candidates(program, summaries),
            private_returns: detect_private_returns(program, summaries),
            stack_balancing: detect_stack_balancing_blocks(program),
        }
    }
}

/// Maximum number of `ISZERO`s between the `EQ` and the `JUMPI` condition.
const MAX_ISZERO_CHAIN: usize = 2;

pub fn detect_public_call_candidates(
    program: &BytecodeProgram,
    summaries: &Summaries,
) -> BTreeSet<PublicCallCandidate> {
    let mut out = BTreeSet::new();
    for block in program.blocks.values() {
        if block.terminator != Terminator::ConditionalJump {
            continue;
        }
        let summary = &summaries[&block.id];
        let Some(target) = summary.local_jump_target else { continue };
        if !program.jumpdests.contains(&target) {
            continue;
        }
        let Some(mut cond) = summary.jump_condition else { continue };
        let mut negations = 0;
        while let Some(effect) = cond.def_pc().and_then(|pc| summary.effect_at(pc)) {
            match effect.opcode {
                Opcode::ISZERO if negations < MAX_ISZERO_CHAIN => {
                    negations += 1;
                    cond = effect.operands[0];
                }
                Opcode::EQ if negations.is_multiple_of(2) => {
                    if let Some((selector, compared)) = selector_comparison(&effect.operands) {
                        out.insert(PublicCallCandidate {
                            block: block.id,
                            selector,
                            target,
                            eq_pc: effect.pc,
                            compared,
                        });
                    }
                    break;
                }
                _ => break,
            }
        }
    }
    out
}

fn selector_comparison(operands: &[SymValue]) -> Option<(u32, SymValue)> {
    let small = |v: &SymValue| v.constant().and_then(|c| u32::try_from(c).ok());
    if let Some(s) = small(&operands[1]) {
        return Some((s, operands[0]));
    }
    small(&operands[0]).map(|s| (s, operands[1]))
}

pub fn detect_private_call_candidates(
    program: &BytecodeProgram,
    summaries: &Summaries,
) -> BTreeSet<PrivateCallCandidate> {
    let mut out = BTreeSet::new();
    for block in program.blocks.values() {
        if block.terminator != Terminator::Jump {
            continue;
        }
        let summary = &summaries[&block.id];
        if summary.local_jump_target.is_none() {
            continue;
        }
        for value in &summary.exit {
            let SymValue::Value(v) = value else { continue };
            let Some(pc) = v.def_pc() else { continue };
            let Some(ins) = block.instruction_at(pc) else { continue };
            let Some(pushed) = ins.pushed_value else { continue };
            let Some(continuation) = BlockId::from_value(pushed) else { continue };
            if program.is_valid_target(continuation) {
                out.insert(PrivateCallCandidate { caller: block.id, continuation, push_pc: pc });
            }
        }
    }
    out
}

pub fn detect_private_returns(program: &BytecodeProgram, summaries: &Summaries) -> BTreeSet<BlockId> {
    program
        .blocks
        .values()
        .filter(|b| b.terminator == Terminator::Jump)
        .filter(|b| matches!(summaries[&b.id].jump_target, Some(SymValue::Entry(_))))
        .map(|b| b.id)
        .collect()
}

pub fn detect_stack_balancing_blocks(program: &BytecodeProgram) -> BTreeSet<BlockId> {
    program
        .blocks
        .values()
        .filter(|b| b.terminator == Terminator::Jump)
        .filter(|b| {
            let body = &b.instructions[..b.instructions.len() - 1];
            body.iter().all(|i| i.opcode == Opcode::JUMPDEST || i.opcode.is_stack_shuffle())
        })
        .map(|b| b.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Asm;
    use crate::corpus::fixtures;

    fn summary_of(code: &[u8], block: u32) -> BlockSummary {
        let program = BytecodeProgram::from_code(code);
        summarize_block(&program.blocks[&BlockId(block)], &program)
    }

    fn konst(pc: u32, v: u64) -> SymValue {
        SymValue::Value(AbstractValue::def(pc, Some(U256::from(v))))
    }

    #[test]
    fn simple_call_caller_summary() {
        let fx = fixtures::simple_call();
        let s = summarize_block(&fx.program.blocks[&fx.block("caller")], &fx.program);
        assert_eq!(s.local_jump_target, Some(BlockId(0x109)));
        assert_eq!(s.consumed_depth, 2);
        assert_eq!(s.exit[0], SymValue::Entry(1));
        assert_eq!(s.exit[1], konst(0x12a, 0x132));
        assert_eq!(s.exit[1].constant(), Some(U256::from(0x132)));
        assert_eq!(s.exit_slot(2), SymValue::Entry(0));
        assert_eq!(s.exit_slot(3), SymValue::Entry(1));
        assert_eq!(s.exit_slot(4), SymValue::Entry(2));
    }

    #[test]
    fn unresolved_jump_reads_entry() {
        let s = summary_of(&[0x5b, 0x56], 0);
        assert_eq!(s.local_jump_target, None);
        assert_eq!(s.consumed_depth, 1);
        assert_eq!(s.jump_target, Some(SymValue::Entry(0)));
    }

    #[test]
    fn folded_jump_target() {
        let code = Asm::new().push(3).push(3).op(Opcode::ADD).op(Opcode::JUMP).op(Opcode::JUMPDEST).stop().assemble();
        let s = summary_of(&code, 0);
        assert_eq!(s.jump_target.and_then(|t| t.constant()), Some(U256::from(6)));
        assert_eq!(s.local_jump_target, Some(BlockId(6)));
    }

    #[test]
    fn folding_semantics() {
        let c = |v: u64| konst(0, v);
        let big = |v: U256| SymValue::Value(AbstractValue::def(0, Some(v)));
        assert_eq!(fold(Opcode::SUB, &[c(3), c(5)]), Some(U256::MAX - U256::from(1)));
        assert_eq!(fold(Opcode::DIV, &[c(7), c(0)]), Some(U256::ZERO));
        assert_eq!(
            fold(Opcode::SHR, &[c(0xe0), big(U256::from(0x12e49406u64) << 224)]),
            Some(U256::from(0x12e49406u64))
        );
        assert_eq!(fold(Opcode::SHL, &[c(256), c(1)]), Some(U256::ZERO));
        assert_eq!(fold(Opcode::ISZERO, &[c(0)]), Some(U256::from(1)));
        assert_eq!(fold(Opcode::MUL, &[c(2), c(3)]), None);
        assert_eq!(fold(Opcode::ADD, &[SymValue::Entry(0), c(3)]), None);
    }

    #[test]
    fn deep_reads_flag_underflow() {
        let mut asm = Asm::new();
        for _ in 0..70 {
            asm = asm.op(Opcode::swap(16));
            asm = asm.op(Opcode::POP);
        }
        let code = asm.op(Opcode::dup(16)).op(Opcode::JUMP).assemble();
        let s = summary_of(&code, 0);
        assert!(!s.underflow);

        let mut asm = Asm::new();
        for _ in 0..1100 {
            asm = asm.op(Opcode::POP);
        }
        let s = summary_of(&asm.stop().assemble(), 0);
        assert!(s.underflow);
        assert_eq!(s.consumed_depth, EVM_STACK_LIMIT);
    }

    #[test]
    fn selector_dispatch_candidates() {
        let fx = fixtures::selector_dispatch();
        let summaries = summarize_program(&fx.program);
        let found = detect_public_call_candidates(&fx.program, &summaries);
        let triples: Vec<(u32, u32, u32)> = found.iter().map(|c| (c.block.0, c.selector, c.target.0)).collect();
        assert_eq!(triples, vec![(0x1a, 0x12e49406, 0x38), (0x29, 0x87d7a5f4, 0x54)]);
    }

    #[test]
    fn wide_constants_are_not_selectors() {
        let code = Asm::new()
            .push(0)
            .op(Opcode::CALLDATALOAD)
            .push_n(5, U256::from(0x01_2345_6789u64))
            .op(Opcode::EQ)
            .push_label("t")
            .op(Opcode::JUMPI)
            .stop()
            .label("t")
            .stop()
            .assemble();
        let program = BytecodeProgram::from_code(&code);
        let summaries = summarize_program(&program);
        assert!(detect_public_call_candidates(&program, &summaries).is_empty());
    }

    #[test]
    fn double_negated_dispatch_is_a_candidate() {
        let code = Asm::new()
            .push(0)
            .op(Opcode::CALLDATALOAD)
            .push(0xe0)
            .op(Opcode::SHR)
            .push_n(4, U256::from(0xaabbccddu64))
            .op(Opcode::EQ)
            .op(Opcode::ISZERO)
            .op(Opcode::ISZERO)
            .push_label("t")
            .op(Opcode::JUMPI)
            .stop()
            .label("t")
            .stop()
            .assemble();
        let program = BytecodeProgram::from_code(&code);
        let summaries = summarize_program(&program);
        assert_eq!(detect_public_call_candidates(&program, &summaries).len(), 1);
    }

    #[test]
    fn private_call_candidates() {
        let fx = fixtures::simple_call();
        let summaries = summarize_program(&fx.program);
        let calls = detect_private_call_candidates(&fx.program, &summaries);
        assert_eq!(
            calls.into_iter().collect::<Vec<_>>(),
            vec![PrivateCallCandidate { caller: fx.block("caller"), continuation: BlockId(0x132), push_pc: 0x12a }]
        );

        let fx = fixtures::chained_calls();
        let summaries = summarize_program(&fx.program);
        let calls: BTreeSet<(u32, u32, u32)> = detect_private_call_candidates(&fx.program, &summaries)
            .into_iter()
            .filter(|c| c.caller == BlockId(0x58))
            .map(|c| (c.caller.0, c.continuation.0, c.push_pc))
            .collect();
        assert_eq!(calls, BTreeSet::from([(0x58, 0x77, 0x5a), (0x58, 0x72, 0x60), (0x58, 0x72, 0x66)]));
    }

    #[test]
    fn jumpi_blocks_are_never_calls() {
        let code =
            Asm::new().push_label("k").push(1).push_label("k").op(Opcode::JUMPI).stop().label("k").stop().assemble();
        let program = BytecodeProgram::from_code(&code);
        let summaries = summarize_program(&program);
        assert!(detect_private_call_candidates(&program, &summaries).is_empty());
    }

    #[test]
    fn private_returns_and_stack_balancing() {
        let fx = fixtures::simple_call();
        let summaries = summarize_program(&fx.program);
        let returns = detect_private_returns(&fx.program, &summaries);
        assert!(returns.contains(&BlockId(0x109)));

        let fx = fixtures::chained_calls();
        let summaries = summarize_program(&fx.program);
        let returns = detect_private_returns(&fx.program, &summaries);
        assert!(!returns.contains(&BlockId(0x58)));
        let balancing = detect_stack_balancing_blocks(&fx.program);
        assert!(!balancing.contains(&BlockId(0x72)));

        let fx = fixtures::stack_balancing();
        let summaries = summarize_program(&fx.program);
        assert!(detect_private_returns(&fx.program, &summaries).contains(&BlockId(0x1c3)));
        assert!(detect_stack_balancing_blocks(&fx.program).contains(&BlockId(0x1c3)));

        let program = BytecodeProgram::from_code(&[0x5b, 0x56]);
        assert!(detect_stack_balancing_blocks(&program).contains(&BlockId(0)));
    }
}
