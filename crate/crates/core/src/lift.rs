//! Lifting an analysis state to three-address code, plus a coarse grouping
//! of the lifted blocks into functions.
//!
//! Operands are merged over all contexts a block was analyzed under. A slot
//! with one reaching value is named directly, several reaching values get a
//! PHI at block entry, and a slot no value reaches becomes `??`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::analysis::{AnalysisState, StackSets, ValueSet};
use crate::bytecode::{BlockId, BytecodeProgram, Terminator};
use crate::context::ConfirmedFacts;
use crate::local::{BlockSummary, PatternFacts, Summaries};
use crate::opcode::Opcode;
use crate::tac::{TacBlock, TacBlockKind, TacOperand, TacProgram, TacStatement, TacVar};
use crate::value::{AbstractValue, SymValue};

/// Everything the lifter needs to know about calls, computed once.
struct CallInfo {
    /// Entry blocks of private functions.
    entries: BTreeSet<BlockId>,
    /// Continuations pushed by confirmed callers.
    continuations: BTreeSet<BlockId>,
    /// Values used as jump targets by private return blocks.
    return_values: ValueSet,
}

impl CallInfo {
    fn new(state: &AnalysisState, summaries: &Summaries, facts: &ConfirmedFacts) -> CallInfo {
        CallInfo {
            entries: facts
                .private_calls
                .iter()
                .filter_map(|(caller, _)| summaries.get(caller).and_then(|s| s.local_jump_target))
                .collect(),
            continuations: facts.private_calls.iter().map(|(_, c)| *c).collect(),
            return_values: state
                .block_jump_target
                .iter()
                .filter(|(_, b, _, _)| facts.private_returns.contains(b))
                .map(|(_, _, v, _)| *v)
                .collect(),
        }
    }
}

/// Input sets of one block merged over its contexts.
struct Merged<'a> {
    block: BlockId,
    inputs: Vec<&'a StackSets>,
}

impl Merged<'_> {
    fn slot(&self, k: usize) -> ValueSet {
        self.inputs.iter().filter_map(|s| s.get(k)).flatten().copied().collect()
    }

    /// Empty under some contexts and non-empty under others.
    fn inconsistent(&self, k: usize) -> bool {
        let empty = |s: &&&StackSets| s.get(k).is_none_or(|v| v.is_empty());
        let n = self.inputs.iter().filter(empty).count();
        n != 0 && n != self.inputs.len()
    }

    fn values(&self, sym: SymValue) -> ValueSet {
        match sym {
            SymValue::Entry(k) => self.slot(k),
            SymValue::Value(v) => BTreeSet::from([v]),
        }
    }

    fn operand(&self, sym: SymValue) -> TacOperand {
        match sym {
            SymValue::Value(v) => TacOperand::Var(var(&v)),
            SymValue::Entry(k) => {
                let vals = self.slot(k);
                match vals.len() {
                    0 => TacOperand::Unresolved,
                    1 => TacOperand::Var(var(vals.first().unwrap())),
                    _ => TacOperand::Var(TacVar { name: phi_name(self.block, k), constant: None }),
                }
            }
        }
    }
}

fn var(v: &AbstractValue) -> TacVar {
    TacVar { name: v.name(), constant: v.constant }
}

fn phi_name(block: BlockId, slot: usize) -> String {
    format!("v{:x}_{slot:x}", block.0)
}

fn jump_targets(state: &AnalysisState, block: BlockId) -> BTreeSet<BlockId> {
    state.block_jump_target.iter().filter(|(_, b, _, _)| *b == block).map(|(_, _, _, t)| *t).collect()
}

/// Exit slot carrying the continuation of a call block, if the block calls
/// a private function.
fn call_continuation(
    state: &AnalysisState,
    summary: &BlockSummary,
    merged: &Merged<'_>,
    calls: &CallInfo,
    terminator: Terminator,
) -> Option<usize> {
    if terminator != Terminator::Jump {
        return None;
    }
    let targets = jump_targets(state, summary.block);
    if targets.is_empty() || !targets.is_subset(&calls.entries) {
        return None;
    }
    let depth = merged.inputs.iter().map(|s| s.len()).max().unwrap_or(0);
    let width = summary.exit.len() + depth.saturating_sub(summary.consumed_depth);
    (0..width).find(|i| !merged.values(summary.exit_slot(*i)).is_disjoint(&calls.return_values))
}

fn is_stack_motion(op: Opcode) -> bool {
    op == Opcode::JUMPDEST || op == Opcode::POP || op.is_stack_shuffle()
}

fn lift_block(
    state: &AnalysisState,
    program: &BytecodeProgram,
    summary: &BlockSummary,
    facts: &ConfirmedFacts,
    calls: &CallInfo,
    edges: &BTreeMap<BlockId, BTreeSet<BlockId>>,
) -> Option<TacBlock> {
    let id = summary.block;
    if summary.underflow {
        return None;
    }
    let block = &program.blocks[&id];
    let merged =
        Merged { block: id, inputs: state.block_input.iter().filter(|((_, b), _)| *b == id).map(|(_, s)| s).collect() };
    let cont = call_continuation(state, summary, &merged, calls, block.terminator);
    let targets = jump_targets(state, id);
    let returns = cont.is_none()
        && facts.private_returns.contains(&id)
        && !targets.is_empty()
        && targets.is_subset(&calls.continuations);

    let mut body = Vec::new();
    for e in &summary.effects {
        if is_stack_motion(e.opcode) {
            continue;
        }
        let label = format!("{:#x}", e.pc);
        if e.opcode.is_push() {
            let Some(SymValue::Value(v)) = e.result else { unreachable!("pushes define a value") };
            body.push(TacStatement { label, def: Some(var(&v)), op: "CONST".into(), operands: vec![] });
            continue;
        }
        let def = match e.result {
            Some(SymValue::Value(v)) => Some(var(&v)),
            _ => None,
        };
        let mut syms = e.operands.clone();
        let op = match (e.opcode, cont) {
            (Opcode::JUMP, Some(i)) => {
                syms.extend((0..=i).map(|k| summary.exit_slot(k)));
                "CALLPRIVATE".to_string()
            }
            (Opcode::JUMP, None) if returns => "RETURNPRIVATE".to_string(),
            (op, _) => op.name().to_string(),
        };
        body.push(TacStatement { label, def, op, operands: syms.iter().map(|s| merged.operand(*s)).collect() });
    }

    let mut read: BTreeSet<usize> = BTreeSet::new();
    for e in &summary.effects {
        read.extend(e.operands.iter().filter_map(|s| match s {
            SymValue::Entry(k) => Some(*k),
            SymValue::Value(_) => None,
        }));
    }
    if let Some(i) = cont {
        read.extend((0..=i).filter_map(|k| match summary.exit_slot(k) {
            SymValue::Entry(k) => Some(k),
            SymValue::Value(_) => None,
        }));
    }
    if read.iter().any(|k| merged.inconsistent(*k)) {
        return None;
    }
    let mut statements: Vec<TacStatement> = read
        .into_iter()
        .filter_map(|k| {
            let vals = merged.slot(k);
            (vals.len() >= 2).then(|| TacStatement {
                label: format!("{id}_{k:#x}"),
                def: Some(TacVar { name: phi_name(id, k), constant: None }),
                op: "PHI".into(),
                operands: vals.iter().map(|v| TacOperand::Var(var(v))).collect(),
            })
        })
        .collect();
    statements.extend(body);

    let (kind, succs): (TacBlockKind, Vec<BlockId>) = if let Some(i) = cont {
        let succs = merged
            .values(summary.exit_slot(i))
            .iter()
            .filter_map(|v| v.constant.and_then(BlockId::from_value))
            .filter(|b| program.is_valid_target(*b))
            .collect::<BTreeSet<_>>();
        (TacBlockKind::CallPrivate, succs.into_iter().collect())
    } else if returns {
        (TacBlockKind::ReturnPrivate, Vec::new())
    } else {
        let succs = edges.get(&id).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let kind = match block.terminator {
            Terminator::Jump => TacBlockKind::Jump,
            Terminator::ConditionalJump => TacBlockKind::ConditionalJump,
            Terminator::Halt => TacBlockKind::Halt,
            Terminator::Fallthrough if block.fallthrough.is_some() => TacBlockKind::Fallthrough,
            Terminator::Fallthrough => TacBlockKind::Halt,
        };
        (kind, succs)
    };
    Some(TacBlock { id, kind, statements, preds: Vec::new(), succs })
}

/// Lifts every reached block. Blocks that cannot be given consistent
/// operands are listed in [`TacProgram::dropped`].
pub fn lift(
    state: &AnalysisState,
    program: &BytecodeProgram,
    summaries: &Summaries,
    facts: &ConfirmedFacts,
) -> TacProgram {
    let calls = CallInfo::new(state, summaries, facts);
    let mut edges: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for (a, b) in state.edge_projection() {
        edges.entry(a).or_default().insert(b);
    }
    let mut out = TacProgram::default();
    for id in state.reached_blocks() {
        match lift_block(state, program, &summaries[&id], facts, &calls, &edges) {
            Some(b) => out.blocks.push(b),
            None => out.dropped.push(id),
        }
    }
    let mut preds: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for b in &out.blocks {
        for s in &b.succs {
            preds.entry(*s).or_default().insert(b.id);
        }
    }
    for b in &mut out.blocks {
        b.preds = preds.remove(&b.id).map(|p| p.into_iter().collect()).unwrap_or_default();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FunctionKind {
    /// Code reached from the start of execution, before any dispatch.
    Root,
    Public {
        selector: u32,
    },
    Private,
    /// Blocks reachable from more than one entry.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TacFunction {
    pub entry: BlockId,
    pub kind: FunctionKind,
    pub members: BTreeSet<BlockId>,
}

fn reach(tac: &TacProgram, from: BlockId, allowed: impl Fn(BlockId) -> bool) -> BTreeSet<BlockId> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(b) = queue.pop_front() {
        for s in tac.block(b).map(|b| b.succs.as_slice()).unwrap_or_default() {
            if allowed(*s) && seen.insert(*s) {
                queue.push_back(*s);
            }
        }
    }
    seen
}

/// Groups lifted blocks into functions by forward reachability from the
/// root, public entries and private entries. Traversal never enters another
/// entry and follows CALLPRIVATE blocks to their continuation only.
pub fn reconstruct_functions(
    tac: &TacProgram,
    summaries: &Summaries,
    facts: &ConfirmedFacts,
    candidates: &PatternFacts,
) -> Vec<TacFunction> {
    let mut entries: BTreeMap<BlockId, FunctionKind> = BTreeMap::new();
    for (caller, _) in &facts.private_calls {
        if let Some(t) = summaries.get(caller).and_then(|s| s.local_jump_target) {
            entries.insert(t, FunctionKind::Private);
        }
    }
    for c in &candidates.public_call_candidates {
        if facts.public_calls.contains(&(c.block, c.target)) {
            entries.insert(c.target, FunctionKind::Public { selector: c.selector });
        }
    }
    entries.insert(BlockId(0), FunctionKind::Root);

    let mut reached: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for entry in entries.keys() {
        let members = reach(tac, *entry, |b| !entries.contains_key(&b));
        reached.insert(*entry, members);
    }
    let mut owners: BTreeMap<BlockId, usize> = BTreeMap::new();
    for members in reached.values() {
        for m in members {
            *owners.entry(*m).or_default() += 1;
        }
    }
    let shared: BTreeSet<BlockId> = owners.iter().filter(|(_, n)| **n >= 2).map(|(b, _)| *b).collect();

    let mut out: Vec<TacFunction> = reached
        .into_iter()
        .map(|(entry, members)| TacFunction {
            entry,
            kind: entries[&entry],
            members: members.difference(&shared).copied().collect(),
        })
        .collect();

    let mut assigned = BTreeSet::new();
    let roots = shared.iter().filter(|b| {
        tac.block(**b).is_none_or(|tb| tb.preds.is_empty() || tb.preds.iter().any(|p| !shared.contains(p)))
    });
    let roots: Vec<BlockId> = roots.copied().chain(shared.iter().copied()).collect();
    for root in roots {
        if assigned.contains(&root) {
            continue;
        }
        let members: BTreeSet<BlockId> = reach(tac, root, |b| shared.contains(&b) && !assigned.contains(&b));
        assigned.extend(members.iter().copied());
        out.push(TacFunction { entry: root, kind: FunctionKind::Shared, members });
    }
    out.sort_by_key(|f| f.entry);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, AnalysisLimits};
    use crate::cloning::{apply_cloning, select_clone_candidates};
    use crate::context::{Scheme, SchemeConfig};
    use crate::corpus::fixtures;
    use crate::local::summarize_program;
    use crate::preanalysis::{confirm, run_preanalysis, DEFAULT_PREANALYSIS_LIMIT};
    use crate::tac::{parse, TacBlockKind as K};

    struct Lifted {
        program: BytecodeProgram,
        summaries: Summaries,
        candidates: PatternFacts,
        facts: ConfirmedFacts,
        tac: TacProgram,
    }

    fn lift_code(program: &BytecodeProgram, cloning: bool) -> Lifted {
        let mut program = program.clone();
        if cloning {
            let s = summarize_program(&program);
            let inst = select_clone_candidates(&program, &PatternFacts::detect(&program, &s));
            program = apply_cloning(&program, &inst).unwrap();
        }
        let summaries = summarize_program(&program);
        let candidates = PatternFacts::detect(&program, &summaries);
        let limits = AnalysisLimits::default();
        let pre = run_preanalysis(&program, &summaries, &candidates, 20, DEFAULT_PREANALYSIS_LIMIT, &limits);
        let facts = confirm(&candidates, &summaries, &pre);
        let cfg = SchemeConfig::new(Scheme::ShrinkingImportantEdges, 20);
        let state = analyze(&program, &summaries, &facts, &cfg, &limits);
        let tac = lift(&state, &program, &summaries, &facts);
        Lifted { program, summaries, candidates, facts, tac }
    }

    fn phi_sizes(b: &TacBlock) -> Vec<usize> {
        b.statements.iter().filter(|s| s.is_phi()).map(|s| s.operands.len()).collect()
    }

    #[test]
    fn chained_calls_without_cloning_merge() {
        let fx = fixtures::chained_calls();
        let l = lift_code(&fx.program, false);
        let again = l.tac.block(BlockId(0x72)).unwrap();
        assert_eq!(again.kind, K::CallPrivate);
        let mut sizes = phi_sizes(again);
        sizes.sort();
        assert_eq!(sizes, vec![2, 4, 4]);
        assert!(again.succs.contains(&BlockId(0x72)) && again.succs.contains(&BlockId(0x77)));
        assert!(again.succs.len() > 1);
        let phi = &again.statements[0];
        assert_eq!(phi.label, "0x72_0x0");
        assert_eq!(phi.def.as_ref().unwrap().name, "v72_0");
    }

    #[test]
    fn chained_calls_with_cloning_are_linear() {
        let fx = fixtures::chained_calls();
        let l = lift_code(&fx.program, true);
        let chain = l.tac.block(BlockId(0x58)).unwrap();
        assert_eq!(chain.kind, K::CallPrivate);
        assert_eq!(chain.succs.len(), 1);
        let first = chain.succs[0];
        assert_eq!(l.program.blocks[&first].clone_of, Some(BlockId(0x72)));
        let second_block = l.tac.block(first).unwrap();
        assert_eq!(second_block.kind, K::CallPrivate);
        assert_eq!(second_block.succs.len(), 1);
        let third = l.tac.block(second_block.succs[0]).unwrap();
        assert_eq!(third.kind, K::CallPrivate);
        assert_eq!(third.succs, vec![BlockId(0x77)]);
        for b in [chain, second_block, third] {
            assert!(phi_sizes(b).is_empty());
        }
        let last = third.statements.last().unwrap();
        assert_eq!(last.op, "CALLPRIVATE");
        assert_eq!(last.operands.last().unwrap().to_string(), "v5a(0x77)");
    }

    #[test]
    fn call_block_statements_match_expected_text() {
        let fx = fixtures::chained_calls();
        let l = lift_code(&fx.program, true);
        let chain = l.tac.block(BlockId(0x58)).unwrap();
        let lines: Vec<String> = chain.statements.iter().map(|s| s.to_string()).collect();
        assert_eq!(lines[0], "0x5a: v5a(0x77) = CONST");
        assert_eq!(lines[2], "0x5f: v5f = CALLDATALOAD v5d(0x84)");
        assert_eq!(lines[8], "0x6a: v6a = SLOAD v69(0x0)");
        assert!(lines.last().unwrap().starts_with("0x71: CALLPRIVATE v6e(0x1c7), v6d, v6a, v66("));
    }

    #[test]
    fn straight_line_program_has_no_phis() {
        let code = crate::asm::Asm::new().push(1).push(2).op(Opcode::ADD).push0().op(Opcode::SSTORE).stop().assemble();
        let l = lift_code(&BytecodeProgram::from_code(&code), true);
        assert_eq!(l.tac.blocks.len(), 1);
        assert!(l.tac.statements().all(|s| !s.is_phi() && !s.has_unresolved()));
        assert_eq!(l.tac.blocks[0].statements[2].to_string(), "0x4: v4(0x3) = ADD v2(0x2), v0(0x1)");
    }

    #[test]
    fn inconsistent_block_is_dropped() {
        let fx = fixtures::inconsistent_operand();
        let l = lift_code(&fx.program, false);
        assert_eq!(l.tac.dropped, vec![fx.block("sink")]);
        assert!(l.tac.block(fx.block("sink")).is_none());
    }

    #[test]
    fn names_are_defined_once() {
        for fx in [fixtures::chained_calls(), fixtures::selector_dispatch(), fixtures::stack_balancing()] {
            for cloning in [false, true] {
                let l = lift_code(&fx.program, cloning);
                let defs: Vec<&str> =
                    l.tac.statements().filter_map(|s| s.def.as_ref()).map(|d| d.name.as_str()).collect();
                let unique: BTreeSet<&str> = defs.iter().copied().collect();
                assert_eq!(defs.len(), unique.len());
                let text = l.tac.render();
                assert_eq!(parse(&text).unwrap().render(), text);
            }
        }
    }

    #[test]
    fn functions_of_dispatcher() {
        let fx = fixtures::selector_dispatch();
        let l = lift_code(&fx.program, true);
        let fns = reconstruct_functions(&l.tac, &l.summaries, &l.facts, &l.candidates);
        let public: Vec<BlockId> =
            fns.iter().filter(|f| matches!(f.kind, FunctionKind::Public { .. })).map(|f| f.entry).collect();
        assert_eq!(public, vec![BlockId(0x38), BlockId(0x54)]);
        assert!(fns.iter().any(|f| f.kind == FunctionKind::Root && f.entry == BlockId(0)));
    }

    #[test]
    fn functions_of_simple_call() {
        let fx = fixtures::simple_call();
        let l = lift_code(&fx.program, true);
        let fns = reconstruct_functions(&l.tac, &l.summaries, &l.facts, &l.candidates);
        let private: Vec<BlockId> = fns.iter().filter(|f| f.kind == FunctionKind::Private).map(|f| f.entry).collect();
        assert_eq!(private, vec![BlockId(0x109)]);
        let root = fns.iter().find(|f| f.kind == FunctionKind::Root).unwrap();
        assert!(root.members.contains(&BlockId(0x132)));
        assert!(!root.members.contains(&BlockId(0x109)));
        assert_eq!(l.tac.block(BlockId(0x109)).unwrap().kind, K::ReturnPrivate);
    }

    #[test]
    fn no_calls_single_root() {
        let code = crate::asm::Asm::new().push(1).push_label("x").op(Opcode::JUMPI).stop().label("x").stop().assemble();
        let l = lift_code(&BytecodeProgram::from_code(&code), true);
        let fns = reconstruct_functions(&l.tac, &l.summaries, &l.facts, &l.candidates);
        assert_eq!(fns.len(), 1);
        assert_eq!(fns[0].kind, FunctionKind::Root);
        assert_eq!(fns[0].members.len(), 3);
    }
}
