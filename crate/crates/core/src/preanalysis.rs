//! Bounded pre-analysis: a budgeted run of the global analysis over raw
//! candidates whose partial results confirm call facts and expose the edges
//! where stack imprecision first appears.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ruint::aliases::U256;

use crate::analysis::{analyze, eval, AnalysisLimits, AnalysisState, CtxId, ValueSet};
use crate::bytecode::{BlockId, BytecodeProgram};
use crate::context::{ConfirmedFacts, Scheme, SchemeConfig};
use crate::local::{PatternFacts, Summaries};
use crate::opcode::Opcode;
use crate::value::{AbstractValue, SymValue};

pub const DEFAULT_PREANALYSIS_LIMIT: u64 = 1_000_000;

/// Runs the shrinking analysis at `depth` with every candidate treated as
/// confirmed, stopping after `limit` facts.
pub fn run_preanalysis(
    program: &BytecodeProgram,
    summaries: &Summaries,
    candidates: &PatternFacts,
    depth: usize,
    limit: u64,
    limits: &AnalysisLimits,
) -> AnalysisState {
    let cfg = SchemeConfig::new(Scheme::Shrinking, depth);
    let limits = AnalysisLimits { fact_limit: Some(limit), ..*limits };
    analyze(program, summaries, &ConfirmedFacts::from_candidates(candidates), &cfg, &limits)
}

/// Keeps a call candidate when its pushed continuation was used as a jump
/// target somewhere.
pub fn filter_private_calls(candidates: &PatternFacts, pre: &AnalysisState) -> BTreeSet<(BlockId, BlockId)> {
    let used: HashSet<(u32, BlockId)> =
        pre.block_jump_target.iter().filter_map(|(_, _, v, target)| v.def_pc().map(|pc| (pc, *target))).collect();
    candidates
        .private_call_candidates
        .iter()
        .filter(|c| used.contains(&(c.push_pc, c.continuation)))
        .map(|c| (c.caller, c.continuation))
        .collect()
}

fn all_const(set: &ValueSet, k: U256) -> bool {
    !set.is_empty() && set.iter().all(|v| v.constant == Some(k))
}

/// Values holding the 4-byte function selector: the first calldata word
/// shifted right by 224 bits or divided by 2^224, optionally masked with
/// `0xffffffff`.
pub fn selector_values(summaries: &Summaries, pre: &AnalysisState) -> BTreeSet<AbstractValue> {
    let shift = U256::from(0xe0u64);
    let divisor = U256::from(1u64) << 224;
    let mask = U256::from(0xffff_ffffu64);
    let mut calldata = BTreeSet::new();
    let mut selectors = BTreeSet::new();
    loop {
        let before = calldata.len() + selectors.len();
        for ((_, block), input) in processed(pre) {
            for e in &summaries[&block].effects {
                let Some(SymValue::Value(result)) = e.result else { continue };
                let ops: Vec<ValueSet> = e.operands.iter().map(|o| eval(*o, input)).collect();
                let hits = |s: &ValueSet, pool: &BTreeSet<AbstractValue>| !s.is_disjoint(pool);
                let found = match e.opcode {
                    Opcode::CALLDATALOAD => {
                        if all_const(&ops[0], U256::ZERO) {
                            calldata.insert(result);
                        }
                        false
                    }
                    Opcode::SHR => all_const(&ops[0], shift) && hits(&ops[1], &calldata),
                    Opcode::DIV => hits(&ops[0], &calldata) && all_const(&ops[1], divisor),
                    Opcode::AND => {
                        (hits(&ops[0], &selectors) && all_const(&ops[1], mask))
                            || (hits(&ops[1], &selectors) && all_const(&ops[0], mask))
                    }
                    _ => false,
                };
                if found {
                    selectors.insert(result);
                }
            }
        }
        if calldata.len() + selectors.len() == before {
            return selectors;
        }
    }
}

fn processed(pre: &AnalysisState) -> impl Iterator<Item = ((CtxId, BlockId), &Vec<ValueSet>)> {
    pre.block_input.iter().filter(|(key, _)| pre.block_output.contains_key(key)).map(|(key, input)| (*key, input))
}

/// Keeps a dispatch candidate when the compared operand may hold the
/// selector under some context.
pub fn filter_public_calls(
    candidates: &PatternFacts,
    summaries: &Summaries,
    pre: &AnalysisState,
) -> BTreeSet<(BlockId, BlockId)> {
    let selectors = selector_values(summaries, pre);
    candidates
        .public_call_candidates
        .iter()
        .filter(|c| {
            processed(pre)
                .filter(|((_, b), _)| *b == c.block)
                .any(|(_, input)| !eval(c.compared, input).is_disjoint(&selectors))
        })
        .map(|c| (c.block, c.target))
        .collect()
}

type SlotKey = (CtxId, BlockId, usize);

fn imprecise(rel: &BTreeMap<(CtxId, BlockId), Vec<ValueSet>>) -> HashSet<SlotKey> {
    rel.iter()
        .flat_map(|((c, b), sets)| sets.iter().enumerate().filter(|(_, s)| s.len() >= 2).map(move |(i, _)| (*c, *b, i)))
        .collect()
}

/// Edges into a block whose input slot is imprecise while neither the
/// source's output at that slot nor any predecessor's output explains it.
pub fn compute_important_edges(pre: &AnalysisState) -> BTreeSet<(BlockId, BlockId)> {
    let input = imprecise(&pre.block_input);
    let output = imprecise(&pre.block_output);
    let mut from_previous: HashSet<SlotKey> = HashSet::new();
    for (pc, pb, c, b) in &pre.global_block_edge {
        let width = pre.block_output.get(&(*pc, *pb)).map_or(0, |s| s.len());
        for i in 0..width {
            if input.contains(&(*c, *b, i)) && output.contains(&(*pc, *pb, i)) {
                from_previous.insert((*c, *b, i));
            }
        }
    }
    let mut out = BTreeSet::new();
    for (fc, from, tc, to) in &pre.global_block_edge {
        let width = pre.block_input.get(&(*tc, *to)).map_or(0, |s| s.len());
        let introduced = (0..width).any(|i| {
            input.contains(&(*tc, *to, i))
                && !from_previous.contains(&(*tc, *to, i))
                && !output.contains(&(*fc, *from, i))
        });
        if introduced {
            out.insert((*from, *to));
        }
    }
    out
}

/// Confirms candidates against a pre-analysis state.
pub fn confirm(candidates: &PatternFacts, summaries: &Summaries, pre: &AnalysisState) -> ConfirmedFacts {
    ConfirmedFacts {
        public_calls: filter_public_calls(candidates, summaries, pre),
        private_calls: filter_private_calls(candidates, pre),
        private_returns: candidates.private_returns.clone(),
        important_edges: compute_important_edges(pre),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Asm;
    use crate::corpus::fixtures;
    use crate::local::summarize_program;
    use crate::opcode::Opcode as Op;

    struct Run {
        candidates: PatternFacts,
        summaries: Summaries,
        pre: AnalysisState,
    }

    fn pre(program: &BytecodeProgram, limit: u64) -> Run {
        let summaries = summarize_program(program);
        let candidates = PatternFacts::detect(program, &summaries);
        let pre = run_preanalysis(program, &summaries, &candidates, 20, limit, &AnalysisLimits::default());
        Run { candidates, summaries, pre }
    }

    #[test]
    fn simple_call_is_confirmed() {
        let fx = fixtures::simple_call();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        assert!(r.pre.block_jump_target.iter().any(|t| t.3 == BlockId(0x132)));
        assert_eq!(filter_private_calls(&r.candidates, &r.pre), BTreeSet::from([(BlockId(0x129), BlockId(0x132))]));
    }

    #[test]
    fn unused_continuation_is_dropped() {
        let fx = fixtures::unused_continuation();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        assert_eq!(r.candidates.private_call_candidates.len(), 1);
        assert!(filter_private_calls(&r.candidates, &r.pre).is_empty());
    }

    #[test]
    fn starved_preanalysis_confirms_nothing() {
        let fx = fixtures::chained_calls();
        let r = pre(&fx.program, 1);
        assert!(!r.candidates.private_call_candidates.is_empty());
        assert!(filter_private_calls(&r.candidates, &r.pre).is_empty());
    }

    #[test]
    fn unbounded_preanalysis_matches_main_run() {
        let fx = fixtures::chained_calls();
        let r = pre(&fx.program, u64::MAX);
        let cfg = SchemeConfig::new(Scheme::Shrinking, 20);
        let facts = ConfirmedFacts::from_candidates(&r.candidates);
        let main = analyze(&fx.program, &r.summaries, &facts, &cfg, &AnalysisLimits::default());
        assert_eq!(main.global_block_edge, r.pre.global_block_edge);
        assert_eq!(main.block_input, r.pre.block_input);
    }

    #[test]
    fn dispatch_candidates_are_confirmed() {
        let fx = fixtures::selector_dispatch();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        let expected: BTreeSet<(BlockId, BlockId)> =
            r.candidates.public_call_candidates.iter().map(|c| (c.block, c.target)).collect();
        assert_eq!(expected.len(), 2);
        assert!(expected.iter().any(|(b, _)| *b == fx.block("dispatch1")));
        assert!(expected.iter().any(|(b, _)| *b == fx.block("dispatch2")));
        assert_eq!(filter_public_calls(&r.candidates, &r.summaries, &r.pre), expected);
    }

    #[test]
    fn storage_comparison_is_rejected() {
        let fx = fixtures::storage_comparison();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        assert_eq!(r.candidates.public_call_candidates.len(), 1);
        assert!(filter_public_calls(&r.candidates, &r.summaries, &r.pre).is_empty());
    }

    #[test]
    fn div_and_mask_selectors() {
        let code = Asm::new()
            .push0()
            .op(Op::CALLDATALOAD)
            .push_n(29, U256::from(1u64) << 224)
            .op(Op::SWAP1)
            .op(Op::DIV)
            .push_n(4, U256::from(0xffff_ffffu64))
            .op(Op::AND)
            .push_n(4, U256::from(0x0102_0304u64))
            .op(Op::EQ)
            .push_label("f")
            .op(Op::JUMPI)
            .stop()
            .label("f")
            .stop()
            .assemble();
        let program = BytecodeProgram::from_code(&code);
        let r = pre(&program, DEFAULT_PREANALYSIS_LIMIT);
        assert_eq!(filter_public_calls(&r.candidates, &r.summaries, &r.pre).len(), 1);
        assert_eq!(selector_values(&r.summaries, &r.pre).len(), 2);
    }

    #[test]
    fn raw_calldata_is_not_a_selector() {
        let code = Asm::new()
            .push0()
            .op(Op::CALLDATALOAD)
            .push_n(4, U256::from(0x0102_0304u64))
            .op(Op::EQ)
            .push_label("f")
            .op(Op::JUMPI)
            .stop()
            .label("f")
            .stop()
            .assemble();
        let program = BytecodeProgram::from_code(&code);
        let r = pre(&program, DEFAULT_PREANALYSIS_LIMIT);
        assert_eq!(r.candidates.public_call_candidates.len(), 1);
        assert!(filter_public_calls(&r.candidates, &r.summaries, &r.pre).is_empty());
    }

    /// Direct evaluation of the imprecision rules over flattened tuples.
    fn important_edges_oracle(pre: &AnalysisState) -> BTreeSet<(BlockId, BlockId)> {
        let flatten = |rel: &BTreeMap<(CtxId, BlockId), Vec<ValueSet>>| {
            let mut rows = Vec::new();
            for ((c, b), sets) in rel {
                for (i, s) in sets.iter().enumerate() {
                    for v in s {
                        rows.push((*c, *b, i, *v));
                    }
                }
            }
            rows
        };
        let inputs = flatten(&pre.block_input);
        let outputs = flatten(&pre.block_output);
        let distinct = |rows: &Vec<(CtxId, BlockId, usize, AbstractValue)>| {
            let mut out = Vec::new();
            for a in rows {
                for b in rows {
                    if (a.0, a.1, a.2) == (b.0, b.1, b.2) && a.3 != b.3 && !out.contains(&(a.0, a.1, a.2)) {
                        out.push((a.0, a.1, a.2));
                    }
                }
            }
            out
        };
        let imp_in = distinct(&inputs);
        let imp_out = distinct(&outputs);
        let mut from_prev = Vec::new();
        for (c, b, i) in &imp_in {
            for (pc, pb, c2, b2) in &pre.global_block_edge {
                if (c2, b2) == (c, b) && imp_out.contains(&(*pc, *pb, *i)) {
                    from_prev.push((*c, *b, *i));
                }
            }
        }
        let mut out = BTreeSet::new();
        for (fc, f, tc, t) in &pre.global_block_edge {
            for (c, b, i) in &imp_in {
                if (c, b) == (tc, t) && !from_prev.contains(&(*c, *b, *i)) && !imp_out.contains(&(*fc, *f, *i)) {
                    out.insert((*f, *t));
                }
            }
        }
        out
    }

    #[test]
    fn merge_edges_are_important() {
        let fx = fixtures::two_predecessor_merge();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        let expected = BTreeSet::from([(fx.block("left"), fx.block("join")), (fx.block("right"), fx.block("join"))]);
        assert_eq!(important_edges_oracle(&r.pre), expected);
        assert_eq!(compute_important_edges(&r.pre), expected);
    }

    #[test]
    fn precise_chain_has_no_important_edges() {
        let fx = fixtures::simple_call();
        let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
        assert!(important_edges_oracle(&r.pre).is_empty());
        assert!(compute_important_edges(&r.pre).is_empty());
    }

    #[test]
    fn inherited_imprecision_is_not_important() {
        let code = Asm::new()
            .push0()
            .op(Op::CALLDATALOAD)
            .push_label("right")
            .op(Op::JUMPI)
            .push(0x11)
            .jump_to("join")
            .label("right")
            .push(0x22)
            .jump_to("join")
            .label("join")
            .jump_to("after")
            .label("after")
            .push0()
            .op(Op::SSTORE)
            .stop()
            .assemble();
        let program = BytecodeProgram::from_code(&code);
        let r = pre(&program, DEFAULT_PREANALYSIS_LIMIT);
        let important = compute_important_edges(&r.pre);
        assert_eq!(important, important_edges_oracle(&r.pre));
        assert_eq!(important.len(), 2);
        assert!(important.iter().all(|(_, to)| program.blocks[to].last().opcode == Op::JUMP));
    }

    #[test]
    fn confirmed_facts_are_subsets() {
        for fx in [fixtures::chained_calls(), fixtures::selector_dispatch(), fixtures::stack_balancing()] {
            let r = pre(&fx.program, DEFAULT_PREANALYSIS_LIMIT);
            let raw = ConfirmedFacts::from_candidates(&r.candidates);
            let confirmed = confirm(&r.candidates, &r.summaries, &r.pre);
            assert!(confirmed.private_calls.is_subset(&raw.private_calls));
            assert!(confirmed.public_calls.is_subset(&raw.public_calls));
        }
    }
}
