//! Context-sensitive abstract stack interpretation over (context, block)
//! pairs.
//!
//! Every pair carries one value set per stack slot. Block summaries push
//! the sets through each block; resolved jump targets produce edges whose
//! target context comes from [`merge`]. Sets only grow, so the worklist
//! reaches a fixpoint unless a fact or time budget stops it first.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use ruint::aliases::U256;
use serde::{Deserialize, Serialize};

use crate::bytecode::{BlockId, BytecodeProgram, Terminator};
use crate::context::{merge, ConfirmedFacts, Context, SchemeConfig};
use crate::local::{BlockSummary, Summaries};
use crate::value::{AbstractValue, SymValue};

/// Index into [`AnalysisState::contexts`].
pub type CtxId = u32;

pub type ValueSet = BTreeSet<AbstractValue>;

/// Per-slot value sets, top of stack first.
pub type StackSets = Vec<ValueSet>;

pub const DEFAULT_MAX_STACK_DEPTH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopCondition {
    Fixpoint,
    FactLimit,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalysisLimits {
    pub fact_limit: Option<u64>,
    pub deadline: Option<Instant>,
    pub max_stack_depth: usize,
}

impl Default for AnalysisLimits {
    fn default() -> Self {
        AnalysisLimits { fact_limit: None, deadline: None, max_stack_depth: DEFAULT_MAX_STACK_DEPTH }
    }
}

impl AnalysisLimits {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.deadline = Some(Instant::now() + timeout);
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WorklistOrder {
    #[default]
    Fifo,
    Lifo,
}

#[derive(Clone, Debug)]
pub struct AnalysisState {
    /// Interned contexts; `contexts[0]` is the initial context.
    pub contexts: Vec<Context>,
    pub block_input: BTreeMap<(CtxId, BlockId), StackSets>,
    pub block_output: BTreeMap<(CtxId, BlockId), StackSets>,
    /// `(ctx, block, target value, target block)`.
    pub block_jump_target: BTreeSet<(CtxId, BlockId, AbstractValue, BlockId)>,
    /// `(from ctx, from block, to ctx, to block)`.
    pub global_block_edge: BTreeSet<(CtxId, BlockId, CtxId, BlockId)>,
    pub fact_count: u64,
    pub stop_condition: StopCondition,
    /// Jumps with a non-constant or missing target value.
    pub unresolved_jumps: BTreeSet<(CtxId, BlockId)>,
    /// Constant targets that are not jump destinations.
    pub invalid_targets: BTreeSet<(CtxId, BlockId, U256)>,
    /// Statements reading a slot with no known value, as `(ctx, block, pc)`.
    pub unresolved_operands: BTreeSet<(CtxId, BlockId, u32)>,
    pub transfers: u64,
}

impl AnalysisState {
    pub fn context(&self, id: CtxId) -> &Context {
        &self.contexts[id as usize]
    }

    /// Block-level edges with contexts projected away.
    pub fn edge_projection(&self) -> BTreeSet<(BlockId, BlockId)> {
        self.global_block_edge.iter().map(|(_, a, _, b)| (*a, *b)).collect()
    }

    /// Blocks analyzed under at least one context.
    pub fn reached_blocks(&self) -> BTreeSet<BlockId> {
        self.block_input.keys().map(|(_, b)| *b).collect()
    }

    pub fn contexts_of(&self, block: BlockId) -> impl Iterator<Item = CtxId> + '_ {
        self.block_input.keys().filter(move |(_, b)| *b == block).map(|(c, _)| *c)
    }

    /// Distinct resolved targets per `(ctx, block)`.
    pub fn targets_by_pair(&self) -> BTreeMap<(CtxId, BlockId), BTreeSet<BlockId>> {
        let mut out: BTreeMap<(CtxId, BlockId), BTreeSet<BlockId>> = BTreeMap::new();
        for (c, b, _, t) in &self.block_jump_target {
            out.entry((*c, *b)).or_default().insert(*t);
        }
        out
    }

    /// Edge set with contexts spelled out, for comparing runs whose context
    /// numbering differs.
    pub fn edges_by_value(&self) -> BTreeSet<(Context, BlockId, Context, BlockId)> {
        self.global_block_edge
            .iter()
            .map(|(c, a, d, b)| (self.context(*c).clone(), *a, self.context(*d).clone(), *b))
            .collect()
    }

    /// Input sets keyed by context value.
    pub fn inputs_by_value(&self) -> BTreeMap<(Context, BlockId), StackSets> {
        self.block_input.iter().map(|((c, b), s)| ((self.context(*c).clone(), *b), s.clone())).collect()
    }
}

/// Result of pushing one input through a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub output: StackSets,
    /// Values of the jump target operand; empty for non-jumping blocks.
    pub targets: ValueSet,
    /// Statements that read a slot with an empty value set.
    pub unresolved: Vec<u32>,
}

/// Value set of a summary operand under `input`.
pub fn eval(sym: SymValue, input: &StackSets) -> ValueSet {
    match sym {
        SymValue::Entry(k) => input.get(k).cloned().unwrap_or_default(),
        SymValue::Value(v) => BTreeSet::from([v]),
    }
}

fn is_empty_read(sym: &SymValue, input: &StackSets) -> bool {
    matches!(sym, SymValue::Entry(k) if input.get(*k).is_none_or(|s| s.is_empty()))
}

/// Applies `summary` pointwise to `input`.
pub fn transfer_block(summary: &BlockSummary, input: &StackSets, max_stack_depth: usize) -> Transfer {
    if summary.underflow {
        return Transfer { output: Vec::new(), targets: BTreeSet::new(), unresolved: Vec::new() };
    }
    let len = (summary.exit.len() + input.len().saturating_sub(summary.consumed_depth)).min(max_stack_depth);
    let output = (0..len).map(|i| eval(summary.exit_slot(i), input)).collect();
    let targets = summary.jump_target.map(|t| eval(t, input)).unwrap_or_default();
    let unresolved =
        summary.effects.iter().filter(|e| e.operands.iter().any(|o| is_empty_read(o, input))).map(|e| e.pc).collect();
    Transfer { output, targets, unresolved }
}

fn set_size(sets: &StackSets) -> u64 {
    sets.iter().map(|s| s.len() as u64).sum()
}

/// Unions `incoming` into `into`; returns the number of new values.
fn join(into: &mut StackSets, incoming: &StackSets) -> u64 {
    if into.len() < incoming.len() {
        into.resize(incoming.len(), BTreeSet::new());
    }
    let mut added = 0;
    for (dst, src) in into.iter_mut().zip(incoming) {
        for v in src {
            if dst.insert(*v) {
                added += 1;
            }
        }
    }
    added
}

struct Engine<'a> {
    program: &'a BytecodeProgram,
    summaries: &'a Summaries,
    facts: &'a ConfirmedFacts,
    cfg: &'a SchemeConfig,
    limits: AnalysisLimits,
    ctx_index: HashMap<Context, CtxId>,
    state: AnalysisState,
    worklist: VecDeque<(CtxId, BlockId)>,
    queued: HashSet<(CtxId, BlockId)>,
    order: WorklistOrder,
}

impl Engine<'_> {
    fn intern(&mut self, ctx: Context) -> CtxId {
        if let Some(id) = self.ctx_index.get(&ctx) {
            return *id;
        }
        let id = self.state.contexts.len() as CtxId;
        self.state.contexts.push(ctx.clone());
        self.ctx_index.insert(ctx, id);
        id
    }

    fn enqueue(&mut self, pair: (CtxId, BlockId)) {
        if self.queued.insert(pair) {
            self.worklist.push_back(pair);
        }
    }

    fn pop(&mut self) -> Option<(CtxId, BlockId)> {
        let pair = match self.order {
            WorklistOrder::Fifo => self.worklist.pop_front(),
            WorklistOrder::Lifo => self.worklist.pop_back(),
        }?;
        self.queued.remove(&pair);
        Some(pair)
    }

    fn successors(&mut self, ctx: CtxId, block: BlockId, targets: &ValueSet) -> Vec<BlockId> {
        let b = &self.program.blocks[&block];
        let mut succ = Vec::new();
        if matches!(b.terminator, Terminator::Jump | Terminator::ConditionalJump) {
            for v in targets {
                let Some(c) = v.constant else { continue };
                if let Some(t) = BlockId::from_value(c).filter(|t| self.program.is_valid_target(*t)) {
                    if self.state.block_jump_target.insert((ctx, block, *v, t)) {
                        self.state.fact_count += 1;
                    }
                    succ.push(t);
                }
            }
        }
        if matches!(b.terminator, Terminator::ConditionalJump | Terminator::Fallthrough) {
            succ.extend(b.fallthrough);
        }
        succ.sort_unstable();
        succ.dedup();
        succ
    }

    fn process(&mut self, ctx: CtxId, block: BlockId) {
        self.state.transfers += 1;
        let input = self.state.block_input[&(ctx, block)].clone();
        let transfer = transfer_block(&self.summaries[&block], &input, self.limits.max_stack_depth);
        let first_visit = !self.state.block_output.contains_key(&(ctx, block));
        let out = self.state.block_output.entry((ctx, block)).or_default();
        let added = join(out, &transfer.output);
        self.state.fact_count += added;
        if added == 0 && !first_visit {
            return;
        }
        let output = out.clone();
        let succ = self.successors(ctx, block, &transfer.targets);
        let current = self.state.context(ctx).clone();
        for next in succ {
            let next_ctx = merge(&current, block, next, self.facts, self.cfg);
            let next_id = self.intern(next_ctx);
            if self.state.global_block_edge.insert((ctx, block, next_id, next)) {
                self.state.fact_count += 1;
            }
            let is_new = !self.state.block_input.contains_key(&(next_id, next));
            let slot = self.state.block_input.entry((next_id, next)).or_default();
            let added = join(slot, &output);
            self.state.fact_count += added;
            if added > 0 || is_new {
                self.enqueue((next_id, next));
            }
        }
    }

    fn stop_reason(&self) -> Option<StopCondition> {
        if self.limits.fact_limit.is_some_and(|l| self.state.fact_count >= l) {
            return Some(StopCondition::FactLimit);
        }
        if self.limits.deadline.is_some_and(|d| Instant::now() >= d) {
            return Some(StopCondition::Timeout);
        }
        None
    }

    fn run(&mut self) {
        let initial = self.intern(Context::initial());
        if self.program.block(BlockId(0)).is_none() {
            return;
        }
        self.state.block_input.insert((initial, BlockId(0)), Vec::new());
        self.enqueue((initial, BlockId(0)));
        loop {
            if let Some(reason) = self.stop_reason() {
                if !self.worklist.is_empty() {
                    self.state.stop_condition = reason;
                    return;
                }
            }
            let Some((ctx, block)) = self.pop() else { return };
            self.process(ctx, block);
        }
    }

    /// Records unresolved jumps and operands against the final sets.
    fn audit(&mut self) {
        for ((ctx, block), input) in &self.state.block_input {
            if !self.state.block_output.contains_key(&(*ctx, *block)) {
                continue;
            }
            let summary = &self.summaries[block];
            let t = transfer_block(summary, input, self.limits.max_stack_depth);
            for pc in t.unresolved {
                self.state.unresolved_operands.insert((*ctx, *block, pc));
            }
            let b = &self.program.blocks[block];
            if summary.underflow || !matches!(b.terminator, Terminator::Jump | Terminator::ConditionalJump) {
                continue;
            }
            if t.targets.is_empty() || t.targets.iter().any(|v| v.constant.is_none()) {
                self.state.unresolved_jumps.insert((*ctx, *block));
            }
            for c in t.targets.iter().filter_map(|v| v.constant) {
                if !self.program.is_valid_target_value(c) {
                    self.state.invalid_targets.insert((*ctx, *block, c));
                }
            }
        }
    }
}

pub fn analyze(
    program: &BytecodeProgram,
    summaries: &Summaries,
    facts: &ConfirmedFacts,
    cfg: &SchemeConfig,
    limits: &AnalysisLimits,
) -> AnalysisState {
    analyze_with_order(program, summaries, facts, cfg, limits, WorklistOrder::Fifo)
}

pub fn analyze_with_order(
    program: &BytecodeProgram,
    summaries: &Summaries,
    facts: &ConfirmedFacts,
    cfg: &SchemeConfig,
    limits: &AnalysisLimits,
    order: WorklistOrder,
) -> AnalysisState {
    let mut engine = Engine {
        program,
        summaries,
        facts,
        cfg,
        limits: *limits,
        ctx_index: HashMap::new(),
        state: AnalysisState {
            contexts: Vec::new(),
            block_input: BTreeMap::new(),
            block_output: BTreeMap::new(),
            block_jump_target: BTreeSet::new(),
            global_block_edge: BTreeSet::new(),
            fact_count: 0,
            stop_condition: StopCondition::Fixpoint,
            unresolved_jumps: BTreeSet::new(),
            invalid_targets: BTreeSet::new(),
            unresolved_operands: BTreeSet::new(),
            transfers: 0,
        },
        worklist: VecDeque::new(),
        queued: HashSet::new(),
        order,
    };
    engine.run();
    engine.audit();
    debug_assert_eq!(engine.state.fact_count, recount(&engine.state));
    engine.state
}

fn recount(state: &AnalysisState) -> u64 {
    state.block_input.values().map(set_size).sum::<u64>()
        + state.block_output.values().map(set_size).sum::<u64>()
        + state.block_jump_target.len() as u64
        + state.global_block_edge.len() as u64
}
