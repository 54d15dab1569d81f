//! Block cloning: one private copy of a reused continuation or
//! stack-balancing block per statement that pushes its address.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::bytecode::{BasicBlock, BlockId, BytecodeProgram, Instruction, Terminator};
use crate::local::{summarize_block, BlockSummary, PatternFacts};
use crate::value::SymValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CloneInstance {
    pub push_pc: u32,
    pub original: BlockId,
    pub fresh: BlockId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CloneError {
    #[error("no PUSH of {original} at pc {push_pc:#x}")]
    PushMismatch { push_pc: u32, original: BlockId },
    #[error("clone id {0} collides with an existing block")]
    IdCollision(BlockId),
}

/// First clone id: the first multiple of 16 strictly past the code.
pub fn first_fresh_id(code_len: u32) -> u32 {
    (code_len / 16 + 1) * 16
}

/// Chooses the blocks to clone and allocates their fresh ids.
///
/// A block qualifies if it ends in `JUMP` and is either pushed as a
/// continuation by at least two call candidates, or is a stack-balancing
/// block whose address is pushed by at least two statements anywhere and
/// passed on unchanged.
pub fn select_clone_candidates(program: &BytecodeProgram, facts: &PatternFacts) -> Vec<CloneInstance> {
    let mut pushers: BTreeMap<BlockId, BTreeSet<u32>> = BTreeMap::new();
    for c in &facts.private_call_candidates {
        pushers.entry(c.continuation).or_default().insert(c.push_pc);
    }
    let mut chosen: BTreeMap<BlockId, BTreeSet<u32>> = pushers.into_iter().filter(|(_, pcs)| pcs.len() >= 2).collect();

    if !facts.stack_balancing.is_empty() {
        let mut pushes: BTreeMap<BlockId, BTreeSet<u32>> = BTreeMap::new();
        for block in program.blocks.values() {
            let summary = summarize_block(block, program);
            for ins in &block.instructions {
                let Some(target) = ins.pushed_value.and_then(BlockId::from_value) else { continue };
                if facts.stack_balancing.contains(&target) && escapes(&summary, ins.pc) {
                    pushes.entry(target).or_default().insert(ins.pc);
                }
            }
        }
        for (block, pcs) in pushes {
            if pcs.len() >= 2 {
                chosen.entry(block).or_default().extend(pcs);
            }
        }
    }

    let mut next = first_fresh_id(program.original_len());
    let mut out = Vec::new();
    for (original, pcs) in chosen {
        let Some(block) = program.block(original) else { continue };
        if block.terminator != Terminator::Jump || block.clone_of.is_some() {
            continue;
        }
        for push_pc in pcs {
            out.push(CloneInstance { push_pc, original, fresh: BlockId(next) });
            next += block.byte_len();
        }
    }
    out
}

/// The value defined at `pc` leaves the block as a jump target or on the
/// exit stack, so it can only be used as an address.
fn escapes(summary: &BlockSummary, pc: u32) -> bool {
    let defined_here = |v: &SymValue| v.def_pc() == Some(pc);
    summary.exit.iter().any(defined_here) || summary.jump_target.as_ref().is_some_and(defined_here)
}

/// Adds one copy of each original block under its fresh id and redirects
/// the corresponding push to it. Originals are kept.
pub fn apply_cloning(program: &BytecodeProgram, instances: &[CloneInstance]) -> Result<BytecodeProgram, CloneError> {
    let mut out = program.clone();
    for inst in instances {
        let owner = program
            .block_containing(inst.push_pc)
            .map(|b| b.id)
            .ok_or(CloneError::PushMismatch { push_pc: inst.push_pc, original: inst.original })?;
        let block = out.blocks.get_mut(&owner).unwrap();
        let ins = block
            .instructions
            .iter_mut()
            .find(|i| i.pc == inst.push_pc)
            .filter(|i| i.pushed_value == Some(inst.original.value()))
            .ok_or(CloneError::PushMismatch { push_pc: inst.push_pc, original: inst.original })?;
        ins.pushed_value = Some(inst.fresh.value());
    }
    for inst in instances {
        if out.blocks.contains_key(&inst.fresh) {
            return Err(CloneError::IdCollision(inst.fresh));
        }
        let original = &program.blocks[&inst.original];
        let shift = |pc: u32| pc - original.id.0 + inst.fresh.0;
        let instructions = original.instructions.iter().map(|i| Instruction { pc: shift(i.pc), ..i.clone() }).collect();
        let copy = BasicBlock {
            id: inst.fresh,
            instructions,
            terminator: original.terminator,
            fallthrough: None,
            clone_of: Some(inst.original),
        };
        out.blocks.insert(inst.fresh, copy);
    }
    Ok(out)
}
