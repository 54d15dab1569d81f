//! Hand-assembled programs reproducing well-known compiler output shapes:
//! selector dispatch, a simple private call, optimized chained calls and a
//! shared stack-balancing block.

use std::collections::BTreeMap;

use ruint::aliases::U256;

use crate::asm::Asm;
use crate::bytecode::{BlockId, BytecodeProgram};
use crate::opcode::Opcode as Op;

pub const TRANSFER_WITH_FEE: u32 = 0x12e49406;
pub const SIMPLE_TRANSFER: u32 = 0x87d7a5f4;

/// An assembled program together with its named offsets.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub code: Vec<u8>,
    pub program: BytecodeProgram,
    labels: BTreeMap<String, u32>,
}

impl Fixture {
    fn new(asm: Asm) -> Fixture {
        let code = asm.assemble();
        let program = BytecodeProgram::from_code(&code);
        Fixture { code, program, labels: asm.labels() }
    }

    /// Block id of a named offset. Panics on unknown names.
    pub fn block(&self, name: &str) -> BlockId {
        BlockId(*self.labels.get(name).unwrap_or_else(|| panic!("no label {name}")))
    }
}

fn push4(asm: Asm, value: u32) -> Asm {
    asm.push_n(4, U256::from(value))
}

/// Two-function dispatcher. The first comparison consumes a selector loaded
/// in the same block, the second one a selector inherited from the previous
/// block.
pub fn selector_dispatch() -> Fixture {
    let mut asm = Asm::new()
        .push(0x80)
        .push(0x40)
        .op(Op::MSTORE)
        .op(Op::CALLVALUE)
        .op(Op::DUP1)
        .op(Op::ISZERO)
        .push_label("nonpayable")
        .op(Op::JUMPI)
        .push0()
        .op(Op::DUP1)
        .op(Op::REVERT)
        .label("nonpayable")
        .op(Op::POP)
        .push0()
        .push(4)
        .op(Op::CALLDATASIZE)
        .op(Op::LT)
        .push_label("fallback")
        .op(Op::JUMPI)
        .mark("dispatch1")
        .op(Op::CALLDATALOAD)
        .push(0xe0)
        .op(Op::SHR)
        .op(Op::DUP1);
    asm = push4(asm, TRANSFER_WITH_FEE)
        .op(Op::EQ)
        .push_label("transfer_with_fee")
        .op(Op::JUMPI)
        .mark("dispatch2")
        .op(Op::DUP1);
    let asm = push4(asm, SIMPLE_TRANSFER)
        .op(Op::EQ)
        .push_label("simple_transfer")
        .op(Op::JUMPI)
        .push0()
        .op(Op::DUP1)
        .op(Op::REVERT)
        .org(0x38)
        .label("transfer_with_fee")
        .push(4)
        .op(Op::CALLDATALOAD)
        .push0()
        .op(Op::SSTORE)
        .stop()
        .org(0x54)
        .label("simple_transfer")
        .push(0x24)
        .op(Op::CALLDATALOAD)
        .push(1)
        .op(Op::SSTORE)
        .stop()
        .label("fallback")
        .push0()
        .op(Op::DUP1)
        .op(Op::REVERT);
    Fixture::new(asm)
}

/// A caller pushing its continuation, one argument copy and the callee
/// address; the callee masks its argument and jumps back.
pub fn simple_call() -> Fixture {
    let asm = Asm::new()
        .push(0xaa)
        .push(0xbb)
        .push(0xcc)
        .jump_to("caller")
        .org(0x109)
        .label("cleanup")
        .push0()
        .push_n(20, (U256::from(1) << 160) - U256::from(1))
        .op(Op::dup(3))
        .op(Op::AND)
        .op(Op::SWAP1)
        .op(Op::POP)
        .op(Op::swap(2))
        .op(Op::SWAP1)
        .op(Op::POP)
        .op(Op::JUMP)
        .op(Op::INVALID)
        .label("caller")
        .push_n(2, U256::from(0x132))
        .op(Op::dup(3))
        .jump_to("cleanup")
        .label("continuation")
        .push0()
        .op(Op::SSTORE)
        .stop();
    Fixture::new(asm)
}

/// Two public functions built from checked arithmetic helpers. The first
/// chains three checked subtractions through a continuation block that is
/// pushed twice; the second chains a checked addition into two checked
/// subtractions through the same block.
pub fn chained_calls() -> Fixture {
    let mut asm = Asm::new().push(0).op(Op::CALLDATALOAD).push(0xe0).op(Op::SHR).op(Op::DUP1);
    asm = push4(asm, TRANSFER_WITH_FEE).op(Op::EQ).push_label("fn1").op(Op::JUMPI).op(Op::DUP1);
    asm = push4(asm, SIMPLE_TRANSFER).op(Op::EQ).push_label("fn2").op(Op::JUMPI);
    let asm = asm
        .push0()
        .op(Op::DUP1)
        .op(Op::REVERT)
        .org(0x50)
        .label("fn1")
        .push(4)
        .op(Op::CALLDATALOAD)
        .push(0x24)
        .op(Op::CALLDATALOAD)
        .op(Op::CALLER)
        .label("chain")
        .op(Op::SWAP1)
        .push_label("final")
        .push(0x84)
        .op(Op::CALLDATALOAD)
        .push_label("again")
        .push(0x64)
        .op(Op::CALLDATALOAD)
        .push_label("again")
        .push0()
        .op(Op::SLOAD)
        .push(0x44)
        .op(Op::CALLDATALOAD)
        .jump_to("safe_sub")
        .label("again")
        .jump_to("safe_sub")
        .label("final")
        .push(1)
        .op(Op::SSTORE)
        .stop()
        .org(0x80)
        .label("fn2")
        .push_label("fin2")
        .push(0xa4)
        .op(Op::CALLDATALOAD)
        .push_label("again")
        .push(0xc4)
        .op(Op::CALLDATALOAD)
        .push_label("again")
        .push(0x20)
        .push(4)
        .op(Op::CALLDATALOAD)
        .jump_to("safe_add")
        .label("fin2")
        .push(2)
        .op(Op::SSTORE)
        .stop()
        .org(0x1a0)
        .label("safe_add")
        .op(Op::dup(2))
        .op(Op::dup(2))
        .op(Op::ADD)
        .op(Op::dup(2))
        .op(Op::dup(2))
        .op(Op::LT)
        .push_label("panic")
        .op(Op::JUMPI)
        .op(Op::swap(2))
        .op(Op::POP)
        .op(Op::POP)
        .op(Op::SWAP1)
        .op(Op::JUMP)
        .org(0x1c7)
        .label("safe_sub")
        .op(Op::dup(2))
        .op(Op::dup(2))
        .op(Op::LT)
        .push_label("panic")
        .op(Op::JUMPI)
        .op(Op::SUB)
        .op(Op::SWAP1)
        .op(Op::JUMP)
        .org(0x1e0)
        .label("panic")
        .push0()
        .op(Op::DUP1)
        .op(Op::REVERT);
    Fixture::new(asm)
}

/// Two callers reuse one stack-balancing block at 0x1c3 to drop two
/// arguments and return.
pub fn stack_balancing() -> Fixture {
    let asm = Asm::new()
        .push_label("ret_a")
        .push(0x33)
        .push(0x22)
        .push(0x11)
        .jump_to("balance")
        .label("ret_a")
        .push0()
        .op(Op::SSTORE)
        .push_label("ret_b")
        .push(0x66)
        .push(0x55)
        .push(0x44)
        .jump_to("balance")
        .label("ret_b")
        .push(1)
        .op(Op::SSTORE)
        .stop()
        .org(0x1c3)
        .label("balance")
        .op(Op::SWAP1)
        .op(Op::POP)
        .op(Op::swap(2))
        .op(Op::SWAP1)
        .op(Op::POP)
        .op(Op::JUMP);
    Fixture::new(asm)
}

/// A continuation-shaped constant that is pushed, dropped and never jumped
/// to.
pub fn unused_continuation() -> Fixture {
    let asm = Asm::new()
        .push_label("decoy")
        .push(7)
        .jump_to("body")
        .label("decoy")
        .push0()
        .op(Op::SSTORE)
        .stop()
        .label("body")
        .op(Op::POP)
        .op(Op::POP)
        .stop();
    Fixture::new(asm)
}

/// Compares a storage word, not the selector, against a 4-byte constant.
pub fn storage_comparison() -> Fixture {
    let asm = Asm::new().push0().op(Op::SLOAD);
    let asm = push4(asm, TRANSFER_WITH_FEE).op(Op::EQ).push_label("target").op(Op::JUMPI).stop().label("target").stop();
    Fixture::new(asm)
}

/// Blocks `left` and `right` each push a different constant and jump to
/// `join` under the same context.
pub fn two_predecessor_merge() -> Fixture {
    let asm = Asm::new()
        .push0()
        .op(Op::CALLDATALOAD)
        .push_label("right")
        .op(Op::JUMPI)
        .mark("left")
        .push(0x11)
        .jump_to("join")
        .label("right")
        .push(0x22)
        .jump_to("join")
        .label("join")
        .push0()
        .op(Op::SSTORE)
        .stop();
    Fixture::new(asm)
}

/// A block that reads a stack slot which one public function provides and
/// the fallthrough path does not.
pub fn inconsistent_operand() -> Fixture {
    let asm = Asm::new().push0().op(Op::CALLDATALOAD).push(0xe0).op(Op::SHR);
    let asm = push4(asm, TRANSFER_WITH_FEE)
        .op(Op::EQ)
        .push_label("public")
        .op(Op::JUMPI)
        .jump_to("sink")
        .label("public")
        .push(7)
        .jump_to("sink")
        .label("sink")
        .push0()
        .op(Op::SSTORE)
        .stop();
    Fixture::new(asm)
}

/// A conditional jump whose target comes from calldata.
pub fn calldata_jumpi() -> Fixture {
    let asm = Asm::new().push(1).push0().op(Op::CALLDATALOAD).op(Op::JUMPI).stop().label("somewhere").stop();
    Fixture::new(asm)
}
