//! EVM opcode table: mnemonics, stack arity and control behavior.

use std::fmt;

/// A single EVM opcode byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Opcode(pub u8);

#[derive(Clone, Copy)]
struct Info {
    name: &'static str,
    pops: u8,
    pushes: u8,
}

const fn op(name: &'static str, pops: u8, pushes: u8) -> Option<Info> {
    Some(Info { name, pops, pushes })
}

#[rustfmt::skip]
const PUSH_NAMES: [&str; 33] = [
    "PUSH0", "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9",
    "PUSH10", "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18",
    "PUSH19", "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27",
    "PUSH28", "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
#[rustfmt::skip]
const DUP_NAMES: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11",
    "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
];
#[rustfmt::skip]
const SWAP_NAMES: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10",
    "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG_NAMES: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

const fn info(byte: u8) -> Option<Info> {
    match byte {
        0x00 => op("STOP", 0, 0),
        0x01 => op("ADD", 2, 1),
        0x02 => op("MUL", 2, 1),
        0x03 => op("SUB", 2, 1),
        0x04 => op("DIV", 2, 1),
        0x05 => op("SDIV", 2, 1),
        0x06 => op("MOD", 2, 1),
        0x07 => op("SMOD", 2, 1),
        0x08 => op("ADDMOD", 3, 1),
        0x09 => op("MULMOD", 3, 1),
        0x0a => op("EXP", 2, 1),
        0x0b => op("SIGNEXTEND", 2, 1),
        0x10 => op("LT", 2, 1),
        0x11 => op("GT", 2, 1),
        0x12 => op("SLT", 2, 1),
        0x13 => op("SGT", 2, 1),
        0x14 => op("EQ", 2, 1),
        0x15 => op("ISZERO", 1, 1),
        0x16 => op("AND", 2, 1),
        0x17 => op("OR", 2, 1),
        0x18 => op("XOR", 2, 1),
        0x19 => op("NOT", 1, 1),
        0x1a => op("BYTE", 2, 1),
        0x1b => op("SHL", 2, 1),
        0x1c => op("SHR", 2, 1),
        0x1d => op("SAR", 2, 1),
        0x20 => op("KECCAK256", 2, 1),
        0x30 => op("ADDRESS", 0, 1),
        0x31 => op("BALANCE", 1, 1),
        0x32 => op("ORIGIN", 0, 1),
        0x33 => op("CALLER", 0, 1),
        0x34 => op("CALLVALUE", 0, 1),
        0x35 => op("CALLDATALOAD", 1, 1),
        0x36 => op("CALLDATASIZE", 0, 1),
        0x37 => op("CALLDATACOPY", 3, 0),
        0x38 => op("CODESIZE", 0, 1),
        0x39 => op("CODECOPY", 3, 0),
        0x3a => op("GASPRICE", 0, 1),
        0x3b => op("EXTCODESIZE", 1, 1),
        0x3c => op("EXTCODECOPY", 4, 0),
        0x3d => op("RETURNDATASIZE", 0, 1),
        0x3e => op("RETURNDATACOPY", 3, 0),
        0x3f => op("EXTCODEHASH", 1, 1),
        0x40 => op("BLOCKHASH", 1, 1),
        0x41 => op("COINBASE", 0, 1),
        0x42 => op("TIMESTAMP", 0, 1),
        0x43 => op("NUMBER", 0, 1),
        0x44 => op("PREVRANDAO", 0, 1),
        0x45 => op("GASLIMIT", 0, 1),
        0x46 => op("CHAINID", 0, 1),
        0x47 => op("SELFBALANCE", 0, 1),
        0x48 => op("BASEFEE", 0, 1),
        0x49 => op("BLOBHASH", 1, 1),
        0x4a => op("BLOBBASEFEE", 0, 1),
        0x50 => op("POP", 1, 0),
        0x51 => op("MLOAD", 1, 1),
        0x52 => op("MSTORE", 2, 0),
        0x53 => op("MSTORE8", 2, 0),
        0x54 => op("SLOAD", 1, 1),
        0x55 => op("SSTORE", 2, 0),
        0x56 => op("JUMP", 1, 0),
        0x57 => op("JUMPI", 2, 0),
        0x58 => op("PC", 0, 1),
        0x59 => op("MSIZE", 0, 1),
        0x5a => op("GAS", 0, 1),
        0x5b => op("JUMPDEST", 0, 0),
        0x5c => op("TLOAD", 1, 1),
        0x5d => op("TSTORE", 2, 0),
        0x5e => op("MCOPY", 3, 0),
        0x5f..=0x7f => op(PUSH_NAMES[(byte - 0x5f) as usize], 0, 1),
        // DUPn reads n slots and leaves n + 1; SWAPn reads n + 1 and leaves n + 1.
        0x80..=0x8f => op(DUP_NAMES[(byte - 0x80) as usize], byte - 0x7f, byte - 0x7e),
        0x90..=0x9f => op(SWAP_NAMES[(byte - 0x90) as usize], byte - 0x8e, byte - 0x8e),
        0xa0..=0xa4 => op(LOG_NAMES[(byte - 0xa0) as usize], byte - 0xa0 + 2, 0),
        0xf0 => op("CREATE", 3, 1),
        0xf1 => op("CALL", 7, 1),
        0xf2 => op("CALLCODE", 7, 1),
        0xf3 => op("RETURN", 2, 0),
        0xf4 => op("DELEGATECALL", 6, 1),
        0xf5 => op("CREATE2", 4, 1),
        0xfa => op("STATICCALL", 6, 1),
        0xfd => op("REVERT", 2, 0),
        0xfe => op("INVALID", 0, 0),
        0xff => op("SELFDESTRUCT", 1, 0),
        _ => None,
    }
}

impl Opcode {
    pub const STOP: Opcode = Opcode(0x00);
    pub const ADD: Opcode = Opcode(0x01);
    pub const MUL: Opcode = Opcode(0x02);
    pub const SUB: Opcode = Opcode(0x03);
    pub const DIV: Opcode = Opcode(0x04);
    pub const SDIV: Opcode = Opcode(0x05);
    pub const MOD: Opcode = Opcode(0x06);
    pub const SMOD: Opcode = Opcode(0x07);
    pub const ADDMOD: Opcode = Opcode(0x08);
    pub const MULMOD: Opcode = Opcode(0x09);
    pub const EXP: Opcode = Opcode(0x0a);
    pub const SIGNEXTEND: Opcode = Opcode(0x0b);
    pub const LT: Opcode = Opcode(0x10);
    pub const GT: Opcode = Opcode(0x11);
    pub const SLT: Opcode = Opcode(0x12);
    pub const SGT: Opcode = Opcode(0x13);
    pub const EQ: Opcode = Opcode(0x14);
    pub const ISZERO: Opcode = Opcode(0x15);
    pub const AND: Opcode = Opcode(0x16);
    pub const OR: Opcode = Opcode(0x17);
    pub const XOR: Opcode = Opcode(0x18);
    pub const NOT: Opcode = Opcode(0x19);
    pub const BYTE: Opcode = Opcode(0x1a);
    pub const SHL: Opcode = Opcode(0x1b);
    pub const SHR: Opcode = Opcode(0x1c);
    pub const SAR: Opcode = Opcode(0x1d);
    pub const CALLER: Opcode = Opcode(0x33);
    pub const CALLVALUE: Opcode = Opcode(0x34);
    pub const CALLDATALOAD: Opcode = Opcode(0x35);
    pub const CALLDATASIZE: Opcode = Opcode(0x36);
    pub const CALLDATACOPY: Opcode = Opcode(0x37);
    pub const POP: Opcode = Opcode(0x50);
    pub const MLOAD: Opcode = Opcode(0x51);
    pub const MSTORE: Opcode = Opcode(0x52);
    pub const MSTORE8: Opcode = Opcode(0x53);
    pub const SLOAD: Opcode = Opcode(0x54);
    pub const SSTORE: Opcode = Opcode(0x55);
    pub const JUMP: Opcode = Opcode(0x56);
    pub const JUMPI: Opcode = Opcode(0x57);
    pub const PC: Opcode = Opcode(0x58);
    pub const MSIZE: Opcode = Opcode(0x59);
    pub const JUMPDEST: Opcode = Opcode(0x5b);
    pub const TLOAD: Opcode = Opcode(0x5c);
    pub const TSTORE: Opcode = Opcode(0x5d);
    pub const PUSH0: Opcode = Opcode(0x5f);
    pub const PUSH1: Opcode = Opcode(0x60);
    pub const PUSH2: Opcode = Opcode(0x61);
    pub const PUSH4: Opcode = Opcode(0x63);
    pub const PUSH32: Opcode = Opcode(0x7f);
    pub const DUP1: Opcode = Opcode(0x80);
    pub const SWAP1: Opcode = Opcode(0x90);
    pub const RETURN: Opcode = Opcode(0xf3);
    pub const REVERT: Opcode = Opcode(0xfd);
    pub const INVALID: Opcode = Opcode(0xfe);
    pub const SELFDESTRUCT: Opcode = Opcode(0xff);

    /// `PUSHn` for `n` in `0..=32`.
    pub fn push(n: usize) -> Opcode {
        assert!(n <= 32, "PUSH{n} does not exist");
        Opcode(0x5f + n as u8)
    }

    /// `DUPn` for `n` in `1..=16`.
    pub fn dup(n: usize) -> Opcode {
        assert!((1..=16).contains(&n), "DUP{n} does not exist");
        Opcode(0x7f + n as u8)
    }

    /// `SWAPn` for `n` in `1..=16`.
    pub fn swap(n: usize) -> Opcode {
        assert!((1..=16).contains(&n), "SWAP{n} does not exist");
        Opcode(0x8f + n as u8)
    }

    pub fn is_defined(self) -> bool {
        info(self.0).is_some()
    }

    /// Mnemonic; undefined bytes render as `INVALID`.
    pub fn name(self) -> &'static str {
        info(self.0).map_or("INVALID", |i| i.name)
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        (0..=255u8).map(Opcode).find(|op| op.is_defined() && op.name() == name)
    }

    pub fn stack_pops(self) -> usize {
        info(self.0).map_or(0, |i| i.pops as usize)
    }

    pub fn stack_pushes(self) -> usize {
        info(self.0).map_or(0, |i| i.pushes as usize)
    }

    pub fn is_push(self) -> bool {
        (0x5f..=0x7f).contains(&self.0)
    }

    /// Number of immediate bytes following the opcode.
    pub fn immediate_size(self) -> usize {
        if self.is_push() {
            (self.0 - 0x5f) as usize
        } else {
            0
        }
    }

    /// `Some(n)` for `DUPn`.
    pub fn dup_depth(self) -> Option<usize> {
        (0x80..=0x8f).contains(&self.0).then(|| (self.0 - 0x7f) as usize)
    }

    /// `Some(n)` for `SWAPn`.
    pub fn swap_depth(self) -> Option<usize> {
        (0x90..=0x9f).contains(&self.0).then(|| (self.0 - 0x8f) as usize)
    }

    /// Opcodes that end execution. Undefined bytes behave like `INVALID`.
    pub fn is_halt(self) -> bool {
        !self.is_defined()
            || matches!(self, Opcode::STOP | Opcode::RETURN | Opcode::REVERT | Opcode::INVALID | Opcode::SELFDESTRUCT)
    }

    pub fn is_jump(self) -> bool {
        self == Opcode::JUMP || self == Opcode::JUMPI
    }

    /// Pure stack motion: `POP`, `DUPn`, `SWAPn`.
    pub fn is_stack_shuffle(self) -> bool {
        self == Opcode::POP || self.dup_depth().is_some() || self.swap_depth().is_some()
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
