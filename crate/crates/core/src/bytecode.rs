//! Bytecode decoding and basic-block partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ruint::aliases::U256;
use thiserror::Error;

use crate::opcode::Opcode;

/// Block identifier: the byte offset of the block's first instruction, or a
/// synthetic id past the end of the code for cloned blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockId(pub u32);

impl BlockId {
    /// Interprets a 256-bit stack value as a block id, if it fits.
    pub fn from_value(value: U256) -> Option<BlockId> {
        u32::try_from(value).ok().map(BlockId)
    }

    pub fn value(self) -> U256 {
        U256::from(self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    /// Byte offset. Instructions of cloned blocks carry offsets relative to
    /// the clone id so every statement in a program has a distinct pc.
    pub pc: u32,
    pub opcode: Opcode,
    /// Immediate of `PUSH0..PUSH32`; `None` for every other opcode.
    pub pushed_value: Option<U256>,
}

impl Instruction {
    pub fn stack_pops(&self) -> usize {
        self.opcode.stack_pops()
    }

    pub fn stack_pushes(&self) -> usize {
        self.opcode.stack_pushes()
    }

    /// Encoded length in bytes.
    pub fn size(&self) -> u32 {
        1 + self.opcode.immediate_size() as u32
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}: {}", self.pc, self.opcode)?;
        if let Some(v) = self.pushed_value {
            write!(f, " {v:#x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Terminator {
    Jump,
    ConditionalJump,
    Halt,
    Fallthrough,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Instruction>,
    pub terminator: Terminator,
    /// Block entered when execution runs past the end of this one
    /// (`Fallthrough` terminators and the false branch of `JUMPI`).
    pub fallthrough: Option<BlockId>,
    /// For cloned blocks, the block this one was copied from.
    pub clone_of: Option<BlockId>,
}

impl BasicBlock {
    pub fn last(&self) -> &Instruction {
        self.instructions.last().expect("blocks are never empty")
    }

    /// Offset one past the last byte of the block.
    pub fn end_pc(&self) -> u32 {
        let last = self.last();
        last.pc + last.size()
    }

    pub fn byte_len(&self) -> u32 {
        self.end_pc() - self.id.0
    }

    pub fn starts_with_jumpdest(&self) -> bool {
        self.instructions[0].opcode == Opcode::JUMPDEST
    }

    /// Block this one was derived from (itself for original blocks).
    pub fn origin(&self) -> BlockId {
        self.clone_of.unwrap_or(self.id)
    }

    pub fn instruction_at(&self, pc: u32) -> Option<&Instruction> {
        self.instructions.iter().find(|i| i.pc == pc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BytecodeProgram {
    pub code: Vec<u8>,
    pub blocks: BTreeMap<BlockId, BasicBlock>,
    pub jumpdests: BTreeSet<BlockId>,
}

impl BytecodeProgram {
    pub fn from_code(code: &[u8]) -> BytecodeProgram {
        let instructions = disassemble(code);
        let mut program = extract_blocks(&instructions);
        program.code = code.to_vec();
        program
    }

    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.get(&id)
    }

    /// Whether a jump to `id` lands on executable code: a `JUMPDEST` of the
    /// original code, or a cloned block.
    pub fn is_valid_target(&self, id: BlockId) -> bool {
        self.jumpdests.contains(&id) || self.blocks.get(&id).is_some_and(|b| b.clone_of.is_some())
    }

    pub fn is_valid_target_value(&self, value: U256) -> bool {
        BlockId::from_value(value).is_some_and(|id| self.is_valid_target(id))
    }

    /// Block containing the instruction at `pc`.
    pub fn block_containing(&self, pc: u32) -> Option<&BasicBlock> {
        self.blocks.range(..=BlockId(pc)).next_back().map(|(_, b)| b).filter(|b| pc < b.end_pc())
    }

    pub fn instruction_at(&self, pc: u32) -> Option<&Instruction> {
        self.block_containing(pc).and_then(|b| b.instruction_at(pc))
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.values().flat_map(|b| b.instructions.iter())
    }

    pub fn original_len(&self) -> u32 {
        self.code.len() as u32
    }
}

/// Decodes `code` into instructions. Total: truncated `PUSH` immediates are
/// zero-padded and undefined bytes decode as halting instructions.
pub fn disassemble(code: &[u8]) -> Vec<Instruction> {
    let mut out = Vec::new();
    let mut pc = 0usize;
    while pc < code.len() {
        let opcode = Opcode(code[pc]);
        let width = opcode.immediate_size();
        let pushed_value = opcode.is_push().then(|| {
            let mut buf = [0u8; 32];
            let avail = code.len().saturating_sub(pc + 1).min(width);
            buf[32 - width..32 - width + avail].copy_from_slice(&code[pc + 1..pc + 1 + avail]);
            U256::from_be_bytes(buf)
        });
        out.push(Instruction { pc: pc as u32, opcode, pushed_value });
        pc += 1 + width;
    }
    out
}

/// Partitions a decoded instruction stream into basic blocks.
pub fn extract_blocks(instructions: &[Instruction]) -> BytecodeProgram {
    let mut groups: Vec<Vec<Instruction>> = Vec::new();
    let mut current: Vec<Instruction> = Vec::new();
    for ins in instructions {
        if ins.opcode == Opcode::JUMPDEST && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
        }
        let ends = ins.opcode.is_jump() || ins.opcode.is_halt();
        current.push(ins.clone());
        if ends {
            groups.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let starts: Vec<BlockId> = groups.iter().map(|g| BlockId(g[0].pc)).collect();
    let mut blocks = BTreeMap::new();
    for (i, instructions) in groups.into_iter().enumerate() {
        let last = instructions.last().unwrap().opcode;
        let terminator = match last {
            Opcode::JUMP => Terminator::Jump,
            Opcode::JUMPI => Terminator::ConditionalJump,
            op if op.is_halt() => Terminator::Halt,
            _ => Terminator::Fallthrough,
        };
        let fallthrough = match terminator {
            Terminator::ConditionalJump | Terminator::Fallthrough => starts.get(i + 1).copied(),
            _ => None,
        };
        let id = starts[i];
        blocks.insert(id, BasicBlock { id, instructions, terminator, fallthrough, clone_of: None });
    }

    let jumpdests = blocks.values().filter(|b| b.starts_with_jumpdest()).map(|b| b.id).collect();
    let code = encode(instructions);
    BytecodeProgram { code, blocks, jumpdests }
}

/// Offsets of `JUMPDEST` bytes that are not `PUSH` immediate data.
pub fn valid_jumpdests(code: &[u8]) -> BTreeSet<BlockId> {
    disassemble(code).into_iter().filter(|i| i.opcode == Opcode::JUMPDEST).map(|i| BlockId(i.pc)).collect()
}

/// Re-encodes instructions to bytes, truncating at the last instruction's
/// declared extent.
fn encode(instructions: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::new();
    for ins in instructions {
        out.push(ins.opcode.0);
        let width = ins.opcode.immediate_size();
        if let Some(v) = ins.pushed_value {
            let bytes = v.to_be_bytes::<32>();
            out.extend_from_slice(&bytes[32 - width..]);
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InputError {
    #[error("invalid hex character {found:?} at offset {offset}")]
    BadHexChar { offset: usize, found: char },
    #[error("hex input has an odd number of digits")]
    OddLength,
    #[error("input is empty")]
    Empty,
}

/// Reads bytecode from file contents. UTF-8 text is hex (optional `0x`
/// prefix, whitespace tolerated); anything else is raw bytecode.
pub fn parse_input(content: &[u8]) -> Result<Vec<u8>, InputError> {
    match std::str::from_utf8(content) {
        Ok(text) => parse_hex(text),
        Err(_) => non_empty(content.to_vec()),
    }
}

pub fn parse_hex(text: &str) -> Result<Vec<u8>, InputError> {
    let trimmed = text.trim_start();
    let lead = text.len() - trimmed.len();
    let (body, body_offset) = match trimmed.strip_prefix("0x").or_else(|| trimmed.strip_prefix("0X")) {
        Some(rest) => (rest, lead + 2),
        None => (trimmed, lead),
    };
    let mut digits = String::with_capacity(body.len());
    for (i, c) in body.char_indices() {
        if c.is_ascii_hexdigit() {
            digits.push(c);
        } else if !c.is_whitespace() {
            return Err(InputError::BadHexChar { offset: body_offset + i, found: c });
        }
    }
    if digits.len() % 2 == 1 {
        return Err(InputError::OddLength);
    }
    non_empty(hex::decode(&digits).expect("validated hex digits"))
}

fn non_empty(bytes: Vec<u8>) -> Result<Vec<u8>, InputError> {
    if bytes.is_empty() {
        Err(InputError::Empty)
    } else {
        Ok(bytes)
    }
}
