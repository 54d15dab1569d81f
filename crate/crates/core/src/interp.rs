//! Concrete block-by-block EVM execution used as a control-flow oracle.

use std::collections::{BTreeMap, BTreeSet};

use ruint::aliases::U256;
use thiserror::Error;

use crate::bytecode::{BlockId, BytecodeProgram, Instruction, Terminator};
use crate::opcode::Opcode as Op;

pub const DEFAULT_MAX_STEPS: u64 = 100_000;
/// Largest number of valuations [`enumerate_edges`] accepts.
pub const MAX_VALUATIONS: usize = 10_000;

const STACK_LIMIT: usize = 1024;
const MEMORY_LIMIT: usize = 1 << 20;

/// Concrete environment for one run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnvValuation {
    pub calldata: Vec<u8>,
    pub storage: BTreeMap<U256, U256>,
    /// Result of every environment read that is not modeled.
    pub env_default: U256,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Halt {
    Stop,
    Return,
    Revert,
    Invalid,
    OutOfSteps,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub visits: Vec<BlockId>,
    pub halted: Halt,
    /// Instructions executed.
    pub step_count: u64,
}

impl Trace {
    pub fn edges(&self) -> impl Iterator<Item = (BlockId, BlockId)> + '_ {
        self.visits.windows(2).map(|w| (w[0], w[1]))
    }
}

struct Machine<'a> {
    env: &'a EnvValuation,
    stack: Vec<U256>,
    memory: Vec<u8>,
    storage: BTreeMap<U256, U256>,
    transient: BTreeMap<U256, U256>,
}

enum Flow {
    Next,
    Jump(U256),
    JumpIf(U256, bool),
    Halt(Halt),
}

fn bool_word(b: bool) -> U256 {
    if b {
        U256::from(1)
    } else {
        U256::ZERO
    }
}

fn is_negative(x: U256) -> bool {
    x.bit(255)
}

fn negate(x: U256) -> U256 {
    (!x).wrapping_add(U256::from(1))
}

fn abs(x: U256) -> U256 {
    if is_negative(x) {
        negate(x)
    } else {
        x
    }
}

fn sdiv(a: U256, b: U256) -> U256 {
    if b.is_zero() {
        return U256::ZERO;
    }
    let q = abs(a) / abs(b);
    if is_negative(a) != is_negative(b) {
        negate(q)
    } else {
        q
    }
}

fn smod(a: U256, b: U256) -> U256 {
    if b.is_zero() {
        return U256::ZERO;
    }
    let r = abs(a) % abs(b);
    if is_negative(a) {
        negate(r)
    } else {
        r
    }
}

fn slt(a: U256, b: U256) -> bool {
    match (is_negative(a), is_negative(b)) {
        (true, false) => true,
        (false, true) => false,
        _ => a < b,
    }
}

fn sar(shift: U256, value: U256) -> U256 {
    let neg = is_negative(value);
    match usize::try_from(shift) {
        Ok(s) if s < 256 => {
            let shifted = value >> s;
            if neg && s > 0 {
                shifted | (U256::MAX << (256 - s))
            } else {
                shifted
            }
        }
        _ => {
            if neg {
                U256::MAX
            } else {
                U256::ZERO
            }
        }
    }
}

fn signextend(b: U256, x: U256) -> U256 {
    match usize::try_from(b) {
        Ok(b) if b < 31 => {
            let bit = 8 * b + 7;
            let mask = (U256::from(1) << (bit + 1)) - U256::from(1);
            if x.bit(bit) {
                x | !mask
            } else {
                x & mask
            }
        }
        _ => x,
    }
}

fn byte_of(i: U256, x: U256) -> U256 {
    match usize::try_from(i) {
        Ok(i) if i < 32 => U256::from(x.to_be_bytes::<32>()[i]),
        _ => U256::ZERO,
    }
}

fn shift_amount(s: U256) -> Option<usize> {
    usize::try_from(s).ok().filter(|s| *s < 256)
}

impl Machine<'_> {
    fn calldata_word(&self, offset: U256) -> U256 {
        let mut buf = [0u8; 32];
        if let Ok(off) = usize::try_from(offset) {
            for (i, b) in buf.iter_mut().enumerate() {
                if let Some(v) = off.checked_add(i).and_then(|p| self.env.calldata.get(p)) {
                    *b = *v;
                }
            }
        }
        U256::from_be_bytes(buf)
    }

    /// Grows memory to cover `[offset, offset + len)`; `None` past the limit.
    fn touch(&mut self, offset: U256, len: usize) -> Option<usize> {
        let off = usize::try_from(offset).ok()?;
        let end = off.checked_add(len)?;
        if end > MEMORY_LIMIT {
            return None;
        }
        if end > self.memory.len() {
            self.memory.resize(end.div_ceil(32) * 32, 0);
        }
        Some(off)
    }

    fn step(&mut self, ins: &Instruction, pc: u32) -> Flow {
        let op = ins.opcode;
        if self.stack.len() < op.stack_pops() {
            return Flow::Halt(Halt::Invalid);
        }
        if self.stack.len() - op.stack_pops() + op.stack_pushes() > STACK_LIMIT {
            return Flow::Halt(Halt::Invalid);
        }
        if let Some(v) = ins.pushed_value {
            self.stack.push(v);
            return Flow::Next;
        }
        if let Some(n) = op.dup_depth() {
            let v = self.stack[self.stack.len() - n];
            self.stack.push(v);
            return Flow::Next;
        }
        if let Some(n) = op.swap_depth() {
            let top = self.stack.len() - 1;
            self.stack.swap(top, top - n);
            return Flow::Next;
        }
        let args: Vec<U256> = (0..op.stack_pops()).map(|_| self.stack.pop().unwrap()).collect();
        let a = |i: usize| args[i];
        let result = match op {
            Op::STOP => return Flow::Halt(Halt::Stop),
            Op::RETURN => return Flow::Halt(Halt::Return),
            Op::REVERT => return Flow::Halt(Halt::Revert),
            Op::SELFDESTRUCT => return Flow::Halt(Halt::Stop),
            Op::JUMP => return Flow::Jump(a(0)),
            Op::JUMPI => return Flow::JumpIf(a(0), !a(1).is_zero()),
            Op::JUMPDEST | Op::POP => return Flow::Next,
            Op::ADD => a(0).wrapping_add(a(1)),
            Op::MUL => a(0).wrapping_mul(a(1)),
            Op::SUB => a(0).wrapping_sub(a(1)),
            Op::DIV => a(0).checked_div(a(1)).unwrap_or(U256::ZERO),
            Op::SDIV => sdiv(a(0), a(1)),
            Op::MOD => a(0).checked_rem(a(1)).unwrap_or(U256::ZERO),
            Op::SMOD => smod(a(0), a(1)),
            Op::ADDMOD => a(0).add_mod(a(1), a(2)),
            Op::MULMOD => a(0).mul_mod(a(1), a(2)),
            Op::EXP => a(0).wrapping_pow(a(1)),
            Op::SIGNEXTEND => signextend(a(0), a(1)),
            Op::LT => bool_word(a(0) < a(1)),
            Op::GT => bool_word(a(0) > a(1)),
            Op::SLT => bool_word(slt(a(0), a(1))),
            Op::SGT => bool_word(slt(a(1), a(0))),
            Op::EQ => bool_word(a(0) == a(1)),
            Op::ISZERO => bool_word(a(0).is_zero()),
            Op::AND => a(0) & a(1),
            Op::OR => a(0) | a(1),
            Op::XOR => a(0) ^ a(1),
            Op::NOT => !a(0),
            Op::BYTE => byte_of(a(0), a(1)),
            Op::SHL => shift_amount(a(0)).map_or(U256::ZERO, |s| a(1) << s),
            Op::SHR => shift_amount(a(0)).map_or(U256::ZERO, |s| a(1) >> s),
            Op::SAR => sar(a(0), a(1)),
            Op::CALLDATALOAD => self.calldata_word(a(0)),
            Op::CALLDATASIZE => U256::from(self.env.calldata.len()),
            Op::CALLDATACOPY => {
                let Ok(len) = usize::try_from(a(2)) else { return Flow::Halt(Halt::Invalid) };
                let Some(dest) = self.touch(a(0), len) else { return Flow::Halt(Halt::Invalid) };
                let src = usize::try_from(a(1)).unwrap_or(usize::MAX);
                for i in 0..len {
                    let byte = src.checked_add(i).and_then(|p| self.env.calldata.get(p)).copied();
                    self.memory[dest + i] = byte.unwrap_or(0);
                }
                return Flow::Next;
            }
            Op::SLOAD => self.storage.get(&a(0)).copied().unwrap_or(U256::ZERO),
            Op::SSTORE => {
                self.storage.insert(a(0), a(1));
                return Flow::Next;
            }
            Op::TLOAD => self.transient.get(&a(0)).copied().unwrap_or(U256::ZERO),
            Op::TSTORE => {
                self.transient.insert(a(0), a(1));
                return Flow::Next;
            }
            Op::MLOAD => {
                let Some(off) = self.touch(a(0), 32) else { return Flow::Halt(Halt::Invalid) };
                U256::from_be_slice(&self.memory[off..off + 32])
            }
            Op::MSTORE => {
                let Some(off) = self.touch(a(0), 32) else { return Flow::Halt(Halt::Invalid) };
                self.memory[off..off + 32].copy_from_slice(&a(1).to_be_bytes::<32>());
                return Flow::Next;
            }
            Op::MSTORE8 => {
                let Some(off) = self.touch(a(0), 1) else { return Flow::Halt(Halt::Invalid) };
                self.memory[off] = a(1).to_be_bytes::<32>()[31];
                return Flow::Next;
            }
            Op::MSIZE => U256::from(self.memory.len()),
            Op::PC => U256::from(pc),
            _ if op.is_halt() => return Flow::Halt(Halt::Invalid),
            _ => {
                if op.stack_pushes() == 0 {
                    return Flow::Next;
                }
                self.env.env_default
            }
        };
        self.stack.push(result);
        Flow::Next
    }
}

/// Runs `program` from block 0 until it halts or `max_steps` instructions
/// have executed. Cloned blocks execute like the block they were copied
/// from; `PC` reports the original offset.
pub fn concrete_execute(program: &BytecodeProgram, env: &EnvValuation, max_steps: u64) -> Trace {
    assert!(max_steps >= 1);
    let mut m = Machine {
        env,
        stack: Vec::new(),
        memory: Vec::new(),
        storage: env.storage.clone(),
        transient: BTreeMap::new(),
    };
    let mut visits = Vec::new();
    let mut steps = 0u64;
    let mut current = BlockId(0);
    let Some(_) = program.block(current) else {
        return Trace { visits, halted: Halt::Stop, step_count: 0 };
    };
    loop {
        let block = &program.blocks[&current];
        visits.push(current);
        let mut next = None;
        for ins in &block.instructions {
            if steps >= max_steps {
                return Trace { visits, halted: Halt::OutOfSteps, step_count: steps };
            }
            steps += 1;
            let original_pc = ins.pc - block.id.0 + block.origin().0;
            match m.step(ins, original_pc) {
                Flow::Next => {}
                Flow::Halt(h) => return Trace { visits, halted: h, step_count: steps },
                Flow::Jump(t) => next = Some(t),
                Flow::JumpIf(t, taken) => {
                    if taken {
                        next = Some(t);
                    }
                }
            }
        }
        current = match next {
            Some(target) => match BlockId::from_value(target).filter(|id| program.is_valid_target(*id)) {
                Some(id) => id,
                None => return Trace { visits, halted: Halt::Invalid, step_count: steps },
            },
            None => match (block.terminator, block.fallthrough) {
                (Terminator::Jump, _) | (Terminator::Halt, _) => unreachable!("jump or halt did not transfer"),
                (_, Some(ft)) => ft,
                (_, None) => return Trace { visits, halted: Halt::Stop, step_count: steps },
            },
        };
    }
}

/// Small candidate sets for each environment read a test cares about.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnvSets {
    /// 32-byte calldata words written at the given byte offsets.
    pub calldata_words: Vec<(usize, Vec<U256>)>,
    pub storage: Vec<(U256, Vec<U256>)>,
    pub env_defaults: Vec<U256>,
}

impl EnvSets {
    pub fn valuation_count(&self) -> usize {
        let mut n: usize = 1;
        let sizes = self
            .calldata_words
            .iter()
            .map(|(_, v)| v.len())
            .chain(self.storage.iter().map(|(_, v)| v.len()))
            .chain(std::iter::once(self.env_defaults.len().max(1)));
        for s in sizes {
            n = n.saturating_mul(s);
        }
        n
    }

    /// Every valuation in the Cartesian product, in a fixed order.
    pub fn valuations(&self) -> Vec<EnvValuation> {
        let defaults = if self.env_defaults.is_empty() { vec![U256::ZERO] } else { self.env_defaults.clone() };
        let calldata_len = self.calldata_words.iter().map(|(off, _)| off + 32).max().unwrap_or(0);
        let mut out = vec![EnvValuation { calldata: vec![0; calldata_len], ..Default::default() }];
        for (off, values) in &self.calldata_words {
            out = out
                .into_iter()
                .flat_map(|env| {
                    values.iter().map(move |v| {
                        let mut env = env.clone();
                        env.calldata[*off..off + 32].copy_from_slice(&v.to_be_bytes::<32>());
                        env
                    })
                })
                .collect();
        }
        for (key, values) in &self.storage {
            out = out
                .into_iter()
                .flat_map(|env| {
                    values.iter().map(move |v| {
                        let mut env = env.clone();
                        env.storage.insert(*key, *v);
                        env
                    })
                })
                .collect();
        }
        out.into_iter()
            .flat_map(|env| defaults.iter().map(move |d| EnvValuation { env_default: *d, ..env.clone() }))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnumerateError {
    #[error("{count} valuations exceed the limit of {MAX_VALUATIONS}")]
    TooManyValuations { count: usize },
}

/// Union of consecutive-visit pairs over every valuation in `env_sets`.
pub fn enumerate_edges(
    program: &BytecodeProgram,
    env_sets: &EnvSets,
    max_steps: u64,
) -> Result<BTreeSet<(BlockId, BlockId)>, EnumerateError> {
    let count = env_sets.valuation_count();
    if count > MAX_VALUATIONS {
        return Err(EnumerateError::TooManyValuations { count });
    }
    let mut edges = BTreeSet::new();
    for env in env_sets.valuations() {
        edges.extend(concrete_execute(program, &env, max_steps).edges());
    }
    Ok(edges)
}
