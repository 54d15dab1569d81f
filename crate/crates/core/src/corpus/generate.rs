//! Seeded generators for test corpora.
//!
//! Programs are built from the shapes compilers emit for internal calls:
//! plain calls with a pushed continuation, chained calls through a shared
//! continuation block, returns through a shared stack-balancing block,
//! selector dispatch, conditional branches on calldata and arithmetic
//! filler. Calls only go from lower- to higher-numbered functions, so
//! every generated program terminates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruint::aliases::U256;

use crate::asm::Asm;
use crate::bytecode::BytecodeProgram;
use crate::interp::EnvSets;
use crate::opcode::Opcode as Op;

/// Largest block count produced by [`random_program`].
pub const MAX_BLOCKS: usize = 40;

/// Offset of the first branch-condition calldata word.
const COND_BASE: u32 = 0x24;
const COND_SLOTS: u32 = 6;

#[derive(Clone, Debug)]
pub struct GeneratedProgram {
    pub seed: u64,
    pub code: Vec<u8>,
    /// Environment values worth enumerating: every selector plus a miss,
    /// and both outcomes of every branch condition.
    pub env: EnvSets,
}

#[derive(Clone, Debug)]
struct Func {
    label: String,
    arity: usize,
    shared_epilogue: bool,
}

struct Builder {
    rng: ChaCha8Rng,
    asm: Asm,
    next_label: usize,
    funcs: Vec<Func>,
    cond_offsets: Vec<u32>,
    selectors: Vec<u32>,
    balancers: BTreeMap<usize, String>,
    uses_panic: bool,
    nesting: usize,
}

impl Builder {
    fn new(seed: u64) -> Builder {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            asm: Asm::new(),
            next_label: 0,
            funcs: Vec::new(),
            cond_offsets: Vec::new(),
            selectors: Vec::new(),
            balancers: BTreeMap::new(),
            uses_panic: false,
            nesting: 0,
        }
    }

    fn emit(&mut self, f: impl FnOnce(Asm) -> Asm) {
        self.asm = f(std::mem::take(&mut self.asm));
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.next_label += 1;
        format!("{prefix}{}", self.next_label)
    }

    fn small_const(&mut self) -> u64 {
        self.rng.gen_range(1..=0xff)
    }

    fn cond_offset(&mut self) -> u32 {
        let off = COND_BASE + 0x20 * self.rng.gen_range(0..COND_SLOTS);
        if !self.cond_offsets.contains(&off) {
            self.cond_offsets.push(off);
        }
        off
    }

    fn arith(&mut self) {
        let c = self.small_const();
        let op = *[Op::ADD, Op::XOR, Op::OR, Op::SUB, Op::MUL, Op::AND].choose(&mut self.rng).unwrap();
        self.emit(|a| a.push(c).op(op));
    }

    fn store(&mut self) {
        let key = self.rng.gen_range(0..8);
        self.emit(|a| a.op(Op::DUP1).push(key).op(Op::SSTORE));
    }

    fn guard(&mut self) {
        let off = self.cond_offset();
        self.uses_panic = true;
        self.emit(|a| a.push(off as u64).op(Op::CALLDATALOAD).push_label("panic").op(Op::JUMPI));
    }

    fn callees(&self, current: Option<usize>, arity: Option<usize>) -> Vec<usize> {
        let first = current.map_or(0, |c| c + 1);
        (first..self.funcs.len()).filter(|&j| arity.is_none_or(|a| self.funcs[j].arity == a)).collect()
    }

    /// Calls function `j` with the accumulator as first argument and adds
    /// the result into the accumulator.
    fn call_fn(&mut self, j: usize) {
        let f = self.funcs[j].clone();
        let cont = self.fresh("k");
        self.emit(|a| a.push_label(&cont));
        for _ in 1..f.arity {
            let c = self.small_const();
            self.emit(|a| a.push(c));
        }
        if f.arity > 0 {
            self.emit(|a| a.op(Op::dup(f.arity + 1)));
        }
        self.emit(|a| a.jump_to(&f.label).label(&cont).op(Op::ADD));
    }

    fn call(&mut self, current: Option<usize>) {
        let options = self.callees(current, None);
        match options.choose(&mut self.rng) {
            Some(&j) => self.call_fn(j),
            None => self.arith(),
        }
    }

    /// `f(f(f(acc, b1), b2), b3)` through one shared continuation block.
    fn chain(&mut self, current: Option<usize>) {
        let options = self.callees(current, Some(2));
        let Some(&j) = options.choose(&mut self.rng) else { return self.call(current) };
        let target = self.funcs[j].label.clone();
        let len = self.rng.gen_range(2..=3usize);
        let fin = self.fresh("fin");
        let shared = self.fresh("shared");
        self.emit(|a| a.push_label(&fin));
        for _ in 1..len {
            let b = self.small_const();
            self.emit(|a| a.push(b).push_label(&shared));
        }
        let b1 = self.small_const();
        self.emit(|a| {
            a.push(b1).op(Op::dup(2 * len + 1)).jump_to(&target).label(&shared).jump_to(&target).label(&fin).op(Op::ADD)
        });
    }

    fn branch(&mut self, current: Option<usize>) {
        let off = self.cond_offset();
        let taken = self.fresh("t");
        let join = self.fresh("j");
        self.emit(|a| a.push(off as u64).op(Op::CALLDATALOAD).push_label(&taken).op(Op::JUMPI));
        self.nesting += 1;
        self.arm(current);
        self.emit(|a| a.jump_to(&join).label(&taken));
        self.arm(current);
        self.nesting -= 1;
        self.emit(|a| a.label(&join));
    }

    fn arm(&mut self, current: Option<usize>) {
        if self.nesting < 2 && self.rng.gen_bool(0.4) {
            self.call(current);
        } else {
            self.arith();
        }
    }

    fn segment(&mut self, current: Option<usize>) {
        match self.rng.gen_range(0..12) {
            0..=2 => self.arith(),
            3 => self.store(),
            4 | 5 => self.branch(current),
            6 => self.guard(),
            7..=9 => self.call(current),
            _ => self.chain(current),
        }
    }

    fn body(&mut self, current: Option<usize>, segments: usize) {
        for _ in 0..segments {
            self.segment(current);
        }
    }

    /// Stack on entry: args (first on top), continuation. The accumulator
    /// starts as a copy of the first argument.
    fn function(&mut self, i: usize, segments: usize) {
        let f = self.funcs[i].clone();
        self.emit(|a| a.label(&f.label));
        if f.arity > 0 {
            self.emit(|a| a.op(Op::DUP1));
        } else {
            let c = self.small_const();
            self.emit(|a| a.push(c));
        }
        self.body(Some(i), segments);
        if f.shared_epilogue {
            let bal = self.balancers.entry(f.arity).or_insert_with(|| format!("bal{}", f.arity)).clone();
            self.emit(|a| a.jump_to(&bal));
        } else {
            self.emit(|a| epilogue(a, f.arity));
        }
    }

    fn finish_main(&mut self) {
        self.emit(|a| a.push0().op(Op::SSTORE).stop());
    }

    fn dispatch(&mut self, publics: usize) -> Vec<String> {
        self.emit(|a| a.push0().op(Op::CALLDATALOAD).push(0xe0).op(Op::SHR));
        let mut labels = Vec::new();
        for _ in 0..publics {
            let sel: u32 = self.rng.gen_range(0x0100_0000..=u32::MAX);
            let label = self.fresh("pub");
            self.selectors.push(sel);
            self.emit(|a| a.op(Op::DUP1).push_n(4, U256::from(sel)).op(Op::EQ).push_label(&label).op(Op::JUMPI));
            labels.push(label);
        }
        self.emit(|a| a.push0().op(Op::DUP1).op(Op::REVERT));
        labels
    }

    fn tail(&mut self) {
        let balancers: Vec<(usize, String)> = self.balancers.clone().into_iter().collect();
        for (arity, label) in balancers {
            self.emit(|a| epilogue(a.label(&label), arity));
        }
        if self.uses_panic {
            self.emit(|a| a.label("panic").push0().op(Op::DUP1).op(Op::REVERT));
        }
    }

    fn env(&self) -> EnvSets {
        let mut words = Vec::new();
        if !self.selectors.is_empty() {
            let mut sels: Vec<U256> = self.selectors.iter().map(|s| U256::from(*s) << 224).collect();
            sels.push(U256::ZERO);
            words.push((0usize, sels));
        }
        let mut offs = self.cond_offsets.clone();
        offs.sort_unstable();
        for off in offs {
            words.push((off as usize, vec![U256::ZERO, U256::from(1)]));
        }
        EnvSets { calldata_words: words, storage: Vec::new(), env_defaults: vec![U256::ZERO] }
    }
}

/// `SWAP(n+1)` then `SWAP1 POP` per argument: leaves the result below the
/// continuation and jumps to it.
fn epilogue(mut a: Asm, arity: usize) -> Asm {
    a = a.op(Op::swap(arity + 1));
    for _ in 0..arity {
        a = a.op(Op::SWAP1).op(Op::POP);
    }
    a.op(Op::JUMP)
}

fn block_count(code: &[u8]) -> usize {
    BytecodeProgram::from_code(code).blocks.len()
}

fn build_random(seed: u64) -> Builder {
    let mut b = Builder::new(seed);
    let nfuncs = b.rng.gen_range(1..=5);
    for i in 0..nfuncs {
        let arity = b.rng.gen_range(0..=3);
        let shared_epilogue = arity > 0 && b.rng.gen_bool(0.4);
        b.funcs.push(Func { label: format!("f{i}"), arity, shared_epilogue });
    }
    if b.rng.gen_bool(0.6) {
        let publics = b.rng.gen_range(1..=3);
        let labels = b.dispatch(publics);
        for label in labels {
            let c = b.small_const();
            let segments = b.rng.gen_range(1..=3);
            b.emit(|a| a.label(&label).push(c));
            b.body(None, segments);
            b.finish_main();
        }
    } else {
        let c = b.small_const();
        let segments = b.rng.gen_range(1..=4);
        b.emit(|a| a.push(c));
        b.body(None, segments);
        b.finish_main();
    }
    for i in 0..nfuncs {
        let segments = b.rng.gen_range(0..=3);
        b.function(i, segments);
    }
    b.tail();
    b
}

/// A random program of at most [`MAX_BLOCKS`] blocks whose jump targets are
/// all pushed constants or continuations.
pub fn random_program(seed: u64) -> GeneratedProgram {
    for attempt in 0u64.. {
        let b = build_random(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let code = b.asm.assemble();
        if block_count(&code) <= MAX_BLOCKS {
            return GeneratedProgram { seed, code, env: b.env() };
        }
    }
    unreachable!()
}

#[derive(Clone, Copy, Debug)]
pub struct DeepCallShape {
    /// Number of nested function levels.
    pub levels: usize,
    /// Sequential calls each non-leaf function makes to the next level.
    pub fanout: usize,
    /// Public functions, each calling the first level.
    pub publics: usize,
}

fn build_deep(seed: u64, shape: DeepCallShape) -> Builder {
    let mut b = Builder::new(seed);
    for i in 0..shape.levels {
        let shared_epilogue = b.rng.gen_bool(0.3);
        b.funcs.push(Func { label: format!("f{i}"), arity: 1, shared_epilogue });
    }
    let helper = shape.levels;
    b.funcs.push(Func { label: "helper".to_string(), arity: 2, shared_epilogue: false });
    let labels = b.dispatch(shape.publics);
    for label in labels {
        let c = b.small_const();
        b.emit(|a| a.label(&label).push(c));
        let calls = b.rng.gen_range(1..=2);
        for _ in 0..calls {
            b.call_fn(0);
        }
        if b.rng.gen_bool(0.5) {
            b.chain(None);
        }
        b.finish_main();
    }
    b.function(helper, 1);
    for i in 0..shape.levels {
        let f = b.funcs[i].clone();
        b.emit(|a| a.label(&f.label).op(Op::DUP1));
        if i + 1 < shape.levels {
            for _ in 0..shape.fanout {
                b.call_fn(i + 1);
                if b.rng.gen_bool(0.3) {
                    b.arith();
                }
            }
        } else {
            b.arith();
            if b.rng.gen_bool(0.5) {
                b.branch(Some(i));
            }
        }
        if f.shared_epilogue {
            b.balancers.insert(1, "bal1".to_string());
            b.emit(|a| a.jump_to("bal1"));
        } else {
            b.emit(|a| epilogue(a, 1));
        }
    }
    b.tail();
    b
}

/// A program whose call tree is `fanout^levels` paths deep, dispatching
/// from several public functions, some of which also chain calls to a
/// two-argument helper.
pub fn deep_call_program(seed: u64) -> GeneratedProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape =
        DeepCallShape { levels: rng.gen_range(3..=5), fanout: rng.gen_range(2..=4), publics: rng.gen_range(1..=3) };
    deep_call_with_shape(seed, shape)
}

pub fn deep_call_with_shape(seed: u64, shape: DeepCallShape) -> GeneratedProgram {
    let b = build_deep(seed, shape);
    GeneratedProgram { seed, code: b.asm.assemble(), env: b.env() }
}

/// A program whose context count grows exponentially with `levels`,
/// intended to exhaust any practical time budget.
pub fn context_bomb(levels: usize) -> Vec<u8> {
    build_deep(7, DeepCallShape { levels, fanout: 4, publics: 3 }).asm.assemble()
}
