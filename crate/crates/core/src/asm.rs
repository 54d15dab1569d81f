//! A tiny label-aware EVM assembler for building test programs and corpora.

use std::collections::BTreeMap;

use ruint::aliases::U256;

use crate::opcode::Opcode;

#[derive(Clone, Debug)]
enum Item {
    Op(Opcode),
    Push { width: usize, value: U256 },
    PushLabel(String),
    Label(String),
    Org(u32),
}

/// Builder for bytecode. Labels are two-byte `PUSH2` references; `label`
/// emits a `JUMPDEST` at the labelled offset, `mark` names the current offset
/// without emitting anything.
#[derive(Clone, Debug, Default)]
pub struct Asm {
    items: Vec<Item>,
}

impl Asm {
    pub fn new() -> Asm {
        Asm::default()
    }

    pub fn op(mut self, op: Opcode) -> Asm {
        self.items.push(Item::Op(op));
        self
    }

    pub fn ops(mut self, ops: &[Opcode]) -> Asm {
        self.items.extend(ops.iter().map(|o| Item::Op(*o)));
        self
    }

    /// `PUSH1`..`PUSH8` with the smallest width that fits (`PUSH1 0` for zero).
    pub fn push(self, value: u64) -> Asm {
        let width = ((64 - value.leading_zeros()) as usize).div_ceil(8).max(1);
        self.push_n(width, U256::from(value))
    }

    pub fn push_n(mut self, width: usize, value: U256) -> Asm {
        assert!((1..=32).contains(&width));
        assert!(value.bit_len() <= width * 8, "{value:#x} does not fit in PUSH{width}");
        self.items.push(Item::Push { width, value });
        self
    }

    pub fn push0(self) -> Asm {
        self.op(Opcode::PUSH0)
    }

    pub fn push_label(mut self, name: &str) -> Asm {
        self.items.push(Item::PushLabel(name.to_string()));
        self
    }

    /// `JUMPDEST` named `name`.
    pub fn label(mut self, name: &str) -> Asm {
        self.items.push(Item::Label(name.to_string()));
        self.op(Opcode::JUMPDEST)
    }

    pub fn mark(mut self, name: &str) -> Asm {
        self.items.push(Item::Label(name.to_string()));
        self
    }

    /// Pads with `INVALID` up to `offset`.
    pub fn org(mut self, offset: u32) -> Asm {
        self.items.push(Item::Org(offset));
        self
    }

    pub fn stop(self) -> Asm {
        self.op(Opcode::STOP)
    }

    pub fn jump_to(self, name: &str) -> Asm {
        self.push_label(name).op(Opcode::JUMP)
    }

    pub fn append(mut self, other: Asm) -> Asm {
        self.items.extend(other.items);
        self
    }

    fn layout(&self) -> BTreeMap<String, u32> {
        let mut labels = BTreeMap::new();
        let mut pc = 0u32;
        for item in &self.items {
            match item {
                Item::Op(_) => pc += 1,
                Item::Push { width, .. } => pc += 1 + *width as u32,
                Item::PushLabel(_) => pc += 3,
                Item::Label(name) => {
                    let prev = labels.insert(name.clone(), pc);
                    assert!(prev.is_none(), "label {name} defined twice");
                }
                Item::Org(target) => {
                    assert!(*target >= pc, "org {target:#x} is behind pc {pc:#x}");
                    pc = *target;
                }
            }
        }
        labels
    }

    pub fn labels(&self) -> BTreeMap<String, u32> {
        self.layout()
    }

    pub fn assemble(&self) -> Vec<u8> {
        let labels = self.layout();
        let mut out = Vec::new();
        for item in &self.items {
            match item {
                Item::Op(op) => {
                    assert!(op.immediate_size() == 0, "use push_n for {op}");
                    out.push(op.0);
                }
                Item::Push { width, value } => {
                    out.push(Opcode::push(*width).0);
                    out.extend_from_slice(&value.to_be_bytes::<32>()[32 - width..]);
                }
                Item::PushLabel(name) => {
                    let target = *labels.get(name).unwrap_or_else(|| panic!("undefined label {name}"));
                    assert!(target <= 0xffff);
                    out.push(Opcode::PUSH2.0);
                    out.extend_from_slice(&(target as u16).to_be_bytes());
                }
                Item::Label(_) => {}
                Item::Org(target) => out.resize(*target as usize, Opcode::INVALID.0),
            }
        }
        out
    }
}
