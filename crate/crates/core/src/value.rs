//! Abstract stack values shared by the local and global analyses.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use ruint::aliases::U256;

use crate::bytecode::BlockId;

/// Identity of an abstract value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueSite {
    /// Value produced by the statement at this pc.
    Def(u32),
    /// Placeholder for a stack position at block entry.
    EntrySlot { block: BlockId, slot: u32 },
}

/// A value definition site, optionally carrying a known constant.
///
/// Equality, ordering and hashing look only at the site: the constant is a
/// function of the site.
#[derive(Clone, Copy, Debug)]
pub struct AbstractValue {
    pub site: ValueSite,
    pub constant: Option<U256>,
}

impl AbstractValue {
    pub fn def(pc: u32, constant: Option<U256>) -> AbstractValue {
        AbstractValue { site: ValueSite::Def(pc), constant }
    }

    pub fn entry_slot(block: BlockId, slot: u32) -> AbstractValue {
        AbstractValue { site: ValueSite::EntrySlot { block, slot }, constant: None }
    }

    pub fn def_pc(&self) -> Option<u32> {
        match self.site {
            ValueSite::Def(pc) => Some(pc),
            ValueSite::EntrySlot { .. } => None,
        }
    }

    /// TAC variable name, e.g. `v5a`.
    pub fn name(&self) -> String {
        match self.site {
            ValueSite::Def(pc) => format!("v{pc:x}"),
            ValueSite::EntrySlot { block, slot } => format!("v{:x}_in{slot}", block.0),
        }
    }
}

impl PartialEq for AbstractValue {
    fn eq(&self, other: &Self) -> bool {
        self.site == other.site
    }
}

impl Eq for AbstractValue {}

impl PartialOrd for AbstractValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AbstractValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.site.cmp(&other.site)
    }
}

impl Hash for AbstractValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.site.hash(state)
    }
}

impl fmt::Display for AbstractValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())?;
        if let Some(c) = self.constant {
            write!(f, "({c:#x})")?;
        }
        Ok(())
    }
}

/// A stack value as seen from inside a single block: either the `k`-th
/// entry slot (0 = top) or a concrete value definition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SymValue {
    Entry(usize),
    Value(AbstractValue),
}

impl SymValue {
    pub fn constant(&self) -> Option<U256> {
        match self {
            SymValue::Entry(_) => None,
            SymValue::Value(v) => v.constant,
        }
    }

    pub fn def_pc(&self) -> Option<u32> {
        match self {
            SymValue::Entry(_) => None,
            SymValue::Value(v) => v.def_pc(),
        }
    }
}
