//! Context-sensitive EVM bytecode lifter.
//!
//! The pipeline decodes bytecode into basic blocks, summarizes each block,
//! clones reused continuation blocks, confirms call patterns with a bounded
//! pre-analysis, runs a context-sensitive fixpoint over (context, block)
//! pairs and finally emits three-address code with precision and
//! completeness metrics.

pub mod analysis;
pub mod asm;
pub mod bytecode;
pub mod cloning;
pub mod context;
pub mod corpus;
pub mod interp;
pub mod lift;
pub mod local;
pub mod metrics;
pub mod opcode;
pub mod pipeline;
pub mod preanalysis;
pub mod tac;
pub mod value;

pub use ruint::aliases::U256;

pub use bytecode::{BasicBlock, BlockId, BytecodeProgram, Instruction, Terminator};
pub use context::{ConfirmedFacts, Context, Scheme, SchemeConfig};
pub use opcode::Opcode;
