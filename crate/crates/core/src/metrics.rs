//! Precision and completeness counts for one lifted contract.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisState, StopCondition};
use crate::bytecode::BlockId;
use crate::tac::{TacBlockKind, TacProgram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub polymorphic_jump_target: u64,
    pub unresolved_operand: u64,
    pub unstructured_control_flow: u64,
    pub missing_ir_block: u64,
    pub missing_control_flow: u64,
    pub stop_condition: StopCondition,
}

impl MetricsReport {
    pub fn compute(state: &AnalysisState, tac: &TacProgram) -> MetricsReport {
        let (polymorphic_jump_target, unresolved_operand, unstructured_control_flow) = precision_metrics(state, tac);
        let (missing_ir_block, missing_control_flow) = completeness_metrics(state, tac);
        MetricsReport {
            polymorphic_jump_target,
            unresolved_operand,
            unstructured_control_flow,
            missing_ir_block,
            missing_control_flow,
            stop_condition: state.stop_condition,
        }
    }

    /// `(name, count)` for the five counters, in report order.
    pub fn counts(&self) -> [(&'static str, u64); 5] {
        [
            ("polymorphic_jump_target", self.polymorphic_jump_target),
            ("unresolved_operand", self.unresolved_operand),
            ("unstructured_control_flow", self.unstructured_control_flow),
            ("missing_ir_block", self.missing_ir_block),
            ("missing_control_flow", self.missing_control_flow),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in self.counts() {
            writeln!(f, "{name}: {n}")?;
        }
        let stop = serde_json::to_value(self.stop_condition).expect("stop condition serializes");
        writeln!(f, "stop_condition: {}", stop.as_str().unwrap_or_default())
    }
}

/// `(polymorphic_jump_target, unresolved_operand, unstructured_control_flow)`.
pub fn precision_metrics(state: &AnalysisState, tac: &TacProgram) -> (u64, u64, u64) {
    let polymorphic = state.targets_by_pair().values().filter(|t| t.len() >= 2).count() as u64;
    let unresolved = tac.statements().filter(|s| s.has_unresolved()).count() as u64;
    let unstructured = tac
        .blocks
        .iter()
        .filter(|b| match b.kind {
            TacBlockKind::Jump | TacBlockKind::CallPrivate => b.succs.len() > 1,
            TacBlockKind::ConditionalJump => b.succs.len() > 2,
            _ => false,
        })
        .count() as u64;
    (polymorphic, unresolved, unstructured)
}

/// `(missing_ir_block, missing_control_flow)`.
pub fn completeness_metrics(state: &AnalysisState, tac: &TacProgram) -> (u64, u64) {
    let mut reachable: BTreeSet<BlockId> = BTreeSet::from([BlockId(0)]);
    for (_, a, _, b) in &state.global_block_edge {
        reachable.insert(*a);
        reachable.insert(*b);
    }
    let missing_blocks = reachable.iter().filter(|b| tac.block(**b).is_none()).count() as u64;
    let missing_flow = tac
        .blocks
        .iter()
        .filter(|b| match b.kind {
            TacBlockKind::Jump | TacBlockKind::CallPrivate | TacBlockKind::Fallthrough => b.succs.is_empty(),
            TacBlockKind::ConditionalJump => b.succs.len() < 2,
            TacBlockKind::Halt | TacBlockKind::ReturnPrivate => false,
        })
        .count() as u64;
    (missing_blocks, missing_flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Asm;
    use crate::corpus::fixtures;
    use crate::opcode::Opcode;
    use crate::pipeline::{run_pipeline, PipelineConfig};

    fn metrics(code: &[u8], cfg: &PipelineConfig) -> MetricsReport {
        run_pipeline(code, cfg).metrics
    }

    #[test]
    fn chained_calls_with_and_without_cloning() {
        let fx = fixtures::chained_calls();
        let with = metrics(&fx.code, &PipelineConfig::default());
        assert_eq!((with.polymorphic_jump_target, with.unresolved_operand, with.unstructured_control_flow), (0, 0, 0));
        let without = metrics(&fx.code, &PipelineConfig { cloning: false, ..Default::default() });
        assert!(without.unstructured_control_flow >= 1);
    }

    #[test]
    fn straight_line_is_clean() {
        let code = Asm::new().push(1).push0().op(Opcode::SSTORE).stop().assemble();
        let m = metrics(&code, &PipelineConfig::default());
        assert_eq!(m.counts().iter().map(|(_, n)| n).sum::<u64>(), 0);
        assert_eq!(m.stop_condition, StopCondition::Fixpoint);
    }

    #[test]
    fn dropped_block_is_missing() {
        let fx = fixtures::inconsistent_operand();
        assert_eq!(metrics(&fx.code, &PipelineConfig::default()).missing_ir_block, 1);
    }

    #[test]
    fn underflowing_block_is_missing() {
        let mut asm = Asm::new().jump_to("deep").label("deep");
        for _ in 0..1100 {
            asm = asm.op(Opcode::ADD);
        }
        let m = metrics(&asm.stop().assemble(), &PipelineConfig::default());
        assert_eq!(m.missing_ir_block, 1);
        assert_eq!(m.missing_control_flow, 0);
    }

    #[test]
    fn calldata_jumpi_misses_an_edge() {
        let fx = fixtures::calldata_jumpi();
        assert!(metrics(&fx.code, &PipelineConfig::default()).missing_control_flow >= 1);
    }

    #[test]
    fn json_has_six_fields() {
        let fx = fixtures::chained_calls();
        let m = metrics(&fx.code, &PipelineConfig::default());
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        assert_eq!(v["stop_condition"], "fixpoint");
        assert_eq!(serde_json::from_value::<MetricsReport>(v).unwrap(), m);
        assert!(m.to_string().ends_with("stop_condition: fixpoint\n"));
    }
}
