//! End-to-end driver: decode, summarize, clone, pre-analyze, analyze, lift
//! and measure one contract, or a directory of contracts in parallel.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{analyze, AnalysisLimits, AnalysisState, StopCondition, DEFAULT_MAX_STACK_DEPTH};
use crate::bytecode::{parse_input, BytecodeProgram};
use crate::cloning::{apply_cloning, select_clone_candidates, CloneInstance};
use crate::context::{ConfirmedFacts, Scheme, SchemeConfig};
use crate::lift::lift;
use crate::local::{summarize_program, PatternFacts, Summaries};
use crate::metrics::MetricsReport;
use crate::preanalysis::{confirm, run_preanalysis, DEFAULT_PREANALYSIS_LIMIT};
use crate::tac::TacProgram;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(200);

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scheme: Scheme,
    /// Context depth; `None` picks the scheme's default.
    pub depth: Option<usize>,
    pub cloning: bool,
    pub preanalysis: bool,
    pub preanalysis_limit: u64,
    /// Wall-clock budget shared by the pre-analysis and the main analysis.
    pub timeout: Option<Duration>,
    /// Fact budget of the main analysis.
    pub fact_limit: Option<u64>,
    pub max_stack_depth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scheme: Scheme::Shrinking,
            depth: None,
            cloning: true,
            preanalysis: true,
            preanalysis_limit: DEFAULT_PREANALYSIS_LIMIT,
            timeout: Some(DEFAULT_TIMEOUT),
            fact_limit: None,
            max_stack_depth: DEFAULT_MAX_STACK_DEPTH,
        }
    }
}

impl PipelineConfig {
    /// Scheme used by the main analysis. Shrinking picks up important edges
    /// whenever the pre-analysis runs.
    pub fn scheme_config(&self) -> SchemeConfig {
        let scheme = match self.scheme {
            Scheme::Shrinking if self.preanalysis => Scheme::ShrinkingImportantEdges,
            s => s,
        };
        SchemeConfig::new(scheme, self.depth.unwrap_or(self.scheme.default_depth()))
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// The program after cloning.
    pub program: BytecodeProgram,
    pub clones: Vec<CloneInstance>,
    pub summaries: Summaries,
    pub candidates: PatternFacts,
    pub facts: ConfirmedFacts,
    pub state: AnalysisState,
    pub tac: TacProgram,
    pub metrics: MetricsReport,
}

pub fn run_pipeline(code: &[u8], cfg: &PipelineConfig) -> PipelineOutput {
    let deadline = cfg.timeout.map(|t| Instant::now() + t);
    let limits = AnalysisLimits { fact_limit: None, deadline, max_stack_depth: cfg.max_stack_depth };
    let original = BytecodeProgram::from_code(code);

    let (program, clones) = if cfg.cloning {
        let summaries = summarize_program(&original);
        let clones = select_clone_candidates(&original, &PatternFacts::detect(&original, &summaries));
        let cloned = apply_cloning(&original, &clones).expect("clone candidates come from the program itself");
        (cloned, clones)
    } else {
        (original, Vec::new())
    };
    let summaries = summarize_program(&program);
    let candidates = PatternFacts::detect(&program, &summaries);
    let scheme = cfg.scheme_config();

    let facts = if cfg.preanalysis {
        let pre = run_preanalysis(&program, &summaries, &candidates, scheme.depth, cfg.preanalysis_limit, &limits);
        confirm(&candidates, &summaries, &pre)
    } else {
        ConfirmedFacts::from_candidates(&candidates)
    };
    let limits = AnalysisLimits { fact_limit: cfg.fact_limit, ..limits };
    let state = analyze(&program, &summaries, &facts, &scheme, &limits);
    let tac = lift(&state, &program, &summaries, &facts);
    let metrics = MetricsReport::compute(&state, &tac);
    PipelineOutput { program, clones, summaries, candidates, facts, state, tac, metrics }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractResult {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricAggregate {
    /// Sum over contracts.
    pub total: u64,
    /// Contracts with a non-zero count.
    pub contracts: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub contracts: u64,
    pub failed: u64,
    pub timeouts: u64,
    pub fact_limits: u64,
    pub timeout_percent: f64,
    pub polymorphic_jump_target: MetricAggregate,
    pub unresolved_operand: MetricAggregate,
    pub unstructured_control_flow: MetricAggregate,
    pub missing_ir_block: MetricAggregate,
    pub missing_control_flow: MetricAggregate,
}

impl Aggregate {
    pub fn from_results(results: &[ContractResult]) -> Aggregate {
        let mut a = Aggregate { contracts: results.len() as u64, ..Default::default() };
        for r in results {
            let Some(m) = &r.metrics else {
                a.failed += 1;
                continue;
            };
            match m.stop_condition {
                StopCondition::Timeout => a.timeouts += 1,
                StopCondition::FactLimit => a.fact_limits += 1,
                StopCondition::Fixpoint => {}
            }
            for (name, n) in m.counts() {
                let slot = a.metric_mut(name);
                slot.total += n;
                slot.contracts += u64::from(n > 0);
            }
        }
        if a.contracts > 0 {
            a.timeout_percent = 100.0 * a.timeouts as f64 / a.contracts as f64;
        }
        a
    }

    fn metric_mut(&mut self, name: &str) -> &mut MetricAggregate {
        match name {
            "polymorphic_jump_target" => &mut self.polymorphic_jump_target,
            "unresolved_operand" => &mut self.unresolved_operand,
            "unstructured_control_flow" => &mut self.unstructured_control_flow,
            "missing_ir_block" => &mut self.missing_ir_block,
            "missing_control_flow" => &mut self.missing_control_flow,
            _ => unreachable!("unknown metric {name}"),
        }
    }

    pub fn metrics(&self) -> [(&'static str, &MetricAggregate); 5] {
        [
            ("polymorphic_jump_target", &self.polymorphic_jump_target),
            ("unresolved_operand", &self.unresolved_operand),
            ("unstructured_control_flow", &self.unstructured_control_flow),
            ("missing_ir_block", &self.missing_ir_block),
            ("missing_control_flow", &self.missing_control_flow),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "contracts: {}", self.contracts).unwrap();
        writeln!(out, "failed: {}", self.failed).unwrap();
        writeln!(out, "timeouts: {} ({:.1}%)", self.timeouts, self.timeout_percent).unwrap();
        writeln!(out, "fact_limits: {}", self.fact_limits).unwrap();
        for (name, m) in self.metrics() {
            writeln!(out, "{name}: {} in {} contracts", m.total, m.contracts).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchReport {
    pub results: Vec<ContractResult>,
    pub aggregate: Aggregate,
}

impl BatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Regular, non-hidden files of `dir`, sorted by name.
pub fn list_contracts(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if entry.file_type()?.is_file() && !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a contract file: `.bin` files are raw bytecode, others go through
/// [`parse_input`].
pub fn read_contract(path: &Path) -> Result<Vec<u8>, String> {
    let content = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let raw = path.extension().is_some_and(|e| e == "bin");
    if raw && !content.is_empty() {
        return Ok(content);
    }
    parse_input(&content).map_err(|e| format!("{}: {e}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run_one(path: &Path, cfg: &PipelineConfig, out_dir: Option<&Path>) -> ContractResult {
    let name = stem(path);
    let result = read_contract(path).and_then(|code| {
        let out = run_pipeline(&code, cfg);
        if let Some(dir) = out_dir {
            write_atomic(&dir.join(format!("{name}.tac")), out.tac.render().as_bytes())
                .and_then(|_| write_atomic(&dir.join(format!("{name}.json")), out.metrics.to_json().as_bytes()))
                .map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        Ok(out.metrics)
    });
    match result {
        Ok(m) => ContractResult { name, metrics: Some(m), error: None },
        Err(e) => ContractResult { name, metrics: None, error: Some(e) },
    }
}

/// Runs every contract in `dir` on `jobs` threads. Per-contract failures
/// are recorded in the report.
pub fn run_batch(dir: &Path, cfg: &PipelineConfig, jobs: usize, out_dir: Option<&Path>) -> io::Result<BatchReport> {
    let files = list_contracts(dir)?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(io::Error::other)?;
    let mut results: Vec<ContractResult> =
        pool.install(|| files.par_iter().map(|f| run_one(f, cfg, out_dir)).collect());
    results.sort_by(|a, b| a.name.cmp(&b.name));
    let aggregate = Aggregate::from_results(&results);
    Ok(BatchReport { results, aggregate })
}

/// The four ablation configurations derived from `base`.
pub fn sweep_configs(base: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    vec![
        ("default", base.clone()),
        ("no-shrinking", PipelineConfig { scheme: Scheme::Transactional, depth: None, ..base.clone() }),
        ("no-cloning", PipelineConfig { cloning: false, ..base.clone() }),
        ("no-preanalysis", PipelineConfig { preanalysis: false, ..base.clone() }),
    ]
}

/// One row per configuration with timeout counts and metric sums.
pub fn render_sweep(rows: &[(&str, Aggregate)]) -> String {
    let mut out = String::new();
    let header =
        ["config", "contracts", "timeouts", "polymorphic", "unresolved", "unstructured", "missing_ir", "missing_cf"];
    writeln!(out, "{:<16}{}", header[0], header[1..].iter().map(|h| format!("{h:>14}")).collect::<String>()).unwrap();
    for (name, a) in rows {
        let mut cols = vec![a.contracts, a.timeouts];
        cols.extend(a.metrics().iter().map(|(_, m)| m.total));
        writeln!(out, "{name:<16}{}", cols.iter().map(|c| format!("{c:>14}")).collect::<String>()).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{fixtures, generate};

    #[test]
    fn scheme_selection() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.scheme_config(), SchemeConfig::new(Scheme::ShrinkingImportantEdges, 20));
        let cfg = PipelineConfig { preanalysis: false, ..Default::default() };
        assert_eq!(cfg.scheme_config().scheme, Scheme::Shrinking);
        let cfg = PipelineConfig { scheme: Scheme::Transactional, ..Default::default() };
        assert_eq!(cfg.scheme_config(), SchemeConfig::new(Scheme::Transactional, 8));
    }

    #[test]
    fn chained_calls_are_cloned() {
        let fx = fixtures::chained_calls();
        let out = run_pipeline(&fx.code, &PipelineConfig::default());
        assert_eq!(out.clones.len(), 4);
        assert_eq!(out.metrics.stop_condition, StopCondition::Fixpoint);
        assert_eq!(out.program.code, fx.code);
    }

    #[test]
    fn pipeline_is_deterministic() {
        for seed in 0..20 {
            let g = generate::random_program(seed);
            let a = run_pipeline(&g.code, &PipelineConfig::default());
            let b = run_pipeline(&g.code, &PipelineConfig::default());
            assert_eq!(a.tac.render(), b.tac.render());
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn zero_timeout_times_out() {
        let fx = fixtures::chained_calls();
        let cfg = PipelineConfig { timeout: Some(Duration::ZERO), ..Default::default() };
        assert_eq!(run_pipeline(&fx.code, &cfg).metrics.stop_condition, StopCondition::Timeout);
    }

    #[test]
    fn aggregate_counts() {
        let m = |poly, stop| MetricsReport {
            polymorphic_jump_target: poly,
            unresolved_operand: 0,
            unstructured_control_flow: 1,
            missing_ir_block: 0,
            missing_control_flow: 0,
            stop_condition: stop,
        };
        let results = vec![
            ContractResult { name: "a".into(), metrics: Some(m(3, StopCondition::Fixpoint)), error: None },
            ContractResult { name: "b".into(), metrics: Some(m(0, StopCondition::Timeout)), error: None },
            ContractResult { name: "c".into(), metrics: None, error: Some("bad".into()) },
            ContractResult { name: "d".into(), metrics: Some(m(2, StopCondition::Fixpoint)), error: None },
        ];
        let a = Aggregate::from_results(&results);
        assert_eq!((a.contracts, a.failed, a.timeouts), (4, 1, 1));
        assert_eq!(a.timeout_percent, 25.0);
        assert_eq!(a.polymorphic_jump_target, MetricAggregate { total: 5, contracts: 2 });
        assert_eq!(a.unstructured_control_flow, MetricAggregate { total: 3, contracts: 3 });
    }

    #[test]
    fn empty_batch() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_batch(dir.path(), &PipelineConfig::default(), 2, None).unwrap();
        assert!(report.results.is_empty());
        assert_eq!(report.aggregate, Aggregate::default());
    }

    #[test]
    fn batch_records_failures_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("good.hex"), hex::encode(fixtures::simple_call().code)).unwrap();
        fs::write(dir.path().join("bad.hex"), "0x60zz").unwrap();
        let report = run_batch(dir.path(), &PipelineConfig::default(), 2, Some(out.path())).unwrap();
        let names: Vec<&str> = report.results.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, vec!["bad", "good"]);
        assert!(report.results[0].error.as_ref().unwrap().contains("offset 4"));
        assert!(out.path().join("good.tac").exists());
        assert!(out.path().join("good.json").exists());
        assert_eq!(report.aggregate.failed, 1);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn sweep_table_shape() {
        let configs = sweep_configs(&PipelineConfig::default());
        assert_eq!(configs.len(), 4);
        assert_eq!(configs[1].1.scheme_config(), SchemeConfig::new(Scheme::Transactional, 8));
        let rows: Vec<(&str, Aggregate)> = configs.iter().map(|(n, _)| (*n, Aggregate::default())).collect();
        let table = render_sweep(&rows);
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().nth(2).unwrap().starts_with("no-shrinking"));
    }
}
