// SPDX-License-Identifier: Apache-2.0

//! End-to-end stages shared by the command line and the benchmarks.

use std::collections::BTreeMap;

use crate::bytecode::{execute, parse_flat_module, FlatModule, Label, OpcodeTrace, ParseError};
use crate::config::{ConfigError, RunConfig};
use crate::machine::{
    apply_layout_mitigation, apply_mitigation, build_layout, default_handler_specs, synthesize_trace, LayoutError,
    MemoryLayout, SynthError,
};
use crate::matcher::{match_trace, ChannelSet, MatchOutcome};
use crate::metrics::{classify_outcomes, MetricsError, RecallReport};
use crate::preprocess::{preprocess, PreprocessError, PreprocessParams, PreprocessReport, Preprocessed};
use crate::profiler::{build_fingerprints, dedup_db, split_by_marker, DbMeta, FingerprintDb, ProfileError};
use crate::trace::{FrameNumber, SideChannelTrace};
use crate::workloads::WorkloadRegistry;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("cannot read module {path}: {source}")]
    ModuleRead {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("module: {0}")]
    Parse(#[from] ParseError),
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("synthesis: {0}")]
    Synth(#[from] SynthError),
    #[error("preprocessing: {0}")]
    Preprocess(#[from] PreprocessError),
    #[error("profiling: {0}")]
    Profile(#[from] ProfileError),
    #[error("evaluation: {0}")]
    Metrics(#[from] MetricsError),
    #[error("segment at event {0} has no ground-truth label")]
    UnlabeledSegment(usize),
    #[error("trace carries no ground truth")]
    NoTruth,
}

/// Noise seed used for the profiling run of a given run seed.
pub fn profile_seed(rng_seed: u64) -> u64 {
    rng_seed ^ 0x9e37_79b9_7f4a_7c15
}

fn workload_source(name: &str, scale: Option<u32>, seed: u64) -> Result<String, PipelineError> {
    let reg = WorkloadRegistry::builtin();
    let w = reg
        .get(name)
        .ok_or_else(|| PipelineError::UnknownWorkload(name.to_string()))?;
    Ok(w.generate(seed, scale.unwrap_or_else(|| w.default_scale())))
}

/// Source text of the victim module.
pub fn victim_source(cfg: &RunConfig) -> Result<String, PipelineError> {
    match &cfg.run.module_path {
        Some(path) => std::fs::read_to_string(path).map_err(|source| PipelineError::ModuleRead {
            path: path.clone(),
            source,
        }),
        None => workload_source(&cfg.run.workload, cfg.run.scale, cfg.run.rng_seed),
    }
}

pub fn victim_module(cfg: &RunConfig) -> Result<FlatModule, PipelineError> {
    Ok(parse_flat_module(&victim_source(cfg)?)?)
}

/// The victim's layout, with the layout part of the mitigation applied.
pub fn victim_layout(cfg: &RunConfig) -> Result<MemoryLayout, PipelineError> {
    let mut layout = build_layout(cfg.run.layout_seed, &cfg.layout)?;
    apply_layout_mitigation(&mut layout, &cfg.mitigation, cfg.run.rng_seed);
    Ok(layout)
}

#[derive(Clone, Debug)]
pub struct Synthesized {
    pub layout: MemoryLayout,
    pub opcodes: OpcodeTrace,
    pub trace: SideChannelTrace,
}

/// Runs `module` and synthesizes the trace of the (possibly hardened) victim.
pub fn synth_victim(cfg: &RunConfig, module: &FlatModule, markers: bool) -> Result<Synthesized, PipelineError> {
    let layout = victim_layout(cfg)?;
    let opcodes = execute(module, cfg.run.step_limit);
    if let Some(trap) = &opcodes.trap {
        log::warn!("victim trapped: {trap}");
    }
    let specs = apply_mitigation(&default_handler_specs(), &cfg.mitigation, cfg.run.rng_seed);
    let trace = synthesize_trace(&opcodes, &layout, &specs, &cfg.noise, markers)?;
    Ok(Synthesized { layout, opcodes, trace })
}

/// Marker-instrumented trace of the profiling workload on the stock
/// interpreter, same layout and noise model as the victim.
pub fn synth_profiling(cfg: &RunConfig) -> Result<Synthesized, PipelineError> {
    let layout = build_layout(cfg.run.layout_seed, &cfg.layout)?;
    let src = workload_source(&cfg.run.profile_workload, cfg.run.profile_scale, cfg.run.rng_seed)?;
    let module = parse_flat_module(&src)?;
    let opcodes = execute(&module, cfg.run.step_limit);
    let noise = cfg.noise.clone().with_seed(profile_seed(cfg.run.rng_seed));
    let trace = synthesize_trace(&opcodes, &layout, &default_handler_specs(), &noise, true)?;
    Ok(Synthesized { layout, opcodes, trace })
}

/// Builds a deduplicated database from a marker-instrumented trace.
pub fn build_db(
    trace: &SideChannelTrace,
    marker_page: FrameNumber,
    params: &PreprocessParams,
    meta: DbMeta,
) -> Result<(FingerprintDb, PreprocessReport), PipelineError> {
    if trace.truth.is_none() {
        return Err(PipelineError::NoTruth);
    }
    let pre = preprocess(trace, params)?;
    let labeled = split_by_marker(&pre.filtered, marker_page, pre.report.optable_page, &pre.report.stack_pages)?;
    let raw = build_fingerprints(&labeled, meta)?;
    Ok((dedup_db(&raw), pre.report))
}

/// Profiles the configured workload into a database.
pub fn profile(cfg: &RunConfig) -> Result<FingerprintDb, PipelineError> {
    let prof = synth_profiling(cfg)?;
    let meta = DbMeta {
        layout_seed: cfg.run.layout_seed,
        config_hash: cfg.hash(),
        params: BTreeMap::from([
            ("workload".to_string(), cfg.run.profile_workload.clone()),
            ("retired_opcodes".to_string(), prof.opcodes.len().to_string()),
            ("noise_seed".to_string(), profile_seed(cfg.run.rng_seed).to_string()),
        ]),
    };
    let (db, _) = build_db(&prof.trace, prof.layout.marker_page, &cfg.preprocess, meta)?;
    Ok(db)
}

#[derive(Clone, Debug)]
pub struct Attack {
    pub pre: Preprocessed,
    pub outcomes: Vec<MatchOutcome>,
}

pub fn attack(
    trace: &SideChannelTrace,
    db: &FingerprintDb,
    params: &PreprocessParams,
    channels: &ChannelSet,
) -> Result<Attack, PipelineError> {
    let pre = preprocess(trace, params)?;
    let outcomes = match_trace(&pre.segments, db, channels);
    Ok(Attack { pre, outcomes })
}

/// Ground-truth label of every segment, looked up by its first event.
pub fn segment_truth(pre: &Preprocessed) -> Result<Vec<Label>, PipelineError> {
    let truth = pre.filtered.truth.as_ref().ok_or(PipelineError::NoTruth)?;
    let by_index: BTreeMap<usize, Label> = truth.iter().map(|b| (b.index, b.label)).collect();
    pre.segments
        .iter()
        .map(|s| {
            by_index
                .get(&s.start_index)
                .copied()
                .ok_or(PipelineError::UnlabeledSegment(s.start_index))
        })
        .collect()
}

pub fn evaluate(attack: &Attack, strict: bool) -> Result<RecallReport, PipelineError> {
    let truth = segment_truth(&attack.pre)?;
    let predicted: Vec<Label> = attack.outcomes.iter().map(|o| o.predicted).collect();
    Ok(classify_outcomes(&predicted, &truth, strict)?)
}

/// One benchmark run: profile, synthesize the victim, attack it once per
/// channel set and score each attack.
#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub retired: usize,
    pub unique_opcodes: usize,
    pub preprocess: PreprocessReport,
    pub reports: Vec<(ChannelSet, RecallReport)>,
}

pub fn run_benchmark(cfg: &RunConfig, channel_sets: &[ChannelSet]) -> Result<BenchmarkResult, PipelineError> {
    let db = profile(cfg)?;
    run_benchmark_with_db(cfg, &db, channel_sets)
}

pub fn run_benchmark_with_db(
    cfg: &RunConfig,
    db: &FingerprintDb,
    channel_sets: &[ChannelSet],
) -> Result<BenchmarkResult, PipelineError> {
    let module = victim_module(cfg)?;
    let victim = synth_victim(cfg, &module, false)?;
    let pre = preprocess(&victim.trace, &cfg.preprocess)?;
    let truth = segment_truth(&pre)?;
    let mut reports = Vec::with_capacity(channel_sets.len());
    for set in channel_sets {
        let outcomes = match_trace(&pre.segments, db, set);
        let predicted: Vec<Label> = outcomes.iter().map(|o| o.predicted).collect();
        reports.push((set.clone(), classify_outcomes(&predicted, &truth, cfg.run.strict)?));
    }
    Ok(BenchmarkResult {
        retired: victim.opcodes.len(),
        unique_opcodes: victim.opcodes.unique_opcodes().len(),
        preprocess: pre.report,
        reports,
    })
}
