// SPDX-License-Identifier: Apache-2.0

//! Subcommand implementations. Every command persists its resolved
//! configuration as `config.toml` in the output directory.

use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::json;

use optrace_core::bytecode::Label;
use optrace_core::config::RunConfig;
use optrace_core::machine::MemoryLayout;
use optrace_core::matcher::{match_trace, read_predictions_csv, write_predictions_csv, Channel, ChannelSet, MatchOutcome};
use optrace_core::metrics::{classify_outcomes, recall, RecallReport};
use optrace_core::pipeline::{self, segment_truth, synth_victim, victim_module};
use optrace_core::preprocess::{preprocess as run_preprocess, PreprocessReport, Preprocessed, Segment};
use optrace_core::profiler::{read_db, write_db, DbMeta, FingerprintDb};
use optrace_core::trace::{
    format_frame, read_segmented_csv, read_trace_csv, read_truth_csv, write_segmented_csv, write_trace_csv,
    write_truth_csv, ArtifactMeta, SideChannelTrace, StepEvent, TruthBoundary, SEGMENTED_HEADER,
};

use crate::artifacts::{
    config_err, csv_artifact, format_err, json_text, parse_frame_arg, precondition, read_input, write_output, Failure,
};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out: PathBuf) -> Result<Self, Failure> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).map_err(config_err)?,
            None => RunConfig::default().resolved(),
        };
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        Ok(Ctx { cfg, out })
    }

    fn meta(&self) -> ArtifactMeta {
        ArtifactMeta {
            config_hash: self.cfg.hash(),
            layout_seed: self.cfg.run.layout_seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Validates the configuration after command-line overrides, creates
    /// the output directory and writes `config.toml` into it.
    fn start(&self) -> Result<(), Failure> {
        self.cfg.validate().map_err(config_err)?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))
            .map_err(precondition)?;
        write_output(&self.path("config.toml"), self.cfg.to_toml().as_bytes())
    }

    fn channels(&self) -> Result<ChannelSet, Failure> {
        self.cfg.channel_set().map_err(config_err)
    }
}

fn read_trace_file(path: &Path) -> Result<(Vec<StepEvent>, Option<ArtifactMeta>), Failure> {
    let text = read_input(path)?;
    let events = read_trace_csv(text.as_bytes())
        .with_context(|| path.display().to_string())
        .map_err(format_err)?;
    Ok((events, ArtifactMeta::from_text(&text)))
}

fn read_truth_file(path: &Path) -> Result<(Vec<TruthBoundary>, Option<ArtifactMeta>), Failure> {
    let text = read_input(path)?;
    let truth = read_truth_csv(text.as_bytes())
        .with_context(|| path.display().to_string())
        .map_err(format_err)?;
    Ok((truth, ArtifactMeta::from_text(&text)))
}

fn read_db_file(path: &Path) -> Result<FingerprintDb, Failure> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(config_err)?;
    read_db(BufReader::new(file))
        .with_context(|| path.display().to_string())
        .map_err(format_err)
}

fn write_db_file(ctx: &Ctx, db: &FingerprintDb) -> Result<(), Failure> {
    let mut buf = Vec::new();
    write_db(&mut buf, db).map_err(precondition)?;
    write_output(&ctx.path("db.jsonl"), &buf)
}

fn frames(pages: &[u64]) -> Vec<String> {
    pages.iter().map(|&p| format_frame(p)).collect()
}

fn layout_json(layout: &MemoryLayout) -> serde_json::Value {
    json!({
        "layout_seed": layout.seed,
        "page_size": layout.page_size,
        "optable_page": format_frame(layout.optable_page),
        "marker_page": format_frame(layout.marker_page),
        "globals_page": format_frame(layout.globals_page),
        "stack_pages": frames(&layout.stack_pages),
        "bytecode_pages": frames(&layout.bytecode_pages),
        "linear_mem_pages": frames(&layout.linear_mem_pages),
        "handler_pages": frames(&layout.handler_frames),
        "other_pages": frames(&layout.other_pages),
    })
}

fn write_trace_artifacts(ctx: &Ctx, trace: &SideChannelTrace, layout: &MemoryLayout) -> Result<(), Failure> {
    let meta = ctx.meta();
    let csv = csv_artifact(&meta, &[], |b| write_trace_csv(b, &trace.events))?;
    write_output(&ctx.path("trace.csv"), &csv)?;
    if let Some(truth) = &trace.truth {
        let csv = csv_artifact(&meta, &[], |b| write_truth_csv(b, truth))?;
        write_output(&ctx.path("truth.csv"), &csv)?;
    }
    write_output(&ctx.path("layout.json"), &json_text(&layout_json(layout)))
}

fn preprocess_json(report: &PreprocessReport, segments: usize) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["segments"] = json!(segments);
    v
}

/// Writes the segmented trace, the preprocessing report and, when the
/// trace carries truth, one truth row per segment.
fn write_preprocess_artifacts(ctx: &Ctx, meta: &ArtifactMeta, pre: &Preprocessed) -> Result<(), Failure> {
    let starts: Vec<usize> = pre.segments.iter().map(|s| s.start_index).collect();
    let csv = csv_artifact(meta, &[], |b| write_segmented_csv(b, &pre.filtered.events, &starts))?;
    write_output(&ctx.path("segmented.csv"), &csv)?;
    write_output(
        &ctx.path("preprocess.json"),
        &json_text(&preprocess_json(&pre.report, pre.segments.len())),
    )?;
    if pre.filtered.truth.is_some() {
        let labels = segment_truth(pre)?;
        let rows: Vec<TruthBoundary> = labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| TruthBoundary { index, label })
            .collect();
        let csv = csv_artifact(meta, &[], |b| write_truth_csv(b, &rows))?;
        write_output(&ctx.path("segment_truth.csv"), &csv)?;
    }
    Ok(())
}

fn print_preprocess(r: &PreprocessReport, segments: usize) {
    let stack: Vec<String> = r.stack_pages.iter().map(|&p| format_frame(p)).collect();
    println!("optable page   {} (confidence {:.4})", format_frame(r.optable_page), r.confidence);
    println!("stack pages    {}", stack.join(" "));
    println!("events removed {}", r.events_removed);
    println!("segments       {segments}");
}

fn report_json(ctx: &Ctx, meta: &ArtifactMeta, channels: &ChannelSet, r: &RecallReport) -> serde_json::Value {
    json!({
        "config_hash": ctx.cfg.hash(),
        "layout_seed": meta.layout_seed,
        "channels": channels.to_string(),
        "strict": r.strict,
        "n": r.n,
        "correct": r.correct,
        "errors": r.errors,
        "misses": r.misses,
        "insertions": r.insertions,
        "recall": r.recall,
    })
}

fn write_report(ctx: &Ctx, meta: &ArtifactMeta, channels: &ChannelSet, r: &RecallReport) -> Result<(), Failure> {
    write_output(&ctx.path("report.json"), &json_text(&report_json(ctx, meta, channels, r)))?;
    let mut csv = Vec::new();
    meta.write_comment(&mut csv).map_err(precondition)?;
    r.write_confusion_csv(&mut csv).map_err(precondition)?;
    write_output(&ctx.path("confusion.csv"), &csv)
}

fn print_report(r: &RecallReport) {
    println!(
        "N={} correct={} E={} M={} I={} recall={:.3}%{}",
        r.n,
        r.correct,
        r.errors,
        r.misses,
        r.insertions,
        r.recall_percent(),
        if r.strict { " (strict)" } else { "" }
    );
}

fn write_predictions(ctx: &Ctx, meta: &ArtifactMeta, channels: &ChannelSet, outcomes: &[MatchOutcome]) -> Result<(), Failure> {
    let extra = [format!("channels={channels}")];
    let csv = csv_artifact(meta, &extra, |b| write_predictions_csv(b, outcomes))?;
    write_output(&ctx.path("predictions.csv"), &csv)
}

pub fn synth(
    mut ctx: Ctx,
    markers: bool,
    module: Option<PathBuf>,
    workload: Option<String>,
    scale: Option<u32>,
) -> Result<(), Failure> {
    if let Some(w) = workload {
        ctx.cfg.run.workload = w;
        ctx.cfg.run.module_path = None;
    }
    if let Some(m) = module {
        ctx.cfg.run.module_path = Some(m);
    }
    if scale.is_some() {
        ctx.cfg.run.scale = scale;
    }
    ctx.start()?;
    let module = victim_module(&ctx.cfg)?;
    let s = synth_victim(&ctx.cfg, &module, markers)?;
    write_trace_artifacts(&ctx, &s.trace, &s.layout)?;
    println!(
        "retired {} opcodes ({} unique), {} events, {} dispatch boundaries",
        s.opcodes.len(),
        s.opcodes.unique_opcodes().len(),
        s.trace.len(),
        s.trace.truth.as_ref().map_or(0, Vec::len)
    );
    if let Some(t) = &s.opcodes.trap {
        println!("module trapped: {t}");
    }
    Ok(())
}

pub fn preprocess(ctx: Ctx, trace: &Path, truth: Option<&Path>) -> Result<(), Failure> {
    ctx.start()?;
    let (events, meta) = read_trace_file(trace)?;
    let meta = meta.unwrap_or_else(|| ctx.meta());
    let truth = truth.map(read_truth_file).transpose()?.map(|t| t.0);
    let trace = SideChannelTrace {
        events,
        truth,
        layout_seed: meta.layout_seed,
    };
    let pre = run_preprocess(&trace, &ctx.cfg.preprocess).map_err(precondition)?;
    write_preprocess_artifacts(&ctx, &meta, &pre)?;
    print_preprocess(&pre.report, pre.segments.len());
    Ok(())
}

fn marker_page_beside(trace: &Path) -> Result<u64, Failure> {
    let path = trace.parent().unwrap_or(Path::new(".")).join("layout.json");
    let text = read_input(&path).map_err(|_| {
        config_err(anyhow!(
            "no --marker-page given and {} is unreadable",
            path.display()
        ))
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| path.display().to_string())
        .map_err(format_err)?;
    let page = v["marker_page"]
        .as_str()
        .ok_or_else(|| format_err(anyhow!("{}: no marker_page", path.display())))?;
    parse_frame_arg(page)
}

pub fn profile(ctx: Ctx, trace: Option<&Path>, truth: Option<&Path>, marker: Option<&str>) -> Result<(), Failure> {
    ctx.start()?;
    let db = match (trace, truth) {
        (Some(trace_path), Some(truth_path)) => {
            let (events, meta) = read_trace_file(trace_path)?;
            let (truth, _) = read_truth_file(truth_path)?;
            let marker_page = match marker {
                Some(m) => parse_frame_arg(m)?,
                None => marker_page_beside(trace_path)?,
            };
            let layout_seed = meta.map_or(ctx.cfg.run.layout_seed, |m| m.layout_seed);
            let trace = SideChannelTrace {
                events,
                truth: Some(truth),
                layout_seed,
            };
            let meta = DbMeta {
                layout_seed,
                config_hash: ctx.cfg.hash(),
                params: [("marker_page".to_string(), format_frame(marker_page))].into(),
            };
            pipeline::build_db(&trace, marker_page, &ctx.cfg.preprocess, meta)?.0
        }
        _ => pipeline::profile(&ctx.cfg)?,
    };
    write_db_file(&ctx, &db)?;
    println!(
        "{} fingerprints for {} labels (support {})",
        db.entries.len(),
        db.labels().len(),
        db.total_support()
    );
    Ok(())
}

fn is_segmented(text: &str) -> bool {
    text.lines()
        .find(|l| !l.starts_with('#'))
        .is_some_and(|l| l.trim_end() == SEGMENTED_HEADER.join(","))
}

pub fn attack(ctx: Ctx, trace: &Path, db: &Path, report: Option<&Path>, channels: Option<&str>) -> Result<(), Failure> {
    let mut ctx = ctx;
    if let Some(c) = channels {
        ctx.cfg.run.channels = c.to_string();
    }
    ctx.start()?;
    let channels = ctx.channels()?;
    let db = read_db_file(db)?;
    let text = read_input(trace)?;
    let meta = ArtifactMeta::from_text(&text).unwrap_or_else(|| ctx.meta());
    let segments: Vec<Segment> = if is_segmented(&text) {
        let (events, starts) = read_segmented_csv(text.as_bytes())
            .with_context(|| trace.display().to_string())
            .map_err(format_err)?;
        let report_path = report
            .map(Path::to_path_buf)
            .unwrap_or_else(|| trace.parent().unwrap_or(Path::new(".")).join("preprocess.json"));
        let r: PreprocessReport = serde_json::from_str(&read_input(&report_path)?)
            .with_context(|| report_path.display().to_string())
            .map_err(format_err)?;
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let e = starts.get(i + 1).copied().unwrap_or(events.len());
                Segment::new(events[s..e].to_vec(), s, r.optable_page, &r.stack_pages)
            })
            .collect()
    } else {
        let events = read_trace_csv(text.as_bytes())
            .with_context(|| trace.display().to_string())
            .map_err(format_err)?;
        let trace = SideChannelTrace {
            events,
            truth: None,
            layout_seed: meta.layout_seed,
        };
        run_preprocess(&trace, &ctx.cfg.preprocess).map_err(precondition)?.segments
    };
    if db.meta.layout_seed != meta.layout_seed {
        log::warn!(
            "database was profiled on layout seed {}, trace uses {}",
            db.meta.layout_seed,
            meta.layout_seed
        );
    }
    let outcomes = match_trace(&segments, &db, &channels);
    let meta = ArtifactMeta {
        config_hash: ctx.cfg.hash(),
        ..meta
    };
    write_predictions(&ctx, &meta, &channels, &outcomes)?;
    let mean = outcomes.iter().map(|o| o.score).sum::<f64>() / outcomes.len().max(1) as f64;
    println!("{} segments matched on {channels}, mean score {mean:.4}", outcomes.len());
    Ok(())
}

pub fn eval(ctx: Ctx, predictions: &Path, truth: &Path, strict: bool, force: bool) -> Result<(), Failure> {
    ctx.start()?;
    let pred_text = read_input(predictions)?;
    let pred_meta = ArtifactMeta::from_text(&pred_text);
    let outcomes = read_predictions_csv(pred_text.as_bytes())
        .with_context(|| predictions.display().to_string())
        .map_err(format_err)?;
    let (truth, truth_meta) = read_truth_file(truth)?;
    if let (Some(p), Some(t)) = (&pred_meta, &truth_meta) {
        if p.layout_seed != t.layout_seed {
            let msg = format!(
                "predictions use layout seed {}, truth uses {}",
                p.layout_seed, t.layout_seed
            );
            if !force {
                return Err(precondition(anyhow!("{msg}; pass --force to compare anyway")));
            }
            log::warn!("{msg}");
        }
    }
    let predicted: Vec<Label> = outcomes.iter().map(|o| o.predicted).collect();
    let labels: Vec<Label> = truth.iter().map(|b| b.label).collect();
    let report = classify_outcomes(&predicted, &labels, strict).map_err(precondition)?;
    let meta = pred_meta.or(truth_meta).unwrap_or_else(|| ctx.meta());
    let channels = pred_text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# channels="))
        .map_or(Ok(ChannelSet::all()), str::parse)
        .map_err(format_err)?;
    write_report(&ctx, &meta, &channels, &report)?;
    print_report(&report);
    Ok(())
}

pub fn eval_counts(ctx: Ctx, counts: &str) -> Result<(), Failure> {
    let parts: Vec<u64> = counts
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| config_err(anyhow!("--counts expects N,E,M,I, got `{counts}`")))?;
    let [n, e, m, i] = parts[..] else {
        return Err(config_err(anyhow!("--counts expects four numbers N,E,M,I")));
    };
    ctx.start()?;
    let r = recall(n, e, m, i).map_err(precondition)?;
    let v = json!({ "n": n, "errors": e, "misses": m, "insertions": i, "recall": r });
    write_output(&ctx.path("report.json"), &json_text(&v))?;
    println!("N={n} E={e} M={m} I={i} recall={:.3}%", r * 100.0);
    Ok(())
}

/// Parses subset flags, dropping duplicates with a warning. No flags means
/// all channels plus every leave-one-out subset.
fn parse_subsets(raw: &[String]) -> Result<Vec<ChannelSet>, Failure> {
    if raw.is_empty() {
        let all = ChannelSet::all();
        let mut v = vec![all.clone()];
        v.extend(Channel::ALL.iter().map(|&c| all.without(c).expect("three channels remain")));
        return Ok(v);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in raw {
        let set: ChannelSet = s
            .parse()
            .with_context(|| format!("channel subset `{s}`"))
            .map_err(config_err)?;
        if seen.insert(set.clone()) {
            out.push(set);
        } else {
            log::warn!("duplicate channel subset `{s}` ignored");
        }
    }
    Ok(out)
}

pub fn ablate(ctx: Ctx, inputs: Option<(PathBuf, PathBuf, PathBuf)>, subsets: &[String], strict: bool) -> Result<(), Failure> {
    let sets = parse_subsets(subsets)?;
    ctx.start()?;
    let (pre, db, meta) = match inputs {
        Some((trace, truth, db)) => {
            let (events, meta) = read_trace_file(&trace)?;
            let (truth, _) = read_truth_file(&truth)?;
            let meta = meta.unwrap_or_else(|| ctx.meta());
            let trace = SideChannelTrace {
                events,
                truth: Some(truth),
                layout_seed: meta.layout_seed,
            };
            let pre = run_preprocess(&trace, &ctx.cfg.preprocess).map_err(precondition)?;
            (pre, read_db_file(&db)?, meta)
        }
        None => {
            let db = pipeline::profile(&ctx.cfg)?;
            let module = victim_module(&ctx.cfg)?;
            let victim = synth_victim(&ctx.cfg, &module, false)?;
            let pre = run_preprocess(&victim.trace, &ctx.cfg.preprocess).map_err(precondition)?;
            (pre, db, ctx.meta())
        }
    };
    let truth = segment_truth(&pre)?;
    let mut rows = Vec::new();
    for set in &sets {
        let outcomes = match_trace(&pre.segments, &db, set);
        let predicted: Vec<Label> = outcomes.iter().map(|o| o.predicted).collect();
        let r = classify_outcomes(&predicted, &truth, strict).map_err(precondition)?;
        println!("{:<24} recall {:>7.3}%  E={} M={} I={}", set.to_string(), r.recall_percent(), r.errors, r.misses, r.insertions);
        rows.push((set, r));
    }
    let mut csv = Vec::new();
    meta.write_comment(&mut csv).map_err(precondition)?;
    csv.extend_from_slice(b"channels,n,correct,errors,misses,insertions,recall\n");
    for (set, r) in &rows {
        csv.extend_from_slice(
            format!(
                "{set},{},{},{},{},{},{:.6}\n",
                r.n, r.correct, r.errors, r.misses, r.insertions, r.recall
            )
            .as_bytes(),
        );
    }
    write_output(&ctx.path("ablation.csv"), &csv)
}

pub fn end2end(mut ctx: Ctx, channels: Option<&str>, strict: bool) -> Result<(), Failure> {
    if let Some(c) = channels {
        ctx.cfg.run.channels = c.to_string();
    }
    if strict {
        ctx.cfg.run.strict = true;
    }
    ctx.start()?;
    let channels = ctx.channels()?;
    let meta = ctx.meta();

    let db = pipeline::profile(&ctx.cfg)?;
    write_db_file(&ctx, &db)?;
    let module = victim_module(&ctx.cfg)?;
    let victim = synth_victim(&ctx.cfg, &module, false)?;
    write_trace_artifacts(&ctx, &victim.trace, &victim.layout)?;

    let pre = run_preprocess(&victim.trace, &ctx.cfg.preprocess).map_err(precondition)?;
    write_preprocess_artifacts(&ctx, &meta, &pre)?;
    let outcomes = match_trace(&pre.segments, &db, &channels);
    write_predictions(&ctx, &meta, &channels, &outcomes)?;

    let truth = segment_truth(&pre)?;
    let predicted: Vec<Label> = outcomes.iter().map(|o| o.predicted).collect();
    let report = classify_outcomes(&predicted, &truth, ctx.cfg.run.strict).map_err(precondition)?;
    write_report(&ctx, &meta, &channels, &report)?;

    println!(
        "victim: {} opcodes, {} events; database: {} fingerprints",
        victim.opcodes.len(),
        victim.trace.len(),
        db.entries.len()
    );
    print_preprocess(&pre.report, pre.segments.len());
    print_report(&report);
    Ok(())
}
