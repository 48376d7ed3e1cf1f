// SPDX-License-Identifier: Apache-2.0

//! `optrace`: synthesize single-stepping traces of a Wasm interpreter,
//! profile opcode fingerprints, attack traces and score the recovery.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::Failure;

#[derive(Parser, Debug)]
#[command(name = "optrace", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.rng_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a module and write its side-channel trace and ground truth.
    Synth(SynthArgs),
    /// Detect optable and stack pages, filter and segment a trace.
    Preprocess(PreprocessArgs),
    /// Build a fingerprint database from a marker-instrumented trace.
    Profile(ProfileArgs),
    /// Match the segments of a trace against a database.
    Attack(AttackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Attack once per channel subset and tabulate recall.
    Ablate(AblateArgs),
    /// Profile, synthesize, attack and evaluate from one configuration.
    End2end(End2endArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Emit marker writes before each opcode fetch (profiling build).
    #[arg(long)]
    markers: bool,
    /// Flat module text file; overrides the configured workload.
    #[arg(long)]
    module: Option<PathBuf>,
    /// Built-in workload name.
    #[arg(long)]
    workload: Option<String>,
    /// Workload size knob.
    #[arg(long)]
    scale: Option<u32>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Ground truth to carry over to the segments.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Marker-instrumented trace; without it the configured profiling
    /// workload is synthesized.
    #[arg(long, requires = "truth")]
    trace: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Marker page as hex frame number; read from `layout.json` beside the trace when omitted.
    #[arg(long)]
    marker_page: Option<String>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Raw or segmented trace CSV.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Preprocessing report of a segmented trace; defaults to `preprocess.json` beside it.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Channel set such as `all` or `pf+mode+class`; overrides `run.channels`.
    #[arg(long)]
    channels: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "counts")]
    predictions: Option<PathBuf>,
    #[arg(long, required_unless_present = "counts")]
    truth: Option<PathBuf>,
    /// Score a raw `N,E,M,I` tuple instead of files.
    #[arg(long, conflicts_with_all = ["predictions", "truth"])]
    counts: Option<String>,
    /// Compare exact opcodes instead of families.
    #[arg(long)]
    strict: bool,
    /// Compare artifacts even when their layout seeds differ.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Victim trace; synthesized from the configuration when omitted.
    #[arg(long, requires_all = ["truth", "db"])]
    trace: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    db: Option<PathBuf>,
    /// Channel subsets, each `all` or a `+`-joined list. Defaults to all
    /// channels and every leave-one-out subset.
    #[arg(long = "subset")]
    subsets: Vec<String>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct End2endArgs {
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    strict: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = commands::Ctx::new(cli.config.as_deref(), cli.seed, cli.out)?;
    match cli.command {
        Command::Synth(a) => commands::synth(ctx, a.markers, a.module, a.workload, a.scale),
        Command::Preprocess(a) => commands::preprocess(ctx, &a.trace, a.truth.as_deref()),
        Command::Profile(a) => commands::profile(ctx, a.trace.as_deref(), a.truth.as_deref(), a.marker_page.as_deref()),
        Command::Attack(a) => commands::attack(ctx, &a.trace, &a.db, a.report.as_deref(), a.channels.as_deref()),
        Command::Eval(a) => match a.counts {
            Some(c) => commands::eval_counts(ctx, &c),
            None => commands::eval(
                ctx,
                a.predictions.as_deref().expect("clap enforces"),
                a.truth.as_deref().expect("clap enforces"),
                a.strict,
                a.force,
            ),
        },
        Command::Ablate(a) => {
            let inputs = a.trace.map(|t| (t, a.truth.expect("clap enforces"), a.db.expect("clap enforces")));
            commands::ablate(ctx, inputs, &a.subsets, a.strict)
        }
        Command::End2end(a) => commands::end2end(ctx, a.channels.as_deref(), a.strict),
    }
}

/// The error chain joined by `: `, skipping causes whose text the message
/// already embeds.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
