// SPDX-License-Identifier: Apache-2.0

//! Failure classes, exit codes and artifact file helpers.

use std::path::Path;

use anyhow::{anyhow, Context};

use optrace_core::pipeline::PipelineError;
use optrace_core::profiler::ProfileError;
use optrace_core::trace::{ArtifactMeta, TraceFormatError};

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, flags or missing inputs (exit 2).
    Config(anyhow::Error),
    /// Malformed input data (exit 3).
    Format(anyhow::Error),
    /// Inputs are well formed but the pipeline cannot proceed (exit 4).
    Precondition(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Format(_) => 3,
            Failure::Precondition(_) => 4,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Format(e) | Failure::Precondition(e) => e,
        }
    }
}

pub fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

pub fn format_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Format(e.into())
}

pub fn precondition(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Precondition(e.into())
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::UnknownWorkload(_)
            | PipelineError::ModuleRead { .. }
            | PipelineError::Layout(_) => config_err(e),
            PipelineError::Parse(_) => format_err(e),
            PipelineError::Profile(ProfileError::Format { .. } | ProfileError::Io(_)) => format_err(e),
            _ => precondition(e),
        }
    }
}

pub fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(config_err)
}

pub fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(precondition)
}

/// CSV text prefixed with the provenance comment and optional extra comments.
pub fn csv_artifact(
    meta: &ArtifactMeta,
    extra: &[String],
    body: impl FnOnce(&mut Vec<u8>) -> Result<(), TraceFormatError>,
) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    meta.write_comment(&mut buf).map_err(precondition)?;
    for line in extra {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    body(&mut buf).map_err(precondition)?;
    Ok(buf)
}

pub fn parse_frame_arg(s: &str) -> Result<u64, Failure> {
    optrace_core::trace::parse_frame(s)
        .or_else(|| s.parse().ok())
        .ok_or_else(|| config_err(anyhow!("bad frame number `{s}` (expected 0x-prefixed hex)")))
}

pub fn json_text(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}
