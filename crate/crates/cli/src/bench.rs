//! `clonetts bench-rtf`: real-time factor of the text → waveform path.

use std::convert::Infallible;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clonetts_core::eval::{rtf_measure, RtfReport};
use serde::Serialize;

use crate::cloning::CloneEngine;
use crate::config::Settings;
use crate::{Classify, CmdResult, Failure};

/// Audio the stub "produces" per non-space character of input.
pub const STUB_SECS_PER_CHAR: f64 = 0.1;

/// Deterministic fake synthesizer: sleeps `rtf` times the audio it claims
/// to produce.
#[derive(Debug, Clone, Copy)]
pub struct StubModel {
    pub rtf: f64,
}

impl StubModel {
    pub fn synthesize(&self, sentence: &str) -> f64 {
        let secs = STUB_SECS_PER_CHAR * sentence.chars().filter(|c| !c.is_whitespace()).count().max(1) as f64;
        std::thread::sleep(Duration::from_secs_f64(self.rtf * secs));
        secs
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutput {
    pub mode: &'static str,
    pub batch_size: usize,
    pub sentences: usize,
    #[serde(flatten)]
    pub report: RtfReport,
    pub run_config: String,
}

pub fn load_test_set(settings: &Settings) -> CmdResult<Vec<String>> {
    let text = std::fs::read_to_string(&settings.test_set)
        .with_context(|| format!("test set {}", settings.test_set.display()))
        .data()?;
    let set: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if set.is_empty() {
        return Err(Failure::Data(anyhow!("empty test set: {}", settings.test_set.display())));
    }
    Ok(set)
}

pub fn cmd_bench_rtf(settings: &Settings, stub: bool, runs: usize) -> CmdResult<BenchOutput> {
    let set = load_test_set(settings)?;
    let (mode, report) = if stub {
        let model = StubModel { rtf: settings.stub_rtf };
        let report = rtf_measure(&set, runs, |s: &String| Ok::<_, Infallible>(model.synthesize(s))).data()?;
        ("stub", report)
    } else {
        let engine = CloneEngine::load(settings)?;
        let speaker = engine.embed_reference(&settings.reference)?;
        let report = rtf_measure(&set, runs, |s: &String| {
            engine.synthesize(s, &speaker, settings.seed).map(|(w, _)| w.duration_secs()).map_err(|f| format!("{:#}", f.error()))
        })
        .data()?;
        ("model", report)
    };
    let out = BenchOutput { mode, batch_size: 1, sentences: set.len(), report, run_config: settings.echo.clone() };
    let body = serde_json::to_string_pretty(&out).expect("bench output serializes");
    std::fs::write(&settings.bench_output, body).with_context(|| settings.bench_output.display().to_string()).data()?;
    Ok(out)
}
