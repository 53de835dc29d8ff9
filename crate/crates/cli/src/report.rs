//! `clonetts report`: ratings export → MOS and A/B tables.

use std::path::Path;

use anyhow::Context;
use clonetts_core::eval::{build_report, parse_ratings, EvalReport};

use crate::config::Settings;
use crate::{Classify, CmdResult};

pub fn cmd_report(ratings: &Path, settings: &Settings) -> CmdResult<EvalReport> {
    let text = std::fs::read_to_string(ratings).with_context(|| format!("ratings export {}", ratings.display())).data()?;
    let records = parse_ratings(&text).with_context(|| ratings.display().to_string()).data()?;
    let report = build_report(&records).data()?;
    let mut body = String::new();
    for line in settings.echo.lines() {
        body.push_str("# ");
        body.push_str(line);
        body.push('\n');
    }
    body.push_str(&report.to_string());
    std::fs::write(&settings.report_output, body).with_context(|| settings.report_output.display().to_string()).data()?;
    Ok(report)
}
