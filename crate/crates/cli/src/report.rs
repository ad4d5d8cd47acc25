//! Consolidated run summary from whatever stage artifacts exist.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::classify::{TestReport, CLASSIFICATION_TIMING, METRICS_JSON, STAGE_TEST};
use crate::error::{io_err, Error, Result};
use crate::generation::{generation_table, GenerationRow};
use crate::timing::{format_hms, TimingReport};

pub fn report(run_dir: &Path) -> Result<String> {
    let metrics_path = run_dir.join(STAGE_TEST).join(METRICS_JSON);
    let metrics: Option<TestReport> = if metrics_path.exists() {
        let text = std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    let timing_dir = run_dir.join("timing");
    let mut classification = None;
    let mut generation = BTreeMap::new();
    if timing_dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(&timing_dir)
            .map_err(io_err(&timing_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let t = TimingReport::read(&path)?;
            if path.file_name().is_some_and(|n| n == CLASSIFICATION_TIMING) {
                classification = Some(t);
            } else {
                let row = GenerationRow::from_timing(&t);
                generation.insert(row.regime.clone(), row);
            }
        }
    }

    if metrics.is_none() && classification.is_none() && generation.is_empty() {
        return Err(Error::EmptyRun(run_dir.to_path_buf()));
    }

    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(s, "## Accuracy\n");
    match &metrics {
        Some(m) => {
            let _ = writeln!(s, "Slide-level accuracy: {:.4} ({} slides)", m.metrics.accuracy, m.metrics.slides);
            let _ = writeln!(s, "Patch-level accuracy: {:.4} ({} patches)", m.patch_accuracy, m.patches);
            if !m.unclassifiable.is_empty() {
                let _ = writeln!(s, "Slides without tissue (excluded): {}", m.unclassifiable.join(", "));
            }
            let _ = writeln!(s, "\n| Class | Precision | Recall | F1 | Support |\n|---|---|---|---|---|");
            for c in &m.metrics.per_class {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} | {} |", c.class, c.precision, c.recall, c.f1, c.support);
            }
        }
        None => {
            let _ = writeln!(s, "absent (no {}/{METRICS_JSON})", STAGE_TEST);
        }
    }

    let _ = writeln!(s, "\n## Classification timing\n");
    match &classification {
        Some(t) => {
            let _ = writeln!(s, "| Stage | Seconds | Elapsed |\n|---|---|---|");
            for st in &t.stages {
                let _ = writeln!(s, "| {} | {:.3} | {} |", st.stage, st.seconds, format_hms(st.seconds));
            }
            let _ = writeln!(s, "| total | {:.3} | {} |", t.total_seconds(), format_hms(t.total_seconds()));
        }
        None => {
            let _ = writeln!(s, "absent");
        }
    }

    let _ = writeln!(s, "\n## Generation timing\n");
    if generation.is_empty() {
        let _ = writeln!(s, "absent");
    } else {
        let rows: Vec<GenerationRow> = generation.into_values().collect();
        s.push_str(&generation_table(&rows));
    }
    Ok(s)
}
