use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_denoise: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_align: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Serialize)]
struct TimingRecord {
    step: u64,
    wall_seconds: f64,
}

/// Per-step JSON lines, flushed every record. Wall-clock time goes to a
/// separate file so the metrics stream itself stays reproducible byte for
/// byte.
pub struct MetricsWriter {
    path: PathBuf,
    metrics: BufWriter<File>,
    timing: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl MetricsWriter {
    pub fn create(metrics: &Path, timing: Option<&Path>) -> Result<Self> {
        Ok(Self {
            path: metrics.to_path_buf(),
            metrics: create(metrics)?,
            timing: match timing {
                Some(p) => Some((p.to_path_buf(), create(p)?)),
                None => None,
            },
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        if let Some((path, w)) = &mut self.timing {
            let rec = TimingRecord {
                step: m.step,
                wall_seconds: self.start.elapsed().as_secs_f64(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

/// Parse a metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::corrupt(path, e.to_string())))
        .collect()
}
