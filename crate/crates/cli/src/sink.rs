use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use lrlab_core::io::metrics::write_record;
use lrlab_core::trainer::RunSink;
use lrlab_core::{Checkpoint, Error, MetricRecord, Result};

/// Writes `metrics.jsonl`, `ckpt/step_NNNNNNNN.ckpt` and, after a numeric
/// failure, `last_good.ckpt` under a run directory.
pub struct FileSink {
    dir: PathBuf,
    metrics: File,
    metrics_path: PathBuf,
}

pub fn ckpt_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("ckpt").join(format!("step_{step:08}.ckpt"))
}

impl FileSink {
    /// Starts a fresh metrics file, or on resume keeps the records up to
    /// `resume_step` so steps stay strictly increasing.
    pub fn create(dir: &Path, resume_step: Option<u64>) -> Result<Self> {
        let ckpt_dir = dir.join("ckpt");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io {
            path: ckpt_dir.clone(),
            source: e,
        })?;
        let metrics_path = dir.join("metrics.jsonl");
        let io = |e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        };
        let kept = match resume_step {
            Some(step) if metrics_path.exists() => {
                let f = File::open(&metrics_path).map_err(io)?;
                let mut keep = Vec::new();
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(io)?;
                    let r: MetricRecord = serde_json::from_str(&line)
                        .map_err(|e| Error::Format(format!("{}: {e}", metrics_path.display())))?;
                    if r.step <= step {
                        keep.push(line);
                    }
                }
                keep
            }
            _ => Vec::new(),
        };
        let mut metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&metrics_path)
            .map_err(io)?;
        for line in kept {
            writeln!(metrics, "{line}").map_err(io)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            metrics_path,
        })
    }
}

impl RunSink for FileSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        write_record(&mut self.metrics, record)
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::Io {
                path: self.metrics_path.clone(),
                source: e,
            })
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&ckpt_path(&self.dir, ckpt.step))
    }

    fn aborted(&mut self, last_good: &Checkpoint) -> Result<()> {
        let path = self.dir.join("last_good.ckpt");
        last_good.save(&path)?;
        eprintln!("last good state (step {}) saved to {}", last_good.step, path.display());
        Ok(())
    }

    fn warn(&mut self, msg: &str) {
        eprintln!("warning: {msg}");
    }
}
