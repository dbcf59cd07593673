use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::LossBreakdown;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,l_efn,l_cls,l_adv,l_ctr,l_nego,total";

/// Per-step loss values written as CSV.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writeln!(log.out, "{METRICS_HEADER}").map_err(|e| Error::io(&log.path, e))?;
        Ok(log)
    }

    pub fn record(&mut self, step: u64, l: &LossBreakdown) -> Result<()> {
        writeln!(
            self.out,
            "{step},{},{},{},{},{},{}",
            l.l_efn, l.l_cls, l.l_adv, l.l_ctr, l.l_nego, l.total
        )
        .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
