//! CSV training logs, one row per micro-batch.

use std::fs::File;
use std::path::{Path, PathBuf};

use mlim_core::training::{FinetuneRecord, StepRecord};

use crate::error::{AppError, AppResult};

pub const PRETRAIN_COLUMNS: [&str; 5] = ["step", "mode", "mlm_loss", "recon_loss", "total"];
pub const FINETUNE_COLUMNS: [&str; 3] = ["step", "mode", "loss"];

pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, columns: &[&str]) -> AppResult<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| AppError::format(path, e.to_string()))?;
        writer.write_record(columns).map_err(|e| AppError::format(path, e.to_string()))?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    fn row(&mut self, fields: &[String]) -> AppResult<()> {
        self.writer.write_record(fields).map_err(|e| AppError::format(&self.path, e.to_string()))
    }

    pub fn pretrain(&mut self, rec: &StepRecord) -> AppResult<()> {
        for m in &rec.micro {
            let mode = m.mode.map_or("naive", |m| m.label());
            let mlm = if m.mlm.skipped { String::new() } else { m.mlm.value.to_string() };
            let recon = m.recon.map(|r| r.to_string()).unwrap_or_default();
            self.row(&[rec.step.to_string(), mode.into(), mlm, recon, m.total.to_string()])?;
        }
        Ok(())
    }

    pub fn finetune(&mut self, rec: &FinetuneRecord) -> AppResult<()> {
        for (mode, loss) in rec.modes.iter().zip(&rec.micro_losses) {
            self.row(&[rec.step.to_string(), mode.label().into(), loss.to_string()])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> AppResult<()> {
        self.writer.flush().map_err(|e| AppError::io(&self.path, e))
    }
}
