use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub dice_region: f64,
    pub dice_vessel: f64,
    pub dice_fovea: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,dice_region,dice_vessel,dice_fovea,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.loss, r.dice_region, r.dice_vessel, r.dice_fovea, r.lr, r.seconds
            ));
        }
        out
    }

    /// Writes `train_log.csv` and `train_log.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("train_log.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("train_log.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}
