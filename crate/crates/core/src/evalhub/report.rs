use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "protocol,target_domain,accuracy,macro_f1,seed,config_hash";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target_domain: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Per-target-domain scores of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

impl EvalReport {
    pub fn new(
        protocol: &str,
        seed: u64,
        config_hash: String,
        rows: Vec<ReportRow>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("report without target domains".into()));
        }
        let n = rows.len() as f64;
        let mean_accuracy = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let mean_macro_f1 = rows.iter().map(|r| r.macro_f1).sum::<f64>() / n;
        Ok(EvalReport {
            protocol: protocol.to_string(),
            seed,
            config_hash,
            rows,
            mean_accuracy,
            mean_macro_f1,
        })
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{}",
                self.protocol, r.target_domain, r.accuracy, r.macro_f1, self.seed, self.config_hash
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_match_rows() {
        let rows = vec![
            ReportRow {
                target_domain: "a".into(),
                accuracy: 0.5,
                macro_f1: 0.4,
                n: 10,
            },
            ReportRow {
                target_domain: "b".into(),
                accuracy: 0.7,
                macro_f1: 0.6,
                n: 10,
            },
        ];
        let r = EvalReport::new("lodo", 1, "00".into(), rows).unwrap();
        assert!((r.mean_accuracy - 0.6).abs() < 1e-9);
        assert!((r.mean_macro_f1 - 0.5).abs() < 1e-9);
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
