//! Tab-separated per-step training log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "step\tstage\tloss_total\tloss_adv\tloss_l1\tloss_id\tlr";

/// One logged step; terms a stage does not compute are `None` and print
/// as `-`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub stage: String,
    pub loss_total: f64,
    pub loss_adv: Option<f64>,
    pub loss_l1: Option<f64>,
    pub loss_id: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Option<Option<f64>> {
    if s == "-" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

impl RunLog {
    /// Appends `entry`, refusing non-finite losses.
    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        let terms = [
            ("loss_total", Some(entry.loss_total)),
            ("loss_adv", entry.loss_adv),
            ("loss_l1", entry.loss_l1),
            ("loss_id", entry.loss_id),
        ];
        for (name, v) in terms {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        stage: entry.stage.clone(),
                        step: entry.step,
                        detail: format!("{name} = {v}"),
                    });
                }
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.step,
                e.stage,
                e.loss_total,
                opt(e.loss_adv),
                opt(e.loss_l1),
                opt(e.loss_id),
                e.lr
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::invalid("run log lacks the expected header"));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::invalid(format!("run log line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            entries.push(LogEntry {
                step: f[0].parse().map_err(|_| bad())?,
                stage: f[1].to_string(),
                loss_total: f[2].parse().map_err(|_| bad())?,
                loss_adv: parse_opt(f[3]).ok_or_else(bad)?,
                loss_l1: parse_opt(f[4]).ok_or_else(bad)?,
                loss_id: parse_opt(f[5]).ok_or_else(bad)?,
                lr: f[6].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_tsv())?)
    }

    pub fn totals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss_total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(step: usize, total: f64) -> LogEntry {
        LogEntry {
            step,
            stage: "restorer_finetune".into(),
            loss_total: total,
            loss_adv: Some(0.5),
            loss_l1: None,
            loss_id: Some(1.25),
            lr: 2e-4,
        }
    }

    #[test]
    fn tsv_round_trip() {
        let mut log = RunLog::default();
        log.push(entry(1, 3.5)).unwrap();
        log.push(entry(2, 1.0 / 3.0)).unwrap();
        let text = log.to_tsv();
        assert!(text.lines().nth(1).unwrap().contains("\t-\t"));
        assert_eq!(RunLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn non_finite_aborts_with_location() {
        let mut log = RunLog::default();
        match log.push(entry(7, f64::NAN)) {
            Err(Error::NonFinite { step: 7, stage, .. }) => assert_eq!(stage, "restorer_finetune"),
            other => panic!("{other:?}"),
        }
        let mut e = entry(8, 1.0);
        e.loss_adv = Some(f64::INFINITY);
        assert!(log.push(e).is_err());
        assert!(log.entries.is_empty());
    }

    #[test]
    fn malformed_logs_are_rejected() {
        assert!(RunLog::parse("nope\n").is_err());
        assert!(RunLog::parse(&format!("{LOG_HEADER}\n1\tx\t1.0\n")).is_err());
    }
}
