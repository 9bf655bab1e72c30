use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "epoch,l_uc,l_cmd,total,lr,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch-mean metric loss; absent while pretraining.
    pub l_uc: Option<f64>,
    /// Epoch-mean discriminator loss; absent when the block is off.
    pub l_cmd: Option<f64>,
    pub total: f64,
    /// Learning rate the epoch was trained with.
    pub lr: f64,
    pub seconds: f64,
}

/// Append-only per-epoch training record with `# key=value` metadata lines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn new(meta: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            meta: meta.into_iter().collect(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}").unwrap();
        }
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                opt(r.l_uc),
                opt(r.l_cmd),
                r.total,
                r.lr,
                r.seconds
            )
            .unwrap();
        }
        out
    }

    /// Same log with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        c.records.iter_mut().for_each(|r| r.seconds = 0.0);
        c
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("train log: {m}"));
        let mut log = TrainLog::default();
        let mut lines = text.lines();
        let mut saw_header = false;
        for line in lines.by_ref() {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad metadata `{line}`")))?;
                log.meta.insert(k.into(), v.into());
            } else if line == LOG_HEADER {
                saw_header = true;
                break;
            } else {
                return Err(bad(format!("unexpected line `{line}`")));
            }
        }
        if !saw_header {
            return Err(bad("missing header".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields in `{line}`")));
            }
            log.records.push(EpochRecord {
                epoch: f[0].parse().map_err(|e| bad(format!("`{}`: {e}", f[0])))?,
                l_uc: maybe(f[1])?,
                l_cmd: maybe(f[2])?,
                total: num(f[3])?,
                lr: num(f[4])?,
                seconds: num(f[5])?,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// True when the learning rate never rises from one epoch to the next.
    pub fn lr_non_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].lr <= w[0].lr)
    }
}
