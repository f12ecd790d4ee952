use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kgalign::eval::{Metrics, RankResult};
use kgalign::kg::IdMap;
use kgalign::train::EpochRecord;
use kgalign::Result;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub hits1: f64,
    pub hits5: f64,
    pub mrr: f64,
    pub n_test: usize,
    pub fold: u8,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(m: &Metrics, fold: u8, seed: u64) -> Self {
        MetricsRecord {
            hits1: m.hits_at(1).unwrap_or(0.0),
            hits5: m.hits_at(5).unwrap_or(0.0),
            mrr: m.mrr,
            n_test: m.count,
            fold,
            seed,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| kgalign::Error::Io(e.into()))
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| kgalign::Error::Io(e.into()))?;
        text.push('\n');
        std::fs::write(dir.join("metrics.json"), text)?;
        let mut csv = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
        csv.serialize(self).map_err(csv_err)?;
        csv.flush()?;
        Ok(())
    }
}

pub fn csv_err(e: csv::Error) -> kgalign::Error {
    kgalign::Error::Io(std::io::Error::other(e))
}

/// `source_uri<TAB>predicted_target_uri<TAB>rank_of_truth`, one line per pair.
pub fn write_predictions(path: &Path, ranks: &[RankResult], source: &IdMap, target: &IdMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in ranks {
        writeln!(w, "{}\t{}\t{}", source.uri(r.source), target.uri(r.top[0]), r.rank)?;
    }
    w.flush()?;
    Ok(())
}

/// Line-per-record training log, flushed after every line.
pub struct History {
    out: BufWriter<File>,
}

impl History {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let settings: serde_json::Map<String, serde_json::Value> = cfg
            .resolved_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect();
        let header = json!({
            "kind": "header",
            "precision": cfg.precision.name(),
            "seed": cfg.train.seed,
            "ablations": cfg.ablations(),
            "config": settings,
        });
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(History { out })
    }

    pub fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        let line = json!({
            "kind": "epoch",
            "epoch": r.epoch,
            "L_a": finite_or_null(r.loss.align),
            "L_c": finite_or_null(r.loss.contrast),
            "total": finite_or_null(r.loss.total),
            "val_mrr": r.val_mrr,
        });
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn abort(&mut self, err: &kgalign::Error) -> Result<()> {
        writeln!(self.out, "{}", json!({"kind": "abort", "error": err.to_string()}))?;
        self.out.flush()?;
        Ok(())
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}
