//! Per-round measurements and their serialization.
//!
//! Every round of every stage appends one [`RoundRecord`]. Records are
//! written as CSV with floats in full-precision scientific notation, so
//! reading the file back reproduces every value bit for bit.

use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelParams};
use crate::{widen, Float};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Phase of the experiment a round belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Unlearn,
    Posttrain,
    Retrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Unlearn => "unlearn",
            Stage::Posttrain => "posttrain",
            Stage::Retrain => "retrain",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "unlearn" => Ok(Stage::Unlearn),
            "posttrain" => Ok(Stage::Posttrain),
            "retrain" => Ok(Stage::Retrain),
            other => Err(Error::Ingestion(format!("unknown stage {other:?}"))),
        }
    }
}

/// One row of the experiment log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Global round index, counted from 1 across stages.
    pub round: usize,
    pub stage: Stage,
    /// Attack success rate: fraction of the trigger testset classified
    /// as the trigger's flipped label.
    pub asr: f64,
    /// Accuracy over the remaining clients' clean testsets, uniformly
    /// averaged per client.
    pub r_acc_mean: f64,
    pub r_acc_std: f64,
    pub r_acc_worst: f64,
    pub r_acc_best: f64,
    /// Parameter distance to the origin model, i.e. the model the
    /// pretraining stage ended with. Zero during pretraining.
    pub dist_origin: f64,
    /// Conflict count. During unlearning: remaining clients whose
    /// gradient conflicts with the applied update direction. During
    /// post-training: clients whose raw gradient pointed back toward
    /// the origin (and was projected, unless projection is disabled).
    /// Zero during pretraining.
    pub nc: usize,
    /// Unlearning loss of the target shard under the current model.
    pub target_uce_loss: f64,
    /// Mean plain cross-entropy over the remaining clients' shards.
    pub mean_remaining_ce_loss: f64,
    pub lr: f64,
    /// Event markers, semicolon-joined in the CSV.
    pub flags: Vec<String>,
}

pub const CSV_HEADER: &str = "round,stage,asr,r_acc_mean,r_acc_std,r_acc_worst,r_acc_best,\
                              dist_origin,nc,target_uce_loss,mean_remaining_ce_loss,lr,flags";

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_float(field: &str, name: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Ingestion(format!("records csv: bad {name} value {field:?}")))
}

fn parse_int(field: &str, name: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::Ingestion(format!("records csv: bad {name} value {field:?}")))
}

impl RoundRecord {
    fn to_csv_line(&self) -> Result<String> {
        for f in &self.flags {
            if f.is_empty() || f.contains([',', ';', '\n']) {
                return Err(Error::Config(format!("flag {f:?} cannot be stored in csv")));
            }
        }
        Ok(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.stage,
            fmt_float(self.asr),
            fmt_float(self.r_acc_mean),
            fmt_float(self.r_acc_std),
            fmt_float(self.r_acc_worst),
            fmt_float(self.r_acc_best),
            fmt_float(self.dist_origin),
            self.nc,
            fmt_float(self.target_uce_loss),
            fmt_float(self.mean_remaining_ce_loss),
            fmt_float(self.lr),
            self.flags.join(";"),
        ))
    }

    fn from_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Ingestion(format!(
                "records csv: expected 13 fields, got {} in {line:?}",
                fields.len()
            )));
        }
        Ok(RoundRecord {
            round: parse_int(fields[0], "round")?,
            stage: fields[1].parse()?,
            asr: parse_float(fields[2], "asr")?,
            r_acc_mean: parse_float(fields[3], "r_acc_mean")?,
            r_acc_std: parse_float(fields[4], "r_acc_std")?,
            r_acc_worst: parse_float(fields[5], "r_acc_worst")?,
            r_acc_best: parse_float(fields[6], "r_acc_best")?,
            dist_origin: parse_float(fields[7], "dist_origin")?,
            nc: parse_int(fields[8], "nc")?,
            target_uce_loss: parse_float(fields[9], "target_uce_loss")?,
            mean_remaining_ce_loss: parse_float(fields[10], "mean_remaining_ce_loss")?,
            lr: parse_float(fields[11], "lr")?,
            flags: if fields[12].is_empty() {
                Vec::new()
            } else {
                fields[12].split(';').map(str::to_owned).collect()
            },
        })
    }
}

/// Writes the full record log as CSV.
pub fn write_records_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 256 + CSV_HEADER.len());
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_line()?);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a record log written by [`write_records_csv`]. Values round
/// trip exactly.
pub fn read_records_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::Ingestion(format!(
                "records csv: unexpected header {h:?}"
            )))
        }
        None => return Err(Error::Ingestion("records csv: empty file".into())),
    }
    lines.map(RoundRecord::from_csv_line).collect()
}

/// Fraction of `batch` rows the model classifies as their stored label.
/// Ties in the output distribution resolve to the first maximum.
pub fn accuracy<F: Float>(model: &ModelParams<F>, batch: &Batch<F>) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::Config("accuracy of an empty batch is undefined".into()));
    }
    let probs = nn::forward(model, batch)?;
    let correct = (0..batch.rows())
        .filter(|&i| probs.argmax_row(i) == batch.labels()[i])
        .count();
    Ok(correct as f64 / batch.rows() as f64)
}

/// Summary statistics of per-client retained accuracy. Clients weigh
/// equally regardless of testset size; the spread is the population
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAccStats {
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
    pub best: f64,
}

pub fn r_acc_stats(per_client: &[f64]) -> Result<RAccStats> {
    if per_client.is_empty() {
        return Err(Error::Config("retained accuracy needs at least one remaining client".into()));
    }
    let n = per_client.len() as f64;
    let mean = per_client.iter().sum::<f64>() / n;
    let var = per_client.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let worst = per_client.iter().copied().fold(f64::INFINITY, f64::min);
    let best = per_client.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RAccStats { mean, std: var.sqrt(), worst, best })
}

/// Euclidean distance between two flat parameter vectors.
pub fn param_distance<F: Float>(a: &ModelParams<F>, b: &ModelParams<F>) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .map(|(&x, &y)| {
            let d = widen(x) - widen(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Key metrics at one checkpointed round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: usize,
    pub asr: f64,
    pub r_acc_mean: f64,
    pub r_acc_worst: f64,
    pub dist_origin: f64,
}

impl Snapshot {
    pub fn from_record(r: &RoundRecord) -> Self {
        Snapshot {
            round: r.round,
            asr: r.asr,
            r_acc_mean: r.r_acc_mean,
            r_acc_worst: r.r_acc_worst,
            dist_origin: r.dist_origin,
        }
    }
}

/// How the schedule actually unfolded for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub pretrain_rounds: usize,
    pub unlearn_rounds_run: usize,
    pub posttrain_rounds_run: usize,
    pub early_stopped: bool,
    pub aborted_degenerate: bool,
}

/// End-of-run summary, serialized as JSON next to the record log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub schedule: ScheduleOutcome,
    pub pretrain_end: Snapshot,
    pub after_unlearn: Snapshot,
    #[serde(rename = "final")]
    pub final_round: Snapshot,
}

pub fn write_summary_json(summary: &RunSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_summary_json(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("summary json: {e}")))
}
