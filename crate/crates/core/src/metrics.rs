//! CSV emission for training metrics, rankings, mixed-precision
//! evaluations, sweeps, and probes. Layer columns are 1-based to match the
//! layer ids in configs and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sensitivity::{LayerRanking, SensitivityProbe, SweepRow};
use crate::trainer::TrainReport;

/// Metrics header for a model with `interior` interior layers:
/// `epoch,train_loss,full_acc,quant_acc,d_1..d_out,s_1..s_out,lambda_1..lambda_out`.
pub fn metrics_header(interior: usize) -> String {
    let mut h = String::from("epoch,train_loss,full_acc,quant_acc");
    for i in 1..=interior {
        write!(h, ",d_{i}").unwrap();
    }
    h.push_str(",d_out");
    for i in 1..=interior {
        write!(h, ",s_{i}").unwrap();
    }
    h.push_str(",s_out");
    for i in 1..=interior {
        write!(h, ",lambda_{i}").unwrap();
    }
    h.push_str(",lambda_out");
    h
}

pub fn write_metrics_csv(path: &Path, report: &TrainReport, interior: usize) -> Result<()> {
    let mut out = metrics_header(interior);
    out.push('\n');
    for row in &report.metrics {
        write!(
            out,
            "{},{},{},{}",
            row.epoch, row.train_loss, row.full_acc, row.quant_acc
        )
        .unwrap();
        for &d in &row.layer_distances {
            write!(out, ",{d}").unwrap();
        }
        write!(out, ",{}", row.output_distance).unwrap();
        for &s in &row.layer_slacks {
            write!(out, ",{s}").unwrap();
        }
        write!(out, ",{}", row.output_slack).unwrap();
        for &l in &row.layer_lambdas {
            write!(out, ",{l}").unwrap();
        }
        writeln!(out, ",{}", row.lambda_out).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_rank_csv(path: &Path, ranking: &LayerRanking) -> Result<()> {
    let mut out = String::from("layer,lambda,rank\n");
    for (rank, &(layer, lambda)) in ranking.entries.iter().enumerate() {
        writeln!(out, "{},{lambda},{}", layer + 1, rank + 1).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct MixedEvalRow {
    pub k: usize,
    pub mode: String,
    pub accuracy: f64,
    pub seed: u64,
}

pub fn write_mixed_eval_csv(path: &Path, rows: &[MixedEvalRow]) -> Result<()> {
    let mut out = String::from("k,mode,accuracy,seed\n");
    for row in rows {
        writeln!(out, "{},{},{},{}", row.k, row.mode, row.accuracy, row.seed).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("value,test_acc,lambda_final\n");
    for row in rows {
        writeln!(out, "{},{},{}", row.value, row.test_acc, row.lambda_final).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_probe_csv(path: &Path, probe: &SensitivityProbe) -> Result<()> {
    let mut out = String::from("eps,objective,lambda,worst_margin\n");
    for i in 0..probe.grid.len() {
        writeln!(
            out,
            "{},{},{},{}",
            probe.grid[i], probe.objectives[i], probe.lambdas[i], probe.worst_margins[i]
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Minimal CSV reader for the toolkit's own outputs (no quoting).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EpochMetrics;

    #[test]
    fn header_matches_schema() {
        assert_eq!(
            metrics_header(2),
            "epoch,train_loss,full_acc,quant_acc,d_1,d_2,d_out,s_1,s_2,s_out,lambda_1,lambda_2,lambda_out"
        );
    }

    #[test]
    fn metrics_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let report = TrainReport {
            metrics: vec![EpochMetrics {
                epoch: 1,
                train_loss: 0.5,
                full_acc: 0.75,
                quant_acc: 0.5,
                layer_distances: vec![0.125],
                output_distance: 0.25,
                layer_slacks: vec![-0.125],
                output_slack: 0.0625,
                layer_lambdas: vec![0.03125],
                lambda_out: 1.0,
            }],
            stopping_epoch: 1,
            best_epoch: 1,
        };
        write_metrics_csv(&path, &report, 1).unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header.join(","), metrics_header(1));
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][0], "1");
        assert_eq!(rows[0][4], "0.125");
        let parsed: f64 = rows[0][5].parse().unwrap();
        assert_eq!(parsed, 0.25);
    }

    #[test]
    fn rank_csv_lists_one_based_layers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.csv");
        let ranking = LayerRanking {
            entries: vec![(2, 0.9), (0, 0.1)],
        };
        write_rank_csv(&path, &ranking).unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["layer", "lambda", "rank"]);
        assert_eq!(rows[0], vec!["3", "0.9", "1"]);
        assert_eq!(rows[1], vec!["1", "0.1", "2"]);
    }
}
