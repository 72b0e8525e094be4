//! Experiment presets: the first-stage precision/lr protocol, schedule sweeps
//! and log reports.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::DataSplit;
use super::metrics::MetricsLog;
use super::train::{analytic_cost, Trainer};
use crate::error::{Error, Result};
use crate::quant::PASS_THROUGH_BITS;
use crate::schedule::{LrSchedule, Pattern};

/// Learning rates of the two full-precision stages.
pub const LATE_STAGE_LRS: [f64; 2] = [0.01, 0.001];

/// Stage boundaries `[E/2, 3E/4, E]`.
pub fn protocol_stages(epochs: usize) -> Result<[usize; 3]> {
    let (a, b) = (epochs / 2, epochs * 3 / 4);
    if a == 0 || a >= b || b >= epochs {
        return Err(Error::Config(format!(
            "{epochs} epochs cannot be split into three non-empty stages"
        )));
    }
    Ok([a, b, epochs])
}

/// Config for the first-stage protocol: `[0, E/2)` at (`lr`, `bits`), then full
/// precision at lr 0.01 and 0.001. Backward bits in the first stage are
/// `base.precision.bw_bits`, or 32 when `bits` is 32. Test accuracy is measured
/// at full precision.
pub fn first_stage_config(base: &TrainConfig, lr: f64, bits: u32) -> Result<TrainConfig> {
    let stages = protocol_stages(base.epochs)?;
    let mut cfg = base.clone();
    cfg.lr = LrSchedule::new(stages.to_vec(), vec![lr, LATE_STAGE_LRS[0], LATE_STAGE_LRS[1]])?;
    let p = &mut cfg.precision;
    p.pattern = Pattern::Static;
    p.b_min = bits;
    p.b_max = bits;
    p.gradient_cpt = false;
    p.cpt_start_epoch = 0;
    if bits >= PASS_THROUGH_BITS {
        p.bw_bits = PASS_THROUGH_BITS;
    }
    p.eval_bits = Some(PASS_THROUGH_BITS);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the protocol and returns the final test accuracy with its log.
pub fn run_first_stage_protocol(
    base: &TrainConfig,
    data: Arc<DataSplit>,
    first_stage_lr: f64,
    first_stage_bits: u32,
) -> Result<(f64, MetricsLog)> {
    let cfg = first_stage_config(base, first_stage_lr, first_stage_bits)?;
    let first = protocol_stages(cfg.epochs)?[0];
    let mut t = Trainer::with_data(cfg, data)?;
    t.run_until(first)?;
    t.update_precision(|p| {
        p.b_min = PASS_THROUGH_BITS;
        p.b_max = PASS_THROUGH_BITS;
        p.bw_bits = PASS_THROUGH_BITS;
    })?;
    t.run()?;
    let acc = t.log().last().map(|r| r.test_accuracy).unwrap_or(0.0);
    let (_, log, _) = t.into_parts();
    Ok((acc, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pattern: Pattern,
    pub num_cycles: usize,
    pub b_min: u32,
    pub b_max: u32,
    pub total_bitops: u64,
    /// Percent of the static `b_max` run's total.
    pub relative_cost: f64,
    /// `None` when only costs were computed.
    pub final_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub patterns: Vec<Pattern>,
    pub cycles: Vec<usize>,
    pub bounds: Vec<(u32, u32)>,
    /// Train every trial; otherwise costs only.
    pub train: bool,
}

/// Every combination of pattern, cycle count and bounds. Static patterns run
/// once per bound pair, whatever the cycle list says.
pub fn sweep(base: &TrainConfig, spec: &SweepSpec, data: Option<Arc<DataSplit>>) -> Result<Vec<SweepRow>> {
    if spec.patterns.is_empty() || spec.cycles.is_empty() || spec.bounds.is_empty() {
        return Err(Error::Config("sweep needs at least one pattern, cycle count and bound pair".into()));
    }
    let mut rows = Vec::new();
    for &(b_min, b_max) in &spec.bounds {
        let mut baseline = base.clone();
        baseline.precision.pattern = Pattern::Static;
        baseline.precision.b_min = b_max;
        baseline.precision.b_max = b_max;
        let base_total = analytic_cost(&baseline)?.total();
        for &pattern in &spec.patterns {
            let cycles: &[usize] = if pattern == Pattern::Static {
                &spec.cycles[..1]
            } else {
                &spec.cycles
            };
            for &n in cycles {
                let mut cfg = base.clone();
                cfg.precision.pattern = pattern;
                cfg.precision.num_cycles = n;
                cfg.precision.b_min = b_min;
                cfg.precision.b_max = b_max;
                cfg.validate()?;
                let total = analytic_cost(&cfg)?.total();
                let final_test_accuracy = if spec.train {
                    let mut t = match &data {
                        Some(d) => Trainer::with_data(cfg.clone(), d.clone())?,
                        None => Trainer::new(cfg.clone())?,
                    };
                    t.run()?;
                    t.log().last().map(|r| r.test_accuracy)
                } else {
                    None
                };
                rows.push(SweepRow {
                    pattern,
                    num_cycles: if pattern == Pattern::Static { 0 } else { n },
                    b_min: if pattern == Pattern::Static { b_max } else { b_min },
                    b_max,
                    total_bitops: total,
                    relative_cost: 100.0 * total as f64 / base_total as f64,
                    final_test_accuracy,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("pattern,num_cycles,b_min,b_max,total_bitops,relative_cost_pct,final_test_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.2},{}\n",
            r.pattern,
            r.num_cycles,
            r.b_min,
            r.b_max,
            r.total_bitops,
            r.relative_cost,
            r.final_test_accuracy.map_or(String::new(), |a| format!("{a:.2}"))
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub epochs: usize,
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub final_train_loss: f64,
    pub total_bitops: u64,
}

/// One row per metrics JSONL file.
pub fn report(paths: &[&Path]) -> Result<Vec<ReportRow>> {
    paths
        .iter()
        .map(|p| {
            let log = MetricsLog::read_jsonl(p)?;
            let last = log
                .last()
                .ok_or_else(|| Error::Data(format!("{} has no records", p.display())))?;
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok(ReportRow {
                name,
                epochs: log.len(),
                final_test_accuracy: last.test_accuracy,
                best_test_accuracy: log
                    .records()
                    .iter()
                    .map(|r| r.test_accuracy)
                    .fold(f64::NEG_INFINITY, f64::max),
                final_train_loss: last.train_loss,
                total_bitops: last.cumulative_bitops,
            })
        })
        .collect()
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("run,epochs,final_test_acc,best_test_acc,final_train_loss,total_bitops,relative_cost_pct\n");
    let base = rows.first().map(|r| r.total_bitops).unwrap_or(0);
    for r in rows {
        let rel = if base > 0 {
            format!("{:.2}", 100.0 * r.total_bitops as f64 / base as f64)
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.4},{},{}\n",
            r.name, r.epochs, r.final_test_accuracy, r.best_test_accuracy, r.final_train_loss, r.total_bitops, rel
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{ingest_dataset, DatasetSpec};
    use crate::harness::model::ModelSpec;
    use crate::harness::train::write_run_outputs;

    fn base(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs,
            batch_size: 20,
            model: ModelSpec::Linear,
            data: DatasetSpec::GaussianBlobs {
                classes: 3,
                dim: 5,
                train_size: 60,
                test_size: 30,
                spread: 0.5,
                seed: 1,
            },
            lr: LrSchedule::constant(0.05, epochs).unwrap(),
            ..TrainConfig::default()
        };
        cfg.precision.num_cycles = 1;
        cfg
    }

    #[test]
    fn stages() {
        assert_eq!(protocol_stages(20).unwrap(), [10, 15, 20]);
        assert!(protocol_stages(2).is_err());
        let cfg = first_stage_config(&base(8), 0.1, 4).unwrap();
        assert_eq!(cfg.lr.stage_lrs, vec![0.1, 0.01, 0.001]);
        assert_eq!(cfg.precision.b_max, 4);
        assert_eq!(cfg.precision.bw_bits, 8);
        assert_eq!(first_stage_config(&base(8), 0.1, 32).unwrap().precision.bw_bits, 32);
    }

    #[test]
    fn protocol_switches_to_full_precision() {
        let b = base(8);
        let data = Arc::new(ingest_dataset(&b.data).unwrap());
        let (acc, log) = run_first_stage_protocol(&b, data, 0.1, 4).unwrap();
        let bits: Vec<u32> = log.records().iter().map(|r| r.fw_bits).collect();
        assert_eq!(bits, vec![4, 4, 4, 4, 32, 32, 32, 32]);
        let lrs: Vec<f64> = log.records().iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.001, 0.001]);
        assert_eq!(acc, log.last().unwrap().test_accuracy);
    }

    #[test]
    fn cost_only_sweep() {
        let spec = SweepSpec {
            patterns: vec![Pattern::Cosine, Pattern::Static],
            cycles: vec![1, 2],
            bounds: vec![(3, 8)],
            train: false,
        };
        let rows = sweep(&base(8), &spec, None).unwrap();
        assert_eq!(rows.len(), 3);
        let stat = rows.iter().find(|r| r.pattern == Pattern::Static).unwrap();
        assert!((stat.relative_cost - 100.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.relative_cost <= 100.0));
        assert_eq!(sweep_table(&rows).lines().count(), 4);
    }

    #[test]
    fn report_rows() {
        let dir = tempfile::tempdir().unwrap();
        let b = base(2);
        let (_, log, ledger) = crate::harness::train(&b).unwrap();
        let run = dir.path().join("run_a");
        let paths = write_run_outputs(&run, &b, &log, &ledger).unwrap();
        let rows = report(&[paths.metrics_jsonl.as_path()]).unwrap();
        assert_eq!(rows[0].name, "run_a");
        assert_eq!(rows[0].epochs, 2);
        assert_eq!(rows[0].total_bitops, ledger.total());
        assert!(report_table(&rows).contains("run_a,2,"));
    }
}
