//! Sweep benchmarks over propagation depth and batch size.
//!
//! Each sweep point trains a fresh model for a fixed epoch budget (early
//! stopping disabled by setting patience to the budget) and reports the
//! median per-epoch training time, the mean per-batch query-scoring time
//! from the test pass, and the final test AP. Every point uses the same
//! seeds; the swept parameter is the only thing that varies. Timings come
//! from the monotonic clock and cover compute only, never dataset loading
//! or checkpoint I/O.

use crate::config::Config;
use crate::ctdg::EventLog;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::training::{Engine, RunMetrics};

#[derive(Debug, Clone)]
pub struct BenchPoint {
    /// The swept value (a depth k or a batch size B).
    pub value: usize,
    /// Median wall seconds per training epoch.
    pub train_s_per_epoch: f64,
    /// Mean milliseconds spent scoring one batch of test queries.
    pub infer_ms_per_batch: f64,
    /// Test AP of the fixed-budget run.
    pub ap: f64,
    /// Full metric stream of the run, in epoch order.
    pub history: Vec<RunMetrics>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    /// Name of the swept parameter: "k" or "B".
    pub parameter: &'static str,
    pub points: Vec<BenchPoint>,
}

impl BenchReport {
    /// Comma-separated table, one row per sweep point.
    pub fn table(&self) -> String {
        let mut out = format!("{},train_s_per_epoch,infer_ms_per_batch,test_ap\n", self.parameter);
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4}\n",
                p.value, p.train_s_per_epoch, p.infer_ms_per_batch, p.ap
            ));
        }
        out
    }
}

/// Trains one fixed-budget run per depth in `ks`, holding everything else
/// (including the batch size and all seeds) constant.
pub fn bench_depth<T: Scalar>(log: &EventLog, config: &Config, ks: &[usize]) -> Result<BenchReport> {
    sweep::<T>(log, config, ks, "k", |cfg, k| cfg.k = k)
}

/// Trains one fixed-budget run per batch size in `bs`, holding everything
/// else (including the depth and all seeds) constant.
pub fn bench_batch<T: Scalar>(log: &EventLog, config: &Config, bs: &[usize]) -> Result<BenchReport> {
    sweep::<T>(log, config, bs, "B", |cfg, b| cfg.batch_size = b)
}

fn sweep<T: Scalar>(
    log: &EventLog,
    config: &Config,
    values: &[usize],
    parameter: &'static str,
    set: impl Fn(&mut Config, usize),
) -> Result<BenchReport> {
    if values.is_empty() {
        return Err(Error::usage(format!("empty {parameter} sweep")));
    }
    if config.epochs < 3 {
        return Err(Error::usage(
            "benchmark timings are medians over epochs; give the budget at least 3",
        ));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        if value == 0 {
            return Err(Error::usage(format!("swept {parameter} values must be positive")));
        }
        let mut cfg = config.clone();
        set(&mut cfg, value);
        cfg.validate()?;
        let mut settings = cfg.train_settings();
        // fixed epoch budget: patience equal to the budget can never trip,
        // because the first epoch always improves on the initial best
        settings.patience = settings.max_epochs;
        let dims = cfg.model_dims(log.feat_dim(), 2);
        let model = Model::<T>::init(dims, cfg.seed)?;
        let mut engine = Engine::new(model, log, settings)?;
        let fit = engine.fit(log)?;

        let epoch_times: Vec<f64> = fit
            .history
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.train_s)
            .collect();
        let train_s = median(epoch_times);
        let infer_ms = fit.test.infer_ms_per_batch;
        if !(train_s > 0.0 && infer_ms > 0.0) {
            return Err(Error::usage(format!(
                "benchmark produced a non-positive timing at {parameter}={value}"
            )));
        }
        points.push(BenchPoint {
            value,
            train_s_per_epoch: train_s,
            infer_ms_per_batch: infer_ms,
            ap: fit.test.ap,
            history: fit.history,
        });
    }
    Ok(BenchReport { parameter, points })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.dim = 4;
        c.k = 2;
        c.heads = 2;
        c.bias_hidden = 3;
        c.batch_size = 30;
        c.lr = 1e-3;
        c.epochs = 3;
        c.seed = 9;
        c
    }

    #[test]
    fn depth_sweep_reports_one_row_per_value() {
        let log = generate_synthetic(12, 300, 4).unwrap();
        let report = bench_depth::<f64>(&log, &tiny_config(), &[1, 2]).unwrap();
        assert_eq!(report.parameter, "k");
        assert_eq!(report.points.len(), 2);
        assert_eq!(report.points[0].value, 1);
        assert_eq!(report.points[1].value, 2);
        for p in &report.points {
            assert!(p.train_s_per_epoch > 0.0);
            assert!(p.infer_ms_per_batch > 0.0);
            assert!((0.0..=1.0).contains(&p.ap));
            assert!(!p.history.is_empty());
        }
        let table = report.table();
        let lines: Vec<&str> = table.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("k,"));
        assert_eq!(lines[1].split(',').count(), 4);
    }

    #[test]
    fn batch_sweep_varies_only_the_batch_size() {
        let log = generate_synthetic(12, 300, 4).unwrap();
        let report = bench_batch::<f64>(&log, &tiny_config(), &[30, 60]).unwrap();
        assert_eq!(report.parameter, "B");
        assert_eq!(report.points.len(), 2);
        // same sweep again is bit-identical: seeds do not drift across points
        let again = bench_batch::<f64>(&log, &tiny_config(), &[30, 60]).unwrap();
        for (a, b) in report.points.iter().zip(&again.points) {
            assert_eq!(a.ap.to_bits(), b.ap.to_bits());
        }
    }

    #[test]
    fn degenerate_sweeps_are_rejected() {
        let log = generate_synthetic(12, 300, 4).unwrap();
        assert!(bench_depth::<f64>(&log, &tiny_config(), &[]).is_err());
        assert!(bench_depth::<f64>(&log, &tiny_config(), &[1, 0]).is_err());
        let mut short = tiny_config();
        short.epochs = 2;
        assert!(bench_depth::<f64>(&log, &short, &[1]).is_err());
    }
}
