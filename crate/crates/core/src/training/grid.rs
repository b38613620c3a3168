use rayon::prelude::*;

use super::{train, EpochRecord, TrainConfig};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{MultiTaskNet, NetConfig};

/// `0.1, 0.2, ..., 0.9`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub lambda: f64,
    /// Test-split report after the last epoch.
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
    /// Parameters after the last epoch.
    pub net: MultiTaskNet,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// One row per lambda, ascending.
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the highest overall score (first on ties).
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub const CSV_HEADER: &'static str = "lambda,accuracy,cls_f1,iou,dice,seg_f1,overall,n_samples";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.lambda, r.report.metric_fields()));
        }
        out
    }
}

/// Trains one freshly initialized network per lambda (all from `cfg.seed`)
/// on up to `jobs` threads and compares their final test reports.
///
/// Results do not depend on `jobs`: every run is independent and seeded.
pub fn grid_search_lambda(
    net_config: &NetConfig,
    data: &Dataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    lambdas: &[f64],
    jobs: usize,
) -> Result<GridResult> {
    if lambdas.is_empty() {
        return Err(Error::Config(vec!["lambda grid is empty".into()]));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(vec![format!("grid lambda {bad} is outside [0, 1]")]));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config(vec!["grid search needs at least one epoch".into()]));
    }
    net_config.validate()?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let run = |lambda: f64| -> Result<GridRow> {
        let net = MultiTaskNet::init(net_config.clone(), cfg.seed)?;
        let run_cfg = TrainConfig { lambda, checkpoint_dir: None, ..cfg.clone() };
        let outcome = train(net, data, split, &run_cfg)?;
        let report = outcome.final_report().cloned().expect("last epoch is always evaluated");
        log::info!("lambda {lambda}: {report}");
        Ok(GridRow { lambda, report, history: outcome.history, net: outcome.net })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))?;
    let rows = pool.install(|| sorted.par_iter().map(|&l| run(l)).collect::<Result<Vec<_>>>())?;

    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.report.overall > rows[best].report.overall { i } else { best });
    Ok(GridResult { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_nine_points() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[8] - 0.9).abs() < 1e-12);
    }
}
