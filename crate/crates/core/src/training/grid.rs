//! Trains and scores a list of (c, d, p) configurations against one
//! shared dataset and frozen autoencoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{score_store, train_emulator, EmulatorReport, Fires, TrainConfig};
use crate::dataset::{build_dataset, SampleStore, SplitSpec, TrainStats};
use crate::emulator::{Autoencoder, Emulator, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_fires;
use crate::scalar::Scalar;

/// Training samples scored for the train-set Jaccard column.
const TRAIN_SCORE_LIMIT: usize = 512;

pub struct GridContext<T: Scalar> {
    pub fires: Fires,
    pub split: SplitSpec,
    pub ae: Autoencoder<T>,
    pub stats: TrainStats,
    pub model: ModelConfig,
    pub t_max: usize,
    /// Seeds sample selection; each config keeps its own `seed` for weights.
    pub seed: u64,
    /// Rollout ranges scored on the prediction fires.
    pub eval_ranges: Vec<(usize, usize)>,
    /// Stores keyed by `(c, p)`; missing pairs are built on demand.
    pub datasets: BTreeMap<(usize, usize), (SampleStore, SampleStore)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: String,
    pub c: usize,
    pub d: usize,
    pub p: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_jaccard: f64,
    pub val_jaccard: f64,
    /// `(mean, burned-area weighted)` final Jaccard per evaluation range.
    pub predictions: Vec<(f64, f64)>,
    pub status: String,
}

impl GridRow {
    fn failed(cfg: &TrainConfig, ranges: usize, err: &Error) -> Self {
        Self {
            config: cfg.label(),
            c: cfg.c,
            d: cfg.d,
            p: cfg.p,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            train_jaccard: f64::NAN,
            val_jaccard: f64::NAN,
            predictions: vec![(f64::NAN, f64::NAN); ranges],
            status: format!("failed: {err}").replace(['\n', ','], " "),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn results_header(ranges: &[(usize, usize)]) -> String {
    let mut h = String::from("config,c,d,p,train_loss,val_loss,train_jaccard,val_jaccard");
    for (a, b) in ranges {
        let _ = write!(h, ",pred_{a}_{b},pred_{a}_{b}_weighted");
    }
    h.push_str(",status");
    h
}

/// CSV with one row per configuration; failed rows keep their place.
pub fn results_csv(rows: &[GridRow], ranges: &[(usize, usize)]) -> String {
    let mut out = results_header(ranges);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "\"{}\",{},{},{},{},{},{},{}", r.config, r.c, r.d, r.p, r.train_loss, r.val_loss, r.train_jaccard, r.val_jaccard);
        for (m, w) in &r.predictions {
            let _ = write!(out, ",{m},{w}");
        }
        let _ = writeln!(out, ",{}", r.status);
    }
    out
}

/// Scores a trained model: train/validation loss and single-step Jaccard,
/// then final-interval rollout Jaccard on the prediction fires.
pub fn score_config<T: Scalar>(emu: &Emulator<T>, cfg: &TrainConfig, ctx: &GridContext<T>, train: &SampleStore, val: &SampleStore) -> Result<GridRow> {
    let (train_loss, train_jaccard) = score_store(emu, train, Some(TRAIN_SCORE_LIMIT), cfg.tau)?;
    let (val_loss, val_jaccard) = score_store(emu, val, None, cfg.tau)?;
    let pred: Vec<_> = ctx
        .split
        .prediction_fires
        .iter()
        .map(|s| ctx.fires.get(s).map(|f| f.as_ref()).ok_or_else(|| Error::Missing { path: format!("scenario {s}").into(), hint: "run `pyroemu simulate`".into() }))
        .collect::<Result<_>>()?;
    let predictions = ctx
        .eval_ranges
        .iter()
        .map(|&(a, b)| evaluate_fires::<T, _>(emu, &pred, a, b, ctx.t_max).map(|r| (r.mean_jaccard, r.weighted_jaccard)))
        .collect::<Result<_>>()?;
    Ok(GridRow {
        config: cfg.label(),
        c: cfg.c,
        d: cfg.d,
        p: cfg.p,
        train_loss,
        val_loss,
        train_jaccard,
        val_jaccard,
        predictions,
        status: "ok".into(),
    })
}

impl<T: Scalar> GridContext<T> {
    /// Prebuilt stores for `(c, p)` if present, otherwise a fresh deterministic build.
    pub fn stores(&self, c: usize, p: usize, samples_per_fire: usize) -> Result<(SampleStore, SampleStore)> {
        match self.datasets.get(&(c, p)) {
            Some(pair) => Ok(pair.clone()),
            None => build_dataset(self.fires.clone(), &self.split, c, p, samples_per_fire, self.seed, self.t_max),
        }
    }
}

fn run_one<T: Scalar>(cfg: &TrainConfig, ctx: &GridContext<T>, on_trained: &mut impl FnMut(&TrainConfig, &Emulator<T>, &EmulatorReport)) -> Result<GridRow> {
    cfg.validate()?;
    let (train, val) = ctx.stores(cfg.c, cfg.p, cfg.samples_per_fire)?;
    let (emu, report) = train_emulator(&train, &val, ctx.ae.clone(), ctx.stats, &ctx.model, cfg, |_| {})?;
    on_trained(cfg, &emu, &report);
    score_config(&emu, cfg, ctx, &train, &val)
}

/// Runs every configuration in order. A failing configuration yields a row
/// with status `failed: ...` and the grid moves on.
pub fn run_grid<T: Scalar>(
    configs: &[TrainConfig],
    ctx: &GridContext<T>,
    mut on_trained: impl FnMut(&TrainConfig, &Emulator<T>, &EmulatorReport),
) -> Vec<GridRow> {
    configs
        .iter()
        .map(|cfg| {
            log::info!("grid: training {}", cfg.label());
            run_one(cfg, ctx, &mut on_trained).unwrap_or_else(|e| {
                log::error!("grid: {} failed: {e}", cfg.label());
                GridRow::failed(cfg, ctx.eval_ranges.len(), &e)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::tests::tiny_fires;

    #[test]
    fn grid_rows_failures_and_determinism() {
        let (fires, stats) = tiny_fires(3, 192);
        let mut ae = Autoencoder::<f32>::new(&mut crate::rng::rng_from(1), 8);
        ae.frozen = true;
        let ctx = GridContext {
            fires,
            split: SplitSpec::from_seeds(&[0, 1, 2], 2).unwrap(),
            ae,
            stats,
            model: ModelConfig::default(),
            t_max: 22,
            seed: 5,
            eval_ranges: vec![(0, 22), (5, 22)],
            datasets: BTreeMap::new(),
        };
        assert!(run_grid(&[], &ctx, |_, _, _| {}).is_empty());
        let base = TrainConfig { c: 128, p: 32, batch_size: 2, emulator_epochs: 1, samples_per_fire: 2, ..Default::default() };
        let configs = [base.clone(), TrainConfig { c: 100, ..base.clone() }];
        let mut trained = 0;
        let rows = run_grid(&configs, &ctx, |_, _, _| trained += 1);
        assert_eq!(rows.len(), 2);
        assert_eq!(trained, 1);
        assert!(rows[0].is_ok(), "{}", rows[0].status);
        assert!(rows[1].status.starts_with("failed"));
        assert!(rows[0].predictions.iter().all(|(m, w)| (0.0..=1.0).contains(m) && (0.0..=1.0).contains(w)));
        let csv = results_csv(&rows, &ctx.eval_ranges);
        assert!(csv.starts_with("config,c,d,p,train_loss,val_loss,train_jaccard,val_jaccard,pred_0_22,pred_0_22_weighted,pred_5_22,pred_5_22_weighted,status\n"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(results_csv(&run_grid(&configs, &ctx, |_, _, _| {}), &ctx.eval_ranges), csv);
    }
}
