//! Autoencoder training on fire states, emulator training with frozen
//! autoencoder weights, and the hyper-parameter grid runner.

mod grid;
mod loss;

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{results_csv, results_header, run_grid, score_config, GridContext, GridRow};
pub use loss::{emulator_loss, emulator_loss_grad, masked_loss_and_grad, pad_mask_adjust, LossConfig};

use crate::dataset::{perimeter_points, FireTable, SampleStore, TrainStats};
use crate::emulator::{Autoencoder, ClampGrad, Emulator, ModelConfig, Stepper};
use crate::error::{Error, Result};
use crate::evaluation::{burned_mask, default_threshold, jaccard, state_array};
use crate::nn::params::{checksum, zeroed};
use crate::nn::{Adam, Params};
use crate::rng::{child_rng, derive_seed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub c: usize,
    pub d: usize,
    pub p: usize,
    pub batch_size: usize,
    pub ae_epochs: usize,
    pub emulator_epochs: usize,
    pub learning_rate: f64,
    pub samples_per_fire: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { c: 512, d: 1, p: 32, batch_size: 16, ae_epochs: 20, emulator_epochs: 50, learning_rate: 1e-3, samples_per_fire: 32, tau: 1e-12, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if ![128, 256, 512].contains(&self.c) || ![1, 2].contains(&self.d) || ![32, 64].contains(&self.p) {
            return Err(Error::config(format!("grid point ({}c, {}d, {}p) outside c in {{128,256,512}}, d in {{1,2}}, p in {{32,64}}", self.c, self.d, self.p)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.tau > 0.0) {
            return Err(Error::config("batch_size, learning_rate and tau must be positive"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}c, {}d, {}p", self.c, self.d, self.p)
    }

    pub fn side(&self) -> usize {
        self.c + 2 * self.p
    }

    /// The ten (c, d, p) points of the standard experiment grid.
    pub fn standard_grid(base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for c in [512, 256] {
            for d in [1, 2] {
                for p in [32, 64] {
                    out.push(TrainConfig { c, d, p, ..base.clone() });
                }
            }
        }
        out.extend([1, 2].map(|d| TrainConfig { c: 128, d, p: 32, ..base.clone() }));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    /// Mean training MAE per epoch.
    pub train_mae: Vec<f64>,
    pub held_out_mae: f64,
}

fn mean_abs<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().as_f64()).sum::<f64>() / a.len() as f64
}

fn non_finite(what: &str, epoch: usize, value: f64) -> Error {
    Error::Numerical(format!("{what} became {value} in epoch {epoch}; lower the learning rate or check inputs"))
}

/// Mean held-out reconstruction MAE.
pub fn reconstruction_mae<T: Scalar>(ae: &Autoencoder<T>, states: &[Array2<T>]) -> Result<f64> {
    let errs = states.par_iter().map(|s| ae.reconstruction_mae(s)).collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Fits the decoder to minimize `MAE(decode(encode(x)), x)`, then freezes it.
pub fn train_autoencoder<T: Scalar>(
    states: &[Array2<T>],
    held_out: &[Array2<T>],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Autoencoder<T>, AeReport)> {
    model.validate()?;
    if states.is_empty() {
        return Err(Error::config("autoencoder training needs at least one state"));
    }
    let mut rng = child_rng(cfg.seed, "ae-init", 0);
    let mut ae = Autoencoder::new(&mut rng, model.decoder_channels);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut train_mae = Vec::with_capacity(cfg.ae_epochs);
    for epoch in 0..cfg.ae_epochs {
        order.shuffle(&mut child_rng(cfg.seed, "ae-shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let x = &states[i];
                    let (y, cache) = ae.decode_cached(&ae.encode(x)?)?;
                    let n = T::of(x.len() as f64);
                    let g = ndarray::Zip::from(&y).and(x).map_collect(|&a, &b| if a > b { n.recip() } else if a < b { -n.recip() } else { T::zero() });
                    let mut grads = zeroed(&ae);
                    ae.decode_backward(&cache, &g, Some(&mut grads), ClampGrad::StraightThrough)?;
                    Ok((mean_abs(&y, x), grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = zeroed(&ae);
            for (mae, g) in &parts {
                total += mae;
                add_into(&mut grads, g);
            }
            opt.step(&mut ae, &grads, 1.0 / batch.len() as f64);
        }
        let mae = total / states.len() as f64;
        if !mae.is_finite() {
            return Err(non_finite("autoencoder MAE", epoch, mae));
        }
        log::info!("autoencoder epoch {epoch}: train MAE {mae:.3e}");
        train_mae.push(mae);
    }
    let held_out_mae = if held_out.is_empty() { f64::NAN } else { reconstruction_mae(&ae, held_out)? };
    ae.frozen = true;
    Ok((ae, AeReport { train_mae, held_out_mae }))
}

fn add_into<T: Scalar, M: Params<T>>(acc: &mut M, g: &M) {
    let mut flat = Vec::new();
    g.visit("", &mut |_, s| flat.extend_from_slice(s));
    let mut off = 0;
    acc.visit_mut("", &mut |_, s| {
        for (a, b) in s.iter_mut().zip(&flat[off..]) {
            *a += *b;
        }
        off += s.len();
    });
}

/// Fire states cut from the listed fires: `count` windows of `side`×`side`
/// centred on perimeter points at uniformly drawn growing intervals.
pub fn fire_state_crops<T: Scalar>(fires: &FireTable, seeds: &[u64], count: usize, side: usize, t_max: usize, seed: u64) -> Result<Vec<Array2<T>>> {
    let mut rng = child_rng(seed, "ae-crops", 0);
    let usable: Vec<_> = seeds
        .iter()
        .map(|s| fires.get(s).ok_or_else(|| Error::Missing { path: format!("scenario {s}").into(), hint: "run `pyroemu simulate`".into() }))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter_map(|f| {
            let ts: Vec<usize> = (0..=t_max).filter(|&t| f.arrival.burned_count_at(t as f64) > 1).collect();
            (!ts.is_empty()).then_some((f, ts))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Domain("no fire grows beyond its ignition pixel".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (fire, ts) = &usable[rng.gen_range(0..usable.len())];
        let t = ts[rng.gen_range(0..ts.len())];
        let state = state_array::<T>(&fire.arrival, t, t_max);
        let perim = perimeter_points(&state)?;
        let center = perim[rng.gen_range(0..perim.len())];
        let (r0, c0) = crate::dataset::window_origin(center, side, state.dim())?;
        out.push(state.slice(ndarray::s![r0..r0 + side, c0..c0 + side]).to_owned());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_jaccard: f64,
}

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_jaccard\n");
    for l in logs {
        let _ = writeln!(out, "{},{},{},{}", l.epoch, l.train_loss, l.val_loss, l.val_jaccard);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorReport {
    /// Mean loss of the untrained model on the first training batch.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub ae_checksum: String,
}

/// Loss and single-step Jaccard of a model on a store (no gradients).
pub fn score_store<T: Scalar>(emu: &Emulator<T>, store: &SampleStore, limit: Option<usize>, tau: f64) -> Result<(f64, f64)> {
    let n = limit.map_or(store.len(), |l| l.min(store.len()));
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let theta = default_threshold(store.manifest.t_max);
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = store.get::<T>(i)?;
            let y = emu.forward(&s)?;
            let (loss, _) = masked_loss_and_grad(&s.input_state, &s.target_state, &y, &s.pad_mask, tau);
            let j = jaccard(&burned_mask(&y, theta), &burned_mask(&s.target_state, theta))?;
            Ok((loss, j))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = scores.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let jac = scores.iter().map(|s| s.1).sum::<f64>() / n as f64;
    Ok((loss, jac))
}

fn batch_gradient<T: Scalar>(emu: &Emulator<T>, store: &SampleStore, batch: &[usize], tau: f64) -> Result<(f64, Stepper<T>)> {
    let parts = batch
        .par_iter()
        .map(|&i| {
            let s = store.get::<T>(i)?;
            let (y, cache) = emu.forward_train(&s)?;
            let (loss, g) = masked_loss_and_grad(&s.input_state, &s.target_state, &y, &s.pad_mask, tau);
            let mut grads = zeroed(&emu.net);
            emu.backward(&cache, &g.mapv(T::of), &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = zeroed(&emu.net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        add_into(&mut grads, g);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Trains the stepper with the autoencoder frozen. `on_epoch` sees each log
/// entry as soon as it is produced.
pub fn train_emulator<T: Scalar>(
    train: &SampleStore,
    val: &SampleStore,
    ae: Autoencoder<T>,
    stats: TrainStats,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Emulator<T>, EmulatorReport)> {
    if !ae.frozen {
        return Err(Error::config("autoencoder weights are not frozen; train them with `pyroemu train-ae` first"));
    }
    if train.is_empty() {
        return Err(Error::config("training store is empty"));
    }
    let ae_sum = checksum(&ae);
    let model = ModelConfig { unet_depth: cfg.d, ..model.clone() };
    let mut emu = Emulator::new(&mut child_rng(cfg.seed, "emulator-init", 0), model, stats, ae)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let first: Vec<usize> = order.iter().copied().take(cfg.batch_size).collect();
    let (initial_loss, _) = batch_gradient(&emu, train, &first, cfg.tau)?;
    let mut epochs = Vec::with_capacity(cfg.emulator_epochs);
    for epoch in 0..cfg.emulator_epochs {
        order.shuffle(&mut child_rng(derive_seed(cfg.seed, "shuffle", 0), "epoch", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradient(&emu, train, batch, cfg.tau)?;
            if !loss.is_finite() {
                return Err(non_finite("emulator loss", epoch, loss));
            }
            total += loss * batch.len() as f64;
            opt.step(&mut emu.net, &grads, 1.0 / batch.len() as f64);
        }
        let (val_loss, val_jaccard) = score_store(&emu, val, None, cfg.tau)?;
        let log = EpochLog { epoch, train_loss: total / train.len() as f64, val_loss, val_jaccard };
        log::info!("epoch {epoch}: train {:.4} val {:.4} val Jaccard {:.4}", log.train_loss, log.val_loss, log.val_jaccard);
        on_epoch(&log);
        epochs.push(log);
    }
    let after = checksum(&emu.ae);
    if after != ae_sum {
        return Err(Error::Numerical("autoencoder parameters changed during emulator training".into()));
    }
    Ok((emu, EmulatorReport { initial_loss, epochs, ae_checksum: after }))
}

/// Shared fire table handle used by stores and evaluation.
pub type Fires = Arc<FireTable>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, normalize_units, FireRecord, SplitSpec};
    use crate::firesim::{simulate, RosParams};
    use crate::worldgen::{gen_scenario, WorldgenConfig};

    pub(crate) fn tiny_fires(n: u64, side: usize) -> (Fires, TrainStats) {
        let cfg = WorldgenConfig { side_px: (side, side), ..Default::default() };
        let scen: Vec<_> = (0..n).map(|s| gen_scenario(s, &cfg).unwrap()).collect();
        let stats = TrainStats::from_training(&scen.iter().collect::<Vec<_>>(), 4).unwrap();
        let table = scen
            .iter()
            .map(|s| (s.seed, Arc::new(FireRecord { norm: normalize_units(s, &stats, 4).unwrap(), arrival: simulate(s, &RosParams::default(), 22).unwrap() })))
            .collect();
        (Arc::new(table), stats)
    }

    #[test]
    fn config_grid_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { c: 64, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { d: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { p: 16, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().label(), "512c, 1d, 32p");
        let grid = TrainConfig::standard_grid(&TrainConfig::default());
        assert_eq!(grid.len(), 10);
        assert!(grid.iter().all(|g| g.validate().is_ok() && g.side() % 8 == 0));
    }

    #[test]
    fn autoencoder_training_reduces_error_and_freezes() {
        let (fires, _) = tiny_fires(3, 96);
        let seeds: Vec<u64> = fires.keys().copied().collect();
        let states = fire_state_crops::<f32>(&fires, &seeds, 48, 32, 22, 1).unwrap();
        let cfg = TrainConfig { ae_epochs: 3, batch_size: 8, ..Default::default() };
        let (ae, rep) = train_autoencoder(&states, &states[..8], &ModelConfig::default(), &cfg).unwrap();
        assert!(ae.frozen);
        assert!(rep.train_mae[2] < rep.train_mae[0]);
        let (again, rep2) = train_autoencoder(&states, &states[..8], &ModelConfig::default(), &cfg).unwrap();
        assert_eq!(again, ae);
        assert_eq!(rep2, rep);
        let zeros = vec![Array2::<f32>::zeros((32, 32)); 16];
        let (_, zrep) = train_autoencoder(&zeros, &zeros, &ModelConfig::default(), &TrainConfig { ae_epochs: 40, ..cfg }).unwrap();
        assert!(zrep.held_out_mae < 1e-3, "{}", zrep.held_out_mae);
    }

    #[test]
    fn emulator_training_keeps_autoencoder_frozen() {
        let (fires, stats) = tiny_fires(3, 192);
        let split = SplitSpec::from_seeds(&[0, 1, 2], 2).unwrap();
        let cfg = TrainConfig { c: 128, p: 32, batch_size: 2, emulator_epochs: 1, samples_per_fire: 2, ..Default::default() };
        let (train, val) = build_dataset(fires, &split, cfg.c, cfg.p, cfg.samples_per_fire, 3, 22).unwrap();
        let mut ae = Autoencoder::<f32>::new(&mut crate::rng::rng_from(1), 8);
        assert!(train_emulator(&train, &val, ae.clone(), stats, &ModelConfig::default(), &cfg, |_| {}).is_err());
        ae.frozen = true;
        let mut seen = 0;
        let (emu, rep) = train_emulator(&train, &val, ae.clone(), stats, &ModelConfig::default(), &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 1);
        assert!(rep.initial_loss.is_finite());
        assert_eq!(emu.ae, ae);
        assert_eq!(rep.ae_checksum, checksum(&ae));
        assert!(rep.epochs[0].val_jaccard >= 0.0 && rep.epochs[0].val_jaccard <= 1.0);
        assert!(epoch_csv(&rep.epochs).starts_with("epoch,train_loss,val_loss,val_jaccard\n0,"));
    }
}
