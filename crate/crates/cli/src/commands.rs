//! One function per pipeline stage. Each checks its inputs before doing
//! heavy work and writes under a fixed workspace layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use pyroemu::dataset::{build_dataset, normalize_units, FireRecord, FireTable, SampleStore, SplitSpec, StoreManifest, TrainStats};
use pyroemu::emulator::{load_autoencoder, load_emulator, save_autoencoder, save_emulator, Emulator};
use pyroemu::evaluation::{evaluate_fires, evaluate_rollout, render_plots};
use pyroemu::firesim::{simulate, ArrivalRaster};
use pyroemu::raster::{write_raster, Raster};
use pyroemu::rng::derive_seed;
use pyroemu::training::{epoch_csv, fire_state_crops, results_csv, run_grid, score_config, train_autoencoder, GridContext, GridRow, TrainConfig};
use pyroemu::worldgen::{gen_scenario, load_scenario, save_scenario, Scenario};
use pyroemu::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GridPoint, RunConfig};

const AE_NAME: &str = "autoencoder";

/// Fixed sub-directory layout under the workspace root.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn scenarios(&self) -> PathBuf {
        self.root.join("scenarios")
    }
    pub fn arrivals(&self) -> PathBuf {
        self.root.join("arrivals")
    }
    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing { path: path.to_path_buf(), hint: hint.into() });
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

fn scenario_name(i: usize) -> String {
    format!("{i:04}")
}

/// File stem for a grid point, e.g. `512c_1d_32p`.
pub fn model_name(g: &GridPoint) -> String {
    format!("{}c_{}d_{}p", g.c, g.d, g.p)
}

fn store_name(c: usize, p: usize, part: &str) -> String {
    format!("{c}c_{p}p_{part}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioIndex {
    /// Scenario seeds in generation order; directory `NNNN` holds entry `NNNN`.
    pub seeds: Vec<u64>,
}

pub fn scenario_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.n_scenarios as u64).map(|i| derive_seed(cfg.seed, "scenario", i)).collect()
}

pub fn cmd_worldgen(cfg: &RunConfig) -> Result<ScenarioIndex> {
    let ws = Workspace::new(&cfg.workspace);
    let dir = ws.scenarios();
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let seeds = scenario_seeds(cfg);
    seeds.par_iter().enumerate().try_for_each(|(i, &seed)| {
        let s = gen_scenario(seed, &cfg.worldgen)?;
        save_scenario(&dir.join(scenario_name(i)), &s)
    })?;
    let index = ScenarioIndex { seeds };
    write_file(&dir.join("index.json"), &serde_json::to_string_pretty(&index)?)?;
    log::info!("wrote {} scenarios to {}", index.seeds.len(), dir.display());
    Ok(index)
}

fn load_index(ws: &Workspace) -> Result<ScenarioIndex> {
    read_json(&ws.scenarios().join("index.json"), "run `pyroemu worldgen`")
}

fn load_scenarios(ws: &Workspace, index: &ScenarioIndex) -> Result<Vec<Scenario>> {
    (0..index.seeds.len()).into_par_iter().map(|i| load_scenario(&ws.scenarios().join(scenario_name(i)))).collect()
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<usize> {
    let ws = Workspace::new(&cfg.workspace);
    let index = load_index(&ws)?;
    let dir = ws.arrivals();
    (0..index.seeds.len()).into_par_iter().try_for_each(|i| {
        let s = load_scenario(&ws.scenarios().join(scenario_name(i)))?;
        simulate(&s, &cfg.ros, cfg.t_max)?.save(&dir, &scenario_name(i))
    })?;
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    log::info!("simulated {} fires into {}", index.seeds.len(), dir.display());
    Ok(index.seeds.len())
}

fn split_for(cfg: &RunConfig, seeds: &[u64]) -> Result<SplitSpec> {
    let mut split = SplitSpec::from_seeds(seeds, cfg.n_train.min(seeds.len()))?;
    if let Some(n) = cfg.n_prediction {
        split.prediction_fires.truncate(n);
    }
    Ok(split)
}

fn fire_table(ws: &Workspace, index: &ScenarioIndex, scenarios: &[Scenario], stats: &TrainStats) -> Result<FireTable> {
    let records = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let arrival = ArrivalRaster::load(&ws.arrivals(), &scenario_name(i)).map_err(|e| match e {
                Error::Io { path, .. } => Error::Missing { path, hint: "run `pyroemu simulate`".into() },
                other => other,
            })?;
            Ok((index.seeds[i], Arc::new(FireRecord { norm: normalize_units(s, stats, stats.slices_per_interval)?, arrival })))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub split: SplitSpec,
    pub stats: TrainStats,
}

pub fn cmd_make_dataset(cfg: &RunConfig) -> Result<DatasetInfo> {
    let ws = Workspace::new(&cfg.workspace);
    let index = load_index(&ws)?;
    if !ws.arrivals().exists() {
        return Err(Error::Missing { path: ws.arrivals(), hint: "run `pyroemu simulate`".into() });
    }
    let split = split_for(cfg, &index.seeds)?;
    let scenarios = load_scenarios(&ws, &index)?;
    let train: Vec<&Scenario> = scenarios.iter().filter(|s| split.train_fires.contains(&s.seed)).collect();
    let stats = TrainStats::from_training(&train, cfg.model.slices_per_interval)?;
    let fires = Arc::new(fire_table(&ws, &index, &scenarios, &stats)?);
    let info = DatasetInfo { split, stats };
    write_file(&ws.datasets().join("dataset.json"), &serde_json::to_string_pretty(&info)?)?;
    let mut pairs: Vec<(usize, usize)> = cfg.grid.iter().map(|g| (g.c, g.p)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    for (c, p) in pairs {
        let (tr, va) = build_dataset(fires.clone(), &info.split, c, p, cfg.train.samples_per_fire, derive_seed(cfg.seed, "dataset", 0), cfg.t_max)?;
        tr.manifest.save(&ws.datasets().join(store_name(c, p, "train")))?;
        va.manifest.save(&ws.datasets().join(store_name(c, p, "val")))?;
        log::info!("dataset {c}c/{p}p: {} train, {} validation samples", tr.len(), va.len());
    }
    Ok(info)
}

/// Everything downstream of `make-dataset`.
pub struct Loaded {
    pub info: DatasetInfo,
    pub fires: Arc<FireTable>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Loaded> {
    let ws = Workspace::new(&cfg.workspace);
    let index = load_index(&ws)?;
    let info: DatasetInfo = read_json(&ws.datasets().join("dataset.json"), "run `pyroemu make-dataset`")?;
    let scenarios = load_scenarios(&ws, &index)?;
    let fires = Arc::new(fire_table(&ws, &index, &scenarios, &info.stats)?);
    Ok(Loaded { info, fires })
}

fn load_stores(ws: &Workspace, fires: &Arc<FireTable>, c: usize, p: usize) -> Result<(SampleStore, SampleStore)> {
    let train = StoreManifest::load(&ws.datasets().join(store_name(c, p, "train")))?;
    let val = StoreManifest::load(&ws.datasets().join(store_name(c, p, "val")))?;
    Ok((SampleStore::new(train, fires.clone())?, SampleStore::new(val, fires.clone())?))
}

pub fn cmd_train_ae(cfg: &RunConfig) -> Result<pyroemu::training::AeReport> {
    let ws = Workspace::new(&cfg.workspace);
    let data = load_dataset(cfg)?;
    let seed = derive_seed(cfg.seed, "autoencoder", 0);
    let crops = fire_state_crops::<f32>(&data.fires, &data.info.split.train_fires, cfg.ae_crops, cfg.ae_crop_side, cfg.t_max, seed)?;
    let held_out = if data.info.split.val_fires.is_empty() || cfg.ae_held_out == 0 {
        Vec::new()
    } else {
        fire_state_crops::<f32>(&data.fires, &data.info.split.val_fires, cfg.ae_held_out, cfg.ae_crop_side, cfg.t_max, seed ^ 1)?
    };
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let (ae, report) = train_autoencoder(&crops, &held_out, &cfg.model, &tc)?;
    save_autoencoder(&ws.checkpoints(), AE_NAME, &ae, &cfg.model)?;
    write_file(&ws.reports().join("autoencoder.json"), &serde_json::to_string_pretty(&report)?)?;
    log::info!("autoencoder held-out MAE {:.3e}", report.held_out_mae);
    Ok(report)
}

fn grid_context(cfg: &RunConfig, ws: &Workspace, data: &Loaded) -> Result<GridContext<f32>> {
    let (ae, _) = load_autoencoder::<f32>(&ws.checkpoints(), AE_NAME)?;
    let mut datasets = BTreeMap::new();
    for g in &cfg.grid {
        if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry((g.c, g.p)) {
            e.insert(load_stores(ws, &data.fires, g.c, g.p)?);
        }
    }
    Ok(GridContext {
        fires: data.fires.clone(),
        split: data.info.split.clone(),
        ae,
        stats: data.info.stats,
        model: cfg.model.clone(),
        t_max: cfg.t_max,
        seed: derive_seed(cfg.seed, "dataset", 0),
        eval_ranges: cfg.eval_ranges.clone(),
        datasets,
    })
}

/// Trains every grid point, saving one checkpoint and epoch log per point,
/// and writes `reports/results.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<GridRow>> {
    let ws = Workspace::new(&cfg.workspace);
    let data = load_dataset(cfg)?;
    let ctx = grid_context(cfg, &ws, &data)?;
    if !ctx.ae.frozen {
        return Err(Error::Config("autoencoder checkpoint is not frozen; rerun `pyroemu train-ae`".into()));
    }
    let configs: Vec<TrainConfig> = cfg.grid_configs().into_iter().map(|t| TrainConfig { seed: derive_seed(cfg.seed, "emulator", 0), ..t }).collect();
    let mut save_err = None;
    let rows = run_grid(&configs, &ctx, |tc, emu, report| {
        let name = model_name(&GridPoint { c: tc.c, d: tc.d, p: tc.p });
        let res = save_emulator(&ws.checkpoints(), &name, emu).and_then(|_| write_file(&ws.reports().join(format!("train_{name}.csv")), &epoch_csv(&report.epochs)));
        if let Err(e) = res {
            save_err.get_or_insert(e);
        }
    });
    if let Some(e) = save_err {
        return Err(e);
    }
    write_file(&ws.reports().join("results.csv"), &results_csv(&rows, &cfg.eval_ranges))?;
    Ok(rows)
}

fn load_model(ws: &Workspace, g: &GridPoint) -> Result<Emulator<f32>> {
    load_emulator::<f32>(&ws.checkpoints(), &model_name(g))
}

/// Rescores saved checkpoints and writes `reports/evaluation.csv` plus
/// per-model JSON reports and per-interval series.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<GridRow>> {
    let ws = Workspace::new(&cfg.workspace);
    let data = load_dataset(cfg)?;
    let ctx = grid_context(cfg, &ws, &data)?;
    let models = cfg.grid.iter().map(|g| load_model(&ws, g)).collect::<Result<Vec<_>>>()?;
    let pred: Vec<&FireRecord> = ctx.split.prediction_fires.iter().map(|s| ctx.fires[s].as_ref()).collect();
    let mut rows = Vec::new();
    for (g, emu) in cfg.grid.iter().zip(&models) {
        let tc = cfg.train_config(g);
        let (train, val) = ctx.stores(g.c, g.p, tc.samples_per_fire)?;
        rows.push(score_config(emu, &tc, &ctx, &train, &val)?);
        for &(a, b) in &cfg.eval_ranges {
            let report = evaluate_fires::<f32, _>(emu, &pred, a, b, cfg.t_max)?;
            let stem = format!("eval_{}_{a}_{b}", model_name(g));
            report.save_json(&ws.reports().join(format!("{stem}.json")))?;
            write_file(&ws.reports().join(format!("{stem}_series.csv")), &report.series_csv())?;
        }
    }
    write_file(&ws.reports().join("evaluation.csv"), &results_csv(&rows, &cfg.eval_ranges))?;
    Ok(rows)
}

fn grid_point(cfg: &RunConfig, label: Option<&str>) -> Result<GridPoint> {
    match label {
        None => cfg.grid.first().copied().ok_or_else(|| Error::Config("the grid is empty".into())),
        Some(l) => cfg.grid.iter().copied().find(|g| model_name(g) == l).ok_or_else(|| Error::Config(format!("model `{l}` is not in the grid"))),
    }
}

fn fire_by_index<'a>(data: &'a Loaded, ws: &Workspace, fire: usize) -> Result<&'a FireRecord> {
    let index = load_index(ws)?;
    let seed = *index.seeds.get(fire).ok_or_else(|| Error::Config(format!("fire {fire} out of range (0..{})", index.seeds.len())))?;
    Ok(data.fires[&seed].as_ref())
}

/// Rolls one fire forward and writes every state raster plus the plots.
pub fn cmd_predict(cfg: &RunConfig, fire: usize, model: Option<&str>, range: (usize, usize)) -> Result<PathBuf> {
    let ws = Workspace::new(&cfg.workspace);
    let g = grid_point(cfg, model)?;
    let emu = load_model(&ws, &g)?;
    let data = load_dataset(cfg)?;
    let record = fire_by_index(&data, &ws, fire)?;
    let result = evaluate_rollout::<f32, _>(&emu, record, range.0, range.1, cfg.t_max)?;
    let dir = ws.reports().join("predict").join(format!("{}_{}", scenario_name(fire), model_name(&g)));
    for (k, s) in result.states.iter().enumerate() {
        write_raster(&dir, &format!("state_t{:02}", range.0 + k), &to_raster(s), "fire state")?;
    }
    write_raster(&dir, "arrival_diff", &result.diff, "intervals")?;
    render_plots(&dir, "rollout", &result, range.0, cfg.t_max)?;
    write_file(&dir.join("eval.json"), &serde_json::to_string_pretty(&result.eval)?)?;
    Ok(dir)
}

fn to_raster(a: &Array2<f32>) -> Raster<f32> {
    let (h, w) = a.dim();
    Raster::from_fn(h, w, |r, c| a[[r, c]])
}

/// Contour panels and diff maps for every prediction fire.
pub fn cmd_plot(cfg: &RunConfig, model: Option<&str>, range: (usize, usize)) -> Result<Vec<PathBuf>> {
    let ws = Workspace::new(&cfg.workspace);
    let g = grid_point(cfg, model)?;
    let emu = load_model(&ws, &g)?;
    let data = load_dataset(cfg)?;
    let dir = ws.reports().join("plots").join(model_name(&g));
    let mut paths = Vec::new();
    for seed in &data.info.split.prediction_fires {
        let result = evaluate_rollout::<f32, _>(&emu, &data.fires[seed], range.0, range.1, cfg.t_max)?;
        paths.extend(render_plots(&dir, &format!("fire_{seed:016x}_{}_{}", range.0, range.1), &result, range.0, cfg.t_max)?);
    }
    Ok(paths)
}
