use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::io::{load_image, read_depth, resize_bilinear, save_png, write_airlight, write_dpth};
use crate::data::{index_mrfid, list_pngs, make_toy_dataset, FogLevel, ToyDataset, UnpairedDataset};
use crate::error::{Error, Result};
use crate::fogmodel::{synthesize_fog, transmission_from_depth, AtmosphericLight, DepthMap, ImageTensor};
use crate::metrics::{bave_indicators, fog_density_proxy};
use crate::trainer::{train, DefogModel, TrainOutputs, Trainer};

use super::config::RunConfig;

/// Files that could not be processed, with the reason.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Skipped(pub Vec<(PathBuf, String)>);

impl Skipped {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn report(&self) {
        for (p, why) in &self.0 {
            log::warn!("skipped {}: {why}", p.display());
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(vec![format!("cannot start {workers} workers: {e}")]))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Splits per-file results into outputs and skips, keeping input order.
fn partition<T>(results: Vec<(PathBuf, Result<T>)>) -> (Vec<T>, Skipped) {
    let mut ok = Vec::new();
    let mut skipped = Skipped::default();
    for (p, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => skipped.0.push((p, e.to_string())),
        }
    }
    (ok, skipped)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let dataset = UnpairedDataset::scan(&cfg.data.foggy_dir, &cfg.data.clear_dir, cfg.train.image_size, cfg.train.seed)?;
    let outputs = TrainOutputs {
        checkpoint_dir: cfg.checkpoint_dir(),
        loss_log: cfg.output.dir.join("losses.csv"),
    };
    log::info!(
        "training on {} foggy and {} clear images for {} iterations",
        dataset.sizes().0,
        dataset.sizes().1,
        cfg.train.iterations
    );
    train(&cfg.train, &dataset, &outputs, resume)
}

/// Defogs every PNG of `in_dir` into `out_dir` under the same file name.
/// Returns the written paths in input order.
pub fn cmd_defog(model: &DefogModel, in_dir: &Path, out_dir: &Path, workers: usize) -> Result<(Vec<PathBuf>, Skipped)> {
    let inputs = list_pngs(in_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<(PathBuf, Result<PathBuf>)> = pool(workers)?.install(|| {
        inputs
            .par_iter()
            .map(|p| {
                let r = load_image(p).and_then(|img| model.defog(&img)).and_then(|out| {
                    let dst = out_dir.join(format!("{}.png", file_stem(p)));
                    save_png(&dst, &out).map(|_| dst)
                });
                (p.clone(), r)
            })
            .collect()
    });
    let (written, skipped) = partition(results);
    skipped.report();
    Ok((written, skipped))
}

/// Depth source of the synthesis command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// `<dir>/<stem>.dpth`, or else `<dir>/<stem>.png`, for each clear image.
    Directory(PathBuf),
    /// Linear ramp from `near` at the bottom row to `far` at the top.
    Ramp { near: f64, far: f64 },
}

/// Fogs every PNG of `clear_dir` and writes the result plus its
/// transmission and airlight sidecars under `out_dir/sidecars`.
pub fn cmd_synth(
    clear_dir: &Path,
    depth: &DepthSource,
    beta: f64,
    airlight: &AtmosphericLight,
    out_dir: &Path,
    workers: usize,
) -> Result<(Vec<PathBuf>, Skipped)> {
    let inputs = list_pngs(clear_dir)?;
    let sidecars = out_dir.join("sidecars");
    let results: Vec<(PathBuf, Result<PathBuf>)> = pool(workers)?.install(|| {
        inputs
            .par_iter()
            .map(|p| {
                let stem = file_stem(p);
                let r = (|| {
                    let clear = load_image(p)?;
                    let (h, w) = (clear.height(), clear.width());
                    let d = match depth {
                        DepthSource::Directory(dir) => {
                            let raw = dir.join(format!("{stem}.dpth"));
                            let path = if raw.is_file() { raw } else { dir.join(format!("{stem}.png")) };
                            let d = DepthMap::new(read_depth(&path)?)?;
                            clear.same_size(d.height(), d.width(), "depth map")?;
                            d
                        }
                        DepthSource::Ramp { near, far } => DepthMap::vertical_ramp(h, w, *near, *far)?,
                    };
                    let t = transmission_from_depth(&d, beta)?;
                    let foggy = synthesize_fog(&clear, &t, airlight)?;
                    let dst = out_dir.join(format!("{stem}.png"));
                    save_png(&dst, &foggy)?;
                    write_dpth(&sidecars.join(format!("{stem}.t.dpth")), t.values())?;
                    write_airlight(&sidecars.join(format!("{stem}.airlight.txt")), airlight)?;
                    Ok(dst)
                })();
                (p.clone(), r)
            })
            .collect()
    });
    let (written, skipped) = partition(results);
    skipped.report();
    Ok((written, skipped))
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub level: String,
    pub e: f64,
    pub r_bar: f64,
    pub delta: f64,
    pub fog_before: f64,
    pub fog_after: f64,
}

impl EvalRow {
    /// Name of aggregate rows in the `image` column.
    pub const MEAN: &'static str = "mean";

    fn measure(image: String, level: String, before: &ImageTensor<f64>, after: &ImageTensor<f64>) -> Result<Self> {
        let after = if (after.height(), after.width()) == (before.height(), before.width()) {
            after.clone()
        } else {
            resize_bilinear(after, before.height(), before.width())?
        };
        let b = bave_indicators(before, &after)?;
        Ok(EvalRow {
            image,
            level,
            e: b.e,
            r_bar: b.r_bar,
            delta: b.delta,
            fog_before: fog_density_proxy(before),
            fog_after: fog_density_proxy(&after),
        })
    }

    /// Column means of `rows`.
    pub fn mean(rows: &[&EvalRow], level: &str) -> EvalRow {
        let n = rows.len() as f64;
        let m = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        EvalRow {
            image: Self::MEAN.into(),
            level: level.into(),
            e: m(|r| r.e),
            r_bar: m(|r| r.r_bar),
            delta: m(|r| r.delta),
            fog_before: m(|r| r.fog_before),
            fog_after: m(|r| r.fog_after),
        }
    }
}

/// What `cmd_eval` compares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    /// Images of `before` against same-named images of `after`.
    Directories { before: PathBuf, after: PathBuf },
    /// Every fog level of every scene against its defogged version, or
    /// against the scene's clear image when no checkpoint is given.
    Mrfid { root: PathBuf, checkpoint: Option<PathBuf> },
}

/// Writes per-image rows followed by aggregate rows and returns both.
pub fn cmd_eval(source: &EvalSource, report: &Path, workers: usize) -> Result<(Vec<EvalRow>, Skipped)> {
    let pool = pool(workers)?;
    let (rows, skipped, levels): (Vec<EvalRow>, Skipped, Vec<String>) = match source {
        EvalSource::Directories { before, after } => {
            let inputs = list_pngs(before)?;
            let results = pool.install(|| {
                inputs
                    .par_iter()
                    .map(|p| {
                        let name = file_name(p);
                        let other = after.join(&name);
                        let r = if other.is_file() {
                            load_image(p).and_then(|b| EvalRow::measure(name, String::new(), &b, &load_image(&other)?))
                        } else {
                            Err(Error::Config(vec![format!("no counterpart {}", other.display())]))
                        };
                        (p.clone(), r)
                    })
                    .collect()
            });
            let (rows, skipped) = partition(results);
            (rows, skipped, vec![])
        }
        EvalSource::Mrfid { root, checkpoint } => {
            let index = index_mrfid(root)?;
            let model = checkpoint.as_deref().map(DefogModel::load).transpose()?;
            let jobs: Vec<(String, FogLevel, PathBuf, PathBuf)> = index
                .scenes
                .iter()
                .flat_map(|s| {
                    s.fog_paths
                        .iter()
                        .map(|(l, p)| (s.scene_id.clone(), *l, p.clone(), s.clear_path.clone()))
                })
                .collect();
            let results = pool.install(|| {
                jobs.par_iter()
                    .map(|(scene, level, fog, clear)| {
                        let r = load_image(fog).and_then(|before| {
                            let after = match &model {
                                Some(m) => m.defog(&before)?,
                                None => load_image(clear)?,
                            };
                            EvalRow::measure(format!("{scene}/{level}.png"), level.to_string(), &before, &after)
                        });
                        (fog.clone(), r)
                    })
                    .collect()
            });
            let (rows, mut skipped) = partition(results);
            for id in index.rejected {
                skipped.0.push((root.join(id), "no clear.png".into()));
            }
            let present: Vec<String> = FogLevel::ALL
                .iter()
                .map(|l| l.to_string())
                .filter(|l| rows.iter().any(|r| &r.level == l))
                .collect();
            (rows, skipped, present)
        }
    };
    skipped.report();
    let mut all = rows.clone();
    for level in &levels {
        let subset: Vec<&EvalRow> = rows.iter().filter(|r| &r.level == level).collect();
        all.push(EvalRow::mean(&subset, level));
    }
    if !rows.is_empty() {
        all.push(EvalRow::mean(&rows.iter().collect::<Vec<_>>(), if levels.is_empty() { "" } else { "all" }));
    }
    write_eval_csv(report, &all)?;
    Ok((all, skipped))
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "level", "e", "r_bar", "delta", "fog_before", "fog_after"])?;
    for r in rows {
        w.write_record([
            r.image.clone(),
            r.level.clone(),
            format!("{:?}", r.e),
            format!("{:?}", r.r_bar),
            format!("{:?}", r.delta),
            format!("{:?}", r.fog_before),
            format!("{:?}", r.fog_after),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn cmd_make_toy_data(out: &Path, scenes: usize, size: usize, seed: u64) -> Result<ToyDataset> {
    make_toy_dataset(out, scenes, size, seed)
}
