use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_image, quantize8, save_png, write_airlight, write_atomic, write_dpth};
use crate::error::{Error, Result};
use crate::fogmodel::{synthesize_fog, transmission_from_depth, AtmosphericLight, DepthMap, ImageTensor, RangeTag, TransmissionMap};
use crate::tensor::{Shape, Tensor};

const BETA_RANGE: (f64, f64) = (0.5, 2.5);
const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
const SINUSOIDS: usize = 4;
const MAX_CYCLES: f64 = 4.0;

/// Ground truth of one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub name: String,
    pub beta: f64,
    pub airlight: [f64; 3],
}

/// Paths of a generated toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub clear_dir: PathBuf,
    pub foggy_dir: PathBuf,
    pub sidecar_dir: PathBuf,
    pub scenes: Vec<ToyScene>,
}

impl ToyDataset {
    pub fn clear_path(&self, i: usize) -> PathBuf {
        self.clear_dir.join(format!("{}.png", self.scenes[i].name))
    }

    pub fn foggy_path(&self, i: usize) -> PathBuf {
        self.foggy_dir.join(format!("{}.png", self.scenes[i].name))
    }

    pub fn transmission_path(&self, i: usize) -> PathBuf {
        self.sidecar_dir.join(format!("{}.t.dpth", self.scenes[i].name))
    }

    pub fn airlight_path(&self, i: usize) -> PathBuf {
        self.sidecar_dir.join(format!("{}.airlight.txt", self.scenes[i].name))
    }
}

/// Smooth random scene: a colored linear gradient plus a few low-frequency
/// plane waves, stretched to `[0.02, 0.98]` and quantized to 8 bits.
fn clear_scene(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let grad: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]).collect();
    let waves: Vec<[f64; 4]> = (0..SINUSOIDS)
        .map(|_| {
            [
                rng.gen_range(0.1..0.25),
                rng.gen_range(-MAX_CYCLES..MAX_CYCLES),
                rng.gen_range(-MAX_CYCLES..MAX_CYCLES),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..1.4)).collect();
    let n = size as f64;
    let raw = Tensor::from_fn(Shape::new(3, size, size), |c, y, x| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        let s: f64 = waves.iter().map(|[a, fx, fy, ph]| a * (2.0 * PI * (fx * u + fy * v) + ph).sin()).sum();
        grad[c][0] + grad[c][1] * u + grad[c][2] * v + tint[c] * s
    });
    let (lo, hi) = raw.min_max();
    let span = (hi - lo).max(1e-9);
    raw.map(|v| quantize8(0.02 + 0.96 * (v - lo) / span) as f64 / 255.0)
}

/// Linear depth ramp along a random direction within 45° of vertical,
/// deepest toward the top of the frame.
fn ramp_depth(size: usize, rng: &mut ChaCha8Rng) -> Result<DepthMap> {
    let near = rng.gen_range(0.0..0.3);
    let far = rng.gen_range(0.7..1.2);
    let theta: f64 = rng.gen_range(-PI / 4.0..PI / 4.0);
    let (cy, sx) = (theta.cos(), theta.sin());
    let d = (size.max(2) - 1) as f64;
    let proj = |y: usize, x: usize| cy * (1.0 - y as f64 / d) + sx * (x as f64 / d - 0.5);
    let (lo, hi) = (proj(size - 1, if sx > 0.0 { 0 } else { size - 1 }), proj(0, if sx > 0.0 { size - 1 } else { 0 }));
    DepthMap::new(Tensor::from_fn(Shape::new(1, size, size), |_, y, x| {
        near + (far - near) * ((proj(y, x) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }))
}

/// Writes `root/clear`, `root/foggy` and `root/sidecars` (transmission grid
/// and airlight text per scene) plus `root/scenes.json`.
pub fn make_toy_dataset(root: &Path, n_scenes: usize, size: usize, seed: u64) -> Result<ToyDataset> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::param("size", format!("must be a positive multiple of 8, got {size}")));
    }
    let ds = ToyDataset {
        clear_dir: root.join("clear"),
        foggy_dir: root.join("foggy"),
        sidecar_dir: root.join("sidecars"),
        scenes: (0..n_scenes)
            .map(|i| ToyScene {
                name: format!("scene_{i:03}"),
                beta: 0.0,
                airlight: [0.0; 3],
            })
            .collect(),
    };
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_scenes {
        let clear = ImageTensor::new(clear_scene(size, &mut rng), RangeTag::Unit)?;
        let depth = ramp_depth(size, &mut rng)?;
        let beta = rng.gen_range(BETA_RANGE.0..BETA_RANGE.1);
        let a = AtmosphericLight::new([0, 1, 2].map(|_| rng.gen_range(AIRLIGHT_RANGE.0..AIRLIGHT_RANGE.1)))?;
        // Round T to the sidecar's f32 precision so the sidecar reproduces the PNG.
        let t = transmission_from_depth(&depth, beta)?;
        let t = TransmissionMap::new(t.values().map(|v| v as f32 as f64))?;
        let foggy = synthesize_fog(&clear, &t, &a)?;
        save_png(&ds.clear_path(i), &clear)?;
        save_png(&ds.foggy_path(i), &foggy)?;
        write_dpth(&ds.transmission_path(i), t.values())?;
        write_airlight(&ds.airlight_path(i), &a)?;
        scenes.push(ToyScene {
            name: ds.scenes[i].name.clone(),
            beta,
            airlight: a.rgb,
        });
    }
    let ds = ToyDataset { scenes, ..ds };
    let json = serde_json::to_vec_pretty(&ds.scenes).expect("plain data serializes");
    write_atomic(&root.join("scenes.json"), &json)?;
    Ok(ds)
}

/// Resynthesizes scene `i` from its clear PNG and sidecars.
pub fn resynthesize(ds: &ToyDataset, i: usize) -> Result<ImageTensor<f64>> {
    let clear = load_image(&ds.clear_path(i))?;
    let t = TransmissionMap::new(super::io::read_dpth(&ds.transmission_path(i))?)?;
    let a = super::io::read_airlight(&ds.airlight_path(i))?;
    synthesize_fog(&clear, &t, &a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files(dir: &Path) -> Vec<PathBuf> {
        let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    }

    #[test]
    fn counts_and_sidecar_resynthesis() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 16, 64, 3).unwrap();
        assert_eq!(files(&ds.clear_dir).len(), 16);
        assert_eq!(files(&ds.foggy_dir).len(), 16);
        let side = files(&ds.sidecar_dir);
        assert_eq!(side.iter().filter(|p| p.to_string_lossy().ends_with(".t.dpth")).count(), 16);
        assert_eq!(side.iter().filter(|p| p.to_string_lossy().ends_with(".airlight.txt")).count(), 16);
        for (i, s) in ds.scenes.iter().enumerate() {
            assert!((BETA_RANGE.0..BETA_RANGE.1).contains(&s.beta));
            assert!(s.airlight.iter().all(|a| (AIRLIGHT_RANGE.0..AIRLIGHT_RANGE.1).contains(a)));
            let again = resynthesize(&ds, i).unwrap();
            let png = load_image(&ds.foggy_path(i)).unwrap();
            for (a, b) in again.pixels().data().iter().zip(png.pixels().data()) {
                assert!((a - b).abs() <= 1.0 / 255.0, "scene {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        make_toy_dataset(a.path(), 3, 32, 77).unwrap();
        make_toy_dataset(b.path(), 3, 32, 77).unwrap();
        for sub in ["clear", "foggy", "sidecars"] {
            let (fa, fb) = (files(&a.path().join(sub)), files(&b.path().join(sub)));
            assert_eq!(fa.len(), fb.len());
            for (x, y) in fa.iter().zip(&fb) {
                assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
            }
        }
        assert!(make_toy_dataset(a.path(), 1, 30, 1).is_err());
    }

    #[test]
    fn scenes_are_foggier_than_their_sources() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 6, 32, 5).unwrap();
        for i in 0..6 {
            let c = load_image(&ds.clear_path(i)).unwrap();
            let f = load_image(&ds.foggy_path(i)).unwrap();
            let dc = |img: &ImageTensor<f64>| crate::fogmodel::dark_channel(img, 15).unwrap().mean();
            assert!(dc(&f) > dc(&c));
        }
    }
}
