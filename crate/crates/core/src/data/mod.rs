//! Unpaired two-domain datasets, synthetic toy fog scenes and the
//! multi-level fog directory index.

pub mod io;
mod mrfid;
mod toy;

pub use mrfid::{index_mrfid, FogLevel, MrfidIndex, MrfidScene};
pub use toy::{make_toy_dataset, resynthesize, ToyDataset, ToyScene};

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogmodel::ImageTensor;
use crate::tensor::Tensor;

/// Images held in memory when the decoded dataset fits in this many bytes.
const IN_MEMORY_BUDGET: usize = 1 << 30;

/// One side of an unpaired dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Foggy,
    Clear,
}

impl Domain {
    fn stream(self) -> u64 {
        match self {
            Domain::Foggy => 1,
            Domain::Clear => 2,
        }
    }
}

/// Number of samples drawn so far from each domain. Each domain walks its
/// own sequence of per-epoch permutations, so the two never pair up by index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursors {
    pub foggy: u64,
    pub clear: u64,
}

impl Cursors {
    pub fn get(&self, d: Domain) -> u64 {
        match d {
            Domain::Foggy => self.foggy,
            Domain::Clear => self.clear,
        }
    }

    fn bump(&mut self, d: Domain) -> u64 {
        let slot = match d {
            Domain::Foggy => &mut self.foggy,
            Domain::Clear => &mut self.clear,
        };
        let k = *slot;
        *slot += 1;
        k
    }
}

#[derive(Debug, Clone)]
struct DomainFiles {
    paths: Vec<PathBuf>,
    /// Signed-range pixels at the dataset size, when they fit in memory.
    cache: Option<Vec<Tensor<f32>>>,
}

/// Foggy and clear images with no correspondence between them.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    foggy: DomainFiles,
    clear: DomainFiles,
    image_size: usize,
    shuffle_seed: u64,
    skipped: Vec<PathBuf>,
}

/// PNG files directly inside `dir`, sorted by path.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Decodes and resizes to `size×size`, returning the signed-range pixels.
pub fn load_for_network(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = io::load_image(path)?;
    let img = io::resize_bilinear(&img, size, size)?;
    Ok(img.to_signed().into_pixels().cast())
}

impl UnpairedDataset {
    /// Lists PNGs in lexicographic order; files that fail to decode are
    /// skipped and counted.
    pub fn scan(foggy_dir: &Path, clear_dir: &Path, image_size: usize, shuffle_seed: u64) -> Result<Self> {
        if image_size == 0 || image_size % 8 != 0 {
            return Err(Error::Config(vec![format!("image_size must be a positive multiple of 8, got {image_size}")]));
        }
        let mut problems = Vec::new();
        let mut skipped = Vec::new();
        let mut domains = Vec::new();
        for dir in [foggy_dir, clear_dir] {
            let paths = match list_pngs(dir) {
                Ok(p) => p,
                Err(e) => {
                    problems.push(format!("cannot read directory {}: {e}", dir.display()));
                    domains.push(Vec::new());
                    continue;
                }
            };
            let mut ok = Vec::new();
            for p in paths {
                match load_for_network(&p, image_size) {
                    Ok(t) => ok.push((p, t)),
                    Err(e) => {
                        warn!("skipping {}: {e}", p.display());
                        skipped.push(p);
                    }
                }
            }
            if ok.is_empty() {
                problems.push(format!("no decodable PNG images in {}", dir.display()));
            }
            domains.push(ok);
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let total: usize = domains.iter().map(|d| d.len()).sum::<usize>() * 3 * image_size * image_size * 4;
        let keep = total <= IN_MEMORY_BUDGET;
        let mut it = domains.into_iter().map(|d| {
            let (paths, imgs): (Vec<_>, Vec<_>) = d.into_iter().unzip();
            DomainFiles {
                paths,
                cache: keep.then_some(imgs),
            }
        });
        let foggy = it.next().unwrap();
        let clear = it.next().unwrap();
        Ok(UnpairedDataset {
            foggy,
            clear,
            image_size,
            shuffle_seed,
            skipped,
        })
    }

    fn files(&self, d: Domain) -> &DomainFiles {
        match d {
            Domain::Foggy => &self.foggy,
            Domain::Clear => &self.clear,
        }
    }

    /// `(foggy, clear)` sizes.
    pub fn sizes(&self) -> (usize, usize) {
        (self.foggy.paths.len(), self.clear.paths.len())
    }

    pub fn paths(&self, d: Domain) -> &[PathBuf] {
        &self.files(d).paths
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }

    /// File index of the `k`-th draw from domain `d`.
    pub fn index_of(&self, d: Domain, k: u64) -> usize {
        let n = self.files(d).paths.len() as u64;
        let (epoch, pos) = (k / n, k % n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(d.stream() << 32 | (epoch & 0xffff_ffff));
        let mut perm: Vec<usize> = (0..n as usize).collect();
        perm.shuffle(&mut rng);
        perm[pos as usize]
    }

    /// Signed-range pixels of file `i` of domain `d`.
    pub fn image(&self, d: Domain, i: usize) -> Result<Tensor<f32>> {
        let f = self.files(d);
        match &f.cache {
            Some(c) => Ok(c[i].clone()),
            None => load_for_network(&f.paths[i], self.image_size),
        }
    }

    /// Draws the next image of domain `d`, advancing only that domain's cursor.
    pub fn draw(&self, d: Domain, cursors: &mut Cursors) -> Result<Tensor<f32>> {
        let k = cursors.bump(d);
        self.image(d, self.index_of(d, k))
    }
}

/// Unit-range view of a signed network tensor, for metrics and airlight.
pub fn signed_to_unit_image(t: &Tensor<f32>) -> Result<ImageTensor<f64>> {
    Ok(ImageTensor::new(t.cast(), crate::fogmodel::RangeTag::Signed)?.to_unit())
}
