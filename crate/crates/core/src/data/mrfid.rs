use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FogLevel {
    Slight,
    Moderate,
    High,
    Extreme,
}

impl FogLevel {
    pub const ALL: [FogLevel; 4] = [FogLevel::Slight, FogLevel::Moderate, FogLevel::High, FogLevel::Extreme];

    pub fn file_stem(self) -> &'static str {
        match self {
            FogLevel::Slight => "slight",
            FogLevel::Moderate => "moderate",
            FogLevel::High => "high",
            FogLevel::Extreme => "extreme",
        }
    }
}

impl std::fmt::Display for FogLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrfidScene {
    pub scene_id: String,
    pub clear_path: PathBuf,
    pub fog_paths: BTreeMap<FogLevel, PathBuf>,
}

/// Scenes laid out as `root/<scene_id>/{clear,slight,moderate,high,extreme}.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrfidIndex {
    pub scenes: Vec<MrfidScene>,
    /// Scene directories without `clear.png`.
    pub rejected: Vec<String>,
}

pub fn index_mrfid(root: &Path) -> Result<MrfidIndex> {
    let rd = std::fs::read_dir(root).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", root.display())]))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(vec![format!("no scene directories under {}", root.display())]));
    }
    let mut scenes = Vec::new();
    let mut rejected = Vec::new();
    for d in dirs {
        let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let clear = d.join("clear.png");
        if !clear.is_file() {
            log::warn!("scene {id} has no clear.png; excluded");
            rejected.push(id);
            continue;
        }
        let fog_paths = FogLevel::ALL
            .iter()
            .map(|&l| (l, d.join(format!("{}.png", l.file_stem()))))
            .filter(|(_, p)| p.is_file())
            .collect();
        scenes.push(MrfidScene {
            scene_id: id,
            clear_path: clear,
            fog_paths,
        });
    }
    Ok(MrfidIndex { scenes, rejected })
}
