//! Support directories (`class_dir/shot_*.png`) and the class index written
//! next to a corpus.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use glyphslot::bitmap::Bitmap;
use glyphslot::datagen::{Atlas, Split};
use serde::{Deserialize, Serialize};

/// One entry of `classes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    /// Atlas path, `alphabet/character`.
    pub name: String,
    /// Directory name under `supports/`.
    pub dir: String,
}

pub fn class_dir_name(name: &str) -> String {
    name.replace(['/', '\\'], "-")
}

pub fn class_index(atlas: &Atlas, split: Split) -> Vec<ClassEntry> {
    atlas
        .class_ids(split)
        .into_iter()
        .map(|id| {
            let name = atlas.class(id).name.clone();
            ClassEntry { id, dir: class_dir_name(&name), name }
        })
        .collect()
}

pub fn write_class_index(path: &Path, entries: &[ClassEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_class_index(path: &Path) -> Result<Vec<ClassEntry>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes every support-pool sample of the split as `dir/class/shot_NN.png`.
pub fn write_supports(dir: &Path, atlas: &Atlas, split: Split) -> Result<()> {
    for entry in class_index(atlas, split) {
        let class_dir = dir.join(&entry.dir);
        fs::create_dir_all(&class_dir).with_context(|| format!("creating {}", class_dir.display()))?;
        for (i, g) in atlas.class(entry.id).support_samples().iter().enumerate() {
            g.image.save(&class_dir.join(format!("shot_{:02}.png", i + 1)))?;
        }
    }
    Ok(())
}

/// Reads `dir/class/shot_*.png`. Classes and shots come back in sorted name
/// order, keeping at most `max_shots` shots per class.
pub fn load_supports(dir: &Path, max_shots: Option<usize>) -> Result<Vec<(String, Vec<Bitmap>)>> {
    if !dir.is_dir() {
        bail!(glyphslot::Error::Data(format!("support directory {} does not exist", dir.display())));
    }
    let mut classes: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut out = Vec::with_capacity(classes.len());
    for class_dir in classes {
        let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut shots: Vec<_> = fs::read_dir(&class_dir)
            .with_context(|| format!("listing {}", class_dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let file = p.file_name().unwrap_or_default().to_string_lossy();
                file.starts_with("shot_") && file.to_ascii_lowercase().ends_with(".png")
            })
            .collect();
        shots.sort();
        shots.truncate(max_shots.unwrap_or(usize::MAX));
        if shots.is_empty() {
            bail!(glyphslot::Error::Data(format!("support class {} has no shot_*.png", class_dir.display())));
        }
        let images = shots.iter().map(|p| Bitmap::load(p)).collect::<glyphslot::Result<Vec<_>>>()?;
        out.push((name, images));
    }
    if out.is_empty() {
        bail!(glyphslot::Error::Data(format!("support directory {} has no classes", dir.display())));
    }
    Ok(out)
}
