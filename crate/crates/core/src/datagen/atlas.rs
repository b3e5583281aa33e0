use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};

use super::Glyph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Which alphabets form the test split; all others are training alphabets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    AllTrain,
    /// The last `n` alphabets in sorted name order.
    LastAlphabets(usize),
    Named(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct Alphabet {
    pub alphabet_id: usize,
    pub name: String,
    pub split: Split,
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AtlasClass {
    pub class_id: usize,
    pub alphabet_id: usize,
    pub name: String,
    pub samples: Vec<Glyph>,
    /// Samples used to compose query lines.
    pub query_pool: Range<usize>,
    /// Samples used as support crops.
    pub support_pool: Range<usize>,
}

impl AtlasClass {
    pub fn query_samples(&self) -> &[Glyph] {
        &self.samples[self.query_pool.clone()]
    }

    pub fn support_samples(&self) -> &[Glyph] {
        &self.samples[self.support_pool.clone()]
    }
}

/// Glyphs grouped by alphabet and class. Class ids are dense and follow the
/// sorted (alphabet, class) path order.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub alphabets: Vec<Alphabet>,
    pub classes: Vec<AtlasClass>,
}

/// Query and support pool ranges for a class with `n` samples: the first 7 and
/// the last 10 of 20, otherwise 35% (at least one) and the remainder.
pub fn pool_ranges(n: usize) -> Result<(Range<usize>, Range<usize>)> {
    if n < 2 {
        return Err(Error::data(format!("class has {n} samples, need at least 2")));
    }
    if n == 20 {
        return Ok((0..7, 10..20));
    }
    let query = (n * 35 / 100).max(1);
    Ok((0..query, query..n))
}

impl Atlas {
    pub fn split_of(&self, class_id: usize) -> Split {
        self.alphabets[self.classes[class_id].alphabet_id].split
    }

    pub fn class_ids(&self, split: Split) -> Vec<usize> {
        self.alphabets
            .iter()
            .filter(|a| a.split == split)
            .flat_map(|a| a.class_ids.iter().copied())
            .collect()
    }

    pub fn class(&self, class_id: usize) -> &AtlasClass {
        &self.classes[class_id]
    }

    /// Builds an atlas from in-memory glyph samples, `alphabets[a][c]` being
    /// the samples of class `c` in alphabet `a`.
    pub fn from_samples(alphabets: Vec<(String, Split, Vec<(String, Vec<Bitmap>)>)>) -> Result<Atlas> {
        let mut out = Atlas {
            alphabets: Vec::new(),
            classes: Vec::new(),
        };
        for (alphabet_id, (name, split, classes)) in alphabets.into_iter().enumerate() {
            let mut class_ids = Vec::new();
            for (class_name, images) in classes {
                let class_id = out.classes.len();
                let (query_pool, support_pool) = pool_ranges(images.len())
                    .map_err(|e| Error::data(format!("{name}/{class_name}: {e}")))?;
                let samples = images
                    .iter()
                    .enumerate()
                    .map(|(i, img)| Glyph::new(img, class_id, alphabet_id, i))
                    .collect::<Result<Vec<_>>>()?;
                out.classes.push(AtlasClass {
                    class_id,
                    alphabet_id,
                    name: format!("{name}/{class_name}"),
                    samples,
                    query_pool,
                    support_pool,
                });
                class_ids.push(class_id);
            }
            out.alphabets.push(Alphabet {
                alphabet_id,
                name,
                split,
                class_ids,
            });
        }
        Ok(out)
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `root/alphabet/class/sample.png`.
pub fn load_atlas(root: &Path, split: &SplitSpec) -> Result<Atlas> {
    if !root.is_dir() {
        return Err(Error::data(format!("atlas root {} is not a directory", root.display())));
    }
    let alphabet_dirs = sorted_entries(root, true)?;
    if alphabet_dirs.is_empty() {
        return Err(Error::data(format!("atlas root {} has no alphabets", root.display())));
    }
    let names: Vec<String> = alphabet_dirs.iter().map(|p| file_name(p)).collect();
    let test_flags: Vec<bool> = match split {
        SplitSpec::AllTrain => vec![false; names.len()],
        SplitSpec::LastAlphabets(n) => {
            if *n > names.len() {
                return Err(Error::invalid(format!(
                    "{n} test alphabets requested, atlas has {}",
                    names.len()
                )));
            }
            (0..names.len()).map(|i| i >= names.len() - n).collect()
        }
        SplitSpec::Named(test) => {
            for t in test {
                if !names.contains(t) {
                    return Err(Error::data(format!("test alphabet {t} not in atlas")));
                }
            }
            names.iter().map(|n| test.contains(n)).collect()
        }
    };

    let mut alphabets = Vec::new();
    for ((dir, name), is_test) in alphabet_dirs.iter().zip(names).zip(test_flags) {
        let mut classes = Vec::new();
        for class_dir in sorted_entries(dir, true)? {
            let images = sorted_entries(&class_dir, false)?
                .iter()
                .map(|p| Bitmap::load(p))
                .collect::<Result<Vec<_>>>()?;
            classes.push((file_name(&class_dir), images));
        }
        let split = if is_test { Split::Test } else { Split::Train };
        alphabets.push((name, split, classes));
    }
    Atlas::from_samples(alphabets)
}
