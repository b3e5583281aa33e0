use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{compose_line, transform_glyph, Atlas, ComposeConfig, Glyph, LineSample, Split, MAX_SYMBOLS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Query lines per episode.
    pub queries: usize,
    pub compose: ComposeConfig,
    /// Extra classes that may appear in queries without a support set.
    pub distractor_classes: usize,
    pub transform_queries: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            queries: 1,
            compose: ComposeConfig::default(),
            distractor_classes: 0,
            transform_queries: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub class_id: usize,
    pub shots: Vec<Glyph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<SupportSet>,
    pub queries: Vec<LineSample>,
}

/// Samples an N-way K-shot episode from one split. Supports come from the
/// support pools, query glyphs from the query pools, and every support class
/// appears at least once across the query lines.
pub fn sample_episode<R: Rng>(
    atlas: &Atlas,
    split: Split,
    n_way: usize,
    k_shot: usize,
    rng: &mut R,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || cfg.queries == 0 {
        return Err(Error::invalid("episodes need n_way, k_shot and queries >= 1"));
    }
    let classes = atlas.class_ids(split);
    if classes.len() < n_way {
        return Err(Error::invalid(format!(
            "{n_way}-way episode requested but the {split} split has {} classes",
            classes.len()
        )));
    }
    let picked = index::sample(rng, classes.len(), n_way).into_vec();
    let chosen: Vec<usize> = picked.iter().map(|&i| classes[i]).collect();

    let mut support = Vec::with_capacity(n_way);
    for &class_id in &chosen {
        let pool = atlas.class(class_id).support_samples();
        if pool.len() < k_shot {
            return Err(Error::invalid(format!(
                "class {class_id} has {} support samples, {k_shot} requested",
                pool.len()
            )));
        }
        let shots = index::sample(rng, pool.len(), k_shot)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        support.push(SupportSet { class_id, shots });
    }

    let mut pool_classes = chosen.clone();
    if cfg.distractor_classes > 0 {
        let rest: Vec<usize> = classes.iter().copied().filter(|c| !chosen.contains(c)).collect();
        pool_classes.extend(rest.choose_multiple(rng, cfg.distractor_classes.min(rest.len())));
    }

    let mut lengths: Vec<usize> = (0..cfg.queries)
        .map(|_| rng.gen_range(cfg.compose.min_symbols..=cfg.compose.max_symbols))
        .collect();
    let mut i = 0;
    while lengths.iter().sum::<usize>() < n_way {
        if lengths.iter().all(|&l| l >= MAX_SYMBOLS) {
            return Err(Error::invalid(format!(
                "{} query lines cannot hold all {n_way} classes",
                cfg.queries
            )));
        }
        if lengths[i] < MAX_SYMBOLS {
            lengths[i] += 1;
        }
        i = (i + 1) % lengths.len();
    }
    let total: usize = lengths.iter().sum();
    let mut slots: Vec<usize> = (0..total).map(|_| pool_classes[rng.gen_range(0..pool_classes.len())]).collect();
    let forced = index::sample(rng, total, n_way).into_vec();
    for (slot, &class_id) in forced.iter().zip(&chosen) {
        slots[*slot] = class_id;
    }

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut offset = 0;
    for len in lengths {
        let glyphs: Vec<Glyph> = slots[offset..offset + len]
            .iter()
            .map(|&c| {
                let pool = atlas.class(c).query_samples();
                let g = &pool[rng.gen_range(0..pool.len())];
                if cfg.transform_queries {
                    transform_glyph(g, rng)
                } else {
                    g.clone()
                }
            })
            .collect();
        offset += len;
        queries.push(compose_line(&glyphs, rng, &cfg.compose)?);
    }

    Ok(Episode {
        n_way,
        k_shot,
        support,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{child_rng, SplitSpec, SynthAtlasConfig};

    fn atlas() -> Atlas {
        SynthAtlasConfig {
            alphabets: 8,
            classes_per_alphabet: 1,
            samples_per_class: 20,
            ..Default::default()
        }
        .build(2, &SplitSpec::LastAlphabets(2))
        .unwrap()
    }

    #[test]
    fn five_way_one_shot() {
        let a = atlas();
        let ep = sample_episode(&a, Split::Train, 5, 1, &mut child_rng(0, 0), &EpisodeConfig::default()).unwrap();
        let mut ids: Vec<usize> = ep.support.iter().map(|s| s.class_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert!(ep.support.iter().all(|s| s.shots.len() == 1));
        let labels = ep.queries[0].labels();
        assert!(ids.iter().all(|c| labels.contains(c)));
        assert!(labels.iter().all(|c| ids.contains(c)));
    }

    #[test]
    fn five_shot_gives_twenty_five_crops() {
        let a = atlas();
        let ep = sample_episode(&a, Split::Train, 5, 5, &mut child_rng(0, 1), &EpisodeConfig::default()).unwrap();
        assert_eq!(ep.support.iter().map(|s| s.shots.len()).sum::<usize>(), 25);
        for s in &ep.support {
            let idx: Vec<usize> = s.shots.iter().map(|g| g.sample_index).collect();
            assert!(idx.iter().all(|&i| i >= 10), "support pool is samples 11..20");
            let mut d = idx.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 5);
        }
    }

    #[test]
    fn too_many_ways_is_an_error() {
        let a = atlas();
        let r = sample_episode(&a, Split::Test, 3, 1, &mut child_rng(0, 2), &EpisodeConfig::default());
        assert!(r.is_err());
        let r = sample_episode(&a, Split::Train, 2, 11, &mut child_rng(0, 2), &EpisodeConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn test_split_episodes_stay_in_test_classes() {
        let a = atlas();
        let test_ids = a.class_ids(Split::Test);
        let ep = sample_episode(&a, Split::Test, 2, 1, &mut child_rng(3, 0), &EpisodeConfig::default()).unwrap();
        assert!(ep.support.iter().all(|s| test_ids.contains(&s.class_id)));
        assert!(ep.queries[0].labels().iter().all(|c| test_ids.contains(c)));
    }
}
