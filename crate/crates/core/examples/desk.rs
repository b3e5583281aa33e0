//! Trains a model on a synthetic atlas and reports few-shot accuracy on the
//! held-out alphabets.
//!
//! Usage: `cargo run --release --example desk -- [configs/desk.json]`

use std::path::Path;
use std::time::Instant;

use glyphslot::checkpoint::{self, CheckpointMeta};
use glyphslot::config::Config;
use glyphslot::datagen::{child_rng, sample_episode, EpisodeConfig, Split, SplitSpec, SynthAtlasConfig};
use glyphslot::inference::{detect_alphabet, SupportClass};
use glyphslot::metrics::{sweep_tables, LineResult};
use glyphslot::training::{smoothed_ends, train};

const EPISODES: u64 = 20;
const N_WAY: usize = 5;
const THRESHOLDS: [f32; 3] = [0.4, 0.6, 0.8];

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let path = std::env::args().nth(1);
    let cfg = Config::load(path.as_deref().map(Path::new))?;
    let atlas = SynthAtlasConfig::default().build(7, &SplitSpec::LastAlphabets(10))?;

    let t0 = Instant::now();
    let trained = train(&atlas, &cfg.train, &cfg.model)?;
    println!("trained {} iterations in {:.1}s", cfg.train.iterations, t0.elapsed().as_secs_f64());
    if let Some((a, b)) = smoothed_ends(&trained.trace, 50) {
        println!("smoothed loss {a:.4} -> {b:.4}");
    }
    let det = trained.detector;
    checkpoint::save(Path::new("desk.gslt"), &det, &CheckpointMeta::new(&det.config, Some(&cfg.train)))?;

    let mut ep_cfg = EpisodeConfig::default();
    ep_cfg.compose.max_symbols = cfg.train.episode.compose.max_symbols;
    for k in [1, 5] {
        let mut lines = Vec::new();
        let mut tables = Vec::new();
        for e in 0..EPISODES {
            let ep = sample_episode(&atlas, Split::Test, N_WAY, k, &mut child_rng(99, e), &ep_cfg)?;
            let supports: Vec<SupportClass> =
                ep.support.iter().map(|s| SupportClass { class_id: s.class_id, shots: s.shots.clone() }).collect();
            for q in ep.queries {
                tables.push(detect_alphabet(&det, &q.image, &supports)?);
                lines.push(q);
            }
        }
        let res: Vec<LineResult> = lines.iter().zip(&tables).map(|(l, t)| LineResult { gt: &l.gt, table: t }).collect();
        let report = sweep_tables(&res, &THRESHOLDS, det.config.interruption_px, 0.5)?;
        println!("{k}-shot\n{}", report.to_csv());
    }
    Ok(())
}
