//! Glyph atlases, random glyph transforms, synthetic line composition and
//! N-way K-shot episode sampling.

mod atlas;
mod compose;
mod corpus;
mod episode;
mod glyph;
mod synth;
mod transform;

pub use atlas::{load_atlas, pool_ranges, Alphabet, Atlas, AtlasClass, Split, SplitSpec};
pub use compose::{compose_line, ComposeConfig, GtBox, LineSample, MAX_SYMBOLS, MIN_SYMBOLS};
pub use corpus::{
    generate_corpus, generate_line, read_corpus, write_lines, Annotation, CorpusConfig, Manifest,
};
pub use episode::{sample_episode, Episode, EpisodeConfig, SupportSet};
pub use glyph::Glyph;
pub use synth::{write_synthetic_atlas, GlyphStyle, Prototype, SynthAtlasConfig};
pub use transform::{transform_glyph, GlyphTransform, Morph};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent child seed for item `index` of a run seeded with `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, index))
}
