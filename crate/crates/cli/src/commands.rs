use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glyphslot::bitmap::{load_gray, Bitmap};
use glyphslot::checkpoint::{self, CheckpointMeta};
use glyphslot::config::Config;
use glyphslot::datagen::{
    generate_corpus, load_atlas, read_corpus, write_synthetic_atlas, Glyph, GlyphStyle, SplitSpec, SynthAtlasConfig,
};
use glyphslot::decoder::{decode_line, transcription_to_string, Transcription};
use glyphslot::detector::Detector;
use glyphslot::inference::{detect_alphabet, CandidateTable, SupportClass};
use glyphslot::metrics::sweep;
use glyphslot::preprocess::{binarize, segment_lines};
use glyphslot::training::{fine_tune, train, train_on_lines, trace_csv, TrainConfig, Trained};
use log::{info, warn};
use serde::Serialize;

use crate::args::*;
use crate::supports::{class_index, load_supports, read_class_index, write_class_index, write_supports};

/// Sauvola parameters for page mode.
const BINARIZE_WINDOW: usize = 31;
const BINARIZE_K: f64 = 0.2;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenAtlas(a) => gen_atlas(&a),
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Detect(a) => detect(&a),
        Command::Transcribe(a) => transcribe(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// `model.gslt` → `model.trace.csv`.
pub fn trace_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("trace.csv")
}

fn save_trained(out: &Path, trained: &Trained, train_cfg: &TrainConfig) -> Result<()> {
    let det = &trained.detector;
    checkpoint::save(out, det, &CheckpointMeta::new(&det.config, Some(train_cfg)))?;
    write_text(&trace_path(out), &trace_csv(&trained.trace))?;
    info!("wrote {} and {}", out.display(), trace_path(out).display());
    Ok(())
}

fn gen_atlas(a: &GenAtlasArgs) -> Result<()> {
    let cfg = SynthAtlasConfig {
        alphabets: a.alphabets,
        classes_per_alphabet: a.classes,
        samples_per_class: a.samples,
        style: match a.style {
            Style::Default => GlyphStyle::default(),
            Style::Cipher => GlyphStyle::cipher(),
        },
        prefix: a.prefix.clone(),
    };
    write_synthetic_atlas(&a.out, &cfg, a.seed)?;
    info!("wrote {} alphabets to {}", a.alphabets, a.out.display());
    Ok(())
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut data = Config::load(a.config.as_deref())?.data;
    if let Some(split) = a.split {
        data.split = split;
    }
    let atlas = load_atlas(&a.atlas, &SplitSpec::LastAlphabets(a.split_args.test_alphabets))?;
    let manifest = generate_corpus(&atlas, a.lines, a.seed, &data, &a.out)?;
    write_class_index(&a.out.join("classes.json"), &class_index(&atlas, data.split))?;
    write_supports(&a.out.join("supports"), &atlas, data.split)?;
    info!("wrote {} {} lines to {}", manifest.n_lines, manifest.split, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = Config::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let trained = match (&a.atlas, &a.corpus) {
        (Some(root), _) => {
            let atlas = load_atlas(root, &SplitSpec::LastAlphabets(a.split_args.test_alphabets))?;
            train(&atlas, &cfg.train, &cfg.model)?
        }
        (None, Some(dir)) => {
            let lines = read_corpus(dir)?;
            let det = Detector::new(cfg.model.clone(), cfg.train.seed)?;
            train_on_lines(det, &lines, None, &cfg.train, cfg.train.learning_rate)?
        }
        (None, None) => unreachable!("clap requires --atlas or --corpus"),
    };
    save_trained(&a.out, &trained, &cfg.train)
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let (det, meta) = checkpoint::load(&a.ckpt)?;
    let mut tcfg = match &a.config {
        Some(p) => Config::load(Some(p))?.train,
        None => meta.train.unwrap_or_default(),
    };
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    if let Some(n) = a.iterations {
        tcfg.iterations = n;
    }
    let pages = read_corpus(&a.pages)?;
    let trained = fine_tune(&det, &pages, None, &tcfg)?;
    save_trained(&a.out, &trained, &tcfg)
}

/// Support classes numbered in directory order, with their names.
fn numbered_supports(args: &SupportArgs) -> Result<(Vec<SupportClass>, BTreeMap<usize, String>)> {
    let mut classes = Vec::new();
    let mut names = BTreeMap::new();
    for (id, (name, shots)) in load_supports(&args.supports, args.shots)?.into_iter().enumerate() {
        classes.push(support_class(id, &name, &shots)?);
        names.insert(id, name);
    }
    Ok((classes, names))
}

fn support_class(class_id: usize, name: &str, shots: &[Bitmap]) -> Result<SupportClass> {
    let shots = shots
        .iter()
        .enumerate()
        .map(|(i, b)| Glyph::new(b, class_id, 0, i))
        .collect::<glyphslot::Result<Vec<_>>>()
        .with_context(|| format!("support class {name}"))?;
    Ok(SupportClass { class_id, shots })
}

#[derive(Serialize)]
struct DetectOutput<'a> {
    #[serde(flatten)]
    table: &'a CandidateTable,
    names: Vec<&'a String>,
}

fn detect(a: &DetectArgs) -> Result<()> {
    let (det, _) = checkpoint::load(&a.ckpt)?;
    let (supports, names) = numbered_supports(&a.supports)?;
    let line = Bitmap::load(&a.line)?;
    let table = detect_alphabet(&det, &line, &supports)?;
    write_json(&a.out, &DetectOutput { table: &table, names: names.values().collect() })
}

fn transcribe(a: &TranscribeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.confidence) {
        bail!(glyphslot::Error::InvalidArgument(format!("confidence {} is outside [0, 1]", a.confidence)));
    }
    let (det, _) = checkpoint::load(&a.ckpt)?;
    let (supports, names) = numbered_supports(&a.supports)?;
    let decode = |line: &Bitmap, id: Option<String>| -> Result<(Transcription, String)> {
        let table = detect_alphabet(&det, line, &supports)?;
        let mut t = decode_line(&table, a.confidence, det.config.interruption_px);
        t.line = id;
        let text = transcription_to_string(&t, &names)?;
        Ok((t, text))
    };
    let text = match (&a.line, &a.page) {
        (Some(path), _) => {
            let (t, text) = decode(&Bitmap::load(path)?, None)?;
            write_json(&a.out, &t)?;
            text
        }
        (None, Some(path)) => {
            let page = binarize(&load_gray(path)?, BINARIZE_WINDOW, BINARIZE_K)?;
            let lines = segment_lines(&page);
            if lines.is_empty() {
                warn!("no text lines found on {}", path.display());
            }
            let mut all = Vec::with_capacity(lines.len());
            let mut texts = Vec::with_capacity(lines.len());
            for (i, line) in lines.iter().enumerate() {
                let (t, text) = decode(line, Some(format!("line_{i:03}")))?;
                all.push(t);
                texts.push(text);
            }
            write_json(&a.out, &all)?;
            texts.join("\n")
        }
        (None, None) => unreachable!("clap requires --line or --page"),
    };
    write_text(&a.out.with_extension("txt"), &format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (det, meta) = checkpoint::load(&a.ckpt)?;
    let lines = read_corpus(&a.corpus)?;
    let index = read_class_index(&a.corpus.join("classes.json"))?;
    let dir = a.supports.clone().unwrap_or_else(|| a.corpus.join("supports"));
    let mut supports = Vec::new();
    for (name, shots) in load_supports(&dir, Some(a.shots))? {
        let Some(entry) = index.iter().find(|e| e.dir == name) else {
            bail!(glyphslot::Error::Data(format!("support class {name} is not listed in the corpus classes.json")));
        };
        supports.push(support_class(entry.id, &name, &shots)?);
    }
    let (mut report, _) = sweep(&lines, &det, &supports, &a.thresholds)?;
    report.config_hash = Some(meta.config_hash.clone());
    report.seed = meta.train.as_ref().map(|t| t.seed);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    write_json(&a.out.join("report.json"), &report)?;
    print!("{}", report.to_csv());
    Ok(())
}
