//! End-to-end runs of the `glyphslot` binary on a tiny atlas.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const SMALL_CONFIG: &str = r#"{"model":{"backbone_channels":[8,16,16,16],"fc_width":32,"anchor_scales":[20,32,48]},
  "train":{"optimizer":"adam","rpn_pos_iou":0.5,"iterations":4}}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphslot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Atlas, test corpus and a briefly trained checkpoint, built once.
fn workspace() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = |x: &str| s(&dir.path().join(x));
        fs::write(dir.path().join("small.json"), SMALL_CONFIG).unwrap();
        ok(&["gen-atlas", "--out", &p("atlas"), "--alphabets", "8", "--seed", "2"]);
        ok(&["gen", "--atlas", &p("atlas"), "--out", &p("corpus"), "--lines", "3", "--seed", "1", "--split", "test", "--test-alphabets", "3"]);
        ok(&["train", "--atlas", &p("atlas"), "--test-alphabets", "3", "--config", &p("small.json"), "--out", &p("model/m.gslt")]);
        dir
    })
}

fn path(x: &str) -> String {
    s(&workspace().path().join(x))
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["gen", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["train", "--out", "x.gslt"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_writes_corpus_index_and_supports() {
    let corpus = workspace().path().join("corpus");
    for f in ["annotations.jsonl", "manifest.json", "classes.json", "images/line_00000.png"] {
        assert!(corpus.join(f).is_file(), "{f}");
    }
    let classes: serde_json::Value = serde_json::from_str(&fs::read_to_string(corpus.join("classes.json")).unwrap()).unwrap();
    assert_eq!(classes.as_array().unwrap().len(), 3);
    for entry in classes.as_array().unwrap() {
        let dir = corpus.join("supports").join(entry["dir"].as_str().unwrap());
        let shots: Vec<String> =
            fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        assert!(!shots.is_empty());
        assert!(shots.iter().all(|f| f.starts_with("shot_") && f.ends_with(".png")));
    }
}

#[test]
fn train_writes_trace_beside_checkpoint() {
    let trace = fs::read_to_string(path("model/m.trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,total,cls,reg\n"));
    assert_eq!(trace.lines().count(), 5);
}

#[test]
fn eval_defaults_to_three_thresholds() {
    let out = path("eval_default");
    ok(&["eval", "--ckpt", &path("model/m.gslt"), "--corpus", &path("corpus"), "--out", &out]);
    let csv = fs::read_to_string(Path::new(&out).join("report.csv")).unwrap();
    let taus: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(taus, ["0.4", "0.6", "0.8"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    assert!(json["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn detect_and_transcribe_a_line() {
    let line = path("corpus/images/line_00000.png");
    let det = path("det.json");
    ok(&["detect", "--ckpt", &path("model/m.gslt"), "--line", &line, "--supports", &path("corpus/supports"), "--out", &det]);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(&det).unwrap()).unwrap();
    assert_eq!(table["classes"].as_array().unwrap().len(), 3);
    assert_eq!(table["names"].as_array().unwrap().len(), 3);

    let tr = path("tr.json");
    ok(&["transcribe", "--ckpt", &path("model/m.gslt"), "--line", &line, "--supports", &path("corpus/supports"), "--confidence", "0.5", "--out", &tr]);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&tr).unwrap()).unwrap();
    assert_eq!(t["tau"], 0.5);
    assert!(Path::new(&path("tr.txt")).is_file());
}

#[test]
fn transcribe_a_page_line_by_line() {
    // Two corpus lines stacked with blank margins.
    let a = glyphslot::bitmap::Bitmap::load(Path::new(&path("corpus/images/line_00000.png"))).unwrap();
    let b = glyphslot::bitmap::Bitmap::load(Path::new(&path("corpus/images/line_00001.png"))).unwrap();
    let mut page = glyphslot::bitmap::Bitmap::new(a.width().max(b.width()) + 40, a.height() + b.height() + 100);
    page.paste_max(&a, 20, 30);
    page.paste_max(&b, 20, (a.height() + 70) as isize);
    let page_path = path("page.png");
    page.save(Path::new(&page_path)).unwrap();
    let out = path("page.json");
    ok(&["transcribe", "--ckpt", &path("model/m.gslt"), "--page", &page_path, "--supports", &path("corpus/supports"), "--out", &out]);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(path("page.txt")).unwrap().lines().count(), 2);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let ckpt = path("model/m.gslt");
    let line = path("corpus/images/line_00000.png");
    let sup = path("corpus/supports");
    let bad_conf = run(&["transcribe", "--ckpt", &ckpt, "--line", &line, "--supports", &sup, "--confidence", "1.5", "--out", &path("x.json")]);
    assert_eq!(bad_conf.status.code(), Some(2));
    let missing = run(&["eval", "--ckpt", &path("nope.gslt"), "--corpus", &path("corpus"), "--out", &path("e")]);
    assert_eq!(missing.status.code(), Some(3));

    // A support class the corpus does not know.
    let foreign = workspace().path().join("foreign");
    fs::create_dir_all(foreign.join("zzz")).unwrap();
    fs::copy(workspace().path().join("corpus/supports/alphabet_06-character01/shot_01.png"), foreign.join("zzz/shot_01.png")).unwrap();
    let unknown = run(&["eval", "--ckpt", &ckpt, "--corpus", &path("corpus"), "--supports", &s(&foreign), "--out", &path("e2")]);
    assert_eq!(unknown.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("zzz"));
}

#[test]
fn finetune_and_train_from_corpus() {
    let ft = path("model/ft.gslt");
    ok(&["finetune", "--ckpt", &path("model/m.gslt"), "--pages", &path("corpus"), "--out", &ft, "--iterations", "2"]);
    assert_eq!(fs::read_to_string(path("model/ft.trace.csv")).unwrap().lines().count(), 3);
    let (tuned, _) = glyphslot::checkpoint::load(Path::new(&ft)).unwrap();
    let (base, _) = glyphslot::checkpoint::load(Path::new(&path("model/m.gslt"))).unwrap();
    assert_ne!(tuned.params, base.params);

    let from_corpus = path("model/c.gslt");
    ok(&["train", "--corpus", &path("corpus"), "--config", &path("small.json"), "--iterations", "2", "--out", &from_corpus]);
    assert!(Path::new(&from_corpus).is_file());
}
