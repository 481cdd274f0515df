use std::fs;
use std::path::Path;
use std::process::Command;

use dprobe_cli::config::sha256_hex;
use dprobe_cli::error::exit_code;
use dprobe_cli::runner::Manifest;
use dprobe_cli::{emit_report, run_experiment, CliError, ProbeKind, RunOptions, StageFilter, StageKind};
use dprobe_core::data::{save_dataset, LabeledDataset};
use dprobe_core::Tensor;

/// Bars whose position encodes the class: easy enough to learn in a step
/// or two, and a valid `[0,1]` 28×28 dataset.
fn bars(n: usize, offset: usize) -> LabeledDataset {
    let mut data = vec![0.0f32; n * 784];
    let labels: Vec<usize> = (0..n).map(|i| (i + offset) % 4).collect();
    for (i, &y) in labels.iter().enumerate() {
        for r in 0..28 {
            for c in (4 + 6 * y)..(7 + 6 * y) {
                data[i * 784 + r * 28 + c] = 0.6 + 0.1 * ((i + r) % 4) as f32;
            }
        }
    }
    LabeledDataset::new(Tensor::new([n, 1, 28, 28], data).unwrap(), labels, 4).unwrap()
}

const CONFIG: &str = r#"
seed = 9

[datasets.train]
saved = { dir = "data", name = "train" }

[datasets.test]
saved = { dir = "data", name = "test" }

[datasets.cue]
saved = { dir = "data", name = "cue" }

[datasets.grouped]
synth = { from = "test", domain = "grouped", seed = 4 }

[datasets.color]
synth = { from = "test", domain = "color", seed = 5 }

[datasets.composed]
compose = { from = "grouped", counts = [2, 1, 0, 3, 1, 1, 2], seed = 6 }

[[stage]]
name = "subset"
kind = "synth-data"
data = "composed"

[[stage]]
name = "teacher"
kind = "train"
data = "train"
seed_stream = 1
config = { epochs = 1, batch_size = 32, in_channels = 3 }

[[stage]]
name = "ind"
kind = "train"
data = "train"
seed_stream = 2
config = { epochs = 1, batch_size = 32, in_channels = 3 }

[[stage]]
name = "kl"
kind = "distill"
data = "train"
teacher = "teacher"
seed_stream = 2
config = { epochs = 1, batch_size = 32, in_channels = 3 }

[[stage]]
name = "acc"
kind = "probe"
probe = "accuracy"
rows = ["ind", "kl"]
columns = ["test", "color"]

[[stage]]
name = "cons"
kind = "probe"
probe = "consensus"
teacher = "teacher"
rows = ["teacher", "kl"]
columns = ["test"]

[[stage]]
name = "same_view"
kind = "probe"
probe = "invariance"
generator = "identity"
rows = ["ind"]
columns = ["color"]

[[stage]]
name = "jitter_view"
kind = "probe"
probe = "invariance"
generator = "jitter"
rows = ["ind", "kl"]
columns = ["color"]

[[stage]]
name = "fooling"
kind = "probe"
probe = "adversarial"
rows = ["teacher"]
victims = ["ind", "kl"]
columns = ["test"]
limit = 16

[[stage]]
name = "cka"
kind = "probe"
probe = "cka"
teacher = "teacher"
rows = ["ind", "kl"]
columns = ["test"]
limit = 20

[[stage]]
name = "cam"
kind = "probe"
probe = "cam"
teacher = "teacher"
independent = "ind"
rows = ["kl", "ind"]
columns = ["test"]
limit = 8

[[stage]]
name = "groups"
kind = "probe"
probe = "fairness"
rows = ["ind"]
columns = ["grouped"]

[[stage]]
name = "shape"
kind = "probe"
probe = "shape-bias"
rows = ["ind"]
columns = ["cue"]
"#;

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    save_dataset(&bars(96, 0), &data, "train").unwrap();
    save_dataset(&bars(40, 1), &data, "test").unwrap();
    let cue = bars(12, 2);
    let texture: Vec<usize> = cue.labels().iter().map(|&l| (l + 1) % 4).collect();
    save_dataset(&cue.with_secondary_labels(texture).unwrap(), &data, "cue").unwrap();
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

fn opts(ws: &Path, out: &str) -> RunOptions {
    RunOptions {
        out: Some(ws.join(out)),
        ..RunOptions::new(ws.join("exp.toml"))
    }
}

fn report_files(run: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![run.join("reports")];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(run).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    for f in ["report.csv", "report.md", "data/subset-labels.idx", "models/kl.dprb"] {
        out.push((f.to_string(), fs::read(run.join(f)).unwrap()));
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_deterministic_and_resumable() {
    let ws = workspace(CONFIG);
    let first = run_experiment(&opts(ws.path(), "a")).unwrap();
    assert_eq!(first.executed.len(), 13);
    let run = ws.path().join("a");

    // Probe invariants that hold for any trained model.
    let rep = emit_report(&run).unwrap();
    let cons = rep.section("cons").unwrap();
    assert_eq!(cons.get("teacher", "test"), Some(100.0));
    assert_eq!(rep.section("same_view").unwrap().get("ind", "color"), Some(100.0));
    let fooling = rep.section("fooling").unwrap();
    assert_eq!(fooling.columns, ["target", "victim:ind", "victim:kl"]);
    let cka = rep.section("cka").unwrap();
    assert_eq!(cka.columns[0], "diagonal");
    assert_eq!(cka.columns.len(), 17);
    let groups = rep.section("groups").unwrap();
    assert_eq!(groups.columns.last().unwrap(), "overall");
    assert_eq!(groups.columns.len(), 8);
    let acc = rep.section("acc").unwrap();
    assert_eq!(acc.rows, ["ind", "kl"]);
    assert_eq!(acc.columns, ["test", "color"]);
    assert!(rep.markdown.contains("## acc (accuracy)"));
    assert!(rep.markdown.contains("| model | test | color |"));

    // The synth-data stage wrote the composed subset with its histogram.
    let subset = dprobe_core::data::load_dataset(run.join("data"), "subset").unwrap();
    assert_eq!(subset.group_histogram().unwrap(), vec![2, 1, 0, 3, 1, 1, 2]);

    // Same config in a fresh directory: byte-identical outputs.
    run_experiment(&opts(ws.path(), "b")).unwrap();
    assert_eq!(report_files(&run), report_files(&ws.path().join("b")));

    // Same directory again: everything is up to date.
    let again = run_experiment(&opts(ws.path(), "a")).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped.len(), 13);

    let manifest = Manifest::load(&run).unwrap().unwrap();
    assert_eq!(manifest.seed, 9);
    assert_eq!(manifest.config_hash, first.config_hash);
    assert_eq!(manifest.stages.len(), 13);
    for rec in manifest.stages.values() {
        for o in &rec.outputs {
            assert!(run.join(o).exists(), "{o}");
        }
    }

    // Editing one stage re-runs it and everything downstream of it only.
    fs::write(
        ws.path().join("exp.toml"),
        CONFIG.replace("limit = 20", "limit = 21"),
    )
    .unwrap();
    let edited = run_experiment(&opts(ws.path(), "a")).unwrap();
    assert_eq!(edited.executed, ["cka"]);
    assert_ne!(edited.config_hash, first.config_hash);

    // Nothing was written outside the two run directories.
    let mut top: Vec<String> = fs::read_dir(ws.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["a", "b", "data", "exp.toml"]);
}

#[test]
fn stage_filters_and_seed_override() {
    let ws = workspace(CONFIG);
    let mut o = opts(ws.path(), "f");
    o.filter = StageFilter::Kind(StageKind::Distill);
    match run_experiment(&o) {
        Err(CliError::Input(msg)) => assert!(msg.contains("teacher"), "{msg}"),
        other => panic!("expected a missing-teacher input error, got {other:?}"),
    }
    o.filter = StageFilter::Kind(StageKind::Train);
    assert_eq!(run_experiment(&o).unwrap().executed, ["teacher", "ind"]);
    o.filter = StageFilter::Kind(StageKind::Distill);
    assert_eq!(run_experiment(&o).unwrap().executed, ["kl"]);
    o.filter = StageFilter::Probe(Some(ProbeKind::Consensus));
    assert_eq!(run_experiment(&o).unwrap().executed, ["cons"]);

    let base = run_experiment(&RunOptions {
        filter: StageFilter::Kind(StageKind::SynthData),
        ..opts(ws.path(), "s1")
    })
    .unwrap();
    let reseeded = run_experiment(&RunOptions {
        filter: StageFilter::Kind(StageKind::SynthData),
        seed: Some(10),
        ..opts(ws.path(), "s2")
    })
    .unwrap();
    assert_ne!(base.config_hash, reseeded.config_hash);
    assert_eq!(Manifest::load(&ws.path().join("s2")).unwrap().unwrap().seed, 10);
}

#[test]
fn external_models_resolve_from_sibling_runs() {
    let ws = workspace(CONFIG);
    let mut o = opts(ws.path(), "runs/base");
    o.filter = StageFilter::Kind(StageKind::Train);
    run_experiment(&o).unwrap();
    let child = r#"
seed = 1
[datasets.test]
saved = { dir = "data", name = "test" }
[models.t]
run = "base"
stage = "teacher"
[models.file]
checkpoint = "runs/base/models/ind.dprb"
[[stage]]
name = "cons"
kind = "probe"
probe = "consensus"
teacher = "t"
rows = ["file"]
columns = ["test"]
"#;
    fs::write(ws.path().join("child.toml"), child).unwrap();
    let r = run_experiment(&RunOptions {
        out: Some(ws.path().join("runs/child")),
        ..RunOptions::new(ws.path().join("child.toml"))
    })
    .unwrap();
    assert_eq!(r.executed, ["cons"]);
    let rep = emit_report(&ws.path().join("runs/child")).unwrap();
    let v = rep.section("cons").unwrap().get("file", "test").unwrap();
    assert!((0.0..=100.0).contains(&v));

    // Replacing an external checkpoint invalidates the stages that read it.
    let ind = fs::read(ws.path().join("runs/base/models/ind.dprb")).unwrap();
    let teacher = fs::read(ws.path().join("runs/base/models/teacher.dprb")).unwrap();
    assert_ne!(sha256_hex(&ind), sha256_hex(&teacher));
    fs::write(ws.path().join("runs/base/models/ind.dprb"), &teacher).unwrap();
    let r = run_experiment(&RunOptions {
        out: Some(ws.path().join("runs/child")),
        ..RunOptions::new(ws.path().join("child.toml"))
    })
    .unwrap();
    assert_eq!(r.executed, ["cons"]);
    let rep = emit_report(&ws.path().join("runs/child")).unwrap();
    assert_eq!(rep.section("cons").unwrap().get("file", "test"), Some(100.0));
}

#[test]
fn error_categories() {
    let ws = workspace(&CONFIG.replace("kind = \"synth-data\"", "kind = \"synthesize\""));
    let err = run_experiment(&opts(ws.path(), "x")).unwrap_err();
    assert_eq!(err.exit_code(), exit_code::CONFIG);
    assert!(err.to_string().contains("stage[0].kind"), "{err}");

    let ws = workspace(&CONFIG.replace("name = \"test\" }", "name = \"absent\" }"));
    let err = run_experiment(&opts(ws.path(), "x")).unwrap_err();
    assert_eq!(err.exit_code(), exit_code::INPUT, "{err}");

    let err = run_experiment(&RunOptions::new(ws.path().join("nope.toml"))).unwrap_err();
    assert_eq!(err.exit_code(), exit_code::INPUT);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(emit_report(empty.path()).unwrap_err().exit_code(), exit_code::INPUT);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dprobe");
    let ws = workspace(&CONFIG.replace("seed = 9", "seed = \"nine\""));
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(ws.path().join("exp.toml"))
        .arg("--out")
        .arg(ws.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit_code::CONFIG as i32));

    let status = Command::new(bin).args(["probe", "bogus", "--config", "x.toml"]).status().unwrap();
    assert_eq!(status.code(), Some(exit_code::USAGE as i32));

    let empty = tempfile::tempdir().unwrap();
    let status = Command::new(bin).arg("report").arg("--out").arg(empty.path()).status().unwrap();
    assert_eq!(status.code(), Some(exit_code::INPUT as i32));

    let ws = workspace(CONFIG);
    let out = Command::new(bin)
        .args(["synth-data", "--config"])
        .arg(ws.path().join("exp.toml"))
        .arg("--out")
        .arg(ws.path().join("o"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path().join("o/data/subset-images.idx").exists());
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| {
            dprobe_cli::LoadedConfig::load(&p, None).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            p.file_stem().unwrap().to_string_lossy().into_owned()
        })
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "adversarial_transfer",
            "cka_similarity",
            "color_invariance",
            "fairness_composition",
            "mnist_domain_adapt",
            "no_gain_distill",
            "pseudo_soft_ablation"
        ]
    );
}
